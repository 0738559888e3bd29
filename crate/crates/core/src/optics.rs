//! Scalar 3D point-spread-function and optical-transfer-function models.
//!
//! The PSF uses an angular-spectrum defocus model: each axial slice is the
//! squared modulus of the pupil field propagated by
//! `exp(i*2*pi*z*sqrt((n/lambda)^2 - |k|^2))`. The 3D OTF is the DFT of the
//! resulting stack, DC-normalized so that Wiener constants downstream are
//! dimensionless. Axial projections of the (laterally offset) 3D OTF supply
//! the effective 2D transfer functions used by the reconstruction.

use crate::fft::{self, C64};
use crate::par;
use crate::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Microscope geometry and sampling. Governs every transfer function.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticalConfig {
    /// Numerical aperture (dimensionless).
    pub na: f64,
    /// Emission wavelength in nm; sets the detection OTF.
    pub wavelength_em: f64,
    /// Excitation wavelength in nm; illumination geometry only.
    pub wavelength_ex: f64,
    /// Lateral sample-plane pixel pitch in nm.
    pub pixel_size: f64,
    /// Axial slice spacing in nm.
    pub z_step: f64,
    /// Immersion refractive index (dimensionless).
    pub refractive_index: f64,
    /// Lateral grid size in pixels (square).
    pub grid_xy: usize,
    /// Axial grid size in slices.
    pub grid_z: usize,
}

impl OpticalConfig {
    /// Validate the geometric invariants.
    ///
    /// Lateral under-sampling relative to the emission cutoff is *not*
    /// rejected here; aliased illumination patterns are caught at pattern
    /// generation instead.
    pub fn validate(&self) -> Result<()> {
        if !(self.na > 0.0 && self.na < self.refractive_index) {
            return Err(Error::validation(format!(
                "need 0 < NA < refractive index, got NA={} n={}",
                self.na, self.refractive_index
            )));
        }
        if self.wavelength_em <= 0.0 || self.wavelength_ex <= 0.0 {
            return Err(Error::validation("wavelengths must be positive"));
        }
        if self.pixel_size <= 0.0 {
            return Err(Error::validation("pixel_size must be positive"));
        }
        if self.z_step <= 0.0 {
            return Err(Error::validation("z_step must be positive"));
        }
        if self.grid_xy < 8 || self.grid_z < 8 {
            return Err(Error::validation(format!(
                "grid sizes must be >= 8, got {}x{}",
                self.grid_xy, self.grid_z
            )));
        }
        Ok(())
    }

    /// Incoherent detection cutoff `2*NA/lambda_em` in cycles/nm.
    pub fn cutoff_em(&self) -> f64 {
        2.0 * self.na / self.wavelength_em
    }

    /// Pupil radius `NA/lambda_em` in cycles/nm.
    pub fn pupil_radius(&self) -> f64 {
        self.na / self.wavelength_em
    }

    /// Lateral frequency step `1/(grid_xy*pixel_size)` in cycles/nm.
    pub fn dk_xy(&self) -> f64 {
        1.0 / (self.grid_xy as f64 * self.pixel_size)
    }

    /// Axial frequency step `1/(grid_z*z_step)` in cycles/nm.
    pub fn dk_z(&self) -> f64 {
        1.0 / (self.grid_z as f64 * self.z_step)
    }

    /// Lateral Nyquist frequency `1/(2*pixel_size)` in cycles/nm.
    pub fn nyquist(&self) -> f64 {
        1.0 / (2.0 * self.pixel_size)
    }
}

/// 3D optical transfer function on the FFT-natural `(kz, ky, kx)` grid.
///
/// DC sits at `[0, 0, 0]` and equals 1 after normalization; the values of a
/// real PSF are Hermitian.
#[derive(Debug, Clone)]
pub struct Otf3D {
    pub values: Array3<C64>,
    /// `(dk_xy, dk_z)` in cycles/nm.
    pub freq_steps: (f64, f64),
}

/// Axial projection of the 3D OTF taken at a lateral frequency offset.
#[derive(Debug, Clone)]
pub struct Effective2DOtf {
    /// FFT-natural layout, DC at `[0, 0]`.
    pub values: Array2<C64>,
    /// Lateral offset `(ky, kx)` this projection was taken at, cycles/nm.
    pub shift: [f64; 2],
    /// Lateral frequency step of `values`, cycles/nm.
    pub dk: f64,
}

/// Unit-amplitude pupil disk of radius `NA/lambda_em`, FFT-natural layout.
pub fn make_pupil(config: &OpticalConfig) -> Result<Array2<C64>> {
    config.validate()?;
    let n = config.grid_xy;
    let dk = config.dk_xy();
    let r = config.pupil_radius();
    let mut pupil = Array2::zeros((n, n));
    for ((y, x), v) in pupil.indexed_iter_mut() {
        let ky = fft::signed_index(y, n) as f64 * dk;
        let kx = fft::signed_index(x, n) as f64 * dk;
        if (ky * ky + kx * kx).sqrt() <= r {
            *v = C64::new(1.0, 0.0);
        }
    }
    Ok(pupil)
}

/// One lateral PSF slice at the given defocus in nm, centered in the array
/// and normalized to unit total intensity.
pub fn psf_slice(config: &OpticalConfig, defocus_nm: f64) -> Result<Array2<f64>> {
    let pupil = make_pupil(config)?;
    Ok(psf_slice_from_pupil(config, &pupil, defocus_nm))
}

fn psf_slice_from_pupil(config: &OpticalConfig, pupil: &Array2<C64>, defocus_nm: f64) -> Array2<f64> {
    let n = config.grid_xy;
    let dk = config.dk_xy();
    let n_over_lambda = config.refractive_index / config.wavelength_em;
    let mut field = Array2::zeros((n, n));
    for ((y, x), v) in field.indexed_iter_mut() {
        let p = pupil[[y, x]];
        if p.norm_sqr() == 0.0 {
            continue;
        }
        let ky = fft::signed_index(y, n) as f64 * dk;
        let kx = fft::signed_index(x, n) as f64 * dk;
        let kz_sq = n_over_lambda * n_over_lambda - (ky * ky + kx * kx);
        // inside the pupil kz_sq > 0 because NA < n
        let kz = kz_sq.max(0.0).sqrt();
        *v = p * C64::from_polar(1.0, 2.0 * PI * defocus_nm * kz);
    }
    fft::ifft2(&mut field);
    let mut psf = field.mapv(|v| v.norm_sqr());
    let total = psf.sum();
    if total > 0.0 {
        psf.mapv_inplace(|v| v / total);
    }
    fft::fftshift2(&psf)
}

/// 3D PSF stack `(z, y, x)`, centered, with total volume energy 1.
///
/// Slice `iz` is at defocus `(iz - grid_z/2) * z_step` nm. Errors when the
/// lateral grid cannot contain the main lobe (FWHM > extent/4).
pub fn psf3d(config: &OpticalConfig) -> Result<Array3<f64>> {
    config.validate()?;
    let fwhm = 0.51 * config.wavelength_em / config.na;
    let extent = config.grid_xy as f64 * config.pixel_size;
    if fwhm > extent / 4.0 {
        return Err(Error::validation(format!(
            "lateral grid too small for the PSF main lobe: FWHM {fwhm:.1} nm > extent/4 = {:.1} nm",
            extent / 4.0
        )));
    }
    let pupil = make_pupil(config)?;
    let nz = config.grid_z;
    let n = config.grid_xy;
    let center = (nz / 2) as isize;
    let slices: Vec<Array2<f64>> = par::map_collect((0..nz).collect(), |iz| {
        let defocus = (iz as isize - center) as f64 * config.z_step;
        psf_slice_from_pupil(config, &pupil, defocus)
    });
    let mut stack = Array3::zeros((nz, n, n));
    for (iz, s) in slices.into_iter().enumerate() {
        let scaled = s.mapv(|v| v / nz as f64);
        stack.index_axis_mut(ndarray::Axis(0), iz).assign(&scaled);
    }
    Ok(stack)
}

/// 3D DFT of a centered PSF stack, DC-normalized to 1.
pub fn otf3d(psf: &Array3<f64>, config: &OpticalConfig) -> Result<Otf3D> {
    let total = psf.sum();
    if total <= 0.0 {
        return Err(Error::numerical("all-zero PSF has no transfer function"));
    }
    let (nz, ny, nx) = psf.dim();
    // undo the centering before the transform so DC lands at [0,0,0]
    let mut vol = Array3::zeros((nz, ny, nx));
    for ((z, y, x), v) in vol.indexed_iter_mut() {
        let sz = (z + nz / 2) % nz;
        let sy = (y + ny / 2) % ny;
        let sx = (x + nx / 2) % nx;
        *v = C64::new(psf[[sz, sy, sx]], 0.0);
    }
    fft::fft3_dir(&mut vol, false);
    let dc = vol[[0, 0, 0]];
    vol.mapv_inplace(|v| v / dc);
    Ok(Otf3D {
        values: vol,
        freq_steps: (config.dk_xy(), config.dk_z()),
    })
}

impl Otf3D {
    /// Sum of the OTF over all axial frequency bins, as a 2D array.
    ///
    /// This is the (unscaled) axial projection; multiplying by `dk_z` gives
    /// the physical projection integral.
    pub fn axial_sum(&self) -> Array2<C64> {
        let (nz, ny, nx) = self.values.dim();
        let mut out = Array2::zeros((ny, nx));
        for z in 0..nz {
            out += &self.values.index_axis(ndarray::Axis(0), z);
        }
        out
    }
}

/// Bilinear sample of a 2D FFT-natural array at continuous signed
/// frequency-bin coordinates; out-of-range samples contribute zero.
pub(crate) fn sample_bilinear(a: &Array2<C64>, u: f64, v: f64) -> C64 {
    let (rows, cols) = a.dim();
    let lo_r = -((rows / 2) as isize);
    let hi_r = ((rows - 1) / 2) as isize;
    let lo_c = -((cols / 2) as isize);
    let hi_c = ((cols - 1) / 2) as isize;
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let mut acc = C64::new(0.0, 0.0);
    for (du, wu) in [(0isize, 1.0 - fu), (1, fu)] {
        if wu == 0.0 {
            continue;
        }
        let ui = u0 as isize + du;
        if ui < lo_r || ui > hi_r {
            continue;
        }
        for (dv, wv) in [(0isize, 1.0 - fv), (1, fv)] {
            if wv == 0.0 {
                continue;
            }
            let vi = v0 as isize + dv;
            if vi < lo_c || vi > hi_c {
                continue;
            }
            acc += a[[fft::wrap_index(ui, rows), fft::wrap_index(vi, cols)]] * (wu * wv);
        }
    }
    acc
}

/// Project the 3D OTF along the axial frequency axis at a lateral offset,
/// sampled onto an arbitrary target grid.
///
/// `values(k) = sum_kz otf(k + shift, kz) * dk_z`, with off-grid lateral
/// samples obtained by bilinear interpolation and out-of-support samples
/// contributing zero. `shift` is `(ky, kx)` in cycles/nm.
pub fn project_otf_onto(otf: &Otf3D, shift: [f64; 2], n_target: usize, dk_target: f64) -> Array2<C64> {
    let summed = otf.axial_sum();
    let (dk_xy, dk_z) = otf.freq_steps;
    let mut out = Array2::zeros((n_target, n_target));
    let slice = out.as_slice_mut().expect("contiguous");
    par::for_each_chunk_mut(slice, n_target, |r, row| {
        let ky = fft::signed_index(r, n_target) as f64 * dk_target;
        let u = (ky + shift[0]) / dk_xy;
        for (c, v) in row.iter_mut().enumerate() {
            let kx = fft::signed_index(c, n_target) as f64 * dk_target;
            let w = (kx + shift[1]) / dk_xy;
            *v = sample_bilinear(&summed, u, w) * dk_z;
        }
    });
    out
}

/// Axial projection at a lateral offset on the OTF's own lateral grid.
pub fn project_otf(otf: &Otf3D, shift: [f64; 2]) -> Effective2DOtf {
    let n = otf.values.dim().1;
    let dk = otf.freq_steps.0;
    Effective2DOtf {
        values: project_otf_onto(otf, shift, n, dk),
        shift,
        dk,
    }
}
