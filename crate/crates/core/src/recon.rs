//! Super-resolved reconstruction from separated spectral components.
//!
//! Each component is embedded in an upsampled grid and translated back to
//! its true spectral position; its effective 2D transfer function is the
//! axial projection of the 3D OTF taken at the same lateral offset. The
//! zeroth- and second-order components form one generalized-Wiener group,
//! the first orders another, and the two groups are summed:
//!
//! `M(k) = sum_g [ sum_i C_i h_i* ] / [ sum_i |h_i|^2 + w_g^2 ]`
//!
//! The conventional two-beam baseline uses one global group weighted by
//! the widefield transfer function.

use crate::demod::ComponentSet;
use crate::fft::{self, C64};
use crate::illum::{COM_GROUP, MIS_GROUP, N_COMPONENTS};
use crate::optics::{self, OpticalConfig, Otf3D};
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Final spectral window shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Apodization {
    Triangle,
    RaisedCosine,
    None,
}

/// Which spectral groups enter the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    /// Both groups: full composite reconstruction.
    Full4i,
    /// First-order (missing-cone-compensating) group only.
    FirstOnly,
    /// Zeroth- plus second-order group only.
    SecondOnly,
    /// Conventional two-beam baseline.
    Conventional,
}

impl std::fmt::Display for ReconMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ReconMode::Full4i => "full_4i",
            ReconMode::FirstOnly => "first_only",
            ReconMode::SecondOnly => "second_only",
            ReconMode::Conventional => "conventional",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ReconMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_4i" => Ok(ReconMode::Full4i),
            "first_only" => Ok(ReconMode::FirstOnly),
            "second_only" => Ok(ReconMode::SecondOnly),
            "conventional" => Ok(ReconMode::Conventional),
            other => Err(Error::validation(format!("unknown mode '{other}'"))),
        }
    }
}

/// Reconstruction parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Wiener constant of the zeroth/second-order group (also used by the
    /// conventional baseline).
    pub w_mis: f64,
    /// Wiener constant of the first-order group.
    pub w_com: f64,
    /// Integer upsampling factor (>= 2); raised automatically when the
    /// extended support would exceed the upsampled Nyquist.
    pub upsample: usize,
    pub apodization: Apodization,
    /// Apodization cutoff in cycles/nm; defaults to the extended support
    /// `detection cutoff + max component shift`.
    pub apodization_cutoff: Option<f64>,
    pub mode: ReconMode,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            w_mis: 0.05,
            w_com: 0.05,
            upsample: 2,
            apodization: Apodization::Triangle,
            apodization_cutoff: None,
            mode: ReconMode::Full4i,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_mis <= 0.0 || self.w_com <= 0.0 {
            return Err(Error::validation("Wiener constants must be positive"));
        }
        if self.upsample < 2 {
            return Err(Error::validation("upsample factor must be at least 2"));
        }
        Ok(())
    }
}

/// A reconstructed image on the upsampled pitch.
#[derive(Debug, Clone)]
pub struct SrImage {
    pub pixels: Array2<f64>,
    /// nm per pixel.
    pub pixel_size: f64,
    /// Hermitian asymmetry of the final spectrum before the inverse
    /// transform, relative to its peak.
    pub hermitian_residual: f64,
    /// Peak imaginary part of the inverse transform relative to the peak
    /// real part.
    pub imag_residual: f64,
}

/// Embed a base-grid spectrum into an `upsample`-times larger grid and
/// translate it so content measured at offset `shift` returns to its true
/// position (a translation by `-shift`, applied as an exact complex
/// exponential ramp in the spatial domain of the upsampled field).
///
/// `shift` is `[ky, kx]` in cycles/nm; `pixel_size` is the base-grid pitch.
pub fn place_component(
    spectrum: &Array2<C64>,
    shift: [f64; 2],
    upsample: usize,
    pixel_size: f64,
) -> Result<Array2<C64>> {
    let (rows, cols) = spectrum.dim();
    let m_rows = rows * upsample;
    let m_cols = cols * upsample;
    // both grids share the same frequency step, so shifts keep their
    // frequency-pixel values
    let shift_px = [
        shift[0] * rows as f64 * pixel_size,
        shift[1] * cols as f64 * pixel_size,
    ];
    let nyq_r = (m_rows / 2) as f64;
    let nyq_c = (m_cols / 2) as f64;
    if shift_px[0].abs() > nyq_r || shift_px[1].abs() > nyq_c {
        return Err(Error::validation(
            "component shift beyond the upsampled Nyquist",
        ));
    }
    let mut out = Array2::zeros((m_rows, m_cols));
    for y in 0..rows {
        let fy = fft::signed_index(y, rows);
        for x in 0..cols {
            let fx = fft::signed_index(x, cols);
            out[[fft::wrap_index(fy, m_rows), fft::wrap_index(fx, m_cols)]] = spectrum[[y, x]];
        }
    }
    if shift_px[0] != 0.0 || shift_px[1] != 0.0 {
        out = fft::shift_spectrum(&out, (-shift_px[0], -shift_px[1]));
    }
    Ok(out)
}

/// Effective 2D transfer functions of all components on the upsampled
/// grid: the axial OTF projection translated to each component's
/// true-position frame, normalized so the zero-shift projection is 1 at
/// the origin.
pub fn effective_otfs(
    otf: &Otf3D,
    shifts: &[[f64; 2]; N_COMPONENTS],
    upsample: usize,
    config: &OpticalConfig,
) -> Vec<Array2<C64>> {
    let embedded = embed_normalized(&optics::project_otf(otf, [0.0, 0.0]).values, upsample);
    let to_px = config.grid_xy as f64 * config.pixel_size;
    shifts
        .iter()
        .map(|s| {
            if s[0] == 0.0 && s[1] == 0.0 {
                embedded.clone()
            } else {
                // h_i(k) = T(k + s_i): translate by -s_i, exactly
                fft::shift_otf(&embedded, (-s[0] * to_px, -s[1] * to_px))
            }
        })
        .collect()
}

/// DC-normalize a base-grid transfer function and embed it in an
/// `upsample`-times larger grid.
fn embed_normalized(base: &Array2<C64>, upsample: usize) -> Array2<C64> {
    let (rows, cols) = base.dim();
    let dc = base[[0, 0]];
    let mut out = Array2::zeros((rows * upsample, cols * upsample));
    for y in 0..rows {
        let fy = fft::signed_index(y, rows);
        for x in 0..cols {
            let fx = fft::signed_index(x, cols);
            out[[
                fft::wrap_index(fy, rows * upsample),
                fft::wrap_index(fx, cols * upsample),
            ]] = base[[y, x]] / dc;
        }
    }
    out
}

/// Radially symmetric spectral window: 1 at DC, 0 at `cutoff`.
pub fn apodize(spectrum: &mut Array2<C64>, apodization: Apodization, cutoff: f64, dk: f64) {
    if apodization == Apodization::None {
        return;
    }
    let (rows, cols) = spectrum.dim();
    for ((y, x), v) in spectrum.indexed_iter_mut() {
        let ky = fft::signed_index(y, rows) as f64 * dk;
        let kx = fft::signed_index(x, cols) as f64 * dk;
        let r = (ky * ky + kx * kx).sqrt() / cutoff;
        let w = match apodization {
            Apodization::Triangle => (1.0 - r).max(0.0),
            Apodization::RaisedCosine => {
                if r < 1.0 {
                    0.5 * (1.0 + (std::f64::consts::PI * r).cos())
                } else {
                    0.0
                }
            }
            Apodization::None => 1.0,
        };
        *v *= w;
    }
}

fn max_shift_magnitude(shifts: &[[f64; 2]]) -> f64 {
    shifts
        .iter()
        .map(|s| (s[0] * s[0] + s[1] * s[1]).sqrt())
        .fold(0.0, f64::max)
}

fn required_upsample(config: &OpticalConfig, max_shift: f64, requested: usize) -> usize {
    // the upsampled Nyquist must cover detection cutoff + max shift
    let needed = (config.cutoff_em() + max_shift) * 2.0 * config.pixel_size;
    let mut up = requested.max(2);
    while (up as f64) < needed {
        up += 1;
    }
    up
}

fn finish(
    mut spectrum: Array2<C64>,
    config: &ReconConfig,
    optical: &OpticalConfig,
    upsample: usize,
    max_shift: f64,
) -> SrImage {
    let m = spectrum.dim().0;
    let pixel_size = optical.pixel_size / upsample as f64;
    let dk = 1.0 / (m as f64 * pixel_size);
    let cutoff = config
        .apodization_cutoff
        .unwrap_or(optical.cutoff_em() + max_shift);
    apodize(&mut spectrum, config.apodization, cutoff, dk);
    let hermitian_residual = fft::hermitian_residual(&spectrum);
    fft::ifft2(&mut spectrum);
    let peak_re = spectrum.iter().map(|v| v.re.abs()).fold(0.0f64, f64::max);
    let peak_im = spectrum.iter().map(|v| v.im.abs()).fold(0.0f64, f64::max);
    SrImage {
        pixels: spectrum.mapv(|v| v.re),
        pixel_size,
        hermitian_residual,
        imag_residual: if peak_re > 0.0 { peak_im / peak_re } else { 0.0 },
    }
}

/// Composite reconstruction from the nine separated components.
///
/// The components must be normalized (separated with the true depths and
/// initial phases in the mixing matrix). Modes select which groups enter;
/// `second_only` keeps the zeroth order alongside the four second orders.
pub fn reconstruct(
    components: &ComponentSet,
    otf: &Otf3D,
    config: &ReconConfig,
    optical: &OpticalConfig,
) -> Result<SrImage> {
    config.validate()?;
    if config.mode == ReconMode::Conventional {
        return Err(Error::validation(
            "conventional mode reconstructs from per-orientation components",
        ));
    }
    if components.spectra.len() != N_COMPONENTS {
        return Err(Error::validation(format!(
            "expected {} components, got {}",
            N_COMPONENTS,
            components.spectra.len()
        )));
    }
    let groups: Vec<(&[usize], f64)> = match config.mode {
        ReconMode::Full4i => vec![(&MIS_GROUP[..], config.w_mis), (&COM_GROUP[..], config.w_com)],
        ReconMode::FirstOnly => vec![(&COM_GROUP[..], config.w_com)],
        ReconMode::SecondOnly => vec![(&MIS_GROUP[..], config.w_mis)],
        ReconMode::Conventional => unreachable!(),
    };
    let max_shift = max_shift_magnitude(&components.shifts);
    let upsample = required_upsample(optical, max_shift, config.upsample);
    let otfs = effective_otfs(otf, &components.shifts, upsample, optical);

    // a component with no data carries no information; keeping its OTF in
    // the denominator would only attenuate the group (group collapse in
    // the zero-modulation limit)
    let energies: Vec<f64> = components
        .spectra
        .iter()
        .map(|s| s.iter().map(|v| v.norm_sqr()).sum())
        .collect();
    let peak_energy = energies.iter().cloned().fold(0.0f64, f64::max);
    if peak_energy == 0.0 {
        return Err(Error::numerical("all components are empty"));
    }

    let m = optical.grid_xy * upsample;
    let mut acc: Array2<C64> = Array2::zeros((m, m));
    for (indices, w) in groups {
        let mut num: Array2<C64> = Array2::zeros((m, m));
        let mut den: Array2<f64> = Array2::from_elem((m, m), w * w);
        let mut used = 0usize;
        for &i in indices {
            if energies[i] < 1e-24 * peak_energy {
                continue;
            }
            used += 1;
            let placed = place_component(
                &components.spectra[i],
                components.shifts[i],
                upsample,
                optical.pixel_size,
            )?;
            for ((y, x), a) in num.indexed_iter_mut() {
                let h = otfs[i][[y, x]];
                *a += placed[[y, x]] * h.conj();
                den[[y, x]] += h.norm_sqr();
            }
        }
        if used == 0 {
            continue;
        }
        for ((y, x), a) in acc.indexed_iter_mut() {
            *a += num[[y, x]] / den[[y, x]];
        }
    }
    Ok(finish(acc, config, optical, upsample, max_shift))
}

/// Conventional two-beam baseline: one generalized-Wiener group over all
/// orientation components, each weighted by the widefield transfer
/// function translated to its shift.
pub fn reconstruct_conventional(
    components: &[(Array2<C64>, [f64; 2])],
    otf2d: &Array2<C64>,
    config: &ReconConfig,
    optical: &OpticalConfig,
) -> Result<SrImage> {
    config.validate()?;
    if components.is_empty() {
        return Err(Error::validation("no components to reconstruct"));
    }
    let shifts: Vec<[f64; 2]> = components.iter().map(|(_, s)| *s).collect();
    let max_shift = max_shift_magnitude(&shifts);
    let upsample = required_upsample(optical, max_shift, config.upsample);
    let base = embed_normalized(otf2d, upsample);
    let to_px = optical.grid_xy as f64 * optical.pixel_size;
    let m = optical.grid_xy * upsample;

    let mut num: Array2<C64> = Array2::zeros((m, m));
    let mut den: Array2<f64> = Array2::from_elem((m, m), config.w_mis * config.w_mis);
    for (spectrum, shift) in components {
        let placed = place_component(spectrum, *shift, upsample, optical.pixel_size)?;
        let h = if shift[0] == 0.0 && shift[1] == 0.0 {
            base.clone()
        } else {
            fft::shift_otf(&base, (-shift[0] * to_px, -shift[1] * to_px))
        };
        for ((y, x), a) in num.indexed_iter_mut() {
            let hv = h[[y, x]];
            *a += placed[[y, x]] * hv.conj();
            den[[y, x]] += hv.norm_sqr();
        }
    }
    let mut acc: Array2<C64> = Array2::zeros((m, m));
    for ((y, x), a) in acc.indexed_iter_mut() {
        *a = num[[y, x]] / den[[y, x]];
    }
    Ok(finish(acc, config, optical, upsample, max_shift))
}
