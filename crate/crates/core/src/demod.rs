//! Frame pre-treatment and blind recovery of the nine spectral components
//! and all illumination parameters.
//!
//! Estimation runs in two stages. A provisional separation with the
//! commanded phase table and unit depths yields components that differ from
//! the ideal ones only by a constant complex gain per order; wavevectors
//! then come from cross-correlation peaks refined by a rank-1 (principal
//! component) factorization of the masked correlation field, and the
//! residual gains give modulation depth and initial phase per order.

use crate::fft::{self, C64};
use crate::forward::{FrameMode, RawFrameSet};
use crate::illum::{self, IlluminationParams, MixingMatrix, PhaseTable, N_COMPONENTS};
use crate::optics::{self, OpticalConfig};
use crate::par;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// The nine demodulated complex spectra with their shift vectors.
#[derive(Debug, Clone)]
pub struct ComponentSet {
    /// FFT-natural layout, component order as in the mixing matrix.
    pub spectra: Vec<Array2<C64>>,
    /// Lateral shift of each component, `[ky, kx]` cycles/nm.
    pub shifts: [[f64; 2]; N_COMPONENTS],
    pub params_used: IlluminationParams,
}

/// Knobs of the estimation pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Radius (frequency pixels) of the disk kept around the correlation
    /// peak for subpixel refinement.
    pub refine_radius: usize,
    /// Minimum peak significance `(peak - mean)/sd` of the correlation.
    pub snr_threshold: f64,
    /// Minimum component-to-zeroth energy ratio for detectable modulation.
    pub min_energy_ratio: f64,
    /// Frequency pixels around DC excluded from peak search and overlap.
    pub dc_exclude: usize,
    /// Magnitude floor defining the OTF support of the overlap region.
    pub overlap_otf_floor: f64,
    /// Minimum number of bins in the overlap region.
    pub min_overlap_bins: usize,
    /// Cross-validation tolerance between second-order and diagonal
    /// first-order shifts, frequency pixels.
    pub cross_validation_tol_px: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            refine_radius: 15,
            snr_threshold: 3.0,
            min_energy_ratio: 1e-6,
            dc_exclude: 5,
            overlap_otf_floor: 1e-2,
            min_overlap_bins: 100,
            cross_validation_tol_px: 0.1,
        }
    }
}

/// DC-normalized widefield 2D transfer function (the in-focus PSF slice
/// transform, equal to the axial projection of the 3D OTF at zero shift).
pub fn widefield_otf2d(config: &OpticalConfig) -> Result<Array2<C64>> {
    let psf = optics::psf_slice(config, 0.0)?;
    Ok(fft::fft2_real(&fft::ifftshift2(&psf)))
}

fn taper_profile(n: usize, width: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let d = i.min(n - 1 - i);
            if width == 0 || d >= width {
                1.0
            } else {
                0.5 * (1.0 - (PI * (d as f64 + 0.5) / width as f64).cos())
            }
        })
        .collect()
}

/// Edge tapering followed by Richardson-Lucy deconvolution.
///
/// Frames are multiplied by a raised-cosine border window of `taper_width`
/// pixels, then RL-deconvolved against the widefield PSF for
/// `rl_iterations` iterations (0 skips deconvolution).
pub fn pretreat(
    frames: &RawFrameSet,
    taper_width: usize,
    rl_iterations: usize,
    otf2d: &Array2<C64>,
) -> Result<RawFrameSet> {
    let (rows, cols) = frames.frames[0].dim();
    if taper_width >= rows.min(cols) / 4 && taper_width != 0 {
        return Err(Error::validation(format!(
            "taper width {taper_width} must be below a quarter of the grid"
        )));
    }
    let wy = taper_profile(rows, taper_width);
    let wx = taper_profile(cols, taper_width);
    let processed = par::map_collect(frames.frames.clone(), |frame| {
        let mut f = frame;
        if taper_width > 0 {
            for ((y, x), v) in f.indexed_iter_mut() {
                *v *= wy[y] * wx[x];
            }
        }
        if rl_iterations > 0 {
            f = richardson_lucy(&f, otf2d, rl_iterations);
        }
        f
    });
    Ok(RawFrameSet {
        frames: processed,
        table: frames.table.clone(),
        mode: frames.mode,
        noise_meta: frames.noise_meta,
    })
}

/// Richardson-Lucy deconvolution in the Fourier domain.
fn richardson_lucy(frame: &Array2<f64>, otf: &Array2<C64>, iterations: usize) -> Array2<f64> {
    let peak = frame.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return frame.clone();
    }
    let eps = 1e-12 * peak;
    let mut estimate = frame.clone();
    for _ in 0..iterations {
        let mut spec = fft::fft2_real(&estimate);
        spec.zip_mut_with(otf, |a, b| *a *= *b);
        let blurred = fft::ifft2_real(&spec);
        let ratio = Array2::from_shape_fn(frame.dim(), |idx| {
            let b = blurred[idx];
            if b.abs() < eps {
                frame[idx] / eps.copysign(b + f64::MIN_POSITIVE)
            } else {
                frame[idx] / b
            }
        });
        let mut rspec = fft::fft2_real(&ratio);
        rspec.zip_mut_with(otf, |a, b| *a *= b.conj());
        let correction = fft::ifft2_real(&rspec);
        estimate.zip_mut_with(&correction, |e, c| *e *= *c);
    }
    estimate
}

/// Per-frequency-bin solve `components = matrix^-1 * frame spectra`.
pub fn separate_components(
    frames: &RawFrameSet,
    matrix: &MixingMatrix,
    params: &IlluminationParams,
) -> Result<ComponentSet> {
    let spectra = separate_spectra(&frames.frames, matrix)?;
    Ok(ComponentSet {
        spectra,
        shifts: params.component_shifts(),
        params_used: params.clone(),
    })
}

/// The linear-algebra core of the separation; exposed for tests that build
/// matrices by hand.
pub fn separate_spectra(
    frames: &[Array2<f64>],
    matrix: &MixingMatrix,
) -> Result<Vec<Array2<C64>>> {
    if frames.len() != matrix.values.nrows() {
        return Err(Error::validation(format!(
            "expected {} frames, got {}",
            matrix.values.nrows(),
            frames.len()
        )));
    }
    let inv = matrix.inverse()?;
    let frame_specs: Vec<Array2<C64>> = par::map_collect(frames.to_vec(), |f| fft::fft2_real(&f));
    let dim = frame_specs[0].dim();
    let n_out = inv.nrows();
    let out = par::map_collect((0..n_out).collect(), |j| {
        let mut acc: Array2<C64> = Array2::zeros(dim);
        for (n, spec) in frame_specs.iter().enumerate() {
            let w = inv[(j, n)];
            acc.zip_mut_with(spec, |a, s| *a += w * s);
        }
        acc
    });
    Ok(out)
}

/// Nominal mixing matrix used for the provisional separation: commanded
/// table phases, unit depths, zero initial phases. The true matrix differs
/// from it by one constant complex gain per column, which the later
/// phase/depth estimation recovers.
pub fn nominal_matrix(table: &PhaseTable) -> Result<MixingMatrix> {
    let nominal = IlluminationParams {
        k_u: [0.0, 1.0],
        k_v: [1.0, 0.0],
        m1_u: 1.0,
        m1_v: 1.0,
        m2_u: 1.0,
        m2_v: 1.0,
        phi1_u: 0.0,
        phi1_v: 0.0,
        phi2_u: 0.0,
        phi2_v: 0.0,
    };
    illum::mixing_matrix(&nominal, table)
}

fn energy(a: &Array2<C64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

/// Subpixel wavevector of a modulated component relative to the zeroth.
///
/// Coarse stage: pixel-grid peak of the cross-correlation magnitude.
/// Refinement: the component and the correspondingly shifted zeroth are
/// equalized by each other's transfer function and masked to a disk around
/// the peak; the residual phase plane of their spatial product is fit by
/// per-axis weighted least squares and the shift updated to its fixed
/// point. At the true shift the two sides are exactly proportional, which
/// removes the bias the asymmetric OTF decay would otherwise imprint on
/// the phase gradient. Returns `[ky, kx]` in cycles/nm.
pub fn estimate_wavevector(
    component: &Array2<C64>,
    zeroth: &Array2<C64>,
    config: &OpticalConfig,
    opts: &EstimationConfig,
) -> Result<[f64; 2]> {
    let otf2d = widefield_otf2d(config)?;
    refine_wavevector(component, zeroth, &otf2d, config.pixel_size, opts)
}

pub(crate) fn refine_wavevector(
    component: &Array2<C64>,
    zeroth: &Array2<C64>,
    otf2d: &Array2<C64>,
    pixel_size: f64,
    opts: &EstimationConfig,
) -> Result<[f64; 2]> {
    let (rows, cols) = component.dim();
    let e0 = energy(zeroth);
    if e0 == 0.0 || energy(component) < opts.min_energy_ratio * opts.min_energy_ratio * e0 {
        return Err(Error::numerical("modulation undetectable"));
    }

    // spatial product <=> spectral cross-correlation
    let mut a = component.clone();
    fft::ifft2(&mut a);
    let mut b = zeroth.clone();
    fft::ifft2(&mut b);
    let mut prod = a;
    prod.zip_mut_with(&b, |p, q| *p *= q.conj());
    let mut xcorr = prod;
    fft::fft2(&mut xcorr);

    // peak on the pixel grid, away from DC
    let excl = opts.dc_exclude as isize;
    let mut peak = 0.0f64;
    let mut peak_pos = (0isize, 0isize);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for ((y, x), v) in xcorr.indexed_iter() {
        let fy = fft::signed_index(y, rows);
        let fx = fft::signed_index(x, cols);
        if fy.abs() <= excl && fx.abs() <= excl {
            continue;
        }
        let m = v.norm();
        sum += m;
        sum_sq += m * m;
        count += 1;
        if m > peak {
            peak = m;
            peak_pos = (fy, fx);
        }
    }
    let mean = sum / count as f64;
    let sd = (sum_sq / count as f64 - mean * mean).max(0.0).sqrt();
    if sd == 0.0 || (peak - mean) / sd < opts.snr_threshold {
        return Err(Error::numerical("modulation undetectable"));
    }

    let r2 = (opts.refine_radius * opts.refine_radius) as isize;
    let mut s = [peak_pos.0 as f64, peak_pos.1 as f64]; // frequency pixels
    let mut prev_eps = [f64::NAN; 2];
    let mut prev_s = [f64::NAN; 2];
    for _ in 0..12 {
        // A(k) = C_j(k + s) T(k) and B(k) = C_0(k) T(k + s), both masked to
        // a disk around DC; A == gain * B at the true s. Relocating the
        // component (rather than the zeroth) keeps all content inside the
        // detection support. Shifts are exact ramp translations.
        let comp_shifted = fft::shift_spectrum(component, (-s[0], -s[1]));
        let otf_shifted = fft::shift_otf(otf2d, (-s[0], -s[1]));
        let mut a: Array2<C64> = Array2::zeros((rows, cols));
        let mut b: Array2<C64> = Array2::zeros((rows, cols));
        for y in 0..rows {
            let fy = fft::signed_index(y, rows);
            for x in 0..cols {
                let fx = fft::signed_index(x, cols);
                if fy * fy + fx * fx > r2 {
                    continue;
                }
                a[[y, x]] = comp_shifted[[y, x]] * otf2d[[y, x]];
                b[[y, x]] = zeroth[[y, x]] * otf_shifted[[y, x]];
            }
        }
        fft::ifft2(&mut a);
        fft::ifft2(&mut b);
        let mut p = a;
        p.zip_mut_with(&b, |v, q| *v *= q.conj());
        // border wrap-around of the circular convolutions pollutes the
        // phase plane; window it out before fitting
        let by = taper_profile(rows, rows / 8);
        let bx = taper_profile(cols, cols / 8);
        for ((y, x), v) in p.indexed_iter_mut() {
            *v *= by[y] * bx[x];
        }
        // p ~ exp(-2 pi i (eps . r)/n) where eps is the current guess error.
        // The slope underestimates eps where the OTF varies steeply across
        // the patch, so plain fixed-point stepping contracts slowly there;
        // a per-axis secant update on the measured residual converges in a
        // few iterations.
        let eps = [
            -axis_phase_slope(&p, 0) * rows as f64 / (2.0 * PI),
            -axis_phase_slope(&p, 1) * cols as f64 / (2.0 * PI),
        ];
        for axis in 0..2 {
            let de = eps[axis] - prev_eps[axis];
            let step = if prev_eps[axis].is_finite() && de.abs() > 1e-12 {
                eps[axis] * (s[axis] - prev_s[axis]) / de
            } else {
                eps[axis]
            };
            prev_s[axis] = s[axis];
            s[axis] -= step.clamp(-2.0, 2.0);
        }
        prev_eps = eps;
        if eps[0].abs() < 1e-5 && eps[1].abs() < 1e-5 {
            break;
        }
    }
    Ok([
        s[0] / (rows as f64 * pixel_size),
        s[1] / (cols as f64 * pixel_size),
    ])
}

fn shortest_offset(d: isize, n: usize) -> isize {
    let n = n as isize;
    let mut d = d.rem_euclid(n);
    if d > n / 2 {
        d -= n;
    }
    d
}

/// Phase ramp (radians per sample, per axis) that best aligns `field` to a
/// constant phase: iterated slope measurement with secant acceleration,
/// robust against oscillating envelopes.
fn fit_ramp(field: &Array2<C64>) -> (f64, f64) {
    let mut work = field.clone();
    let mut total = [0.0f64; 2];
    let mut prev_eps = [f64::NAN; 2];
    let mut prev_t = [f64::NAN; 2];
    for _ in 0..8 {
        let eps = [axis_phase_slope(&work, 0), axis_phase_slope(&work, 1)];
        let mut step = [0.0; 2];
        for axis in 0..2 {
            let de = eps[axis] - prev_eps[axis];
            step[axis] = if prev_t[axis].is_finite() && de.abs() > 1e-15 {
                (-(eps[axis] * (total[axis] - prev_t[axis]) / de)).clamp(-0.5, 0.5)
            } else {
                eps[axis]
            };
            prev_t[axis] = total[axis];
            total[axis] += step[axis];
        }
        prev_eps = eps;
        for ((y, x), v) in work.indexed_iter_mut() {
            *v *= C64::from_polar(1.0, -(step[0] * y as f64 + step[1] * x as f64));
        }
        if eps[0].abs() < 1e-7 && eps[1].abs() < 1e-7 {
            break;
        }
    }
    (total[0], total[1])
}

/// Magnitude-weighted mean phase increment per sample along one axis.
fn axis_phase_slope(field: &Array2<C64>, axis: usize) -> f64 {
    let (rows, cols) = field.dim();
    let mut acc = C64::new(0.0, 0.0);
    if axis == 0 {
        for y in 0..rows - 1 {
            for x in 0..cols {
                acc += field[[y + 1, x]] * field[[y, x]].conj();
            }
        }
    } else {
        for y in 0..rows {
            for x in 0..cols - 1 {
                acc += field[[y, x + 1]] * field[[y, x]].conj();
            }
        }
    }
    acc.arg()
}

/// Initial phase and modulation depth of one positive order.
///
/// Forms `A = C_i * T(k - s)` and `B = C_0(k - s) * T(k)` over the overlap
/// of the two OTF supports and returns the least-squares complex gain
/// `gamma = <A, B>/<B, B>`: its argument is the initial phase, its
/// magnitude the depth (relative to the provisional separation gain).
pub fn estimate_phase_and_depth(
    component: &Array2<C64>,
    zeroth: &Array2<C64>,
    k_shift: [f64; 2],
    otf2d: &Array2<C64>,
    pixel_size: f64,
    opts: &EstimationConfig,
) -> Result<(f64, f64)> {
    let (rows, cols) = component.dim();
    let shift_px = [
        k_shift[0] * rows as f64 * pixel_size,
        k_shift[1] * cols as f64 * pixel_size,
    ];
    let zeroth_shifted = fft::shift_spectrum(zeroth, (shift_px[0], shift_px[1]));
    let otf_shifted = fft::shift_otf(otf2d, (shift_px[0], shift_px[1]));
    let floor = opts.overlap_otf_floor;
    // shifted support that would land beyond the grid wraps around; those
    // ghost bins are not part of the geometric overlap
    let lo_r = -((rows / 2) as f64);
    let hi_r = ((rows - 1) / 2) as f64;
    let lo_c = -((cols / 2) as f64);
    let hi_c = ((cols - 1) / 2) as f64;
    let mut a_arr: Array2<C64> = Array2::zeros((rows, cols));
    let mut b_arr: Array2<C64> = Array2::zeros((rows, cols));
    let mut bins = 0usize;
    for y in 0..rows {
        let fy = fft::signed_index(y, rows) as f64;
        for x in 0..cols {
            let fx = fft::signed_index(x, cols) as f64;
            let t_here = otf2d[[y, x]];
            if t_here.norm() < floor {
                continue;
            }
            let (uy, ux) = (fy - shift_px[0], fx - shift_px[1]);
            if uy < lo_r || uy > hi_r || ux < lo_c || ux > hi_c {
                continue;
            }
            let t_shifted = otf_shifted[[y, x]];
            if t_shifted.norm() < floor {
                continue;
            }
            // skip the component's own DC neighborhood: out-of-focus
            // content concentrates there
            let dy = shortest_offset(uy.round() as isize, rows);
            let dx = shortest_offset(ux.round() as isize, cols);
            if dy.abs() <= opts.dc_exclude as isize && dx.abs() <= opts.dc_exclude as isize {
                continue;
            }
            a_arr[[y, x]] = component[[y, x]] * t_shifted;
            b_arr[[y, x]] = zeroth_shifted[[y, x]] * t_here;
            bins += 1;
        }
    }
    if bins < opts.min_overlap_bins {
        return Err(Error::numerical(format!(
            "insufficient overlap: {bins} bins"
        )));
    }
    // Any residual error in the supplied shift leaves a phase ramp across
    // the spatial product of the two sides, which would bias the gain's
    // argument by roughly pi times the shift error in bins. Fit the ramp
    // and demodulate it before accumulating.
    fft::ifft2(&mut a_arr);
    fft::ifft2(&mut b_arr);
    let mut p = a_arr;
    p.zip_mut_with(&b_arr, |v, q| *v *= q.conj());
    let by = taper_profile(rows, rows / 8);
    let bx = taper_profile(cols, cols / 8);
    for ((y, x), v) in p.indexed_iter_mut() {
        *v *= by[y] * bx[x];
    }
    let ramp = fit_ramp(&p);
    let mut num = C64::new(0.0, 0.0);
    let mut den = 0.0f64;
    for ((y, x), v) in p.indexed_iter() {
        let demod = C64::from_polar(1.0, -(ramp.0 * y as f64 + ramp.1 * x as f64));
        num += v * demod;
        den += b_arr[[y, x]].norm_sqr() * by[y] * bx[x];
    }
    if den == 0.0 {
        return Err(Error::numerical(
            "insufficient overlap: zero reference energy",
        ));
    }
    let gamma = num / den;
    Ok((gamma.arg(), gamma.norm()))
}

/// Positive-order component indices `+(u-v), +(u+v), +2u, +2v`.
const PLUS_ORDERS: [usize; 4] = [2, 4, 6, 8];

/// Full blind estimation: provisional separation with the commanded table,
/// wavevectors from the second orders (cross-validated against the `(u+v)`
/// diagonal), then per-order initial phases and depths.
pub fn estimate_params(
    frames: &RawFrameSet,
    config: &OpticalConfig,
    opts: &EstimationConfig,
) -> Result<IlluminationParams> {
    if frames.mode == FrameMode::Conventional {
        return Err(Error::validation(
            "conventional frames carry no composite component layout",
        ));
    }
    if frames.frames.len() != N_COMPONENTS {
        return Err(Error::validation(format!(
            "expected {} frames, got {}",
            N_COMPONENTS,
            frames.frames.len()
        )));
    }
    config.validate()?;
    let matrix = nominal_matrix(&frames.table)?;
    let provisional = separate_spectra(&frames.frames, &matrix)?;
    let zeroth = &provisional[0];
    let px = config.pixel_size;
    let otf2d = widefield_otf2d(config)?;

    let shifts: Vec<[f64; 2]> = PLUS_ORDERS
        .iter()
        .map(|&i| refine_wavevector(&provisional[i], zeroth, &otf2d, px, opts))
        .collect::<Result<_>>()?;
    let [s_diff, s_sum, s_2u, s_2v] = [shifts[0], shifts[1], shifts[2], shifts[3]];

    // second orders must be consistent with the (u+v) diagonal
    let to_px = config.grid_xy as f64 * px;
    let residual = [
        ((s_2u[0] + s_2v[0]) / 2.0 - s_sum[0]) * to_px,
        ((s_2u[1] + s_2v[1]) / 2.0 - s_sum[1]) * to_px,
    ];
    let res_mag = (residual[0] * residual[0] + residual[1] * residual[1]).sqrt();
    if res_mag > opts.cross_validation_tol_px {
        return Err(Error::numerical(format!(
            "inconsistent orders: second-order/diagonal mismatch {res_mag:.3} freq-px"
        )));
    }
    let _ = s_diff; // the (u-v) diagonal is implied by k_u, k_v

    let k_u = [s_2u[0] / 2.0, s_2u[1] / 2.0];
    let k_v = [s_2v[0] / 2.0, s_2v[1] / 2.0];

    let exact_shifts = [
        [k_u[0] - k_v[0], k_u[1] - k_v[1]],
        [k_u[0] + k_v[0], k_u[1] + k_v[1]],
        [2.0 * k_u[0], 2.0 * k_u[1]],
        [2.0 * k_v[0], 2.0 * k_v[1]],
    ];
    let mut phases = [0.0; 4];
    let mut depths = [0.0; 4];
    for (idx, (&comp_idx, shift)) in PLUS_ORDERS.iter().zip(exact_shifts.iter()).enumerate() {
        let (phi, m) =
            estimate_phase_and_depth(&provisional[comp_idx], zeroth, *shift, &otf2d, px, opts)?;
        phases[idx] = phi.rem_euclid(2.0 * PI);
        depths[idx] = m;
    }

    Ok(IlluminationParams {
        k_u,
        k_v,
        m1_u: depths[0],
        m1_v: depths[1],
        m2_u: depths[2],
        m2_v: depths[3],
        phi1_u: phases[0],
        phi1_v: phases[1],
        phi2_u: phases[2],
        phi2_v: phases[3],
    })
}

/// Separate components using known (or blind-estimated) parameters: the
/// matrix built from them contains the depths and initial phases, so the
/// output spectra come out normalized (gain-free).
pub fn demodulate(frames: &RawFrameSet, params: &IlluminationParams) -> Result<ComponentSet> {
    let matrix = illum::mixing_matrix(params, &frames.table)?;
    separate_components(frames, &matrix, params)
}

/// Separate conventional two-beam frames: a 3x3 solve per orientation with
/// rows `[1, m/2 e^{-j phi}, m/2 e^{+j phi}]`, yielding `(spectrum, shift)`
/// pairs in orientation-major order `0, -k, +k`.
pub fn separate_conventional(
    frames: &RawFrameSet,
    params: &crate::forward::TwoBeamParams,
) -> Result<Vec<(Array2<C64>, [f64; 2])>> {
    params.validate()?;
    let n_orient = params.orientations_deg.len();
    let n_phases = params.phases.len();
    if frames.frames.len() != n_orient * n_phases {
        return Err(Error::validation(format!(
            "expected {} frames, got {}",
            n_orient * n_phases,
            frames.frames.len()
        )));
    }
    let mut matrix = nalgebra::DMatrix::<C64>::zeros(n_phases, 3);
    for (row, phase) in params.phases.iter().enumerate() {
        let psi = phase + params.initial_phase;
        matrix[(row, 0)] = C64::new(1.0, 0.0);
        matrix[(row, 1)] = C64::from_polar(params.depth / 2.0, -psi);
        matrix[(row, 2)] = C64::from_polar(params.depth / 2.0, psi);
    }
    let inv = (MixingMatrix { values: matrix }).inverse()?;
    let mut out = Vec::with_capacity(n_orient * 3);
    for o in 0..n_orient {
        let specs: Vec<Array2<C64>> = frames.frames[o * n_phases..(o + 1) * n_phases]
            .iter()
            .map(fft::fft2_real)
            .collect();
        let k = params.wavevector(o);
        let shifts = [[0.0, 0.0], [-k[0], -k[1]], [k[0], k[1]]];
        for (j, shift) in shifts.iter().enumerate() {
            let mut acc: Array2<C64> = Array2::zeros(specs[0].dim());
            for (p, spec) in specs.iter().enumerate() {
                let w = inv[(j, p)];
                acc.zip_mut_with(spec, |a, s| *a += w * s);
            }
            out.push((acc, *shift));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{self, Phantom, PhantomLayer, PhantomSpec};
    use crate::illum::default_phase_table;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Axis};

    fn test_config(n: usize) -> OpticalConfig {
        OpticalConfig {
            na: 1.45,
            wavelength_em: 561.0,
            wavelength_ex: 561.0,
            pixel_size: 65.0,
            z_step: 200.0,
            refractive_index: 1.518,
            grid_xy: n,
            grid_z: 9,
        }
    }

    fn test_params() -> IlluminationParams {
        IlluminationParams::default_for_cutoff(2.0 * 1.45 / 561.0)
    }

    fn single_layer_phantom(n: usize) -> Phantom {
        let spec = PhantomSpec {
            grid_xy: n,
            grid_z: 9,
            pixel_size: 65.0,
            z_step: 200.0,
            focal_layer: 0,
            layers: vec![PhantomLayer {
                z_index: 0,
                rotation_quarter_turns: 0,
                source: None,
            }],
            base_pattern: forward::BasePattern::StarTiles { spokes: 37, tile: 64 },
        };
        forward::phantom_two_layer(&spec).unwrap()
    }

    fn simulate(n: usize, params: &IlluminationParams) -> RawFrameSet {
        let config = test_config(n);
        forward::simulate_frames(
            &single_layer_phantom(n),
            params,
            &default_phase_table(),
            &config,
            None,
        )
        .unwrap()
    }

    /// Aperiodic broadband phantom for estimation-accuracy tests; the tiled
    /// star chart's comb-like spectrum is a worst case the accuracy
    /// contract does not target.
    fn filament_phantom(n: usize) -> Phantom {
        let spec = PhantomSpec {
            grid_xy: n,
            grid_z: 9,
            pixel_size: 65.0,
            z_step: 200.0,
            focal_layer: 0,
            layers: vec![PhantomLayer {
                z_index: 0,
                rotation_quarter_turns: 0,
                source: None,
            }],
            base_pattern: forward::BasePattern::Filaments { count: 60, seed: 11, margin: 32 },
        };
        forward::phantom_two_layer(&spec).unwrap()
    }

    fn simulate_filaments(n: usize, params: &IlluminationParams) -> RawFrameSet {
        let config = test_config(n);
        forward::simulate_frames(
            &filament_phantom(n),
            params,
            &default_phase_table(),
            &config,
            None,
        )
        .unwrap()
    }

    #[test]
    fn pretreat_identity_when_disabled() {
        let set = simulate(64, &test_params());
        let otf = widefield_otf2d(&test_config(64)).unwrap();
        let out = pretreat(&set, 0, 0, &otf).unwrap();
        for (a, b) in out.frames.iter().zip(set.frames.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pretreat_rejects_wide_taper() {
        let set = simulate(64, &test_params());
        let otf = widefield_otf2d(&test_config(64)).unwrap();
        assert!(pretreat(&set, 16, 0, &otf).is_err());
        assert!(pretreat(&set, 15, 0, &otf).is_ok());
    }

    #[test]
    fn rl_sharpens_point_source() {
        let config = test_config(64);
        let otf = widefield_otf2d(&config).unwrap();
        // blurred point source: the PSF itself
        let blurred = optics::psf_slice(&config, 0.0).unwrap();
        let set = RawFrameSet {
            frames: vec![blurred.clone()],
            table: default_phase_table(),
            mode: FrameMode::FourBeam,
            noise_meta: None,
        };
        let out = pretreat(&set, 0, 50, &otf).unwrap();
        let fwhm = |img: &Array2<f64>| {
            let c = 32usize;
            let peak = img[[c, c]];
            let mut w = 0.0;
            for dx in 1..32 {
                if img[[c, c + dx]] < peak / 2.0 {
                    let prev = img[[c, c + dx - 1]];
                    w = 2.0 * (dx as f64 - 1.0 + (prev - peak / 2.0) / (prev - img[[c, c + dx]]));
                    break;
                }
            }
            w
        };
        let before = fwhm(&blurred);
        let after = fwhm(&out.frames[0]);
        assert!(after < before, "FWHM {before} -> {after}");
    }

    #[test]
    fn rl_preserves_total_intensity() {
        let config = test_config(64);
        let otf = widefield_otf2d(&config).unwrap();
        let img = Array2::from_shape_fn((64, 64), |(y, x)| {
            ((y as f64 - 30.0).powi(2) + (x as f64 - 28.0).powi(2))
                .sqrt()
                .max(1.0)
                .recip()
        });
        let set = RawFrameSet {
            frames: vec![img.clone()],
            table: default_phase_table(),
            mode: FrameMode::FourBeam,
            noise_meta: None,
        };
        let out = pretreat(&set, 0, 10, &otf).unwrap();
        let rel = (out.frames[0].sum() - img.sum()).abs() / img.sum();
        assert!(rel < 1e-6, "flux drift {rel}");
    }

    #[test]
    fn separation_matches_direct_construction() {
        // Forward-model oracle: components built directly from the phantom
        // must match the matrix-inversion output to machine precision.
        let params = test_params();
        let table = default_phase_table();
        let config = test_config(128);
        let ph = single_layer_phantom(128);
        let set = forward::simulate_frames(&ph, &params, &table, &config, None).unwrap();
        let matrix = illum::mixing_matrix(&params, &table).unwrap();
        let comps = separate_components(&set, &matrix, &params).unwrap();

        let n = 128;
        let psf = optics::psf_slice(&config, 0.0).unwrap();
        let g = fft::fft2_real(&fft::ifftshift2(&psf));
        let layer = ph.stack.index_axis(Axis(0), 0);
        for (j, s) in params.component_shifts().iter().enumerate() {
            let mut modulated: Array2<C64> = Array2::zeros((n, n));
            for ((y, x), v) in modulated.indexed_iter_mut() {
                let phase = 2.0
                    * PI
                    * (s[0] * y as f64 * config.pixel_size + s[1] * x as f64 * config.pixel_size);
                *v = C64::from_polar(layer[[y, x]], phase);
            }
            fft::fft2(&mut modulated);
            modulated.zip_mut_with(&g, |a, b| *a *= *b);
            let peak = modulated.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
            let mut worst = 0.0f64;
            for (a, b) in comps.spectra[j].iter().zip(modulated.iter()) {
                worst = worst.max((a - b).norm() / peak);
            }
            assert!(worst < 1e-10, "component {j} residual {worst}");
        }
    }

    #[test]
    fn conjugate_pairs_mirror() {
        let params = test_params();
        let set = simulate(128, &params);
        let matrix = illum::mixing_matrix(&params, &default_phase_table()).unwrap();
        let comps = separate_components(&set, &matrix, &params).unwrap();
        let n = 128;
        for (minus, plus) in [(1usize, 2usize), (3, 4), (5, 6), (7, 8)] {
            let peak = comps.spectra[plus]
                .iter()
                .map(|v| v.norm())
                .fold(0.0f64, f64::max);
            let mut worst = 0.0f64;
            for y in 0..n {
                for x in 0..n {
                    let a = comps.spectra[minus][[y, x]];
                    let b = comps.spectra[plus][[(n - y) % n, (n - x) % n]].conj();
                    worst = worst.max((a - b).norm() / peak);
                }
            }
            assert!(worst < 1e-6, "pair ({minus},{plus}) residual {worst}");
        }
    }

    #[test]
    fn unmodulated_data_separates_to_widefield_only() {
        let mut params = test_params();
        params.m1_u = 1e-300;
        params.m1_v = 1e-300;
        params.m2_u = 1e-300;
        params.m2_v = 1e-300;
        let set = simulate(64, &params);
        // separate with the unit-depth nominal matrix
        let matrix = nominal_matrix(&default_phase_table()).unwrap();
        let comps = separate_spectra(&set.frames, &matrix).unwrap();
        let wf = fft::fft2_real(&set.widefield());
        let peak = wf.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
        for (a, b) in comps[0].iter().zip(wf.iter()) {
            assert!((a - b).norm() / peak < 1e-10);
        }
        for spectra in comps.iter().skip(1) {
            for v in spectra.iter() {
                assert!(v.norm() / peak < 1e-10);
            }
        }
    }

    #[test]
    fn frame_permutation_invariance() {
        let params = test_params();
        let table = default_phase_table();
        let set = simulate(64, &params);
        let matrix = illum::mixing_matrix(&params, &table).unwrap();
        let comps = separate_components(&set, &matrix, &params).unwrap();

        // permute frames together with matrix rows
        let perm = [3usize, 1, 4, 0, 8, 2, 7, 5, 6];
        let mut frames2 = set.clone();
        frames2.frames = perm.iter().map(|&i| set.frames[i].clone()).collect();
        let mut values2 = matrix.values.clone();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..N_COMPONENTS {
                values2[(r, c)] = matrix.values[(i, c)];
            }
        }
        let comps2 =
            separate_components(&frames2, &MixingMatrix { values: values2 }, &params).unwrap();
        for (a, b) in comps.spectra.iter().zip(comps2.spectra.iter()) {
            let peak = a.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).norm() <= 1e-9 * peak);
            }
        }
    }

    #[test]
    fn wrong_frame_count_rejected() {
        let params = test_params();
        let mut set = simulate(64, &params);
        set.frames.pop();
        let matrix = illum::mixing_matrix(&params, &default_phase_table()).unwrap();
        match separate_components(&set, &matrix, &params) {
            Err(Error::Validation(msg)) => assert!(msg.contains("expected 9 frames")),
            other => panic!("expected frame count error, got {other:?}"),
        }
    }

    #[test]
    fn wavevector_recovery_subpixel() {
        let n = 256;
        let dk = 1.0 / (n as f64 * 65.0);
        let mut params = test_params();
        params.k_u = [0.60 * dk, 37.25 * dk];
        params.k_v = [36.80 * dk, -0.40 * dk];
        let set = simulate_filaments(n, &params);
        let opts = EstimationConfig::default();
        let est = estimate_params(&set, &test_config(n), &opts).unwrap();
        for (got, want) in [(est.k_u, params.k_u), (est.k_v, params.k_v)] {
            for axis in 0..2 {
                let err_px = (got[axis] - want[axis]).abs() / dk;
                assert!(err_px < 0.05, "axis {axis}: error {err_px} px");
            }
        }
    }

    #[test]
    fn wavevector_pair_antisymmetry() {
        let params = test_params();
        let set = simulate(128, &params);
        let matrix = nominal_matrix(&default_phase_table()).unwrap();
        let prov = separate_spectra(&set.frames, &matrix).unwrap();
        let opts = EstimationConfig::default();
        let plus = estimate_wavevector(&prov[6], &prov[0], &test_config(128), &opts).unwrap();
        let minus = estimate_wavevector(&prov[5], &prov[0], &test_config(128), &opts).unwrap();
        let dk = 1.0 / (128.0 * 65.0);
        for axis in 0..2 {
            assert!(((plus[axis] + minus[axis]) / dk).abs() < 0.05);
        }
    }

    #[test]
    fn zero_modulation_raises() {
        let mut params = test_params();
        params.m2_u = 1e-300;
        let set = simulate(64, &params);
        let matrix = nominal_matrix(&default_phase_table()).unwrap();
        let prov = separate_spectra(&set.frames, &matrix).unwrap();
        let opts = EstimationConfig::default();
        match estimate_wavevector(&prov[6], &prov[0], &test_config(64), &opts) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("undetectable")),
            other => panic!("expected modulation error, got {other:?}"),
        }
    }

    #[test]
    fn phase_and_depth_roundtrip() {
        let mut params = test_params();
        params.phi1_u = 1.234;
        params.m1_u = 0.5;
        let set = simulate_filaments(256, &params);
        let opts = EstimationConfig::default();
        let est = estimate_params(&set, &test_config(256), &opts).unwrap();
        assert_abs_diff_eq!(est.phi1_u, 1.234, epsilon = 0.02);
        assert_abs_diff_eq!(est.m1_u, 0.5, epsilon = 0.01);
        // untouched orders stay near their simulated values
        let wrapped = est.phi1_v.min((est.phi1_v - 2.0 * PI).abs());
        assert!(wrapped < 0.02, "phi1_v {}", est.phi1_v);
        assert_abs_diff_eq!(est.m2_u, 0.5, epsilon = 0.01);
    }

    #[test]
    fn depth_estimate_is_linear() {
        let mut p1 = test_params();
        p1.m1_u = 0.4;
        let mut p2 = test_params();
        p2.m1_u = 0.8;
        let opts = EstimationConfig::default();
        let e1 = estimate_params(&simulate_filaments(256, &p1), &test_config(256), &opts).unwrap();
        let e2 = estimate_params(&simulate_filaments(256, &p2), &test_config(256), &opts).unwrap();
        let ratio = e2.m1_u / e1.m1_u;
        assert!((ratio - 2.0).abs() < 0.04, "ratio {ratio}");
    }

    #[test]
    fn full_roundtrip_noiseless() {
        let mut params = test_params();
        params.phi1_u = 0.7;
        params.phi1_v = 2.1;
        params.phi2_u = 4.0;
        params.phi2_v = 5.5;
        params.m1_u = 0.9;
        params.m1_v = 1.1;
        params.m2_u = 0.45;
        params.m2_v = 0.6;
        let n = 256;
        let set = simulate_filaments(n, &params);
        let opts = EstimationConfig::default();
        let est = estimate_params(&set, &test_config(n), &opts).unwrap();
        let dk = 1.0 / (n as f64 * 65.0);
        for axis in 0..2 {
            assert!((est.k_u[axis] - params.k_u[axis]).abs() / dk < 0.05);
            assert!((est.k_v[axis] - params.k_v[axis]).abs() / dk < 0.05);
        }
        for (got, want) in [
            (est.phi1_u, params.phi1_u),
            (est.phi1_v, params.phi1_v),
            (est.phi2_u, params.phi2_u),
            (est.phi2_v, params.phi2_v),
        ] {
            let d = (got - want).rem_euclid(2.0 * PI);
            let d = d.min(2.0 * PI - d);
            assert!(d < 0.02, "phase {got} vs {want}");
        }
        for (got, want) in [
            (est.m1_u, params.m1_u),
            (est.m1_v, params.m1_v),
            (est.m2_u, params.m2_u),
            (est.m2_v, params.m2_v),
        ] {
            assert!((got - want).abs() / want < 0.02, "depth {got} vs {want}");
        }
    }

    #[test]
    fn conventional_frames_guarded() {
        let config = test_config(64);
        let tb = forward::TwoBeamParams::default_for_cutoff(config.cutoff_em());
        let set =
            forward::simulate_conventional_frames(&single_layer_phantom(64), &tb, &config, None)
                .unwrap();
        let opts = EstimationConfig::default();
        assert!(estimate_params(&set, &config, &opts).is_err());
        // even with a lying mode flag, the data-driven gates reject
        let mut lying = set.clone();
        lying.mode = FrameMode::FourBeam;
        lying.table = default_phase_table();
        assert!(estimate_params(&lying, &config, &opts).is_err());
    }

    #[test]
    fn translation_shifts_initial_phases() {
        let n = 128;
        let config = test_config(n);
        let params = test_params();
        let table = default_phase_table();
        let ph = filament_phantom(n);
        let opts = EstimationConfig::default();
        let est0 = estimate_params(
            &forward::simulate_frames(&ph, &params, &table, &config, None).unwrap(),
            &config,
            &opts,
        )
        .unwrap();

        // roll the sample by an integer pixel offset
        let (dy, dx) = (7usize, 3usize);
        let mut rolled = ph.clone();
        let src = ph.stack.index_axis(Axis(0), 0);
        let mut dst = rolled.stack.index_axis_mut(Axis(0), 0);
        for y in 0..n {
            for x in 0..n {
                dst[[(y + dy) % n, (x + dx) % n]] = src[[y, x]];
            }
        }
        let est1 = estimate_params(
            &forward::simulate_frames(&rolled, &params, &table, &config, None).unwrap(),
            &config,
            &opts,
        )
        .unwrap();

        // The estimator compares each order against the zeroth component,
        // so the sample translation factor exp(-2 pi i (k - s).dr) common
        // to both cancels exactly: every parameter is invariant, and the
        // reconstruction translates with the sample.
        for (order, (phi0, phi1)) in [
            (2usize, (est0.phi1_u, est1.phi1_u)),
            (4, (est0.phi1_v, est1.phi1_v)),
            (6, (est0.phi2_u, est1.phi2_u)),
            (8, (est0.phi2_v, est1.phi2_v)),
        ] {
            let d = (phi1 - phi0).rem_euclid(2.0 * PI);
            let d = d.min(2.0 * PI - d);
            assert!(d < 0.03, "order {order}: phase moved {phi0} -> {phi1}");
        }
        // wavevectors and depths unchanged
        let dk = 1.0 / (n as f64 * 65.0);
        for axis in 0..2 {
            assert!((est1.k_u[axis] - est0.k_u[axis]).abs() / dk < 0.02);
        }
        assert!((est1.m1_u - est0.m1_u).abs() / est0.m1_u < 0.01);
    }

    #[test]
    fn insufficient_overlap_detected() {
        let config = test_config(64);
        let otf = widefield_otf2d(&config).unwrap();
        let comp: Array2<C64> = Array2::from_elem((64, 64), C64::new(1.0, 0.0));
        let zeroth = comp.clone();
        let opts = EstimationConfig::default();
        // a shift close to twice the cutoff leaves almost no overlap
        let k = [0.0, 1.9 * config.cutoff_em()];
        match estimate_phase_and_depth(&comp, &zeroth, k, &otf, 65.0, &opts) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("insufficient overlap")),
            other => panic!("expected overlap error, got {other:?}"),
        }
    }
}
