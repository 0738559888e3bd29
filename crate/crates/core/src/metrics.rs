//! Reconstruction quality metrics: Fourier ring correlation and its
//! rolling (windowed) resolution map, resolution-scaled error maps, local
//! contrast distributions, and the out-of-focus leakage score used to
//! compare sectioning across reconstruction modes.

use crate::fft::{self, C64};
use crate::par;
use crate::{Error, Result};
use ndarray::{s, Array2};
use serde::Serialize;

/// Ring-wise correlation between two images.
#[derive(Debug, Clone, Serialize)]
pub struct FrcCurve {
    /// Ring radii in cycles/nm.
    pub frequencies: Vec<f64>,
    /// Raw ring correlations in `[-1, 1]`.
    pub correlations: Vec<f64>,
    /// Correlations after the 3-bin moving average used for the cutoff.
    pub smoothed: Vec<f64>,
    /// Fourier samples per ring.
    pub ring_counts: Vec<usize>,
    /// First threshold crossing in cycles/nm (Nyquist when none).
    pub cutoff: f64,
}

impl FrcCurve {
    pub fn resolution_nm(&self) -> f64 {
        1.0 / self.cutoff
    }
}

/// Sigma-factor threshold `3 / sqrt(N_i / 2)` for a ring of `n` samples.
pub fn sigma_threshold(n: usize) -> f64 {
    3.0 / ((n as f64) / 2.0).sqrt()
}

/// Fourier ring correlation between two equally sized images.
///
/// Rings are one frequency pixel wide from DC to Nyquist; the raw curve is
/// smoothed by a 3-bin moving average, and the cutoff is the first ring
/// whose smoothed correlation drops below the sigma-factor threshold
/// (ignoring rings too small for the threshold to be meaningful).
pub fn frc(img1: &Array2<f64>, img2: &Array2<f64>, pixel_size: f64) -> Result<FrcCurve> {
    let (rows, cols) = img1.dim();
    if img1.dim() != img2.dim() {
        return Err(Error::validation("FRC inputs must have equal dimensions"));
    }
    if rows != cols {
        return Err(Error::validation("FRC inputs must be square"));
    }
    let e1: f64 = img1.iter().map(|v| v * v).sum();
    let e2: f64 = img2.iter().map(|v| v * v).sum();
    if e1 == 0.0 || e2 == 0.0 {
        return Err(Error::numerical("FRC of an all-zero image"));
    }
    let f1 = fft::fft2_real(img1);
    let f2 = fft::fft2_real(img2);
    let n_rings = rows / 2 + 1;
    let mut num = vec![C64::new(0.0, 0.0); n_rings];
    let mut d1 = vec![0.0f64; n_rings];
    let mut d2 = vec![0.0f64; n_rings];
    let mut counts = vec![0usize; n_rings];
    for ((y, x), v1) in f1.indexed_iter() {
        let fy = fft::signed_index(y, rows) as f64;
        let fx = fft::signed_index(x, cols) as f64;
        let ring = (fy * fy + fx * fx).sqrt().round() as usize;
        if ring >= n_rings {
            continue;
        }
        let v2 = f2[[y, x]];
        num[ring] += v1 * v2.conj();
        d1[ring] += v1.norm_sqr();
        d2[ring] += v2.norm_sqr();
        counts[ring] += 1;
    }
    let dk = 1.0 / (rows as f64 * pixel_size);
    let mut frequencies = Vec::with_capacity(n_rings);
    let mut correlations = Vec::with_capacity(n_rings);
    for i in 0..n_rings {
        frequencies.push(i as f64 * dk);
        let denom = (d1[i] * d2[i]).sqrt();
        correlations.push(if denom > 0.0 { num[i].re / denom } else { 0.0 });
    }
    let smoothed = moving_average3(&correlations);
    let nyquist = 1.0 / (2.0 * pixel_size);
    let mut cutoff = nyquist;
    for i in 1..n_rings {
        if counts[i] == 0 {
            continue;
        }
        let sigma = sigma_threshold(counts[i]);
        if sigma > 1.0 {
            continue; // ring too small to judge
        }
        if smoothed[i] < sigma {
            cutoff = frequencies[i];
            break;
        }
    }
    Ok(FrcCurve {
        frequencies,
        correlations,
        smoothed,
        ring_counts: counts,
        cutoff,
    })
}

fn moving_average3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Split one image into a statistically independent pair by checkerboard
/// decimation: each output keeps one pixel parity and fills the other
/// parity's holes with the average of its 4 neighbors.
pub fn split_for_frc(image: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (rows, cols) = image.dim();
    let fill = |keep_even: bool| {
        Array2::from_shape_fn((rows, cols), |(y, x)| {
            let even = (y + x) % 2 == 0;
            if even == keep_even {
                return image[[y, x]];
            }
            let y_pair = y > 0 && y + 1 < rows;
            let x_pair = x > 0 && x + 1 < cols;
            if y_pair && x_pair {
                (image[[y - 1, x]] + image[[y + 1, x]] + image[[y, x - 1]] + image[[y, x + 1]])
                    / 4.0
            } else if y_pair {
                (image[[y - 1, x]] + image[[y + 1, x]]) / 2.0
            } else if x_pair {
                (image[[y, x - 1]] + image[[y, x + 1]]) / 2.0
            } else {
                // corner: planar extrapolation from the three nearest
                let sy = if y == 0 { 1 } else { y - 1 };
                let sx = if x == 0 { 1 } else { x - 1 };
                image[[sy, x]] + image[[y, sx]] - image[[sy, sx]]
            }
        })
    };
    (fill(true), fill(false))
}

/// Rolling-FRC local resolution map.
#[derive(Debug, Clone)]
pub struct RfrcMap {
    /// Local resolution in nm per window position, 0 for background.
    pub values: Array2<f64>,
    /// Window size in pixels.
    pub window: usize,
    /// Window stride in pixels.
    pub stride: usize,
    /// Arithmetic mean of the nonzero map entries, nm.
    pub mean_resolution: f64,
}

impl RfrcMap {
    /// Recompute the mean from the stored map (the Eq. the mean is defined
    /// by: sum over nonzero entries divided by their count).
    pub fn mean_from_map(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for v in self.values.iter() {
            if *v != 0.0 {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Sliding-window FRC resolution map from decimated-pair FRC.
///
/// Windows whose mean intensity falls below 5% of the image's 99th
/// percentile count as background and get value 0.
pub fn rfrc_map(
    image: &Array2<f64>,
    window: usize,
    stride: usize,
    pixel_size: f64,
) -> Result<RfrcMap> {
    let (rows, cols) = image.dim();
    if window < 64 {
        return Err(Error::validation("rFRC window must be at least 64 pixels"));
    }
    if stride > window / 2 || stride == 0 {
        return Err(Error::validation("rFRC stride must be in [1, window/2]"));
    }
    if rows < window || cols < window {
        return Err(Error::validation("image smaller than the rFRC window"));
    }
    let foreground_level = 0.05 * percentile(image.iter().cloned().collect(), 99.0);
    let ny = (rows - window) / stride + 1;
    let nx = (cols - window) / stride + 1;
    let positions: Vec<(usize, usize)> = (0..ny)
        .flat_map(|wy| (0..nx).map(move |wx| (wy, wx)))
        .collect();
    let entries = par::map_collect(positions.clone(), |(wy, wx)| {
        let view = image
            .slice(s![
                wy * stride..wy * stride + window,
                wx * stride..wx * stride + window
            ])
            .to_owned();
        let mean = view.mean().unwrap_or(0.0);
        if mean <= foreground_level {
            return 0.0;
        }
        // featureless windows (no AC energy) carry no resolution signal
        let var = view.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        if var <= 1e-24 * mean * mean * (window * window) as f64 {
            return 0.0;
        }
        let (a, b) = split_for_frc(&view);
        match frc(&a, &b, pixel_size) {
            Ok(curve) => curve.resolution_nm(),
            Err(_) => 0.0,
        }
    });
    let mut values = Array2::zeros((ny, nx));
    for ((wy, wx), v) in positions.into_iter().zip(entries) {
        values[[wy, wx]] = v;
    }
    let map = RfrcMap {
        values,
        window,
        stride,
        mean_resolution: 0.0,
    };
    let mean = map.mean_from_map();
    if mean == 0.0 {
        return Err(Error::numerical("no foreground"));
    }
    Ok(RfrcMap {
        mean_resolution: mean,
        ..map
    })
}

/// Linear-interpolated percentile (0..=100) of a sample.
pub fn percentile(mut values: Vec<f64>, p: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

/// Resolution-scaled error map result.
#[derive(Debug, Clone)]
pub struct RsmResult {
    /// `|I_L - I_HL|` per pixel on the widefield grid.
    pub map: Array2<f64>,
    /// Fitted `(mu, theta, sigma_x, sigma_y)`.
    pub fitted: (f64, f64, f64, f64),
    /// Mean of the error map.
    pub mean_error: f64,
    /// Objective value per accepted simplex step (non-increasing).
    pub objective_history: Vec<f64>,
}

/// Resolution-scaled error: fit `I_HL = (mu I_H + theta) (x) G(sx, sy)`
/// to the widefield reference by derivative-free simplex search and report
/// the absolute residual map.
///
/// `sr` is downsampled to the widefield grid first (its dimensions must be
/// an integer multiple); `sigma_init_px` seeds the Gaussian widths.
pub fn rsm(sr: &Array2<f64>, widefield: &Array2<f64>, sigma_init_px: f64) -> Result<RsmResult> {
    if sr.iter().any(|v| !v.is_finite()) || widefield.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite input to the error map"));
    }
    let (wr, wc) = widefield.dim();
    let (sr_r, sr_c) = sr.dim();
    if sr_r % wr != 0 || sr_c % wc != 0 || sr_r / wr != sr_c / wc {
        return Err(Error::validation(
            "SR image dimensions must be an integer multiple of the reference",
        ));
    }
    let factor = sr_r / wr;
    let high = block_average(sr, factor);

    let high_spec = fft::fft2_real(&high);
    let mean_h = high.mean().unwrap_or(0.0);
    let mean_l = widefield.mean().unwrap_or(0.0);
    let mu0 = if mean_h != 0.0 { mean_l / mean_h } else { 1.0 };

    let objective = |p: &[f64]| {
        let model = blur_model(&high_spec, p[0], p[1], p[2].abs(), p[3].abs(), (wr, wc));
        model
            .iter()
            .zip(widefield.iter())
            .map(|(m, l)| (m - l) * (m - l))
            .sum::<f64>()
    };
    let x0 = [mu0, 0.0, sigma_init_px, sigma_init_px];
    let (best, history) = nelder_mead(&objective, x0, 500, 1e-6);
    let fitted = (best[0], best[1], best[2].abs(), best[3].abs());
    let model = blur_model(&high_spec, fitted.0, fitted.1, fitted.2, fitted.3, (wr, wc));
    let map = Array2::from_shape_fn((wr, wc), |idx| (widefield[idx] - model[idx]).abs());
    let mean_error = map.mean().unwrap_or(0.0);
    Ok(RsmResult {
        map,
        fitted,
        mean_error,
        objective_history: history,
    })
}

/// Mean over `factor x factor` blocks.
pub fn block_average(img: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor <= 1 {
        return img.clone();
    }
    let (rows, cols) = img.dim();
    let (or, oc) = (rows / factor, cols / factor);
    let norm = (factor * factor) as f64;
    Array2::from_shape_fn((or, oc), |(y, x)| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img[[y * factor + dy, x * factor + dx]];
            }
        }
        acc / norm
    })
}

/// `(mu H + theta) (x) Gaussian(sx, sy)` evaluated via the precomputed
/// spectrum of `H`.
fn blur_model(
    high_spec: &Array2<C64>,
    mu: f64,
    theta: f64,
    sx: f64,
    sy: f64,
    dim: (usize, usize),
) -> Array2<f64> {
    let (rows, cols) = dim;
    let mut spec = high_spec.clone();
    let tau2 = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
    for ((y, x), v) in spec.indexed_iter_mut() {
        let fy = fft::signed_index(y, rows) as f64 / rows as f64;
        let fx = fft::signed_index(x, cols) as f64 / cols as f64;
        let g = (-tau2 * (sy * sy * fy * fy + sx * sx * fx * fx)).exp();
        *v *= mu * g;
    }
    spec[[0, 0]] += C64::new(theta * (rows * cols) as f64, 0.0);
    fft::ifft2_real(&spec)
}

/// Derivative-free Nelder-Mead simplex minimization.
///
/// Returns the best point and the best objective value after each
/// iteration (a non-increasing sequence).
fn nelder_mead<F: Fn(&[f64]) -> f64>(
    f: &F,
    x0: [f64; 4],
    max_iter: usize,
    ftol_rel: f64,
) -> ([f64; 4], Vec<f64>) {
    const N: usize = 4;
    let mut simplex: Vec<[f64; 4]> = vec![x0];
    for i in 0..N {
        let mut p = x0;
        let step = if p[i] != 0.0 { 0.1 * p[i].abs() } else { 0.1 };
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut history = Vec::with_capacity(max_iter);
    for _ in 0..max_iter {
        // order ascending
        let mut idx: Vec<usize> = (0..=N).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let ordered: Vec<[f64; 4]> = idx.iter().map(|&i| simplex[i]).collect();
        let ordered_vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        simplex = ordered;
        values = ordered_vals;
        history.push(values[0]);

        let spread = (values[N] - values[0]).abs();
        if spread <= ftol_rel * values[0].abs().max(1e-300) {
            break;
        }

        // centroid of all but worst
        let mut centroid = [0.0; 4];
        for p in simplex.iter().take(N) {
            for (c, v) in centroid.iter_mut().zip(p.iter()) {
                *c += v / N as f64;
            }
        }
        let worst = simplex[N];
        let mix = |a: f64, b: f64, t: f64| a + t * (b - a);
        let reflect: [f64; 4] = std::array::from_fn(|i| mix(centroid[i], worst[i], -1.0));
        let fr = f(&reflect);
        if fr < values[0] {
            let expand: [f64; 4] = std::array::from_fn(|i| mix(centroid[i], worst[i], -2.0));
            let fe = f(&expand);
            if fe < fr {
                simplex[N] = expand;
                values[N] = fe;
            } else {
                simplex[N] = reflect;
                values[N] = fr;
            }
        } else if fr < values[N - 1] {
            simplex[N] = reflect;
            values[N] = fr;
        } else {
            let contract: [f64; 4] = std::array::from_fn(|i| mix(centroid[i], worst[i], 0.5));
            let fc = f(&contract);
            if fc < values[N] {
                simplex[N] = contract;
                values[N] = fc;
            } else {
                // shrink toward the best point
                for j in 1..=N {
                    let best = simplex[0];
                    simplex[j] = std::array::from_fn(|i| mix(best[i], simplex[j][i], 0.5));
                    values[j] = f(&simplex[j]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=N {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best], history)
}

/// Robust Michelson contrast `(P99 - P1) / (P99 + P1 + eps)` per
/// non-overlapping window; background windows are excluded.
pub fn local_contrast(image: &Array2<f64>, window: usize) -> Result<Vec<f64>> {
    let (rows, cols) = image.dim();
    if window == 0 || rows < window || cols < window {
        return Err(Error::validation("contrast window larger than image"));
    }
    let peak = image.iter().cloned().fold(f64::MIN, f64::max);
    let eps = 1e-6 * peak.abs().max(f64::MIN_POSITIVE);
    let foreground_level = 0.05 * percentile(image.iter().cloned().collect(), 99.0);
    let mut out = Vec::new();
    for wy in 0..rows / window {
        for wx in 0..cols / window {
            let view = image.slice(s![
                wy * window..(wy + 1) * window,
                wx * window..(wx + 1) * window
            ]);
            let vals: Vec<f64> = view.iter().cloned().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            if mean <= foreground_level {
                continue;
            }
            let hi = percentile(vals.clone(), 99.0);
            let lo = percentile(vals, 1.0);
            out.push((hi - lo) / (hi + lo + eps));
        }
    }
    if out.is_empty() {
        return Err(Error::numerical("no foreground"));
    }
    Ok(out)
}

/// Out-of-focus leakage score: correlation of a reconstruction with the
/// part of the band-limited background ground truth orthogonal to the
/// in-focus content.
///
/// `recon` may be on an upsampled grid (block-averaged down); `background`
/// and `in_focus` are base-grid ground-truth layers; `lp_cutoff` is the
/// band limit in cycles/nm describing where defocused content lives.
pub fn leakage(
    recon: &Array2<f64>,
    background: &Array2<f64>,
    in_focus: &Array2<f64>,
    lp_cutoff: f64,
    pixel_size: f64,
) -> Result<f64> {
    let (br, bc) = background.dim();
    let (rr, rc) = recon.dim();
    if rr % br != 0 || rc % bc != 0 {
        return Err(Error::validation(
            "reconstruction grid must be a multiple of the ground-truth grid",
        ));
    }
    let rec = block_average(recon, rr / br);
    let lp = |img: &Array2<f64>| -> Array2<f64> {
        let mut spec = fft::fft2_real(img);
        let dk = 1.0 / (br as f64 * pixel_size);
        for ((y, x), v) in spec.indexed_iter_mut() {
            let ky = fft::signed_index(y, br) as f64 * dk;
            let kx = fft::signed_index(x, bc) as f64 * dk;
            if (ky * ky + kx * kx).sqrt() > lp_cutoff {
                *v = C64::new(0.0, 0.0);
            }
        }
        fft::ifft2_real(&spec)
    };
    let g = lp(background);
    let f_sharp = in_focus.clone();
    let f_lp = lp(in_focus);

    // residualize g against span{1, in_focus, lowpass(in_focus)}
    let regressors = [&f_sharp, &f_lp];
    let npix = (br * bc) as f64;
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    let dot = |u: &Array2<f64>, v: &Array2<f64>| u.iter().zip(v.iter()).map(|(x, y)| x * y).sum::<f64>();
    a[0][0] = npix;
    a[0][1] = regressors[0].sum();
    a[0][2] = regressors[1].sum();
    a[1][1] = dot(regressors[0], regressors[0]);
    a[1][2] = dot(regressors[0], regressors[1]);
    a[2][2] = dot(regressors[1], regressors[1]);
    a[1][0] = a[0][1];
    a[2][0] = a[0][2];
    a[2][1] = a[1][2];
    b[0] = g.sum();
    b[1] = dot(regressors[0], &g);
    b[2] = dot(regressors[1], &g);
    let coef = solve3(a, b).ok_or_else(|| Error::numerical("degenerate leakage regression"))?;
    let g_perp = Array2::from_shape_fn((br, bc), |idx| {
        g[idx] - coef[0] - coef[1] * regressors[0][idx] - coef[2] * regressors[1][idx]
    });
    let g_norm = dot(&g_perp, &g_perp).sqrt();
    let rec_mean = rec.mean().unwrap_or(0.0);
    let rec_centered = rec.mapv(|v| v - rec_mean);
    let rec_norm = dot(&rec_centered, &rec_centered).sqrt();
    if g_norm == 0.0 || rec_norm == 0.0 {
        return Err(Error::numerical("degenerate leakage inputs"));
    }
    Ok((dot(&rec_centered, &g_perp) / (g_norm * rec_norm)).abs())
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let mut pivot = col;
        for row in col + 1..3 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for col in (0..3).rev() {
        let mut acc = b[col];
        for k in col + 1..3 {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0))
    }

    fn smooth_image(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(y, x)| {
            1.0 + (y as f64 * 0.02).sin() * (x as f64 * 0.03).cos()
        })
    }

    #[test]
    fn identical_images_have_unit_frc_and_no_crossing() {
        let img = smooth_image(64);
        let curve = frc(&img, &img, 65.0).unwrap();
        for (i, c) in curve.correlations.iter().enumerate() {
            if curve.ring_counts[i] > 0 && curve.frequencies[i] > 0.0 {
                // rings with energy correlate exactly
                let d = (c - 1.0).abs();
                assert!(d < 1e-9 || *c == 0.0, "ring {i}: {c}");
            }
        }
        assert_abs_diff_eq!(curve.cutoff, 1.0 / 130.0, epsilon = 1e-12);
    }

    #[test]
    fn independent_noise_crosses_early() {
        let mut ring_means = Vec::new();
        for seed in 0..20 {
            let a = noise_image(64, seed);
            let b = noise_image(64, seed + 1000);
            let curve = frc(&a, &b, 65.0).unwrap();
            let m: f64 =
                curve.correlations[1..].iter().sum::<f64>() / (curve.correlations.len() - 1) as f64;
            ring_means.push(m);
            // crossing within the lowest rings
            assert!(
                curve.cutoff <= curve.frequencies[8],
                "cutoff {} too high",
                curve.cutoff
            );
        }
        let grand = ring_means.iter().sum::<f64>() / ring_means.len() as f64;
        assert!(grand.abs() < 0.1, "mean correlation {grand}");
    }

    #[test]
    fn band_limited_cutoff_detected() {
        // structure limited to 0.4 Nyquist plus independent noise
        let n = 256usize;
        let limit = 0.4 / (2.0 * 65.0);
        let base = noise_image(n, 7);
        let mut spec = fft::fft2_real(&base);
        let dk = 1.0 / (n as f64 * 65.0);
        for ((y, x), v) in spec.indexed_iter_mut() {
            let ky = fft::signed_index(y, n) as f64 * dk;
            let kx = fft::signed_index(x, n) as f64 * dk;
            if (ky * ky + kx * kx).sqrt() > limit {
                *v = C64::new(0.0, 0.0);
            }
        }
        let structure = fft::ifft2_real(&spec);
        let peak = structure.iter().cloned().fold(0.0f64, f64::max);
        let na = noise_image(n, 100).mapv(|v| v * 0.02 * peak);
        let nb = noise_image(n, 200).mapv(|v| v * 0.02 * peak);
        let curve = frc(&(&structure + &na), &(&structure + &nb), 65.0).unwrap();
        assert!(
            (curve.cutoff - limit).abs() / limit < 0.05,
            "cutoff {} vs limit {}",
            curve.cutoff,
            limit
        );
    }

    #[test]
    fn split_preserves_kept_pixels() {
        let img = noise_image(32, 5);
        let (a, b) = split_for_frc(&img);
        for ((y, x), v) in img.indexed_iter() {
            if (y + x) % 2 == 0 {
                assert_eq!(a[[y, x]], *v);
            } else {
                assert_eq!(b[[y, x]], *v);
            }
        }
    }

    #[test]
    fn split_of_smooth_image_gives_near_identical_halves() {
        let img = smooth_image(64);
        let (a, b) = split_for_frc(&img);
        let peak = img.iter().cloned().fold(0.0f64, f64::max);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() / peak < 1e-3);
        }
    }

    #[test]
    fn split_of_noise_decorrelates() {
        for seed in [1u64, 2, 3] {
            let img = noise_image(64, seed);
            let (a, b) = split_for_frc(&img);
            let curve = frc(&a, &b, 65.0).unwrap();
            // independent parities cross at low rings
            assert!(curve.cutoff <= curve.frequencies[10]);
        }
    }

    #[test]
    fn rfrc_requires_foreground() {
        let img: Array2<f64> = Array2::from_elem((128, 128), 1.0);
        // uniform image: every window is "foreground" by the 5% rule but
        // carries zero variance; FRC errors on the DC-only content
        match rfrc_map(&img, 64, 32, 65.0) {
            Err(Error::Numerical(_)) | Err(Error::Validation(_)) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn rfrc_mean_matches_map() {
        let n = 256usize;
        let img = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let base = crate::forward::star_tiles(n, 37, 64);
            base.mapv(|v| v + rng.gen_range(0.0..0.05))
        };
        let map = rfrc_map(&img, 64, 32, 65.0).unwrap();
        assert_abs_diff_eq!(map.mean_resolution, map.mean_from_map(), epsilon = 1e-9);
        assert!(map.mean_resolution > 0.0);
    }

    #[test]
    fn rfrc_rejects_small_images() {
        let img = noise_image(32, 1);
        assert!(rfrc_map(&img, 64, 32, 65.0).is_err());
    }

    #[test]
    fn rsm_recovers_constructed_blur() {
        let n = 128usize;
        let gt = crate::forward::star_tiles(n, 19, 64);
        let sigma0 = 2.5f64;
        let mut spec = fft::fft2_real(&gt);
        let tau2 = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
        for ((y, x), v) in spec.indexed_iter_mut() {
            let fy = fft::signed_index(y, n) as f64 / n as f64;
            let fx = fft::signed_index(x, n) as f64 / n as f64;
            *v *= (-tau2 * sigma0 * sigma0 * (fy * fy + fx * fx)).exp();
        }
        let blurred = fft::ifft2_real(&spec);
        let result = rsm(&gt, &blurred, 2.0).unwrap();
        let (mu, _theta, sx, sy) = result.fitted;
        assert!((sx - sigma0).abs() / sigma0 < 0.05, "sx {sx}");
        assert!((sy - sigma0).abs() / sigma0 < 0.05, "sy {sy}");
        assert!((mu - 1.0).abs() < 0.05, "mu {mu}");
        let ref_mean = blurred.mean().unwrap();
        assert!(result.mean_error < 1e-3 * ref_mean, "mean {}", result.mean_error);
    }

    #[test]
    fn rsm_identity_pair() {
        let gt = smooth_image(64);
        let result = rsm(&gt, &gt, 2.0).unwrap();
        let ref_mean = gt.mean().unwrap();
        assert!(result.mean_error < 1e-6 * ref_mean, "mean {}", result.mean_error);
    }

    #[test]
    fn rsm_offset_absorbed_by_theta() {
        let n = 64usize;
        let gt = smooth_image(n);
        let blurred = {
            let mut spec = fft::fft2_real(&gt);
            let tau2 = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
            for ((y, x), v) in spec.indexed_iter_mut() {
                let fy = fft::signed_index(y, n) as f64 / n as f64;
                let fx = fft::signed_index(x, n) as f64 / n as f64;
                *v *= (-tau2 * 4.0 * (fy * fy + fx * fx)).exp();
            }
            fft::ifft2_real(&spec)
        };
        let r0 = rsm(&gt, &blurred, 2.0).unwrap();
        let shifted = blurred.mapv(|v| v + 0.35);
        let r1 = rsm(&gt, &shifted, 2.0).unwrap();
        assert!((r1.fitted.1 - r0.fitted.1 - 0.35).abs() < 1e-3, "theta {}", r1.fitted.1);
        let ref_mean = blurred.mean().unwrap();
        assert!((r1.mean_error - r0.mean_error).abs() < 1e-4 * ref_mean);
    }

    #[test]
    fn rsm_rejects_non_finite() {
        let mut gt = smooth_image(32);
        gt[[3, 4]] = f64::NAN;
        assert!(rsm(&gt, &smooth_image(32), 2.0).is_err());
    }

    #[test]
    fn rsm_objective_history_non_increasing() {
        let gt = smooth_image(64);
        let blurred = {
            let mut spec = fft::fft2_real(&gt);
            for ((y, x), v) in spec.indexed_iter_mut() {
                let fy = fft::signed_index(y, 64) as f64 / 64.0;
                let fx = fft::signed_index(x, 64) as f64 / 64.0;
                *v *= (-30.0 * (fy * fy + fx * fx)).exp();
            }
            fft::ifft2_real(&spec)
        };
        let result = rsm(&gt, &blurred, 2.0).unwrap();
        for pair in result.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn checkerboard_contrast_is_high() {
        let img = Array2::from_shape_fn((64, 64), |(y, x)| ((y + x) % 2) as f64);
        let contrasts = local_contrast(&img, 64).unwrap();
        assert_eq!(contrasts.len(), 1);
        assert!(contrasts[0] > 0.99, "contrast {}", contrasts[0]);
    }

    #[test]
    fn constant_window_has_zero_contrast() {
        let img = Array2::from_elem((64, 64), 0.8);
        let contrasts = local_contrast(&img, 64).unwrap();
        assert_abs_diff_eq!(contrasts[0], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn leakage_detects_background_admixture() {
        let n = 128usize;
        let in_focus = crate::forward::star_tiles(n, 37, 64);
        let background = crate::forward::rot90(&in_focus, 1).unwrap();
        let cutoff = 0.25 * 2.0 * 1.45 / 561.0;
        // blur the background as defocus would
        let mut spec = fft::fft2_real(&background);
        let dk = 1.0 / (n as f64 * 65.0);
        for ((y, x), v) in spec.indexed_iter_mut() {
            let ky = fft::signed_index(y, n) as f64 * dk;
            let kx = fft::signed_index(x, n) as f64 * dk;
            if (ky * ky + kx * kx).sqrt() > cutoff * 0.8 {
                *v = C64::new(0.0, 0.0);
            }
        }
        let blurred_bg = fft::ifft2_real(&spec);

        let clean = in_focus.clone();
        let contaminated = &in_focus + &blurred_bg.mapv(|v| v * 0.5);
        let l_clean = leakage(&clean, &background, &in_focus, cutoff, 65.0).unwrap();
        let l_dirty = leakage(&contaminated, &background, &in_focus, cutoff, 65.0).unwrap();
        assert!(
            l_dirty > 2.0 * l_clean,
            "clean {l_clean} vs contaminated {l_dirty}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn frc_symmetric_and_scale_invariant(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let a = noise_image(32, seed).mapv(|v| v + 2.0);
            let b = noise_image(32, seed + 1).mapv(|v| v + 2.0);
            let ab = frc(&a, &b, 65.0).unwrap();
            let ba = frc(&b, &a, 65.0).unwrap();
            for (x, y) in ab.correlations.iter().zip(ba.correlations.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let scaled = frc(&a.mapv(|v| v * scale), &b.mapv(|v| v * scale), 65.0).unwrap();
            for (x, y) in ab.correlations.iter().zip(scaled.correlations.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
