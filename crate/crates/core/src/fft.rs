//! FFT helpers over `ndarray` arrays.
//!
//! Conventions used across the crate:
//! - forward transforms are unnormalized, inverse transforms divide by the
//!   number of elements (so `ifft(fft(x)) == x`),
//! - spectra are stored in FFT-natural layout with DC at index `[0, 0]`;
//!   [`fftshift2`] is only used for export and interpolation convenience,
//! - the frequency of bin `i` on an axis of length `n` with sample pitch
//!   `d` is `signed_index(i, n) / (n * d)` cycles per unit.

use crate::par;
use ndarray::{Array2, Array3};
use num_complex::Complex;
use rustfft::FftPlanner;
use std::sync::Arc;

pub type C64 = Complex<f64>;

/// Signed frequency index of bin `i` on an axis of length `n`.
///
/// Bins `0..n/2` map to `0..n/2`, the rest wrap to negative frequencies;
/// for even `n` the Nyquist bin is assigned to the negative side.
#[inline]
pub fn signed_index(i: usize, n: usize) -> isize {
    let i = i as isize;
    let n = n as isize;
    if i < (n + 1) / 2 {
        i
    } else {
        i - n
    }
}

/// Inverse of [`signed_index`]: array bin holding signed frequency `f`.
#[inline]
pub fn wrap_index(f: isize, n: usize) -> usize {
    f.rem_euclid(n as isize) as usize
}

fn fft_axis_rows(data: &mut [C64], rows: usize, cols: usize, fft: &Arc<dyn rustfft::Fft<f64>>) {
    debug_assert_eq!(data.len(), rows * cols);
    par::for_each_chunk_mut(data, cols, |_, row| {
        fft.process(row);
    });
}

fn transpose_c64(data: &[C64], rows: usize, cols: usize) -> Vec<C64> {
    let mut out = vec![C64::default(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn fft2_dir(a: &mut Array2<C64>, inverse: bool) {
    let (rows, cols) = a.dim();
    let mut planner = FftPlanner::new();
    let dir = if inverse {
        rustfft::FftDirection::Inverse
    } else {
        rustfft::FftDirection::Forward
    };
    let fft_cols = planner.plan_fft(cols, dir);
    let fft_rows = planner.plan_fft(rows, dir);

    let slice = a.as_slice_mut().expect("contiguous array");
    fft_axis_rows(slice, rows, cols, &fft_cols);
    let mut t = transpose_c64(slice, rows, cols);
    fft_axis_rows(&mut t, cols, rows, &fft_rows);
    let back = transpose_c64(&t, cols, rows);
    slice.copy_from_slice(&back);

    if inverse {
        let scale = 1.0 / (rows * cols) as f64;
        for v in slice.iter_mut() {
            *v *= scale;
        }
    }
}

/// In-place forward 2D FFT (unnormalized).
pub fn fft2(a: &mut Array2<C64>) {
    fft2_dir(a, false);
}

/// In-place inverse 2D FFT (normalized by `1/(rows*cols)`).
pub fn ifft2(a: &mut Array2<C64>) {
    fft2_dir(a, true);
}

/// Forward 2D FFT of a real image.
pub fn fft2_real(img: &Array2<f64>) -> Array2<C64> {
    let mut a = img.mapv(|v| C64::new(v, 0.0));
    fft2(&mut a);
    a
}

/// Inverse 2D FFT returning the real part.
pub fn ifft2_real(spec: &Array2<C64>) -> Array2<f64> {
    let mut a = spec.clone();
    ifft2(&mut a);
    a.mapv(|v| v.re)
}

/// In-place 3D FFT over a `(z, y, x)` array; inverse divides by the volume.
pub fn fft3_dir(a: &mut Array3<C64>, inverse: bool) {
    let (nz, ny, nx) = a.dim();
    let mut planner = FftPlanner::new();
    let dir = if inverse {
        rustfft::FftDirection::Inverse
    } else {
        rustfft::FftDirection::Forward
    };

    // x and y axes, one z-slice at a time
    let fft_x = planner.plan_fft(nx, dir);
    let fft_y = planner.plan_fft(ny, dir);
    let slice = a.as_slice_mut().expect("contiguous array");
    par::for_each_chunk_mut(slice, ny * nx, |_, plane| {
        fft_axis_rows_serial(plane, ny, nx, &fft_x);
        let mut t = transpose_c64(plane, ny, nx);
        fft_axis_rows_serial(&mut t, nx, ny, &fft_y);
        let back = transpose_c64(&t, nx, ny);
        plane.copy_from_slice(&back);
    });

    // z axis: gather columns across slices
    let fft_z = planner.plan_fft(nz, dir);
    let plane_len = ny * nx;
    let mut columns: Vec<Vec<C64>> = vec![Vec::new(); plane_len];
    for (idx, col) in columns.iter_mut().enumerate() {
        *col = (0..nz).map(|z| slice[z * plane_len + idx]).collect();
    }
    par::for_each_chunk_mut(&mut columns, 1, |_, col| {
        fft_z.process(&mut col[0]);
    });
    for (idx, col) in columns.iter().enumerate() {
        for z in 0..nz {
            slice[z * plane_len + idx] = col[z];
        }
    }

    if inverse {
        let scale = 1.0 / (nz * ny * nx) as f64;
        for v in slice.iter_mut() {
            *v *= scale;
        }
    }
}

fn fft_axis_rows_serial(data: &mut [C64], rows: usize, cols: usize, fft: &Arc<dyn rustfft::Fft<f64>>) {
    debug_assert_eq!(data.len(), rows * cols);
    for row in data.chunks_mut(cols) {
        fft.process(row);
    }
}

/// Cyclically shift a 2D array so the DC bin moves to the array center.
pub fn fftshift2<T: Clone + Default>(a: &Array2<T>) -> Array2<T> {
    let (rows, cols) = a.dim();
    let mut out = Array2::default((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            out[[(r + rows / 2) % rows, (c + cols / 2) % cols]] = a[[r, c]].clone();
        }
    }
    out
}

/// Inverse of [`fftshift2`].
pub fn ifftshift2<T: Clone + Default>(a: &Array2<T>) -> Array2<T> {
    let (rows, cols) = a.dim();
    let mut out = Array2::default((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            out[[r, c]] = a[[(r + rows / 2) % rows, (c + cols / 2) % cols]].clone();
        }
    }
    out
}

/// Translate a spectrum by an arbitrary (sub-bin) frequency shift.
///
/// `shift` is in frequency-bin units `(dy, dx)`; the output spectrum `S'`
/// satisfies `S'(k) = S(k - shift)` for band-limited content, implemented
/// as multiplication by a complex exponential ramp in the spatial domain.
pub fn shift_spectrum(spec: &Array2<C64>, shift: (f64, f64)) -> Array2<C64> {
    let mut field = spec.clone();
    ifft2(&mut field);
    apply_phase_ramp(&mut field, shift);
    fft2(&mut field);
    field
}

/// Multiply a spatial-domain field by `exp(+2*pi*i*(dy*y/rows + dx*x/cols))`.
pub fn apply_phase_ramp(field: &mut Array2<C64>, shift: (f64, f64)) {
    let (rows, cols) = field.dim();
    let wy: Vec<C64> = (0..rows)
        .map(|y| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * shift.0 * y as f64 / rows as f64))
        .collect();
    let wx: Vec<C64> = (0..cols)
        .map(|x| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * shift.1 * x as f64 / cols as f64))
        .collect();
    for ((y, x), v) in field.indexed_iter_mut() {
        *v *= wy[y] * wx[x];
    }
}

/// Translate a transfer function laterally by a fractional bin shift.
///
/// Unlike [`shift_spectrum`], the spatial-domain ramp runs over *centered*
/// coordinates: an OTF's spatial counterpart (the PSF) wraps around index
/// zero, and a ramp in natural coordinates would jump in phase across the
/// wrap. The output satisfies `T'(k) = T(k - shift)`.
pub fn shift_otf(otf: &Array2<C64>, shift: (f64, f64)) -> Array2<C64> {
    let (rows, cols) = otf.dim();
    let mut field = otf.clone();
    ifft2(&mut field);
    let tau = 2.0 * std::f64::consts::PI;
    let wy: Vec<C64> = (0..rows)
        .map(|y| C64::from_polar(1.0, tau * shift.0 * signed_index(y, rows) as f64 / rows as f64))
        .collect();
    let wx: Vec<C64> = (0..cols)
        .map(|x| C64::from_polar(1.0, tau * shift.1 * signed_index(x, cols) as f64 / cols as f64))
        .collect();
    for ((y, x), v) in field.indexed_iter_mut() {
        *v *= wy[y] * wx[x];
    }
    fft2(&mut field);
    field
}

/// Max |A(-k) - conj(A(k))| over all bins, normalized by max |A|.
///
/// Zero for the spectrum of a real image.
pub fn hermitian_residual(spec: &Array2<C64>) -> f64 {
    let (rows, cols) = spec.dim();
    let peak = spec.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0f64;
    for r in 0..rows {
        for c in 0..cols {
            let rm = (rows - r) % rows;
            let cm = (cols - c) % cols;
            let d = (spec[[rm, cm]] - spec[[r, c]].conj()).norm();
            worst = worst.max(d);
        }
    }
    worst / peak
}
