//! Composite four-beam illumination: pattern synthesis, the asynchronous
//! nine-step phase table, and the 9x9 matrix linking raw frames to spectral
//! components.
//!
//! Component order is fixed throughout the crate:
//! `[0, -(u-v), +(u-v), -(u+v), +(u+v), -2u, +2u, -2v, +2v]`.
//! All 2-vectors are `[y, x]` in cycles/nm, matching array indexing.

use crate::{Error, Result};
use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

type C64 = Complex<f64>;

/// Number of spectral components (and raw frames).
pub const N_COMPONENTS: usize = 9;

/// Human-readable labels for the fixed component order.
pub const COMPONENT_ORDER: [&str; N_COMPONENTS] = [
    "0", "-(u-v)", "+(u-v)", "-(u+v)", "+(u+v)", "-2u", "+2u", "-2v", "+2v",
];

/// Indices of the components carrying missing-cone-affected content
/// (zeroth and second orders).
pub const MIS_GROUP: [usize; 5] = [0, 5, 6, 7, 8];

/// Indices of the missing-cone-compensating components (first orders).
pub const COM_GROUP: [usize; 4] = [1, 2, 3, 4];

/// Wavevectors, modulation depths, and initial phases of the composite
/// two-axis illumination.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlluminationParams {
    /// Pattern wavevector along the first axis, `[ky, kx]` cycles/nm.
    pub k_u: [f64; 2],
    /// Pattern wavevector along the second axis, `[ky, kx]` cycles/nm.
    pub k_v: [f64; 2],
    /// First-order modulation depths.
    pub m1_u: f64,
    pub m1_v: f64,
    /// Second-order modulation depths.
    pub m2_u: f64,
    pub m2_v: f64,
    /// Initial phases per order, radians.
    pub phi1_u: f64,
    pub phi1_v: f64,
    pub phi2_u: f64,
    pub phi2_v: f64,
}

fn wrap_phase(p: f64) -> f64 {
    p.rem_euclid(2.0 * PI)
}

impl IlluminationParams {
    /// Default simulator parameters for a given detection cutoff:
    /// orthogonal axes at `0.45 * cutoff`, depths from the exact scalar
    /// equal-amplitude four-beam expansion (`m1 = 1, m2 = 0.5`), zero
    /// initial phases.
    pub fn default_for_cutoff(cutoff: f64) -> Self {
        let k = 0.45 * cutoff;
        IlluminationParams {
            k_u: [0.0, k],
            k_v: [k, 0.0],
            m1_u: 1.0,
            m1_v: 1.0,
            m2_u: 0.5,
            m2_v: 0.5,
            phi1_u: 0.0,
            phi1_v: 0.0,
            phi2_u: 0.0,
            phi2_v: 0.0,
        }
    }

    /// Copy with all phases wrapped to `[0, 2*pi)`.
    pub fn normalized(&self) -> Self {
        let mut p = self.clone();
        p.phi1_u = wrap_phase(p.phi1_u);
        p.phi1_v = wrap_phase(p.phi1_v);
        p.phi2_u = wrap_phase(p.phi2_u);
        p.phi2_v = wrap_phase(p.phi2_v);
        p
    }

    pub fn validate(&self) -> Result<()> {
        if norm2(self.k_u) == 0.0 || norm2(self.k_v) == 0.0 {
            return Err(Error::validation("illumination wavevectors must be nonzero"));
        }
        for (name, m) in [
            ("m1_u", self.m1_u),
            ("m1_v", self.m1_v),
            ("m2_u", self.m2_u),
            ("m2_v", self.m2_v),
        ] {
            if !(m > 0.0 && m <= 1.5) {
                return Err(Error::validation(format!(
                    "modulation depth {name}={m} outside (0, 1.5]"
                )));
            }
        }
        Ok(())
    }

    /// Soft invariants: currently only axis orthogonality within 2 degrees.
    /// Estimated real-data wavevectors are never exactly orthogonal, so
    /// violations warn instead of rejecting.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let dot = self.k_u[0] * self.k_v[0] + self.k_u[1] * self.k_v[1];
        let cosang = dot / (norm2(self.k_u) * norm2(self.k_v));
        let dev_deg = (90.0 - cosang.abs().acos().to_degrees()).abs();
        if dev_deg > 2.0 {
            out.push(format!(
                "pattern axes deviate from orthogonality by {dev_deg:.2} degrees"
            ));
        }
        out
    }

    /// Lateral shift vectors of the nine components, in component order.
    pub fn component_shifts(&self) -> [[f64; 2]; N_COMPONENTS] {
        let [uy, ux] = self.k_u;
        let [vy, vx] = self.k_v;
        [
            [0.0, 0.0],
            [-(uy - vy), -(ux - vx)],
            [uy - vy, ux - vx],
            [-(uy + vy), -(ux + vx)],
            [uy + vy, ux + vx],
            [-2.0 * uy, -2.0 * ux],
            [2.0 * uy, 2.0 * ux],
            [-2.0 * vy, -2.0 * vx],
            [2.0 * vy, 2.0 * vx],
        ]
    }

    /// Phase arguments of the four modulated orders for one phase-table
    /// entry `(phi_u, phi_v)`, in the order `(u-v), (u+v), 2u, 2v`.
    ///
    /// The pi offsets on the `(u+v)` and second-order terms follow the
    /// composite-pattern convention; with zero initial phases the pattern
    /// is exactly the intensity of four equal scalar beams whose per-axis
    /// phase origins sit a quarter period off.
    fn order_phases(&self, phi_u: f64, phi_v: f64) -> [f64; 4] {
        [
            (phi_u - phi_v) + self.phi1_u,
            (phi_u + phi_v - PI) + self.phi1_v,
            (2.0 * phi_u - PI) + self.phi2_u,
            (2.0 * phi_v - PI) + self.phi2_v,
        ]
    }

    /// Per-component complex coefficients for one phase entry: row `n` of
    /// the mixing matrix.
    pub fn mixing_row(&self, phi_u: f64, phi_v: f64) -> [C64; N_COMPONENTS] {
        let psi = self.order_phases(phi_u, phi_v);
        let half = |m: f64, s: f64, p: f64| C64::from_polar(m / 2.0, s * p);
        [
            C64::new(1.0, 0.0),
            half(self.m1_u, -1.0, psi[0]),
            half(self.m1_u, 1.0, psi[0]),
            half(self.m1_v, -1.0, psi[1]),
            half(self.m1_v, 1.0, psi[1]),
            half(self.m2_u, -1.0, psi[2]),
            half(self.m2_u, 1.0, psi[2]),
            half(self.m2_v, -1.0, psi[3]),
            half(self.m2_v, 1.0, psi[3]),
        ]
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Nine `(phi_u, phi_v)` phase-shift pairs, radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable {
    pub entries: [[f64; 2]; N_COMPONENTS],
}

/// The asynchronous nine-step table: a Cartesian 3x3 grid over
/// `{0, 2*pi/3, 4*pi/3}` per axis. Each axis executes a three-step
/// phase-shifted sequence; the induced mixing matrix is a scaled unitary
/// character matrix of Z3 x Z3.
pub fn default_phase_table() -> PhaseTable {
    let mut entries = [[0.0; 2]; N_COMPONENTS];
    for (n, e) in entries.iter_mut().enumerate() {
        e[0] = 2.0 * PI * (n / 3) as f64 / 3.0;
        e[1] = 2.0 * PI * (n % 3) as f64 / 3.0;
    }
    PhaseTable { entries }
}

/// The 9x9 complex matrix mapping component spectra to raw-frame spectra.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    pub values: DMatrix<C64>,
}

impl MixingMatrix {
    /// Ratio of largest to smallest singular value.
    pub fn condition_number(&self) -> f64 {
        let svd = self.values.clone().svd(false, false);
        let max = svd.singular_values.max();
        let min = svd.singular_values.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn determinant(&self) -> C64 {
        self.values.clone().lu().determinant()
    }

    /// Inverse; errors when the matrix is ill-conditioned.
    pub fn inverse(&self) -> Result<DMatrix<C64>> {
        if self.condition_number() > 1e6 {
            return Err(Error::numerical("phase table degenerate"));
        }
        self.values
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("phase table degenerate"))
    }
}

/// Build the mixing matrix for the given parameters and table.
pub fn mixing_matrix(params: &IlluminationParams, table: &PhaseTable) -> Result<MixingMatrix> {
    params.validate()?;
    let mut values = DMatrix::zeros(N_COMPONENTS, N_COMPONENTS);
    for (n, entry) in table.entries.iter().enumerate() {
        let row = params.mixing_row(entry[0], entry[1]);
        for (j, v) in row.iter().enumerate() {
            values[(n, j)] = *v;
        }
    }
    let m = MixingMatrix { values };
    if m.condition_number() > 1e6 {
        return Err(Error::numerical("phase table degenerate"));
    }
    Ok(m)
}

/// The phase structure of the mixing matrix with all coefficient magnitudes
/// set to one. For the default table this is a unitary character matrix of
/// Z3 x Z3 (scaled by 3), giving condition number exactly 1; the depth
/// prefactors `m/2` of the full matrix only rescale its columns.
pub fn unit_gain_matrix(params: &IlluminationParams, table: &PhaseTable) -> MixingMatrix {
    let mut values = DMatrix::zeros(N_COMPONENTS, N_COMPONENTS);
    for (n, entry) in table.entries.iter().enumerate() {
        let row = params.mixing_row(entry[0], entry[1]);
        for (j, v) in row.iter().enumerate() {
            values[(n, j)] = if v.norm() > 0.0 {
                v / v.norm()
            } else {
                C64::new(0.0, 0.0)
            };
        }
    }
    MixingMatrix { values }
}

/// Composite illumination intensity for one phase-table entry, sampled on
/// an `n x n` grid with the given pixel pitch (nm).
///
/// `I(r) = 1 + m1_u cos(2pi (k_u - k_v).r + (phi_u - phi_v) + phi1_u)
///       + m1_v cos(2pi (k_u + k_v).r + (phi_u + phi_v - pi) + phi1_v)
///       + m2_u cos(4pi k_u.r + (2 phi_u - pi) + phi2_u)
///       + m2_v cos(4pi k_v.r + (2 phi_v - pi) + phi2_v)`
pub fn pattern(
    params: &IlluminationParams,
    phase_entry: (f64, f64),
    n: usize,
    pixel_size: f64,
) -> Result<Array2<f64>> {
    params.validate()?;
    let nyquist = 1.0 / (2.0 * pixel_size);
    let shifts = params.component_shifts();
    for s in &shifts[1..] {
        if s[0].abs() > nyquist || s[1].abs() > nyquist {
            return Err(Error::validation(format!(
                "pattern aliased: component at [{:.3e}, {:.3e}] cycles/nm exceeds the grid Nyquist {:.3e}",
                s[0], s[1], nyquist
            )));
        }
    }
    let psi = params.order_phases(phase_entry.0, phase_entry.1);
    let freqs = [
        [params.k_u[0] - params.k_v[0], params.k_u[1] - params.k_v[1]],
        [params.k_u[0] + params.k_v[0], params.k_u[1] + params.k_v[1]],
        [2.0 * params.k_u[0], 2.0 * params.k_u[1]],
        [2.0 * params.k_v[0], 2.0 * params.k_v[1]],
    ];
    let depths = [params.m1_u, params.m1_v, params.m2_u, params.m2_v];
    let mut out = Array2::zeros((n, n));
    for ((y, x), v) in out.indexed_iter_mut() {
        let ry = y as f64 * pixel_size;
        let rx = x as f64 * pixel_size;
        let mut acc = 1.0;
        for t in 0..4 {
            acc += depths[t] * (2.0 * PI * (freqs[t][0] * ry + freqs[t][1] * rx) + psi[t]).cos();
        }
        *v = acc;
    }
    Ok(out)
}
