//! Synthetic phantoms and raw-frame simulation.
//!
//! Frames follow `D_n(r) = sum_z [rho(r, z) * I_n(r)] (x) psf_z(r)` with a
//! z-invariant illumination pattern (the four interfering beams share one
//! axial wavevector) and the PSF slice taken at each layer's defocus
//! relative to the focal plane. Noise is Poisson photon statistics plus
//! Gaussian read noise, deterministic per seed.

use crate::fft;
use crate::illum::{self, IlluminationParams, PhaseTable};
use crate::optics::{self, OpticalConfig};
use crate::par;
use crate::{Error, Result};
use ndarray::{Array2, Array3, Axis};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

type C64 = Complex<f64>;

/// Built-in 2D density sources for phantom layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasePattern {
    /// Tiled spoke targets: line pitch decreases monotonically toward each
    /// tile center. An odd spoke count makes a quarter-turn rotation
    /// decorrelated from the original.
    StarTiles { spokes: u32, tile: usize },
    /// Random smooth filament curves, broadband line structures. `margin`
    /// keeps a clear border of that many pixels.
    Filaments {
        count: usize,
        seed: u64,
        #[serde(default)]
        margin: usize,
    },
}

impl Default for BasePattern {
    fn default() -> Self {
        BasePattern::StarTiles { spokes: 37, tile: 64 }
    }
}

/// One phantom layer: a density source placed at a z slice, optionally
/// rotated by quarter turns.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomLayer {
    pub z_index: usize,
    #[serde(default)]
    pub rotation_quarter_turns: u8,
    /// Overrides the phantom-wide base pattern when set.
    #[serde(default)]
    pub source: Option<BasePattern>,
}

/// Phantom geometry and layer layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid_xy: usize,
    pub grid_z: usize,
    /// nm
    pub pixel_size: f64,
    /// nm
    pub z_step: f64,
    /// Index of the in-focus layer.
    #[serde(default)]
    pub focal_layer: usize,
    pub layers: Vec<PhantomLayer>,
    #[serde(default)]
    pub base_pattern: BasePattern,
}

impl PhantomSpec {
    /// The standard two-layer arrangement: the base chart in focus at the
    /// first layer and a quarter-turn copy at the last layer.
    pub fn two_layer(grid_xy: usize, grid_z: usize, pixel_size: f64, z_step: f64) -> Self {
        PhantomSpec {
            grid_xy,
            grid_z,
            pixel_size,
            z_step,
            focal_layer: 0,
            layers: vec![
                PhantomLayer {
                    z_index: 0,
                    rotation_quarter_turns: 0,
                    source: None,
                },
                PhantomLayer {
                    z_index: grid_z - 1,
                    rotation_quarter_turns: 1,
                    source: None,
                },
            ],
            base_pattern: BasePattern::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_xy < 8 || self.grid_z == 0 {
            return Err(Error::validation("phantom grid too small"));
        }
        if self.pixel_size <= 0.0 || self.z_step <= 0.0 {
            return Err(Error::validation("phantom voxel pitch must be positive"));
        }
        if self.focal_layer >= self.grid_z {
            return Err(Error::validation("focal layer outside the stack"));
        }
        for l in &self.layers {
            if l.z_index >= self.grid_z {
                return Err(Error::validation(format!(
                    "layer z index {} outside stack of {} slices",
                    l.z_index, self.grid_z
                )));
            }
        }
        Ok(())
    }
}

/// A realized phantom: density stack plus the geometry it was built on.
#[derive(Debug, Clone)]
pub struct Phantom {
    /// `(z, y, x)` densities, nonnegative.
    pub stack: Array3<f64>,
    pub pixel_size: f64,
    pub z_step: f64,
    pub focal_layer: usize,
}

/// Generate a layer density image from a built-in pattern.
pub fn base_pattern_image(pattern: &BasePattern, n: usize) -> Array2<f64> {
    match pattern {
        BasePattern::StarTiles { spokes, tile } => star_tiles(n, *spokes, *tile),
        BasePattern::Filaments { count, seed, margin } => filaments(n, *count, *seed, *margin),
    }
}

/// Tiled spoke-target chart; values in {0, 1}.
pub fn star_tiles(n: usize, spokes: u32, tile: usize) -> Array2<f64> {
    let tile = tile.clamp(16, n);
    let half = tile as f64 / 2.0;
    // innermost radius where the local line pitch still spans two pixels
    let r_min = spokes as f64 / PI;
    let r_max = half - 2.0;
    Array2::from_shape_fn((n, n), |(y, x)| {
        let ly = (y % tile) as f64 - half + 0.5;
        let lx = (x % tile) as f64 - half + 0.5;
        let r = (ly * ly + lx * lx).sqrt();
        if r < r_min || r > r_max {
            return 0.0;
        }
        let theta = ly.atan2(lx);
        if (spokes as f64 * theta).cos() >= 0.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Random smooth curves with a narrow Gaussian profile; values in [0, 1].
pub fn filaments(n: usize, count: usize, seed: u64, margin: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array2::<f64>::zeros((n, n));
    let sigma = 0.8f64;
    let reach = 3isize;
    let lo = (margin as f64).max(1.0);
    let hi = n as f64 - lo - 1.0;
    for _ in 0..count {
        let mut y = rng.gen_range(lo..hi);
        let mut x = rng.gen_range(lo..hi);
        let mut dir = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.5..1.0);
        let steps = (n as f64 * 1.5) as usize;
        for _ in 0..steps {
            dir += rng.gen_range(-0.08..0.08);
            y += 0.5 * dir.sin();
            x += 0.5 * dir.cos();
            if y < lo || x < lo || y > hi || x > hi {
                break;
            }
            let yi = y.round() as isize;
            let xi = x.round() as isize;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let py = yi + dy;
                    let px = xi + dx;
                    if py < 0 || px < 0 || py >= n as isize || px >= n as isize {
                        continue;
                    }
                    let d2 = (py as f64 - y).powi(2) + (px as f64 - x).powi(2);
                    let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    let cell = &mut img[[py as usize, px as usize]];
                    *cell = cell.max(v);
                }
            }
        }
    }
    img
}

/// Exact quarter-turn rotation (a pixel permutation; preserves mass).
pub fn rot90(img: &Array2<f64>, quarter_turns: u8) -> Result<Array2<f64>> {
    let (rows, cols) = img.dim();
    if rows != cols && quarter_turns % 2 == 1 {
        return Err(Error::validation("quarter-turn rotation needs a square grid"));
    }
    let mut out = img.clone();
    for _ in 0..(quarter_turns % 4) {
        let n = out.dim().0;
        let prev = out;
        out = Array2::from_shape_fn((n, n), |(y, x)| prev[[x, n - 1 - y]]);
    }
    Ok(out)
}

/// Build the phantom stack described by `spec`.
pub fn phantom_two_layer(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.grid_xy;
    let mut stack = Array3::zeros((spec.grid_z, n, n));
    for layer in &spec.layers {
        let source = layer.source.as_ref().unwrap_or(&spec.base_pattern);
        let img = rot90(&base_pattern_image(source, n), layer.rotation_quarter_turns)?;
        let mut slice = stack.index_axis_mut(Axis(0), layer.z_index);
        slice += &img;
    }
    Ok(Phantom {
        stack,
        pixel_size: spec.pixel_size,
        z_step: spec.z_step,
        focal_layer: spec.focal_layer,
    })
}

/// Acquisition mode of a frame set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    FourBeam,
    Conventional,
}

/// Noise parameters; `seed` makes simulations reproducible bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseMeta {
    /// Expected photon count at the brightest pixel.
    pub photon_budget: f64,
    /// Gaussian read noise standard deviation, photon units.
    pub read_noise_sd: f64,
    pub seed: u64,
}

/// Nine raw frames plus the phase entries that produced them.
#[derive(Debug, Clone)]
pub struct RawFrameSet {
    pub frames: Vec<Array2<f64>>,
    pub table: PhaseTable,
    pub mode: FrameMode,
    pub noise_meta: Option<NoiseMeta>,
}

impl RawFrameSet {
    /// Mean of the frames. For both supported phase schemes the modulation
    /// terms cancel, leaving the widefield image.
    pub fn widefield(&self) -> Array2<f64> {
        let mut acc = self.frames[0].clone();
        for f in &self.frames[1..] {
            acc += f;
        }
        acc / self.frames.len() as f64
    }
}

/// Conventional two-beam SIM acquisition: `orientations.len()` pattern
/// directions, each with a three-step phase sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoBeamParams {
    /// Pattern orientations in degrees.
    pub orientations_deg: Vec<f64>,
    /// Pattern frequency magnitude, cycles/nm.
    pub k_magnitude: f64,
    /// Modulation depth.
    pub depth: f64,
    /// Per-orientation phase steps, radians.
    pub phases: [f64; 3],
    /// Initial phase common to all orientations.
    #[serde(default)]
    pub initial_phase: f64,
}

impl TwoBeamParams {
    pub fn default_for_cutoff(cutoff: f64) -> Self {
        TwoBeamParams {
            orientations_deg: vec![0.0, 60.0, 120.0],
            k_magnitude: 0.9 * cutoff,
            depth: 1.0,
            phases: [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0],
            initial_phase: 0.0,
        }
    }

    /// Wavevector `[ky, kx]` of one orientation.
    pub fn wavevector(&self, orientation: usize) -> [f64; 2] {
        let theta = self.orientations_deg[orientation].to_radians();
        [self.k_magnitude * theta.sin(), self.k_magnitude * theta.cos()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientations_deg.is_empty() {
            return Err(Error::validation("need at least one orientation"));
        }
        if self.k_magnitude <= 0.0 {
            return Err(Error::validation("pattern frequency must be positive"));
        }
        if !(self.depth > 0.0 && self.depth <= 1.5) {
            return Err(Error::validation("modulation depth outside (0, 1.5]"));
        }
        Ok(())
    }
}

fn check_phantom_geometry(phantom: &Phantom, config: &OpticalConfig) -> Result<()> {
    let (nz, ny, nx) = phantom.stack.dim();
    if ny != config.grid_xy || nx != config.grid_xy {
        return Err(Error::validation(format!(
            "phantom lateral grid {ny}x{nx} does not match optical grid {}",
            config.grid_xy
        )));
    }
    if phantom.focal_layer >= nz {
        return Err(Error::validation("focal layer outside phantom stack"));
    }
    if (phantom.pixel_size - config.pixel_size).abs() > 1e-9
        || (phantom.z_step - config.z_step).abs() > 1e-9
    {
        return Err(Error::validation(
            "phantom voxel pitch does not match the optical configuration",
        ));
    }
    Ok(())
}

/// Simulate one frame per illumination pattern: modulate each occupied
/// layer, blur by that layer's defocused PSF, and sum.
fn simulate_with_patterns(
    phantom: &Phantom,
    patterns: &[Array2<f64>],
    config: &OpticalConfig,
) -> Result<Vec<Array2<f64>>> {
    check_phantom_geometry(phantom, config)?;
    let (nz, _, _) = phantom.stack.dim();
    let n = config.grid_xy;

    // transfer function of each occupied layer at its defocus
    let occupied: Vec<usize> = (0..nz)
        .filter(|&z| phantom.stack.index_axis(Axis(0), z).iter().any(|v| *v != 0.0))
        .collect();
    let layer_otfs: Vec<(usize, Array2<C64>)> = par::map_collect(occupied, |z| {
        let defocus = (z as isize - phantom.focal_layer as isize) as f64 * phantom.z_step;
        let psf = optics::psf_slice(config, defocus).expect("validated config");
        (z, fft::fft2_real(&fft::ifftshift2(&psf)))
    });

    let results: Vec<Array2<f64>> = par::map_collect(patterns.to_vec(), |pattern| {
        let mut acc: Array2<C64> = Array2::zeros((n, n));
        for (z, g) in &layer_otfs {
            let layer = phantom.stack.index_axis(Axis(0), *z);
            let modulated = Array2::from_shape_fn((n, n), |(y, x)| layer[[y, x]] * pattern[[y, x]]);
            let mut spec = fft::fft2_real(&modulated);
            spec.zip_mut_with(g, |a, b| *a *= *b);
            acc += &spec;
        }
        fft::ifft2_real(&acc)
    });
    Ok(results)
}

/// Simulate the nine composite-illumination raw frames.
pub fn simulate_frames(
    phantom: &Phantom,
    params: &IlluminationParams,
    table: &PhaseTable,
    config: &OpticalConfig,
    noise: Option<NoiseMeta>,
) -> Result<RawFrameSet> {
    config.validate()?;
    let patterns: Vec<Array2<f64>> = table
        .entries
        .iter()
        .map(|e| illum::pattern(params, (e[0], e[1]), config.grid_xy, config.pixel_size))
        .collect::<Result<_>>()?;
    let mut frames = simulate_with_patterns(phantom, &patterns, config)?;
    if let Some(meta) = noise {
        frames = add_noise(&frames, meta.photon_budget, meta.read_noise_sd, meta.seed)?;
    }
    Ok(RawFrameSet {
        frames,
        table: table.clone(),
        mode: FrameMode::FourBeam,
        noise_meta: noise,
    })
}

/// Simulate the conventional two-beam baseline: `orientations x 3 phases`
/// frames with `I = 1 + m cos(2 pi k.r + phi)`.
pub fn simulate_conventional_frames(
    phantom: &Phantom,
    two_beam: &TwoBeamParams,
    config: &OpticalConfig,
    noise: Option<NoiseMeta>,
) -> Result<RawFrameSet> {
    config.validate()?;
    two_beam.validate()?;
    let nyquist = config.nyquist();
    let n = config.grid_xy;
    let mut patterns = Vec::new();
    let mut entries = [[0.0; 2]; 9];
    for o in 0..two_beam.orientations_deg.len() {
        let k = two_beam.wavevector(o);
        if k[0].abs() > nyquist || k[1].abs() > nyquist {
            return Err(Error::validation(
                "pattern aliased: two-beam frequency beyond Nyquist",
            ));
        }
        for (p, phase) in two_beam.phases.iter().enumerate() {
            let phi = phase + two_beam.initial_phase;
            patterns.push(Array2::from_shape_fn((n, n), |(y, x)| {
                let arg = 2.0
                    * PI
                    * (k[0] * y as f64 * config.pixel_size + k[1] * x as f64 * config.pixel_size)
                    + phi;
                1.0 + two_beam.depth * arg.cos()
            }));
            let idx = o * two_beam.phases.len() + p;
            if idx < 9 {
                entries[idx] = [*phase, 0.0];
            }
        }
    }
    let mut frames = simulate_with_patterns(phantom, &patterns, config)?;
    if let Some(meta) = noise {
        frames = add_noise(&frames, meta.photon_budget, meta.read_noise_sd, meta.seed)?;
    }
    Ok(RawFrameSet {
        frames,
        table: PhaseTable { entries },
        mode: FrameMode::Conventional,
        noise_meta: noise,
    })
}

/// Apply Poisson photon noise plus Gaussian read noise.
///
/// Pixel means are `frame * budget / max(all frames)`; negative read-noise
/// excursions are kept (no clipping) to preserve the linear frame model.
/// Deterministic: frame `i` uses stream `i` of a counter-based RNG seeded
/// by `seed`.
pub fn add_noise(
    frames: &[Array2<f64>],
    photon_budget: f64,
    read_noise_sd: f64,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    if photon_budget <= 0.0 {
        return Err(Error::validation("photon budget must be positive"));
    }
    if read_noise_sd < 0.0 {
        return Err(Error::validation("read noise must be nonnegative"));
    }
    let peak = frames
        .iter()
        .flat_map(|f| f.iter())
        .cloned()
        .fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { photon_budget / peak } else { 0.0 };
    let indexed: Vec<(usize, Array2<f64>)> = frames.iter().cloned().enumerate().collect();
    let noisy = par::map_collect(indexed, |(i, frame)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        frame.mapv(|v| {
            let lambda = (v * scale).max(0.0);
            let photons = if lambda > 0.0 {
                Poisson::new(lambda).expect("positive lambda").sample(&mut rng)
            } else {
                0.0
            };
            let read: f64 = if read_noise_sd > 0.0 {
                rng.sample::<f64, _>(rand_distr::StandardNormal) * read_noise_sd
            } else {
                0.0
            };
            photons + read
        })
    });
    Ok(noisy)
}
