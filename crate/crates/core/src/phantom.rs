//! Procedural phantoms: branching filament networks with a few cell bodies,
//! loosely resembling protoplasmic astrocytes. Used wherever an unaberrated
//! object volume is needed and no acquired stack is at hand.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelSize};

fn default_somata() -> usize {
    3
}
fn default_branches() -> usize {
    10
}
fn default_radius() -> f64 {
    0.09
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `(nz, ny, nx)` in voxels.
    pub shape: [usize; 3],
    #[serde(default = "default_somata")]
    pub somata: usize,
    /// Primary processes per cell body.
    #[serde(default = "default_branches")]
    pub branches: usize,
    /// Gaussian tube radius (µm).
    #[serde(default = "default_radius")]
    pub filament_radius_um: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, shape: [usize; 3]) -> Self {
        PhantomSpec {
            seed,
            shape,
            somata: default_somata(),
            branches: default_branches(),
            filament_radius_um: default_radius(),
        }
    }
}

struct Canvas {
    data: Array3<f64>,
    voxel: VoxelSize,
}

impl Canvas {
    /// Max-composites a Gaussian blob centred at `p` (µm).
    fn splat(&mut self, p: [f64; 3], sigma: f64, peak: f64) {
        let reach = 3.0 * sigma;
        let dims = self.data.dim();
        let dims = [dims.0, dims.1, dims.2];
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let d = self.voxel.0[a];
            let l = ((p[a] - reach) / d).floor().max(0.0) as usize;
            let h = (((p[a] + reach) / d).ceil() as isize).min(dims[a] as isize - 1);
            if h < 0 || l >= dims[a] {
                return;
            }
            lo[a] = l;
            hi[a] = h as usize;
        }
        let inv = 1.0 / (2.0 * sigma * sigma);
        for z in lo[0]..=hi[0] {
            let dz = z as f64 * self.voxel.0[0] - p[0];
            for y in lo[1]..=hi[1] {
                let dy = y as f64 * self.voxel.0[1] - p[1];
                for x in lo[2]..=hi[2] {
                    let dx = x as f64 * self.voxel.0[2] - p[2];
                    let v = peak * (-(dz * dz + dy * dy + dx * dx) * inv).exp();
                    let cell = &mut self.data[[z, y, x]];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    }
}

fn random_direction(rng: &mut impl Rng) -> [f64; 3] {
    let cos_t: f64 = rng.gen_range(-1.0..1.0);
    let phi = rng.gen_range(0.0..2.0 * PI);
    let sin_t = (1.0 - cos_t * cos_t).sqrt();
    [cos_t, sin_t * phi.sin(), sin_t * phi.cos()]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

#[allow(clippy::too_many_arguments)]
fn grow(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    start: [f64; 3],
    dir: [f64; 3],
    length: f64,
    radius: f64,
    brightness: f64,
    depth: u32,
) {
    let step = radius * 0.7;
    let mut p = start;
    let mut d = dir;
    let steps = (length / step) as usize;
    for i in 0..steps {
        let taper = 1.0 - 0.5 * i as f64 / steps as f64;
        canvas.splat(p, radius * taper, brightness);
        let jitter = random_direction(rng);
        d = normalize([
            d[0] + 0.25 * jitter[0],
            d[1] + 0.25 * jitter[1],
            d[2] + 0.25 * jitter[2],
        ]);
        p = [p[0] + step * d[0], p[1] + step * d[1], p[2] + step * d[2]];
        if depth < 3 && rng.gen::<f64>() < 0.02 {
            let side = random_direction(rng);
            let child = normalize([d[0] + side[0], d[1] + side[1], d[2] + side[2]]);
            let rest = length * (1.0 - i as f64 / steps as f64) * rng.gen_range(0.4..0.9);
            let child_brightness = brightness * rng.gen_range(0.6..1.0);
            grow(
                canvas,
                rng,
                p,
                child,
                rest,
                radius * 0.8,
                child_brightness,
                depth + 1,
            );
        }
    }
}

/// Renders a phantom with values in `[0, 1]`.
pub fn synthetic_phantom(spec: &PhantomSpec, voxel: VoxelSize) -> Result<Volume> {
    voxel.validate()?;
    if spec.shape.contains(&0) {
        return Err(Error::validation("phantom shape must be non-zero"));
    }
    if !(spec.filament_radius_um > 0.0) {
        return Err(Error::validation("filament radius must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canvas = Canvas {
        data: Array3::zeros(spec.shape),
        voxel,
    };
    let extent: Vec<f64> = (0..3).map(|a| spec.shape[a] as f64 * voxel.0[a]).collect();
    let diag = extent.iter().map(|e| e * e).sum::<f64>().sqrt();
    for _ in 0..spec.somata {
        let soma = [
            rng.gen_range(0.2..0.8) * extent[0],
            rng.gen_range(0.1..0.9) * extent[1],
            rng.gen_range(0.1..0.9) * extent[2],
        ];
        let soma_r = rng.gen_range(2.5..4.0) * spec.filament_radius_um;
        canvas.splat(soma, soma_r, 1.0);
        for _ in 0..spec.branches {
            let dir = random_direction(&mut rng);
            let length = rng.gen_range(0.3..0.8) * diag;
            let brightness = rng.gen_range(0.5..0.95);
            grow(
                &mut canvas,
                &mut rng,
                soma,
                dir,
                length,
                spec.filament_radius_um,
                brightness,
                0,
            );
        }
    }
    let max = canvas.data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        canvas.data.mapv_inplace(|v| v / max);
    }
    Volume::new(canvas.data, voxel)
}
