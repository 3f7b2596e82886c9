//! Synthetic aberrated volumes with ground-truth amplitude vectors.
//!
//! Every sample is driven by its own 64-bit seed, derived from the run seed,
//! a namespace (train, validation, one per test series) and the sample index.
//! Two ChaCha streams hang off that seed: stream 0 draws the phantom, crop
//! offset, amplitudes and noise parameters; stream 1 draws per-voxel noise.
//! A sample can therefore be rebuilt from its [`Provenance`] and truth alone,
//! and batches come out identical whatever the worker count.
//!
//! Signal model, with `c` the crop (or rasterized sphere) and `h` the PSF:
//!
//! ```text
//! s     = c ⊛ h                      (linear, zero padded, "same" extent)
//! fg    = { s > 0.1 max(s) }
//! scale = (snr - 1) · mean / mean_fg(s)
//! image = max(0, scale · s + N(mean, std))
//! ```
//!
//! so the expected image `scale · s + mean` has foreground mean `snr · mean`
//! and `fg_mean / bg_mean` measured on the image recovers `snr`. Without
//! noise parameters the image is `s` itself.

use ndarray::{Array3, Axis, Zip};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::convolve_same;
use crate::optics::{MicroscopeConfig, PsfModel};
use crate::phantom::PhantomSpec;
use crate::volume::{Mask, Volume};
use crate::zernike::{AmplitudeVector, ModeIndex, Scheme};

/// Foreground threshold relative to the noiseless signal maximum.
pub const FOREGROUND_FRACTION: f64 = 0.1;
pub const MAX_CROP_ATTEMPTS: usize = 10;

pub const NAMESPACE_TRAIN: u64 = 1;
pub const NAMESPACE_VALIDATION: u64 = 2;
const NAMESPACE_TEST_BASE: u64 = 1 << 16;

pub fn test_namespace(mode: &ModeIndex) -> u64 {
    NAMESPACE_TEST_BASE + mode.ansi_index() as u64
}

/// Closed interval; deserializes from either a number or a `[lo, hi]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn lo(&self) -> f64 {
        self.0
    }
    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.0 + (self.1 - self.0) * rng.gen::<f64>()
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 <= self.1) {
            return Err(Error::validation(format!(
                "{name}: need lo <= hi, got ({}, {})",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for Range {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Scalar(f64),
            Pair([f64; 2]),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Scalar(v) => Range(v, v),
            Repr::Pair([a, b]) => Range(a, b),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    #[serde(rename = "mean")]
    pub mean_range: Range,
    #[serde(rename = "std")]
    pub std_range: Range,
    #[serde(rename = "snr")]
    pub snr_range: Range,
    /// Blur applied to the noiseless signal, in voxels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian_blur_sigma: Option<f64>,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        self.mean_range.check("noise.mean")?;
        self.std_range.check("noise.std")?;
        self.snr_range.check("noise.snr")?;
        if self.mean_range.lo() <= 0.0 {
            return Err(Error::validation("noise.mean must be positive"));
        }
        if self.std_range.lo() < 0.0 {
            return Err(Error::validation("noise.std must be non-negative"));
        }
        if self.snr_range.lo() <= 0.0 {
            return Err(Error::validation("noise.snr must be positive"));
        }
        if let Some(s) = self.gaussian_blur_sigma {
            if !(s > 0.0) {
                return Err(Error::validation("gaussian_blur_sigma must be positive"));
            }
        }
        Ok(())
    }
}

/// Where a phantom volume comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PhantomSource {
    Path(std::path::PathBuf),
    Synthetic { synthetic: PhantomSpec },
}

fn default_point_radius() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub scheme: Scheme,
    /// Single indices under `scheme`.
    pub modes: Vec<u32>,
    pub amp_range: [f64; 2],
    pub crop_size: [usize; 3],
    #[serde(default)]
    pub jitter: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_jitter: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phantoms: Vec<PhantomSource>,
    #[serde(default = "default_point_radius")]
    pub point_radius_um: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_planes: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn mode_indices(&self) -> Result<Vec<ModeIndex>> {
        self.modes
            .iter()
            .map(|&j| ModeIndex::from_single_index(self.scheme, j))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let modes = self.mode_indices()?;
        if modes.is_empty() {
            return Err(Error::validation("generator needs at least one mode"));
        }
        AmplitudeVector::zeros(modes)?;
        let [lo, hi] = self.amp_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::validation(format!(
                "amp_range must satisfy lo <= hi, got ({lo}, {hi})"
            )));
        }
        if self.crop_size.iter().any(|&d| d < 8 || d % 2 != 0) {
            return Err(Error::validation(format!(
                "crop_size {:?} must have even dimensions >= 8",
                self.crop_size
            )));
        }
        if !(self.point_radius_um >= 0.0) {
            return Err(Error::validation("point_radius_um must be non-negative"));
        }
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        if let Some(planes) = &self.z_planes {
            if planes.is_empty() || planes.iter().any(|&p| p >= self.crop_size[0]) {
                return Err(Error::validation(format!(
                    "z_planes {planes:?} must be non-empty and below {}",
                    self.crop_size[0]
                )));
            }
        }
        Ok(())
    }

    /// Shape of generated images (`z_planes` may shrink the axial extent).
    pub fn output_shape(&self) -> [usize; 3] {
        let nz = self
            .z_planes
            .as_ref()
            .map_or(self.crop_size[0], |p| p.len());
        [nz, self.crop_size[1], self.crop_size[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub mean: f64,
    pub std: f64,
    pub snr: f64,
}

/// Everything needed to rebuild a sample given the config and its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub phantom_index: Option<usize>,
    pub offset: [usize; 3],
    pub noise: Option<NoiseDraw>,
    /// Signal scale that was applied (derived, recorded for inspection).
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Volume,
    pub truth: AmplitudeVector,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: Volume,
    /// `scale · (c ⊛ h)` before noise and plane selection.
    pub clean: Volume,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStats {
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub bg_std: f64,
    pub snr: f64,
}

/// Which amplitudes a draw populates.
#[derive(Debug, Clone, Copy)]
pub enum AmplitudeDraw {
    AllModes,
    Single(usize),
}

pub fn sample_amplitudes(rng: &mut impl Rng, config: &GeneratorConfig) -> Result<AmplitudeVector> {
    let modes = config.mode_indices()?;
    let range = Range(config.amp_range[0], config.amp_range[1]);
    let amps = modes.iter().map(|_| range.sample(rng)).collect();
    AmplitudeVector::new(modes, amps)
}

/// Crops `shape` out of `volume`. Without jitter the crop is centred; with
/// jitter the offset is uniform over all valid positions, restricted to
/// `max_jitter` voxels around the centre when given.
pub fn crop(
    volume: &Volume,
    shape: [usize; 3],
    jitter: bool,
    max_jitter: Option<[usize; 3]>,
    rng: &mut impl Rng,
) -> Result<(Volume, [usize; 3])> {
    let offset = crop_offset(volume.shape(), shape, jitter, max_jitter, rng)?;
    Ok((volume.crop(offset, shape)?, offset))
}

fn crop_offset(
    full: [usize; 3],
    shape: [usize; 3],
    jitter: bool,
    max_jitter: Option<[usize; 3]>,
    rng: &mut impl Rng,
) -> Result<[usize; 3]> {
    let mut offset = [0; 3];
    for a in 0..3 {
        if shape[a] > full[a] {
            return Err(Error::validation(format!(
                "crop {shape:?} larger than volume {full:?}"
            )));
        }
        let span = full[a] - shape[a];
        let centre = span / 2;
        offset[a] = if !jitter {
            centre
        } else {
            let (lo, hi) = match max_jitter {
                Some(mj) => (centre.saturating_sub(mj[a]), (centre + mj[a]).min(span)),
                None => (0, span),
            };
            rng.gen_range(lo..=hi)
        };
    }
    Ok(offset)
}

/// Binary sphere of `radius_um` centred on voxel `shape / 2`; the centre
/// voxel is always set.
pub fn point_source(
    shape: [usize; 3],
    voxel: &crate::volume::VoxelSize,
    radius_um: f64,
) -> Array3<f64> {
    let c = [shape[0] / 2, shape[1] / 2, shape[2] / 2];
    let mut out = Array3::zeros(shape);
    for ((z, y, x), v) in out.indexed_iter_mut() {
        let dz = (z as f64 - c[0] as f64) * voxel.dz();
        let dy = (y as f64 - c[1] as f64) * voxel.dy();
        let dx = (x as f64 - c[2] as f64) * voxel.dx();
        if (dz * dz + dy * dy + dx * dx).sqrt() <= radius_um {
            *v = 1.0;
        }
    }
    out[c] = 1.0;
    out
}

/// Separable Gaussian blur, zero beyond the borders; `sigma` in voxels.
pub fn gaussian_blur(data: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut cur = data.clone();
    for axis in 0..3 {
        let mut next = Array3::zeros(cur.dim());
        for (src, mut dst) in cur
            .lanes(Axis(axis))
            .into_iter()
            .zip(next.lanes_mut(Axis(axis)))
        {
            let n = src.len() as isize;
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = i + k as isize - radius;
                    if j >= 0 && j < n {
                        acc += w * src[j as usize];
                    }
                }
                dst[i as usize] = acc;
            }
        }
        cur = next;
    }
    cur
}

/// Plain sample statistics over two disjoint, non-empty masks.
pub fn measure_noise(volume: &Volume, foreground: &Mask, background: &Mask) -> Result<NoiseStats> {
    let shape = volume.data.dim();
    if foreground.dim() != shape || background.dim() != shape {
        return Err(Error::validation("mask shape differs from volume shape"));
    }
    let mut fg = (0.0, 0usize);
    let mut bg = Vec::new();
    let mut overlap = false;
    Zip::from(&volume.data)
        .and(foreground)
        .and(background)
        .for_each(|&v, &f, &b| {
            if f && b {
                overlap = true;
            }
            if f {
                fg.0 += v;
                fg.1 += 1;
            }
            if b {
                bg.push(v);
            }
        });
    if overlap {
        return Err(Error::validation("foreground and background masks overlap"));
    }
    if fg.1 == 0 || bg.is_empty() {
        return Err(Error::validation(
            "foreground and background masks must be non-empty",
        ));
    }
    let fg_mean = fg.0 / fg.1 as f64;
    let n = bg.len() as f64;
    let bg_mean = bg.iter().sum::<f64>() / n;
    let bg_std = if bg.len() > 1 {
        (bg.iter().map(|v| (v - bg_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    if bg_mean == 0.0 {
        return Err(Error::UndefinedSnr);
    }
    Ok(NoiseStats {
        fg_mean,
        bg_mean,
        bg_std,
        snr: fg_mean / bg_mean,
    })
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample seed for `index` within `namespace` of a run seeded with `seed`.
pub fn sample_seed(seed: u64, namespace: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ namespace) ^ index)
}

pub struct Generator {
    config: GeneratorConfig,
    modes: Vec<ModeIndex>,
    phantoms: Vec<Volume>,
    psf: PsfModel,
}

impl Generator {
    pub fn new(
        config: GeneratorConfig,
        microscope: &MicroscopeConfig,
        phantoms: Vec<Volume>,
    ) -> Result<Self> {
        config.validate()?;
        microscope.validate()?;
        for (i, p) in phantoms.iter().enumerate() {
            if (0..3).any(|a| p.shape()[a] < config.crop_size[a]) {
                return Err(Error::validation(format!(
                    "phantom {i} with shape {:?} is smaller than crop {:?}",
                    p.shape(),
                    config.crop_size
                )));
            }
        }
        if let (Some(mj), false) = (config.max_jitter, phantoms.is_empty()) {
            // every jittered crop must stay inside every phantom
            for p in &phantoms {
                for a in 0..3 {
                    let span = p.shape()[a] - config.crop_size[a];
                    if mj[a] > span / 2 {
                        return Err(Error::validation(format!(
                            "max_jitter {mj:?} exceeds phantom margin on axis {a}"
                        )));
                    }
                }
            }
        }
        let modes = config.mode_indices()?;
        let psf = PsfModel::new(microscope, config.crop_size)?;
        Ok(Generator {
            config,
            modes,
            phantoms,
            psf,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn microscope(&self) -> &MicroscopeConfig {
        self.psf.config()
    }

    pub fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    pub fn phantoms(&self) -> &[Volume] {
        &self.phantoms
    }

    fn amp_range(&self) -> Range {
        Range(self.config.amp_range[0], self.config.amp_range[1])
    }

    /// Draws and renders the sample owned by `seed`.
    pub fn sample_from_seed(&self, seed: u64, draw: AmplitudeDraw) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phantom_index = if self.phantoms.is_empty() {
            None
        } else {
            Some(rng.gen_range(0..self.phantoms.len()))
        };
        let offset = match phantom_index {
            None => [0; 3],
            Some(i) => self.draw_offset(&self.phantoms[i], &mut rng)?,
        };
        let range = self.amp_range();
        let mut amps = vec![0.0; self.modes.len()];
        match draw {
            AmplitudeDraw::AllModes => amps.iter_mut().for_each(|a| *a = range.sample(&mut rng)),
            AmplitudeDraw::Single(k) => amps[k] = range.sample(&mut rng),
        }
        let truth = AmplitudeVector::new(self.modes.clone(), amps)?;
        let noise = self.config.noise.as_ref().map(|n| NoiseDraw {
            mean: n.mean_range.sample(&mut rng),
            std: n.std_range.sample(&mut rng),
            snr: n.snr_range.sample(&mut rng),
        });
        let provenance = Provenance {
            seed,
            phantom_index,
            offset,
            noise,
            scale: 1.0,
        };
        let rendered = self.render(&truth, &provenance)?;
        Ok(Sample {
            image: rendered.image,
            truth,
            provenance: Provenance {
                scale: rendered.scale,
                ..provenance
            },
        })
    }

    fn draw_offset(&self, phantom: &Volume, rng: &mut ChaCha8Rng) -> Result<[usize; 3]> {
        for _ in 0..MAX_CROP_ATTEMPTS {
            let offset = crop_offset(
                phantom.shape(),
                self.config.crop_size,
                self.config.jitter,
                self.config.max_jitter,
                rng,
            )?;
            let region = phantom.crop(offset, self.config.crop_size)?;
            if region.data.iter().any(|&v| v != 0.0) {
                return Ok(offset);
            }
        }
        Err(Error::EmptyPhantomRegion {
            attempts: MAX_CROP_ATTEMPTS,
        })
    }

    /// The unaberrated object the PSF is applied to.
    pub fn object(&self, provenance: &Provenance) -> Result<Volume> {
        match provenance.phantom_index {
            None => Ok(Volume {
                data: point_source(
                    self.config.crop_size,
                    &self.microscope().voxel_um,
                    self.config.point_radius_um,
                ),
                voxel: self.microscope().voxel_um,
            }),
            Some(i) => {
                let phantom = self
                    .phantoms
                    .get(i)
                    .ok_or_else(|| Error::validation(format!("phantom index {i} out of range")))?;
                phantom.crop(provenance.offset, self.config.crop_size)
            }
        }
    }

    /// Deterministically rebuilds the image for a truth and provenance.
    pub fn render(&self, truth: &AmplitudeVector, provenance: &Provenance) -> Result<Rendered> {
        let object = self.object(provenance)?;
        let psf = self.psf.compute(truth)?;
        let mut signal = convolve_same(&object.data, &psf.volume.data);
        signal.mapv_inplace(|v| v.max(0.0));
        if let Some(sigma) = self
            .config
            .noise
            .as_ref()
            .and_then(|n| n.gaussian_blur_sigma)
        {
            signal = gaussian_blur(&signal, sigma);
        }
        let voxel = self.microscope().voxel_um;
        let (clean, image, scale) = match provenance.noise {
            None => (signal.clone(), signal, 1.0),
            Some(draw) => {
                let max = signal.iter().copied().fold(0.0, f64::max);
                let threshold = FOREGROUND_FRACTION * max;
                let (sum, count) = signal
                    .iter()
                    .filter(|&&v| v > threshold)
                    .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                let scale = if count == 0 || sum == 0.0 {
                    0.0
                } else {
                    (draw.snr - 1.0).max(0.0) * draw.mean / (sum / count as f64)
                };
                let clean = signal.mapv(|v| v * scale);
                let mut rng = ChaCha8Rng::seed_from_u64(provenance.seed);
                rng.set_stream(1);
                let normal = Normal::new(draw.mean, draw.std)
                    .map_err(|e| Error::validation(format!("noise distribution: {e}")))?;
                let image = clean.mapv(|v| (v + normal.sample(&mut rng)).max(0.0));
                (clean, image, scale)
            }
        };
        let image = match &self.config.z_planes {
            None => image,
            Some(planes) => image.select(Axis(0), planes),
        };
        Ok(Rendered {
            image: Volume { data: image, voxel },
            clean: Volume { data: clean, voxel },
            scale,
        })
    }

    pub fn sample_at(&self, namespace: u64, index: u64, draw: AmplitudeDraw) -> Result<Sample> {
        self.sample_from_seed(sample_seed(self.config.seed, namespace, index), draw)
    }

    /// Samples `indices` of `namespace`, rendered in parallel, returned in order.
    pub fn samples(
        &self,
        namespace: u64,
        indices: std::ops::Range<u64>,
        draw: AmplitudeDraw,
    ) -> Result<Vec<Sample>> {
        indices
            .into_par_iter()
            .map(|i| self.sample_at(namespace, i, draw))
            .collect()
    }

    /// Endless batches of `batch_size` random-amplitude samples.
    pub fn stream(&self, namespace: u64, batch_size: usize) -> Stream<'_> {
        Stream {
            generator: self,
            namespace,
            batch_size: batch_size as u64,
            next: 0,
        }
    }

    /// `n_images` samples in which only `mode` carries an amplitude.
    pub fn test_series(&self, mode: &ModeIndex, n_images: usize) -> Result<Vec<Sample>> {
        let k = self
            .modes
            .iter()
            .position(|m| m.same_mode(mode))
            .ok_or_else(|| Error::validation(format!("mode {mode} not in generator config")))?;
        self.samples(
            test_namespace(mode),
            0..n_images as u64,
            AmplitudeDraw::Single(k),
        )
    }
}

pub struct Stream<'a> {
    generator: &'a Generator,
    namespace: u64,
    batch_size: u64,
    next: u64,
}

impl Iterator for Stream<'_> {
    type Item = Result<Vec<Sample>>;

    fn next(&mut self) -> Option<Self::Item> {
        let start = self.next;
        self.next += self.batch_size;
        Some(self.generator.samples(
            self.namespace,
            start..start + self.batch_size,
            AmplitudeDraw::AllModes,
        ))
    }
}
