//! Scalar angular-spectrum PSF synthesis.
//!
//! For every axial plane `z = (iz - nz/2) dz` the intensity is
//!
//! ```text
//! h(x, y, z) = | IFFT2{ M(k) exp(i 2π W(ρ, θ) / λ) exp(i k_z z) } |²
//! k_z        = 2π sqrt((n_imm / λ)² - |k|²)
//! ```
//!
//! with `M` the binary NA disk (`ρ = |k| λ / NA <= 1`) and `W` the Zernike
//! wavefront in µm. The pupil y axis points up, i.e. against increasing
//! array row index. The lateral grid is optionally oversampled and the
//! central `ny × nx` window kept, which suppresses periodic wrap-around.
//! The whole volume is normalized to unit sum.

use std::f64::consts::PI;

use ndarray::{s, Array3};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft3;
use crate::volume::{Volume, VoxelSize};
use crate::zernike::{AmplitudeVector, RadialPoly};

pub const DEFAULT_IMMERSION_INDEX: f64 = 1.518;

fn default_immersion() -> f64 {
    DEFAULT_IMMERSION_INDEX
}

fn default_oversample() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroscopeConfig {
    pub na: f64,
    pub lambda_um: f64,
    #[serde(default = "default_immersion")]
    pub n_immersion: f64,
    /// `(dz, dy, dx)` in µm.
    pub voxel_um: VoxelSize,
    /// Lateral oversampling factor of the pupil grid (1 disables).
    #[serde(default = "default_oversample")]
    pub psf_oversample: usize,
}

impl MicroscopeConfig {
    pub fn new(na: f64, lambda_um: f64, n_immersion: f64, voxel_um: VoxelSize) -> Result<Self> {
        let cfg = MicroscopeConfig {
            na,
            lambda_um,
            n_immersion,
            voxel_um,
            psf_oversample: default_oversample(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// NA 1.4 oil objective, 488 nm emission, voxel (0.2, 0.068519, 0.068519) µm.
    pub fn confocal_oil_488() -> Self {
        MicroscopeConfig {
            na: 1.4,
            lambda_um: 0.488,
            n_immersion: DEFAULT_IMMERSION_INDEX,
            voxel_um: VoxelSize([0.2, 0.068519, 0.068519]),
            psf_oversample: default_oversample(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.voxel_um.validate()?;
        if !(self.lambda_um.is_finite() && self.lambda_um > 0.0) {
            return Err(Error::validation(format!(
                "wavelength must be positive, got {}",
                self.lambda_um
            )));
        }
        if !(self.na > 0.0 && self.na < self.n_immersion) {
            return Err(Error::validation(format!(
                "need 0 < NA < n_immersion, got NA={} n={}",
                self.na, self.n_immersion
            )));
        }
        let cutoff = self.na / self.lambda_um;
        for (name, d) in [("dy", self.voxel_um.dy()), ("dx", self.voxel_um.dx())] {
            if 1.0 / (2.0 * d) < cutoff {
                return Err(Error::validation(format!(
                    "lateral sampling {name}={d} µm violates Nyquist for NA/λ = {cutoff:.4} /µm"
                )));
            }
        }
        if self.psf_oversample == 0 {
            return Err(Error::validation("psf_oversample must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Psf {
    pub volume: Volume,
    pub config: MicroscopeConfig,
    pub amplitudes: AmplitudeVector,
}

impl Psf {
    pub fn max(&self) -> f64 {
        self.volume.max()
    }
}

struct PupilSample {
    index: (usize, usize),
    rho: f64,
    theta: f64,
    kz: f64,
}

/// Precomputed pupil geometry and FFT plan for one config and shape.
pub struct PsfModel {
    config: MicroscopeConfig,
    shape: [usize; 3],
    grid: [usize; 2],
    pupil: Vec<PupilSample>,
    fft: Fft3,
}

impl PsfModel {
    pub fn new(config: &MicroscopeConfig, shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        if shape.iter().any(|&d| d < 8 || d % 2 != 0) {
            return Err(Error::validation(format!(
                "PSF shape {shape:?} must have even dimensions >= 8"
            )));
        }
        let os = config.psf_oversample;
        let grid = [shape[1] * os, shape[2] * os];
        let (dy, dx) = (config.voxel_um.dy(), config.voxel_um.dx());
        let freq = |i: usize, n: usize, d: f64| {
            let i = i as f64;
            let n_f = n as f64;
            if i < n_f / 2.0 {
                i / (n_f * d)
            } else {
                (i - n_f) / (n_f * d)
            }
        };
        let cutoff = config.na / config.lambda_um;
        let k_medium = config.n_immersion / config.lambda_um;
        let mut pupil = Vec::new();
        for iy in 0..grid[0] {
            let ky = -freq(iy, grid[0], dy);
            for ix in 0..grid[1] {
                let kx = freq(ix, grid[1], dx);
                let k2 = kx * kx + ky * ky;
                let rho = k2.sqrt() / cutoff;
                if rho <= 1.0 {
                    pupil.push(PupilSample {
                        index: (iy, ix),
                        rho,
                        theta: ky.atan2(kx),
                        kz: 2.0 * PI * (k_medium * k_medium - k2).sqrt(),
                    });
                }
            }
        }
        Ok(PsfModel {
            config: config.clone(),
            shape,
            grid,
            pupil,
            fft: Fft3::new([1, grid[0], grid[1]]),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn config(&self) -> &MicroscopeConfig {
        &self.config
    }

    pub fn compute(&self, amplitudes: &AmplitudeVector) -> Result<Psf> {
        let polys: Vec<RadialPoly> = amplitudes.radial_polys();
        let k_phase = 2.0 * PI / self.config.lambda_um;
        let pupil_phase: Vec<f64> = self
            .pupil
            .iter()
            .map(|p| k_phase * amplitudes.wavefront_at(&polys, p.rho, p.theta))
            .collect();

        let [nz, ny, nx] = self.shape;
        let [gy, gx] = self.grid;
        let (oy, ox) = (gy / 2 - ny / 2, gx / 2 - nx / 2);
        let dz = self.config.voxel_um.dz();
        let mut out = Array3::<f64>::zeros((nz, ny, nx));
        let mut field = Array3::<Complex64>::zeros((1, gy, gx));
        for iz in 0..nz {
            let z = (iz as f64 - (nz / 2) as f64) * dz;
            field.fill(Complex64::default());
            for (p, phase) in self.pupil.iter().zip(&pupil_phase) {
                field[[0, p.index.0, p.index.1]] = Complex64::from_polar(1.0, phase + p.kz * z);
            }
            self.fft.inverse(&mut field);
            // fftshift while cropping the central window
            let mut plane = out.slice_mut(s![iz, .., ..]);
            for y in 0..ny {
                let sy = (y + oy + gy / 2) % gy;
                for x in 0..nx {
                    let sx = (x + ox + gx / 2) % gx;
                    plane[[y, x]] = field[[0, sy, sx]].norm_sqr();
                }
            }
        }
        let total = out.sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::validation("PSF has no energy"));
        }
        out.mapv_inplace(|v| v / total);
        Ok(Psf {
            volume: Volume {
                data: out,
                voxel: self.config.voxel_um,
            },
            config: self.config.clone(),
            amplitudes: amplitudes.clone(),
        })
    }
}

pub fn psf_3d(
    amplitudes: &AmplitudeVector,
    config: &MicroscopeConfig,
    shape: [usize; 3],
) -> Result<Psf> {
    PsfModel::new(config, shape)?.compute(amplitudes)
}

/// Peak of `psf` relative to the unaberrated PSF of the same config and shape.
pub fn strehl_proxy(psf: &Psf) -> Result<f64> {
    let reference = psf_3d(&psf.amplitudes.scaled(0.0), &psf.config, psf.volume.shape())?;
    Ok(psf.max() / reference.max())
}
