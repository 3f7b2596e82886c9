//! Richardson–Lucy deconvolution with a supplied or predicted PSF.

use ndarray::{s, Array3, Zip};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::AberrationEstimator;
use crate::fft::{embed_centered, to_complex, Fft3};
use crate::optics::PsfModel;
use crate::volume::Volume;
use crate::zernike::AmplitudeVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Mirror the volume (edge sample repeated) into the pad.
    ReflectPad,
    ZeroPad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeconvConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
    /// Pad per axis; `None` means the PSF half-size.
    #[serde(default)]
    pub pad_extent: Option<[usize; 3]>,
}

fn default_iterations() -> usize {
    25
}
fn default_epsilon() -> f64 {
    1e-12
}
fn default_boundary() -> Boundary {
    Boundary::ReflectPad
}

impl Default for DeconvConfig {
    fn default() -> Self {
        DeconvConfig {
            iterations: default_iterations(),
            epsilon: default_epsilon(),
            boundary: default_boundary(),
            pad_extent: None,
        }
    }
}

impl DeconvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("iterations must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Index into `0..n` for a position `i` of the padded axis (`i - pad`),
/// mirrored with the edge sample repeated.
fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

fn pad(data: &Array3<f64>, p: [usize; 3], boundary: Boundary) -> Array3<f64> {
    let (nz, ny, nx) = data.dim();
    let shape = (nz + 2 * p[0], ny + 2 * p[1], nx + 2 * p[2]);
    match boundary {
        Boundary::ZeroPad => {
            let mut out = Array3::zeros(shape);
            out.slice_mut(s![p[0]..p[0] + nz, p[1]..p[1] + ny, p[2]..p[2] + nx])
                .assign(data);
            out
        }
        Boundary::ReflectPad => Array3::from_shape_fn(shape, |(z, y, x)| {
            data[[
                mirror(z as isize - p[0] as isize, nz),
                mirror(y as isize - p[1] as isize, ny),
                mirror(x as isize - p[2] as isize, nx),
            ]]
        }),
    }
}

fn check_psf(psf: &Array3<f64>) -> Result<Array3<f64>> {
    if psf.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::validation("PSF must be finite and non-negative"));
    }
    let sum = psf.sum();
    if sum <= 0.0 {
        return Err(Error::validation("PSF is all zero"));
    }
    Ok(psf.mapv(|v| v / sum))
}

/// Circular convolution operator on the padded domain.
struct Blur {
    fft: Fft3,
    otf: Array3<Complex64>,
}

impl Blur {
    fn new(psf: &Array3<f64>, shape: [usize; 3]) -> Self {
        let fft = Fft3::new(shape);
        let mut otf = to_complex(&embed_centered(psf, shape));
        fft.forward(&mut otf);
        Blur { fft, otf }
    }

    fn apply(&self, u: &Array3<f64>, adjoint: bool) -> Array3<f64> {
        let mut f = to_complex(u);
        self.fft.forward(&mut f);
        if adjoint {
            f.zip_mut_with(&self.otf, |a, h| *a *= h.conj());
        } else {
            f.zip_mut_with(&self.otf, |a, h| *a *= h);
        }
        self.fft.inverse(&mut f);
        f.mapv(|v| v.re)
    }
}

/// Poisson log-likelihood `Σ d ln(Hu) − Hu`, dropping the `ln d!` constant.
fn log_likelihood(d: &Array3<f64>, hu: &Array3<f64>, eps: f64) -> f64 {
    Zip::from(d).and(hu).fold(0.0, |acc, &d, &h| {
        let h = h.max(0.0);
        acc + if d > 0.0 { d * (h + eps).ln() } else { 0.0 } - h
    })
}

fn run(
    observed: &Volume,
    psf: &Array3<f64>,
    config: &DeconvConfig,
    trace: bool,
) -> Result<(Volume, Vec<f64>)> {
    config.validate()?;
    if observed.data.iter().any(|v| *v < 0.0) {
        return Err(Error::validation("observed volume has negative values"));
    }
    let h = check_psf(psf)?;
    let (kz, ky, kx) = h.dim();
    let p = config.pad_extent.unwrap_or([kz / 2, ky / 2, kx / 2]);
    let d = pad(&observed.data, p, config.boundary);
    let shape = {
        let (a, b, c) = d.dim();
        [a, b, c]
    };
    let blur = Blur::new(&h, shape);
    let eps = config.epsilon;

    let mut u = d.clone();
    let mut likelihoods = Vec::new();
    let mut hu = blur.apply(&u, false);
    for _ in 0..config.iterations {
        if trace {
            likelihoods.push(log_likelihood(&d, &hu, eps));
        }
        let mut ratio = d.clone();
        ratio.zip_mut_with(&hu, |r, &h| *r /= h.max(0.0) + eps);
        let correction = blur.apply(&ratio, true);
        u.zip_mut_with(&correction, |u, &c| *u = (*u * c).max(0.0));
        hu = blur.apply(&u, false);
    }
    if trace {
        likelihoods.push(log_likelihood(&d, &hu, eps));
    }
    let [nz, ny, nx] = observed.shape();
    let data = u
        .slice(s![p[0]..p[0] + nz, p[1]..p[1] + ny, p[2]..p[2] + nx])
        .to_owned();
    Ok((
        Volume {
            data,
            voxel: observed.voxel,
        },
        likelihoods,
    ))
}

/// Deconvolves `observed` with `psf` (renormalized to unit sum).
///
/// The centre of `psf` is voxel `k / 2` per axis. Iterates from
/// `u₀ = observed` on the padded domain and crops on return.
pub fn richardson_lucy(
    observed: &Volume,
    psf: &Array3<f64>,
    config: &DeconvConfig,
) -> Result<Volume> {
    run(observed, psf, config, false).map(|r| r.0)
}

/// Like [`richardson_lucy`], also returning the Poisson log-likelihood of
/// the padded observation before the first and after every iteration.
pub fn richardson_lucy_traced(
    observed: &Volume,
    psf: &Array3<f64>,
    config: &DeconvConfig,
) -> Result<(Volume, Vec<f64>)> {
    run(observed, psf, config, true)
}

/// Which region of the observed volume the model sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropPolicy {
    #[default]
    Center,
    Offset([usize; 3]),
}

/// Predicts amplitudes on a crop, synthesizes that PSF at `psf_shape` and
/// deconvolves the whole observed volume with it.
pub fn restore_with_prediction(
    observed: &Volume,
    model: &dyn AberrationEstimator,
    crop: CropPolicy,
    psf_shape: [usize; 3],
    config: &DeconvConfig,
) -> Result<(Volume, AmplitudeVector)> {
    let microscope = model.microscope();
    if !observed.voxel.approx_eq(&microscope.voxel_um, 1e-6) {
        return Err(Error::validation(format!(
            "voxel size {:?} differs from the model's {:?}; weights do not transfer across object scales",
            observed.voxel.0, microscope.voxel_um.0
        )));
    }
    let input = model.input_shape();
    let region = match crop {
        CropPolicy::Center => observed.center_crop(input)?,
        CropPolicy::Offset(o) => observed.crop(o, input)?,
    };
    let amps = model.predict(&region)?;
    let psf = PsfModel::new(microscope, psf_shape)?.compute(&amps)?;
    let restored = richardson_lucy(observed, &psf.volume.data, config)?;
    Ok((restored, amps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelSize;

    fn vol(data: Array3<f64>) -> Volume {
        Volume {
            data,
            voxel: VoxelSize::default(),
        }
    }

    #[test]
    fn mirror_indices() {
        let got: Vec<usize> = (-3..6).map(|i| mirror(i, 3)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 2, 1, 0]);
        assert_eq!(mirror(-5, 1), 0);
    }

    #[test]
    fn delta_psf_is_identity() {
        let obs = vol(Array3::from_shape_fn((6, 7, 8), |(z, y, x)| {
            ((z * 5 + y * 3 + x) % 7) as f64
        }));
        let mut delta = Array3::zeros((5, 5, 5));
        delta[[2, 2, 2]] = 1.0;
        let out = richardson_lucy(&obs, &delta, &DeconvConfig::default()).unwrap();
        let diff = (&out.data - &obs.data)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn flat_field_is_fixed_point() {
        let obs = vol(Array3::from_elem((8, 8, 8), 3.0));
        let psf = Array3::from_shape_fn((5, 5, 5), |(z, y, x)| {
            let r2 = [z, y, x]
                .iter()
                .map(|&i| (i as f64 - 2.0).powi(2))
                .sum::<f64>();
            (-r2 / 2.0).exp()
        });
        let out = richardson_lucy(&obs, &psf, &DeconvConfig::default()).unwrap();
        assert!(out.data.iter().all(|v| (v / 3.0 - 1.0).abs() < 1e-4));
    }

    #[test]
    fn rejects_bad_inputs() {
        let obs = vol(Array3::from_elem((4, 4, 4), 1.0));
        assert!(
            richardson_lucy(&obs, &Array3::zeros((3, 3, 3)), &DeconvConfig::default()).is_err()
        );
        let mut nan = Array3::from_elem((3, 3, 3), 1.0);
        nan[[0, 0, 0]] = f64::NAN;
        assert!(richardson_lucy(&obs, &nan, &DeconvConfig::default()).is_err());
        let mut neg = obs.clone();
        neg.data[[1, 1, 1]] = -1.0;
        assert!(richardson_lucy(
            &neg,
            &Array3::from_elem((3, 3, 3), 1.0),
            &DeconvConfig::default()
        )
        .is_err());
        let cfg = DeconvConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
