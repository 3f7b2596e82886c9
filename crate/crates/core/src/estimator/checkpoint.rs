//! Binary checkpoint file.
//!
//! ```text
//! "ABRN" | version: u32 LE | descriptor length: u32 LE | descriptor (UTF-8 JSON)
//!        | weights: f32 LE × weight_count (flat layer order, see `network`)
//!        | [optimizer: t u64 LE, m f64 LE × N, v f64 LE × N]   if descriptor.optimizer_state
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::network::{ArchitectureSpec, Network};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::optics::MicroscopeConfig;
use crate::volume::Volume;
use crate::zernike::{AmplitudeVector, ModeIndex, Scheme};

pub const MAGIC: &[u8; 4] = b"ABRN";
pub const VERSION: u32 = 1;

/// A trained (or freshly initialized) regressor with everything needed to
/// use it: the mode list, the optics it was trained for, and optionally the
/// generator config and optimizer state.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub network: Network,
    pub modes: Vec<ModeIndex>,
    pub microscope: MicroscopeConfig,
    pub generator: Option<GeneratorConfig>,
    pub optimizer: Option<Adam>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    architecture: ArchitectureSpec,
    scheme: Scheme,
    modes: Vec<u32>,
    microscope: MicroscopeConfig,
    generator: Option<GeneratorConfig>,
    step: u64,
    weight_count: usize,
    optimizer_state: bool,
    weight_layout: String,
}

const LAYOUT: &str =
    "forward order; conv [cout][cin][kd][kh][kw] + bias[cout]; dense [out][in] + bias[out]";

impl ModelCheckpoint {
    pub fn new(
        spec: ArchitectureSpec,
        modes: Vec<ModeIndex>,
        microscope: MicroscopeConfig,
        seed: u64,
    ) -> Result<Self> {
        if spec.n_outputs != modes.len() {
            return Err(Error::validation(format!(
                "architecture has {} outputs for {} modes",
                spec.n_outputs,
                modes.len()
            )));
        }
        AmplitudeVector::zeros(modes.clone())?;
        microscope.validate()?;
        Ok(ModelCheckpoint {
            network: Network::new(spec, seed)?,
            modes,
            microscope,
            generator: None,
            optimizer: None,
            step: 0,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.network.spec().input_shape
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let scheme = self.modes.first().map_or(Scheme::Ansi, |m| m.scheme());
        let desc = Descriptor {
            architecture: self.network.spec().clone(),
            scheme,
            modes: self.modes.iter().map(|m| m.index_in(scheme)).collect(),
            microscope: self.microscope.clone(),
            generator: self.generator.clone(),
            step: self.step,
            weight_count: self.network.param_count(),
            optimizer_state: self.optimizer.is_some(),
            weight_layout: LAYOUT.to_string(),
        };
        let json = serde_json::to_vec(&desc)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * desc.weight_count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &w in self.network.params() {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&opt.t.to_le_bytes());
            for v in opt.m.iter().chain(&opt.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let desc: Descriptor = serde_json::from_slice(take(len)?)
            .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
        let weights: Vec<f64> = take(4 * desc.weight_count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let optimizer = if desc.optimizer_state {
            let t = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let n = desc.weight_count;
            let vals: Vec<f64> = take(16 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Some(Adam {
                learning_rate: 0.0,
                t,
                m: vals[..n].to_vec(),
                v: vals[n..].to_vec(),
            })
        } else {
            None
        };
        if !take(0)?.is_empty() || !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let modes = desc
            .modes
            .iter()
            .map(|&j| ModeIndex::from_single_index(desc.scheme, j))
            .collect::<Result<Vec<_>>>()?;
        if modes.len() != desc.architecture.n_outputs {
            return Err(Error::Checkpoint("mode count differs from outputs".into()));
        }
        Ok(ModelCheckpoint {
            network: Network::from_params(desc.architecture, weights)?,
            modes,
            microscope: desc.microscope,
            generator: desc.generator,
            optimizer,
            step: desc.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Anything that maps a volume to an amplitude vector for a fixed
/// microscope: trained checkpoints as well as test stubs.
pub trait AberrationEstimator: Sync {
    fn modes(&self) -> &[ModeIndex];
    fn microscope(&self) -> &MicroscopeConfig;
    fn input_shape(&self) -> [usize; 3];
    fn predict(&self, volume: &Volume) -> Result<AmplitudeVector>;
}

impl AberrationEstimator for ModelCheckpoint {
    fn modes(&self) -> &[ModeIndex] {
        &self.modes
    }

    fn microscope(&self) -> &MicroscopeConfig {
        &self.microscope
    }

    fn input_shape(&self) -> [usize; 3] {
        self.network.spec().input_shape
    }

    fn predict(&self, volume: &Volume) -> Result<AmplitudeVector> {
        let out = self
            .network
            .forward(std::slice::from_ref(volume))?
            .pop()
            .expect("one prediction per volume");
        AmplitudeVector::new(self.modes.clone(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelSize;
    use ndarray::Array3;

    fn checkpoint() -> ModelCheckpoint {
        let modes: Vec<_> = [3, 5, 8]
            .iter()
            .map(|&j| ModeIndex::ansi(j).unwrap())
            .collect();
        let mut spec = ArchitectureSpec::standard(3, [8, 8, 8]);
        spec.n_blocks = 2;
        spec.base_channels = 4;
        spec.dense_widths = vec![8, 8];
        ModelCheckpoint::new(spec, modes, MicroscopeConfig::confocal_oil_488(), 9).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = checkpoint();
        ck.optimizer = Some(Adam::new(3e-4, ck.network.param_count()));
        ck.step = 42;
        let v = Volume {
            data: Array3::from_shape_fn((8, 8, 8), |(z, y, x)| ((z * 7 + y * 3 + x) % 5) as f64),
            voxel: VoxelSize::default(),
        };
        let before = ck.network.forward(std::slice::from_ref(&v)).unwrap();
        let back = ModelCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let after = back.network.forward(std::slice::from_ref(&v)).unwrap();
        assert_eq!(before, after);
        assert_eq!(back.step, 42);
        assert_eq!(back.modes, ck.modes);
        assert_eq!(back.optimizer.unwrap().m.len(), ck.network.param_count());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = checkpoint().to_bytes().unwrap();
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(ModelCheckpoint::from_bytes(&extra).is_err());
    }
}
