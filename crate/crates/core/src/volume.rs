//! The 3D intensity array shared by every stage of the pipeline.
//!
//! Axis order is `(z, y, x)` everywhere. Voxel sizes are in micrometres and
//! follow the same order, so a microscope quoted as `(x, y, z) = (0.068519,
//! 0.068519, 0.2)` is stored as `[0.2, 0.068519, 0.068519]`.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel size `(dz, dy, dx)` in micrometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSize(pub [f64; 3]);

impl VoxelSize {
    pub fn new(dz: f64, dy: f64, dx: f64) -> Result<Self> {
        let v = VoxelSize([dz, dy, dx]);
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "voxel sizes must be positive, got {:?}",
                self.0
            )))
        }
    }

    pub fn dz(&self) -> f64 {
        self.0[0]
    }
    pub fn dy(&self) -> f64 {
        self.0[1]
    }
    pub fn dx(&self) -> f64 {
        self.0[2]
    }

    /// Relative comparison, used to check that a volume matches a model.
    pub fn approx_eq(&self, other: &VoxelSize, rel: f64) -> bool {
        self.0
            .iter()
            .zip(other.0.iter())
            .all(|(a, b)| (a - b).abs() <= rel * a.abs().max(b.abs()))
    }
}

impl Default for VoxelSize {
    fn default() -> Self {
        VoxelSize([1.0, 1.0, 1.0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub voxel: VoxelSize,
}

impl Volume {
    pub fn new(data: Array3<f64>, voxel: VoxelSize) -> Result<Self> {
        voxel.validate()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("volume contains non-finite values"));
        }
        if data.is_empty() {
            return Err(Error::validation("volume has an empty dimension"));
        }
        Ok(Volume { data, voxel })
    }

    pub fn zeros(shape: [usize; 3], voxel: VoxelSize) -> Self {
        Volume {
            data: Array3::zeros(shape),
            voxel,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Sub-volume starting at `offset` with extent `shape`.
    pub fn crop(&self, offset: [usize; 3], shape: [usize; 3]) -> Result<Volume> {
        let full = self.shape();
        for a in 0..3 {
            if offset[a] + shape[a] > full[a] {
                return Err(Error::validation(format!(
                    "crop {:?}+{:?} exceeds volume {:?}",
                    offset, shape, full
                )));
            }
        }
        let view = self.data.slice(s![
            offset[0]..offset[0] + shape[0],
            offset[1]..offset[1] + shape[1],
            offset[2]..offset[2] + shape[2]
        ]);
        Ok(Volume {
            data: view.to_owned(),
            voxel: self.voxel,
        })
    }

    /// Centered crop; the offset per axis is `(full - shape) / 2`.
    pub fn center_crop(&self, shape: [usize; 3]) -> Result<Volume> {
        let full = self.shape();
        let mut offset = [0; 3];
        for a in 0..3 {
            if shape[a] > full[a] {
                return Err(Error::validation(format!(
                    "crop {:?} larger than volume {:?}",
                    shape, full
                )));
            }
            offset[a] = (full[a] - shape[a]) / 2;
        }
        self.crop(offset, shape)
    }

    pub fn mean_squared_difference(&self, other: &Volume) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::validation(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let n = self.data.len() as f64;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }
}

/// Boolean voxel mask with the same `(z, y, x)` layout as [`Volume`].
pub type Mask = Array3<bool>;
