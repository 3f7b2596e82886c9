//! File formats: TIFF volumes, JSON configs, CSV manifests.
//!
//! Volumes are `(z, y, x)` everywhere. Voxel sizes given as the usual
//! `(x, y, z)` tuple must be reordered to `[dz, dy, dx]`.

mod config;
mod manifest;
mod tiff;

pub use self::config::{
    config_from_value, load_config, parse_config, Config, ModelConfig, CONFIG_VERSION,
};
pub use self::manifest::{read_manifest, write_manifest, ManifestRow};
pub use self::tiff::{read_tiff, read_tiff_raw, write_tiff, TiffDtype};

use crate::error::Result;
use crate::generator::{GeneratorConfig, PhantomSource};
use crate::optics::MicroscopeConfig;
use crate::phantom::synthetic_phantom;
use crate::volume::Volume;

/// Loads or renders the phantoms a generator config names. TIFF phantoms
/// without voxel metadata take the microscope's voxel size.
pub fn load_phantoms(
    config: &GeneratorConfig,
    microscope: &MicroscopeConfig,
) -> Result<Vec<Volume>> {
    config
        .phantoms
        .iter()
        .map(|source| match source {
            PhantomSource::Path(path) => read_tiff(path, microscope.voxel_um),
            PhantomSource::Synthetic { synthetic } => {
                synthetic_phantom(synthetic, microscope.voxel_um)
            }
        })
        .collect()
}
