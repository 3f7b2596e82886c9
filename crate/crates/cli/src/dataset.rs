//! On-disk datasets: a directory of float32 TIFFs plus `manifest.csv`.

use std::path::{Path, PathBuf};

use aberration::generator::Sample;
use aberration::imageio::{
    read_manifest, read_tiff, write_manifest, write_tiff, ManifestRow, TiffDtype,
};
use aberration::{Error, ModeIndex, Result, Volume, VoxelSize};

pub const MANIFEST: &str = "manifest.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes samples as `sample_NNNNNN.tif` and their manifest. Indices start
/// at `first`, so a split can be written in several chunks.
pub struct SplitWriter {
    dir: PathBuf,
    modes: Vec<ModeIndex>,
    rows: Vec<ManifestRow>,
}

impl SplitWriter {
    pub fn new(dir: &Path, modes: &[ModeIndex]) -> Result<Self> {
        create_dir(dir)?;
        Ok(SplitWriter {
            dir: dir.to_path_buf(),
            modes: modes.to_vec(),
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, samples: &[Sample]) -> Result<()> {
        for s in samples {
            let filename = format!("sample_{:06}.tif", self.rows.len());
            write_tiff(&s.image, self.dir.join(&filename), TiffDtype::Float32)?;
            self.rows.push(ManifestRow {
                filename,
                truth: s.truth.clone(),
                provenance: s.provenance.clone(),
            });
        }
        Ok(())
    }

    pub fn finish(self) -> Result<usize> {
        write_manifest(self.dir.join(MANIFEST), &self.modes, &self.rows)?;
        Ok(self.rows.len())
    }
}

/// Reads a split, failing with the full list of missing volumes.
pub fn read_split(dir: &Path, fallback: VoxelSize) -> Result<Vec<(ManifestRow, Volume)>> {
    let manifest = dir.join(MANIFEST);
    if !manifest.is_file() {
        return Err(Error::MissingFiles(vec![manifest]));
    }
    let rows = read_manifest(&manifest)?;
    let missing: Vec<PathBuf> = rows
        .iter()
        .map(|r| dir.join(&r.filename))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    rows.into_iter()
        .map(|r| {
            let v = read_tiff(dir.join(&r.filename), fallback)?;
            Ok((r, v))
        })
        .collect()
}
