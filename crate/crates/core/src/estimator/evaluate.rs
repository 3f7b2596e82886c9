use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::AberrationEstimator;
use crate::error::{Error, Result};
use crate::volume::Volume;
use crate::zernike::{AmplitudeVector, ModeIndex};

/// One test volume with its ground truth and the mode its series varies.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub name: String,
    pub series_mode: ModeIndex,
    pub image: Volume,
    pub truth: AmplitudeVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub series_mode: ModeIndex,
    /// Aligned with `EvalReport::modes`.
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

impl BoxStats {
    /// Five-number summary with linearly interpolated quartiles.
    pub fn from_values(values: &[f64]) -> Option<BoxStats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(BoxStats {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub scheme: crate::zernike::Scheme,
    pub j: u32,
    pub n: u32,
    pub m: i32,
    pub name: String,
    /// Predictions for this mode on series where another mode was active.
    pub off_target: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_mse: f64,
    pub n_samples: usize,
    pub modes: Vec<ModeSummary>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub modes: Vec<ModeIndex>,
    pub rows: Vec<EvalRow>,
    pub mean_mse: f64,
}

impl EvalReport {
    pub fn off_target(&self, k: usize) -> Option<BoxStats> {
        let mode = &self.modes[k];
        let values: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| !r.series_mode.same_mode(mode))
            .map(|r| r.pred[k])
            .collect();
        BoxStats::from_values(&values)
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            mean_mse: self.mean_mse,
            n_samples: self.rows.len(),
            modes: self
                .modes
                .iter()
                .enumerate()
                .map(|(k, m)| ModeSummary {
                    scheme: m.scheme(),
                    j: m.j(),
                    n: m.n(),
                    m: m.m(),
                    name: m.name().to_string(),
                    off_target: self.off_target(k),
                })
                .collect(),
        }
    }

    /// Per-sample CSV: name, series mode, then true/predicted amplitude per mode.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        let scheme = self.modes.first().map(|m| m.scheme());
        let tag = |m: &ModeIndex| format!("{}_{}", scheme_name(m.scheme()), m.j());
        let mut header = vec!["name".to_string(), "series_mode".to_string()];
        for m in &self.modes {
            header.push(format!("true_{}", tag(m)));
        }
        for m in &self.modes {
            header.push(format!("pred_{}", tag(m)));
        }
        header.push("mse".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let series = scheme.map_or(r.series_mode, |s| r.series_mode.with_scheme(s));
            let mut rec = vec![r.name.clone(), tag(&series)];
            rec.extend(r.truth.iter().map(|v| v.to_string()));
            rec.extend(r.pred.iter().map(|v| v.to_string()));
            rec.push(r.mse.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn scheme_name(s: crate::zernike::Scheme) -> &'static str {
    match s {
        crate::zernike::Scheme::Ansi => "ansi",
        crate::zernike::Scheme::Noll => "noll",
    }
}

/// Predicts every case and collects per-sample errors.
///
/// Truth amplitudes are aligned to the model's modes; modes absent from a
/// truth vector count as zero.
pub fn evaluate(model: &dyn AberrationEstimator, cases: &[EvalCase]) -> Result<EvalReport> {
    let modes = model.modes().to_vec();
    let voxel = model.microscope().voxel_um;
    let rows = cases
        .par_iter()
        .map(|c| {
            if !c.image.voxel.approx_eq(&voxel, 1e-6) {
                return Err(Error::validation(format!(
                    "{}: voxel size {:?} differs from the model's {:?}",
                    c.name, c.image.voxel.0, voxel.0
                )));
            }
            let pred = model.predict(&c.image)?;
            let truth: Vec<f64> = modes
                .iter()
                .map(|m| c.truth.get(m).unwrap_or(0.0))
                .collect();
            let pred: Vec<f64> = pred.amps().to_vec();
            let mse = truth
                .iter()
                .zip(&pred)
                .map(|(t, p)| (t - p) * (t - p))
                .sum::<f64>()
                / modes.len() as f64;
            Ok(EvalRow {
                name: c.name.clone(),
                series_mode: c.series_mode,
                truth,
                pred,
                mse,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_mse = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.mse).sum::<f64>() / rows.len() as f64
    };
    Ok(EvalReport {
        modes,
        rows,
        mean_mse,
    })
}
