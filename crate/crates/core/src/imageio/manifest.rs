//! Dataset manifests: one CSV row per generated volume.
//!
//! Columns: `filename`, one `ansi_<j>` amplitude column per mode in ANSI
//! order, `phantom_index` (-1 for point sources), `offset_z`, `offset_y`,
//! `offset_x`, `noise_mean`, `noise_std`, `snr` (empty without noise),
//! `scale`, `seed`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::{NoiseDraw, Provenance};
use crate::zernike::{AmplitudeVector, ModeIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub truth: AmplitudeVector,
    pub provenance: Provenance,
}

const TAIL: [&str; 9] = [
    "phantom_index",
    "offset_z",
    "offset_y",
    "offset_x",
    "noise_mean",
    "noise_std",
    "snr",
    "scale",
    "seed",
];

fn ansi_order(modes: &[ModeIndex]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by_key(|&k| modes[k].ansi_index());
    order
}

/// Writes `rows` (all sharing the mode list `modes`).
pub fn write_manifest(
    path: impl AsRef<Path>,
    modes: &[ModeIndex],
    rows: &[ManifestRow],
) -> Result<()> {
    let path = path.as_ref();
    let order = ansi_order(modes);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let mut header = vec!["filename".to_string()];
    header.extend(
        order
            .iter()
            .map(|&k| format!("ansi_{}", modes[k].ansi_index())),
    );
    header.extend(TAIL.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let p = &r.provenance;
        let mut rec = vec![r.filename.clone()];
        for &k in &order {
            rec.push(r.truth.get(&modes[k]).unwrap_or(0.0).to_string());
        }
        rec.push(p.phantom_index.map_or("-1".into(), |i| i.to_string()));
        rec.extend(p.offset.iter().map(|o| o.to_string()));
        match &p.noise {
            Some(n) => rec.extend([n.mean, n.std, n.snr].iter().map(|v| v.to_string())),
            None => rec.extend(["", "", ""].iter().map(|s| s.to_string())),
        }
        rec.push(p.scale.to_string());
        rec.push(p.seed.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
    line: u64,
) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::validation(format!("manifest line {line}: bad `{name}`")))
}

/// Reads a manifest; truth vectors use the ANSI column order and scheme.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("filename") {
        return Err(Error::validation(format!(
            "{}: first column must be `filename`",
            path.display()
        )));
    }
    let mut modes = Vec::new();
    let mut i = 1;
    while let Some(j) = header.get(i).and_then(|h| h.strip_prefix("ansi_")) {
        let j: u32 = j
            .parse()
            .map_err(|_| Error::validation(format!("bad mode column `ansi_{j}`")))?;
        modes.push(ModeIndex::ansi(j)?);
        i += 1;
    }
    let first_tail = i;
    for (k, name) in TAIL.iter().enumerate() {
        if header.get(first_tail + k) != Some(*name) {
            return Err(Error::validation(format!(
                "{}: expected column `{name}`",
                path.display()
            )));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let amps = (1..first_tail)
            .map(|c| field::<f64>(&rec, c, &header[c], line))
            .collect::<Result<Vec<_>>>()?;
        let t = first_tail;
        let phantom: i64 = field(&rec, t, "phantom_index", line)?;
        let offset = [
            field(&rec, t + 1, "offset_z", line)?,
            field(&rec, t + 2, "offset_y", line)?,
            field(&rec, t + 3, "offset_x", line)?,
        ];
        let noise = if rec.get(t + 4).is_none_or(|s| s.trim().is_empty()) {
            None
        } else {
            Some(NoiseDraw {
                mean: field(&rec, t + 4, "noise_mean", line)?,
                std: field(&rec, t + 5, "noise_std", line)?,
                snr: field(&rec, t + 6, "snr", line)?,
            })
        };
        rows.push(ManifestRow {
            filename: rec[0].to_string(),
            truth: AmplitudeVector::new(modes.clone(), amps)?,
            provenance: Provenance {
                seed: field(&rec, t + 8, "seed", line)?,
                phantom_index: usize::try_from(phantom).ok(),
                offset,
                noise,
                scale: field(&rec, t + 7, "scale", line)?,
            },
        });
    }
    Ok(rows)
}
