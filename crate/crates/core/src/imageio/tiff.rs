//! Multipage grayscale TIFF volumes.
//!
//! Pages are z planes. Written files carry an ImageJ-style description
//! (`images`, `slices`, `unit=micron`, `spacing` = dz) and X/Y resolution in
//! pixels per µm, so voxel sizes survive the round trip and ImageJ/Fiji open
//! them as stacks. 16-bit exports add `value_min` / `value_max`, which map
//! 0 and 65535 back to the original intensities on read.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array3;
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, Rational, TiffEncoder};
use tiff::tags::{ResolutionUnit, Tag};
use tiff::{TiffError, TiffUnsupportedError};

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelSize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TiffDtype {
    Float32,
    Uint16,
}

const RESOLUTION_DENOMINATOR: u32 = 1_000_000;

fn tiff_err(path: &Path, source: TiffError) -> Error {
    match source {
        TiffError::UnsupportedError(e) => Error::UnsupportedFormat {
            tag: unsupported_tag(&e).into(),
            detail: e.to_string(),
        },
        TiffError::IoError(e) => Error::io(path, e),
        source => Error::Tiff {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn unsupported_tag(e: &TiffUnsupportedError) -> &'static str {
    use TiffUnsupportedError::*;
    match e {
        FloatingPointPredictor(_) | HorizontalPredictor(_) => "Predictor",
        UnknownCompressionMethod | UnsupportedCompressionMethod(_) | UnsupportedJpegFeature(_) => {
            "Compression"
        }
        UnsupportedSampleFormat(_) | UnsupportedDataType => "SampleFormat",
        UnsupportedPlanarConfig(_) => "PlanarConfiguration",
        UnknownInterpretation | UnsupportedInterpretation(_) | InterpretationWithBits(..) => {
            "PhotometricInterpretation"
        }
        _ => "BitsPerSample",
    }
}

fn unsupported(tag: &str, detail: impl Into<String>) -> Error {
    Error::UnsupportedFormat {
        tag: tag.into(),
        detail: detail.into(),
    }
}

/// Key/value pairs of an ImageJ-style description.
fn description_value(desc: &str, key: &str) -> Option<f64> {
    desc.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().parse().ok()).flatten()
    })
}

fn check_page<R: std::io::Read + std::io::Seek>(
    dec: &mut Decoder<R>,
) -> std::result::Result<(), Error> {
    let get = |d: &mut Decoder<R>, tag: Tag| d.find_tag_unsigned::<u32>(tag).ok().flatten();
    if let Some(spp) = get(dec, Tag::SamplesPerPixel) {
        if spp != 1 {
            return Err(unsupported(
                "SamplesPerPixel",
                format!("{spp} samples per pixel; only grayscale is supported"),
            ));
        }
    }
    if dec.find_tag(Tag::TileWidth).ok().flatten().is_some() {
        return Err(unsupported("TileWidth", "tiled images are not supported"));
    }
    if let Some(c) = get(dec, Tag::Compression) {
        // none, LZW, deflate (both codes), PackBits
        if ![1, 5, 8, 32946, 32773].contains(&c) {
            return Err(unsupported(
                "Compression",
                format!("compression scheme {c}"),
            ));
        }
    }
    if let Some(p) = get(dec, Tag::PhotometricInterpretation) {
        if p > 1 {
            return Err(unsupported(
                "PhotometricInterpretation",
                format!("interpretation {p} is not grayscale"),
            ));
        }
    }
    Ok(())
}

/// Reads a grayscale stack as `(z, y, x)` data.
///
/// 8- and 16-bit data are divided by the type maximum (or mapped through
/// `value_min`/`value_max` when the description records them); 32-bit float
/// data are taken as is. The voxel size comes from the file when it records
/// one, else `fallback` is used.
pub fn read_tiff(path: impl AsRef<Path>, fallback: VoxelSize) -> Result<Volume> {
    let (data, voxel) = read_tiff_raw(path)?;
    Volume::new(data, voxel.unwrap_or(fallback))
}

/// Like [`read_tiff`], returning the voxel size only if the file has one.
pub fn read_tiff_raw(path: impl AsRef<Path>) -> Result<(Array3<f64>, Option<VoxelSize>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| tiff_err(path, e))?
        .with_limits(Limits::unlimited());
    let mut planes: Vec<Vec<f64>> = Vec::new();
    let mut dims = None;
    let mut desc = None;
    let mut res = None;
    loop {
        check_page(&mut dec)?;
        let (w, h) = dec.dimensions().map_err(|e| tiff_err(path, e))?;
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(unsupported("ImageWidth", "pages differ in size"));
        }
        if planes.is_empty() {
            desc = dec.get_tag_ascii_string(Tag::ImageDescription).ok();
            let x = dec.get_tag_u32_vec(Tag::XResolution).ok();
            let y = dec.get_tag_u32_vec(Tag::YResolution).ok();
            if let (Some(x), Some(y)) = (x, y) {
                if x.len() == 2 && y.len() == 2 && x[0] > 0 && y[0] > 0 && x[1] > 0 && y[1] > 0 {
                    res = Some((y[1] as f64 / y[0] as f64, x[1] as f64 / x[0] as f64));
                }
            }
        }
        let vmin = desc
            .as_deref()
            .and_then(|d| description_value(d, "value_min"));
        let vmax = desc
            .as_deref()
            .and_then(|d| description_value(d, "value_max"));
        let plane: Vec<f64> = match dec.read_image().map_err(|e| tiff_err(path, e))? {
            DecodingResult::U8(v) => v.into_iter().map(|p| p as f64 / 255.0).collect(),
            DecodingResult::U16(v) => match (vmin, vmax) {
                (Some(lo), Some(hi)) => v
                    .into_iter()
                    .map(|p| lo + (hi - lo) * p as f64 / 65535.0)
                    .collect(),
                _ => v.into_iter().map(|p| p as f64 / 65535.0).collect(),
            },
            DecodingResult::F32(v) => v.into_iter().map(|p| p as f64).collect(),
            other => {
                return Err(unsupported(
                    "BitsPerSample",
                    format!("sample type {} not supported", sample_name(&other)),
                ))
            }
        };
        planes.push(plane);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| tiff_err(path, e))?;
    }
    let (w, h) = dims.expect("at least one page");
    let data = Array3::from_shape_vec(
        (planes.len(), h as usize, w as usize),
        planes.into_iter().flatten().collect(),
    )
    .map_err(|e| Error::validation(e.to_string()))?;
    let unit_ok = desc
        .as_deref()
        .is_some_and(|d| d.lines().any(|l| l.trim() == "unit=micron"));
    let dz = desc
        .as_deref()
        .and_then(|d| description_value(d, "spacing"));
    let voxel = match (unit_ok, dz, res) {
        (true, Some(dz), Some((dy, dx))) => VoxelSize::new(dz, dy, dx).ok(),
        _ => None,
    };
    Ok((data, voxel))
}

fn sample_name(r: &DecodingResult) -> &'static str {
    match r {
        DecodingResult::U8(_) => "u8",
        DecodingResult::U16(_) => "u16",
        DecodingResult::U32(_) => "u32",
        DecodingResult::U64(_) => "u64",
        DecodingResult::F32(_) => "f32",
        DecodingResult::F64(_) => "f64",
        DecodingResult::I8(_) => "i8",
        DecodingResult::I16(_) => "i16",
        DecodingResult::I32(_) => "i32",
        DecodingResult::I64(_) => "i64",
    }
}

fn resolution(d: f64) -> Rational {
    Rational {
        n: RESOLUTION_DENOMINATOR,
        d: (d * RESOLUTION_DENOMINATOR as f64).round().max(1.0) as u32,
    }
}

/// Writes `volume` as a multipage stack of `dtype` samples.
pub fn write_tiff(volume: &Volume, path: impl AsRef<Path>, dtype: TiffDtype) -> Result<()> {
    let path = path.as_ref();
    let [nz, ny, nx] = volume.shape();
    let (lo, hi) = (volume.min(), volume.max());
    let mut desc = format!(
        "ImageJ=1.11a\nimages={nz}\nslices={nz}\nunit=micron\nspacing={}\n",
        volume.voxel.dz()
    );
    if dtype == TiffDtype::Uint16 {
        desc.push_str(&format!("value_min={lo:e}\nvalue_max={hi:e}\n"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| tiff_err(path, e))?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    for plane in volume.data.outer_iter() {
        macro_rules! page {
            ($ct:ty, $buf:expr) => {{
                let mut img = enc
                    .new_image::<$ct>(nx as u32, ny as u32)
                    .map_err(|e| tiff_err(path, e))?;
                img.encoder()
                    .write_tag(Tag::ImageDescription, desc.as_str())
                    .map_err(|e| tiff_err(path, e))?;
                img.resolution_unit(ResolutionUnit::None);
                img.x_resolution(resolution(volume.voxel.dx()));
                img.y_resolution(resolution(volume.voxel.dy()));
                img.write_data(&$buf).map_err(|e| tiff_err(path, e))?;
            }};
        }
        match dtype {
            TiffDtype::Float32 => {
                let buf: Vec<f32> = plane.iter().map(|&v| v as f32).collect();
                page!(colortype::Gray32Float, buf)
            }
            TiffDtype::Uint16 => {
                let buf: Vec<u16> = plane
                    .iter()
                    .map(|&v| ((v - lo) / span * 65535.0).round().clamp(0.0, 65535.0) as u16)
                    .collect();
                page!(colortype::Gray16, buf)
            }
        }
    }
    Ok(())
}
