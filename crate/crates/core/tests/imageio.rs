use std::path::PathBuf;

use aberration::imageio::{
    load_config, parse_config, read_tiff, read_tiff_raw, write_tiff, TiffDtype,
};
use aberration::{Error, Volume, VoxelSize};
use ndarray::Array3;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn pattern(z: usize, y: usize, x: usize) -> f64 {
    (100 * z + 10 * y + x) as f64
}

#[test]
fn pillow_u16_stack_is_read_in_zyx_order() {
    let v = read_tiff(fixture("pattern_u16.tif"), VoxelSize::default()).unwrap();
    assert_eq!(v.shape(), [3, 4, 4]);
    for ((z, y, x), &got) in v.data.indexed_iter() {
        assert_eq!(got, pattern(z, y, x) / 65535.0, "at {z},{y},{x}");
    }
}

#[test]
fn pillow_u8_and_f32_stacks() {
    let v = read_tiff(fixture("pattern_u8.tif"), VoxelSize::default()).unwrap();
    assert_eq!(v.data[[2, 3, 1]], pattern(2, 3, 1) / 255.0);
    let v = read_tiff(fixture("pattern_f32.tif"), VoxelSize::default()).unwrap();
    for ((z, y, x), &got) in v.data.indexed_iter() {
        assert_eq!(got, pattern(z, y, x));
    }
}

#[test]
fn u16_full_scale_normalizes_to_one() {
    let v = read_tiff(fixture("max_u16.tif"), VoxelSize::default()).unwrap();
    assert_eq!(v.max(), 1.0);
}

#[test]
fn rgb_is_rejected_naming_the_tag() {
    match read_tiff(fixture("rgb.tif"), VoxelSize::default()) {
        Err(Error::UnsupportedFormat { tag, .. }) => assert_eq!(tag, "SamplesPerPixel"),
        other => panic!("expected unsupported format, got {other:?}"),
    }
}

#[test]
fn missing_voxel_metadata_uses_fallback() {
    let fallback = VoxelSize::new(0.5, 0.25, 0.125).unwrap();
    let v = read_tiff(fixture("pattern_f32.tif"), fallback).unwrap();
    assert_eq!(v.voxel, fallback);
}

fn sample_volume() -> Volume {
    let data = Array3::from_shape_fn((3, 5, 7), |(z, y, x)| {
        ((z * 31 + y * 7 + x) as f64 * 0.37).sin().abs() + 1e-3 * x as f64
    });
    Volume::new(data, VoxelSize::new(0.2, 0.068519, 0.068519).unwrap()).unwrap()
}

#[test]
fn float32_round_trip_is_bitwise_with_voxel_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.tif");
    let v = sample_volume().data.mapv(|x| x as f32 as f64);
    let v = Volume::new(v, sample_volume().voxel).unwrap();
    write_tiff(&v, &path, TiffDtype::Float32).unwrap();
    let back = read_tiff(&path, VoxelSize::default()).unwrap();
    assert_eq!(back.data, v.data);
    assert!(back.voxel.approx_eq(&v.voxel, 1e-9), "{:?}", back.voxel);

    // and again through read -> write -> read
    let path2 = dir.path().join("w.tif");
    write_tiff(&back, &path2, TiffDtype::Float32).unwrap();
    assert_eq!(read_tiff_raw(&path2).unwrap().0, v.data);
}

#[test]
fn uint16_round_trip_within_quantization_bound() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.tif");
    let mut v = sample_volume();
    v.data.mapv_inplace(|x| x.clamp(0.0, 1.0));
    v.data[[0, 0, 0]] = 0.0;
    v.data[[0, 0, 1]] = 1.0;
    write_tiff(&v, &path, TiffDtype::Uint16).unwrap();
    let back = read_tiff(&path, VoxelSize::default()).unwrap();
    let err = (&back.data - &v.data)
        .mapv(f64::abs)
        .fold(0.0f64, |a, &b| a.max(b));
    assert!(err <= 1.0 / (2.0 * 65535.0) + 1e-15, "{err}");
}

#[test]
fn constant_volume_round_trips_in_both_dtypes() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new(Array3::from_elem((2, 3, 3), 0.7), VoxelSize::default()).unwrap();
    for dtype in [TiffDtype::Float32, TiffDtype::Uint16] {
        let path = dir.path().join("c.tif");
        write_tiff(&v, &path, dtype).unwrap();
        let back = read_tiff(&path, VoxelSize::default()).unwrap();
        let first = back.data[[0, 0, 0]];
        assert!(back.data.iter().all(|&x| x == first));
        assert!((first - 0.7).abs() < 1e-6);
    }
}

#[test]
fn unwritable_path_is_io_error() {
    let v = sample_volume();
    let err = write_tiff(&v, "/nonexistent-dir/x.tif", TiffDtype::Float32).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

#[test]
fn oil_microscope_config_is_accepted() {
    let text =
        r#"{"microscope": {"na": 1.4, "lambda_um": 0.488, "voxel_um": [0.2, 0.068519, 0.068519]}}"#;
    let c = parse_config(text, &[]).unwrap();
    assert_eq!(c.microscope.voxel_um.0, [0.2, 0.068519, 0.068519]);
}

#[test]
fn scalar_noise_fields_promote_to_ranges() {
    let text = r#"{
        "microscope": {"na": 1.4, "lambda_um": 0.488, "voxel_um": [0.2, 0.068519, 0.068519]},
        "generator": {"scheme": "ansi", "modes": [3], "amp_range": [-0.075, 0.075],
                      "crop_size": [16, 16, 16], "noise": {"mean": 100, "std": [2, 4], "snr": 8}}
    }"#;
    let c = parse_config(text, &[("model.n_blocks".into(), "3".into())]).unwrap();
    let noise = c.generator.unwrap().noise.unwrap();
    assert_eq!((noise.snr_range.lo(), noise.snr_range.hi()), (8.0, 8.0));
    assert_eq!((noise.std_range.lo(), noise.std_range.hi()), (2.0, 4.0));
}

#[test]
fn na_above_immersion_index_is_rejected() {
    let text = r#"{"microscope": {"na": 1.6, "n_immersion": 1.518, "lambda_um": 0.488, "voxel_um": [0.2, 0.068519, 0.068519]}}"#;
    let err = parse_config(text, &[]).unwrap_err();
    assert_eq!(err.kind(), aberration::ErrorKind::Validation);
}

#[test]
fn unknown_nested_key_reports_json_path() {
    let text = r#"{
        "microscope": {"na": 1.4, "lambda_um": 0.488, "voxel_um": [0.2, 0.068519, 0.068519]},
        "deconv": {"iterations": 5, "itertions": 6}
    }"#;
    match parse_config(text, &[]) {
        Err(Error::Config { path, message }) => {
            assert!(path.contains("deconv"), "{path}");
            assert!(message.contains("itertions"), "{message}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn shipped_presets_load() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.json", "full.json"] {
        let c = load_config(root.join(name), &[]).unwrap();
        assert!(c.generator.is_some() && c.train.is_some(), "{name}");
    }
}
