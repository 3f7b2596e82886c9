use std::path::{Path, PathBuf};

use aberration::estimator::{
    evaluate, train, AberrationEstimator, EvalCase, ModelCheckpoint, TrainConfig, Validation,
};
use aberration::generator::{
    measure_noise, AmplitudeDraw, Generator, Sample, NAMESPACE_TRAIN, NAMESPACE_VALIDATION,
};
use aberration::imageio::{
    load_config, load_phantoms, read_tiff, read_tiff_raw, write_tiff, Config, TiffDtype,
};
use aberration::optics::PsfModel;
use aberration::restore::{restore_with_prediction, richardson_lucy, CropPolicy, DeconvConfig};
use aberration::zernike::{wavefront, ModeAmplitude};
use aberration::{AmplitudeVector, Error, ModeIndex, Scheme, Volume, VoxelSize};
use ndarray::Array3;

use crate::dataset::{read_split, SplitWriter};
use crate::{CliError, Command, ConfigArgs};

type Result<T> = std::result::Result<T, CliError>;

const CHUNK: usize = 32;

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load(args: &ConfigArgs) -> Result<Config> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        let text = std::fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
        for section in ["generator", "train"] {
            if doc.get(section).is_some() {
                overrides.push((format!("{section}.seed"), seed.to_string()));
            }
        }
    }
    Ok(load_config(&args.config, &overrides)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn generator(config: &Config) -> Result<Generator> {
    let g = config.generator()?;
    let phantoms = load_phantoms(g, &config.microscope)?;
    Ok(Generator::new(g.clone(), &config.microscope, phantoms)?)
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Ansi => "ansi",
        Scheme::Noll => "noll",
    }
}

fn series_dir_name(mode: &ModeIndex) -> String {
    format!("series_{}_{:02}", scheme_name(mode.scheme()), mode.j())
}

fn parse_series_dir(name: &str) -> Option<ModeIndex> {
    let rest = name.strip_prefix("series_")?;
    let (scheme, j) = rest.split_once('_')?;
    let scheme = match scheme {
        "ansi" => Scheme::Ansi,
        "noll" => Scheme::Noll,
        _ => return None,
    };
    ModeIndex::from_single_index(scheme, j.parse().ok()?).ok()
}

fn read_amplitudes(path: &Path) -> Result<AmplitudeVector> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let records: Vec<ModeAmplitude> = serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    })?;
    Ok(AmplitudeVector::from_records(&records)?)
}

fn read_volume(path: &Path, voxel: Option<[f64; 3]>, fallback: VoxelSize) -> Result<Volume> {
    let fallback = match voxel {
        Some([dz, dy, dx]) => VoxelSize::new(dz, dy, dx)?,
        None => fallback,
    };
    Ok(read_tiff(path, fallback)?)
}

pub fn run(command: Command, verbose: bool) -> Result<()> {
    let log = |msg: String| {
        if verbose {
            eprintln!("{msg}");
        }
    };
    match command {
        Command::Gen {
            config,
            n_train,
            n_val,
            n_test_per_mode,
            out,
        } => {
            let config = load(&config)?;
            let gen = generator(&config)?;
            create_dir(&out)?;
            std::fs::write(out.join("config.json"), config.to_json()?)
                .map_err(|e| io_err(&out, e))?;
            for (split, ns, n) in [
                ("train", NAMESPACE_TRAIN, n_train),
                ("val", NAMESPACE_VALIDATION, n_val),
            ] {
                let mut w = SplitWriter::new(&out.join(split), gen.modes())?;
                for start in (0..n).step_by(CHUNK) {
                    let end = (start + CHUNK).min(n);
                    w.push(&gen.samples(ns, start as u64..end as u64, AmplitudeDraw::AllModes)?)?;
                }
                let count = w.finish()?;
                log(format!("{split}: {count} volumes"));
            }
            let test = out.join("test");
            for mode in gen.modes() {
                let mut w = SplitWriter::new(&test.join(series_dir_name(mode)), gen.modes())?;
                w.push(&gen.test_series(mode, n_test_per_mode)?)?;
                let count = w.finish()?;
                log(format!("test {}: {count} volumes", series_dir_name(mode)));
            }
            Ok(())
        }
        Command::Train {
            config,
            val_dir,
            out,
        } => {
            let config = load(&config)?;
            let gen = generator(&config)?;
            let tc: TrainConfig = config.train()?.clone();
            let g = config.generator()?;
            let spec = config
                .model
                .architecture(gen.modes().len(), g.output_shape());
            let mut model = ModelCheckpoint::new(
                spec,
                gen.modes().to_vec(),
                config.microscope.clone(),
                tc.seed,
            )?;
            model.generator = Some(g.clone());
            let validation = match &val_dir {
                Some(dir) => Validation::Samples(
                    read_split(dir, config.microscope.voxel_um)?
                        .into_iter()
                        .map(|(row, image)| {
                            let truth = gen
                                .modes()
                                .iter()
                                .map(|m| row.truth.get(m).unwrap_or(0.0))
                                .collect();
                            Ok(Sample {
                                image,
                                truth: AmplitudeVector::new(gen.modes().to_vec(), truth)?,
                                provenance: row.provenance,
                            })
                        })
                        .collect::<aberration::Result<Vec<_>>>()?,
                ),
                None => Validation::Generator(&gen),
            };
            create_dir(&out)?;
            log(format!(
                "training {} parameters for {} steps",
                model.network.param_count(),
                tc.total_steps()
            ));
            let outcome = match train(
                model,
                gen.stream(NAMESPACE_TRAIN, tc.batch_size),
                &tc,
                validation,
            ) {
                Ok(o) => o,
                Err(Error::Divergence {
                    step,
                    loss,
                    last_good,
                }) => {
                    if let Some(good) = &last_good {
                        good.save(out.join("model.abrn"))?;
                    }
                    return Err(Error::Divergence {
                        step,
                        loss,
                        last_good,
                    }
                    .into());
                }
                Err(e) => return Err(e.into()),
            };
            outcome.best.save(out.join("model.abrn"))?;
            outcome.last.save(out.join("last.abrn"))?;
            outcome.log.write_csv(out.join("train_log.csv"))?;
            let summary = serde_json::json!({
                "best_val_mse": outcome.best_val_mse,
                "steps": outcome.last.step,
                "best_step": outcome.best.step,
            });
            println!("{summary}");
            Ok(())
        }
        Command::Predict {
            checkpoint,
            volume,
            out,
            psf,
            psf_shape,
            crop,
            voxel,
        } => {
            let model = ModelCheckpoint::load(&checkpoint)?;
            let observed = read_volume(&volume, voxel, model.microscope.voxel_um)?;
            if !observed.voxel.approx_eq(&model.microscope.voxel_um, 1e-6) {
                return Err(Error::Validation(format!(
                    "voxel size {:?} of {} differs from the checkpoint's {:?}",
                    observed.voxel.0,
                    volume.display(),
                    model.microscope.voxel_um.0
                ))
                .into());
            }
            let region = match crop {
                Some(o) => observed.crop(o, model.input_shape())?,
                None => observed.center_crop(model.input_shape())?,
            };
            let amps = model.predict(&region)?;
            write_json(&out, &amps.to_records())?;
            if let Some(psf_path) = psf {
                let shape = psf_shape.unwrap_or(model.input_shape());
                let psf = PsfModel::new(&model.microscope, shape)?.compute(&amps)?;
                write_tiff(&psf.volume, psf_path, TiffDtype::Float32)?;
            }
            Ok(())
        }
        Command::Restore {
            checkpoint,
            psf_file,
            volume,
            out,
            iterations,
            config,
            psf_shape,
            crop,
            voxel,
        } => {
            let mut deconv = match &config {
                Some(path) => load_config(path, &[])?.deconv,
                None => DeconvConfig::default(),
            };
            if let Some(n) = iterations {
                deconv.iterations = n;
            }
            let restored = match (checkpoint, psf_file) {
                (Some(ck), None) => {
                    let model = ModelCheckpoint::load(&ck)?;
                    let observed = read_volume(&volume, voxel, model.microscope.voxel_um)?;
                    let policy = crop.map_or(CropPolicy::Center, CropPolicy::Offset);
                    let shape = psf_shape.unwrap_or(model.input_shape());
                    let (restored, amps) =
                        restore_with_prediction(&observed, &model, policy, shape, &deconv)?;
                    println!(
                        "{}",
                        serde_json::to_string(&amps.to_records()).map_err(Error::from)?
                    );
                    restored
                }
                (None, Some(psf_path)) => {
                    let (kernel, _) = read_tiff_raw(&psf_path)?;
                    let observed = read_volume(&volume, voxel, VoxelSize::default())?;
                    richardson_lucy(&observed, &kernel, &deconv)?
                }
                _ => {
                    return Err(CliError::Usage(
                        "give exactly one of --checkpoint and --psf-file".into(),
                    ))
                }
            };
            write_tiff(&restored, &out, TiffDtype::Float32)?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            test_dir,
            out,
        } => {
            let model = ModelCheckpoint::load(&checkpoint)?;
            let cases = read_test_cases(&test_dir, &model)?;
            log(format!("evaluating {} volumes", cases.len()));
            let report = evaluate(&model, &cases)?;
            create_dir(&out)?;
            report.write_csv(out.join("eval.csv"))?;
            report.write_summary(out.join("summary.json"))?;
            println!(
                "{}",
                serde_json::to_string(&report.summary()).map_err(Error::from)?
            );
            Ok(())
        }
        Command::Psf {
            config,
            amplitudes,
            shape,
            out,
        } => {
            let config = load(&config)?;
            let amps = match &amplitudes {
                Some(p) => read_amplitudes(p)?,
                None => {
                    let modes = match &config.generator {
                        Some(g) => g.mode_indices()?,
                        None => vec![ModeIndex::ansi(3)?],
                    };
                    AmplitudeVector::zeros(modes)?
                }
            };
            let shape = shape
                .or(config.generator.as_ref().map(|g| g.crop_size))
                .unwrap_or([32, 64, 64]);
            let psf = PsfModel::new(&config.microscope, shape)?.compute(&amps)?;
            write_tiff(&psf.volume, &out, TiffDtype::Float32)?;
            Ok(())
        }
        Command::Wavefront {
            amplitudes,
            size,
            out,
        } => {
            let amps = read_amplitudes(&amplitudes)?;
            let map = wavefront(&amps, size)?;
            let d = 2.0 / size as f64;
            let data = map.values.insert_axis(ndarray::Axis(0));
            let volume = Volume::new(data, VoxelSize::new(1.0, d, d)?)?;
            write_tiff(&volume, &out, TiffDtype::Float32)?;
            Ok(())
        }
        Command::Measure {
            volume,
            foreground,
            background,
        } => {
            let v = read_tiff(&volume, VoxelSize::default())?;
            let mask = |p: &PathBuf| -> Result<Array3<bool>> {
                let (m, _) = read_tiff_raw(p)?;
                Ok(m.mapv(|x| x > 0.0))
            };
            let stats = measure_noise(&v, &mask(&foreground)?, &mask(&background)?)?;
            let json = serde_json::json!({
                "fg_mean": stats.fg_mean,
                "bg_mean": stats.bg_mean,
                "bg_std": stats.bg_std,
                "snr": stats.snr,
            });
            println!("{json}");
            Ok(())
        }
    }
}

/// Test series: every `series_<scheme>_<j>` subdirectory, or `dir` itself
/// when it holds a manifest (series mode = largest true amplitude).
fn read_test_cases(dir: &Path, model: &ModelCheckpoint) -> Result<Vec<EvalCase>> {
    let mut dirs: Vec<(PathBuf, Option<ModeIndex>)> = Vec::new();
    if dir.join(crate::dataset::MANIFEST).is_file() {
        dirs.push((dir.to_path_buf(), None));
    } else {
        let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(dir, e))?;
            if let Some(mode) = entry.file_name().to_str().and_then(parse_series_dir) {
                dirs.push((entry.path(), Some(mode)));
            }
        }
        dirs.sort_by(|a, b| a.0.cmp(&b.0));
        if dirs.is_empty() {
            return Err(Error::MissingFiles(vec![dir.join(crate::dataset::MANIFEST)]).into());
        }
    }
    let mut cases = Vec::new();
    for (path, mode) in dirs {
        for (row, image) in read_split(&path, model.microscope.voxel_um)? {
            let series_mode = match mode {
                Some(m) => m,
                None => row
                    .truth
                    .iter()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .map(|(m, _)| *m)
                    .ok_or_else(|| Error::Validation("manifest without modes".into()))?,
            };
            let name = path
                .file_name()
                .map(|d| format!("{}/{}", d.to_string_lossy(), row.filename))
                .unwrap_or(row.filename.clone());
            cases.push(EvalCase {
                name,
                series_mode,
                image,
                truth: row.truth,
            });
        }
    }
    Ok(cases)
}
