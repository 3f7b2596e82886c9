use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::generator::{Generator, Sample, NAMESPACE_VALIDATION};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps_per_epoch: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    #[serde(default = "one")]
    pub validate_every: usize,
    /// Size of the fixed validation set drawn from a generator.
    #[serde(default = "default_val_size")]
    pub validation_size: usize,
}

fn default_lr() -> f64 {
    3e-4
}
fn default_batch() -> usize {
    2
}
fn default_steps() -> usize {
    5
}
fn one() -> usize {
    1
}
fn default_val_size() -> usize {
    16
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            steps_per_epoch: default_steps(),
            epochs,
            seed,
            validate_every: 1,
            validation_size: default_val_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.validate_every == 0 {
            return Err(Error::validation(
                "batch_size, steps_per_epoch and validate_every must be positive",
            ));
        }
        if self.validation_size == 0 {
            return Err(Error::validation("validation_size must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Where validation samples come from.
pub enum Validation<'a> {
    /// The first `validation_size` samples of the generator's validation namespace.
    Generator(&'a Generator),
    Samples(Vec<Sample>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("epoch,train_mse,val_mse,wall_ms\n");
        for r in &self.rows {
            let val = r.val_mse.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_mse, val, r.wall_ms
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn last_val_mse(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_mse)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation MSE seen.
    pub best: ModelCheckpoint,
    pub best_val_mse: Option<f64>,
    /// Weights after the last step.
    pub last: ModelCheckpoint,
    pub log: TrainLog,
}

fn split(samples: &[Sample]) -> (Vec<Volume>, Vec<Vec<f64>>) {
    samples
        .iter()
        .map(|s| (s.image.clone(), s.truth.amps().to_vec()))
        .unzip()
}

/// Mean squared error of `model` over `samples`, in chunks to bound memory.
pub fn mean_squared_error(model: &ModelCheckpoint, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(8) {
        let (x, t) = split(chunk);
        total += model.network.loss(&x, &t)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn check_modes(model: &ModelCheckpoint, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let ok = s.truth.len() == model.modes.len()
            && s.truth
                .modes()
                .iter()
                .zip(&model.modes)
                .all(|(a, b)| a.same_mode(b));
        if !ok {
            return Err(Error::validation("sample modes differ from model outputs"));
        }
    }
    Ok(())
}

/// Trains `model` on batches from `batches` with Adam.
///
/// `batches` is typically `generator.stream(NAMESPACE_TRAIN, batch_size)`;
/// any source of sample batches works.
pub fn train<I>(
    mut model: ModelCheckpoint,
    batches: I,
    config: &TrainConfig,
    validation: Validation<'_>,
) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = Result<Vec<Sample>>>,
{
    config.validate()?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            best: model.clone(),
            best_val_mse: None,
            last: model,
            log: TrainLog::default(),
        });
    }
    let val_set = match validation {
        Validation::Generator(g) => g.samples(
            NAMESPACE_VALIDATION,
            0..config.validation_size as u64,
            crate::generator::AmplitudeDraw::AllModes,
        )?,
        Validation::Samples(s) => s,
    };
    if val_set.is_empty() {
        return Err(Error::validation("empty validation set"));
    }
    check_modes(&model, &val_set)?;

    let mut adam = match model.optimizer.take() {
        Some(mut a) if a.m.len() == model.network.param_count() => {
            a.learning_rate = config.learning_rate;
            a
        }
        _ => Adam::new(config.learning_rate, model.network.param_count()),
    };
    let mut batches = batches.into_iter();
    let mut best: Option<(f64, ModelCheckpoint)> = None;
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch = batches
                .next()
                .ok_or_else(|| Error::validation("training batch source exhausted"))??;
            check_modes(&model, &batch)?;
            let (x, t) = split(&batch);
            let (loss, grads) = match model.network.loss_and_gradients(&x, &t, false) {
                Ok(r) => r,
                Err(Error::Divergence { loss, .. }) => {
                    return Err(Error::Divergence {
                        step: model.step,
                        loss,
                        last_good: Some(Box::new(best.map(|b| b.1).unwrap_or(model))),
                    })
                }
                Err(e) => return Err(e),
            };
            adam.step(model.network.params_mut(), &grads.params);
            model.step += 1;
            epoch_loss += loss;
        }
        let train_mse = epoch_loss / config.steps_per_epoch as f64;
        let val_mse = if epoch % config.validate_every == 0 || epoch == config.epochs {
            let v = mean_squared_error(&model, &val_set)?;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: model.step,
                    loss: v,
                    last_good: best.map(|b| Box::new(b.1)),
                });
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                let mut snapshot = model.clone();
                snapshot.optimizer = Some(adam.clone());
                best = Some((v, snapshot));
            }
            Some(v)
        } else {
            None
        };
        log.rows.push(LogRow {
            epoch,
            train_mse,
            val_mse,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    model.optimizer = Some(adam);
    let (best_val, best_model) = best.expect("validated at least once");
    Ok(TrainOutcome {
        best: best_model,
        best_val_mse: Some(best_val),
        last: model,
        log,
    })
}
