//! Adam training with early stopping and resumable checkpoints.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml     resolved configuration
//! loss_log.csv    epoch,steps,lr,train_loss,val_loss
//! steps.csv       step,epoch,loss
//! model.bin       best parameters (prefix `model.`)
//! checkpoint/     params.bin + state.toml, enough to resume bit-exactly
//! ```
//!
//! The sample order of epoch `e` is a shuffle driven by a generator seeded
//! from `(train.seed, e)`, so resuming only needs the epoch and the position
//! inside it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::read_dataset;
use crate::error::{Error, Result};
use crate::head::{head_loss, LossWeights};
use crate::model::{prepare_sample, Detector, Sample};
use crate::params::ParamStore;
use crate::sim::splitmix64;
use crate::tensor::{read_tensors, write_tensors, DType, NamedTensor, Precision, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let w = store.get_mut(id).data_mut();
            for (j, g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                w[j] -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Total loss and parameter gradients for one sample.
pub fn sample_gradients(
    detector: &Detector,
    sample: &Sample,
    weights: &LossWeights,
    precision: Precision,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new().with_precision(precision);
    let p = detector.store.bind(&mut tape);
    let vars = detector.forward(&mut tape, &p, &sample.inputs)?;
    let loss = head_loss(&mut tape, &vars, &sample.targets, weights)?;
    let value = tape.value(loss.total).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.backward(loss.total)?;
    Ok((value, p.collect_grads(&detector.store, &grads)))
}

/// Mean loss over `samples` without gradients.
pub fn mean_loss(detector: &Detector, samples: &[Sample], weights: &LossWeights, precision: Precision) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new().with_precision(precision);
        let p = detector.store.bind_frozen(&mut tape);
        let vars = detector.forward(&mut tape, &p, &s.inputs)?;
        let loss = head_loss(&mut tape, &vars, &s.targets, weights)?;
        total += tape.value(loss.total).data()[0];
    }
    Ok(total / samples.len() as f64)
}

pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(epoch as u64 + 1)));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Loss on the held-out split, NaN when there is none.
    pub val_loss: f64,
}

/// Resumable training state, stored as `checkpoint/state.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    step_in_epoch: usize,
    global_step: usize,
    /// Running loss sum of the current epoch, as IEEE-754 bits in hex.
    epoch_loss_bits: String,
    best_bits: String,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    finished: bool,
    adam_t: u64,
    history: Vec<EpochRecord>,
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn from_bits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| Error::Checkpoint {
            name: "state.toml".into(),
            message: format!("bad float encoding `{s}`: {e}"),
        })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Detector holding the best parameters seen.
    pub detector: Detector,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimiser step taken in this call.
    pub step_losses: Vec<f64>,
    pub global_step: usize,
    pub finished: bool,
    pub stopped_early: bool,
}

/// Training and validation samples of a dataset. With `validation` absent,
/// the last `validation_fraction` of the sequences is held out.
pub fn load_split(config: &RunConfig, data: &Path, validation: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let seqs = read_dataset(data)?;
    let mut samples = seqs
        .iter()
        .map(|s| prepare_sample(s, &config.model))
        .collect::<Result<Vec<_>>>()?;
    let val = match validation {
        Some(v) => load_samples(config, v)?,
        None => {
            let n_val = (samples.len() as f64 * config.train.validation_fraction).floor() as usize;
            let n_val = n_val.min(samples.len().saturating_sub(1));
            samples.split_off(samples.len() - n_val)
        }
    };
    Ok((samples, val))
}

pub fn load_samples(config: &RunConfig, data: &Path) -> Result<Vec<Sample>> {
    read_dataset(data)?
        .iter()
        .map(|s| prepare_sample(s, &config.model))
        .collect()
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

fn named_moments(store: &ParamStore, prefix: &str, data: &[Vec<f64>]) -> Vec<NamedTensor> {
    store
        .ids()
        .zip(data)
        .map(|(id, d)| NamedTensor {
            name: format!("{prefix}{}", store.name(id)),
            dtype: DType::F64,
            tensor: Tensor::new(store.get(id).shape(), d.clone()).expect("moment matches parameter"),
        })
        .collect()
}

fn load_moments(store: &ParamStore, prefix: &str, named: &[NamedTensor]) -> Result<Vec<Vec<f64>>> {
    let mut tmp = store.clone();
    tmp.load_named(prefix, named)?;
    Ok(tmp.ids().map(|id| tmp.get(id).data().to_vec()).collect())
}

fn save_checkpoint(out: &Path, store: &ParamStore, best: &ParamStore, adam: &Adam, state: &TrainState) -> Result<()> {
    let dir = checkpoint_dir(out);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut named = store.to_named("param.", DType::F64);
    named.extend(named_moments(store, "adam_m.", &adam.m));
    named.extend(named_moments(store, "adam_v.", &adam.v));
    named.extend(best.to_named("best.", DType::F64));
    write_tensors(&dir.join("params.bin"), &named)?;
    let path = dir.join("state.toml");
    let text = toml::to_string(state).expect("train state serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_model(out: &Path, best: &ParamStore) -> Result<()> {
    write_tensors(&out.join("model.bin"), &best.to_named("model.", DType::F64))
}

/// Loads `model.bin` (or a directory containing one) into a fresh detector.
/// A tensor whose name or shape disagrees with `config` is reported by name.
pub fn load_model(config: &RunConfig, path: &Path) -> Result<Detector> {
    let file = if path.is_dir() { path.join("model.bin") } else { path.to_path_buf() };
    let named = read_tensors(&file)?;
    let mut detector = Detector::new(&config.model, 0)?;
    detector.store.load_named("model.", &named)?;
    let expected = detector.store.len();
    if named.len() != expected {
        let extra = named
            .iter()
            .find(|n| n.name.strip_prefix("model.").and_then(|k| detector.store.id(k)).is_none())
            .map(|n| n.name.clone())
            .unwrap_or_default();
        return Err(Error::Checkpoint {
            name: extra,
            message: format!("checkpoint has {} tensors but model expects {expected}", named.len()),
        });
    }
    Ok(detector)
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Drops everything after the first `keep` data rows of a CSV log.
fn truncate_log(path: &Path, header: &str, keep: usize) -> Result<()> {
    let text = if path.exists() {
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    } else {
        String::new()
    };
    let mut out = format!("{header}\n");
    for line in text.lines().skip(1).take(keep) {
        out.push_str(line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const STEPS_HEADER: &str = "step,epoch,loss";
const EPOCHS_HEADER: &str = "epoch,steps,lr,train_loss,val_loss";

/// Trains from scratch into `out`, or continues the checkpoint found there
/// when `resume` is set. `train.max_steps` bounds the total step count across
/// resumptions.
pub fn train(config: &RunConfig, train: &[Sample], val: &[Sample], out: &Path, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let tc = &config.train;
    let weights = tc.loss_weights();
    let mut detector = Detector::new(&config.model, tc.seed)?;
    let mut adam = Adam::new(&detector.store);
    let mut best = detector.store.clone();
    let steps_log = out.join("steps.csv");
    let epochs_log = out.join("loss_log.csv");

    let mut state = if resume {
        let dir = checkpoint_dir(out);
        let path = dir.join("state.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = toml::from_str(&text).map_err(|e| Error::Checkpoint {
            name: "state.toml".into(),
            message: e.to_string(),
        })?;
        let named = read_tensors(&dir.join("params.bin"))?;
        detector.store.load_named("param.", &named)?;
        best.load_named("best.", &named)?;
        adam.m = load_moments(&detector.store, "adam_m.", &named)?;
        adam.v = load_moments(&detector.store, "adam_v.", &named)?;
        adam.t = state.adam_t;
        truncate_log(&steps_log, STEPS_HEADER, state.global_step)?;
        truncate_log(&epochs_log, EPOCHS_HEADER, state.history.len())?;
        state
    } else {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        truncate_log(&steps_log, STEPS_HEADER, 0)?;
        truncate_log(&epochs_log, EPOCHS_HEADER, 0)?;
        TrainState {
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            epoch_loss_bits: bits(0.0),
            best_bits: bits(f64::INFINITY),
            best_epoch: None,
            bad_epochs: 0,
            finished: false,
            adam_t: 0,
            history: Vec::new(),
        }
    };
    config.echo(out)?;

    let bs = tc.batch_size;
    let steps_per_epoch = train.len().div_ceil(bs);
    let mut step_losses = Vec::new();
    let mut stopped_early = false;
    let mut epoch_loss = from_bits(&state.epoch_loss_bits)?;

    'epochs: while !state.finished && state.epoch < tc.epochs {
        let lr = tc.lr_for_epoch(state.epoch);
        let order = epoch_order(tc.seed, state.epoch, train.len());
        while state.step_in_epoch < steps_per_epoch {
            if tc.max_steps > 0 && state.global_step >= tc.max_steps {
                break 'epochs;
            }
            let batch = &order[state.step_in_epoch * bs..((state.step_in_epoch + 1) * bs).min(order.len())];
            let mut acc: Option<Vec<Vec<f64>>> = None;
            let mut loss = 0.0;
            for &i in batch {
                let (l, g) = sample_gradients(&detector, &train[i], &weights, tc.precision)?;
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        epoch: state.epoch,
                        step: state.global_step,
                        loss: l,
                    });
                }
                loss += l;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().flatten().zip(g.iter().flatten()).for_each(|(x, y)| *x += y),
                }
            }
            let mut grads = acc.expect("batch is non-empty");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            loss *= scale;
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: state.epoch,
                    step: state.global_step,
                    loss: f64::NAN,
                });
            }
            clip_grad_norm(&mut grads, tc.grad_clip);
            adam.step(&mut detector.store, &grads, lr);
            if tc.precision == Precision::F32 {
                let ids: Vec<_> = detector.store.ids().collect();
                for id in ids {
                    detector.store.get_mut(id).data_mut().iter_mut().for_each(|w| *w = *w as f32 as f64);
                }
            }
            epoch_loss += loss;
            step_losses.push(loss);
            state.step_in_epoch += 1;
            state.global_step += 1;
            append(&steps_log, &format!("{},{},{:?}", state.global_step, state.epoch, loss))?;
        }

        let train_loss = epoch_loss / steps_per_epoch as f64;
        let val_loss = mean_loss(&detector, val, &weights, tc.precision)?;
        let monitor = if val.is_empty() { train_loss } else { val_loss };
        if !monitor.is_finite() {
            return Err(Error::Diverged {
                epoch: state.epoch,
                step: state.global_step,
                loss: monitor,
            });
        }
        let record = EpochRecord {
            epoch: state.epoch,
            steps: steps_per_epoch,
            lr,
            train_loss,
            val_loss,
        };
        append(
            &epochs_log,
            &format!("{},{},{:?},{:?},{:?}", record.epoch, record.steps, lr, train_loss, val_loss),
        )?;
        state.history.push(record);
        if monitor < from_bits(&state.best_bits)? {
            state.best_bits = bits(monitor);
            state.best_epoch = Some(state.epoch);
            state.bad_epochs = 0;
            best = detector.store.clone();
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs >= tc.patience {
                state.finished = true;
                stopped_early = true;
            }
        }
        state.epoch += 1;
        state.step_in_epoch = 0;
        epoch_loss = 0.0;
    }
    if state.epoch >= tc.epochs {
        state.finished = true;
    }
    state.epoch_loss_bits = bits(epoch_loss);
    state.adam_t = adam.t;
    save_checkpoint(out, &detector.store, &best, &adam, &state)?;
    // Before the first epoch completes the current parameters are all we have.
    let final_store = if state.best_epoch.is_some() { best } else { detector.store.clone() };
    write_model(out, &final_store)?;
    detector.store = final_store;
    Ok(TrainOutcome {
        detector,
        history: state.history,
        step_losses,
        global_step: state.global_step,
        finished: state.finished,
        stopped_early,
    })
}
