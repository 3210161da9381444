//! Adam, minibatch training with early stopping, and the learning-rate
//! by seed grid.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Arch, BlockSizes};
use crate::data::{normalize, split_dataset, Dataset, NormMode, Split};
use crate::error::{Error, Result};
use crate::reshape::{RegimeChoice, ReshapeSpec};
use crate::stack::{build_stack, Model, ModelSpec, Sample, StackConfig, Supervision};

pub const LR_GRID: [f64; 3] = [1e-3, 1e-4, 1e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub sizes: BlockSizes,
    pub layers: usize,
    pub unique: usize,
    pub supervision: Supervision,
    pub concentration: usize,
    pub regime: RegimeChoice,
    pub normalize: NormMode,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
    /// Directory receiving a JSON-lines log and a best-validation
    /// checkpoint per run, named by learning rate and seed.
    #[serde(skip)]
    pub run_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Lru,
            sizes: BlockSizes::default(),
            layers: 6,
            unique: 1,
            supervision: Supervision::Final,
            concentration: 1,
            regime: RegimeChoice::Auto,
            normalize: NormMode::PerChannelZscore,
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            clip: Some(1.0),
            seed: 0,
            run_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn stack(&self) -> Result<StackConfig> {
        StackConfig::new(self.layers, self.unique, self.supervision)
    }

    pub fn validate(&self) -> Result<()> {
        self.stack()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch size and epoch budget must be positive".into(),
            ));
        }
        if self.concentration == 0 {
            return Err(Error::Config(
                "concentration factor must be positive".into(),
            ));
        }
        if self.sizes.state == 0 || self.sizes.hidden == 0 {
            return Err(Error::Config(
                "state and hidden sizes must be positive".into(),
            ));
        }
        if let Some(c) = self.clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        if !LR_GRID.contains(&self.lr) {
            log::debug!("learning rate {} is outside the standard grid", self.lr);
        }
        Ok(())
    }

    pub fn run_paths(&self) -> Option<(PathBuf, PathBuf)> {
        self.run_dir.as_ref().map(|d| {
            let pattern = self.stack().map(|s| s.pattern()).unwrap_or_default();
            let stem = format!(
                "{}_{pattern}_{}_lr{:e}_seed{}",
                self.arch, self.supervision, self.lr, self.seed
            );
            (
                d.join(format!("{stem}.jsonl")),
                d.join(format!("{stem}.ckpt")),
            )
        })
    }

    pub fn reshape_for(&self, ds: &Dataset) -> Result<ReshapeSpec> {
        ReshapeSpec::from_choice(
            self.concentration,
            self.regime,
            ds.dim_tag,
            (ds.steps, ds.width),
        )
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update. A non-finite gradient leaves parameters and state
    /// untouched and reports divergence.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient at coordinate {i}"
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arch: Arch,
    pub pattern: String,
    pub supervision: Supervision,
    pub lr: f64,
    pub seed: u64,
    /// Mean training loss at initialization, before any update.
    pub initial_train_loss: f64,
    pub best_val_acc: f64,
    /// Test accuracy of the best-validation parameters.
    pub test_acc_at_best_val: f64,
    /// 1-based; 0 if no epoch completed.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_seconds: f64,
    pub param_count: usize,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub curves: Vec<EpochRecord>,
}

pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot score an empty split".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let logits = model.predict_logits(&s.x, s.valid_len)?;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        correct += usize::from(pred == s.label);
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Train/val/test inputs for one run.
pub struct RunData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl RunData {
    pub fn from_dataset(ds: &Dataset, spec: &ReshapeSpec) -> Result<Self> {
        let data = Self {
            train: ds.samples(Split::Train, spec)?,
            val: ds.samples(Split::Val, spec)?,
            test: ds.samples(Split::Test, spec)?,
        };
        if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
            return Err(Error::Data(format!(
                "dataset `{}` has an empty split",
                ds.name
            )));
        }
        Ok(data)
    }
}

fn flag(result: &mut RunResult, msg: String) {
    log::warn!("run diverged: {msg}");
    result.diverged = true;
    result.divergence = Some(msg);
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Divergence(_))
}

/// Split by the run's seed, then normalize with training statistics.
pub fn prepare_dataset(ds: &Dataset, seed: u64, mode: NormMode) -> Result<Dataset> {
    let split = split_dataset(ds, seed)?;
    Ok(normalize(&split, mode)?.0)
}

/// Build a model from `cfg` and train it on an already split dataset.
pub fn train_one(cfg: &TrainConfig, ds: &Dataset) -> Result<RunResult> {
    cfg.validate()?;
    let spec = cfg.reshape_for(ds)?;
    let data = RunData::from_dataset(ds, &spec)?;
    let model = build_stack(
        cfg.stack()?,
        ModelSpec {
            arch: cfg.arch,
            sizes: cfg.sizes,
            input_width: spec.output_width(),
            classes: ds.classes(),
        },
        cfg.seed,
    )?;
    Ok(train_model(cfg, model, &data)?.0)
}

/// Train `model` in place of a freshly built one. Returns the run record
/// and the best-validation model.
pub fn train_model(
    cfg: &TrainConfig,
    mut model: Model,
    data: &RunData,
) -> Result<(RunResult, Model)> {
    cfg.validate()?;
    model.stack.supervision = cfg.supervision;
    let start = Instant::now();
    let paths = cfg.run_paths();
    if let Some(dir) = &cfg.run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match &paths {
        Some((p, _)) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut result = RunResult {
        arch: model.spec.arch,
        pattern: model.stack.pattern(),
        supervision: cfg.supervision,
        lr: cfg.lr,
        seed: cfg.seed,
        initial_train_loss: f64::NAN,
        best_val_acc: 0.0,
        test_acc_at_best_val: 0.0,
        best_epoch: 0,
        epochs_run: 0,
        wall_seconds: 0.0,
        param_count: model.count_params(),
        diverged: false,
        divergence: None,
        curves: Vec::new(),
    };

    match model.batch_loss(&data.train) {
        Ok(l) if l.is_finite() => result.initial_train_loss = l,
        Ok(l) => flag(&mut result, format!("initial loss is {l}")),
        Err(e) if is_divergence(&e) => flag(&mut result, e.to_string()),
        Err(e) => return Err(e),
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut adam = Adam::new(model.store.num_scalars());
    let mut params = model.store.flatten();
    let mut best_params = params.clone();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stale = 0usize;

    'epochs: for epoch in 1..=cfg.max_epochs {
        if result.diverged {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (loss, grads) = match model.batch_loss_and_grads(&batch) {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => {
                    flag(&mut result, format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                flag(&mut result, format!("epoch {epoch}: loss is {loss}"));
                break 'epochs;
            }
            let mut flat = grads.flatten(&model.store);
            if let Some(c) = cfg.clip {
                if flat.iter().all(|g| g.is_finite()) {
                    clip_global_norm(&mut flat, c);
                }
            }
            if let Err(e) = adam.step(&mut params, &flat, cfg.lr) {
                flag(&mut result, format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
            if params.iter().any(|p| !p.is_finite()) {
                flag(
                    &mut result,
                    format!("epoch {epoch}: parameters became non-finite"),
                );
                break 'epochs;
            }
            model.store.unflatten(&params)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val_acc = match accuracy(&model, &data.val) {
            Ok(a) => a,
            Err(e) if is_divergence(&e) => {
                flag(&mut result, format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        result.epochs_run = epoch;
        result.curves.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
        });
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, result.curves.last().expect("just pushed"))?;
            writeln!(w)?;
        }
        if result.best_epoch == 0 || val_acc > result.best_val_acc {
            result.best_val_acc = val_acc;
            result.best_epoch = epoch;
            result.test_acc_at_best_val = accuracy(&model, &data.test)?;
            best_params.clone_from(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }

    model.store.unflatten(&best_params)?;
    result.wall_seconds = start.elapsed().as_secs_f64();
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut *w, &result)?;
        writeln!(w)?;
        w.flush()?;
    }
    if let Some((_, p)) = &paths {
        model.save(p)?;
    }
    Ok((result, model))
}

/// Population mean and standard deviation (divisor `n`).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSummary {
    pub lr: f64,
    /// Mean best-validation accuracy; a diverged run counts as 0.
    pub mean_val_acc: f64,
    pub diverged_runs: usize,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub selected_lr: f64,
    pub mean_test_acc: f64,
    /// Population standard deviation over the selected lr's surviving seeds.
    pub std_test_acc: f64,
    pub test_accs: Vec<f64>,
    pub param_count: usize,
    pub wall_seconds: f64,
    pub per_lr: Vec<LrSummary>,
}

/// Run every (lr, seed) pair, pick the lr with the best mean validation
/// accuracy (ties keep the earlier lr) and report test accuracy there.
/// Each seed fixes both the data split and the initialization.
pub fn grid_and_seeds(
    template: &TrainConfig,
    ds: &Dataset,
    lrs: &[f64],
    seeds: &[u64],
) -> Result<GridResult> {
    if lrs.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "grid needs at least one lr and one seed".into(),
        ));
    }
    let start = Instant::now();
    let prepared = seeds
        .iter()
        .map(|&s| prepare_dataset(ds, s, template.normalize))
        .collect::<Result<Vec<_>>>()?;
    let mut per_lr = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let mut runs = Vec::with_capacity(seeds.len());
        for (&seed, data) in seeds.iter().zip(&prepared) {
            let cfg = TrainConfig {
                lr,
                seed,
                ..template.clone()
            };
            runs.push(train_one(&cfg, data)?);
        }
        let diverged_runs = runs.iter().filter(|r| r.diverged).count();
        let vals: Vec<f64> = runs
            .iter()
            .map(|r| if r.diverged { 0.0 } else { r.best_val_acc })
            .collect();
        per_lr.push(LrSummary {
            lr,
            mean_val_acc: mean_std(&vals).0,
            diverged_runs,
            runs,
        });
    }
    let chosen = per_lr
        .iter()
        .filter(|s| s.diverged_runs < s.runs.len())
        .fold(None::<&LrSummary>, |best, s| match best {
            Some(b) if b.mean_val_acc >= s.mean_val_acc => Some(b),
            _ => Some(s),
        })
        .ok_or_else(|| Error::Divergence("every run in the grid diverged".into()))?;
    let test_accs: Vec<f64> = chosen
        .runs
        .iter()
        .filter(|r| !r.diverged)
        .map(|r| r.test_acc_at_best_val)
        .collect();
    let (mean, std) = mean_std(&test_accs);
    Ok(GridResult {
        selected_lr: chosen.lr,
        mean_test_acc: mean,
        std_test_acc: std,
        test_accs,
        param_count: chosen.runs[0].param_count,
        wall_seconds: start.elapsed().as_secs_f64(),
        per_lr,
    })
}
