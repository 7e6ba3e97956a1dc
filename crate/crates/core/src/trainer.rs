//! Closed-loop training: every epoch integrates the model from the first
//! data frame over the whole horizon and takes one optimizer step on the
//! trajectory MSE.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use finn_autodiff::{write_checkpoint, Adam, AdamConfig, Matrix, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{CoreError, Result};
use crate::family::Family;
use crate::integrator::{integrate, integrate_recorded, IntegratorConfig, Trajectory};
use crate::model::FinnModel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NanPolicy {
    /// Stop at the first non-finite loss or gradient.
    #[default]
    Abort,
    /// Skip the update and keep going.
    SkipStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub seed: u64,
    /// Gradients with a larger global norm are rescaled to this norm.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub nan_policy: NanPolicy,
    /// Losses above this abort the run.
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    /// Write a checkpoint every this many epochs into `checkpoint_dir`.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_epochs() -> usize {
    100
}
fn default_clip() -> Option<f64> {
    Some(10.0)
}
fn default_divergence() -> f64 {
    1e6
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            optimizer: AdamConfig::default(),
            integrator: IntegratorConfig::default(),
            seed: 0,
            grad_clip: default_clip(),
            nan_policy: NanPolicy::Abort,
            divergence_threshold: default_divergence(),
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate and epoch budget that train the default learned model
    /// of `family` from its registered training split.
    pub fn for_family(family: Family) -> Self {
        let (lr, epochs) = match family {
            Family::AllenCahn => (5e-2, 150),
            _ => (1e-2, 100),
        };
        Self {
            epochs,
            optimizer: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// `losses[k]` is the loss after `k` updates; the last entry is measured
    /// after the final update.
    pub losses: Vec<f64>,
    /// First epoch whose loss or gradient was not finite.
    pub nan_epoch: Option<usize>,
    pub diverged: bool,
    /// Index into `losses` of the parameters kept in the model.
    pub best_epoch: usize,
    pub best_loss: f64,
    pub gradient_norms: Vec<f64>,
    /// Left out of the serialized record so that identical runs produce
    /// identical files.
    #[serde(skip, default)]
    pub wall_clock_seconds: f64,
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    /// Failure message of the epoch that stopped the run, if any.
    #[serde(default)]
    pub stopped_by: Option<String>,
}

impl RunRecord {
    pub fn completed_epochs(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }
}

/// Data compared against one output frame: either the full state or
/// selected volumes of single species.
#[derive(Clone, Debug)]
enum FrameTarget {
    Dense(Matrix),
    Sparse(Vec<(usize, Arc<[usize]>, Matrix)>),
}

/// What the rollout is compared against.
#[derive(Clone, Debug)]
pub struct Target {
    initial: Matrix,
    times: Vec<f64>,
    frames: Vec<Option<FrameTarget>>,
    count: usize,
}

/// One observed value: output time, volume, species.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub cell: usize,
    pub species: usize,
    pub value: f64,
}

impl Target {
    /// Every value of every frame, including the initial one.
    pub fn dense(dataset: &Dataset) -> Self {
        let frames = (0..dataset.frames()).map(|t| Some(FrameTarget::Dense(dataset.state(t)))).collect();
        Self {
            initial: dataset.state(0),
            times: dataset.times.clone(),
            frames,
            count: dataset.values.len(),
        }
    }

    /// Scattered observations; the rollout starts at `t0` from `initial` and
    /// stops at the latest observation.
    pub fn sparse(initial: Matrix, t0: f64, observations: &[Observation]) -> Result<Self> {
        if observations.is_empty() {
            return Err(CoreError::Observation("no observations".into()));
        }
        let (cells, species) = initial.shape();
        let mut by_time: BTreeMap<u64, Vec<&Observation>> = BTreeMap::new();
        for (row, o) in observations.iter().enumerate() {
            if !(o.time >= t0) || !o.time.is_finite() {
                return Err(CoreError::Observation(format!(
                    "observation {row}: time {} precedes the rollout start {t0}",
                    o.time
                )));
            }
            if o.cell >= cells || o.species >= species {
                return Err(CoreError::Observation(format!(
                    "observation {row}: volume {} / species {} outside the {cells} x {species} domain",
                    o.cell, o.species
                )));
            }
            if !o.value.is_finite() {
                return Err(CoreError::Observation(format!("observation {row}: value is not finite")));
            }
            by_time.entry(o.time.to_bits()).or_default().push(o);
        }
        let mut times = vec![t0];
        let mut frames = vec![None];
        let mut sorted: Vec<(f64, Vec<&Observation>)> = by_time.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (t, obs) in sorted {
            let mut groups = Vec::new();
            for s in 0..species {
                let (idx, vals): (Vec<usize>, Vec<f64>) =
                    obs.iter().filter(|o| o.species == s).map(|o| (o.cell, o.value)).unzip();
                if !idx.is_empty() {
                    groups.push((s, idx.into(), Matrix::column(vals)));
                }
            }
            if t == t0 {
                frames[0] = Some(FrameTarget::Sparse(groups));
            } else {
                times.push(t);
                frames.push(Some(FrameTarget::Sparse(groups)));
            }
        }
        Ok(Self {
            initial,
            times,
            frames,
            count: observations.len(),
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn initial(&self) -> &Matrix {
        &self.initial
    }

    /// Number of compared values.
    pub fn count(&self) -> usize {
        self.count
    }

    fn check(&self, model: &FinnModel) -> Result<()> {
        let expect = (model.grid().cells(), model.family().species());
        if self.initial.shape() != expect {
            return Err(CoreError::Shape(format!(
                "data state is {:?} but the model expects {expect:?}",
                self.initial.shape()
            )));
        }
        Ok(())
    }

    /// Mean squared error of plain predicted frames.
    pub fn loss_of(&self, predicted: &[Matrix]) -> f64 {
        let mut total = 0.0;
        for (p, f) in predicted.iter().zip(&self.frames) {
            match f {
                None => {}
                Some(FrameTarget::Dense(d)) => {
                    total += p.data().iter().zip(d.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                }
                Some(FrameTarget::Sparse(groups)) => {
                    for (s, idx, vals) in groups {
                        for (&c, v) in idx.iter().zip(vals.data()) {
                            total += (p.get(c, *s) - v).powi(2);
                        }
                    }
                }
            }
        }
        total / self.count as f64
    }

    fn record_loss(&self, tape: &mut Tape, predicted: &[Var]) -> Result<Var> {
        let mut terms = Vec::new();
        let w = 1.0 / self.count as f64;
        for (&p, f) in predicted.iter().zip(&self.frames) {
            let parts: Vec<(Var, Matrix)> = match f {
                None => continue,
                Some(FrameTarget::Dense(d)) => vec![(p, d.clone())],
                Some(FrameTarget::Sparse(groups)) => {
                    let mut v = Vec::new();
                    for (s, idx, vals) in groups {
                        let col = if tape.value(p).cols() == 1 { p } else { tape.column(p, *s)? };
                        v.push((tape.gather(col, idx.clone())?, vals.clone()));
                    }
                    v
                }
            };
            for (pred, data) in parts {
                let d = tape.leaf(data);
                let diff = tape.sub(pred, d)?;
                let sq = tape.mul(diff, diff)?;
                terms.push((tape.sum(sq)?, w));
            }
        }
        Ok(tape.lin_comb(&terms)?)
    }
}

/// Closed-loop prediction of `model` from `u0` at the given output times.
pub fn rollout(model: &FinnModel, u0: &Matrix, times: &[f64], integrator: &IntegratorConfig) -> Result<Trajectory> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    integrate(&bound, &mut tape, u0, times, integrator)
}

/// Loss and gradient with respect to the trainable parameters, in
/// [`finn_autodiff::ParamStore::flat_trainable`] order.
pub fn loss_and_gradient(model: &FinnModel, target: &Target, integrator: &IntegratorConfig) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = loss_and_param_grads(model, target, integrator)?;
    Ok((loss, model.params().flat_gradients(&grads)))
}

fn loss_and_param_grads(
    model: &FinnModel,
    target: &Target,
    integrator: &IntegratorConfig,
) -> Result<(f64, finn_autodiff::ParamGrads)> {
    target.check(model)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let u0 = tape.leaf(target.initial.clone());
    let traj = integrate_recorded(&bound, &mut tape, u0, &target.times, integrator)?;
    let loss = target.record_loss(&mut tape, &traj.states)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward_leaves(loss, &[1.0])?;
    Ok((value, model.params().gradients(bound.binding(), &grads)))
}

/// Loss of the current parameters without recording gradients.
pub fn evaluate_loss(model: &FinnModel, target: &Target, integrator: &IntegratorConfig) -> Result<f64> {
    target.check(model)?;
    let traj = rollout(model, &target.initial, &target.times, integrator)?;
    Ok(target.loss_of(&traj.states))
}

/// Trains against every value of `dataset`.
pub fn train(model: &mut FinnModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunRecord> {
    if dataset.spec.family != model.family() {
        return Err(CoreError::Config(format!(
            "dataset family {} does not match model family {}",
            dataset.spec.family,
            model.family()
        )));
    }
    if dataset.spec.grid != *model.grid() {
        return Err(CoreError::Config("dataset grid differs from the model grid".into()));
    }
    fit(model, &Target::dense(dataset), cfg)
}

/// Trains against scattered observations.
pub fn train_sparse(model: &mut FinnModel, target: &Target, cfg: &TrainConfig) -> Result<RunRecord> {
    fit(model, target, cfg)
}

fn non_finite(e: &CoreError) -> bool {
    matches!(e, CoreError::Integration(_))
}

/// The optimization loop shared by dense and sparse training.
pub fn fit(model: &mut FinnModel, target: &Target, cfg: &TrainConfig) -> Result<RunRecord> {
    target.check(model)?;
    let start = Instant::now();
    let mut adam = Adam::new(cfg.optimizer, model.params());
    let mut record = RunRecord {
        losses: Vec::new(),
        nan_epoch: None,
        diverged: false,
        best_epoch: 0,
        best_loss: f64::INFINITY,
        gradient_norms: Vec::new(),
        wall_clock_seconds: 0.0,
        checkpoints: Vec::new(),
        stopped_by: None,
    };
    let mut best = model.params().flat_trainable();
    for epoch in 0..=cfg.epochs {
        let last = epoch == cfg.epochs;
        let outcome = if last {
            evaluate_loss(model, target, &cfg.integrator).map(|l| (l, None))
        } else {
            loss_and_param_grads(model, target, &cfg.integrator).map(|(l, g)| (l, Some(g)))
        };
        let (loss, grads) = match outcome {
            Ok(v) => v,
            Err(e) if non_finite(&e) => {
                record.losses.push(f64::NAN);
                record.nan_epoch.get_or_insert(epoch);
                record.stopped_by = Some(e.to_string());
                if cfg.nan_policy == NanPolicy::Abort {
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        record.losses.push(loss);
        let grads_finite = grads.as_ref().is_none_or(|g| g.all_finite());
        if !loss.is_finite() || !grads_finite {
            record.nan_epoch.get_or_insert(epoch);
            record.stopped_by = Some("non-finite loss or gradient".into());
            if cfg.nan_policy == NanPolicy::Abort {
                break;
            }
            continue;
        }
        if loss < record.best_loss {
            record.best_loss = loss;
            record.best_epoch = epoch;
            best = model.params().flat_trainable();
        }
        if loss > cfg.divergence_threshold {
            record.diverged = true;
            record.stopped_by = Some(format!("loss {loss:e} exceeds {:e}", cfg.divergence_threshold));
            break;
        }
        let Some(mut grads) = grads else { break };
        let norm = grads.norm();
        record.gradient_norms.push(norm);
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        adam.step(model.params_mut(), &grads)?;
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if every > 0 && (epoch + 1) % every == 0 {
                fs::create_dir_all(dir)?;
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                write_checkpoint(model.params(), fs::File::create(&path)?)?;
                record.checkpoints.push(path);
            }
        }
    }
    if record.best_loss.is_finite() {
        model.params_mut().set_flat_trainable(&best)?;
    }
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(record)
}
