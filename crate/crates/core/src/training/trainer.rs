use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{config_err, Error, Result};
use crate::model::{poses_to_tensor, GaitPT};
use crate::nn::ForwardCtx;
use crate::skeleton::{sample_window, GaitSequence, Pose, WindowMode};
use crate::tensor::Element;

use super::loss::{triplet_loss_batch, TripletStats};
use super::mining::batch_hard_mine;
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::{cyclic_lr, CyclicLr};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
}

/// What one scheduler iteration means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleUnit {
    #[default]
    Epoch,
    Iteration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    /// Clamp each triplet loss at zero.
    pub hinge: bool,
    pub distance: Distance,
    /// Identities per batch (P).
    pub identities_per_batch: usize,
    /// Sequences per identity (K).
    pub samples_per_identity: usize,
    /// Defaults to one pass over the training sequences.
    pub batches_per_epoch: Option<usize>,
    pub epochs: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub gamma: f64,
    pub step_size: u64,
    pub schedule_unit: ScheduleUnit,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.02,
            hinge: true,
            distance: Distance::Euclidean,
            identities_per_batch: 8,
            samples_per_identity: 4,
            batches_per_epoch: None,
            epochs: 30,
            lr_min: 1e-4,
            lr_max: 1e-2,
            gamma: 0.995,
            step_size: 15,
            schedule_unit: ScheduleUnit::Epoch,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is accepted so the degenerate no-margin objective can be run.
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(config_err!(
                "train.margin must be non-negative, got {}",
                self.margin
            ));
        }
        if self.identities_per_batch < 2 {
            return Err(config_err!("train.identities_per_batch must be at least 2"));
        }
        if self.samples_per_identity < 2 {
            return Err(config_err!("train.samples_per_identity must be at least 2"));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(config_err!("train.batches_per_epoch must be positive"));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) || !self.lr_max.is_finite() {
            return Err(config_err!(
                "train.lr_min must be positive and below train.lr_max, got {} and {}",
                self.lr_min,
                self.lr_max
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(config_err!(
                "train.gamma must be in (0, 1], got {}",
                self.gamma
            ));
        }
        if self.step_size < 1 {
            return Err(config_err!("train.step_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("train.weight_decay must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(config_err!(
                "train.betas must lie in [0, 1), got ({b1}, {b2})"
            ));
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("train.eps must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CyclicLr {
        CyclicLr {
            lr_min: self.lr_min,
            lr_max: self.lr_max,
            gamma: self.gamma,
            step_size: self.step_size,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the first step in the epoch.
    pub lr: f64,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub batch_accuracy: f64,
    pub steps: usize,
}

/// Draws label-balanced batches of P identities with K sequences each.
pub struct PkSampler<'a> {
    data: &'a [GaitSequence],
    groups: Vec<(String, Vec<usize>)>,
    p: usize,
    k: usize,
    window: usize,
}

impl<'a> PkSampler<'a> {
    pub fn new(data: &'a [GaitSequence], p: usize, k: usize, window: usize) -> Result<Self> {
        let mut by_id: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in data.iter().enumerate() {
            if s.len() < window {
                return Err(Error::Input(format!(
                    "sequence {} has {} frames, window needs {window}",
                    s.key,
                    s.len()
                )));
            }
            by_id.entry(&s.subject_id).or_default().push(i);
        }
        if by_id.len() < p {
            return Err(config_err!(
                "dataset has {} identities, batches need {p}",
                by_id.len()
            ));
        }
        Ok(Self {
            data,
            groups: by_id.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            p,
            k,
            window,
        })
    }

    pub fn identities(&self) -> usize {
        self.groups.len()
    }

    /// Windows and their labels for one batch. Identities with fewer than
    /// K sequences are sampled with replacement.
    pub fn batch<R: Rng>(&self, rng: &mut R) -> Result<(Vec<&'a [Pose]>, Vec<String>)> {
        let mut windows = Vec::with_capacity(self.p * self.k);
        let mut labels = Vec::with_capacity(self.p * self.k);
        for g in sample(rng, self.groups.len(), self.p) {
            let (label, members) = &self.groups[g];
            let picks: Vec<usize> = if members.len() >= self.k {
                sample(rng, members.len(), self.k).into_vec()
            } else {
                (0..self.k)
                    .map(|_| rng.gen_range(0..members.len()))
                    .collect()
            };
            for i in picks {
                let seq = &self.data[members[i]];
                windows.push(sample_window(
                    seq,
                    self.window,
                    WindowMode::TrainRandom,
                    rng,
                )?);
                labels.push(label.clone());
            }
        }
        Ok((windows, labels))
    }
}

fn batches_per_epoch(cfg: &TrainConfig, sequences: usize) -> usize {
    cfg.batches_per_epoch.unwrap_or_else(|| {
        sequences
            .div_ceil(cfg.identities_per_batch * cfg.samples_per_identity)
            .max(1)
    })
}

fn embed_and_mine<T: Element>(
    model: &GaitPT<T>,
    tape: &Tape<T>,
    trainable: bool,
    windows: &[&[Pose]],
    labels: &[String],
    cfg: &TrainConfig,
    ctx: &ForwardCtx,
) -> Result<(crate::autodiff::Var<T>, TripletStats, crate::nn::Bound<T>)> {
    let p = model.params().bind(tape, trainable);
    let input = tape.constant(poses_to_tensor(windows, model.config().sequence_length)?);
    let emb = model.forward_batch(&p, &input, ctx)?.embedding;
    let rows: Vec<Vec<f64>> = {
        let v = emb.value();
        let d = model.config().output_dim;
        v.data()
            .chunks(d)
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect()
    };
    let triplets = batch_hard_mine(&rows, labels)?;
    let (loss, stats) = triplet_loss_batch(&emb, &triplets, cfg.margin, cfg.hinge)?;
    Ok((loss, stats, p))
}

/// Trains `model` in place. `on_epoch` sees each log line and the model as
/// it stands at the end of that epoch, which is where checkpoints are
/// written.
pub fn train<T, F>(
    model: &mut GaitPT<T>,
    data: &[GaitSequence],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    T: Element,
    F: FnMut(&EpochLog, &GaitPT<T>) -> Result<()>,
{
    cfg.validate()?;
    let sampler = PkSampler::new(
        data,
        cfg.identities_per_batch,
        cfg.samples_per_identity,
        model.config().sequence_length,
    )?;
    let per_epoch = batches_per_epoch(cfg, data.len());
    let schedule = cfg.schedule();
    let adamw = cfg.adamw();
    let dropout = model.config().dropout;
    let mut state = OptimizerState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0u64;

    for epoch in 0..cfg.epochs {
        let mut sums = TripletStats::default();
        let mut first_lr = None;
        for _ in 0..per_epoch {
            let lr = match cfg.schedule_unit {
                ScheduleUnit::Epoch => cyclic_lr(epoch as u64, &schedule),
                ScheduleUnit::Iteration => cyclic_lr(iteration, &schedule),
            };
            first_lr.get_or_insert(lr);
            let (windows, labels) = sampler.batch(&mut rng)?;
            let ctx = ForwardCtx::train(dropout, rng.gen());
            {
                let tape = Tape::new();
                let (loss, stats, bound) =
                    embed_and_mine(model, &tape, true, &windows, &labels, cfg, &ctx)?;
                if !stats.mean_loss.is_finite() {
                    return Err(Error::NumericInput(format!(
                        "non-finite loss at epoch {epoch}, iteration {iteration}"
                    )));
                }
                let mut grads = loss.backward()?;
                model.params_mut().absorb_grads(&bound, &mut grads);
                sums.mean_loss += stats.mean_loss;
                sums.active_fraction += stats.active_fraction;
                sums.accuracy += stats.accuracy;
            }
            adamw_step(model.params_mut(), &mut state, &adamw, lr)?;
            model.params_mut().zero_grads();
            iteration += 1;
        }
        let n = per_epoch as f64;
        let entry = EpochLog {
            epoch,
            lr: first_lr.unwrap_or(cfg.lr_min),
            mean_loss: sums.mean_loss / n,
            active_fraction: sums.active_fraction / n,
            batch_accuracy: sums.accuracy / n,
            steps: per_epoch,
        };
        on_epoch(&entry, model)?;
        log.push(entry);
    }
    Ok(log)
}

/// Mean batch-hard triplet loss of `model` over `batches` batches drawn
/// with `seed`, without updating anything. Two calls with the same seed
/// score the same windows.
pub fn evaluate_loss<T: Element>(
    model: &GaitPT<T>,
    data: &[GaitSequence],
    cfg: &TrainConfig,
    batches: usize,
    seed: u64,
) -> Result<TripletStats> {
    cfg.validate()?;
    let sampler = PkSampler::new(
        data,
        cfg.identities_per_batch,
        cfg.samples_per_identity,
        model.config().sequence_length,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = TripletStats::default();
    let ctx = ForwardCtx::eval();
    for _ in 0..batches.max(1) {
        let (windows, labels) = sampler.batch(&mut rng)?;
        let tape = Tape::new();
        let (_, stats, _) = embed_and_mine(model, &tape, false, &windows, &labels, cfg, &ctx)?;
        sums.mean_loss += stats.mean_loss;
        sums.active_fraction += stats.active_fraction;
        sums.accuracy += stats.accuracy;
    }
    let n = batches.max(1) as f64;
    Ok(TripletStats {
        mean_loss: sums.mean_loss / n,
        active_fraction: sums.active_fraction / n,
        accuracy: sums.accuracy / n,
    })
}
