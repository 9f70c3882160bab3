//! Dual-pass training with transformation-consistent regularization.
//!
//! Every member of a minibatch is evaluated twice: once on the raw input with
//! the prediction transformed afterwards (`z = op(f(x))`), and once on the
//! transformed input (`z~ = f(op(x))`). Labeled members contribute binary
//! cross-entropy against `op(y)`; members chosen by the regularization scope
//! contribute the squared difference `(z - z~)^2`, weighted by the ramp-up
//! `lambda(t)`. Parameters are updated by SGD with momentum under the
//! polynomial learning-rate decay.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, DatasetSplit, Sample};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{self, MetricReport};
use crate::model::{ModelConfig, SegModel};
use crate::objective::{self, LossBreakdown, ScheduleConfig};
use crate::transform::TransformOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationScope {
    None,
    LabeledOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub schedule: ScheduleConfig,
    pub regularization_scope: RegularizationScope,
    pub enable_transform_consistency: bool,
    pub enable_noise_dropout: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_epochs(10)
    }
}

impl TrainConfig {
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 10,
            momentum: 0.9,
            schedule: ScheduleConfig::for_epochs(epochs),
            regularization_scope: RegularizationScope::All,
            enable_transform_consistency: true,
            enable_noise_dropout: true,
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0,1)", self.momentum)));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, pool: usize) -> usize {
        pool.div_ceil(self.batch_size)
    }
}

/// Per-epoch summary: mean loss terms over the epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ja: Option<f64>,
    #[serde(skip)]
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn losses(&self) -> Vec<LossBreakdown> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn val_reports(&self) -> Vec<Option<MetricReport>> {
        self.epochs.iter().map(|e| e.val).collect()
    }
}

/// Deterministic random stream for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) | index);
    rng
}

pub(crate) const STREAM_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_PERTURB: u64 = 3;

/// `v <- momentum * v - lr * g; theta <- theta + v`.
pub fn sgd_momentum_update(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

fn pixels(batch: &Batch) -> usize {
    batch.images.first().map_or(0, Grid::plane_len)
}

/// Model, momentum buffer and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: SegModel,
    velocity: Vec<f64>,
    config: TrainConfig,
    schedule: ScheduleConfig,
    epoch: usize,
    iteration: usize,
    batches_per_epoch: usize,
}

impl Trainer {
    /// Fresh momentum state for training on a pool of `pool_size` samples.
    pub fn new(model: SegModel, config: TrainConfig, pool_size: usize) -> Result<Self> {
        let velocity = vec![0.0; model.param_count()];
        Self::resume(model, velocity, 0, config, pool_size)
    }

    /// Continues from `epoch` completed epochs with the given momentum buffer.
    pub fn resume(
        model: SegModel,
        velocity: Vec<f64>,
        epoch: usize,
        config: TrainConfig,
        pool_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        if pool_size == 0 {
            return Err(Error::Parameter("training pool is empty".into()));
        }
        if velocity.len() != model.param_count() {
            return Err(Error::Shape("momentum buffer does not match model".into()));
        }
        if epoch > config.epochs {
            return Err(Error::Config(format!(
                "resume epoch {epoch} beyond configured {} epochs",
                config.epochs
            )));
        }
        let batches_per_epoch = config.batches_per_epoch(pool_size);
        let mut schedule = config.schedule.clone();
        schedule.total_iterations = config.epochs * batches_per_epoch;
        schedule.validate()?;
        Ok(Self {
            model,
            velocity,
            config,
            schedule,
            epoch,
            iteration: epoch * batches_per_epoch,
            batches_per_epoch,
        })
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub fn into_parts(self) -> (SegModel, Vec<f64>, usize) {
        (self.model, self.velocity, self.epoch)
    }

    /// Loss and parameter gradient of one batch, without updating.
    pub fn batch_gradient(
        &self,
        batch: &Batch,
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let cfg = &self.config;
        let model = &self.model;
        let lambda = objective::ramp_weight(epoch, &self.schedule);
        let n_labeled = batch.labeled_count();
        let n_selected = match cfg.regularization_scope {
            RegularizationScope::None => 0,
            RegularizationScope::LabeledOnly => n_labeled,
            RegularizationScope::All => batch.len(),
        };
        let px = pixels(batch);
        let sup_scale = if n_labeled > 0 {
            1.0 / (n_labeled * px) as f64
        } else {
            0.0
        };
        let con_scale = if n_selected > 0 {
            lambda / (n_selected * px) as f64
        } else {
            0.0
        };

        let mut grad = vec![0.0; model.param_count()];
        let mut sup_sum = 0.0;
        let mut con_sum = 0.0;
        for i in 0..batch.len() {
            let image = &batch.images[i];
            let op = if cfg.enable_transform_consistency {
                batch.ops[i]
            } else {
                TransformOp::IDENTITY
            };
            let selected = match cfg.regularization_scope {
                RegularizationScope::None => false,
                RegularizationScope::LabeledOnly => batch.labeled_flags[i],
                RegularizationScope::All => true,
            };
            if !batch.labeled_flags[i] && !selected {
                continue;
            }

            let perturb = cfg.enable_noise_dropout;
            let tape = model.forward_taped(image, perturb.then(|| model.perturbation(&mut *rng)))?;
            let n = image.width();
            let z = op.apply(&Grid::new(1, n, n, tape.probs().to_vec())?)?;
            let mut grad_z = vec![0.0; z.data().len()];

            if let Some(mask) = batch.masks[i].as_ref().filter(|_| batch.labeled_flags[i]) {
                let y = op.apply(mask)?;
                sup_sum += objective::supervised_sum(z.data(), y.data());
                for (g, s) in grad_z
                    .iter_mut()
                    .zip(objective::supervised_grad(z.data(), y.data(), sup_scale))
                {
                    *g += s;
                }
            }

            if selected {
                let moved = op.apply(image)?;
                let tape2 =
                    model.forward_taped(&moved, perturb.then(|| model.perturbation(&mut *rng)))?;
                let z_tilde = tape2.probs();
                con_sum += objective::squared_diff_sum(z.data(), z_tilde);
                let g_con = objective::consistency_grad(z.data(), z_tilde, con_scale);
                for (g, s) in grad_z.iter_mut().zip(&g_con) {
                    *g += s;
                }
                let g_tilde: Vec<f64> = g_con.iter().map(|g| -g).collect();
                model.backward(&tape2, &g_tilde, &mut grad);
            }

            let grad_p = op.inverse().apply(&Grid::new(1, n, n, grad_z)?)?;
            model.backward(&tape, grad_p.data(), &mut grad);
        }

        let supervised = if n_labeled > 0 {
            sup_sum / (n_labeled * px) as f64
        } else {
            0.0
        };
        let consistency = if n_selected > 0 {
            con_sum / (n_selected * px) as f64
        } else {
            0.0
        };
        let breakdown = objective::total_loss(supervised, consistency, lambda)?;
        Ok((breakdown, grad))
    }

    /// One optimization step on `batch`; advances the iteration counter.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let lr = objective::poly_lr(self.iteration, &self.schedule)?;
        let (loss, grad) = self.batch_gradient(batch, epoch, rng)?;
        sgd_momentum_update(
            self.model.params_mut(),
            &mut self.velocity,
            &grad,
            lr,
            self.config.momentum,
        );
        self.iteration += 1;
        Ok(loss)
    }

    /// Runs the next epoch over `split`, evaluating on `val` when given.
    pub fn run_epoch(&mut self, split: &DatasetSplit, val: Option<&[Sample]>) -> Result<EpochRecord> {
        if self.epoch >= self.config.epochs {
            return Err(Error::Config("all configured epochs already ran".into()));
        }
        let epoch = self.epoch;
        if self.config.batches_per_epoch(split.len()) != self.batches_per_epoch {
            return Err(Error::Parameter("split size changed between epochs".into()));
        }
        let mut batch_rng = stream_rng(self.config.seed, STREAM_BATCHES, epoch as u64);
        let mut perturb_rng = stream_rng(self.config.seed, STREAM_PERTURB, epoch as u64);
        let batches = make_batches(split, self.config.batch_size, &mut batch_rng, self.config.augment)?;

        let lr = objective::poly_lr(self.iteration, &self.schedule)?;
        let lambda = objective::ramp_weight(epoch, &self.schedule);
        let mut sums = LossBreakdown::default();
        for batch in &batches {
            let l = self.train_step(batch, epoch, &mut perturb_rng)?;
            sums.supervised += l.supervised;
            sums.consistency += l.consistency;
        }
        if !self.model.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let nb = batches.len() as f64;
        let loss = objective::total_loss(sums.supervised / nb, sums.consistency / nb, lambda)?;
        let val = val.map(|v| evaluate(&self.model, v)).transpose()?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            loss,
            lr,
            lambda,
            val_ja: val.map(|r| r.ja),
            val,
        })
    }
}

/// Trains a fresh model; the model is initialized from `train_config.seed`.
pub fn train(
    split: &DatasetSplit,
    val: Option<&[Sample]>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(SegModel, TrainHistory)> {
    train_with_progress(split, val, model_config, train_config, None)
}

/// [`train`] that also writes one JSON line per epoch to `progress`.
pub fn train_with_progress(
    split: &DatasetSplit,
    val: Option<&[Sample]>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    progress: Option<&mut dyn Write>,
) -> Result<(SegModel, TrainHistory)> {
    let model = init_model(model_config, train_config.seed)?;
    let trainer = Trainer::new(model, train_config.clone(), split.len())?;
    continue_training(trainer, split, val, progress)
}

/// Runs a trainer until its configured epoch count.
pub fn continue_training(
    mut trainer: Trainer,
    split: &DatasetSplit,
    val: Option<&[Sample]>,
    mut progress: Option<&mut dyn Write>,
) -> Result<(SegModel, TrainHistory)> {
    if let Some(s) = split.iter().find(|s| s.size() != trainer.model().config().size) {
        return Err(Error::Config(format!(
            "sample {} has size {}, model expects {}",
            s.id,
            s.size(),
            trainer.model().config().size
        )));
    }
    let mut history = TrainHistory::default();
    while trainer.epoch() < trainer.config().epochs {
        let record = trainer.run_epoch(split, val)?;
        if let Some(out) = progress.as_deref_mut() {
            writeln!(out, "{}", serde_json::to_string(&record)?)?;
        }
        history.epochs.push(record);
    }
    let (model, _, _) = trainer.into_parts();
    Ok((model, history))
}

pub fn init_model(model_config: &ModelConfig, seed: u64) -> Result<SegModel> {
    SegModel::init(model_config.clone(), &mut stream_rng(seed, STREAM_INIT, 0))
}

/// Plain supervised SGD over the labeled members of each batch, with
/// deterministic forward passes. Serves as the reference the dual-pass
/// trainer must reduce to when every regularizer is switched off.
#[derive(Debug, Clone)]
pub struct SupervisedTrainer {
    model: SegModel,
    velocity: Vec<f64>,
    config: TrainConfig,
    schedule: ScheduleConfig,
    epoch: usize,
    iteration: usize,
}

impl SupervisedTrainer {
    pub fn new(model: SegModel, config: TrainConfig, pool_size: usize) -> Result<Self> {
        config.validate()?;
        let mut schedule = config.schedule.clone();
        schedule.total_iterations = config.epochs * config.batches_per_epoch(pool_size);
        schedule.validate()?;
        Ok(Self {
            velocity: vec![0.0; model.param_count()],
            model,
            config,
            schedule,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let lr = objective::poly_lr(self.iteration, &self.schedule)?;
        let n_labeled = batch.labeled_count();
        let mut grad = vec![0.0; self.model.param_count()];
        let mut loss = 0.0;
        if n_labeled > 0 {
            let scale = 1.0 / (n_labeled * pixels(batch)) as f64;
            for (image, mask) in batch.images.iter().zip(&batch.masks) {
                let Some(mask) = mask else { continue };
                let tape = self.model.forward_taped::<ChaCha8Rng>(image, None)?;
                loss += objective::supervised_sum(tape.probs(), mask.data()) * scale;
                let g = objective::supervised_grad(tape.probs(), mask.data(), scale);
                self.model.backward(&tape, &g, &mut grad);
            }
        }
        sgd_momentum_update(
            self.model.params_mut(),
            &mut self.velocity,
            &grad,
            lr,
            self.config.momentum,
        );
        self.iteration += 1;
        Ok(loss)
    }

    pub fn run_epoch(&mut self, split: &DatasetSplit) -> Result<f64> {
        let mut batch_rng = stream_rng(self.config.seed, STREAM_BATCHES, self.epoch as u64);
        let batches = make_batches(split, self.config.batch_size, &mut batch_rng, self.config.augment)?;
        let mut total = 0.0;
        for b in &batches {
            total += self.step(b)?;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }
}

/// Runs inference on every sample and averages the per-image scores.
pub fn evaluate(model: &SegModel, dataset: &[Sample]) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("evaluation set is empty".into()));
    }
    let scores = dataset
        .iter()
        .map(|s| {
            let truth = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::Parameter(format!("{} has no mask", s.id)))?;
            let pred = metrics::infer(model, &s.image)?;
            Ok(metrics::metrics_from_counts(&metrics::confusion(&pred, truth)?))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_scores(&scores)
}
