//! End-to-end training: patch batches with inherited scores, a forward pass
//! on the batch and on its transformed copy inside one graph, the weighted
//! total loss, Adam, per-epoch learning-rate decay and periodic validation.

pub mod adam;
pub mod checkpoint;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use crate::analysis::predict_images;
use crate::data::patches::{augment, equivariant_transform, gather_patches, random_corner};
use crate::data::{load_images, AugmentPolicy, DatasetManifest, TransformKind};
use crate::error::{Error, Result};
use crate::losses::{
    quality_loss_var, ranking_loss_var, self_consistency_var, total_loss_var, BranchPair, ConsistencyOn,
    LossNorm, LossReport, LossWeights,
};
use crate::metrics::{evaluate, MetricReport, ScorePairs};
use crate::model::{Model, ScoreScale};
use crate::nn::{Graph, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Patches per step.
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is divided by this after every epoch.
    pub lr_decay_factor: f64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub loss_norm: LossNorm,
    pub consistency_on: ConsistencyOn,
    pub consistency_transform: TransformKind,
    /// Epochs over which the consistency weight ramps linearly from 0 to
    /// `loss.lambda3`; 0 applies it from the first step.
    pub consistency_warmup: f64,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// Training patches drawn from every image per epoch.
    pub patches_per_image: usize,
    pub patch_size: usize,
    /// Patches averaged per image at evaluation time.
    pub eval_patches: usize,
    /// Validate every this many steps; 0 validates at the end of each epoch.
    pub eval_every: usize,
    /// Stop after this many steps; 0 means no limit.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings: Adam with weight decay 5e-4, 53 patches per
    /// step, lr 2e-5 divided by 10 each epoch, 5 epochs, 50 patches of 224².
    pub fn paper() -> Self {
        Self {
            epochs: 5,
            batch_size: 53,
            lr: 2e-5,
            lr_decay_factor: 10.0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            loss_norm: LossNorm::L1,
            consistency_on: ConsistencyOn::Scalar,
            consistency_transform: TransformKind::HFlip,
            consistency_warmup: 0.0,
            augment: AugmentPolicy::default(),
            seed: 0,
            patches_per_image: 50,
            patch_size: 224,
            eval_patches: 50,
            eval_every: 0,
            max_steps: 0,
        }
    }

    /// Desk-scale settings for 64×64 synthetic data trained from scratch.
    pub fn toy() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            lr_decay_factor: 1.25,
            patches_per_image: 2,
            patch_size: 64,
            eval_patches: 1,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_image == 0 || self.eval_patches == 0 {
            return Err(Error::Config(
                "train.epochs, batch_size, patches_per_image and eval_patches must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            )));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "train.patch_size must be a positive multiple of 16, got {}",
                self.patch_size
            )));
        }
        for (n, p) in [("hflip_prob", self.augment.hflip), ("vflip_prob", self.augment.vflip)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("train.{n} must be in [0, 1], got {p}")));
            }
        }
        if !(self.consistency_warmup >= 0.0 && self.consistency_warmup.is_finite()) {
            return Err(Error::Config(format!(
                "train.consistency_warmup must be non-negative, got {}",
                self.consistency_warmup
            )));
        }
        self.loss.validate()
    }

    /// Consistency weight at fractional epoch `progress`.
    pub fn lambda3_at(&self, progress: f64) -> f64 {
        if self.consistency_warmup > 0.0 {
            self.loss.lambda3 * (progress / self.consistency_warmup).min(1.0)
        } else {
            self.loss.lambda3
        }
    }

    /// `lr0 / decay^epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr / self.lr_decay_factor.powi(epoch as i32)
    }
}

/// Validation metrics at one point of training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: MetricReport,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,n,srocc,plcc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.epoch, self.report.n, self.report.srocc, self.report.plcc
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation model when validation data was given, else the final one.
    pub model: Model,
    pub history: Vec<LossReport>,
    pub evals: Vec<EvalRecord>,
    pub steps: usize,
    /// Step and epoch the returned model comes from.
    pub model_step: usize,
    pub model_epoch: usize,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for (i, r) in self.history.iter().enumerate() {
            s.push_str(&r.csv_row(i + 1));
            s.push('\n');
        }
        s
    }

    pub fn evals_csv(&self) -> String {
        let mut s = String::from(EvalRecord::CSV_HEADER);
        s.push('\n');
        for e in &self.evals {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Images of a manifest held in memory with their scores.
pub struct LoadedSet {
    pub images: Vec<Tensor<f32>>,
    pub scores: Vec<f64>,
}

impl LoadedSet {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            images: load_images(manifest)?,
            scores: manifest.scores(),
        })
    }
}

/// Validation SROCC/PLCC of patch-averaged predictions.
pub fn evaluate_set(model: &Model, set: &LoadedSet, n_patches: usize, patch_size: usize, seed: u64) -> Result<MetricReport> {
    let preds = predict_images(model, &set.images, n_patches, patch_size, seed)?;
    evaluate(&ScorePairs::new(preds, set.scores.clone())?)
}

/// Where [`train`] writes artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Receives `train_log.csv`, `eval_log.csv`, the returned model as a
    /// checkpoint under `checkpoint/`, and `last_good/` if training aborts.
    pub dir: Option<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `model` on `train_set`. Scores are mapped to `[0, 1]` with
/// `score_scale` before the losses see them.
pub fn train(
    config: &TrainConfig,
    model: Model,
    train_set: &LoadedSet,
    val_set: Option<&LoadedSet>,
    score_scale: ScoreScale,
) -> Result<TrainOutcome> {
    train_with_outputs(config, model, train_set, val_set, score_scale, &TrainOutputs::default(), &[])
}

/// [`train`] that also writes artifacts. `echo` is extra `key = value`
/// metadata stored in checkpoints.
pub fn train_with_outputs(
    config: &TrainConfig,
    mut model: Model,
    train_set: &LoadedSet,
    val_set: Option<&LoadedSet>,
    score_scale: ScoreScale,
    outputs: &TrainOutputs,
    echo: &[(String, String)],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let size = config.patch_size;
    for (i, img) in train_set.images.iter().enumerate() {
        let s = img.shape();
        if s[1] < size || s[2] < size {
            return Err(Error::Data(format!(
                "training image {i} is {}x{}, smaller than patch size {size}",
                s[1], s[2]
            )));
        }
    }
    if let Some(dir) = &outputs.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.score_scale = score_scale;
    let targets: Vec<f64> = train_set.scores.iter().map(|&s| score_scale.to_unit(s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam);
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<(f64, Model, usize, usize)> = None;
    let mut step = 0usize;
    let mut epoch_done = 0usize;

    let mut validate = |model: &Model, step: usize, epoch: usize, evals: &mut Vec<EvalRecord>| -> Result<()> {
        let Some(val) = val_set else { return Ok(()) };
        let report = evaluate_set(model, val, config.eval_patches, size, config.seed)?;
        log::info!("step {step} epoch {epoch}: val srocc {:.4} plcc {:.4}", report.srocc, report.plcc);
        if best.as_ref().is_none_or(|(s, ..)| report.srocc > *s) {
            best = Some((report.srocc, model.clone(), step, epoch));
        }
        evals.push(EvalRecord { step, epoch, report });
        Ok(())
    };

    'epochs: for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train_set.images.len())
            .flat_map(|i| std::iter::repeat_n(i, config.patches_per_image))
            .collect();
        order.shuffle(&mut rng);
        let steps_in_epoch = order.len().div_ceil(config.batch_size);
        for (k, chunk) in order.chunks(config.batch_size).enumerate() {
            if config.max_steps > 0 && step >= config.max_steps {
                break 'epochs;
            }
            let picks: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let s = train_set.images[i].shape();
                    let (t, l) = random_corner(s[1], s[2], size, &mut rng);
                    (i, t, l)
                })
                .collect();
            let batch = gather_patches(&train_set.images, &targets, &picks, size)?;
            let batch = augment(&batch, &mut rng, config.augment)?;
            let graph_seed = rng.gen();
            let transformed = if config.loss.lambda3 > 0.0 {
                Some(equivariant_transform(&batch.patches, config.consistency_transform, &mut rng)?)
            } else {
                None
            };
            let weights = LossWeights {
                lambda3: config.lambda3_at(epoch as f64 + k as f64 / steps_in_epoch as f64),
                ..config.loss
            };
            let report = match train_step(config, &weights, &mut model, &mut adam, &batch.patches, transformed, &batch.scores, lr, graph_seed) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = &outputs.dir {
                        let meta = CheckpointMeta::new(step, epoch, echo);
                        save_checkpoint(&model, &meta, dir.join("last_good"))?;
                    }
                    return Err(e);
                }
            };
            step += 1;
            log::debug!("step {step}: {}", report.csv_row(step));
            history.push(report);
            if config.eval_every > 0 && step.is_multiple_of(config.eval_every) {
                validate(&model, step, epoch, &mut evals)?;
            }
        }
        epoch_done = epoch + 1;
        if config.eval_every == 0 {
            validate(&model, step, epoch_done, &mut evals)?;
        }
    }

    let (model, model_step, model_epoch) = match best {
        Some((_, m, s, e)) => (m, s, e),
        None => (model, step, epoch_done),
    };
    let outcome = TrainOutcome {
        model,
        history,
        evals,
        steps: step,
        model_step,
        model_epoch,
    };
    if let Some(dir) = &outputs.dir {
        write_text(&dir.join("train_log.csv"), &outcome.history_csv())?;
        write_text(&dir.join("eval_log.csv"), &outcome.evals_csv())?;
        let meta = CheckpointMeta::new(model_step, model_epoch, echo);
        save_checkpoint(&outcome.model, &meta, dir.join("checkpoint"))?;
    }
    Ok(outcome)
}

/// Trains a fresh model from `model_config` without validation-based
/// selection and scores the final model on `test_set`.
pub fn train_and_evaluate(
    model_config: &crate::model::ModelConfig,
    config: &TrainConfig,
    train_set: &LoadedSet,
    test_set: &LoadedSet,
    score_scale: ScoreScale,
) -> Result<(TrainOutcome, MetricReport)> {
    let model = Model::new(model_config)?;
    let outcome = train(config, model, train_set, None, score_scale)?;
    let report = evaluate_set(&outcome.model, test_set, config.eval_patches, config.patch_size, config.seed)?;
    Ok((outcome, report))
}

/// One optimization step. Parameters are only changed when the loss and every
/// gradient are finite.
#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &TrainConfig,
    w: &LossWeights,
    model: &mut Model,
    adam: &mut Adam,
    patches: &Tensor<f32>,
    transformed: Option<Tensor<f32>>,
    targets: &[f64],
    lr: f64,
    graph_seed: u64,
) -> Result<LossReport> {
    let mut g = Graph::new(Mode::Train, graph_seed);
    let x = g.constant(patches.clone());
    let out = model.forward(&mut g, x)?;
    let q = out.head.q;
    let quality = quality_loss_var(&mut g, q, targets, config.loss_norm)?;
    let rank_b = ranking_loss_var(&mut g, q, targets)?;

    let consistency = match transformed {
        Some(tb) => {
            let xt = g.constant(tb);
            let out_t = model.forward(&mut g, xt)?;
            let rank_t = ranking_loss_var(&mut g, out_t.head.q, targets)?;
            let (a, b) = (out.head, out_t.head);
            let mut branches = Vec::new();
            match config.consistency_on {
                ConsistencyOn::Scalar => {
                    branches.push(BranchPair { original: a.conv_logit, transformed: b.conv_logit });
                    if let (Some(x), Some(y)) = (a.atten_logit, b.atten_logit) {
                        branches.push(BranchPair { original: x, transformed: y });
                    }
                }
                ConsistencyOn::Vector => {
                    branches.push(BranchPair { original: a.conv_pooled, transformed: b.conv_pooled });
                    if let (Some(x), Some(y)) = (a.atten_pooled, b.atten_pooled) {
                        branches.push(BranchPair { original: x, transformed: y });
                    }
                }
            }
            let rr = match (&rank_b, &rank_t) {
                (Some(rb), Some(rt)) => Some((rb.loss, rt.loss)),
                _ => None,
            };
            Some(self_consistency_var(&mut g, &branches, rr, w.lambda1, config.loss_norm)?)
        }
        None => None,
    };
    let total = total_loss_var(&mut g, quality, rank_b.as_ref().map(|r| r.loss), consistency, w)?;
    let scalar = |g: &Graph<f32>, v| g.value(v).data()[0] as f64;
    let report = LossReport::new(
        scalar(&g, quality),
        rank_b.as_ref().map_or(0.0, |r| scalar(&g, r.loss)),
        consistency.map_or(0.0, |c| scalar(&g, c)),
        w,
        rank_b.as_ref(),
    );
    if !report.total.is_finite() || !scalar(&g, total).is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is not finite (quality {}, ranking {}, consistency {})",
            report.quality, report.ranking, report.consistency
        )));
    }
    let grads = g.backward(total)?;
    model.store.zero_grad();
    g.accumulate_param_grads(&grads, &mut model.store);
    adam.step(&mut model.store, lr)?;
    g.apply_stat_updates(&mut model.store);
    Ok(report)
}
