//! Two-stage training: supervised pre-training on the labeled scenes, then
//! mean-teacher semi-supervised training where an EMA teacher labels weakly
//! augmented unlabeled scenes for a student that sees strongly augmented
//! copies.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, sample_transform, transform_scene, AugmentConfig, Strength};
use crate::detector::{Model, DetectorConfig};
use crate::error::{parse_json, Error, Result};
use crate::eval::{coverage, map_at, EvalOptions};
use crate::geometry::OrientedBox3D;
use crate::grid_pool::Seeds;
use crate::iou_head::{best_iou, iou_optimize, IouOptimConfig};
use crate::losses::{supervised_loss, unsupervised_loss, LossBreakdown, RawGrad, SupervisedLossConfig};
use crate::nn::Adam;
use crate::params::ParamVector;
use crate::pseudo_label::{
    associate_anchors, filter_detections, finalize_pseudo_labels, suppress, Detection, SuppressMode, ThresholdConfig,
    DEFAULT_ASSOC_RADIUS, DEFAULT_SUPPRESS_IOU,
};
use crate::seed::{derive_seed, rng_for};
use crate::synth::{LabeledBox, SceneSample};

/// `teacher <- alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update(teacher: &mut ParamVector, student: &ParamVector, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA decay {alpha} outside [0, 1]")));
    }
    teacher.check_layout(student)?;
    for (t, s) in teacher.data.iter_mut().zip(&student.data) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub suppress: SuppressMode,
    pub iou_thresh: f64,
    /// Detections below this objectness are dropped before suppression.
    pub min_objectness: f64,
    pub optimize: bool,
    pub optim: IouOptimConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            suppress: SuppressMode::IouNms,
            iou_thresh: DEFAULT_SUPPRESS_IOU,
            min_objectness: 0.05,
            optimize: true,
            optim: IouOptimConfig::default(),
        }
    }
}

/// Test-time pipeline: forward, objectness floor, suppression, then
/// optional IoU optimization of each kept box (its `pred_iou` is updated to
/// the final estimate).
pub fn predict(model: &Model, params: &[f64], scene: &SceneSample, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let trace = model.forward(params, scene)?;
    let floor = cfg.min_objectness;
    let dets: Vec<Detection> = model
        .decode(params, &trace, scene, |d| d.objectness >= floor)?
        .into_iter()
        .filter(|d| d.objectness >= floor)
        .collect();
    let mut kept = suppress(&dets, cfg.suppress, cfg.iou_thresh);
    if cfg.optimize && cfg.optim.steps > 0 {
        let seeds = Seeds::from_scene(scene);
        for d in &mut kept {
            let (b, trace) = iou_optimize(&d.bbox, &seeds, &model.iou, params, d.class_id(), cfg.optim.step, cfg.optim.steps)?;
            d.bbox = b;
            d.pred_iou = *trace.last().expect("trace is never empty");
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    pub thresholds: ThresholdConfig,
    pub suppress: SuppressMode,
    pub iou_thresh: f64,
    pub assoc_radius: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            thresholds: ThresholdConfig::default(),
            suppress: SuppressMode::IouLhs,
            iou_thresh: DEFAULT_SUPPRESS_IOU,
            assoc_radius: DEFAULT_ASSOC_RADIUS,
        }
    }
}

/// Teacher detections on `scene` (`pred_iou` only filled where the
/// objectness and class gates pass) and the filtered, suppressed subset.
pub fn teacher_detections(
    model: &Model,
    teacher: &[f64],
    scene: &SceneSample,
    cfg: &PseudoLabelConfig,
) -> Result<(Vec<Detection>, Vec<Detection>)> {
    let trace = model.forward(teacher, scene)?;
    let th = &cfg.thresholds;
    let all = model.decode(teacher, &trace, scene, |d| d.objectness > th.tau_obj && d.max_prob() > th.tau_cls)?;
    let filtered = filter_detections(&all, th)?;
    let kept = suppress(&filtered, cfg.suppress, cfg.iou_thresh);
    Ok((all, kept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub strength: Strength,
    pub loss: SupervisedLossConfig,
    /// Epoch spacing of metric snapshots taken by callers of
    /// [`pretrain_observed`].
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 4,
            augment: AugmentConfig::default(),
            strength: Strength::Strong,
            loss: SupervisedLossConfig::default(),
            eval_interval: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub params: ParamVector,
    pub optimizer: Adam,
    /// Mean total loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Supervised loss of one scene with gradients accumulated into `grad`.
fn labeled_step(
    model: &Model,
    params: &[f64],
    scene: &SceneSample,
    cfg: &SupervisedLossConfig,
    scale: f64,
    rng: &mut impl rand::Rng,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    let trace = model.forward(params, scene)?;
    let mut rg = RawGrad::new(trace.len(), model.config.out_dim());
    let loss = supervised_loss(model, params, &trace, scene, cfg, scale, rng, Some(&mut rg), Some(grad))?;
    model.backward(params, &trace, &rg.d_raw, grad);
    Ok(loss)
}

pub fn pretrain(model: &Model, labeled: &[SceneSample], cfg: &PretrainConfig) -> Result<PretrainOutput> {
    pretrain_observed(model, labeled, cfg, &mut |_, _, _| Ok(()))
}

/// [`pretrain`] calling `observer(epoch, params, mean_loss)` after every
/// epoch (1-based).
pub fn pretrain_observed(
    model: &Model,
    labeled: &[SceneSample],
    cfg: &PretrainConfig,
    observer: &mut dyn FnMut(usize, &ParamVector, f64) -> Result<()>,
) -> Result<PretrainOutput> {
    if labeled.is_empty() {
        return Err(Error::Empty("pretraining needs at least one labeled scene".into()));
    }
    cfg.augment.validate()?;
    if cfg.eval_interval == 0 {
        return Err(Error::Config("pretrain eval_interval must be >= 1".into()));
    }
    let (_, mut params) = Model::new(model.config.clone())?;
    model.init_params(&mut params, derive_seed(cfg.seed, "init", 0));
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "pretrain-epoch", epoch as u64));
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            let mut rng = rng_for(cfg.seed, "pretrain-step", step);
            step += 1;
            let mut grad = params.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (scene, _) = augment(&labeled[i], cfg.strength, &cfg.augment, &mut rng);
                let l = labeled_step(model, &params.data, &scene, &cfg.loss, scale, &mut rng, &mut grad)?;
                sum += l.total;
            }
            opt.update(&mut params.data, &grad);
        }
        let mean = sum / labeled.len() as f64;
        log::debug!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        history.push(mean);
        observer(epoch + 1, &params, mean)?;
    }
    Ok(PretrainOutput {
        params,
        optimizer: opt,
        loss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub lambda_u: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub ema_decay: f64,
    pub pseudo: PseudoLabelConfig,
    pub augment: AugmentConfig,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs (1-based) after which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub eval_interval: usize,
    pub loss: SupervisedLossConfig,
    pub inference: InferenceConfig,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            lambda_u: 2.0,
            n_labeled: 4,
            n_unlabeled: 8,
            ema_decay: 0.999,
            pseudo: PseudoLabelConfig::default(),
            augment: AugmentConfig::default(),
            epochs: 50,
            lr: 1e-3,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            eval_interval: 5,
            loss: SupervisedLossConfig::default(),
            inference: InferenceConfig::default(),
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return Err(Error::Config(format!("lambda_u must be >= 0, got {}", self.lambda_u)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.n_labeled == 0 || self.n_unlabeled == 0 {
            return Err(Error::Config("batch needs at least one labeled and one unlabeled scene".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        self.pseudo.thresholds.validate()?;
        self.augment.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.lr_decay_epochs.iter().filter(|e| **e < epoch).count();
        self.lr * self.lr_decay_factor.powi(n as i32)
    }
}

/// One row of the training metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub map_25: f64,
    pub map_50: f64,
    pub coverage_25: f64,
    pub coverage_50: f64,
    pub pseudo_count: usize,
    /// Mean best IoU of filtered pseudo-labels against hidden gt.
    pub pseudo_true_iou: f64,
    /// Same for every teacher detection before filtering.
    pub raw_true_iou: f64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,map_0.25,map_0.5,coverage_0.25,coverage_0.5,pseudo_count,pseudo_mean_true_iou";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.map_25, r.map_50, r.coverage_25, r.coverage_50, r.pseudo_count, r.pseudo_true_iou
        ));
    }
    s
}

/// Student mAP@0.25 and mAP@0.5 on `holdout`.
pub fn evaluate_model(model: &Model, params: &[f64], holdout: &[SceneSample], cfg: &InferenceConfig) -> Result<(f64, f64)> {
    if holdout.is_empty() {
        return Ok((0.0, 0.0));
    }
    let preds = holdout
        .iter()
        .map(|s| predict(model, params, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<LabeledBox>> = holdout.iter().map(|s| s.labels.clone().unwrap_or_default()).collect();
    let reports = map_at(&preds, &gts, &[0.25, 0.5], &EvalOptions::new(model.config.n_classes))?;
    Ok((reports[0].map, reports[1].map))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PseudoStats {
    pub coverage_25: f64,
    pub coverage_50: f64,
    pub count: usize,
    pub mean_true_iou: f64,
    pub raw_mean_true_iou: f64,
}

/// Teacher pseudo-labels on full (unaugmented) scenes scored against their
/// hidden ground truth.
pub fn pseudo_label_stats(
    model: &Model,
    teacher: &[f64],
    scenes: &[SceneSample],
    cfg: &PseudoLabelConfig,
) -> Result<PseudoStats> {
    let mut pseudo_boxes = Vec::with_capacity(scenes.len());
    let mut gt_boxes = Vec::with_capacity(scenes.len());
    let (mut kept_iou, mut kept_n, mut raw_iou, mut raw_n) = (0.0, 0usize, 0.0, 0usize);
    for s in scenes {
        let gts = s.labels.clone().unwrap_or_default();
        let (all, kept) = teacher_detections(model, teacher, &s.without_labels(), cfg)?;
        for d in &all {
            raw_iou += best_iou(&d.bbox, &gts);
            raw_n += 1;
        }
        for d in &kept {
            kept_iou += best_iou(&d.bbox, &gts);
            kept_n += 1;
        }
        pseudo_boxes.push(kept.iter().map(|d| d.bbox).collect::<Vec<OrientedBox3D>>());
        gt_boxes.push(gts.iter().map(|g| g.bbox).collect::<Vec<_>>());
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(PseudoStats {
        coverage_25: coverage(&pseudo_boxes, &gt_boxes, 0.25),
        coverage_50: coverage(&pseudo_boxes, &gt_boxes, 0.5),
        count: kept_n,
        mean_true_iou: mean(kept_iou, kept_n),
        raw_mean_true_iou: mean(raw_iou, raw_n),
    })
}

/// Scenes used by semi-supervised training. `unlabeled` keeps its hidden
/// ground truth for metrics only; training strips it.
#[derive(Debug, Clone, Copy)]
pub struct SslData<'a> {
    pub labeled: &'a [SceneSample],
    pub unlabeled: &'a [SceneSample],
    pub holdout: &'a [SceneSample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslState {
    pub epoch: usize,
    pub student: ParamVector,
    pub teacher: ParamVector,
    pub optimizer: Adam,
    pub metrics: Vec<EpochMetrics>,
}

/// Unsupervised loss of one unlabeled scene: teacher pseudo-labels on the
/// weak view, student loss on the strongly transformed view.
#[allow(clippy::too_many_arguments)]
fn unlabeled_step(
    model: &Model,
    student: &[f64],
    teacher: &[f64],
    scene: &SceneSample,
    cfg: &SslConfig,
    scale: f64,
    rng: &mut impl rand::Rng,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    let (weak, _) = augment(scene, Strength::Weak, &cfg.augment, rng);
    let (_, kept) = teacher_detections(model, teacher, &weak, &cfg.pseudo)?;
    let t = sample_transform(&cfg.augment, rng);
    let pseudo = finalize_pseudo_labels(&kept, &t);
    let strong = transform_scene(&weak, &t);
    let trace = model.forward(student, &strong)?;
    let assoc = associate_anchors(&trace.anchors, &pseudo, cfg.pseudo.assoc_radius);
    let mut rg = RawGrad::new(trace.len(), model.config.out_dim());
    let loss = unsupervised_loss(&trace, &pseudo, &assoc, &cfg.loss.weights, scale, Some(&mut rg));
    model.backward(student, &trace, &rg.d_raw, grad);
    Ok(loss)
}

/// Metrics row for a student/teacher pair: student mAP on the holdout and
/// teacher pseudo-label statistics on the unlabeled scenes.
pub fn snapshot_metrics(
    model: &Model,
    student: &[f64],
    teacher: &[f64],
    data: &SslData,
    cfg: &SslConfig,
    epoch: usize,
    losses: (f64, f64),
) -> Result<EpochMetrics> {
    let (map_25, map_50) = evaluate_model(model, student, data.holdout, &cfg.inference)?;
    let ps = pseudo_label_stats(model, teacher, data.unlabeled, &cfg.pseudo)?;
    Ok(EpochMetrics {
        epoch,
        map_25,
        map_50,
        coverage_25: ps.coverage_25,
        coverage_50: ps.coverage_50,
        pseudo_count: ps.count,
        pseudo_true_iou: ps.mean_true_iou,
        raw_true_iou: ps.raw_mean_true_iou,
        sup_loss: losses.0,
        unsup_loss: losses.1,
    })
}

fn epoch_metrics(model: &Model, state: &SslState, data: &SslData, cfg: &SslConfig, losses: (f64, f64)) -> Result<EpochMetrics> {
    snapshot_metrics(model, &state.student.data, &state.teacher.data, data, cfg, state.epoch, losses)
}

/// Semi-supervised training from `pretrained`. Metrics are recorded before
/// the first epoch (epoch 0), every `eval_interval` epochs and after the
/// last one; `observer` sees the state at each of those points.
pub fn ssl_train(
    model: &Model,
    pretrained: &ParamVector,
    data: SslData,
    cfg: &SslConfig,
    observer: &mut dyn FnMut(&SslState) -> Result<()>,
) -> Result<SslState> {
    cfg.validate()?;
    if data.labeled.is_empty() || data.unlabeled.is_empty() {
        return Err(Error::Empty("semi-supervised training needs labeled and unlabeled scenes".into()));
    }
    let (_, layout) = Model::new(model.config.clone())?;
    layout.check_layout(pretrained)?;
    let mut state = SslState {
        epoch: 0,
        student: pretrained.clone(),
        teacher: pretrained.clone(),
        optimizer: Adam::new(pretrained.len(), cfg.lr),
        metrics: Vec::new(),
    };
    let m = epoch_metrics(model, &state, &data, cfg, (0.0, 0.0))?;
    state.metrics.push(m);
    observer(&state)?;

    let unlabeled: Vec<SceneSample> = data.unlabeled.iter().map(SceneSample::without_labels).collect();
    let mut labeled_queue: Vec<usize> = Vec::new();
    let mut labeled_round = 0u64;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        state.optimizer.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..unlabeled.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, "ssl-epoch", epoch as u64));
        let (mut sup_sum, mut unsup_sum, mut n_steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.n_unlabeled) {
            let mut rng = rng_for(cfg.seed, "ssl-step", step);
            step += 1;
            let mut grad = state.student.zeros_like();
            let mut batch_l = Vec::with_capacity(cfg.n_labeled);
            while batch_l.len() < cfg.n_labeled {
                if labeled_queue.is_empty() {
                    labeled_queue = (0..data.labeled.len()).collect();
                    labeled_queue.shuffle(&mut rng_for(cfg.seed, "ssl-labeled", labeled_round));
                    labeled_queue.reverse();
                    labeled_round += 1;
                }
                batch_l.push(labeled_queue.pop().expect("queue refilled"));
            }
            let scale_l = 1.0 / batch_l.len() as f64;
            for &i in &batch_l {
                let (scene, _) = augment(&data.labeled[i], Strength::Strong, &cfg.augment, &mut rng);
                let l = labeled_step(model, &state.student.data, &scene, &cfg.loss, scale_l, &mut rng, &mut grad)?;
                sup_sum += scale_l * l.total;
            }
            let scale_u = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let l = unlabeled_step(
                    model,
                    &state.student.data,
                    &state.teacher.data,
                    &unlabeled[i],
                    cfg,
                    cfg.lambda_u * scale_u,
                    &mut rng,
                    &mut grad,
                )?;
                unsup_sum += scale_u * l.total;
            }
            state.optimizer.update(&mut state.student.data, &grad);
            ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
            n_steps += 1;
        }
        state.epoch = epoch;
        let losses = (sup_sum / n_steps as f64, unsup_sum / n_steps as f64);
        log::debug!("ssl epoch {epoch}: sup {:.4} unsup {:.4}", losses.0, losses.1);
        if epoch % cfg.eval_interval == 0 || epoch == cfg.epochs {
            let m = epoch_metrics(model, &state, &data, cfg, losses)?;
            log::info!(
                "epoch {epoch}: mAP@0.25 {:.4} mAP@0.5 {:.4} coverage@0.25 {:.4} pseudo {}",
                m.map_25,
                m.map_50,
                m.coverage_25,
                m.pseudo_count
            );
            state.metrics.push(m);
            observer(&state)?;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Ssl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub model: DetectorConfig,
    pub student: ParamVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<ParamVector>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parse and check that the parameter layouts match the model config.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let ck: Checkpoint = parse_json(text, context)?;
        let (_, layout) = Model::new(ck.model.clone())?;
        layout.check_layout(&ck.student)?;
        if let Some(t) = &ck.teacher {
            layout.check_layout(t)?;
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Parameters to run inference with: the teacher when present.
    pub fn inference_params(&self) -> &ParamVector {
        self.teacher.as_ref().unwrap_or(&self.student)
    }
}
