//! Supervised and pseudo-label losses for the toy detector, with gradients
//! with respect to the raw head outputs and the IoU head parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{decode_raw, DetectorTrace, Model, OUT_CENTER, OUT_CLASS, OUT_HEADING, OUT_OBJECTNESS, OUT_SIZE};
use crate::error::Result;
use crate::geometry::{point_box_distance, OrientedBox3D, Vec3};
use crate::grid_pool::Seeds;
use crate::iou_head::{best_iou, jitter_box, select_class_iou, JitterConfig};
use crate::nn::{log_sum_exp, sigmoid, smooth_l1, softmax, softplus};
use crate::pseudo_label::{Association, PseudoLabel};
use crate::synth::{LabeledBox, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub center: f64,
    pub size: f64,
    pub heading: f64,
    pub class: f64,
    pub objectness: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            center: 1.0,
            size: 1.0,
            heading: 1.0,
            class: 1.0,
            objectness: 1.0,
            iou: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedLossConfig {
    pub weights: LossWeights,
    /// Anchors within this distance of a gt box are positives.
    pub pos_radius: f64,
    /// Anchors farther than this from every gt box are objectness negatives.
    pub neg_radius: f64,
    /// Positive predictions fed to the IoU loss per scene.
    pub max_iou_proposals: usize,
    /// Extra jittered gt boxes per gt for the IoU loss.
    pub gt_jitters: usize,
    pub jitter: JitterConfig,
}

impl Default for SupervisedLossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            pos_radius: 0.3,
            neg_radius: 0.6,
            max_iou_proposals: 16,
            gt_jitters: 2,
            jitter: JitterConfig::default(),
        }
    }
}

/// Weighted loss terms of one scene; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub center: f64,
    pub size: f64,
    pub heading: f64,
    pub class: f64,
    pub objectness: f64,
    pub iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.center + self.size + self.heading + self.class + self.objectness + self.iou;
        self
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.center += s * other.center;
        self.size += s * other.size;
        self.heading += s * other.heading;
        self.class += s * other.class;
        self.objectness += s * other.objectness;
        self.iou += s * other.iou;
        self.total += s * other.total;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Index of the nearest gt box.
    Positive(usize),
    Negative,
    Ignore,
}

/// Positive if within `pos_radius` of some gt (nearest wins, ties lower
/// index), negative if farther than `neg_radius` from all of them.
pub fn assign_anchors(anchors: &[Vec3], gts: &[LabeledBox], pos_radius: f64, neg_radius: f64) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                let d = point_box_distance(*a, &g.bbox);
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((i, d));
                }
            }
            match best {
                Some((i, d)) if d <= pos_radius => AnchorLabel::Positive(i),
                Some((_, d)) if d <= neg_radius => AnchorLabel::Ignore,
                _ => AnchorLabel::Negative,
            }
        })
        .collect()
}

/// Box and class regression toward `target` for one anchor. Adds
/// `scale`-weighted gradients into `d` and returns the unscaled weighted
/// terms.
fn regression_terms(
    raw: &[f64],
    anchor: Vec3,
    target: &OrientedBox3D,
    class_id: usize,
    w: &LossWeights,
    scale: f64,
    d: &mut [f64],
) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    let c = target.center();
    let s = target.size();
    for a in 0..3 {
        let (v, g) = smooth_l1(anchor[a] + raw[OUT_CENTER + a] - c[a]);
        out.center += w.center * v;
        d[OUT_CENTER + a] += scale * w.center * g;
        let r = raw[OUT_SIZE + a];
        let pred = decode_size(r);
        let (v, g) = smooth_l1(pred - s[a]);
        out.size += w.size * v;
        d[OUT_SIZE + a] += scale * w.size * g * sigmoid(r);
    }
    let (ct, st) = (target.yaw().cos(), target.yaw().sin());
    let dc = raw[OUT_HEADING] - ct;
    let ds = raw[OUT_HEADING + 1] - st;
    out.heading = w.heading * (dc * dc + ds * ds);
    d[OUT_HEADING] += scale * w.heading * 2.0 * dc;
    d[OUT_HEADING + 1] += scale * w.heading * 2.0 * ds;
    let logits = &raw[OUT_CLASS..];
    out.class = w.class * (log_sum_exp(logits) - logits[class_id]);
    for (j, p) in softmax(logits).iter().enumerate() {
        let y = if j == class_id { 1.0 } else { 0.0 };
        d[OUT_CLASS + j] += scale * w.class * (p - y);
    }
    out
}

fn decode_size(raw: f64) -> f64 {
    softplus(raw) + crate::detector::MIN_PRED_SIZE
}

/// Per-anchor gradient buffers, allocated lazily.
pub struct RawGrad {
    pub d_raw: Vec<Vec<f64>>,
    out_dim: usize,
}

impl RawGrad {
    pub fn new(n_anchors: usize, out_dim: usize) -> Self {
        Self {
            d_raw: vec![Vec::new(); n_anchors],
            out_dim,
        }
    }

    fn at(&mut self, k: usize) -> &mut [f64] {
        if self.d_raw[k].is_empty() {
            self.d_raw[k] = vec![0.0; self.out_dim];
        }
        &mut self.d_raw[k]
    }
}

/// Supervised loss for one labeled scene. Detector gradients (times
/// `scale`) go into `raw_grad`; IoU-head gradients go straight into
/// `param_grad`. The IoU loss sees detached boxes: positive predictions
/// (up to `max_iou_proposals`) plus `gt_jitters` jittered copies of each gt.
#[allow(clippy::too_many_arguments)]
pub fn supervised_loss(
    model: &Model,
    params: &[f64],
    trace: &DetectorTrace,
    scene: &SceneSample,
    cfg: &SupervisedLossConfig,
    scale: f64,
    rng: &mut impl Rng,
    raw_grad: Option<&mut RawGrad>,
    param_grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let gts: &[LabeledBox] = scene.labels.as_deref().unwrap_or(&[]);
    let w = &cfg.weights;
    let labels = assign_anchors(&trace.anchors, gts, cfg.pos_radius, cfg.neg_radius);
    let n_pos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count();
    let n_obj = labels.iter().filter(|l| !matches!(l, AnchorLabel::Ignore)).count();
    let mut scratch = RawGrad::new(trace.len(), model.config.out_dim());
    let rg = match raw_grad {
        Some(g) => g,
        None => &mut scratch,
    };
    let mut out = LossBreakdown::default();
    let mut positives = Vec::new();
    for (k, label) in labels.iter().enumerate() {
        let raw = trace.raw(k);
        let y = match label {
            AnchorLabel::Positive(gi) => {
                positives.push((k, *gi));
                let g = &gts[*gi];
                let inv = 1.0 / n_pos as f64;
                let t = regression_terms(raw, trace.anchors[k], &g.bbox, g.class_id, w, scale * inv, rg.at(k));
                out.add_scaled(&t, inv);
                1.0
            }
            AnchorLabel::Negative => 0.0,
            AnchorLabel::Ignore => continue,
        };
        let x = raw[OUT_OBJECTNESS];
        let inv = 1.0 / n_obj as f64;
        out.objectness += inv * w.objectness * (softplus(x) - y * x);
        rg.at(k)[OUT_OBJECTNESS] += scale * inv * w.objectness * (sigmoid(x) - y);
    }

    let mut boxes: Vec<(OrientedBox3D, usize)> = Vec::new();
    let stride = positives.len().div_ceil(cfg.max_iou_proposals.max(1)).max(1);
    for &(k, gi) in positives.iter().step_by(stride).take(cfg.max_iou_proposals) {
        boxes.push((decode_raw(trace.raw(k), trace.anchors[k]).bbox, gts[gi].class_id));
    }
    for g in gts {
        for _ in 0..cfg.gt_jitters {
            boxes.push((jitter_box(&g.bbox, &cfg.jitter, rng), g.class_id));
        }
    }
    if !boxes.is_empty() && w.iou != 0.0 {
        let seeds = Seeds::from_scene(scene);
        let inv = 1.0 / boxes.len() as f64;
        let mut pg = param_grad;
        for (b, class_id) in &boxes {
            let target = best_iou(b, gts);
            let pool = model.iou.pool(b, &seeds)?;
            let t = model.iou.forward_traced(&pool, params)?;
            let v = select_class_iou(&t.outputs, *class_id)?;
            out.iou += inv * w.iou * (v - target).abs();
            if let Some(g) = pg.as_deref_mut() {
                let diff = v - target;
                if diff != 0.0 {
                    let mut d = vec![0.0; model.config.n_classes];
                    d[*class_id] = scale * inv * w.iou * diff.signum();
                    model.iou.backward(&t, params, &d, Some(g), false);
                }
            }
        }
    }
    Ok(out.finish())
}

/// Pseudo-label loss: box and class terms for associated anchors only, no
/// objectness or anchor-position term. Zero when nothing is associated.
pub fn unsupervised_loss(
    trace: &DetectorTrace,
    pseudo: &[PseudoLabel],
    assoc: &[Option<Association>],
    weights: &LossWeights,
    scale: f64,
    raw_grad: Option<&mut RawGrad>,
) -> LossBreakdown {
    let n = assoc.iter().flatten().count();
    let mut out = LossBreakdown::default();
    if n == 0 {
        return out;
    }
    let inv = 1.0 / n as f64;
    let mut scratch = RawGrad::new(trace.len(), trace.raw(0).len());
    let rg = raw_grad.unwrap_or(&mut scratch);
    for (k, a) in assoc.iter().enumerate() {
        let Some(a) = a else { continue };
        let p = &pseudo[a.pseudo];
        let d = rg.at(k);
        let t = regression_terms(trace.raw(k), trace.anchors[k], &p.bbox, p.class_id, weights, scale * inv, d);
        out.add_scaled(&t, inv);
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, Model};
    use crate::params::ParamVector;
    use crate::synth::{generate_scene, GeneratorParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model, ParamVector, SceneSample) {
        let gp = GeneratorParams::default();
        let (m, mut p) = Model::new(DetectorConfig::new(gp.feature_dim, gp.n_classes())).unwrap();
        m.init_params(&mut p, 4);
        (m, p, generate_scene(6, &gp).unwrap())
    }

    #[test]
    fn anchor_assignment() {
        let g = LabeledBox {
            bbox: OrientedBox3D::new([0.0; 3], [2.0; 3], 0.0).unwrap(),
            class_id: 0,
        };
        let labels = assign_anchors(
            &[[0.0; 3], [1.2, 0.0, 0.0], [1.5, 0.0, 0.0], [2.0, 0.0, 0.0]],
            &[g],
            0.3,
            0.6,
        );
        assert_eq!(
            labels,
            vec![
                AnchorLabel::Positive(0),
                AnchorLabel::Positive(0),
                AnchorLabel::Ignore,
                AnchorLabel::Negative
            ]
        );
        assert_eq!(assign_anchors(&[[0.0; 3]], &[], 0.3, 0.6), vec![AnchorLabel::Negative]);
    }

    #[test]
    fn exact_regression_has_zero_box_terms() {
        let b = OrientedBox3D::new([1.0, 0.5, 0.4], [0.6, 0.5, 0.8], 0.7).unwrap();
        let anchor = [0.8, 0.4, 0.3];
        let mut raw = vec![0.0; 12];
        for a in 0..3 {
            raw[OUT_CENTER + a] = b.center()[a] - anchor[a];
            // inverse softplus
            let s = b.size()[a] - crate::detector::MIN_PRED_SIZE;
            raw[OUT_SIZE + a] = s.exp_m1().ln();
        }
        raw[OUT_HEADING] = b.yaw().cos();
        raw[OUT_HEADING + 1] = b.yaw().sin();
        raw[OUT_CLASS + 1] = 60.0;
        let mut d = vec![0.0; 12];
        let t = regression_terms(&raw, anchor, &b, 1, &LossWeights::default(), 1.0, &mut d);
        assert!(t.center.abs() < 1e-24 && t.size < 1e-24 && t.heading < 1e-24);
        assert!(t.class < 1e-24);
    }

    #[test]
    fn weights_are_linear() {
        let (m, p, s) = setup();
        let trace = m.forward(&p.data, &s).unwrap();
        let base = SupervisedLossConfig::default();
        let double = SupervisedLossConfig {
            weights: LossWeights {
                size: 2.0,
                ..LossWeights::default()
            },
            ..base.clone()
        };
        let l1 = supervised_loss(&m, &p.data, &trace, &s, &base, 1.0, &mut ChaCha8Rng::seed_from_u64(0), None, None).unwrap();
        let l2 = supervised_loss(&m, &p.data, &trace, &s, &double, 1.0, &mut ChaCha8Rng::seed_from_u64(0), None, None).unwrap();
        assert!((l2.size - 2.0 * l1.size).abs() < 1e-12);
        assert_eq!(l1.center, l2.center);
        assert!(l1.total.is_finite() && l1.iou > 0.0);
    }

    #[test]
    fn unsupervised_skips_objectness() {
        let (m, p, s) = setup();
        let trace = m.forward(&p.data, &s).unwrap();
        let zero = unsupervised_loss(&trace, &[], &vec![None; trace.len()], &LossWeights::default(), 1.0, None);
        assert_eq!(zero, LossBreakdown::default());
        let pseudo = vec![PseudoLabel {
            bbox: s.labels.as_ref().unwrap()[0].bbox,
            class_id: 0,
            score: 1.0,
        }];
        let assoc = crate::pseudo_label::associate_anchors(&trace.anchors, &pseudo, 0.3);
        assert!(assoc.iter().any(Option::is_some));
        let mut rg = RawGrad::new(trace.len(), m.config.out_dim());
        let l = unsupervised_loss(&trace, &pseudo, &assoc, &LossWeights::default(), 1.0, Some(&mut rg));
        assert!(l.total > 0.0);
        assert_eq!(l.objectness, 0.0);
        for d in rg.d_raw.iter().filter(|d| !d.is_empty()) {
            assert_eq!(d[OUT_OBJECTNESS], 0.0);
        }
    }
}
