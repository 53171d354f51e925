//! Teacher detections to pseudo-labels: confidence filtering, suppression,
//! transformation into the student frame, and anchor association.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, iou3d, point_box_distance, OrientedBox3D, Transform3D, Vec3};

/// Default suppression threshold, shared by test-time NMS and train-time LHS.
pub const DEFAULT_SUPPRESS_IOU: f64 = 0.25;
/// Default anchor-to-pseudo-box distance for selective supervision (m).
pub const DEFAULT_ASSOC_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    pub pred_iou: f64,
    pub anchor: Vec3,
}

impl Detection {
    /// Argmax of the class distribution; ties go to the lower class id.
    pub fn class_id(&self) -> usize {
        argmax(&self.class_probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.class_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `s * v`.
    pub fn joint_score(&self) -> f64 {
        self.objectness * self.pred_iou
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.objectness) || !unit(self.pred_iou) {
            return Err(Error::Config(format!(
                "objectness {} / pred_iou {} outside [0, 1]",
                self.objectness, self.pred_iou
            )));
        }
        if self.class_probs.is_empty() || self.class_probs.iter().any(|p| p.is_nan() || *p < 0.0) {
            return Err(Error::Config("class_probs must be non-empty and non-negative".into()));
        }
        let sum: f64 = self.class_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("class_probs sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// IoU gate: one threshold for every class, or one per class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IouThreshold {
    Global(f64),
    PerClass(Vec<f64>),
}

impl IouThreshold {
    pub fn for_class(&self, class_id: usize) -> Result<f64> {
        match self {
            IouThreshold::Global(t) => Ok(*t),
            IouThreshold::PerClass(ts) => ts.get(class_id).copied().ok_or(Error::ClassOutOfRange {
                class: class_id,
                n_classes: ts.len(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub tau_obj: f64,
    pub tau_cls: f64,
    pub tau_iou: IouThreshold,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            tau_obj: 0.9,
            tau_cls: 0.9,
            tau_iou: IouThreshold::Global(0.25),
        }
    }
}

impl ThresholdConfig {
    /// Outdoor setting: per-class IoU gates for (car, pedestrian, cyclist).
    pub fn kitti() -> Self {
        Self {
            tau_iou: IouThreshold::PerClass(vec![0.5, 0.25, 0.25]),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.tau_obj, self.tau_cls];
        match &self.tau_iou {
            IouThreshold::Global(t) => all.push(*t),
            IouThreshold::PerClass(ts) => all.extend(ts),
        }
        if let Some(bad) = all.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("threshold {bad} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Indices of detections passing all three gates (strict comparisons).
pub fn filter_indices(dets: &[Detection], th: &ThresholdConfig) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        let tau_iou = th.tau_iou.for_class(d.class_id())?;
        if d.objectness > th.tau_obj && d.max_prob() > th.tau_cls && d.pred_iou > tau_iou {
            keep.push(i);
        }
    }
    Ok(keep)
}

pub fn filter_detections(dets: &[Detection], th: &ThresholdConfig) -> Result<Vec<Detection>> {
    Ok(filter_indices(dets, th)?
        .into_iter()
        .map(|i| dets[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuppressMode {
    ObjNms,
    IouNms,
    IouLhs,
}

impl SuppressMode {
    fn score(self, d: &Detection) -> f64 {
        match self {
            SuppressMode::ObjNms => d.objectness,
            SuppressMode::IouNms | SuppressMode::IouLhs => d.joint_score(),
        }
    }
}

/// Greedy class-aware clusters. Each cluster lists member indices in rank
/// order; its first entry is the seed.
pub fn clusters(dets: &[Detection], mode: SuppressMode, iou_thresh: f64) -> Vec<Vec<usize>> {
    let order = rank(dets, |d| mode.score(d));
    let classes: Vec<usize> = dets.iter().map(Detection::class_id).collect();
    let mut taken = vec![false; dets.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        let mut members = vec![i];
        for &j in &order[pos + 1..] {
            if !taken[j] && classes[j] == classes[i] && iou3d(&dets[i].bbox, &dets[j].bbox) >= iou_thresh {
                taken[j] = true;
                members.push(j);
            }
        }
        out.push(members);
    }
    out
}

/// Indices sorted by descending score, ties by lower index.
fn rank(dets: &[Detection], score: impl Fn(&Detection) -> f64) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(score).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Surviving indices in ascending order.
pub fn suppress_indices(dets: &[Detection], mode: SuppressMode, iou_thresh: f64) -> Vec<usize> {
    let mut keep = Vec::new();
    for c in clusters(dets, mode, iou_thresh) {
        match mode {
            SuppressMode::ObjNms | SuppressMode::IouNms => keep.push(c[0]),
            // Members are already ranked by s * v.
            SuppressMode::IouLhs => keep.extend_from_slice(&c[..c.len().div_ceil(2)]),
        }
    }
    keep.sort_unstable();
    keep
}

pub fn suppress(dets: &[Detection], mode: SuppressMode, iou_thresh: f64) -> Vec<Detection> {
    suppress_indices(dets, mode, iou_thresh)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
    pub class_id: usize,
    pub score: f64,
}

pub fn finalize_pseudo_labels(kept: &[Detection], t: &Transform3D) -> Vec<PseudoLabel> {
    kept.iter()
        .map(|d| PseudoLabel {
            bbox: apply_transform(&d.bbox, t),
            class_id: d.class_id(),
            score: d.joint_score(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub pseudo: usize,
    pub distance: f64,
}

/// For each anchor, the nearest pseudo box within `radius` (ties: lower
/// index), or `None` when the anchor gets no unsupervised signal.
pub fn associate_anchors(anchors: &[Vec3], pseudo: &[PseudoLabel], radius: f64) -> Vec<Option<Association>> {
    anchors
        .iter()
        .map(|a| {
            let mut best: Option<Association> = None;
            for (k, p) in pseudo.iter().enumerate() {
                let d = point_box_distance(*a, &p.bbox);
                if d <= radius && best.is_none_or(|b| d < b.distance) {
                    best = Some(Association { pseudo: k, distance: d });
                }
            }
            best
        })
        .collect()
}

pub fn associate_for_supervision(
    dets: &[Detection],
    pseudo: &[PseudoLabel],
    radius: f64,
) -> Vec<Option<Association>> {
    let anchors: Vec<Vec3> = dets.iter().map(|d| d.anchor).collect();
    associate_anchors(&anchors, pseudo, radius)
}
