//! Detection metrics: greedy matching, average precision, mAP and
//! class-agnostic coverage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, OrientedBox3D};
use crate::pseudo_label::Detection;
use crate::synth::LabeledBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    #[default]
    Objectness,
    /// Objectness times predicted IoU.
    #[serde(rename = "s-v")]
    SV,
}

impl ScoreKind {
    pub fn score(self, d: &Detection) -> f64 {
        match self {
            ScoreKind::Objectness => d.objectness,
            ScoreKind::SV => d.joint_score(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ApMode {
    /// Area under the interpolated precision envelope.
    AllPoint,
    /// Mean interpolated precision at recall `1/R, 2/R, ..., 1`.
    RPoint(usize),
}

impl ApMode {
    pub fn label(self) -> String {
        match self {
            ApMode::AllPoint => "all".into(),
            ApMode::RPoint(r) => format!("r{r}"),
        }
    }
}

impl From<ApMode> for String {
    fn from(m: ApMode) -> String {
        m.label()
    }
}

impl TryFrom<String> for ApMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ApMode::AllPoint);
        }
        s.strip_prefix('r')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| *n > 0)
            .map(ApMode::RPoint)
            .ok_or_else(|| Error::Config(format!("unknown AP mode {s:?} (expected all or rN)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    pub scene: usize,
    pub index: usize,
    pub class_id: usize,
    pub score: f64,
    /// Index of the matched gt within its scene.
    pub gt: Option<usize>,
}

impl MatchOutcome {
    pub fn is_tp(&self) -> bool {
        self.gt.is_some()
    }
}

/// Per-class greedy matching. Returns, for each class in `0..n_classes`,
/// the outcomes of that class's predictions in descending score order
/// (ties: scene, then index).
pub fn match_detections(
    preds: &[Vec<Detection>],
    gts: &[Vec<LabeledBox>],
    n_classes: usize,
    iou_thresh: f64,
    score: ScoreKind,
) -> Result<Vec<Vec<MatchOutcome>>> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction scenes vs {} ground-truth scenes",
            preds.len(),
            gts.len()
        )));
    }
    let mut by_class: Vec<Vec<MatchOutcome>> = vec![Vec::new(); n_classes];
    for (si, ps) in preds.iter().enumerate() {
        for (pi, d) in ps.iter().enumerate() {
            let c = d.class_id();
            let slot = by_class.get_mut(c).ok_or(Error::ClassOutOfRange {
                class: c,
                n_classes,
            })?;
            slot.push(MatchOutcome {
                scene: si,
                index: pi,
                class_id: c,
                score: score.score(d),
                gt: None,
            });
        }
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    for (c, outcomes) in by_class.iter_mut().enumerate() {
        outcomes.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.scene.cmp(&b.scene))
                .then(a.index.cmp(&b.index))
        });
        for o in outcomes.iter_mut() {
            let pred = &preds[o.scene][o.index].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[o.scene].iter().enumerate() {
                if g.class_id != c || used[o.scene][gi] {
                    continue;
                }
                let iou = iou3d(pred, &g.bbox);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                used[o.scene][gi] = true;
                o.gt = Some(gi);
            }
        }
    }
    Ok(by_class)
}

/// `(recall, precision)` after each ranked prediction.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, t) in tp.iter().enumerate() {
        hits += usize::from(*t);
        let recall = if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 };
        out.push((recall, hits as f64 / (i + 1) as f64));
    }
    out
}

/// AP from TP flags in ranked order. Zero when `n_gt == 0`.
pub fn average_precision(tp: &[bool], n_gt: usize, mode: ApMode) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let curve = pr_curve(tp, n_gt);
    // envelope[i] = max precision at rank >= i
    let mut envelope: Vec<f64> = curve.iter().map(|(_, p)| *p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match mode {
        ApMode::AllPoint => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (i, (r, _)) in curve.iter().enumerate() {
                if *r > prev {
                    ap += (r - prev) * envelope[i];
                    prev = *r;
                }
            }
            ap
        }
        ApMode::RPoint(r_count) => {
            // Integer comparison hits/n_gt >= k/R avoids rounding at the
            // recall positions.
            let mut hits_at = Vec::with_capacity(tp.len());
            let mut hits = 0usize;
            for t in tp {
                hits += usize::from(*t);
                hits_at.push(hits);
            }
            let mut sum = 0.0;
            let mut i = 0;
            for k in 1..=r_count {
                while i < hits_at.len() && hits_at[i] * r_count < k * n_gt {
                    i += 1;
                }
                if i == hits_at.len() {
                    break;
                }
                sum += envelope[i];
            }
            sum / r_count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub name: Option<String>,
    pub n_gt: usize,
    pub n_pred: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub mode: String,
    pub score: ScoreKind,
    pub per_class: Vec<ClassAp>,
    /// Mean AP over classes with at least one gt instance.
    pub map: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coverage: Option<f64>,
    #[serde(skip)]
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub n_classes: usize,
    pub mode: ApMode,
    pub score: ScoreKind,
    pub class_names: Option<Vec<String>>,
}

impl EvalOptions {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            mode: ApMode::AllPoint,
            score: ScoreKind::Objectness,
            class_names: None,
        }
    }
}

pub fn evaluate(
    preds: &[Vec<Detection>],
    gts: &[Vec<LabeledBox>],
    threshold: f64,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let matches = match_detections(preds, gts, opts.n_classes, threshold, opts.score)?;
    let mut per_class = Vec::with_capacity(opts.n_classes);
    let mut pr_curves = Vec::with_capacity(opts.n_classes);
    let (mut sum, mut counted) = (0.0, 0usize);
    for (c, outcomes) in matches.iter().enumerate() {
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == c).count();
        let tp: Vec<bool> = outcomes.iter().map(MatchOutcome::is_tp).collect();
        let ap = average_precision(&tp, n_gt, opts.mode);
        if n_gt > 0 {
            sum += ap;
            counted += 1;
        }
        pr_curves.push(pr_curve(&tp, n_gt));
        per_class.push(ClassAp {
            class_id: c,
            name: opts.class_names.as_ref().and_then(|n| n.get(c).cloned()),
            n_gt,
            n_pred: outcomes.len(),
            ap,
        });
    }
    Ok(EvalReport {
        threshold,
        mode: opts.mode.label(),
        score: opts.score,
        per_class,
        map: if counted == 0 { 0.0 } else { sum / counted as f64 },
        coverage: None,
        pr_curves,
    })
}

/// One report per threshold.
pub fn map_at(
    preds: &[Vec<Detection>],
    gts: &[Vec<LabeledBox>],
    thresholds: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    thresholds
        .iter()
        .map(|t| evaluate(preds, gts, *t, opts))
        .collect()
}

/// Fraction of gt boxes (all scenes, all classes) with at least one
/// same-scene pseudo box at IoU >= `iou_thresh`. Zero when there are no gts.
pub fn coverage(pseudo: &[Vec<OrientedBox3D>], gts: &[Vec<OrientedBox3D>], iou_thresh: f64) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (si, g) in gts.iter().enumerate() {
        let ps = pseudo.get(si).map(Vec::as_slice).unwrap_or(&[]);
        for gb in g {
            total += 1;
            if ps.iter().any(|p| iou3d(p, gb) >= iou_thresh) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Predictions for a set of scenes, keyed by scene id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub scenes: Vec<ScenePredictions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePredictions {
    pub scene_id: String,
    pub detections: Vec<Detection>,
}

/// `class,recall,precision` rows for every class curve in `report`.
pub fn write_pr_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("class,recall,precision\n");
    for (c, curve) in report.pr_curves.iter().enumerate() {
        for (r, p) in curve {
            text.push_str(&format!("{c},{r},{p}\n"));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
