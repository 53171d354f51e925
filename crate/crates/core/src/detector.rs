//! Toy proposal network over synthetic scenes.
//!
//! Anchors are farthest-point samples of the scene. Each anchor gathers its
//! `R` nearest points, runs `[p - anchor; feature]` through a shared point
//! MLP, pools (max and mean), and a head MLP emits per anchor:
//!
//! | range            | meaning                           |
//! |------------------|-----------------------------------|
//! | `0..3`           | center offset from the anchor     |
//! | `3..6`           | raw size (softplus → metres)      |
//! | `6..8`           | heading as `(cos, sin)`           |
//! | `8`              | objectness logit                  |
//! | `9..9 + L`       | class logits                      |
//!
//! The IoU head shares the model's parameter vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist_sq, sub, OrientedBox3D, Vec3};
use crate::grid_pool::{k_nearest, Seeds};
use crate::iou_head::{IouHead, IouHeadConfig};
use crate::nn::{sigmoid, softmax, softplus, Mlp, MlpTrace};
use crate::params::{LayoutBuilder, ParamVector};
use crate::pseudo_label::Detection;
use crate::synth::SceneSample;

pub const OUT_CENTER: usize = 0;
pub const OUT_SIZE: usize = 3;
pub const OUT_HEADING: usize = 6;
pub const OUT_OBJECTNESS: usize = 8;
pub const OUT_CLASS: usize = 9;
/// Added to the softplus size so boxes stay valid when it underflows.
pub const MIN_PRED_SIZE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub n_anchors: usize,
    pub n_neighbors: usize,
    pub hidden: usize,
    pub iou: IouHeadConfig,
}

impl DetectorConfig {
    pub fn new(feature_dim: usize, n_classes: usize) -> Self {
        Self {
            feature_dim,
            n_classes,
            n_anchors: 48,
            n_neighbors: 16,
            hidden: 32,
            iou: IouHeadConfig::new(feature_dim, n_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_anchors == 0 || self.n_neighbors == 0 || self.hidden == 0 || self.n_classes == 0 {
            return Err(Error::Config(
                "n_anchors, n_neighbors, hidden and n_classes must be >= 1".into(),
            ));
        }
        if self.iou.feature_dim != self.feature_dim || self.iou.n_classes != self.n_classes {
            return Err(Error::Config("IoU head dimensions disagree with the detector".into()));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        OUT_CLASS + self.n_classes
    }
}

/// Detector plus IoU head architecture; weights live in a [`ParamVector`]
/// whose detector blocks start with `det.` and IoU-head blocks with `iou.`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: DetectorConfig,
    pub point_mlp: Mlp,
    pub head_mlp: Mlp,
    pub iou: IouHead,
}

impl Model {
    /// Architecture and a zero parameter vector with the matching layout.
    pub fn new(config: DetectorConfig) -> Result<(Self, ParamVector)> {
        config.validate()?;
        let mut b = LayoutBuilder::new();
        let h = config.hidden;
        let point_mlp = Mlp::new(&mut b, "det.point", &[config.feature_dim + 3, h, h], true);
        let head_mlp = Mlp::new(&mut b, "det.head", &[2 * h, h, config.out_dim()], false);
        let iou = IouHead::register(&mut b, "iou", config.iou.clone());
        Ok((
            Self {
                config,
                point_mlp,
                head_mlp,
                iou,
            },
            b.build(),
        ))
    }

    pub fn init_params(&self, params: &mut ParamVector, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.point_mlp.init(&mut params.data, &mut rng);
        self.head_mlp.init(&mut params.data, &mut rng);
        self.iou.init(&mut params.data, &mut rng);
    }

    pub fn min_points(&self) -> usize {
        self.config.n_anchors.max(self.config.n_neighbors)
    }

    /// Raw head outputs for every anchor, with everything needed for the
    /// backward pass.
    pub fn forward(&self, params: &[f64], scene: &SceneSample) -> Result<DetectorTrace> {
        let need = self.min_points();
        if scene.len() < need {
            return Err(Error::SceneTooSmall {
                needed: need,
                got: scene.len(),
            });
        }
        if scene.feature_dim() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "scene features have {} channels, detector expects {}",
                scene.feature_dim(),
                self.config.feature_dim
            )));
        }
        let anchor_ids = farthest_point_sample(&scene.points, self.config.n_anchors);
        let h = self.config.hidden;
        let r = self.config.n_neighbors;
        let mut anchors = Vec::with_capacity(anchor_ids.len());
        let mut point_traces = Vec::with_capacity(anchor_ids.len());
        let mut argmax = Vec::with_capacity(anchor_ids.len());
        let mut head_traces = Vec::with_capacity(anchor_ids.len());
        for &ai in &anchor_ids {
            let a = scene.points[ai];
            let nbrs = k_nearest(&scene.points, a, r);
            let mut pooled = vec![f64::NEG_INFINITY; 2 * h];
            pooled[h..].iter_mut().for_each(|v| *v = 0.0);
            let mut am = vec![0usize; h];
            let mut traces = Vec::with_capacity(r);
            for (j, &(i, _)) in nbrs.iter().enumerate() {
                let mut x = Vec::with_capacity(self.config.feature_dim + 3);
                x.extend_from_slice(&sub(scene.points[i], a));
                x.extend_from_slice(&scene.features[i]);
                let t = self.point_mlp.forward(params, &x);
                for (c, v) in t.output().iter().enumerate() {
                    if *v > pooled[c] {
                        pooled[c] = *v;
                        am[c] = j;
                    }
                    pooled[h + c] += v / r as f64;
                }
                traces.push(t);
            }
            head_traces.push(self.head_mlp.forward(params, &pooled));
            anchors.push(a);
            point_traces.push(traces);
            argmax.push(am);
        }
        Ok(DetectorTrace {
            anchor_ids,
            anchors,
            point_traces,
            argmax,
            head_traces,
        })
    }

    /// Accumulate parameter gradients for `d_raw` (one vector of
    /// `out_dim` per anchor; empty vectors are skipped).
    pub fn backward(&self, params: &[f64], trace: &DetectorTrace, d_raw: &[Vec<f64>], grad: &mut [f64]) {
        let h = self.config.hidden;
        for (k, d) in d_raw.iter().enumerate() {
            if d.is_empty() || d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut d_pooled = vec![0.0; 2 * h];
            self.head_mlp
                .backward(params, &trace.head_traces[k], d, Some(grad), Some(&mut d_pooled));
            let traces = &trace.point_traces[k];
            let inv_r = 1.0 / traces.len() as f64;
            let mut d_points = vec![vec![0.0; h]; traces.len()];
            for c in 0..h {
                d_points[trace.argmax[k][c]][c] += d_pooled[c];
                for dp in d_points.iter_mut() {
                    dp[c] += d_pooled[h + c] * inv_r;
                }
            }
            for (t, dp) in traces.iter().zip(&d_points) {
                self.point_mlp.backward(params, t, dp, Some(grad), None);
            }
        }
    }

    /// Decode raw outputs into detections. `pred_iou` is filled for
    /// detections where `want_iou` returns true and left at 0 otherwise.
    pub fn decode(
        &self,
        params: &[f64],
        trace: &DetectorTrace,
        scene: &SceneSample,
        want_iou: impl Fn(&Detection) -> bool,
    ) -> Result<Vec<Detection>> {
        let seeds = Seeds::from_scene(scene);
        let mut out = Vec::with_capacity(trace.len());
        for k in 0..trace.len() {
            let mut d = decode_raw(trace.raw(k), trace.anchors[k]);
            if want_iou(&d) {
                d.pred_iou = self.iou.estimate(params, &d.bbox, &seeds, d.class_id())?;
            }
            out.push(d);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct DetectorTrace {
    pub anchor_ids: Vec<usize>,
    pub anchors: Vec<Vec3>,
    point_traces: Vec<Vec<MlpTrace>>,
    argmax: Vec<Vec<usize>>,
    head_traces: Vec<MlpTrace>,
}

impl DetectorTrace {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn raw(&self, k: usize) -> &[f64] {
        self.head_traces[k].output()
    }
}

/// Box, objectness and class distribution from one anchor's raw outputs;
/// `pred_iou` is left at 0.
pub fn decode_raw(raw: &[f64], anchor: Vec3) -> Detection {
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        center[a] = anchor[a] + raw[OUT_CENTER + a];
        size[a] = softplus(raw[OUT_SIZE + a]) + MIN_PRED_SIZE;
    }
    let yaw = raw[OUT_HEADING + 1].atan2(raw[OUT_HEADING]);
    Detection {
        bbox: OrientedBox3D::new(center, size, yaw).expect("decoded box is valid"),
        objectness: sigmoid(raw[OUT_OBJECTNESS]),
        class_probs: softmax(&raw[OUT_CLASS..]),
        pred_iou: 0.0,
        anchor,
    }
}

/// Farthest-point sampling starting from index 0; ties keep the lower
/// index.
pub fn farthest_point_sample(points: &[Vec3], k: usize) -> Vec<usize> {
    let k = k.min(points.len());
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut cur = 0;
    for _ in 0..k {
        chosen.push(cur);
        let c = points[cur];
        let mut next = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist_sq(*p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        cur = next;
    }
    chosen
}

/// Every anchor's detection with `pred_iou` filled by the IoU head.
pub fn detector_forward(model: &Model, params: &[f64], scene: &SceneSample) -> Result<Vec<Detection>> {
    let trace = model.forward(params, scene)?;
    model.decode(params, &trace, scene, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, GeneratorParams};

    fn setup() -> (Model, ParamVector, SceneSample) {
        let gp = GeneratorParams::default();
        let (m, mut p) = Model::new(DetectorConfig::new(gp.feature_dim, gp.n_classes())).unwrap();
        m.init_params(&mut p, 1);
        (m, p, generate_scene(2, &gp).unwrap())
    }

    #[test]
    fn one_detection_per_anchor() {
        let (m, p, s) = setup();
        let dets = detector_forward(&m, &p.data, &s).unwrap();
        assert_eq!(dets.len(), 48);
        for d in &dets {
            assert!(d.bbox.size().iter().all(|v| *v > 0.0));
            d.validate().unwrap();
            assert!(d.pred_iou > 0.0 && d.pred_iou < 1.0);
        }
        assert_eq!(dets, detector_forward(&m, &p.data, &s).unwrap());
    }

    #[test]
    fn small_scene_is_an_error() {
        let (m, p, mut s) = setup();
        s.points.truncate(10);
        s.features.truncate(10);
        assert!(matches!(
            detector_forward(&m, &p.data, &s),
            Err(Error::SceneTooSmall { needed: 48, got: 10 })
        ));
    }

    #[test]
    fn fps_spreads_points() {
        let pts = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [2.5, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 3), vec![0, 2, 3]);
        assert_eq!(farthest_point_sample(&pts, 10).len(), 4);
    }

    #[test]
    fn decode_heading_and_size() {
        let mut raw = vec![0.0; 12];
        raw[OUT_HEADING] = 0.0;
        raw[OUT_HEADING + 1] = 2.0;
        raw[OUT_SIZE] = -1000.0;
        let d = decode_raw(&raw, [1.0, 2.0, 3.0]);
        assert!((d.bbox.yaw() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(d.bbox.size()[0], MIN_PRED_SIZE);
        assert_eq!(d.bbox.center(), [1.0, 2.0, 3.0]);
        assert_eq!(d.class_probs, vec![1.0 / 3.0; 3]);
    }
}
