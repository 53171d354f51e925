//! Class-aware 3D IoU estimation head.
//!
//! Every virtual grid point contributes `[local_coords; pooled_feature]` to a
//! shared point MLP; the point embeddings are max-pooled, passed through a
//! second MLP, and squashed by a sigmoid into one IoU estimate per class.
//! Gradients flow back to the head parameters (training) and, through
//! [`grid_pool::pool_with_jacobian`], to the box center and size (test-time
//! IoU optimization).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, OrientedBox3D};
use crate::grid_pool::{self, GridPoolResult, PoolJacobian, Seeds};
use crate::nn::{sigmoid, Adam, Mlp, MlpTrace};
use crate::params::{LayoutBuilder, ParamVector};
use crate::synth::{LabeledBox, SceneSample};

/// Sizes below this after an optimization step are clamped.
pub const MIN_OPTIMIZED_SIZE: f64 = 1e-3;
/// Jittered sizes never drop below this fraction of the original.
pub const MIN_JITTER_SIZE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouHeadConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub grid: usize,
    pub k: usize,
}

impl IouHeadConfig {
    pub fn new(feature_dim: usize, n_classes: usize) -> Self {
        Self {
            feature_dim,
            hidden: 32,
            n_classes,
            grid: 4,
            k: 3,
        }
    }
}

/// Architecture of the head; the weights live in a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct IouHead {
    pub config: IouHeadConfig,
    pub point_mlp: Mlp,
    pub post_mlp: Mlp,
}

impl IouHead {
    pub fn register(builder: &mut LayoutBuilder, prefix: &str, config: IouHeadConfig) -> Self {
        let h = config.hidden;
        let point_mlp = Mlp::new(
            builder,
            &format!("{prefix}.point"),
            &[config.feature_dim + 3, h, h, h],
            true,
        );
        let post_mlp = Mlp::new(
            builder,
            &format!("{prefix}.post"),
            &[h, h, h, config.n_classes],
            false,
        );
        Self {
            config,
            point_mlp,
            post_mlp,
        }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        self.point_mlp.init(params, rng);
        self.post_mlp.init(params, rng);
    }

    pub fn pool(&self, b: &OrientedBox3D, seeds: &Seeds) -> Result<GridPoolResult> {
        grid_pool::pool(b, seeds, self.config.grid, self.config.k)
    }

    pub fn pool_with_jacobian(
        &self,
        b: &OrientedBox3D,
        seeds: &Seeds,
    ) -> Result<(GridPoolResult, PoolJacobian)> {
        grid_pool::pool_with_jacobian(b, seeds, self.config.grid, self.config.k)
    }

    /// Class-wise IoU estimates in `(0, 1)`.
    pub fn forward(&self, pool: &GridPoolResult, params: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(pool, params)?.outputs)
    }

    pub fn forward_traced(&self, pool: &GridPoolResult, params: &[f64]) -> Result<HeadTrace> {
        if pool.is_empty() {
            return Err(Error::Shape("grid pool has no points".into()));
        }
        if let Some(f) = pool.features.iter().find(|f| f.len() != self.config.feature_dim) {
            return Err(Error::Shape(format!(
                "pooled feature has {} channels, head expects {}",
                f.len(),
                self.config.feature_dim
            )));
        }
        let h = self.config.hidden;
        let mut pooled = vec![f64::NEG_INFINITY; h];
        let mut argmax = vec![0usize; h];
        let mut point_traces = Vec::with_capacity(pool.len());
        for m in 0..pool.len() {
            let t = self.point_mlp.forward(params, &pool.point_input(m));
            for (c, v) in t.output().iter().enumerate() {
                if *v > pooled[c] {
                    pooled[c] = *v;
                    argmax[c] = m;
                }
            }
            point_traces.push(t);
        }
        let post = self.post_mlp.forward(params, &pooled);
        let outputs = post.output().iter().map(|x| sigmoid(*x)).collect();
        Ok(HeadTrace {
            point_traces,
            argmax,
            post,
            outputs,
        })
    }

    /// Back-propagate `d_outputs` (one entry per class, with respect to the
    /// sigmoid outputs). Parameter gradients accumulate into `grad`; when
    /// `input_grads` is set, returns d/d`[local; feature]` per grid point.
    pub fn backward(
        &self,
        trace: &HeadTrace,
        params: &[f64],
        d_outputs: &[f64],
        mut grad: Option<&mut [f64]>,
        input_grads: bool,
    ) -> Option<Vec<Vec<f64>>> {
        let d_logits: Vec<f64> = d_outputs
            .iter()
            .zip(&trace.outputs)
            .map(|(d, v)| d * v * (1.0 - v))
            .collect();
        let mut d_pooled = vec![0.0; self.config.hidden];
        self.post_mlp.backward(
            params,
            &trace.post,
            &d_logits,
            grad.as_deref_mut(),
            Some(&mut d_pooled),
        );
        let n = trace.point_traces.len();
        let in_dim = self.point_mlp.input_dim();
        let mut per_point: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (c, &m) in trace.argmax.iter().enumerate() {
            if d_pooled[c] == 0.0 {
                continue;
            }
            if per_point[m].is_empty() {
                per_point[m] = vec![0.0; self.config.hidden];
            }
            per_point[m][c] += d_pooled[c];
        }
        let mut d_inputs = input_grads.then(|| vec![vec![0.0; in_dim]; n]);
        for (m, d) in per_point.iter().enumerate() {
            if d.is_empty() {
                continue;
            }
            let d_in = d_inputs.as_mut().map(|v| v[m].as_mut_slice());
            self.point_mlp
                .backward(params, &trace.point_traces[m], d, grad.as_deref_mut(), d_in);
        }
        d_inputs
    }

    /// Estimated IoU of `b` for `class_id`.
    pub fn estimate(
        &self,
        params: &[f64],
        b: &OrientedBox3D,
        seeds: &Seeds,
        class_id: usize,
    ) -> Result<f64> {
        let pool = self.pool(b, seeds)?;
        select_class_iou(&self.forward(&pool, params)?, class_id)
    }

    /// Estimated IoU and its gradient with respect to the box.
    pub fn estimate_with_gradient(
        &self,
        params: &[f64],
        b: &OrientedBox3D,
        seeds: &Seeds,
        class_id: usize,
    ) -> Result<BoxGradient> {
        let (pool, jac) = self.pool_with_jacobian(b, seeds)?;
        let trace = self.forward_traced(&pool, params)?;
        let v = select_class_iou(&trace.outputs, class_id)?;
        let mut d_out = vec![0.0; self.config.n_classes];
        d_out[class_id] = 1.0;
        let d_in = self
            .backward(&trace, params, &d_out, None, true)
            .expect("input gradients requested");
        Ok(chain_to_box(&d_in, &jac, v))
    }
}

/// `v` and `dv/d(center, size, yaw)` for one box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxGradient {
    pub value: f64,
    pub d_center: [f64; 3],
    pub d_size: [f64; 3],
    pub d_yaw: f64,
}

fn chain_to_box(d_in: &[Vec<f64>], jac: &PoolJacobian, value: f64) -> BoxGradient {
    let mut g = BoxGradient {
        value,
        d_center: [0.0; 3],
        d_size: [0.0; 3],
        d_yaw: 0.0,
    };
    for (m, d) in d_in.iter().enumerate() {
        let u = jac.unit_offsets[m];
        for a in 0..3 {
            g.d_size[a] += d[a] * u[a];
        }
        for (f, df) in d[3..].iter().enumerate() {
            if *df == 0.0 {
                continue;
            }
            for a in 0..3 {
                g.d_center[a] += df * jac.d_center[m][f * 3 + a];
                g.d_size[a] += df * jac.d_size[m][f * 3 + a];
            }
            g.d_yaw += df * jac.d_yaw[m][f];
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    point_traces: Vec<MlpTrace>,
    argmax: Vec<usize>,
    post: MlpTrace,
    pub outputs: Vec<f64>,
}

pub fn select_class_iou(outputs: &[f64], class_id: usize) -> Result<f64> {
    outputs
        .get(class_id)
        .copied()
        .ok_or(Error::ClassOutOfRange {
            class: class_id,
            n_classes: outputs.len(),
        })
}

/// A standalone head with its own parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IouHeadParams {
    pub head: IouHead,
    pub params: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct IouHeadRecord {
    config: IouHeadConfig,
    params: ParamVector,
}

impl IouHeadParams {
    pub fn new(config: IouHeadConfig, seed: u64) -> Self {
        let mut b = LayoutBuilder::new();
        let head = IouHead::register(&mut b, "iou", config);
        let mut params = b.build();
        head.init(&mut params.data, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { head, params }
    }

    pub fn zeros(config: IouHeadConfig) -> Self {
        let mut p = Self::new(config, 0);
        p.params.data.iter_mut().for_each(|v| *v = 0.0);
        p
    }

    pub fn forward(&self, pool: &GridPoolResult) -> Result<Vec<f64>> {
        self.head.forward(pool, &self.params.data)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&IouHeadRecord {
            config: self.head.config.clone(),
            params: self.params.clone(),
        })
        .expect("head serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: IouHeadRecord =
            serde_json::from_str(text).map_err(|e| Error::parse("iou head", &e))?;
        let fresh = Self::zeros(rec.config);
        fresh.params.check_layout(&rec.params)?;
        Ok(Self {
            head: fresh.head,
            params: rec.params,
        })
    }
}

/// Head output for the given pool; see [`IouHead::forward`].
pub fn head_forward(pool: &GridPoolResult, params: &IouHeadParams) -> Result<Vec<f64>> {
    params.forward(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    /// Noise std per axis as a fraction of the box size.
    pub sigma_factor: f64,
    pub n_jitters_per_box: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            sigma_factor: 0.3,
            n_jitters_per_box: 8,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_factor > 0.0 && self.sigma_factor.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_factor must be > 0, got {}",
                self.sigma_factor
            )));
        }
        Ok(())
    }
}

/// Gaussian jitter of center and size with per-axis std
/// `sigma_factor * size`; sizes are floored at a tenth of the original.
pub fn jitter_box(b: &OrientedBox3D, cfg: &JitterConfig, rng: &mut impl Rng) -> OrientedBox3D {
    let s = b.size();
    let c = b.center();
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        let sigma = cfg.sigma_factor * s[a];
        let ec: f64 = StandardNormal.sample(rng);
        let es: f64 = StandardNormal.sample(rng);
        center[a] = c[a] + sigma * ec;
        size[a] = (s[a] + sigma * es).max(MIN_JITTER_SIZE_FRACTION * s[a]);
    }
    OrientedBox3D::new(center, size, b.yaw()).expect("jittered box stays valid")
}

/// Largest IoU between `b` and any ground-truth box.
pub fn best_iou(b: &OrientedBox3D, gts: &[LabeledBox]) -> f64 {
    gts.iter().map(|g| iou3d(b, &g.bbox)).fold(0.0, f64::max)
}

/// One IoU-regression training example.
#[derive(Debug, Clone, PartialEq)]
pub struct IouSample {
    pub scene: usize,
    pub bbox: OrientedBox3D,
    pub class_id: usize,
    pub target: f64,
}

/// Every ground-truth box plus `n_jitters_per_box` jittered copies, each
/// labeled with its best IoU against the scene's ground truth and the class
/// of the box it came from.
pub fn make_iou_samples(
    scenes: &[SceneSample],
    cfg: &JitterConfig,
    rng: &mut impl Rng,
) -> Result<Vec<IouSample>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        let Some(gts) = s.labels.as_ref() else {
            continue;
        };
        for g in gts {
            let mut push = |b: OrientedBox3D| {
                out.push(IouSample {
                    scene: si,
                    bbox: b,
                    class_id: g.class_id,
                    target: best_iou(&b, gts),
                })
            };
            push(g.bbox);
            for _ in 0..cfg.n_jitters_per_box {
                push(jitter_box(&g.bbox, cfg, rng));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("no ground-truth boxes to train the IoU head".into()));
    }
    Ok(out)
}

/// Mean L1 loss over `samples` and its parameter gradient (accumulated into
/// `grad`, already divided by `samples.len()`).
pub fn iou_l1_loss(
    head: &IouHead,
    params: &[f64],
    scenes: &[SceneSample],
    samples: &[IouSample],
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let n = samples.len() as f64;
    let mut total = 0.0;
    for s in samples {
        let seeds = Seeds::from_scene(&scenes[s.scene]);
        let pool = head.pool(&s.bbox, &seeds)?;
        let trace = head.forward_traced(&pool, params)?;
        let v = select_class_iou(&trace.outputs, s.class_id)?;
        let diff = v - s.target;
        total += diff.abs();
        if let Some(g) = grad.as_deref_mut() {
            if diff != 0.0 {
                let mut d = vec![0.0; head.config.n_classes];
                d[s.class_id] = diff.signum() / n;
                head.backward(&trace, params, &d, Some(g), false);
            }
        }
    }
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IouTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub jitter: JitterConfig,
    pub seed: u64,
    /// Draw fresh jitters every epoch instead of reusing the first draw.
    pub resample_each_epoch: bool,
}

impl Default for IouTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            jitter: JitterConfig::default(),
            seed: 0,
            resample_each_epoch: true,
        }
    }
}

/// Fit the head by Adam on L1 loss; returns the trained head and the mean
/// training loss of every epoch.
pub fn train_iou_head(
    scenes: &[SceneSample],
    init: IouHeadParams,
    cfg: &IouTrainConfig,
) -> Result<(IouHeadParams, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = make_iou_samples(scenes, &cfg.jitter, &mut rng)?;
    let mut model = init;
    let mut opt = Adam::new(model.params.len(), cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.resample_each_epoch {
            samples = make_iou_samples(scenes, &cfg.jitter, &mut rng)?;
        }
        samples.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in samples.chunks(batch) {
            let mut grad = model.params.zeros_like();
            let loss = iou_l1_loss(&model.head, &model.params.data, scenes, chunk, Some(&mut grad))?;
            sum += loss * chunk.len() as f64;
            opt.update(&mut model.params.data, &grad);
        }
        let mean = sum / samples.len() as f64;
        log::debug!("iou head epoch {epoch}: l1 {mean:.4}");
        history.push(mean);
    }
    Ok((model, history))
}

/// Test-time refinement: `steps` rounds of gradient ascent on the estimated
/// IoU with respect to center and size. Returns the refined box and the
/// estimate before each step and after the last one.
pub fn iou_optimize(
    b: &OrientedBox3D,
    seeds: &Seeds,
    head: &IouHead,
    params: &[f64],
    class_id: usize,
    step: f64,
    steps: usize,
) -> Result<(OrientedBox3D, Vec<f64>)> {
    let mut current = *b;
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let g = head.estimate_with_gradient(params, &current, seeds, class_id)?;
        trace.push(g.value);
        let c = current.center();
        let s = current.size();
        let mut center = [0.0; 3];
        let mut size = [0.0; 3];
        for a in 0..3 {
            center[a] = c[a] + step * g.d_center[a];
            size[a] = (s[a] + step * g.d_size[a]).max(MIN_OPTIMIZED_SIZE);
        }
        current = OrientedBox3D::new(center, size, current.yaw())?;
    }
    trace.push(head.estimate(params, &current, seeds, class_id)?);
    Ok((current, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IouOptimConfig {
    pub step: f64,
    pub steps: usize,
}

impl Default for IouOptimConfig {
    fn default() -> Self {
        Self {
            step: 5e-4,
            steps: 10,
        }
    }
}
