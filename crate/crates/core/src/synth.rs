//! Procedural point-cloud scenes with labeled upright boxes, labeled /
//! unlabeled splits, and the JSON scene and dataset formats.
//!
//! Per-point features are informative by construction. Channels:
//!
//! | range | content |
//! |-------|---------|
//! | 0..3  | point minus owning box center, world frame |
//! | 3..6  | point minus owning box center, box frame |
//! | 6..9  | owning box size |
//! | 9..11 | owning box heading `(cos, sin)` |
//! | 11    | foreground flag |
//! | 12..  | class pattern (background has its own pattern) |
//!
//! Geometric channels are zero for background points. Gaussian noise is
//! added to every channel. [`transform_features`] keeps the channels
//! consistent when a scene is flipped, rotated or scaled.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, sub, OrientedBox3D, Transform3D, Vec3};
use crate::seed::{derive_seed, rng_for};

pub const FEAT_WORLD_OFFSET: usize = 0;
pub const FEAT_LOCAL_OFFSET: usize = 3;
pub const FEAT_SIZE: usize = 6;
pub const FEAT_HEADING: usize = 9;
pub const FEAT_FOREGROUND: usize = 11;
pub const FEAT_PATTERN: usize = 12;
pub const MIN_FEATURE_DIM: usize = FEAT_PATTERN + 1;

const PLACEMENT_ATTEMPTS: usize = 200;
const MAX_PAIR_IOU: f64 = 0.05;
/// Surface samples are pulled inward by up to this fraction so every
/// object point is strictly inside its box.
const SHELL_DEPTH: f64 = 0.05;

/// Uniform size range for one class, per box-frame axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub name: String,
    pub size_min: Vec3,
    pub size_max: Vec3,
}

impl ClassPrior {
    pub fn volume_bounds(&self) -> (f64, f64) {
        (
            self.size_min.iter().product(),
            self.size_max.iter().product(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub min_objects: usize,
    pub max_objects: usize,
    pub class_priors: Vec<ClassPrior>,
    /// Scenes span `[-room_half_extent, room_half_extent]` in x and y.
    pub room_half_extent: f64,
    pub room_height: f64,
    pub points_per_object: usize,
    pub background_points: usize,
    pub feature_noise: f64,
    pub feature_dim: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 5,
            class_priors: vec![
                ClassPrior {
                    name: "table".into(),
                    size_min: [1.2, 0.6, 0.6],
                    size_max: [1.8, 1.0, 0.9],
                },
                ClassPrior {
                    name: "chair".into(),
                    size_min: [0.4, 0.4, 0.8],
                    size_max: [0.6, 0.6, 1.1],
                },
                ClassPrior {
                    name: "cabinet".into(),
                    size_min: [0.8, 0.4, 1.4],
                    size_max: [1.2, 0.6, 2.0],
                },
            ],
            room_half_extent: 3.0,
            room_height: 2.5,
            points_per_object: 96,
            background_points: 128,
            feature_noise: 0.05,
            feature_dim: 16,
        }
    }
}

impl GeneratorParams {
    pub fn n_classes(&self) -> usize {
        self.class_priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.class_priors.is_empty() {
            return bad("at least one class prior is required".into());
        }
        if self.min_objects > self.max_objects {
            return bad(format!(
                "min_objects {} > max_objects {}",
                self.min_objects, self.max_objects
            ));
        }
        if self.feature_dim < MIN_FEATURE_DIM {
            return bad(format!(
                "feature_dim must be >= {MIN_FEATURE_DIM}, got {}",
                self.feature_dim
            ));
        }
        if !(self.room_half_extent > 0.0 && self.room_height > 0.0) {
            return bad("room extent must be positive".into());
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and >= 0".into());
        }
        if self.max_objects > 0 && self.points_per_object == 0 {
            return bad("points_per_object must be >= 1 when objects are placed".into());
        }
        if self.max_objects == 0 && self.background_points == 0 {
            return bad("scene would contain no points".into());
        }
        for p in &self.class_priors {
            for a in 0..3 {
                if !(p.size_min[a] > 0.0 && p.size_min[a] <= p.size_max[a]) {
                    return bad(format!("class {}: invalid size range on axis {a}", p.name));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: OrientedBox3D,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    pub points: Vec<Vec3>,
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<LabeledBox>>,
}

impl SceneSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn without_labels(&self) -> SceneSample {
        SceneSample {
            labels: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Shape(format!("scene {} has no points", self.scene_id)));
        }
        if self.points.len() != self.features.len() {
            return Err(Error::Shape(format!(
                "scene {}: {} points but {} feature rows",
                self.scene_id,
                self.points.len(),
                self.features.len()
            )));
        }
        let f = self.feature_dim();
        if let Some(i) = self.features.iter().position(|r| r.len() != f) {
            return Err(Error::Shape(format!(
                "scene {}: feature row {i} has length {}, expected {f}",
                self.scene_id,
                self.features[i].len()
            )));
        }
        Ok(())
    }
}

fn class_pattern(class_id: usize, j: usize) -> f64 {
    (2.399_963 * ((class_id + 1) * (j + 1)) as f64).cos()
}

const BACKGROUND_PATTERN: f64 = -1.0;

fn object_feature(p: Vec3, b: &LabeledBox, dim: usize) -> Vec<f64> {
    let mut f = vec![0.0; dim];
    let c = b.bbox.center();
    let w = sub(p, c);
    let l = b.bbox.to_local(p);
    let s = b.bbox.size();
    let (sin, cos) = b.bbox.yaw().sin_cos();
    f[FEAT_WORLD_OFFSET..FEAT_WORLD_OFFSET + 3].copy_from_slice(&w);
    f[FEAT_LOCAL_OFFSET..FEAT_LOCAL_OFFSET + 3].copy_from_slice(&l);
    f[FEAT_SIZE..FEAT_SIZE + 3].copy_from_slice(&s);
    f[FEAT_HEADING] = cos;
    f[FEAT_HEADING + 1] = sin;
    f[FEAT_FOREGROUND] = 1.0;
    for (j, v) in f[FEAT_PATTERN..].iter_mut().enumerate() {
        *v = class_pattern(b.class_id, j);
    }
    f
}

fn background_feature(dim: usize) -> Vec<f64> {
    let mut f = vec![0.0; dim];
    for v in &mut f[FEAT_PATTERN..] {
        *v = BACKGROUND_PATTERN;
    }
    f
}

/// Re-express feature channels after the scene geometry went through `t`.
pub fn transform_features(features: &mut [f64], t: &Transform3D) {
    if features.len() < MIN_FEATURE_DIM || t.is_identity() {
        return;
    }
    let w = t.apply_vector([
        features[FEAT_WORLD_OFFSET],
        features[FEAT_WORLD_OFFSET + 1],
        features[FEAT_WORLD_OFFSET + 2],
    ]);
    features[FEAT_WORLD_OFFSET..FEAT_WORLD_OFFSET + 3].copy_from_slice(&w);
    // Each mirror flip reverses the box-frame y axis.
    let y_sign = if t.n_flips() % 2 == 1 { -1.0 } else { 1.0 };
    features[FEAT_LOCAL_OFFSET] *= t.scale;
    features[FEAT_LOCAL_OFFSET + 1] *= t.scale * y_sign;
    features[FEAT_LOCAL_OFFSET + 2] *= t.scale;
    for v in &mut features[FEAT_SIZE..FEAT_SIZE + 3] {
        *v *= t.scale;
    }
    let h = t.apply_vector([features[FEAT_HEADING], features[FEAT_HEADING + 1], 0.0]);
    features[FEAT_HEADING] = h[0] / t.scale;
    features[FEAT_HEADING + 1] = h[1] / t.scale;
}

fn sample_shell_point(b: &OrientedBox3D, rng: &mut impl Rng) -> Vec3 {
    let s = b.size();
    let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
    let total: f64 = 2.0 * areas.iter().sum::<f64>();
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (a, area) in areas.iter().enumerate() {
        if pick < 2.0 * area {
            axis = a;
            break;
        }
        pick -= 2.0 * area;
    }
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut local = [0.0; 3];
    for (a, l) in local.iter_mut().enumerate() {
        *l = if a == axis {
            sign * 0.5 * s[a]
        } else {
            (rng.random::<f64>() - 0.5) * s[a]
        };
    }
    let shrink = 1.0 - SHELL_DEPTH * rng.random::<f64>();
    b.to_world([local[0] * shrink, local[1] * shrink, local[2] * shrink])
}

fn place_objects(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledBox>> {
    let n = rng.random_range(params.min_objects..=params.max_objects);
    let mut placed: Vec<LabeledBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.random_range(0..params.n_classes());
        let prior = &params.class_priors[class_id];
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut size = [0.0; 3];
            for (a, s) in size.iter_mut().enumerate() {
                *s = rng.random_range(prior.size_min[a]..=prior.size_max[a]);
            }
            let yaw = rng.random_range(-PI..PI);
            let reach = 0.5 * size[0].hypot(size[1]);
            let span = params.room_half_extent - reach;
            if span <= 0.0 {
                continue;
            }
            let center = [
                rng.random_range(-span..=span),
                rng.random_range(-span..=span),
                0.5 * size[2],
            ];
            let bbox = OrientedBox3D::new(center, size, yaw)?;
            if placed.iter().all(|o| iou3d(&o.bbox, &bbox) < MAX_PAIR_IOU) {
                ok = Some(bbox);
                break;
            }
        }
        match ok {
            Some(bbox) => placed.push(LabeledBox { bbox, class_id }),
            None => {
                return Err(Error::Placement {
                    requested: n,
                    attempts: PLACEMENT_ATTEMPTS,
                })
            }
        }
    }
    Ok(placed)
}

/// Generate one scene; a pure function of `(seed, params)`.
pub fn generate_scene(seed: u64, params: &GeneratorParams) -> Result<SceneSample> {
    generate_scene_with_id(seed, params, format!("scene_{seed:016x}"))
}

pub fn generate_scene_with_id(
    seed: u64,
    params: &GeneratorParams,
    scene_id: String,
) -> Result<SceneSample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = place_objects(params, &mut rng)?;
    let dim = params.feature_dim;
    let noise = Normal::new(0.0, params.feature_noise).map_err(|e| Error::Config(e.to_string()))?;

    let mut points = Vec::new();
    let mut features = Vec::new();
    for b in &boxes {
        for _ in 0..params.points_per_object {
            let p = sample_shell_point(&b.bbox, &mut rng);
            points.push(p);
            features.push(object_feature(p, b, dim));
        }
    }
    let r = params.room_half_extent;
    for _ in 0..params.background_points {
        let mut p = [0.0; 3];
        for _ in 0..100 {
            p = [
                rng.random_range(-r..=r),
                rng.random_range(-r..=r),
                rng.random_range(0.0..=params.room_height),
            ];
            if !boxes.iter().any(|b| b.bbox.contains(p, 0.0)) {
                break;
            }
        }
        points.push(p);
        features.push(background_feature(dim));
    }
    if params.feature_noise > 0.0 {
        for row in &mut features {
            for v in row.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let scene = SceneSample {
        scene_id,
        points,
        features,
        labels: Some(boxes),
    };
    scene.validate()?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<SceneSample>,
    /// Ground truth is kept for evaluation only; training code must go
    /// through [`SceneSample::without_labels`].
    pub unlabeled: Vec<SceneSample>,
    pub label_ratio: f64,
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Number of labeled scenes for a split: `ceil(n * ratio)`, robust to
/// representation error in `ratio`.
pub fn n_labeled(n_scenes: usize, label_ratio: f64) -> usize {
    let raw = n_scenes as f64 * label_ratio;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, n_scenes)
}

pub fn make_split(
    n_scenes: usize,
    label_ratio: f64,
    seed: u64,
    params: &GeneratorParams,
) -> Result<DatasetSplit> {
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be >= 1".into()));
    }
    if !(label_ratio > 0.0 && label_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "label_ratio must be in (0, 1], got {label_ratio}"
        )));
    }
    let mut order: Vec<usize> = (0..n_scenes).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let k = n_labeled(n_scenes, label_ratio);
    let mut labeled_idx = order[..k].to_vec();
    let mut unlabeled_idx = order[k..].to_vec();
    labeled_idx.sort_unstable();
    unlabeled_idx.sort_unstable();
    let gen = |i: usize| generate_scene_with_id(derive_seed(seed, "scene", i as u64), params, scene_id(i));
    Ok(DatasetSplit {
        labeled: labeled_idx.into_iter().map(gen).collect::<Result<_>>()?,
        unlabeled: unlabeled_idx.into_iter().map(gen).collect::<Result<_>>()?,
        label_ratio,
    })
}

/// Held-out scenes drawn from their own seed stream.
pub fn make_holdout(n_scenes: usize, seed: u64, params: &GeneratorParams) -> Result<Vec<SceneSample>> {
    (0..n_scenes)
        .map(|i| {
            generate_scene_with_id(
                derive_seed(seed, "holdout", i as u64),
                params,
                format!("holdout_{i:05}"),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub class: usize,
}

impl From<&LabeledBox> for LabelRecord {
    fn from(b: &LabeledBox) -> Self {
        LabelRecord {
            center: b.bbox.center(),
            size: b.bbox.size(),
            yaw: b.bbox.yaw(),
            class: b.class_id,
        }
    }
}

impl TryFrom<&LabelRecord> for LabeledBox {
    type Error = Error;

    fn try_from(r: &LabelRecord) -> Result<Self> {
        Ok(LabeledBox {
            bbox: OrientedBox3D::new(r.center, r.size, r.yaw)?,
            class_id: r.class,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    points: Vec<Vec3>,
    features: Vec<Vec<f64>>,
    #[serde(default)]
    labels: Option<Vec<LabelRecord>>,
}

pub fn scene_to_json(scene: &SceneSample) -> String {
    let rec = SceneRecord {
        scene_id: scene.scene_id.clone(),
        points: scene.points.clone(),
        features: scene.features.clone(),
        labels: scene
            .labels
            .as_ref()
            .map(|ls| ls.iter().map(LabelRecord::from).collect()),
    };
    serde_json::to_string(&rec).expect("scene records always serialize")
}

pub fn scene_from_json(text: &str, context: &str) -> Result<SceneSample> {
    let rec: SceneRecord = serde_json::from_str(text).map_err(|e| Error::parse(context, &e))?;
    let labels = match rec.labels {
        None => None,
        Some(ls) => Some(
            ls.iter()
                .enumerate()
                .map(|(i, r)| {
                    LabeledBox::try_from(r)
                        .map_err(|e| Error::Shape(format!("{context}: labels[{i}]: {e}")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let scene = SceneSample {
        scene_id: rec.scene_id,
        points: rec.points,
        features: rec.features,
        labels,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn write_scene(path: &Path, scene: &SceneSample) -> Result<()> {
    fs::write(path, scene_to_json(scene)).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<SceneSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scene_from_json(&text, &path.display().to_string())
}

/// Contents of `split.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub label_ratio: f64,
    pub seed: u64,
    pub params: GeneratorParams,
}

pub const SPLIT_FILE: &str = "split.json";

pub fn scene_path(dir: &Path, scene_id: &str) -> PathBuf {
    dir.join(format!("{scene_id}.json"))
}

pub fn write_dataset(dir: &Path, split: &DatasetSplit, seed: u64, params: &GeneratorParams) -> Result<SplitManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in split.labeled.iter().chain(split.unlabeled.iter()) {
        write_scene(&scene_path(dir, &s.scene_id), s)?;
    }
    let manifest = SplitManifest {
        labeled: split.labeled.iter().map(|s| s.scene_id.clone()).collect(),
        unlabeled: split.unlabeled.iter().map(|s| s.scene_id.clone()).collect(),
        label_ratio: split.label_ratio,
        seed,
        params: params.clone(),
    };
    let path = dir.join(SPLIT_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub const HOLDOUT_DIR: &str = "holdout";

/// Held-out scenes go to their own subdirectory so the top level holds only
/// the train split.
pub fn write_holdout(dir: &Path, scenes: &[SceneSample]) -> Result<()> {
    let sub = dir.join(HOLDOUT_DIR);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    for s in scenes {
        write_scene(&scene_path(&sub, &s.scene_id), s)?;
    }
    Ok(())
}

/// Held-out scenes in file-name order; empty when the directory is absent.
pub fn read_holdout(dir: &Path) -> Result<Vec<SceneSample>> {
    let sub = dir.join(HOLDOUT_DIR);
    if !sub.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&sub)
        .map_err(|e| Error::io(&sub, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_scene(p)).collect()
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetSplit, SplitManifest)> {
    let path = dir.join(SPLIT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), &e))?;
    let load = |ids: &[String]| -> Result<Vec<SceneSample>> {
        ids.iter().map(|id| read_scene(&scene_path(dir, id))).collect()
    };
    let split = DatasetSplit {
        labeled: load(&manifest.labeled)?,
        unlabeled: load(&manifest.unlabeled)?,
        label_ratio: manifest.label_ratio,
    };
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, volume};
    use std::collections::HashSet;

    fn params_with_objects(n: usize) -> GeneratorParams {
        GeneratorParams {
            min_objects: n,
            max_objects: n,
            ..GeneratorParams::default()
        }
    }

    #[test]
    fn empty_scene_has_only_background() {
        let s = generate_scene(3, &params_with_objects(0)).unwrap();
        assert_eq!(s.labels.as_ref().unwrap().len(), 0);
        assert_eq!(s.len(), GeneratorParams::default().background_points);
        assert!(s.features.iter().all(|f| f[FEAT_FOREGROUND].abs() < 0.5));
    }

    #[test]
    fn generation_is_deterministic() {
        let p = GeneratorParams::default();
        let a = generate_scene(42, &p).unwrap();
        let b = generate_scene(42, &p).unwrap();
        assert_eq!(scene_to_json(&a), scene_to_json(&b));
        let c = generate_scene(43, &p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn five_objects_do_not_overlap() {
        let p = params_with_objects(5);
        for seed in 0..10 {
            let s = generate_scene(seed, &p).unwrap();
            let labels = s.labels.unwrap();
            assert_eq!(labels.len(), 5);
            for i in 0..5 {
                for j in (i + 1)..5 {
                    assert!(iou3d(&labels[i].bbox, &labels[j].bbox) < 0.05);
                }
            }
        }
    }

    #[test]
    fn boxes_enclose_points_and_respect_priors() {
        let p = GeneratorParams::default();
        for seed in 0..20 {
            let s = generate_scene(seed, &p).unwrap();
            for b in s.labels.as_ref().unwrap() {
                let inside = s.points.iter().filter(|q| b.bbox.contains(**q, 0.0)).count();
                assert!(inside >= 1);
                let (lo, hi) = p.class_priors[b.class_id].volume_bounds();
                let v = volume(&b.bbox);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn over_dense_params_fail_placement() {
        let p = GeneratorParams {
            min_objects: 40,
            max_objects: 40,
            room_half_extent: 1.5,
            ..GeneratorParams::default()
        };
        assert!(matches!(generate_scene(1, &p), Err(Error::Placement { .. })));
    }

    #[test]
    fn split_sizes_and_partition() {
        let p = GeneratorParams {
            points_per_object: 4,
            background_points: 4,
            ..GeneratorParams::default()
        };
        let all = make_split(10, 1.0, 1, &p).unwrap();
        assert_eq!(all.labeled.len(), 10);
        assert!(all.unlabeled.is_empty());
        let s = make_split(100, 0.1, 1, &p).unwrap();
        assert_eq!(s.labeled.len(), 10);
        assert_eq!(s.unlabeled.len(), 90);
        let l: HashSet<_> = s.labeled.iter().map(|x| x.scene_id.clone()).collect();
        let u: HashSet<_> = s.unlabeled.iter().map(|x| x.scene_id.clone()).collect();
        assert!(l.is_disjoint(&u));
        assert_eq!(l.len() + u.len(), 100);
        assert!(make_split(0, 0.5, 1, &p).is_err());
        assert!(make_split(10, 0.0, 1, &p).is_err());
        assert!(make_split(10, 1.5, 1, &p).is_err());
    }

    #[test]
    fn scene_streams_are_stable_across_dataset_sizes() {
        let p = GeneratorParams {
            points_per_object: 4,
            background_points: 4,
            ..GeneratorParams::default()
        };
        let small = make_split(5, 1.0, 9, &p).unwrap();
        let large = make_split(12, 1.0, 9, &p).unwrap();
        for s in &small.labeled {
            let t = large.labeled.iter().find(|t| t.scene_id == s.scene_id).unwrap();
            assert_eq!(s, t);
        }
    }

    #[test]
    fn json_round_trip_and_errors() {
        let s = generate_scene(5, &GeneratorParams::default()).unwrap();
        let back = scene_from_json(&scene_to_json(&s), "mem").unwrap();
        assert_eq!(back, s);

        let missing = r#"{"scene_id":"a","features":[[1.0]]}"#;
        let err = scene_from_json(missing, "mem").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(err.to_string().contains("points"));

        let unlabeled = r#"{"scene_id":"a","points":[[0,0,0]],"features":[[1.0]]}"#;
        assert_eq!(scene_from_json(unlabeled, "mem").unwrap().labels, None);
        let null_labels = r#"{"scene_id":"a","points":[[0,0,0]],"features":[[1.0]],"labels":null}"#;
        assert_eq!(scene_from_json(null_labels, "mem").unwrap().labels, None);

        let ragged = r#"{"scene_id":"a","points":[[0,0,0],[1,1,1]],"features":[[1.0]]}"#;
        assert!(matches!(scene_from_json(ragged, "mem"), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_transform_tracks_geometry() {
        let p = GeneratorParams {
            feature_noise: 0.0,
            ..params_with_objects(3)
        };
        let s = generate_scene(11, &p).unwrap();
        let labels = s.labels.clone().unwrap();
        for t in [
            Transform3D::new(true, false, 0.4, 1.1).unwrap(),
            Transform3D::new(false, true, -2.0, 0.9).unwrap(),
            Transform3D::new(true, true, 1.0, 1.0).unwrap(),
        ] {
            let boxes: Vec<LabeledBox> = labels
                .iter()
                .map(|b| LabeledBox {
                    bbox: apply_transform(&b.bbox, &t),
                    class_id: b.class_id,
                })
                .collect();
            for (i, (p0, f0)) in s.points.iter().zip(&s.features).enumerate() {
                if f0[FEAT_FOREGROUND] < 0.5 {
                    continue;
                }
                let owner = i / p.points_per_object;
                let q = t.apply_point(*p0);
                let mut f = f0.clone();
                transform_features(&mut f, &t);
                let expect = object_feature(q, &boxes[owner], p.feature_dim);
                for (a, b) in f.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-9, "{f:?} vs {expect:?}");
                }
            }
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = GeneratorParams {
            points_per_object: 8,
            background_points: 8,
            ..GeneratorParams::default()
        };
        let split = make_split(6, 0.5, 3, &p).unwrap();
        write_dataset(dir.path(), &split, 3, &p).unwrap();
        let (back, manifest) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, split);
        assert_eq!(manifest.params, p);
        assert_eq!(manifest.labeled.len(), 3);
    }
}
