//! Scene augmentation: random sub-sampling (weak) and sub-sampling plus a
//! random flip / yaw rotation / uniform scaling (strong).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, Transform3D};
use crate::synth::{transform_features, LabeledBox, SceneSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Points kept by sub-sampling; scenes with fewer points are kept whole.
    pub n_points: usize,
    pub flip_x: bool,
    pub flip_y: bool,
    pub flip_prob: f64,
    /// Yaw rotation is uniform in `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_points: 384,
            flip_x: true,
            flip_y: true,
            flip_prob: 0.5,
            max_rotation: PI / 6.0,
            scale_min: 0.85,
            scale_max: 1.15,
        }
    }
}

impl AugmentConfig {
    /// Sub-sampling only.
    pub fn identity(n_points: usize) -> Self {
        Self {
            n_points,
            flip_x: false,
            flip_y: false,
            flip_prob: 0.0,
            max_rotation: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points == 0 {
            return Err(Error::Config("augment.n_points must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.max_rotation >= 0.0 && self.max_rotation.is_finite()) {
            return Err(Error::Config("max_rotation must be finite and >= 0".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must satisfy 0 < lo <= hi",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

/// Keep `n` points chosen uniformly without replacement, in their original
/// order.
pub fn subsample(scene: &SceneSample, n: usize, rng: &mut impl Rng) -> SceneSample {
    if n >= scene.len() {
        return scene.clone();
    }
    let mut idx = rand::seq::index::sample(rng, scene.len(), n).into_vec();
    idx.sort_unstable();
    SceneSample {
        scene_id: scene.scene_id.clone(),
        points: idx.iter().map(|&i| scene.points[i]).collect(),
        features: idx.iter().map(|&i| scene.features[i].clone()).collect(),
        labels: scene.labels.clone(),
    }
}

pub fn sample_transform(cfg: &AugmentConfig, rng: &mut impl Rng) -> Transform3D {
    let mut flip = |enabled: bool| enabled && rng.random::<f64>() < cfg.flip_prob;
    let flip_x = flip(cfg.flip_x);
    let flip_y = flip(cfg.flip_y);
    let rot_yaw = if cfg.max_rotation > 0.0 {
        rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
    } else {
        0.0
    };
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    Transform3D {
        flip_x,
        flip_y,
        rot_yaw,
        scale,
    }
}

/// Apply `t` to points, features and labels.
pub fn transform_scene(scene: &SceneSample, t: &Transform3D) -> SceneSample {
    if t.is_identity() {
        return scene.clone();
    }
    SceneSample {
        scene_id: scene.scene_id.clone(),
        points: scene.points.iter().map(|p| t.apply_point(*p)).collect(),
        features: scene
            .features
            .iter()
            .map(|f| {
                let mut f = f.clone();
                transform_features(&mut f, t);
                f
            })
            .collect(),
        labels: scene.labels.as_ref().map(|ls| {
            ls.iter()
                .map(|l| LabeledBox {
                    bbox: apply_transform(&l.bbox, t),
                    class_id: l.class_id,
                })
                .collect()
        }),
    }
}

pub fn augment(
    scene: &SceneSample,
    strength: Strength,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (SceneSample, Transform3D) {
    let sub = subsample(scene, cfg.n_points, rng);
    match strength {
        Strength::Weak => (sub, Transform3D::identity()),
        Strength::Strong => {
            let t = sample_transform(cfg, rng);
            (transform_scene(&sub, &t), t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, GeneratorParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene() -> SceneSample {
        generate_scene(8, &GeneratorParams::default()).unwrap()
    }

    #[test]
    fn weak_is_identity() {
        let s = scene();
        let (w, t) = augment(&s, Strength::Weak, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(t.is_identity());
        assert_eq!(w.len(), 384.min(s.len()));
        assert_eq!(w.labels, s.labels);
    }

    #[test]
    fn collapsed_ranges_only_subsample() {
        let s = scene();
        let cfg = AugmentConfig::identity(200);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let (a, t) = augment(&s, Strength::Strong, &cfg, &mut r1);
        assert!(t.is_identity());
        assert_eq!(a, subsample(&s, 200, &mut r2));
        assert!(a.points.iter().all(|p| s.points.contains(p)));
    }

    #[test]
    fn labels_follow_points() {
        let s = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::default()
        };
        let mut ids: Vec<usize> = (0..s.len()).collect();
        ids.retain(|&i| s.features[i][crate::synth::FEAT_FOREGROUND] > 0.5);
        for _ in 0..10 {
            let t = sample_transform(&cfg, &mut rng);
            let a = transform_scene(&s, &t);
            let labels = a.labels.as_ref().unwrap();
            for &i in &ids {
                assert!(labels.iter().any(|l| l.bbox.contains(a.points[i], 1e-9)));
            }
        }
    }

    #[test]
    fn validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            scale_min: 1.2,
            scale_max: 1.1,
            ..AugmentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
