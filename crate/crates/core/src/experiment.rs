//! One JSON document that fixes a whole experiment: data, model, both
//! training stages and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, Model};
use crate::error::{parse_json, Error, Result};
use crate::eval::{ApMode, ScoreKind};
use crate::iou_head::IouHeadConfig;
use crate::seed::derive_seed;
use crate::ssl::{pretrain, ssl_train, PretrainConfig, PretrainOutput, SslConfig, SslData, SslState};
use crate::synth::{make_holdout, make_split, DatasetSplit, GeneratorParams, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorOptions {
    pub n_anchors: usize,
    pub n_neighbors: usize,
    pub hidden: usize,
    pub iou_hidden: usize,
    pub grid: usize,
    pub k: usize,
}

impl Default for DetectorOptions {
    fn default() -> Self {
        let d = DetectorConfig::new(1, 1);
        Self {
            n_anchors: d.n_anchors,
            n_neighbors: d.n_neighbors,
            hidden: d.hidden,
            iou_hidden: d.iou.hidden,
            grid: d.iou.grid,
            k: d.iou.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub ap_mode: ApMode,
    pub score: ScoreKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.25, 0.5],
            ap_mode: ApMode::AllPoint,
            score: ScoreKind::Objectness,
        }
    }
}

/// Every knob of an experiment. The master `seed` drives data generation
/// and, through labeled sub-seeds, both training stages; the `seed` fields
/// inside `pretrain` and `ssl` are overwritten by [`Self::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub label_ratio: f64,
    pub n_holdout: usize,
    pub generator: GeneratorParams,
    pub detector: DetectorOptions,
    pub pretrain: PretrainConfig,
    pub ssl: SslConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 200,
            label_ratio: 0.1,
            n_holdout: 50,
            generator: GeneratorParams::default(),
            detector: DetectorOptions::default(),
            pretrain: PretrainConfig::default(),
            ssl: SslConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The fixed benchmark: 200 scenes, 10% labeled, 200 pretraining
    /// epochs, 30 semi-supervised epochs with a faster EMA (0.99).
    pub fn reference() -> Self {
        let mut c = Self {
            seed: 7,
            ..Self::default()
        };
        c.pretrain.epochs = 200;
        c.ssl.epochs = 30;
        c.ssl.ema_decay = 0.99;
        c.ssl.eval_interval = 5;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be >= 1".into()));
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return Err(Error::Config(format!("label_ratio must be in (0, 1], got {}", self.label_ratio)));
        }
        if self.eval.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval thresholds must lie in [0, 1]".into()));
        }
        self.detector_config().validate()?;
        self.pretrain.augment.validate()?;
        self.ssl.validate()
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let d = &self.detector;
        let n_classes = self.generator.n_classes();
        let f = self.generator.feature_dim;
        DetectorConfig {
            feature_dim: f,
            n_classes,
            n_anchors: d.n_anchors,
            n_neighbors: d.n_neighbors,
            hidden: d.hidden,
            iou: IouHeadConfig {
                feature_dim: f,
                hidden: d.iou_hidden,
                n_classes,
                grid: d.grid,
                k: d.k,
            },
        }
    }

    /// Copy with the stage seeds derived from the master seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = derive_seed(self.seed, "pretrain", 0);
        c.ssl.seed = derive_seed(self.seed, "ssl", 0);
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parse with the JSON path of the offending field in the message.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        parse_json(text, context)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn make_data(&self) -> Result<(DatasetSplit, Vec<SceneSample>)> {
        let split = make_split(self.n_scenes, self.label_ratio, self.seed, &self.generator)?;
        let holdout = make_holdout(self.n_holdout, self.seed, &self.generator)?;
        Ok((split, holdout))
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub pretrain: PretrainOutput,
    pub ssl: SslState,
}

/// Generate data, pretrain, then run semi-supervised training.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (split, holdout) = cfg.make_data()?;
    let (model, _) = Model::new(cfg.detector_config())?;
    let pre = pretrain(&model, &split.labeled, &cfg.pretrain)?;
    let data = SslData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        holdout: &holdout,
    };
    let ssl = ssl_train(&model, &pre.params, data, &cfg.ssl, &mut |_| Ok(()))?;
    Ok(ExperimentResult { pretrain: pre, ssl })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        let mut c = ExperimentConfig::reference();
        c.ssl.lr = 0.1 + 0.2;
        let back = ExperimentConfig::from_json(&c.to_json(), "test").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = ExperimentConfig::from_json(r#"{"seed": 3, "ssl": {"lambda_u": 0.5}}"#, "t").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.ssl.lambda_u, 0.5);
        assert_eq!(c.ssl.n_unlabeled, 8);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"ssl": {"lambda_u": "big"}}"#, "cfg.json").unwrap_err();
        assert!(err.to_string().contains("ssl.lambda_u"), "{err}");
    }

    #[test]
    fn stage_seeds_follow_master() {
        let a = ExperimentConfig { seed: 1, ..Default::default() }.resolved();
        let b = ExperimentConfig { seed: 2, ..Default::default() }.resolved();
        assert_ne!(a.pretrain.seed, b.pretrain.seed);
        assert_ne!(a.ssl.seed, a.pretrain.seed);
    }
}
