use ioumatch_core::detector::{DetectorConfig, Model};
use ioumatch_core::iou_head::{train_iou_head, IouHeadConfig, IouHeadParams, IouTrainConfig};
use ioumatch_core::pseudo_label::{IouThreshold, ThresholdConfig};
use ioumatch_core::ssl::{pretrain, ssl_train, Checkpoint, PretrainConfig, SslConfig, SslData, Stage};
use ioumatch_core::synth::{make_holdout, make_split, DatasetSplit, GeneratorParams, SceneSample};

fn small_data(seed: u64) -> (DatasetSplit, Vec<SceneSample>, GeneratorParams) {
    let g = GeneratorParams::default();
    let split = make_split(12, 0.34, seed, &g).unwrap();
    let holdout = make_holdout(4, seed, &g).unwrap();
    (split, holdout, g)
}

fn model(g: &GeneratorParams) -> Model {
    Model::new(DetectorConfig::new(g.feature_dim, g.n_classes())).unwrap().0
}

fn quick_ssl(epochs: usize) -> SslConfig {
    SslConfig {
        epochs,
        eval_interval: 1,
        ..SslConfig::default()
    }
}

#[test]
fn pretraining_reduces_loss() {
    let (split, _, g) = small_data(1);
    let m = model(&g);
    let cfg = PretrainConfig {
        epochs: 30,
        seed: 5,
        ..PretrainConfig::default()
    };
    let out = pretrain(&m, &split.labeled, &cfg).unwrap();
    let first: f64 = out.loss_history[..3].iter().sum::<f64>() / 3.0;
    let last: f64 = out.loss_history[27..].iter().sum::<f64>() / 3.0;
    assert!(last < first, "loss {first} -> {last}");
    assert!(out.params.is_finite());
}

#[test]
fn pretraining_is_deterministic() {
    let (split, _, g) = small_data(2);
    let m = model(&g);
    let cfg = PretrainConfig {
        epochs: 3,
        seed: 9,
        ..PretrainConfig::default()
    };
    let a = pretrain(&m, &split.labeled, &cfg).unwrap();
    let b = pretrain(&m, &split.labeled, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loss_history, b.loss_history);
}

#[test]
fn unreachable_thresholds_give_no_unsupervised_signal() {
    let (split, holdout, g) = small_data(3);
    let m = model(&g);
    let pre = pretrain(&m, &split.labeled, &PretrainConfig { epochs: 5, ..Default::default() }).unwrap();
    let mut cfg = quick_ssl(2);
    cfg.pseudo.thresholds = ThresholdConfig {
        tau_obj: 1.0,
        tau_cls: 1.0,
        tau_iou: IouThreshold::Global(1.0),
    };
    let data = SslData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        holdout: &holdout,
    };
    let st = ssl_train(&m, &pre.params, data, &cfg, &mut |_| Ok(())).unwrap();
    for row in &st.metrics {
        assert_eq!(row.unsup_loss, 0.0);
        assert_eq!(row.pseudo_count, 0);
    }
}

#[test]
fn frozen_teacher_with_unit_decay() {
    let (split, holdout, g) = small_data(4);
    let m = model(&g);
    let pre = pretrain(&m, &split.labeled, &PretrainConfig { epochs: 2, ..Default::default() }).unwrap();
    let mut cfg = quick_ssl(2);
    cfg.ema_decay = 1.0;
    let data = SslData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        holdout: &holdout,
    };
    let st = ssl_train(&m, &pre.params, data, &cfg, &mut |_| Ok(())).unwrap();
    assert_eq!(st.teacher, pre.params);
    assert_ne!(st.student, pre.params);
}

#[test]
fn ssl_metrics_schedule_and_determinism() {
    let (split, holdout, g) = small_data(5);
    let m = model(&g);
    let pre = pretrain(&m, &split.labeled, &PretrainConfig { epochs: 4, ..Default::default() }).unwrap();
    let mut cfg = quick_ssl(5);
    cfg.eval_interval = 2;
    let data = SslData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        holdout: &holdout,
    };
    let mut seen = Vec::new();
    let a = ssl_train(&m, &pre.params, data, &cfg, &mut |s| {
        seen.push(s.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 2, 4, 5]);
    let epochs: Vec<usize> = a.metrics.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, seen);
    let b = ssl_train(&m, &pre.params, data, &cfg, &mut |_| Ok(())).unwrap();
    assert_eq!(a, b);
    for r in &a.metrics {
        assert!(r.map_50 <= r.map_25 + 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (split, _, g) = small_data(6);
    let m = model(&g);
    let pre = pretrain(&m, &split.labeled, &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
    let ck = Checkpoint {
        stage: Stage::Pretrain,
        epoch: 1,
        model: m.config.clone(),
        student: pre.params.clone(),
        teacher: None,
        optimizer: pre.optimizer.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_json(), ck.to_json());
}

#[test]
fn checkpoint_rejects_wrong_layout() {
    let (split, _, g) = small_data(7);
    let m = model(&g);
    let pre = pretrain(&m, &split.labeled, &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
    let mut other = m.config.clone();
    other.hidden += 1;
    let ck = Checkpoint {
        stage: Stage::Pretrain,
        epoch: 1,
        model: other,
        student: pre.params,
        teacher: None,
        optimizer: pre.optimizer,
    };
    assert!(Checkpoint::from_json(&ck.to_json(), "test").is_err());
}

#[test]
fn iou_head_training_reduces_loss() {
    let (split, _, g) = small_data(8);
    let init = IouHeadParams::new(IouHeadConfig::new(g.feature_dim, g.n_classes()), 3);
    let cfg = IouTrainConfig {
        epochs: 6,
        ..IouTrainConfig::default()
    };
    let (_, losses) = train_iou_head(&split.unlabeled, init, &cfg).unwrap();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
}
