//! Acceptance suite: one PASS/FAIL line per criterion. Runs with
//! `cargo test --test acceptance`; exits nonzero if any criterion fails.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ioumatch_core::detector::Model;
use ioumatch_core::diag::{self, random_detections};
use ioumatch_core::eval::{map_at, ApMode, EvalOptions};
use ioumatch_core::experiment::ExperimentConfig;
use ioumatch_core::geometry::{iou3d, OrientedBox3D};
use ioumatch_core::grid_pool::Seeds;
use ioumatch_core::iou_head::{
    best_iou, iou_l1_loss, iou_optimize, make_iou_samples, train_iou_head, IouHeadConfig, IouHeadParams,
    IouOptimConfig, IouTrainConfig, JitterConfig,
};
use ioumatch_core::pseudo_label::{
    suppress_indices, Detection, IouThreshold, SuppressMode, ThresholdConfig, DEFAULT_SUPPRESS_IOU,
};
use ioumatch_core::ssl::{pretrain, ssl_train, EpochMetrics, InferenceConfig, PseudoLabelConfig, SslConfig, SslData};
use ioumatch_core::synth::{make_holdout, make_split, GeneratorParams, LabeledBox};

// Tolerances and budgets.
const IOU_MC_TOL: f64 = 5e-3;
const ANALYTIC_TOL: f64 = 1e-9;
const GEOMETRY_BUDGET: Duration = Duration::from_secs(60);
const POOL_GRAD_TOL: f64 = 1e-4;
const HEAD_GRAD_TOL: f64 = 1e-3;
const SUPPRESSION_BUDGET: Duration = Duration::from_secs(10);
const IOU_HEAD_BUDGET: Duration = Duration::from_secs(300);
const IOU_HEAD_MAE: f64 = 0.15;
const OPTIM_V_SLACK: f64 = 1e-6;
const SSL_BUDGET: Duration = Duration::from_secs(900);
const AP_TOL: f64 = 1e-12;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn unit_box(c: [f64; 3], yaw: f64) -> OrientedBox3D {
    OrientedBox3D::new(c, [1.0, 1.0, 1.0], yaw).unwrap()
}

fn geometry() -> Outcome {
    let t = Instant::now();
    let offset = iou3d(&unit_box([0.0; 3], 0.0), &unit_box([0.5, 0.0, 0.0], 0.0));
    let coaxial = iou3d(&unit_box([0.0; 3], 0.0), &unit_box([0.0; 3], FRAC_PI_4));
    let analytic_ok = (offset - 1.0 / 3.0).abs() < ANALYTIC_TOL && (coaxial - FRAC_1_SQRT_2).abs() < ANALYTIC_TOL;
    let r = diag::iou_oracle(1000, 1_000_000, 2024);
    let elapsed = t.elapsed();
    outcome(
        analytic_ok && r.max_error < IOU_MC_TOL && elapsed < GEOMETRY_BUDGET,
        format!(
            "{} pairs x 1e6 samples, max |exact-mc| {:.3e} (< {IOU_MC_TOL:e}); offset {offset:.12}, coaxial pi/4 {coaxial:.12}; {:.1}s",
            r.checked,
            r.max_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn differentiability() -> Outcome {
    let pool = diag::pool_grad_check(100, 11).unwrap();
    let head = diag::quick_trained_head(12).unwrap();
    let full = diag::head_grad_check(50, 12, &head).unwrap();
    let sweep = diag::pool_continuity(13).unwrap();
    let ok = pool.checked >= 100
        && pool.max_error < POOL_GRAD_TOL
        && full.checked >= 50
        && full.max_error < HEAD_GRAD_TOL
        && sweep.passed;
    outcome(
        ok,
        format!(
            "pool {} configs max rel {:.2e} ({} skipped); head {} configs max rel {:.2e} ({} skipped); size sweep grid step {:.2e} -> {:.2e} with fixed neighbors while box-query count jumps {} times",
            pool.checked,
            pool.max_error,
            pool.skipped,
            full.checked,
            full.max_error,
            full.skipped,
            sweep.coarse.grid_max_step,
            sweep.fine.grid_max_step,
            sweep.fine.query_jumps
        ),
    )
}

fn constants() -> Outcome {
    let th = ThresholdConfig::default();
    let kitti = ThresholdConfig::kitti();
    let head = IouHeadConfig::new(16, 3);
    let ssl = SslConfig::default();
    let jitter = JitterConfig::default();
    let optim = IouOptimConfig::default();
    let inference = InferenceConfig::default();
    let pseudo = PseudoLabelConfig::default();
    let exp = ExperimentConfig::default();
    let checks = [
        ("tau_obj", th.tau_obj == 0.9),
        ("tau_cls", th.tau_cls == 0.9),
        ("tau_iou", th.tau_iou == IouThreshold::Global(0.25)),
        ("kitti", kitti.tau_iou == IouThreshold::PerClass(vec![0.5, 0.25, 0.25])),
        ("k", head.k == 3),
        ("D", head.grid == 4),
        ("lambda_u", ssl.lambda_u == 2.0),
        ("batch", ssl.n_labeled == 4 && ssl.n_unlabeled == 8),
        ("jitter sigma", jitter.sigma_factor == 0.3),
        ("optim T", optim.steps == 10),
        ("optim step", (1e-4..=5e-4).contains(&optim.step)),
        ("test nms", inference.iou_thresh == 0.25 && DEFAULT_SUPPRESS_IOU == 0.25),
        ("train suppression", pseudo.iou_thresh == 0.25 && pseudo.suppress == SuppressMode::IouLhs),
        ("experiment defaults", exp.ssl == ssl && exp.pretrain.batch_size == 4),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} constants match", checks.len())
        } else {
            format!("mismatch: {}", failed.join(", "))
        },
    )
}

/// Brute-force oracle: the greedy seed set is the unique subset `K` where a
/// detection is in `K` exactly when no higher-ranked member of `K` of the
/// same class overlaps it at `>= thresh`. Every other detection belongs to
/// the first seed in rank order that overlaps it.
fn oracle_keep(dets: &[Detection], mode: SuppressMode, thresh: f64) -> Vec<usize> {
    let n = dets.len();
    let score = |d: &Detection| match mode {
        SuppressMode::ObjNms => d.objectness,
        _ => d.objectness * d.pred_iou,
    };
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| score(&dets[b]).total_cmp(&score(&dets[a])).then(a.cmp(&b)));
    let mut pos = vec![0; n];
    for (p, &i) in rank.iter().enumerate() {
        pos[i] = p;
    }
    let matrix: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| dets[i].class_id() == dets[j].class_id() && iou3d(&dets[i].bbox, &dets[j].bbox) >= thresh)
                .collect()
        })
        .collect();
    let overlap = |i: usize, j: usize| matrix[i][j];
    let mut fixed_points = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && inside(j) && pos[j] < pos[i] && overlap(i, j));
            inside(i) == !blocked
        });
        if consistent {
            fixed_points.push(mask);
        }
    }
    assert_eq!(fixed_points.len(), 1, "greedy seed set must be unique");
    let seeds = fixed_points[0];
    if mode != SuppressMode::IouLhs {
        return (0..n).filter(|i| seeds & (1 << i) != 0).collect();
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &i in &rank {
        if seeds & (1 << i) != 0 {
            members[i].push(i);
            continue;
        }
        let owner = rank
            .iter()
            .copied()
            .find(|&s| seeds & (1 << s) != 0 && pos[s] < pos[i] && overlap(i, s))
            .expect("non-seed has an owning seed");
        members[owner].push(i);
    }
    let mut keep: Vec<usize> = members
        .iter()
        .flat_map(|m| m[..m.len().div_ceil(2)].iter().copied())
        .collect();
    keep.sort_unstable();
    keep
}

fn suppression() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n_instances = 300;
    let mut mismatches = 0;
    for _ in 0..n_instances {
        let dets = random_detections(&mut rng, 12, 2);
        for mode in [SuppressMode::ObjNms, SuppressMode::IouNms, SuppressMode::IouLhs] {
            if suppress_indices(&dets, mode, 0.25) != oracle_keep(&dets, mode, 0.25) {
                mismatches += 1;
            }
        }
    }
    let inv = diag::lhs_check(2000, 98);
    let elapsed = t.elapsed();
    outcome(
        mismatches == 0 && inv.passed && elapsed < SUPPRESSION_BUDGET,
        format!(
            "{n_instances} instances x 3 modes vs brute-force enumerator, {mismatches} mismatches; {} invariant instances, {} violations; {:.1}s",
            inv.checked,
            inv.max_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn iou_head() -> Outcome {
    let t = Instant::now();
    let g = GeneratorParams::default();
    let train = make_split(200, 1.0, 31, &g).unwrap().labeled;
    let held = make_holdout(50, 31, &g).unwrap();
    let init = IouHeadParams::new(IouHeadConfig::new(g.feature_dim, g.n_classes()), 31);
    let cfg = IouTrainConfig {
        epochs: 10,
        seed: 31,
        ..IouTrainConfig::default()
    };
    let (trained, _) = train_iou_head(&train, init, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let samples = make_iou_samples(&held, &JitterConfig::default(), &mut rng).unwrap();
    let mae = iou_l1_loss(&trained.head, &trained.params.data, &held, &samples, None).unwrap();

    let optim = IouOptimConfig::default();
    let proposals: Vec<_> = samples.iter().filter(|s| s.target < 1.0).take(200).collect();
    let (mut dv, mut dtrue) = (0.0, 0.0);
    for s in &proposals {
        let scene = &held[s.scene];
        let seeds = Seeds::from_scene(scene);
        let (refined, trace) = iou_optimize(
            &s.bbox,
            &seeds,
            &trained.head,
            &trained.params.data,
            s.class_id,
            optim.step,
            optim.steps,
        )
        .unwrap();
        let gts: &[LabeledBox] = scene.labels.as_deref().unwrap();
        dv += trace[trace.len() - 1] - trace[0];
        dtrue += best_iou(&refined, gts) - best_iou(&s.bbox, gts);
    }
    let n = proposals.len() as f64;
    let (dv, dtrue) = (dv / n, dtrue / n);
    let elapsed = t.elapsed();
    outcome(
        mae < IOU_HEAD_MAE && proposals.len() >= 100 && dv >= -OPTIM_V_SLACK && dtrue > 0.0 && elapsed < IOU_HEAD_BUDGET,
        format!(
            "200 training scenes, held-out MAE {mae:.4} (< {IOU_HEAD_MAE}) on {} boxes; {} proposals: mean dv {dv:.3e}, mean true-IoU gain {dtrue:.3e}; {:.1}s",
            samples.len(),
            proposals.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn ssl_end_to_end(rows_out: &mut Vec<EpochMetrics>) -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::reference().resolved();
    let (split, holdout) = cfg.make_data().unwrap();
    let (model, _) = Model::new(cfg.detector_config()).unwrap();
    let pre = pretrain(&model, &split.labeled, &cfg.pretrain).unwrap();
    let data = SslData {
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        holdout: &holdout,
    };
    let st = ssl_train(&model, &pre.params, data, &cfg.ssl, &mut |_| Ok(())).unwrap();
    let main_time = t.elapsed();
    let rows = &st.metrics;
    let (first, last) = (&rows[0], rows.last().unwrap());
    let a = last.map_25 >= first.map_25;
    let b = last.coverage_25 > first.coverage_25;
    let c = last.pseudo_true_iou > last.raw_true_iou;
    rows_out.extend_from_slice(rows);

    // Informational control: same seed, no unsupervised term.
    let control_cfg = SslConfig {
        lambda_u: 0.0,
        ..cfg.ssl.clone()
    };
    let control = ssl_train(&model, &pre.params, data, &control_cfg, &mut |_| Ok(())).unwrap();
    let cl = control.metrics.last().unwrap();
    rows_out.extend_from_slice(&control.metrics);
    let total = t.elapsed();
    outcome(
        a && b && c && total < SSL_BUDGET,
        format!(
            "(a) mAP@0.25 {:.4} -> {:.4} {}; (b) coverage@0.25 {:.4} -> {:.4} {}; (c) pseudo true IoU {:.4} vs unfiltered {:.4} {}; \
             mAP@0.5 {:.4} -> {:.4}; lambda_u=0 control mAP@0.25 {:.4} mAP@0.5 {:.4} (informational); {:.0}s run, {:.0}s with control",
            first.map_25,
            last.map_25,
            if a { "ok" } else { "FAIL" },
            first.coverage_25,
            last.coverage_25,
            if b { "ok" } else { "FAIL" },
            last.pseudo_true_iou,
            last.raw_true_iou,
            if c { "ok" } else { "FAIL" },
            first.map_50,
            last.map_50,
            cl.map_25,
            cl.map_50,
            main_time.as_secs_f64(),
            total.as_secs_f64()
        ),
    )
}

fn pred(scene_box: [f64; 3], class_id: usize, n_classes: usize, score: f64) -> Detection {
    let mut probs = vec![0.0; n_classes];
    probs[class_id] = 1.0;
    Detection {
        bbox: unit_box(scene_box, 0.0),
        objectness: score,
        class_probs: probs,
        pred_iou: 1.0,
        anchor: scene_box,
    }
}

fn evaluator(ssl_rows: &[EpochMetrics]) -> Outcome {
    let gt = |c: [f64; 3], class_id: usize| LabeledBox {
        bbox: unit_box(c, 0.0),
        class_id,
    };
    let gts = vec![
        vec![gt([0.0, 0.0, 0.0], 0), gt([5.0, 0.0, 0.0], 0)],
        vec![gt([0.0, 0.0, 0.0], 0), gt([0.0, 5.0, 0.0], 1)],
    ];
    let preds = vec![
        vec![
            pred([0.0, 0.0, 0.0], 0, 2, 0.9),
            pred([10.0, 0.0, 0.0], 0, 2, 0.8),
            pred([0.0, 0.0, 0.0], 0, 2, 0.6),
            pred([5.0, 0.0, 0.0], 0, 2, 0.5),
            pred([0.0, 0.0, 0.0], 1, 2, 0.99),
            pred([0.0, 5.0, 0.0], 1, 2, 0.3),
        ],
        vec![pred([0.5, 0.0, 0.0], 0, 2, 0.7), pred([0.0, 5.0, 0.0], 1, 2, 0.95)],
    ];
    // Class 0 ranks T F T F T at 0.25 and T F F F T at 0.5 (the 0.5 offset
    // box has IoU 1/3); class 1 ranks F T F at both thresholds.
    let expected = [
        (ApMode::AllPoint, 113.0 / 180.0, 29.0 / 60.0),
        (ApMode::RPoint(40), 751.0 / 1200.0, 191.0 / 400.0),
    ];
    let mut worst: f64 = 0.0;
    let mut order_ok = true;
    for (mode, want25, want50) in expected {
        let opts = EvalOptions {
            mode,
            ..EvalOptions::new(2)
        };
        let r = map_at(&preds, &gts, &[0.25, 0.5], &opts).unwrap();
        worst = worst.max((r[0].map - want25).abs()).max((r[1].map - want50).abs());
        order_ok &= r[1].map <= r[0].map;
    }
    let rows_ok = ssl_rows.iter().all(|m| m.map_50 <= m.map_25);
    outcome(
        worst < AP_TOL && order_ok && rows_ok,
        format!(
            "micro-dataset all-point and r40 max deviation {worst:.1e} (< {AP_TOL:e}); mAP@0.5 <= mAP@0.25 on micro-dataset and {} training metric rows",
            ssl_rows.len()
        ),
    )
}

fn cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_ioumatch"))
        .args(args)
        .env("IOUMATCH_LOG", "error")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Every command of the pipeline on a small dataset; returns the output
/// tree and the concatenated stdout with the run root stripped.
fn pipeline(root: &Path) -> (Vec<(String, Vec<u8>)>, Vec<u8>) {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let (d, pre, ssl) = (root.join("d"), root.join("pre"), root.join("ssl"));
    let (preds, report, pr) = (root.join("preds.json"), root.join("report.json"), root.join("pr"));
    let mut stdout = Vec::new();
    for args in [
        vec!["gen", "--scenes", "8", "--label-ratio", "0.25", "--holdout", "3", "--seed", "5", "--out", &s(&d)],
        vec!["pretrain", "--data", &s(&d), "--out", &s(&pre), "--epochs", "4", "--eval-interval", "2", "--seed", "5"],
        vec![
            "ssl",
            "--data",
            &s(&d),
            "--checkpoint",
            &s(&pre.join("pretrain.json")),
            "--out",
            &s(&ssl),
            "--epochs",
            "2",
            "--eval-interval",
            "1",
            "--seed",
            "5",
        ],
        vec!["predict", "--checkpoint", &s(&ssl.join("ssl.json")), "--data", &s(&d), "--out", &s(&preds)],
        vec!["eval", "--predictions", &s(&preds), "--data", &s(&d), "--out", &s(&report), "--pr-csv", &s(&pr)],
        vec!["diag", "lhs-check", "-n", "300", "--seed", "5"],
    ] {
        stdout.extend(cli(&args));
    }
    let text = String::from_utf8(stdout).unwrap().replace(root.to_str().unwrap(), "<root>");
    (tree(root), text.into_bytes())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, sa) = pipeline(a.path());
    let (tb, sb) = pipeline(b.path());
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_listing = ta.iter().map(|x| &x.0).eq(tb.iter().map(|x| &x.0));
    outcome(
        same_listing && differing.is_empty() && sa == sb,
        format!(
            "gen, pretrain, ssl, predict, eval, diag run twice: {} files compared, {} differ{}; stdout {}",
            ta.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" ({})", differing.join(", "))
            },
            if sa == sb { "identical" } else { "differs" }
        ),
    )
}

fn main() {
    let mut ssl_rows = Vec::new();
    let mut all = true;
    let mut report = |n: usize, name: &str, o: Outcome| {
        all &= o.passed;
        println!("criterion {n} [{name}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "geometry oracle", geometry());
    report(2, "differentiability", differentiability());
    report(3, "constants", constants());
    report(4, "suppression", suppression());
    report(5, "iou head", iou_head());
    report(6, "ssl end-to-end", ssl_end_to_end(&mut ssl_rows));
    report(7, "evaluator", evaluator(&ssl_rows));
    report(8, "determinism", determinism());
    if !all {
        std::process::exit(1);
    }
}
