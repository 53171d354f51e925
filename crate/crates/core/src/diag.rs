//! Standalone property batteries: exact vs Monte-Carlo IoU, analytic vs
//! finite-difference gradients, and suppression invariants.

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{iou3d, iou3d_monte_carlo, OrientedBox3D};
use crate::grid_pool::{box_query_pool, pool, pool_with_jacobian, Seeds};
use crate::iou_head::{jitter_box, train_iou_head, IouHeadConfig, IouHeadParams, IouTrainConfig, JitterConfig};
use crate::pseudo_label::{clusters, suppress_indices, Detection, SuppressMode};
use crate::seed::derive_seed;
use crate::synth::{generate_scene, GeneratorParams, SceneSample};

pub const IOU_ORACLE_TOL: f64 = 5e-3;
pub const POOL_GRAD_TOL: f64 = 1e-4;
pub const HEAD_GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagReport {
    pub name: String,
    pub checked: usize,
    /// Configurations rejected because a finite-difference probe crossed a
    /// neighbor switch or activation kink.
    pub skipped: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for DiagReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} checked, {} skipped, max error {:.3e} (tolerance {:.0e}) {}",
            self.name,
            self.checked,
            self.skipped,
            self.max_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn report(name: &str, checked: usize, skipped: usize, max_error: f64, tolerance: f64, extra_ok: bool) -> DiagReport {
    DiagReport {
        name: name.into(),
        checked,
        skipped,
        max_error,
        tolerance,
        passed: extra_ok && max_error < tolerance,
    }
}

/// A random box pair, the second placed near the first so most pairs
/// overlap.
pub fn random_box_pair(rng: &mut impl Rng) -> (OrientedBox3D, OrientedBox3D) {
    let mut one = |base: [f64; 3]| {
        let c = [
            base[0] + rng.random_range(-0.8..0.8),
            base[1] + rng.random_range(-0.8..0.8),
            base[2] + rng.random_range(-0.5..0.5),
        ];
        let s = [
            rng.random_range(0.3..2.0),
            rng.random_range(0.3..2.0),
            rng.random_range(0.3..2.0),
        ];
        OrientedBox3D::new(c, s, rng.random_range(-PI..PI)).expect("valid random box")
    };
    let a = one([0.0; 3]);
    let b = one(a.center());
    (a, b)
}

/// Max |exact - Monte-Carlo| IoU over `n_pairs` random pairs.
pub fn iou_oracle(n_pairs: usize, mc_samples: usize, seed: u64) -> DiagReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for i in 0..n_pairs {
        let (a, b) = random_box_pair(&mut rng);
        let exact = iou3d(&a, &b);
        let mc = iou3d_monte_carlo(&a, &b, mc_samples, derive_seed(seed, "mc", i as u64));
        max_err = max_err.max((exact - mc).abs());
    }
    report("iou-oracle", n_pairs, 0, max_err, IOU_ORACLE_TOL, true)
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A jittered ground-truth box of a synthetic scene.
fn random_config(i: usize, seed: u64, params: &GeneratorParams) -> Result<(SceneSample, OrientedBox3D)> {
    let scene = generate_scene(derive_seed(seed, "diag-scene", i as u64), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "diag-box", i as u64));
    let labels = scene.labels.as_ref().expect("generated scenes carry labels");
    let gt = labels[rng.random_range(0..labels.len())].bbox;
    let jitter = JitterConfig {
        sigma_factor: 0.15,
        n_jitters_per_box: 1,
    };
    Ok((scene, jitter_box(&gt, &jitter, &mut rng)))
}

/// Box with one of its seven parameters (center, size, yaw) shifted.
fn perturb(b: &OrientedBox3D, param: usize, h: f64) -> OrientedBox3D {
    let mut c = b.center();
    let mut s = b.size();
    let mut yaw = b.yaw();
    match param {
        0..=2 => c[param] += h,
        3..=5 => s[param - 3] += h,
        _ => yaw += h,
    }
    OrientedBox3D::new(c, s, yaw).expect("perturbed box stays valid")
}

/// Grid-pooling Jacobian vs central differences, one relative error per
/// box parameter column, on `n` configurations without neighbor switches.
pub fn pool_grad_check(n: usize, seed: u64) -> Result<DiagReport> {
    let params = GeneratorParams::default();
    let (d, k) = (4, 3);
    let (mut checked, mut skipped, mut max_err) = (0, 0, 0.0f64);
    let mut i = 0;
    while checked < n && i < 20 * n.max(1) {
        let (scene, b) = random_config(i, seed, &params)?;
        i += 1;
        let seeds = Seeds::from_scene(&scene);
        let (base, jac) = pool_with_jacobian(&b, &seeds, d, k)?;
        let mut errs = Vec::with_capacity(7);
        let mut switched = false;
        for p in 0..7 {
            let plus = pool(&perturb(&b, p, FD_STEP), &seeds, d, k)?;
            let minus = pool(&perturb(&b, p, -FD_STEP), &seeds, d, k)?;
            if plus.neighbor_ids != base.neighbor_ids || minus.neighbor_ids != base.neighbor_ids {
                switched = true;
                break;
            }
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for m in 0..base.len() {
                for f in 0..seeds.feature_dim() {
                    analytic.push(match p {
                        0..=2 => jac.d_center[m][f * 3 + p],
                        3..=5 => jac.d_size[m][f * 3 + p - 3],
                        _ => jac.d_yaw[m][f],
                    });
                    numeric.push((plus.features[m][f] - minus.features[m][f]) / (2.0 * FD_STEP));
                }
            }
            errs.push(rel_error(&analytic, &numeric));
        }
        if switched {
            skipped += 1;
            continue;
        }
        checked += 1;
        max_err = errs.into_iter().fold(max_err, f64::max);
    }
    Ok(report("grad-check/pool", checked, skipped, max_err, POOL_GRAD_TOL, checked >= n))
}

/// A head trained briefly on a few scenes, so its gradients are not those
/// of a random network.
pub fn quick_trained_head(seed: u64) -> Result<IouHeadParams> {
    let params = GeneratorParams::default();
    let scenes = (0..12)
        .map(|i| generate_scene(derive_seed(seed, "head-scene", i), &params))
        .collect::<Result<Vec<_>>>()?;
    let init = IouHeadParams::new(IouHeadConfig::new(params.feature_dim, params.n_classes()), seed);
    let cfg = IouTrainConfig {
        epochs: 3,
        seed,
        ..IouTrainConfig::default()
    };
    Ok(train_iou_head(&scenes, init, &cfg)?.0)
}

/// Full-head gradient of the selected IoU estimate with respect to center
/// and size vs central differences.
pub fn head_grad_check(n: usize, seed: u64, head: &IouHeadParams) -> Result<DiagReport> {
    let params = GeneratorParams::default();
    let (mut checked, mut skipped, mut max_err) = (0, 0, 0.0f64);
    let mut i = 0;
    while checked < n && i < 20 * n.max(1) {
        let (scene, b) = random_config(i, derive_seed(seed, "head", 0), &params)?;
        let class_id = i % head.head.config.n_classes;
        i += 1;
        let seeds = Seeds::from_scene(&scene);
        let h = &head.head;
        let g = h.estimate_with_gradient(&head.params.data, &b, &seeds, class_id)?;
        let base_ids = h.pool(&b, &seeds)?.neighbor_ids;
        let mut analytic = Vec::with_capacity(6);
        let mut numeric = Vec::with_capacity(6);
        let mut kink = false;
        for p in 0..6 {
            let bp = perturb(&b, p, FD_STEP);
            let bm = perturb(&b, p, -FD_STEP);
            if h.pool(&bp, &seeds)?.neighbor_ids != base_ids || h.pool(&bm, &seeds)?.neighbor_ids != base_ids {
                kink = true;
                break;
            }
            let fp = h.estimate(&head.params.data, &bp, &seeds, class_id)?;
            let fm = h.estimate(&head.params.data, &bm, &seeds, class_id)?;
            let fwd = (fp - g.value) / FD_STEP;
            let bwd = (g.value - fm) / FD_STEP;
            // One-sided slopes disagree across a ReLU or max-pool switch.
            if (fwd - bwd).abs() > 1e-3 * (fwd.abs().max(bwd.abs()) + 1e-6) {
                kink = true;
                break;
            }
            numeric.push((fp - fm) / (2.0 * FD_STEP));
            analytic.push(if p < 3 { g.d_center[p] } else { g.d_size[p - 3] });
        }
        if kink {
            skipped += 1;
            continue;
        }
        checked += 1;
        max_err = max_err.max(rel_error(&analytic, &numeric));
    }
    Ok(report("grad-check/head", checked, skipped, max_err, HEAD_GRAD_TOL, checked >= n))
}

/// Adjacent-step changes along a sweep of box scale factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats {
    pub steps: usize,
    /// Largest L2 change of the concatenated grid features.
    pub grid_max_step: f64,
    /// Steps where some grid point's neighbor set changed.
    pub grid_switches: usize,
    /// Steps where the box-query member count changed.
    pub query_jumps: usize,
    /// Largest absolute change of the member count.
    pub query_max_jump: usize,
}

/// Scale the size of `b` by `lo..=hi` in `steps` equal increments and
/// record how grid pooling and box-query pooling respond.
pub fn size_sweep(b: &OrientedBox3D, seeds: &Seeds, lo: f64, hi: f64, steps: usize) -> Result<SweepStats> {
    Ok(sweep(b, seeds, lo, hi, steps, false)?.expect("sweep runs to completion"))
}

/// `None` when `abort_on_switch` is set and a neighbor switch occurs.
fn sweep(b: &OrientedBox3D, seeds: &Seeds, lo: f64, hi: f64, steps: usize, abort_on_switch: bool) -> Result<Option<SweepStats>> {
    let (d, k) = (4, 3);
    let at = |t: usize| {
        let f = lo + (hi - lo) * t as f64 / steps as f64;
        let s = b.size();
        b.with_size([s[0] * f, s[1] * f, s[2] * f])
    };
    let mut stats = SweepStats {
        steps,
        grid_max_step: 0.0,
        grid_switches: 0,
        query_jumps: 0,
        query_max_jump: 0,
    };
    let mut prev = pool(&at(0)?, seeds, d, k)?;
    let mut prev_n = box_query_pool(&at(0)?, seeds).ids.len();
    for t in 1..=steps {
        let bt = at(t)?;
        let cur = pool(&bt, seeds, d, k)?;
        let n = box_query_pool(&bt, seeds).ids.len();
        let diff: f64 = cur
            .features
            .iter()
            .flatten()
            .zip(prev.features.iter().flatten())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        stats.grid_max_step = stats.grid_max_step.max(diff);
        if cur.neighbor_ids != prev.neighbor_ids {
            if abort_on_switch {
                return Ok(None);
            }
            stats.grid_switches += 1;
        }
        stats.query_jumps += usize::from(n != prev_n);
        stats.query_max_jump = stats.query_max_jump.max(n.abs_diff(prev_n));
        prev = cur;
        prev_n = n;
    }
    Ok(Some(stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuityReport {
    pub scene: usize,
    pub window: (f64, f64),
    pub coarse: SweepStats,
    pub fine: SweepStats,
    /// Grid step shrinks with the sweep step while box-query still jumps
    /// by whole points.
    pub passed: bool,
}

impl fmt::Display for ContinuityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pool-continuity: scale {:.2}..{:.2}, grid max step {:.3e} -> {:.3e} ({} -> {} steps, no neighbor switch), \
             box-query count jumps {} -> {} (max {}) {}",
            self.window.0,
            self.window.1,
            self.coarse.grid_max_step,
            self.fine.grid_max_step,
            self.coarse.steps,
            self.fine.steps,
            self.coarse.query_jumps,
            self.fine.query_jumps,
            self.fine.query_max_jump,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Find a scale window on a synthetic scene where the grid neighbor sets
/// stay fixed but seeds cross the box surface, then sweep it at two
/// resolutions.
pub fn pool_continuity(seed: u64) -> Result<ContinuityReport> {
    let params = GeneratorParams::default();
    let (coarse_steps, fine_steps) = (20, 200);
    for i in 0..200 {
        let scene = generate_scene(derive_seed(seed, "sweep-scene", i as u64), &params)?;
        let seeds = Seeds::from_scene(&scene);
        let labels = scene.labels.as_ref().expect("generated scenes carry labels");
        for gt in labels {
            for j in 0..10 {
                let lo = 0.9 + 0.01 * j as f64;
                let hi = lo + 0.01;
                let count = |f: f64| -> Result<usize> {
                    let s = gt.bbox.size();
                    Ok(box_query_pool(&gt.bbox.with_size([s[0] * f, s[1] * f, s[2] * f])?, &seeds).ids.len())
                };
                if count(lo)? == count(hi)? {
                    continue;
                }
                let Some(fine) = sweep(&gt.bbox, &seeds, lo, hi, fine_steps, true)? else {
                    continue;
                };
                let coarse = size_sweep(&gt.bbox, &seeds, lo, hi, coarse_steps)?;
                let passed = fine.grid_max_step < coarse.grid_max_step / 5.0 && fine.query_max_jump >= 1;
                return Ok(ContinuityReport {
                    scene: i,
                    window: (lo, hi),
                    coarse,
                    fine,
                    passed,
                });
            }
        }
    }
    Err(Error::Empty("no sweep window without grid neighbor switches".into()))
}

/// Random detections with overlapping groups for suppression tests.
pub fn random_detections(rng: &mut impl Rng, max_n: usize, n_classes: usize) -> Vec<Detection> {
    let n = rng.random_range(1..=max_n);
    let n_groups = rng.random_range(1..=3usize);
    let groups: Vec<[f64; 3]> = (0..n_groups)
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.5])
        .collect();
    (0..n)
        .map(|_| {
            let g = groups[rng.random_range(0..n_groups)];
            let c = [
                g[0] + rng.random_range(-0.4..0.4),
                g[1] + rng.random_range(-0.4..0.4),
                g[2] + rng.random_range(-0.1..0.1),
            ];
            let s = [rng.random_range(0.6..1.2), rng.random_range(0.6..1.2), rng.random_range(0.6..1.2)];
            let class_id = rng.random_range(0..n_classes);
            let mut probs = vec![0.1 / (n_classes.max(2) - 1) as f64; n_classes];
            probs[class_id] = 1.0 - 0.1 * (n_classes > 1) as u8 as f64;
            Detection {
                bbox: OrientedBox3D::new(c, s, rng.random_range(-PI..PI)).expect("valid box"),
                objectness: rng.random::<f64>(),
                class_probs: probs,
                pred_iou: rng.random::<f64>(),
                anchor: c,
            }
        })
        .collect()
}

/// Suppression invariants on `n` random instances: NMS outputs are
/// pairwise below threshold within a class, LHS keeps `sum ceil(n_c / 2)`
/// and contains the IoU-NMS output, and shuffling the input does not
/// change the kept set.
pub fn lhs_check(n: usize, seed: u64) -> DiagReport {
    let thresh = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    for _ in 0..n {
        let dets = random_detections(&mut rng, 12, 2);
        let lhs = suppress_indices(&dets, SuppressMode::IouLhs, thresh);
        let expected: usize = clusters(&dets, SuppressMode::IouLhs, thresh)
            .iter()
            .map(|c| c.len().div_ceil(2))
            .sum();
        let nms = suppress_indices(&dets, SuppressMode::IouNms, thresh);
        let mut ok = lhs.len() == expected && nms.iter().all(|i| lhs.contains(i));
        for mode in [SuppressMode::ObjNms, SuppressMode::IouNms] {
            let kept = suppress_indices(&dets, mode, thresh);
            for (x, &i) in kept.iter().enumerate() {
                for &j in &kept[x + 1..] {
                    if dets[i].class_id() == dets[j].class_id() && iou3d(&dets[i].bbox, &dets[j].bbox) >= thresh {
                        ok = false;
                    }
                }
            }
        }
        let mut perm: Vec<usize> = (0..dets.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Detection> = perm.iter().map(|&i| dets[i].clone()).collect();
        let mut back: Vec<usize> = suppress_indices(&shuffled, SuppressMode::IouLhs, thresh)
            .into_iter()
            .map(|i| perm[i])
            .collect();
        back.sort_unstable();
        ok &= back == lhs;
        violations += usize::from(!ok);
    }
    report("lhs-check", n, 0, violations as f64, 0.5, true)
}
