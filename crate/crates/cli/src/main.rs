use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ioumatch_core::detector::Model;
use ioumatch_core::diag::{self, DiagReport};
use ioumatch_core::eval::{map_at, write_pr_csv, ApMode, EvalOptions, PredictionFile, ScenePredictions, ScoreKind};
use ioumatch_core::experiment::ExperimentConfig;
use ioumatch_core::parse_json;
use ioumatch_core::ssl::{
    metrics_csv, predict, pretrain_observed, snapshot_metrics, ssl_train, Checkpoint, EpochMetrics, SslData, Stage,
};
use ioumatch_core::synth::{make_holdout, make_split, read_dataset, read_holdout, write_dataset, write_holdout, SceneSample};

#[derive(Parser)]
#[command(name = "ioumatch", version, about = "IoU-aware semi-supervised 3D detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train split plus held-out scenes).
    Gen(GenArgs),
    /// Supervised pre-training on the labeled scenes.
    Pretrain(PretrainArgs),
    /// Teacher-student training from a pre-training checkpoint.
    Ssl(SslArgs),
    /// Run a checkpoint over a dataset split and write detections.
    Predict(PredictArgs),
    /// Score a predictions file against dataset ground truth.
    Eval(EvalArgs),
    /// Standalone numerical checks.
    Diag(DiagArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long, value_parser = parse_label_ratio)]
    label_ratio: Option<f64>,
    /// Number of held-out evaluation scenes.
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SslArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pre-training checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Holdout,
    Labeled,
    Unlabeled,
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "holdout")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    /// Skip IoU-guided box refinement.
    #[arg(long)]
    no_optimize: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Objectness,
    /// Objectness times predicted IoU.
    #[value(name = "s-v")]
    SV,
}

impl From<Score> for ScoreKind {
    fn from(s: Score) -> Self {
        match s {
            Score::Objectness => ScoreKind::Objectness,
            Score::SV => ScoreKind::SV,
        }
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "holdout")]
    split: Split,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// `all` or `rN` (e.g. `r40`).
    #[arg(long, value_parser = parse_ap_mode)]
    ap_mode: Option<ApMode>,
    #[arg(long, value_enum)]
    score: Option<Score>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-threshold precision/recall CSVs.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiagKind {
    IouOracle,
    GradCheck,
    LhsCheck,
}

#[derive(clap::Args)]
struct DiagArgs {
    #[arg(value_enum)]
    kind: DiagKind,
    /// Number of random cases (default depends on the check).
    #[arg(short)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo samples per pair for `iou-oracle`.
    #[arg(long, default_value_t = 1_000_000)]
    mc_samples: usize,
}

fn parse_label_ratio(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must be in (0, 1], got {v}"))
    }
}

fn parse_ap_mode(s: &str) -> std::result::Result<ApMode, String> {
    s.parse().map_err(|e: ioumatch_core::Error| e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::read(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.scenes {
        cfg.n_scenes = n;
    }
    if let Some(r) = args.label_ratio {
        cfg.label_ratio = r;
    }
    if let Some(h) = args.holdout {
        cfg.n_holdout = h;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.generator.validate()?;
    let split = make_split(cfg.n_scenes, cfg.label_ratio, cfg.seed, &cfg.generator)?;
    let holdout = make_holdout(cfg.n_holdout, cfg.seed, &cfg.generator)?;
    write_dataset(&args.out, &split, cfg.seed, &cfg.generator)?;
    if !holdout.is_empty() {
        write_holdout(&args.out, &holdout)?;
    }
    println!(
        "wrote {} labeled, {} unlabeled and {} held-out scenes to {}",
        split.labeled.len(),
        split.unlabeled.len(),
        holdout.len(),
        args.out.display()
    );
    Ok(())
}

struct Dataset {
    labeled: Vec<SceneSample>,
    unlabeled: Vec<SceneSample>,
    holdout: Vec<SceneSample>,
    class_names: Vec<String>,
}

fn load_dataset(dir: &Path, cfg: &mut ExperimentConfig) -> Result<Dataset> {
    let (split, manifest) = read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let holdout = read_holdout(dir)?;
    // The data decides feature width and class count.
    cfg.generator = manifest.params.clone();
    Ok(Dataset {
        labeled: split.labeled,
        unlabeled: split.unlabeled,
        holdout,
        class_names: manifest.params.class_priors.iter().map(|c| c.name.clone()).collect(),
    })
}

fn ssl_data(d: &Dataset) -> SslData<'_> {
    SslData {
        labeled: &d.labeled,
        unlabeled: &d.unlabeled,
        holdout: &d.holdout,
    }
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(i) = args.eval_interval {
        cfg.pretrain.eval_interval = i;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data = load_dataset(&args.data, &mut cfg)?;
    cfg.validate()?;
    let cfg = cfg.resolved();
    create_dir(&args.out)?;
    write_file(&args.out.join("config.json"), &cfg.to_json())?;

    let (model, _) = Model::new(cfg.detector_config())?;
    let sd = ssl_data(&data);
    let epochs = cfg.pretrain.epochs;
    let interval = cfg.pretrain.eval_interval;
    let metrics_path = args.out.join("metrics.csv");
    let mut rows: Vec<EpochMetrics> = Vec::new();
    let out = pretrain_observed(&model, &data.labeled, &cfg.pretrain, &mut |epoch, params, loss| {
        if epoch % interval == 0 || epoch == epochs {
            let m = snapshot_metrics(&model, &params.data, &params.data, &sd, &cfg.ssl, epoch, (loss, 0.0))?;
            log::info!("pretrain epoch {epoch}: loss {loss:.4} mAP@0.25 {:.4} mAP@0.5 {:.4}", m.map_25, m.map_50);
            rows.push(m);
            fs::write(&metrics_path, metrics_csv(&rows))
                .map_err(|e| ioumatch_core::Error::Io { path: metrics_path.display().to_string(), source: e })?;
        }
        Ok(())
    })?;
    if epochs == 0 {
        let m = snapshot_metrics(&model, &out.params.data, &out.params.data, &sd, &cfg.ssl, 0, (0.0, 0.0))?;
        rows.push(m);
        write_file(&metrics_path, &metrics_csv(&rows))?;
    }

    let mut loss_csv = String::from("epoch,loss\n");
    for (i, l) in out.loss_history.iter().enumerate() {
        loss_csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&args.out.join("pretrain_loss.csv"), &loss_csv)?;
    let ck = Checkpoint {
        stage: Stage::Pretrain,
        epoch: epochs,
        model: model.config.clone(),
        student: out.params,
        teacher: None,
        optimizer: out.optimizer,
    };
    let path = args.out.join("pretrain.json");
    ck.write(&path)?;
    let last = rows.last().expect("at least one metrics row");
    println!(
        "pretrained {epochs} epochs: mAP@0.25 {:.4} mAP@0.5 {:.4}; checkpoint {}",
        last.map_25,
        last.map_50,
        path.display()
    );
    Ok(())
}

fn cmd_ssl(args: SslArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.ssl.epochs = e;
    }
    if let Some(l) = args.lambda_u {
        cfg.ssl.lambda_u = l;
    }
    if let Some(a) = args.ema_decay {
        cfg.ssl.ema_decay = a;
    }
    if let Some(i) = args.eval_interval {
        cfg.ssl.eval_interval = i;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data = load_dataset(&args.data, &mut cfg)?;
    cfg.validate()?;
    let cfg = cfg.resolved();
    let ck = Checkpoint::read(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if ck.model.feature_dim != cfg.generator.feature_dim || ck.model.n_classes != cfg.generator.n_classes() {
        bail!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            ck.model.feature_dim,
            ck.model.n_classes,
            cfg.generator.feature_dim,
            cfg.generator.n_classes()
        );
    }
    create_dir(&args.out)?;
    write_file(&args.out.join("config.json"), &cfg.to_json())?;

    let (model, _) = Model::new(ck.model.clone())?;
    let out_dir = args.out.clone();
    let state = ssl_train(&model, ck.inference_params(), ssl_data(&data), &cfg.ssl, &mut |st| {
        let path = out_dir.join("metrics.csv");
        fs::write(&path, metrics_csv(&st.metrics))
            .map_err(|e| ioumatch_core::Error::Io { path: path.display().to_string(), source: e })?;
        if st.epoch > 0 {
            Checkpoint {
                stage: Stage::Ssl,
                epoch: st.epoch,
                model: model.config.clone(),
                student: st.student.clone(),
                teacher: Some(st.teacher.clone()),
                optimizer: st.optimizer.clone(),
            }
            .write(&out_dir.join(format!("ssl_epoch_{:04}.json", st.epoch)))?;
        }
        Ok(())
    })?;
    let final_ck = Checkpoint {
        stage: Stage::Ssl,
        epoch: state.epoch,
        model: model.config.clone(),
        student: state.student,
        teacher: Some(state.teacher),
        optimizer: state.optimizer,
    };
    let path = args.out.join("ssl.json");
    final_ck.write(&path)?;
    let (first, last) = (&state.metrics[0], state.metrics.last().expect("metrics"));
    println!(
        "ssl {} epochs: mAP@0.25 {:.4} -> {:.4}, coverage@0.25 {:.4} -> {:.4}; checkpoint {}",
        state.epoch,
        first.map_25,
        last.map_25,
        first.coverage_25,
        last.coverage_25,
        path.display()
    );
    Ok(())
}

fn split_scenes(d: Dataset, split: Split) -> Vec<SceneSample> {
    match split {
        Split::Holdout => d.holdout,
        Split::Labeled => d.labeled,
        Split::Unlabeled => d.unlabeled,
    }
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let data = load_dataset(&args.data, &mut cfg)?;
    let ck = Checkpoint::read(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let (model, _) = Model::new(ck.model.clone())?;
    let mut inference = cfg.ssl.inference.clone();
    if args.no_optimize {
        inference.optimize = false;
    }
    let scenes = split_scenes(data, args.split);
    let mut file = PredictionFile { scenes: Vec::with_capacity(scenes.len()) };
    for s in &scenes {
        let detections = predict(&model, &ck.inference_params().data, &s.without_labels(), &inference)?;
        file.scenes.push(ScenePredictions {
            scene_id: s.scene_id.clone(),
            detections,
        });
    }
    let text = serde_json::to_string_pretty(&file).expect("predictions serialize");
    write_file(&args.out, &text)?;
    let n: usize = file.scenes.iter().map(|s| s.detections.len()).sum();
    println!("wrote {n} detections for {} scenes to {}", file.scenes.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(t) = args.thresholds {
        cfg.eval.thresholds = t;
    }
    if let Some(m) = args.ap_mode {
        cfg.eval.ap_mode = m;
    }
    if let Some(s) = args.score {
        cfg.eval.score = s.into();
    }
    let data = load_dataset(&args.data, &mut cfg)?;
    cfg.validate()?;
    let class_names = data.class_names.clone();
    let scenes = split_scenes(data, args.split);

    let text = fs::read_to_string(&args.predictions)
        .with_context(|| format!("reading {}", args.predictions.display()))?;
    let file: PredictionFile = parse_json(&text, &args.predictions.display().to_string())?;
    let index: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id.as_str(), i)).collect();
    let mut preds = vec![Vec::new(); scenes.len()];
    for (k, sp) in file.scenes.into_iter().enumerate() {
        let Some(&i) = index.get(sp.scene_id.as_str()) else {
            bail!("scenes[{k}].scene_id: unknown scene '{}' for this split", sp.scene_id);
        };
        for (j, d) in sp.detections.iter().enumerate() {
            d.validate().with_context(|| format!("scenes[{k}].detections[{j}]"))?;
        }
        preds[i].extend(sp.detections);
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.labels.clone().unwrap_or_default()).collect();
    let opts = EvalOptions {
        n_classes: class_names.len(),
        mode: cfg.eval.ap_mode,
        score: cfg.eval.score,
        class_names: Some(class_names),
    };
    let reports = map_at(&preds, &gts, &cfg.eval.thresholds, &opts)?;
    for r in &reports {
        println!("mAP@{} ({}) = {:.6}", r.threshold, r.mode, r.map);
    }
    if let Some(dir) = &args.pr_csv {
        create_dir(dir)?;
        for r in &reports {
            write_pr_csv(&dir.join(format!("pr_{}.csv", r.threshold)), r)?;
        }
    }
    let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    if let Some(out) = &args.out {
        write_file(out, &json)?;
    } else {
        println!("{json}");
    }
    Ok(())
}

fn cmd_diag(args: DiagArgs) -> Result<bool> {
    let mut extra_ok = true;
    let reports: Vec<DiagReport> = match args.kind {
        DiagKind::IouOracle => vec![diag::iou_oracle(args.n.unwrap_or(1000), args.mc_samples, args.seed)],
        DiagKind::GradCheck => {
            let n = args.n.unwrap_or(100);
            let head = diag::quick_trained_head(args.seed)?;
            let sweep = diag::pool_continuity(args.seed)?;
            println!("{sweep}");
            extra_ok = sweep.passed;
            vec![diag::pool_grad_check(n, args.seed)?, diag::head_grad_check(n, args.seed, &head)?]
        }
        DiagKind::LhsCheck => vec![diag::lhs_check(args.n.unwrap_or(2000), args.seed)],
    };
    for r in &reports {
        println!("{r}");
    }
    Ok(extra_ok && reports.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IOUMATCH_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Pretrain(a) => cmd_pretrain(a).map(|_| true),
        Command::Ssl(a) => cmd_ssl(a).map(|_| true),
        Command::Predict(a) => cmd_predict(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Diag(a) => cmd_diag(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
