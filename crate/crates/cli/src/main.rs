use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tractcloud::baselines::{run_baseline, BaselineMethod, EnetGrid, FeatureKind, Regressor};
use tractcloud::crl::{localize, region_histogram, write_weights_csv, CrlConfig};
use tractcloud::io::{
    format_f64, load_checkpoint, read_labels, read_manifest, read_tract, save_checkpoint, Split,
};
use tractcloud::metrics::evaluate;
use tractcloud::pointnet::{ModelConfig, PointNetRegressor};
use tractcloud::synth::{generate_cohort, write_cohort, SynthConfig};
use tractcloud::trainer::{load_subjects, predict_subjects, train, write_log, PredictConfig, Subject, TrainConfig};
use tractcloud::Error;

/// Point-cloud regression of subject scores from white-matter tracts, with
/// critical region localization and classical baselines.
#[derive(Parser)]
#[command(name = "tractcloud", version)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory; created if missing. `run.json` is written here first.
    #[arg(long)]
    out: PathBuf,
    /// JSON object merged over the resolved configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with a planted regional signal.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        subjects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 60)]
        streamlines_min: usize,
        #[arg(long, default_value_t = 140)]
        streamlines_max: usize,
        #[arg(long, default_value_t = 20)]
        points_min: usize,
        #[arg(long, default_value_t = 40)]
        points_max: usize,
        /// Standard deviation of the additive score noise.
        #[arg(long, default_value_t = 6.4)]
        noise_std: f64,
        /// Radius of the planted region, mm.
        #[arg(long, default_value_t = 7.0)]
        region_radius: f64,
        /// Skip per-point label files.
        #[arg(long)]
        no_labels: bool,
    },
    /// Train the Siamese point-cloud regressor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 500)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Pairs per optimizer step (32 subjects at the default).
        #[arg(long, default_value_t = 16)]
        batch_pairs: usize,
        #[arg(long, default_value_t = 5e-3)]
        weight_decay: f64,
        /// Weight of the paired loss term; 0 disables it.
        #[arg(long, default_value_t = 0.1)]
        w: f64,
        /// Points sampled per subject per step.
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate the test split every this many epochs (and at the last one).
        #[arg(long, default_value_t = 10)]
        eval_every: usize,
        /// Fit z-scored targets instead of raw scores.
        #[arg(long)]
        standardize_targets: bool,
        /// Shared per-point MLP widths; the last is the global feature size.
        #[arg(long, value_delimiter = ',', default_value = "64,64,64,128,1024")]
        shared_widths: Vec<usize>,
        /// Head widths; must end in 1.
        #[arg(long, value_delimiter = ',', default_value = "512,256,1")]
        head_widths: Vec<usize>,
    },
    /// Predict scores with a trained checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputSel,
        /// Independent samplings averaged per subject.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Points per sampling (default: the training value).
        #[arg(long)]
        points: Option<usize>,
        /// Sampling seed (default: the training seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a predictions CSV against manifest truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitSel::Test)]
        split: SplitSel,
    },
    /// Critical region localization.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputSel,
        /// Per-point labels for a single `--tract` (manifest mode uses its labels column).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Passes over the whole tract.
        #[arg(long = "repeats", visible_alias = "M", default_value_t = 10)]
        repeats: usize,
        /// Fraction of points marked critical.
        #[arg(long, default_value_t = 0.05)]
        top: f64,
        /// Points per set.
        #[arg(long, default_value_t = 2048)]
        set_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit and score a feature baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        kind: KindSel,
        #[arg(long, value_enum)]
        model: ModelSel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct InputSel {
    /// A single tract file.
    #[arg(long, conflicts_with = "manifest")]
    tract: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitSel::Test)]
    split: SplitSel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitSel {
    Train,
    Test,
    All,
}

impl SplitSel {
    fn splits(self) -> &'static [Split] {
        match self {
            SplitSel::Train => &[Split::Train],
            SplitSel::Test => &[Split::Test],
            SplitSel::All => &[Split::Train, Split::Test],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindSel {
    Mean,
    Afq,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelSel {
    Lr,
    Enr,
}

/// Error with a process exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Io { .. } => 2,
            Error::Internal(_) | Error::Contract(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `--config`, writes `run.json` and returns the resolved config.
fn resolve<T: Serialize + DeserializeOwned>(command: &str, common: &Common, cfg: T) -> CliResult<T> {
    let mut value = serde_json::to_value(&cfg).map_err(|e| usage(e.to_string()))?;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let over: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if !over.is_object() {
            return Err(usage(format!("{}: config must be a JSON object", path.display())));
        }
        merge(&mut value, over);
    }
    let cfg: T = serde_json::from_value(value.clone()).map_err(|e| usage(format!("config: {e}")))?;
    std::fs::create_dir_all(&common.out).map_err(|e| usage(format!("{}: {e}", common.out.display())))?;
    let run = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": value,
    });
    write_json(&common.out.join("run.json"), &run)?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Failure {
        code: 4,
        msg: e.to_string(),
    })?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SynthRun {
    synth: SynthConfig,
}

#[derive(Serialize, Deserialize)]
struct TrainRun {
    manifest: PathBuf,
    train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct PredictRun {
    checkpoint: PathBuf,
    tract: Option<PathBuf>,
    manifest: Option<PathBuf>,
    split: SplitSel,
    predict: PredictConfig,
}

#[derive(Serialize, Deserialize)]
struct EvalRun {
    predictions: PathBuf,
    manifest: PathBuf,
    split: SplitSel,
}

#[derive(Serialize, Deserialize)]
struct LocalizeRun {
    checkpoint: PathBuf,
    tract: Option<PathBuf>,
    manifest: Option<PathBuf>,
    split: SplitSel,
    labels: Option<PathBuf>,
    crl: CrlConfig,
}

#[derive(Serialize, Deserialize)]
struct BaselineRun {
    manifest: PathBuf,
    method: String,
    seed: u64,
    grid: EnetGrid,
}

/// A subject to process: id, tract path, optional labels and score.
struct Target {
    id: String,
    path: PathBuf,
    labels: Option<PathBuf>,
}

fn targets(tract: &Option<PathBuf>, manifest: &Option<PathBuf>, split: SplitSel) -> CliResult<Vec<Target>> {
    match (tract, manifest) {
        (Some(t), None) => {
            let tr = read_tract(t)?;
            Ok(vec![Target {
                id: tr.subject_id,
                path: t.clone(),
                labels: None,
            }])
        }
        (None, Some(m)) => {
            let man = read_manifest(m)?;
            Ok(man
                .rows
                .iter()
                .filter(|r| split.splits().contains(&r.split))
                .map(|r| Target {
                    id: r.subject_id.clone(),
                    path: r.path.clone(),
                    labels: r.labels.clone(),
                })
                .collect())
        }
        _ => Err(usage("give exactly one of --tract or --manifest")),
    }
}

fn load_model(path: &Path) -> CliResult<(PointNetRegressor, tractcloud::io::Checkpoint)> {
    let ckpt = load_checkpoint(path)?;
    Ok((PointNetRegressor::from_checkpoint(&ckpt)?, ckpt))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            common,
            subjects,
            seed,
            streamlines_min,
            streamlines_max,
            points_min,
            points_max,
            noise_std,
            region_radius,
            no_labels,
        } => {
            let mut synth = SynthConfig {
                subject_count: subjects,
                seed,
                streamlines_per_subject: (streamlines_min, streamlines_max),
                points_per_streamline: (points_min, points_max),
                noise_std,
                labels: !no_labels,
                ..SynthConfig::default()
            };
            synth.critical_region.radius = region_radius;
            let cfg = resolve("synth", &common, SynthRun { synth })?;
            let cohort = generate_cohort(&cfg.synth)?;
            let manifest = write_cohort(&cohort, &common.out)?;
            println!(
                "wrote {} subjects ({} test) to {}",
                cohort.tracts.len(),
                cohort.manifest.split(Split::Test).count(),
                manifest.display()
            );
        }
        Command::Train {
            common,
            manifest,
            epochs,
            lr,
            batch_pairs,
            weight_decay,
            w,
            points,
            seed,
            eval_every,
            standardize_targets,
            shared_widths,
            head_widths,
        } => {
            let train_cfg = TrainConfig {
                epochs,
                lr,
                batch_pairs,
                weight_decay,
                loss_weight_w: w,
                sample_points: points,
                seed,
                eval_every,
                standardize_targets,
                model: ModelConfig {
                    shared_widths,
                    head_widths,
                    ..ModelConfig::default()
                },
            };
            let cfg = resolve("train", &common, TrainRun { manifest, train: train_cfg })?;
            cfg.train.validate()?;
            let man = read_manifest(&cfg.manifest)?;
            let tr = load_subjects(&man, Split::Train)?;
            let te = load_subjects(&man, Split::Test)?;
            eprintln!("training on {} subjects, evaluating on {}", tr.len(), te.len());
            let outcome = train(&tr, &te, &cfg.train, |l| {
                let test = match (l.test_mae, l.test_r) {
                    (Some(m), Some(r)) => format!(" test_mae {m:.4} test_r {r:.4}"),
                    _ => String::new(),
                };
                eprintln!(
                    "epoch {:>4} L_total {:.4} L_pre {:.4} L_ps {:.4} train_mae {:.4}{test}",
                    l.epoch, l.l_total, l.l_pre, l.l_ps, l.train_mae
                );
            })?;
            save_checkpoint(&outcome.checkpoint(&cfg.train)?, common.out.join("model.wmck"))?;
            write_log(&outcome.log, common.out.join("log.csv"))?;
            println!("wrote {}", common.out.join("model.wmck").display());
        }
        Command::Predict {
            common,
            checkpoint,
            input,
            repeats,
            points,
            seed,
        } => {
            let (model, ckpt) = load_model(&checkpoint)?;
            let trained: Option<TrainConfig> = serde_json::from_value(ckpt.config.clone()).ok();
            let predict = PredictConfig {
                sample_points: points
                    .or(trained.map(|t| t.sample_points))
                    .unwrap_or(TrainConfig::default().sample_points),
                repeats,
                seed: seed.unwrap_or(ckpt.seed),
            };
            let cfg = resolve(
                "predict",
                &common,
                PredictRun {
                    checkpoint,
                    tract: input.tract,
                    manifest: input.manifest,
                    split: input.split,
                    predict,
                },
            )?;
            let subjects = targets(&cfg.tract, &cfg.manifest, cfg.split)?
                .into_iter()
                .map(|t| {
                    let mut tract = read_tract(&t.path)?;
                    tract.subject_id = t.id;
                    Subject::from_tract(&tract, f64::NAN)
                })
                .collect::<tractcloud::Result<Vec<_>>>()?;
            let scores = predict_subjects(&model, &subjects, &cfg.predict)?;
            let mut out = String::from("subject_id,score\n");
            for (s, p) in subjects.iter().zip(&scores) {
                out.push_str(&format!("{},{}\n", s.id, format_f64(*p)));
            }
            let path = common.out.join("predictions.csv");
            std::fs::write(&path, out).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            println!("wrote {} predictions to {}", scores.len(), path.display());
        }
        Command::Eval {
            common,
            predictions,
            manifest,
            split,
        } => {
            let cfg = resolve("eval", &common, EvalRun { predictions, manifest, split })?;
            let man = read_manifest(&cfg.manifest)?;
            let mut reader = csv::Reader::from_path(&cfg.predictions)
                .map_err(|e| usage(format!("{}: {e}", cfg.predictions.display())))?;
            let mut preds = std::collections::HashMap::new();
            for rec in reader.deserialize::<(String, f64)>() {
                let (id, score) = rec.map_err(|e| Failure {
                    code: 3,
                    msg: format!("{}: {e}", cfg.predictions.display()),
                })?;
                preds.insert(id, score);
            }
            let rows: Vec<_> = man
                .rows
                .iter()
                .filter(|r| cfg.split.splits().contains(&r.split))
                .collect();
            let missing: Vec<&str> = rows
                .iter()
                .filter(|r| !preds.contains_key(&r.subject_id))
                .map(|r| r.subject_id.as_str())
                .collect();
            let mut unknown: Vec<&str> = preds
                .keys()
                .filter(|k| !rows.iter().any(|r| &r.subject_id == *k))
                .map(String::as_str)
                .collect();
            unknown.sort_unstable();
            if !missing.is_empty() || !unknown.is_empty() {
                return Err(usage(format!(
                    "subject mismatch: missing predictions for [{}]; not in the selected split [{}]",
                    missing.join(", "),
                    unknown.join(", ")
                )));
            }
            let pred: Vec<f64> = rows.iter().map(|r| preds[&r.subject_id]).collect();
            let truth: Vec<f64> = rows.iter().map(|r| r.score).collect();
            let report = evaluate(&pred, &truth)?;
            write_json(&common.out.join("report.json"), &report)?;
            println!(
                "n {} mae {:.4} ({:.4}) r {:.4}",
                report.n, report.mae, report.mae_std, report.pearson_r
            );
        }
        Command::Localize {
            common,
            checkpoint,
            input,
            labels,
            repeats,
            top,
            set_size,
            seed,
        } => {
            let (model, _) = load_model(&checkpoint)?;
            let crl = CrlConfig {
                set_size,
                repeats,
                top_fraction: top,
                seed,
            };
            let cfg = resolve(
                "localize",
                &common,
                LocalizeRun {
                    checkpoint,
                    tract: input.tract,
                    manifest: input.manifest,
                    split: input.split,
                    labels,
                    crl,
                },
            )?;
            let mut list = targets(&cfg.tract, &cfg.manifest, cfg.split)?;
            if cfg.tract.is_some() {
                list[0].labels = cfg.labels.clone();
            }
            let mut summary = Vec::new();
            for t in list {
                let mut tract = read_tract(&t.path)?;
                tract.subject_id = t.id.clone();
                // validate labels before the expensive passes
                let point_labels = match &t.labels {
                    Some(p) => Some(read_labels(p, tract.point_count()).map_err(|e| match e {
                        Error::Validation(m) => usage(m),
                        other => other.into(),
                    })?),
                    None => None,
                };
                let map = localize(&model, &tract, &cfg.crl)?;
                write_weights_csv(&map, common.out.join(format!("{}_weights.csv", t.id)))?;
                let mut entry = serde_json::json!({
                    "subject_id": t.id,
                    "points": map.weights.len(),
                    "total_weight": map.total_weight(),
                    "critical": map.critical_count(),
                });
                if let Some(pl) = point_labels {
                    let hist = region_histogram(&map, &pl).map_err(|e| usage(e.to_string()))?;
                    write_json(&common.out.join(format!("{}_histogram.json", t.id)), &hist)?;
                    entry["histogram"] = serde_json::to_value(&hist).expect("serializable");
                }
                println!(
                    "{}: {} points, {} critical, total weight {}",
                    t.id,
                    map.weights.len(),
                    map.critical_count(),
                    map.total_weight()
                );
                summary.push(entry);
            }
            write_json(&common.out.join("summary.json"), &summary)?;
        }
        Command::Baseline {
            common,
            manifest,
            kind,
            model,
            seed,
        } => {
            let method = BaselineMethod {
                features: match kind {
                    KindSel::Mean => FeatureKind::Mean,
                    KindSel::Afq => FeatureKind::AlongTract,
                },
                regressor: match model {
                    ModelSel::Lr => Regressor::Lr,
                    ModelSel::Enr => Regressor::Enr,
                },
            };
            let cfg = resolve(
                "baseline",
                &common,
                BaselineRun {
                    manifest,
                    method: method.to_string(),
                    seed,
                    grid: EnetGrid::default(),
                },
            )?;
            let method: BaselineMethod = cfg.method.parse()?;
            let man = read_manifest(&cfg.manifest)?;
            let report = run_baseline(&man, method, &cfg.grid, cfg.seed)?;
            write_json(&common.out.join(format!("baseline_{method}.json")), &report)?;
            println!(
                "{method}: n_test {} mae {:.4} r {:.4}",
                report.n_test, report.mae, report.r
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
