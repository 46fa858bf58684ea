//! `cad`, the command-line driver for episodic few-shot experiments.
//!
//! Subcommands cover the whole loop: synthetic data generation, training,
//! evaluation, ablation sweeps over adaptation modes, per-episode score
//! inspection, and embedding export. Structured output is JSON; only the
//! embedding export writes CSV. Every command is deterministic under fixed
//! seeds. On failure the process exits nonzero after printing a single JSON
//! line on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use cad_core::attention::{co_adapt, AdaptMode, MabParameters, QueryAggregation};
use cad_core::encoder::{encode, EncoderKind};
use cad_core::episodes::io::{load_dataset, peek_header, save_dataset};
use cad_core::episodes::synth::{generate_blobs, generate_distractor};
use cad_core::episodes::{check_disjoint_classes, Dataset, Episode, Split};
use cad_core::head::{episode_accuracy, DistanceKind};
use cad_core::trainer::{
    ablation_sweep, episode_scores, evaluate, load_checkpoint, peek_meta, save_checkpoint,
    train, CheckpointMeta, EvalReport, Params, TrainConfig,
};
use cad_core::{Precision, Scalar, Tensor};

#[derive(Parser)]
#[command(
    name = "cad",
    version,
    about = "Few-shot classification with cross-adaptive attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write class-disjoint train/val/test splits.
    GenData(GenDataArgs),
    /// Train a model; writes the best checkpoint, a metrics log, and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint over seeded episodes; prints mean accuracy with a 95% CI.
    Eval(EvalArgs),
    /// Train and evaluate several adaptation modes on identical seeds.
    Ablate(AblateArgs),
    /// Dump attention scores and pooling weights for one episode as JSON.
    Inspect(InspectArgs),
    /// Export embeddings as CSV, optionally before and after episodic adaptation.
    ExportEmb(ExportEmbArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{}", json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::ExportEmb(args) => cmd_export_emb(args),
    }
}

/// Written next to every file-producing run so the exact inputs, settings,
/// and seeds can be recovered later.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: serde_json::Value,
    seeds: serde_json::Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &'static str, config: serde_json::Value, seeds: serde_json::Value) -> Self {
        RunManifest {
            tool: "cad",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}

/// Manifest path for a single-file output: `emb.csv` gets
/// `emb.csv.manifest.json` next to it.
fn sibling_manifest(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Copy, clap::ValueEnum)]
enum DataKind {
    /// Gaussian class clusters, every dimension informative.
    Blobs,
    /// A few informative dimensions plus high-variance nuisance dimensions
    /// shared across classes.
    Distractor,
}

impl DataKind {
    fn as_str(self) -> &'static str {
        match self {
            DataKind::Blobs => "blobs",
            DataKind::Distractor => "distractor",
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    /// Feature dimension (blobs).
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Informative dimensions (distractor).
    #[arg(long, default_value_t = 4)]
    signal_dim: usize,
    /// Nuisance dimensions appended after the signal (distractor).
    #[arg(long, default_value_t = 28)]
    distractor_dim: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Within-class noise (blobs).
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Noise on signal dimensions (distractor).
    #[arg(long, default_value_t = 0.2)]
    sigma_signal: f64,
    /// Noise on nuisance dimensions (distractor).
    #[arg(long, default_value_t = 1.0)]
    sigma_distractor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Storage precision: f32 or f64.
    #[arg(long, default_value = "f64")]
    precision: Precision,
    /// Output directory for train.fsd1, val.fsd1, test.fsd1, manifest.json.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    match args.precision {
        Precision::F64 => gen_data_typed::<f64>(args),
        Precision::F32 => gen_data_typed::<f32>(args),
    }
}

fn gen_data_typed<T: Scalar>(args: GenDataArgs) -> Result<()> {
    let full: Dataset<T> = match args.kind {
        DataKind::Blobs => {
            generate_blobs(args.classes, args.dim, args.per_class, args.sigma, args.seed)?
        }
        DataKind::Distractor => generate_distractor(
            args.classes,
            args.signal_dim,
            args.distractor_dim,
            args.per_class,
            args.sigma_signal,
            args.sigma_distractor,
            args.seed,
        )?,
    };
    let (train_ds, val_ds, test_ds) = full.split_by_class(args.seed)?;
    check_disjoint_classes(&[&train_ds, &val_ds, &test_ds])?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let splits: [(&str, &Dataset<T>); 3] = [
        ("train.fsd1", &train_ds),
        ("val.fsd1", &val_ds),
        ("test.fsd1", &test_ds),
    ];
    let mut manifest = RunManifest::new(
        "gen-data",
        gen_data_config(&args),
        json!({ "seed": args.seed }),
    );
    for (name, ds) in splits {
        let path = args.out.join(name);
        save_dataset(ds, &path)?;
        manifest = manifest.output(&path);
    }
    let manifest_path = args.out.join("manifest.json");
    manifest.write(&manifest_path)?;

    let split_summary = |name: &str, ds: &Dataset<T>| {
        json!({
            "file": name,
            "classes": ds.class_count(),
            "items": ds.len(),
        })
    };
    println!(
        "{}",
        json!({
            "out": args.out.display().to_string(),
            "item_shape": full.item_shape(),
            "splits": {
                "train": split_summary("train.fsd1", &train_ds),
                "val": split_summary("val.fsd1", &val_ds),
                "test": split_summary("test.fsd1", &test_ds),
            },
        })
    );
    Ok(())
}

fn gen_data_config(args: &GenDataArgs) -> serde_json::Value {
    let mut config = json!({
        "kind": args.kind.as_str(),
        "classes": args.classes,
        "per_class": args.per_class,
        "precision": args.precision.name(),
    });
    let extra = match args.kind {
        DataKind::Blobs => json!({ "dim": args.dim, "sigma": args.sigma }),
        DataKind::Distractor => json!({
            "signal_dim": args.signal_dim,
            "distractor_dim": args.distractor_dim,
            "sigma_signal": args.sigma_signal,
            "sigma_distractor": args.sigma_distractor,
        }),
    };
    config
        .as_object_mut()
        .expect("literal object")
        .extend(extra.as_object().expect("literal object").clone());
    config
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// JSON config file mirroring the training configuration schema. Inline
    /// flags override fields from the file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train.fsd1 and val.fsd1.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for model.cadw, metrics.jsonl, manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    /// Queries per class in each training episode.
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tasks_per_epoch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Adaptation mode: full, support_only, query_only, self_only, nonparam, none.
    #[arg(long)]
    mode: Option<AdaptMode>,
    /// Distance: sq_euclidean or euclidean.
    #[arg(long)]
    distance: Option<DistanceKind>,
    /// Query-side prototype pooling: mean_over_classes or per_class.
    #[arg(long)]
    aggregation: Option<QueryAggregation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Math and storage precision: f32 or f64.
    #[arg(long)]
    precision: Option<Precision>,
    /// Validation episodes after each epoch.
    #[arg(long)]
    val_episodes: Option<usize>,
    /// Hidden width of the MLP encoder built when no config file is given;
    /// defaults to the embedding dimension.
    #[arg(long)]
    hidden: Option<usize>,
    /// Use the published episode budget: 200 tasks per epoch, 300 epochs for
    /// 1-shot and 200 otherwise. Explicit --epochs/--tasks-per-epoch still win.
    #[arg(long)]
    paper_scale: bool,
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<TrainConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => {
            let train_path = args.data.join("train.fsd1");
            let header = peek_header(&train_path)?;
            let shape = header.item_shape();
            let embed_dim = args.embed_dim.unwrap_or(64);
            let encoder = if shape.len() == 1 {
                EncoderKind::Mlp {
                    input_dim: shape[0],
                    hidden: Some(args.hidden.unwrap_or(embed_dim)),
                }
            } else {
                EncoderKind::Conv {
                    height: shape[0],
                    width: shape[1],
                    channels: shape[2],
                    blocks: vec![32, 32, 32],
                }
            };
            let mut cfg = TrainConfig::new(encoder);
            cfg.precision = header.precision;
            cfg
        }
    };
    if let Some(v) = args.way {
        cfg.way = v;
    }
    if let Some(v) = args.shot {
        cfg.shot = v;
    }
    if let Some(v) = args.query {
        cfg.query = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.mode {
        cfg.mode = v;
    }
    if let Some(v) = args.distance {
        cfg.distance = v;
    }
    if let Some(v) = args.aggregation {
        cfg.query_aggregation = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.embed_dim {
        cfg.embed_dim = v;
    }
    if let Some(v) = args.precision {
        cfg.precision = v;
    }
    if let Some(v) = args.val_episodes {
        cfg.val_episodes = v;
    }
    // paper_scale reads shot, so it runs after the shot override; explicit
    // episode-budget flags then beat it.
    if args.paper_scale {
        cfg.paper_scale();
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.tasks_per_epoch {
        cfg.tasks_per_epoch = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    match cfg.precision {
        Precision::F64 => train_typed::<f64>(cfg, &args),
        Precision::F32 => train_typed::<f32>(cfg, &args),
    }
}

fn train_typed<T: Scalar>(cfg: TrainConfig, args: &TrainArgs) -> Result<()> {
    let train_path = args.data.join("train.fsd1");
    let val_path = args.data.join("val.fsd1");
    let train_ds: Dataset<T> = load_dataset(&train_path)?;
    let val_ds: Dataset<T> = load_dataset(&val_path)?.with_split(Split::Val);
    check_disjoint_classes(&[&train_ds, &val_ds])?;

    let outcome = train(&cfg, &train_ds, &val_ds)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt_path = args.out.join("model.cadw");
    let meta = CheckpointMeta {
        config: cfg.clone(),
        rng: outcome.rng.clone(),
        epoch: outcome.best_epoch,
        val_accuracy: outcome.best_val_accuracy,
    };
    save_checkpoint(&ckpt_path, &meta, &outcome.best)?;

    let metrics_path = args.out.join("metrics.jsonl");
    let mut log = String::new();
    for record in &outcome.history {
        log.push_str(&serde_json::to_string(record)?);
        log.push('\n');
    }
    fs::write(&metrics_path, log)
        .with_context(|| format!("writing {}", metrics_path.display()))?;

    RunManifest::new(
        "train",
        serde_json::to_value(&cfg)?,
        json!({ "seed": cfg.seed }),
    )
    .input(&train_path)
    .input(&val_path)
    .output(&ckpt_path)
    .output(&metrics_path)
    .write(&args.out.join("manifest.json"))?;

    println!(
        "{}",
        json!({
            "checkpoint": ckpt_path.display().to_string(),
            "epochs": outcome.history.len(),
            "total_tasks": cfg.total_tasks(),
            "best_epoch": outcome.best_epoch,
            "best_val_accuracy": outcome.best_val_accuracy,
            "final_train_loss": outcome.history.last().map(|r| r.train_loss),
        })
    );
    Ok(())
}

// -------------------------------------------------------------------- eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// FSD1 file to evaluate on, typically a test split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    way: usize,
    /// Defaults to the shot the checkpoint was trained with.
    #[arg(long)]
    shot: Option<usize>,
    /// Queries per class.
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the checkpoint's adaptation mode, e.g. to score a baseline
    /// with parameter-free adaptation bolted on.
    #[arg(long)]
    mode: Option<AdaptMode>,
    /// Optional directory for report.json and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The printed and written summary; field order is part of the format.
#[derive(Serialize)]
struct ReportLine {
    mean: f64,
    ci95: f64,
    episodes: usize,
}

impl ReportLine {
    fn from(report: &EvalReport) -> Self {
        ReportLine {
            mean: report.mean_accuracy,
            ci95: report.ci95,
            episodes: report.episodes,
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let meta = peek_meta(&args.ckpt)?;
    match meta.config.precision {
        Precision::F64 => eval_typed::<f64>(&args),
        Precision::F32 => eval_typed::<f32>(&args),
    }
}

fn eval_typed<T: Scalar>(args: &EvalArgs) -> Result<()> {
    let (meta, params): (CheckpointMeta, Params<T>) = load_checkpoint(&args.ckpt)?;
    let ds: Dataset<T> = load_dataset(&args.data)?.with_split(Split::Test);

    let mut cfg = meta.config.clone();
    cfg.way = args.way;
    cfg.shot = args.shot.unwrap_or(meta.config.shot);
    cfg.query = args.query;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }

    let report = evaluate(&params, &ds, &cfg, args.episodes, args.seed)?;
    let line = serde_json::to_string(&ReportLine::from(&report))?;

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let report_path = dir.join("report.json");
        fs::write(&report_path, line.clone() + "\n")
            .with_context(|| format!("writing {}", report_path.display()))?;
        RunManifest::new(
            "eval",
            json!({
                "way": cfg.way,
                "shot": cfg.shot,
                "query": cfg.query,
                "episodes": args.episodes,
                "mode": cfg.mode.as_str(),
                "distance": cfg.distance.as_str(),
            }),
            json!({ "eval_seed": args.seed }),
        )
        .input(&args.ckpt)
        .input(&args.data)
        .output(&report_path)
        .write(&dir.join("manifest.json"))?;
    }

    println!("{line}");
    Ok(())
}

// ------------------------------------------------------------------ ablate

#[derive(Args)]
struct AblateArgs {
    /// JSON config file; its mode field is superseded by --modes.
    #[arg(long)]
    config: PathBuf,
    /// Directory holding train.fsd1, val.fsd1, test.fsd1.
    #[arg(long)]
    data: PathBuf,
    /// "all" or a comma-separated list, e.g. "support_only,full".
    #[arg(long, default_value = "all")]
    modes: String,
    /// Test episodes per mode, shared seeds across modes.
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    /// Optional directory for ablation.json and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

const ALL_MODES: [AdaptMode; 6] = [
    AdaptMode::None,
    AdaptMode::Nonparam,
    AdaptMode::SelfOnly,
    AdaptMode::SupportOnly,
    AdaptMode::QueryOnly,
    AdaptMode::Full,
];

fn parse_modes(spec: &str) -> Result<Vec<AdaptMode>> {
    if spec.trim() == "all" {
        return Ok(ALL_MODES.to_vec());
    }
    spec.split(',')
        .map(|part| {
            part.trim()
                .parse::<AdaptMode>()
                .map_err(|e| anyhow!("bad --modes entry {part:?}: {e}"))
        })
        .collect()
}

#[derive(Serialize)]
struct AblationRow {
    mode: String,
    mean: f64,
    ci95: f64,
    episodes: usize,
}

#[derive(Serialize)]
struct AblationTable {
    episodes: usize,
    eval_seed: u64,
    rows: Vec<AblationRow>,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", args.config.display()))?;
    match cfg.precision {
        Precision::F64 => ablate_typed::<f64>(cfg, &args),
        Precision::F32 => ablate_typed::<f32>(cfg, &args),
    }
}

fn ablate_typed<T: Scalar>(cfg: TrainConfig, args: &AblateArgs) -> Result<()> {
    let modes = parse_modes(&args.modes)?;
    if modes.is_empty() {
        bail!("--modes lists no modes");
    }
    let train_path = args.data.join("train.fsd1");
    let val_path = args.data.join("val.fsd1");
    let test_path = args.data.join("test.fsd1");
    let train_ds: Dataset<T> = load_dataset(&train_path)?;
    let val_ds: Dataset<T> = load_dataset(&val_path)?.with_split(Split::Val);
    let test_ds: Dataset<T> = load_dataset(&test_path)?.with_split(Split::Test);
    check_disjoint_classes(&[&train_ds, &val_ds, &test_ds])?;

    let results = ablation_sweep(
        &cfg,
        &train_ds,
        &val_ds,
        &test_ds,
        &modes,
        args.episodes,
        args.eval_seed,
    )?;
    let table = AblationTable {
        episodes: args.episodes,
        eval_seed: args.eval_seed,
        rows: results
            .iter()
            .map(|(mode, report)| AblationRow {
                mode: mode.as_str().to_string(),
                mean: report.mean_accuracy,
                ci95: report.ci95,
                episodes: report.episodes,
            })
            .collect(),
    };
    let rendered = serde_json::to_string_pretty(&table)?;

    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let table_path = dir.join("ablation.json");
        fs::write(&table_path, rendered.clone() + "\n")
            .with_context(|| format!("writing {}", table_path.display()))?;
        RunManifest::new(
            "ablate",
            serde_json::to_value(&cfg)?,
            json!({ "seed": cfg.seed, "eval_seed": args.eval_seed }),
        )
        .input(&args.config)
        .input(&train_path)
        .input(&val_path)
        .input(&test_path)
        .output(&table_path)
        .write(&dir.join("manifest.json"))?;
    }

    println!("{rendered}");
    Ok(())
}

// ----------------------------------------------------------------- inspect

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// FSD1 file to sample the episode from.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the checkpoint's training way.
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    /// Queries per class.
    #[arg(long)]
    query: Option<usize>,
    #[arg(long, default_value_t = 0)]
    episode_seed: u64,
    /// Override the checkpoint's adaptation mode.
    #[arg(long)]
    mode: Option<AdaptMode>,
    /// Write the dump here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct InspectDump {
    mode: String,
    aggregation: String,
    distance: String,
    way: usize,
    shot: usize,
    query_per_class: usize,
    episode_seed: u64,
    /// Global class ids; position = episode-local label.
    class_ids: Vec<u32>,
    loss: f64,
    accuracy: f64,
    /// [way, queries, shot]: each query row attends over one class's supports.
    scores_support: serde_json::Value,
    /// [way, shot, queries]: each support row attends over the queries.
    scores_query: serde_json::Value,
    /// [way, shot]: support pooling weights, one convex row per class.
    pooled_support: serde_json::Value,
    /// [queries] shared or [way, queries] per class.
    pooled_query: serde_json::Value,
    /// [way, embed]: attention-pooled support prototypes.
    proto_support: serde_json::Value,
    /// [embed] shared or [way, embed] per class.
    proto_query: serde_json::Value,
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let meta = peek_meta(&args.ckpt)?;
    match meta.config.precision {
        Precision::F64 => inspect_typed::<f64>(&args),
        Precision::F32 => inspect_typed::<f32>(&args),
    }
}

fn inspect_typed<T: Scalar>(args: &InspectArgs) -> Result<()> {
    let (meta, params): (CheckpointMeta, Params<T>) = load_checkpoint(&args.ckpt)?;
    let ds: Dataset<T> = load_dataset(&args.data)?;
    let cfg = &meta.config;
    let way = args.way.unwrap_or(cfg.way);
    let shot = args.shot.unwrap_or(cfg.shot);
    let query = args.query.unwrap_or(cfg.query);
    let mode = args.mode.unwrap_or(cfg.mode);

    let mut rng = ChaCha8Rng::seed_from_u64(args.episode_seed);
    let episode = ds.sample_episode(way, shot, query, &mut rng)?;
    let (z_s, z_q) = embed_episode(&params, &episode)?;
    let mab = mab_for(&params, mode)?;
    let adaptation = co_adapt(&z_s, &z_q, &mab, mode, cfg.query_aggregation)?;
    let (probs, loss) =
        episode_scores(&params, &episode, mode, cfg.query_aggregation, cfg.distance)?;
    let accuracy = episode_accuracy(&probs, &episode.query_labels)?;

    let dump = InspectDump {
        mode: mode.as_str().to_string(),
        aggregation: cfg.query_aggregation.as_str().to_string(),
        distance: cfg.distance.as_str().to_string(),
        way,
        shot,
        query_per_class: query,
        episode_seed: args.episode_seed,
        class_ids: episode.class_ids.clone(),
        loss,
        accuracy,
        scores_support: opt_tensor_json(&adaptation.scores_support),
        scores_query: opt_tensor_json(&adaptation.scores_query),
        pooled_support: opt_tensor_json(&adaptation.pooled_support),
        pooled_query: opt_tensor_json(&adaptation.pooled_query),
        proto_support: opt_tensor_json(&adaptation.proto_support),
        proto_query: opt_tensor_json(&adaptation.proto_query),
    };
    let rendered = serde_json::to_string_pretty(&dump)?;
    match &args.out {
        Some(path) => {
            fs::write(path, rendered.clone() + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            RunManifest::new(
                "inspect",
                json!({
                    "way": way,
                    "shot": shot,
                    "query": query,
                    "mode": mode.as_str(),
                }),
                json!({ "episode_seed": args.episode_seed }),
            )
            .input(&args.ckpt)
            .input(&args.data)
            .output(path)
            .write(&sibling_manifest(path))?;
        }
        None => println!("{rendered}"),
    }
    Ok(())
}

// -------------------------------------------------------------- export-emb

#[derive(Args)]
struct ExportEmbArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// FSD1 file whose items (or one sampled episode) are exported.
    #[arg(long)]
    data: PathBuf,
    /// CSV output path; a manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// With true, export one episode's support and query rows before and
    /// after adaptation instead of plain item embeddings.
    #[arg(
        long,
        default_value_t = false,
        num_args = 0..=1,
        default_missing_value = "true",
        action = clap::ArgAction::Set
    )]
    adapted: bool,
    /// Episode shape for --adapted; defaults to the checkpoint's training values.
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long, default_value_t = 0)]
    episode_seed: u64,
    /// Override the checkpoint's adaptation mode for --adapted.
    #[arg(long)]
    mode: Option<AdaptMode>,
}

fn cmd_export_emb(args: ExportEmbArgs) -> Result<()> {
    let meta = peek_meta(&args.ckpt)?;
    match meta.config.precision {
        Precision::F64 => export_emb_typed::<f64>(&args),
        Precision::F32 => export_emb_typed::<f32>(&args),
    }
}

fn export_emb_typed<T: Scalar>(args: &ExportEmbArgs) -> Result<()> {
    let (meta, params): (CheckpointMeta, Params<T>) = load_checkpoint(&args.ckpt)?;
    let ds: Dataset<T> = load_dataset(&args.data)?;
    let m = params.encoder.output_dim();

    let mut csv = String::from("class,role");
    for j in 0..m {
        csv.push_str(&format!(",e{j}"));
    }
    csv.push('\n');

    let mut rows = 0usize;
    let mut push_row = |csv: &mut String, class: u32, role: &str, values: &[T]| {
        csv.push_str(&format!("{class},{role}"));
        for v in values {
            csv.push_str(&format!(",{}", v.as_f64()));
        }
        csv.push('\n');
        rows += 1;
    };

    if !args.adapted {
        // Whole-dataset base embeddings, one row per item in storage order.
        let item_len: usize = ds.item_shape().iter().product();
        let mut data = Vec::with_capacity(ds.len() * item_len);
        let mut classes = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            let (tensor, class) = ds.item(i);
            data.extend(tensor.data().iter().copied());
            classes.push(class);
        }
        let mut batch_shape = vec![ds.len()];
        batch_shape.extend_from_slice(ds.item_shape());
        let batch = Tensor::from_vec(batch_shape, data)?;
        let emb = encode(&params.encoder, &batch)?;
        for (i, class) in classes.iter().enumerate() {
            push_row(&mut csv, *class, "item", &emb.data()[i * m..(i + 1) * m]);
        }
    } else {
        let cfg = &meta.config;
        if cfg.query_aggregation == QueryAggregation::PerClass {
            bail!(
                "per_class aggregation adapts each query once per class; \
                 export needs the shared mean_over_classes form"
            );
        }
        let way = args.way.unwrap_or(cfg.way);
        let shot = args.shot.unwrap_or(cfg.shot);
        let query = args.query.unwrap_or(cfg.query);
        let mode = args.mode.unwrap_or(cfg.mode);
        let mut rng = ChaCha8Rng::seed_from_u64(args.episode_seed);
        let episode = ds.sample_episode(way, shot, query, &mut rng)?;
        let (z_s, z_q) = embed_episode(&params, &episode)?;
        let mab = mab_for(&params, mode)?;
        let adaptation = co_adapt(&z_s, &z_q, &mab, mode, cfg.query_aggregation)?;

        let support_rows = |csv: &mut String,
                            push: &mut dyn FnMut(&mut String, u32, &str, &[T]),
                            tensor: &Tensor<T>,
                            role: &str| {
            for c in 0..way {
                for s in 0..shot {
                    let start = (c * shot + s) * m;
                    push(csv, episode.class_ids[c], role, &tensor.data()[start..start + m]);
                }
            }
        };
        support_rows(&mut csv, &mut push_row, &z_s, "support");
        support_rows(&mut csv, &mut push_row, &adaptation.z_s_adapted, "support_adapted");
        for (i, &label) in episode.query_labels.iter().enumerate() {
            push_row(
                &mut csv,
                episode.class_ids[label],
                "query",
                &z_q.data()[i * m..(i + 1) * m],
            );
        }
        for (i, &label) in episode.query_labels.iter().enumerate() {
            push_row(
                &mut csv,
                episode.class_ids[label],
                "query_adapted",
                &adaptation.z_q_adapted.data()[i * m..(i + 1) * m],
            );
        }
    }

    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;
    RunManifest::new(
        "export-emb",
        json!({ "adapted": args.adapted, "embed_dim": m, "rows": rows }),
        json!({ "episode_seed": args.episode_seed }),
    )
    .input(&args.ckpt)
    .input(&args.data)
    .output(&args.out)
    .write(&sibling_manifest(&args.out))?;
    println!(
        "{}",
        json!({ "out": args.out.display().to_string(), "rows": rows, "embed_dim": m })
    );
    Ok(())
}

// ----------------------------------------------------------------- shared

/// Encodes an episode into [way, shot, m] support and [queries, m] query
/// embeddings.
fn embed_episode<T: Scalar>(
    params: &Params<T>,
    episode: &Episode<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let m = params.encoder.output_dim();
    let z_s_flat = encode(&params.encoder, &episode.support_flat())?;
    let z_s = z_s_flat.reshaped(vec![episode.way(), episode.shot(), m])?;
    let z_q = encode(&params.encoder, &episode.query)?;
    Ok((z_s, z_q))
}

/// The attention block to adapt with. Parameter-free modes fall back to the
/// identity block; parametric modes require trained weights.
fn mab_for<T: Scalar>(params: &Params<T>, mode: AdaptMode) -> Result<MabParameters<T>> {
    match (&params.mab, mode.is_parametric()) {
        (Some(mab), _) => Ok(mab.clone()),
        (None, false) => Ok(MabParameters::identity(params.encoder.output_dim())),
        (None, true) => bail!(
            "checkpoint stores no attention parameters but mode {mode} needs them"
        ),
    }
}

fn opt_tensor_json<T: Scalar>(tensor: &Option<Tensor<T>>) -> serde_json::Value {
    tensor
        .as_ref()
        .map(tensor_json)
        .unwrap_or(serde_json::Value::Null)
}

/// Nested-array JSON for a tensor, e.g. [[a, b], [c, d]] for a 2x2.
fn tensor_json<T: Scalar>(tensor: &Tensor<T>) -> serde_json::Value {
    fn build(shape: &[usize], data: &[f64]) -> serde_json::Value {
        match shape {
            [] => json!(data[0]),
            [_] => json!(data),
            [first, rest @ ..] => {
                let chunk = data.len() / first;
                let items: Vec<serde_json::Value> = (0..*first)
                    .map(|i| build(rest, &data[i * chunk..(i + 1) * chunk]))
                    .collect();
                json!(items)
            }
        }
    }
    let data: Vec<f64> = tensor.data().iter().map(|v| v.as_f64()).collect();
    build(tensor.shape(), &data)
}
