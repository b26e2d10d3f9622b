//! `demotune`: split sampling, training suites, ablations, and synthetic
//! data generation from the command line.
//!
//! Flags mirror the config keys one-to-one; a `--run-spec` TOML file can
//! supply any of them, with explicit flags taking precedence. Exit codes:
//! 0 ok, 2 usage/config error, 3 data error, 4 training divergence.

use std::error::Error as StdError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use demotune_core::bank::{DemoSampling, VirtualInit};
use demotune_core::contrastive::{ClMode, ClVector};
use demotune_core::data::{make_seed_suite, synthetic_sentiment, Dataset};
use demotune_core::task::TaskConfig;
use demotune_core::trainer::{
    ablate, run_suite, AblationAxis, Method, ModelShape, SuiteSpec, TrainConfig, TrainContext,
    DEFAULT_K, DEFAULT_SEEDS,
};
use demotune_core::{Error, Result};

const SEED_ENV: &str = "DEMOTUNE_SEED";

#[derive(Parser)]
#[command(
    name = "demotune",
    version,
    about = "Few-shot prompt tuning with trainable virtual demonstrations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw the per-seed K-shot train/dev splits and write their manifests.
    SampleSplits(SampleSplitsArgs),
    /// Train one method across the seed suite and report aggregated metrics.
    Train(TrainArgs),
    /// Run one ablation axis and emit a comparison table.
    Ablate(AblateArgs),
    /// Generate the bundled synthetic sentiment dataset.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct PathArgs {
    /// TOML file supplying defaults for any of the other flags.
    #[arg(long)]
    run_spec: Option<PathBuf>,
    /// Task id resolved against --configs-dir (e.g. `sst2`).
    #[arg(long)]
    task: Option<String>,
    /// Explicit task config path; overrides --task.
    #[arg(long)]
    task_config: Option<PathBuf>,
    #[arg(long, default_value = "configs")]
    configs_dir: PathBuf,
    /// Dataset file: `.tsv` loads as TSV, anything else as JSONL.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for manifests, metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Examples per class in train (dev gets the same amount).
    #[arg(long)]
    k: Option<usize>,
    /// Number of seeds drawn from the default suite 13,21,42,87,100.
    #[arg(long)]
    seeds: Option<usize>,
    /// Explicit comma-separated seed values; overrides --seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Run this many seeds concurrently (1 = sequential).
    #[arg(long, default_value_t = 1)]
    parallel_seeds: usize,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    cl_mode: Option<ClModeArg>,
    /// Contrastive weight in the joint objective.
    #[arg(long)]
    lambda: Option<f64>,
    /// Softmax temperature for the in-batch-negatives loss.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    cl_vector: Option<ClVectorArg>,
    /// Block the gradient through the positive view's encoder pass.
    #[arg(long)]
    stop_grad_positive: bool,
    /// Virtual demonstration length per class.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    virtual_init: Option<VirtualInitArg>,
    /// Std for --virtual-init gaussian.
    #[arg(long)]
    virtual_init_std: Option<f64>,
    #[arg(long, value_enum)]
    demo_sampling: Option<DemoSamplingArg>,
    /// Train only prompt/virtual/head parameters.
    #[arg(long)]
    freeze_encoder: bool,
    /// Prompt positions auto-inserted for continuous prompting.
    #[arg(long)]
    prompt_len: Option<usize>,
    // Encoder shape.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    init_std: Option<f64>,
}

#[derive(Args)]
struct SampleSplitsArgs {
    #[command(flatten)]
    paths: PathArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    paths: PathArgs,
    #[command(flatten)]
    tune: TuneArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    paths: PathArgs,
    #[command(flatten)]
    tune: TuneArgs,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Virtual demonstration lengths for --axis length_n.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Destination JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum MethodArg {
    Finetune,
    PromptManual,
    PromptContinuous,
    DemoReal,
    DemoTuning,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Finetune => Method::Finetune,
            MethodArg::PromptManual => Method::PromptManual,
            MethodArg::PromptContinuous => Method::PromptContinuous,
            MethodArg::DemoReal => Method::DemoReal,
            MethodArg::DemoTuning => Method::DemoTuning,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ClModeArg {
    Off,
    #[value(alias = "info_nce", alias = "with_negatives")]
    Infonce,
    #[value(alias = "no_negatives", alias = "without_negatives")]
    NegativeFree,
}

impl From<ClModeArg> for ClMode {
    fn from(m: ClModeArg) -> ClMode {
        match m {
            ClModeArg::Off => ClMode::Off,
            ClModeArg::Infonce => ClMode::InfoNce,
            ClModeArg::NegativeFree => ClMode::NegativeFree,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ClVectorArg {
    Cls,
    Mask,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum VirtualInitArg {
    Gaussian,
    VocabSample,
    ClassMeanEmbedding,
    ClassMeanEncoded,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum DemoSamplingArg {
    Uniform,
    SimilarityFiltered,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum AxisArg {
    NegVsNoneg,
    LengthN,
    SamplingStrategy,
}

/// Optional defaults loaded from `--run-spec`; every key mirrors a flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSpec {
    task: Option<String>,
    task_config: Option<PathBuf>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    k: Option<usize>,
    seeds: Option<Vec<u64>>,
    parallel_seeds: Option<usize>,
    method: Option<String>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    max_steps: Option<usize>,
    eval_every: Option<usize>,
    weight_decay: Option<f64>,
    cl_mode: Option<String>,
    lambda: Option<f64>,
    tau: Option<f64>,
    cl_vector: Option<String>,
    stop_grad_positive: Option<bool>,
    n: Option<usize>,
    virtual_init: Option<String>,
    virtual_init_std: Option<f64>,
    demo_sampling: Option<String>,
    freeze_encoder: Option<bool>,
    prompt_len: Option<usize>,
    dim: Option<usize>,
    num_heads: Option<usize>,
    num_layers: Option<usize>,
    ff_dim: Option<usize>,
    max_len: Option<usize>,
    init_std: Option<f64>,
}

impl RunSpec {
    fn load(path: &Path) -> Result<RunSpec> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::ParseError {
            context: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

fn parse_cl_mode(s: &str) -> Result<ClMode> {
    match s {
        "off" => Ok(ClMode::Off),
        "infonce" | "info_nce" | "with_negatives" => Ok(ClMode::InfoNce),
        "negative_free" | "no_negatives" | "without_negatives" => Ok(ClMode::NegativeFree),
        other => Err(Error::InvalidConfig(format!("unknown cl_mode {other:?}"))),
    }
}

fn parse_cl_vector(s: &str) -> Result<ClVector> {
    match s {
        "cls" => Ok(ClVector::Cls),
        "mask" => Ok(ClVector::Mask),
        other => Err(Error::InvalidConfig(format!("unknown cl_vector {other:?}"))),
    }
}

fn parse_virtual_init(s: &str, std: f64) -> Result<VirtualInit> {
    match s {
        "gaussian" => Ok(VirtualInit::Gaussian { std }),
        "vocab_sample" => Ok(VirtualInit::VocabSample),
        "class_mean_embedding" => Ok(VirtualInit::ClassMeanEmbedding),
        "class_mean_encoded" => Ok(VirtualInit::ClassMeanEncoded),
        other => Err(Error::InvalidConfig(format!("unknown virtual_init {other:?}"))),
    }
}

fn parse_demo_sampling(s: &str) -> Result<DemoSampling> {
    match s {
        "uniform" => Ok(DemoSampling::Uniform),
        "similarity_filtered" => Ok(DemoSampling::SimilarityFiltered),
        other => Err(Error::InvalidConfig(format!("unknown demo_sampling {other:?}"))),
    }
}

/// Everything a command needs after merging defaults, run spec and flags.
struct Resolved {
    task_config: PathBuf,
    dataset: PathBuf,
    out: PathBuf,
    train: TrainConfig,
    shape: ModelShape,
    suite: SuiteSpec,
    /// Overrides the task's virtual demonstration length.
    n: Option<usize>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not a seed"))),
        Err(_) => Ok(None),
    }
}

fn resolve(paths: &PathArgs, tune: Option<&TuneArgs>) -> Result<Resolved> {
    let spec = match &paths.run_spec {
        Some(p) => RunSpec::load(p)?,
        None => RunSpec::default(),
    };

    let task_config = paths
        .task_config
        .clone()
        .or_else(|| spec.task_config.clone())
        .or_else(|| {
            paths
                .task
                .as_ref()
                .or(spec.task.as_ref())
                .map(|t| paths.configs_dir.join(format!("{t}.toml")))
        })
        .ok_or_else(|| Error::InvalidConfig("missing --task or --task-config".into()))?;
    let dataset = paths
        .dataset
        .clone()
        .or(spec.dataset)
        .ok_or_else(|| Error::InvalidConfig("missing --dataset".into()))?;
    if !task_config.exists() {
        return Err(Error::InvalidConfig(format!(
            "task config {} does not exist",
            task_config.display()
        )));
    }
    if !dataset.exists() {
        return Err(Error::InvalidConfig(format!(
            "dataset {} does not exist",
            dataset.display()
        )));
    }
    let out = paths
        .out
        .clone()
        .or(spec.out)
        .unwrap_or_else(|| PathBuf::from("runs"));

    let k = paths.k.or(spec.k).unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let seed_values = match (&paths.seed_list, &spec.seeds, paths.seeds) {
        (Some(list), _, _) => list.clone(),
        (None, Some(list), _) => list.clone(),
        (None, None, Some(count)) => {
            if count == 0 {
                return Err(Error::InvalidConfig("--seeds must be >= 1".into()));
            }
            let mut v: Vec<u64> = DEFAULT_SEEDS.iter().copied().take(count).collect();
            let mut next = 101;
            while v.len() < count {
                v.push(next);
                next += 1;
            }
            v
        }
        (None, None, None) => match env_seed()? {
            Some(s) => vec![s],
            None => DEFAULT_SEEDS.to_vec(),
        },
    };
    if seed_values.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    let parallel = paths.parallel_seeds.max(spec.parallel_seeds.unwrap_or(1)) > 1;

    let mut train = TrainConfig::default();
    if let Some(m) = &spec.method {
        train.method = Method::parse(m)?;
    }
    macro_rules! fold {
        ($field:ident) => {
            if let Some(v) = spec.$field {
                train.$field = v;
            }
        };
    }
    fold!(lr);
    fold!(batch_size);
    fold!(max_steps);
    fold!(eval_every);
    fold!(weight_decay);
    fold!(freeze_encoder);
    fold!(prompt_len);
    if let Some(m) = &spec.cl_mode {
        train.joint.mode = parse_cl_mode(m)?;
    }
    if let Some(v) = spec.lambda {
        train.joint.lambda = v;
    }
    if let Some(v) = spec.tau {
        train.joint.tau = v;
    }
    if let Some(v) = &spec.cl_vector {
        train.joint.cl_vector = parse_cl_vector(v)?;
    }
    if let Some(v) = spec.stop_grad_positive {
        train.joint.stop_grad_positive = v;
    }
    if let Some(v) = &spec.virtual_init {
        train.virtual_init = parse_virtual_init(v, spec.virtual_init_std.unwrap_or(0.02))?;
    }
    if let Some(v) = &spec.demo_sampling {
        train.demo_sampling = parse_demo_sampling(v)?;
    }

    let mut shape = ModelShape::default();
    macro_rules! fold_shape {
        ($field:ident) => {
            if let Some(v) = spec.$field {
                shape.$field = v;
            }
        };
    }
    fold_shape!(dim);
    fold_shape!(num_heads);
    fold_shape!(num_layers);
    fold_shape!(ff_dim);
    fold_shape!(max_len);
    fold_shape!(init_std);

    if let Some(tune) = tune {
        if let Some(m) = tune.method {
            train.method = m.into();
        }
        macro_rules! flag {
            ($field:ident) => {
                if let Some(v) = tune.$field {
                    train.$field = v;
                }
            };
        }
        flag!(lr);
        flag!(batch_size);
        flag!(max_steps);
        flag!(eval_every);
        flag!(weight_decay);
        flag!(prompt_len);
        if tune.freeze_encoder {
            train.freeze_encoder = true;
        }
        if let Some(m) = tune.cl_mode {
            train.joint.mode = m.into();
        }
        if let Some(v) = tune.lambda {
            train.joint.lambda = v;
        }
        if let Some(v) = tune.tau {
            train.joint.tau = v;
        }
        if let Some(v) = tune.cl_vector {
            train.joint.cl_vector = match v {
                ClVectorArg::Cls => ClVector::Cls,
                ClVectorArg::Mask => ClVector::Mask,
            };
        }
        if tune.stop_grad_positive {
            train.joint.stop_grad_positive = true;
        }
        if let Some(v) = tune.virtual_init {
            let std = tune.virtual_init_std.or(spec.virtual_init_std).unwrap_or(0.02);
            train.virtual_init = match v {
                VirtualInitArg::Gaussian => VirtualInit::Gaussian { std },
                VirtualInitArg::VocabSample => VirtualInit::VocabSample,
                VirtualInitArg::ClassMeanEmbedding => VirtualInit::ClassMeanEmbedding,
                VirtualInitArg::ClassMeanEncoded => VirtualInit::ClassMeanEncoded,
            };
        }
        if let Some(v) = tune.demo_sampling {
            train.demo_sampling = match v {
                DemoSamplingArg::Uniform => DemoSampling::Uniform,
                DemoSamplingArg::SimilarityFiltered => DemoSampling::SimilarityFiltered,
            };
        }
        macro_rules! flag_shape {
            ($field:ident) => {
                if let Some(v) = tune.$field {
                    shape.$field = v;
                }
            };
        }
        flag_shape!(dim);
        flag_shape!(num_heads);
        flag_shape!(num_layers);
        flag_shape!(ff_dim);
        flag_shape!(max_len);
        flag_shape!(init_std);
    }
    train.validate()?;
    let n = tune.and_then(|t| t.n).or(spec.n);

    Ok(Resolved {
        task_config,
        dataset,
        out,
        train,
        shape,
        suite: SuiteSpec {
            k,
            seeds: seed_values,
            parallel,
        },
        n,
    })
}

/// Loads the task config and applies the resolved length override.
fn load_task(r: &Resolved) -> Result<TaskConfig> {
    let mut task = TaskConfig::load(&r.task_config)?;
    if let Some(n) = r.n {
        task.n = n;
        task.allow_any_n = true;
        task.validate()?;
    }
    Ok(task)
}

fn load_dataset(path: &Path, labels: &[String]) -> Result<Dataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => Dataset::load_tsv(path, labels),
        _ => Dataset::load_jsonl(path, labels),
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_sample_splits(args: &SampleSplitsArgs) -> Result<()> {
    let r = resolve(&args.paths, None)?;
    let task = load_task(&r)?;
    let labels = task.labels();
    let dataset = load_dataset(&r.dataset, &labels)?;
    let manifests = make_seed_suite(&dataset, &labels, r.suite.k, &r.suite.seeds)?;
    std::fs::create_dir_all(&r.out)?;
    for m in &manifests {
        let path = r.out.join(format!("split-seed{}.json", m.seed));
        m.save(&path)?;
        println!("wrote {}", path.display());
    }
    let index = serde_json::json!({
        "task_id": task.task_id,
        "k": r.suite.k,
        "seeds": r.suite.seeds,
        "dataset": r.dataset.display().to_string(),
        "config_hash": hex_sha256(
            format!("{}|{}|{:?}|{}", task.task_id, r.suite.k, r.suite.seeds, dataset.len())
                .as_bytes()
        ),
    });
    let index_path = r.out.join("splits-index.json");
    std::fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    println!("wrote {}", index_path.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let r = resolve(&args.paths, Some(&args.tune))?;
    let task = load_task(&r)?;
    let labels = task.labels();
    let dataset = load_dataset(&r.dataset, &labels)?;
    let ctx = TrainContext::build(task, &dataset, &r.shape)?;
    std::fs::create_dir_all(&r.out)?;
    let result = run_suite(&ctx, &r.train, &r.shape, &dataset, &r.suite, None, Some(&r.out))?;
    let metrics_path = r.out.join("metrics.json");
    std::fs::write(&metrics_path, serde_json::to_string_pretty(&result)?)?;

    println!(
        "task {}  method {}  k {}  ({} seeds)",
        result.task_id,
        result.method,
        result.k,
        result.runs.len()
    );
    println!("{:>6}  {:>9}  {:>9}  {:>9}", "seed", "dev", "test", "best_step");
    for run in &result.runs {
        println!(
            "{:>6}  {:>9.4}  {:>9.4}  {:>9}",
            run.seed, run.dev_score, run.test_score, run.best_step
        );
    }
    println!("mean {:.4}  std {:.4}", result.mean, result.std);
    println!("wrote {}", metrics_path.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let r = resolve(&args.paths, Some(&args.tune))?;
    let axis = match args.axis {
        AxisArg::NegVsNoneg => AblationAxis::NegVsNoneg,
        AxisArg::LengthN => {
            let grid = args.grid.clone().unwrap_or_else(|| vec![1, 2, 3, 5]);
            if grid.is_empty() || grid.contains(&0) {
                return Err(Error::InvalidConfig(
                    "--grid needs at least one length >= 1".into(),
                ));
            }
            AblationAxis::LengthN(grid)
        }
        AxisArg::SamplingStrategy => AblationAxis::SamplingStrategy,
    };
    let task = load_task(&r)?;
    let labels = task.labels();
    let dataset = load_dataset(&r.dataset, &labels)?;
    let ctx = TrainContext::build(task, &dataset, &r.shape)?;
    let report = ablate(&ctx, &r.train, &r.shape, &dataset, &r.suite, &axis)?;
    std::fs::create_dir_all(&r.out)?;
    let path = r.out.join(format!("ablation-{}.json", report.axis));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;

    println!("axis {}", report.axis);
    println!("{:<22}{:>9}  {:>9}", "variant", "mean", "std");
    for (name, result) in &report.variants {
        println!("{name:<22}{:>9.4}  {:>9.4}", result.mean, result.std);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.per_class == 0 {
        return Err(Error::InvalidConfig("--per-class must be >= 1".into()));
    }
    let dataset = synthetic_sentiment(args.per_class, args.seed);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataset.save_jsonl(&args.out)?;
    println!(
        "wrote {} ({} examples, seed {})",
        args.out.display(),
        dataset.len(),
        args.seed
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::SampleSplits(args) => cmd_sample_splits(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::GenData(args) => cmd_gen_data(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
