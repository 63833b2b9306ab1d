//! Command-line interface: dataset generation, training, evaluation,
//! probabilistic power flow runs, mode comparison, and benchmarking.
//! Every subcommand emits a JSON summary to stdout (or `--out`), and any
//! failure exits nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gridflow::grid::{ImportOptions, NetworkCase, PreparedGrid};
use gridflow::metrics::MetricsReport;
use gridflow::nn::Model;
use gridflow::powerflow::SolverSettings;
use gridflow::ppf::{self, Engine, PpfEngine, PpfReport};
use gridflow::sampling::{build_dataset, Dataset, SplitSpec, UncertaintySpec};
use gridflow::training::{self, Mode, StopProtocol, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gridflow",
    version,
    about = "Neural-network accelerated probabilistic power flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw Monte-Carlo samples, solve them, and write a dataset directory.
    GenData(GenDataArgs),
    /// Train a surrogate model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a trained model's accuracy indexes on the test split.
    Eval(EvalArgs),
    /// Run probabilistic power flow with either engine.
    Ppf(PpfArgs),
    /// Train several modes on identical data and compare them.
    Compare(CompareArgs),
    /// Benchmark surrogate inference against the Newton solver.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Network case JSON.
    #[arg(long)]
    case: PathBuf,
    /// Uncertainty spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Number of samples to draw.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split sizes as train,val,test (e.g. 10000,2000,10000).
    #[arg(long)]
    split: String,
    /// Output directory for dataset.gfd and inspection CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (TrainConfig fields; missing fields take
    /// defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory created by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Network case JSON.
    #[arg(long)]
    case: PathBuf,
    /// Training mode override (M0..M6).
    #[arg(long)]
    mode: Option<String>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Where to write the trained model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory created by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Network case JSON.
    #[arg(long)]
    case: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PpfArgs {
    /// dnn (requires --model) or nr.
    #[arg(long)]
    engine: String,
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Trained model file (dnn engine).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Histogram bin count (default: Freedman–Diaconis rule).
    #[arg(long)]
    bins: Option<usize>,
    /// Directory for report.json + CSV tables; stdout JSON if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated modes, e.g. M1,M4,M5,M6.
    #[arg(long)]
    modes: String,
    /// stop-on-accuracy | early-stop | fixed-epochs.
    #[arg(long, default_value = "stop-on-accuracy")]
    protocol: String,
    /// Training config JSON shared by all modes.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory created by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for comparison.json + comparison.csv; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    case: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ppf(args) => cmd_ppf(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_grid(path: &Path) -> Result<PreparedGrid> {
    let case = NetworkCase::load(path, ImportOptions::default())
        .with_context(|| format!("loading case {}", path.display()))?;
    Ok(PreparedGrid::new(&case)?)
}

fn load_spec(path: &Path) -> Result<UncertaintySpec> {
    UncertaintySpec::load(path)
        .with_context(|| format!("loading uncertainty spec {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("dataset.gfd");
    Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn parse_split(text: &str) -> Result<SplitSpec> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        bail!("--split expects train,val,test (got '{text}')");
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing --split '{text}'"))?;
    Ok(SplitSpec {
        train: nums[0],
        val: nums[1],
        test: nums[2],
    })
}

/// Print JSON to stdout or write it to a file.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, json.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct GenDataSummary {
    case: String,
    n_requested: usize,
    n_kept: usize,
    discarded: usize,
    train: usize,
    val: usize,
    test: usize,
    seed: u64,
    dataset: String,
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let grid = load_grid(&args.case)?;
    let spec = load_spec(&args.spec)?;
    let split = parse_split(&args.split)?;
    let dataset = build_dataset(
        &grid,
        &spec,
        args.n,
        args.seed,
        split,
        &SolverSettings::default(),
    )?;
    std::fs::create_dir_all(&args.out)?;
    let file = args.out.join("dataset.gfd");
    dataset.save(&file)?;
    dataset.export_csv(&args.out)?;
    let summary = GenDataSummary {
        case: dataset.case_name.clone(),
        n_requested: args.n,
        n_kept: dataset.n_samples(),
        discarded: dataset.discarded,
        train: dataset.train,
        val: dataset.val,
        test: dataset.test,
        seed: args.seed,
        dataset: file.display().to_string(),
    };
    emit(&summary, None)
}

#[derive(Serialize)]
struct TrainSummary {
    mode: String,
    n_epoch: usize,
    stop_reason: training::StopReason,
    best_val_loss: f64,
    accuracy_epoch: Option<usize>,
    test_metrics: MetricsReport,
    model: String,
    history_csv: String,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let grid = load_grid(&args.case)?;
    let dataset = load_dataset(&args.data)?;
    let mut config: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(mode) = &args.mode {
        config.mode = Mode::from_str(mode).map_err(anyhow::Error::msg)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (model, history) = training::train(&config, &dataset, &grid)?;
    model.save(&args.out)?;
    let history_path = args.out.with_extension("history.csv");
    std::fs::write(&history_path, history.to_csv().as_bytes())?;

    let indexes = training::evaluate_on_range(
        &model.network,
        &dataset,
        &grid,
        dataset.test_range(),
        &config.thresholds,
    );
    let n_epoch = history.accuracy_epoch.unwrap_or(history.n_epoch);
    let summary = TrainSummary {
        mode: config.mode.to_string(),
        n_epoch,
        stop_reason: history.stop_reason,
        best_val_loss: history.best_val_loss,
        accuracy_epoch: history.accuracy_epoch,
        test_metrics: MetricsReport::from_indexes(
            indexes,
            n_epoch,
            config.thresholds,
            dataset.test_range().len(),
        ),
        model: args.out.display().to_string(),
        history_csv: history_path.display().to_string(),
    };
    emit(&summary, None)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let grid = load_grid(&args.case)?;
    let dataset = load_dataset(&args.data)?;
    let model = Model::load(&args.model)?;
    let indexes = training::evaluate_on_range(
        &model.network,
        &dataset,
        &grid,
        dataset.test_range(),
        &Default::default(),
    );
    let report = MetricsReport::from_indexes(
        indexes,
        0,
        Default::default(),
        dataset.test_range().len(),
    );
    emit(&report, args.out.as_deref())
}

fn cmd_ppf(args: PpfArgs) -> Result<()> {
    let grid = load_grid(&args.case)?;
    let spec = load_spec(&args.spec)?;
    let engine = Engine::from_str(&args.engine).map_err(anyhow::Error::msg)?;
    let settings = SolverSettings::default();
    let model;
    let evaluator = match engine {
        Engine::Dnn => {
            let path = args
                .model
                .as_ref()
                .context("--engine dnn requires --model")?;
            model = Model::load(path)?;
            PpfEngine::Model(&model)
        }
        Engine::Nr => PpfEngine::Solver(&settings),
    };
    let (statistics, timing) = ppf::run_ppf(evaluator, &grid, &spec, args.n, args.seed, args.bins)?;
    let report = PpfReport {
        statistics,
        timing,
        metrics: None,
    };
    match &args.out {
        Some(dir) => {
            ppf::export_report(&report, dir)
                .with_context(|| format!("writing report to {}", dir.display()))?;
            println!(
                "{}",
                serde_json::json!({
                    "report": dir.join("report.json").display().to_string(),
                    "evaluation_seconds": report.timing.evaluation_seconds,
                    "n_samples": report.statistics.n_samples,
                })
            );
            Ok(())
        }
        None => emit(&report, None),
    }
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let grid = load_grid(&args.case)?;
    let dataset = load_dataset(&args.data)?;
    let mut config: TrainConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.stop = match args.protocol.as_str() {
        "stop-on-accuracy" => StopProtocol::StopOnAccuracy {
            target: 0.05,
            check_interval: 5,
        },
        "early-stop" => StopProtocol::EarlyStop { patience: 20 },
        "fixed-epochs" => StopProtocol::FixedEpochs,
        other => bail!("unknown protocol '{other}'"),
    };
    let modes: Vec<Mode> = args
        .modes
        .split(',')
        .map(|m| Mode::from_str(m.trim()).map_err(anyhow::Error::msg))
        .collect::<Result<_>>()?;
    let table = ppf::compare_methods(&modes, &config, &dataset, &grid);
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(
                dir.join("comparison.json"),
                serde_json::to_string_pretty(&table)?.as_bytes(),
            )?;
            std::fs::write(dir.join("comparison.csv"), table.to_csv().as_bytes())?;
            println!(
                "{}",
                serde_json::json!({
                    "report": dir.join("comparison.json").display().to_string(),
                    "modes": table.rows.len(),
                })
            );
            Ok(())
        }
        None => emit(&table, None),
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let grid = load_grid(&args.case)?;
    let spec = load_spec(&args.spec)?;
    let model = Model::load(&args.model)?;
    let report = ppf::bench(
        &model,
        &grid,
        &spec,
        &SolverSettings::default(),
        args.n,
        args.seed,
    )?;
    emit(&report, args.out.as_deref())
}
