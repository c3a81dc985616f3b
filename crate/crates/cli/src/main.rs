use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use debias_core::pipeline::{Pipeline, RunConfig, Stage, StageError};
use debias_core::synth::{generate, write_synth, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "debias", version, about = "Influence-based bias identification and unlearning for next-item recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the backbone and write model.ckpt.
    Train(RunArgs),
    /// Score candidates and learn the removal mask (needs model.ckpt).
    Identify(RunArgs),
    /// Apply the one-step update for the masked set (needs model.ckpt, mask.csv).
    Unlearn(RunArgs),
    /// Write metrics.csv and decile_report.csv for the stored checkpoints.
    Evaluate(RunArgs),
    /// Retrain without the masked set and write gap.csv.
    GapCheck(RunArgs),
    /// Every stage in order.
    RunAll(RunArgs),
    /// Lambda grid search scored on the validation split.
    Grid(GridArgs),
    /// Write a synthetic planted-bias dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and DEBIAS_OUTPUT_DIR).
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Override any config key, e.g. `--set mask.lambda_spa=100`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// After the search, run every stage with the selected lambdas.
    #[arg(long)]
    then_run: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Destination folder for interactions.tsv and attributes.tsv.
    #[arg(short, long)]
    output_dir: PathBuf,
    /// TOML file with generator settings.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_sets(cfg: RunConfig, sets: &[String]) -> Result<RunConfig> {
    if sets.is_empty() {
        return Ok(cfg);
    }
    let mut root = toml::Value::try_from(&cfg).context("serializing config")?;
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .with_context(|| format!("--set {set}: expected SECTION.KEY=VALUE"))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut node = &mut root;
        for p in path {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*p))
                .with_context(|| format!("--set {set}: unknown section {p}"))?;
        }
        let table = node
            .as_table_mut()
            .with_context(|| format!("--set {set}: {key} is not inside a section"))?;
        table.insert(last.to_string(), parse_value(raw.trim()));
    }
    let text = toml::to_string(&root)?;
    RunConfig::from_toml_str(&text).map_err(|e| anyhow::anyhow!("--set: {e}"))
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(p) = &args.interactions {
        cfg.data.interactions = p.clone();
    }
    if let Some(p) = &args.attributes {
        cfg.data.attributes = Some(p.clone());
    }
    let mut cfg = apply_sets(cfg, &args.sets)?;
    if let Some(d) = &args.output_dir {
        cfg.run.output_dir = d.clone();
    }
    Ok(cfg)
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

enum Failure {
    Stage(StageError),
    /// Bad flags, overrides or config file; reported with the config stage code.
    Config(anyhow::Error),
    Other(anyhow::Error),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn run_stage(args: &RunArgs, f: impl FnOnce(&mut Pipeline) -> Result<(), StageError>) -> Result<(), Failure> {
    init_threads(args.threads)?;
    let cfg = resolve_config(args).map_err(Failure::Config)?;
    let mut p = Pipeline::new(cfg)?;
    p.write_resolved_config()?;
    f(&mut p).inspect_err(|e| p.mark_failed(e))?;
    println!("outputs written to {}", p.output_dir().display());
    Ok(())
}

fn run_grid(args: &GridArgs) -> Result<(), Failure> {
    init_threads(args.run.threads)?;
    let cfg = resolve_config(&args.run).map_err(Failure::Config)?;
    let mut p = Pipeline::new(cfg.clone())?;
    let outcome = (|| {
        let model = p.train()?;
        p.grid(&model)
    })()
    .inspect_err(|e| p.mark_failed(e))?;
    let b = outcome.best;
    println!(
        "best lambdas: fair={} acc={} spa={} (validation F {:.6}, {} selected)",
        b.lambdas.fair, b.lambdas.acc, b.lambdas.spa, b.score.f, b.selected
    );
    let mut best_cfg = cfg;
    best_cfg.mask.lambda_fair = b.lambdas.fair;
    best_cfg.mask.lambda_acc = b.lambdas.acc;
    best_cfg.mask.lambda_spa = b.lambdas.spa;
    let path = p.path("grid_best.toml");
    std::fs::write(&path, best_cfg.to_toml_string().map_err(anyhow::Error::from)?)
        .with_context(|| format!("writing {}", path.display()))?;
    if args.then_run {
        let mut full = Pipeline::new(best_cfg)?;
        full.run_all().inspect_err(|e| full.mark_failed(e))?;
        println!("full run with selected lambdas written to {}", full.output_dir().display());
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SynthConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(u) = args.users {
        cfg.users = u;
    }
    if let Some(i) = args.items {
        cfg.items = i;
    }
    let data = generate(&cfg)?;
    let files = write_synth(&data, &args.output_dir)?;
    println!(
        "wrote {} and {}",
        files.interactions.display(),
        files.attributes.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_stage(a, |p| p.train().map(drop)),
        Command::Identify(a) => run_stage(a, |p| p.run_identify().map(drop)),
        Command::Unlearn(a) => run_stage(a, |p| p.run_unlearn().map(drop)),
        Command::Evaluate(a) => run_stage(a, |p| p.run_evaluate().map(drop)),
        Command::GapCheck(a) => run_stage(a, |p| p.run_gap_check().map(drop)),
        Command::RunAll(a) => run_stage(a, |p| p.run_all().map(drop)),
        Command::Grid(a) => run_grid(a),
        Command::Synth(a) => run_synth(a).map_err(Failure::Other),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(Stage::Config.exit_code() as u8)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
