//! `autoassign` command-line tool.

mod check;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use autoassign::baselines::{grid_search, random_search, threshold_range, LffPolicy};
use autoassign::data::{self, generate_synthetic, Interaction, RatingFormat, SyntheticSpec};
use autoassign::{run_experiment, Mode, TrainerConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "autoassign", version, about = "Streaming recommender training with learned embedding assignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model on a rating stream and write its outputs.
    Train(TrainArgs),
    /// Search frequency thresholds for the LFF baseline.
    Search(SearchArgs),
    /// Write a synthetic long-tailed rating stream as CSV.
    Synth(SynthArgs),
    /// Render a run directory into tables and plot-ready series.
    Report(ReportArgs),
    /// Run gradient and oracle self-checks.
    Check,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Movielens,
    Netflix,
}

impl From<Format> for RatingFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Movielens => RatingFormat::MovieLens,
            Format::Netflix => RatingFormat::Netflix,
        }
    }
}

/// Data source, configuration file and per-field overrides shared by `train` and `search`.
#[derive(Debug, Args)]
struct RunArgs {
    /// Rating file (or Netflix directory).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Movielens)]
    format: Format,
    /// JSON configuration; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    k_user: Option<usize>,
    #[arg(long)]
    k_item: Option<usize>,
    /// Loss-history length used by the reward.
    #[arg(long)]
    history: Option<usize>,
    /// Mask the Descend action.
    #[arg(long)]
    no_descend: bool,
    /// Use a single shared level per field.
    #[arg(long)]
    single_shared: bool,
    /// Output directory.
    #[arg(long, env = "AUTOASSIGN_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// autoassign+, autoassign, origin or lff.
    #[arg(long)]
    mode: Option<Mode>,
    /// LFF threshold applied to both fields.
    #[arg(long)]
    tau: Option<u64>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Strategy {
    Grid,
    Random,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long, value_enum, default_value_t = Strategy::Grid)]
    strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    lo: u64,
    #[arg(long, default_value_t = 200)]
    hi: u64,
    /// Grid spacing.
    #[arg(long, default_value_t = 10)]
    step: u64,
    /// Random-search draws.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Seed of the random-search draws.
    #[arg(long, default_value_t = 0)]
    search_seed: u64,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON generator spec; flags below override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    users: Option<u64>,
    #[arg(long)]
    items: Option<u64>,
    #[arg(long)]
    interactions: Option<usize>,
    #[arg(long)]
    exponent: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Destination CSV.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 50)]
    bucket_width: u64,
    /// Where tables are written; defaults to the run directory.
    #[arg(long, env = "AUTOASSIGN_OUT")]
    out: Option<PathBuf>,
}

fn load_stream(args: &RunArgs) -> Result<Vec<Interaction>> {
    let dataset = data::load(&args.data, args.format.into())?;
    if !dataset.skipped.is_empty() {
        eprintln!("skipped {} malformed rows", dataset.skipped.len());
    }
    Ok(dataset.interactions)
}

fn build_config(args: &RunArgs, mode: Option<Mode>, tau: Option<u64>) -> Result<TrainerConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainerConfig::default(),
    };
    if let Some(m) = mode {
        config.mode = m;
    }
    if let Some(t) = tau {
        config.lff = LffPolicy::uniform(t);
    }
    macro_rules! set {
        ($($field:ident = $value:expr),*) => {
            $(if let Some(v) = $value { config.$field = v; })*
        };
    }
    set!(
        seed = args.seed,
        batch_size = args.batch_size,
        dim = args.dim,
        warmup_batches = args.warmup,
        k_user = args.k_user,
        k_item = args.k_item,
        history = args.history
    );
    config.no_descend |= args.no_descend;
    config.single_shared |= args.single_shared;
    config.validate()?;
    Ok(config)
}

fn train(args: &TrainArgs) -> Result<()> {
    let config = build_config(&args.run, args.mode, args.tau)?;
    let stream = load_stream(&args.run)?;
    let result = run_experiment(&config, &stream)?;
    result.write_outputs(&args.run.out)?;
    let m = result.metrics();
    println!(
        "{}: accuracy {:.4}, mse {:.4}, auc {}, deduction {:.2}%",
        config.mode,
        m.accuracy,
        m.mse,
        m.auc.map_or_else(|| "undefined".to_owned(), |a| format!("{a:.4}")),
        100.0 * result.summary.param_report.deduction_ratio
    );
    println!("outputs written to {}", args.run.out.display());
    Ok(())
}

fn search(args: &SearchArgs) -> Result<()> {
    let base = build_config(&args.run, Some(Mode::Lff), None)?;
    let stream = load_stream(&args.run)?;
    let table = match args.strategy {
        Strategy::Grid => grid_search(&base, &stream, &threshold_range(args.lo, args.hi, args.step)?)?,
        Strategy::Random => random_search(&base, &stream, args.lo, args.hi, args.trials, args.search_seed)?,
    };
    fs::create_dir_all(&args.run.out).with_context(|| format!("creating {}", args.run.out.display()))?;
    let path = args.run.out.join("search.tsv");
    let tsv = table.to_tsv();
    fs::write(&path, &tsv).with_context(|| format!("writing {}", path.display()))?;
    print!("{tsv}");
    let best = table.best();
    println!(
        "best: tau_user {} tau_item {} accuracy {:.4}",
        best.policy.tau_user, best.policy.tau_item, best.metrics.accuracy
    );
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($field:ident = $value:expr),*) => {
            $(if let Some(v) = $value { spec.$field = v; })*
        };
    }
    set!(
        n_users = args.users,
        n_items = args.items,
        n_interactions = args.interactions,
        exponent = args.exponent,
        noise = args.noise,
        seed = args.seed
    );
    let stream = generate_synthetic(&spec)?;
    write_ratings(&args.output, &stream)?;
    println!("wrote {} interactions to {}", stream.len(), args.output.display());
    Ok(())
}

/// MovieLens layout; labels map to ratings 5 and 1 so they binarize back unchanged.
fn write_ratings(path: &Path, stream: &[Interaction]) -> Result<()> {
    let mut csv = String::from("userId,movieId,rating,timestamp\n");
    for x in stream {
        let rating = if x.label == 1 { 5 } else { 1 };
        csv.push_str(&format!("{},{},{},{}\n", x.user, x.item, rating, x.timestamp));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Search(args) => search(&args),
        Command::Synth(args) => synth(&args),
        Command::Report(args) => report::run(&args.run, args.out.as_deref(), args.bucket_width),
        Command::Check => {
            if check::run_all() {
                Ok(())
            } else {
                bail!("self-check failed")
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
