use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hcfm_core::cooccurrence::DEFAULT_LAMBDA;
use hcfm_core::data_model::Timestamp;
use hcfm_core::evaluation::{EvalSettings, Grid, MethodKind};
use hcfm_core::factorization::TrainConfig;
use hcfm_core::pipeline::{
    cmd_build, cmd_evaluate, cmd_generate, cmd_ingest, cmd_recommend, replay, BuildOptions, CutoffSpec,
    EvaluateOptions, PreprocessOptions, RecommendMethod, RunManifest, TrainOptions,
};
use hcfm_core::recommenders::{HcfmParams, RecentWindow, DEFAULT_SIGMA};
use hcfm_core::{par, Error, ErrorKind};
use log::info;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_TRAINING: u8 = 4;

#[derive(Parser)]
#[command(name = "hcfm", version, about = "Next-search-term recommendation from EHR codes and search logs")]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic encounter/search dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse, clean and summarize a dataset.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prep: PrepArgs,
    },
    /// Build the co-occurrence matrix.
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[command(flatten)]
        cutoff: CutoffArgs,
        #[command(flatten)]
        prep: PrepArgs,
    },
    /// Factorize a built matrix.
    Train {
        /// Output directory of `build`.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Rank terms for each line of a context file.
    Recommend {
        #[arg(long)]
        model: PathBuf,
        /// CSV with `query_id,recent_terms,recent_encounters`.
        #[arg(long)]
        context: PathBuf,
        #[arg(short = 'n', long, default_value_t = 10)]
        top: usize,
        #[arg(long, value_enum, default_value_t = Method::Hcfm)]
        method: Method,
        #[arg(long, default_value = "all")]
        ms: String,
        #[arg(long, default_value_t = 1)]
        mc: usize,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one parameter setting (or a grid file) under a time cutoff.
    Evaluate(EvalArgs),
    /// Evaluate the full default grid, optionally narrowed by a grid file.
    GridSearch(EvalArgs),
    /// Re-run the evaluation recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Hcfm,
    Copm,
    Ptn,
    Tptcf,
    Random,
}

impl From<Method> for MethodKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Hcfm => MethodKind::Hcfm,
            Method::Copm => MethodKind::Copm,
            Method::Ptn => MethodKind::Ptn,
            Method::Tptcf => MethodKind::Tptcf,
            Method::Random => MethodKind::Random,
        }
    }
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long, default_value_t = 2)]
    min_searches: usize,
    #[arg(long, default_value_t = 3)]
    min_encounters: usize,
    #[arg(long, default_value_t = 2)]
    min_term_frequency: usize,
    /// Keep empty, numeric-only and punctuation-only terms.
    #[arg(long)]
    keep_irregular: bool,
    /// Two-column CSV of term rewrites.
    #[arg(long)]
    synonyms: Option<PathBuf>,
    #[arg(long, default_value_t = 90)]
    window_days: i64,
}

impl PrepArgs {
    fn options(&self) -> PreprocessOptions {
        PreprocessOptions {
            min_searches_per_patient: self.min_searches,
            min_encounters_per_patient: self.min_encounters,
            min_term_frequency: self.min_term_frequency,
            drop_irregular_terms: !self.keep_irregular,
            synonyms: self.synonyms.clone(),
            window_days: self.window_days,
        }
    }
}

#[derive(Args)]
struct CutoffArgs {
    /// ISO-8601 cutoff; events before it are training data.
    #[arg(long, conflicts_with = "cutoff_quantile")]
    cutoff: Option<String>,
    /// Cutoff at this quantile of search timestamps.
    #[arg(long)]
    cutoff_quantile: Option<f64>,
}

impl CutoffArgs {
    fn spec(&self) -> Result<Option<CutoffSpec>, Error> {
        match (&self.cutoff, self.cutoff_quantile) {
            (Some(t), _) => Timestamp::parse(t)
                .map(|t| Some(CutoffSpec::At(t)))
                .map_err(|_| Error::InvalidParameter(format!("--cutoff: not an ISO-8601 timestamp: {t:?}"))),
            (None, Some(q)) => Ok(Some(CutoffSpec::Quantile(q))),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let base = TrainConfig::default();
        TrainConfig {
            d: self.d.unwrap_or(base.d),
            gamma: self.gamma.unwrap_or(base.gamma),
            seed: self.seed.unwrap_or(base.seed),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            rel_tol: self.rel_tol.unwrap_or(base.rel_tol),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cutoff: CutoffArgs,
    #[arg(long, value_enum, default_value_t = Method::Hcfm)]
    method: Method,
    /// `key=v1,v2,...` lines (ms, mc, alpha, d, gamma, sigma, sp, st, talpha).
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    ms: Option<String>,
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    prep: PrepArgs,
}

fn read_user_file(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))
}

impl EvalArgs {
    fn options(&self, full_grid: bool) -> Result<EvaluateOptions, Error> {
        let cutoff = self
            .cutoff
            .spec()?
            .ok_or_else(|| Error::InvalidParameter("one of --cutoff or --cutoff-quantile is required".into()))?;
        let train = self.train.config();
        let mut grid = if full_grid {
            Grid::default()
        } else {
            Grid::single(RecentWindow::All, 1, 0.5, train.d, train.gamma, DEFAULT_SIGMA)
        };
        if let Some(ms) = &self.ms {
            grid.ms = vec![ms.parse()?];
        }
        if let Some(mc) = self.mc {
            grid.mc = vec![mc];
        }
        if let Some(alpha) = self.alpha {
            grid.alpha = vec![alpha];
        }
        if let Some(sigma) = self.sigma {
            grid.sigma = vec![sigma];
        }
        if let Some(d) = self.train.d {
            grid.d = vec![d];
        }
        if let Some(gamma) = self.train.gamma {
            grid.gamma = vec![gamma];
        }
        if let Some(path) = &self.grid {
            grid = Grid::parse(&read_user_file(path)?, grid)?;
        }
        Ok(EvaluateOptions {
            data_dir: self.data.clone(),
            preprocess: self.prep.options(),
            cutoff,
            method: self.method.into(),
            grid,
            settings: EvalSettings {
                lambda: self.lambda,
                seed: train.seed,
                learning_rate: train.learning_rate,
                max_epochs: train.max_epochs,
                rel_tol: train.rel_tol,
            },
        })
    }
}

fn announce(manifest: &RunManifest, out: &Path) {
    info!("{} finished; {} outputs in {}", manifest.subcommand, manifest.outputs.len(), out.display());
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::InvalidParameter("--workers must be >= 1".into()));
        }
        par::set_global_workers(w).map_err(Error::InvalidParameter)?;
    }
    match cli.command {
        Command::Generate { config, out } => announce(&cmd_generate(&config, &out)?, &out),
        Command::Ingest { data, out, prep } => announce(&cmd_ingest(&data, &out, &prep.options())?, &out),
        Command::Build { data, out, lambda, cutoff, prep } => {
            let options = BuildOptions {
                data_dir: data,
                preprocess: prep.options(),
                lambda,
                cutoff: cutoff.spec()?,
            };
            announce(&cmd_build(&options, &out)?, &out)
        }
        Command::Train { matrix, out, train } => {
            let options = TrainOptions {
                matrix_dir: matrix,
                config: train.config(),
            };
            announce(&hcfm_core::pipeline::cmd_train(&options, &out)?, &out)
        }
        Command::Recommend { model, context, top, method, ms, mc, alpha, sigma, out } => {
            let method = match method {
                Method::Hcfm => RecommendMethod::Hcfm(HcfmParams { ms: ms.parse()?, mc, alpha }),
                Method::Copm => RecommendMethod::Copm { sigma },
                _ => {
                    return Err(Error::InvalidParameter(
                        "recommend supports --method hcfm or copm (the baselines need training histories)".into(),
                    ))
                }
            };
            let text = cmd_recommend(&model, &context, top, &method)?;
            match out {
                Some(path) => fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?,
                None => print!("{text}"),
            }
        }
        Command::Evaluate(args) => announce(&cmd_evaluate(&args.options(false)?, &args.out)?, &args.out),
        Command::GridSearch(args) => announce(&cmd_evaluate(&args.options(true)?, &args.out)?, &args.out),
        Command::Replay { manifest, out } => {
            let m = RunManifest::load(&manifest)?;
            announce(&replay(&m, &out)?, &out)
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Training => EXIT_TRAINING,
            })
        }
    }
}
