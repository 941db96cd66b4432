use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hoil_core::model::Mode;
use hoil_core::pipeline::{
    evaluate, fit_ctrefine, load_ctrefine, load_model, predict, refine_predictions, run_training, simulate,
    write_report, Dataset, ReportPaths, RunConfig, TrainOptions,
};
use hoil_core::tensor::checkpoint;
use hoil_core::temporal::RefineMethod;
use hoil_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Interaction-aware human pose estimation from LiDAR: simulate labelled
/// scans, train, evaluate and refine.
#[derive(Parser, Debug)]
#[command(name = "hoil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic sequence.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain on labelled sequences.
    Pretrain(TrainArgs),
    /// Finetune a checkpoint on new sequences.
    Finetune(TrainArgs),
    /// Run the phase named by the config's `mode`.
    Train(TrainArgs),
    /// Score a checkpoint on a sequence.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Smooth the predicted trajectories, then score them.
    Refine {
        #[arg(long, value_enum)]
        method: CliMethod,
        /// Trained CTRefine weights; trained on the fly when omitted.
        #[arg(long)]
        ctrefine: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Train the contact-aware temporal refiner on synthetic gait.
    TrainCtrefine {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sequence directory; repeat to mix several sources.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Checkpoint to start from (required for finetune).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output checkpoint, rewritten every checkpoint epoch.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Replace the keypoint queries when the keypoint count changes.
    #[arg(long)]
    reinit_queries: bool,
    /// Continue from `--out` if it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report CSV; the per-joint table is written next to it.
    #[arg(long)]
    report: PathBuf,
    /// Directory for SVG plots.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Overrides the config stored with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliMethod {
    None,
    Gaussian,
    Sg,
    Oneeuro,
    Ctrefine,
}

impl From<CliMethod> for RefineMethod {
    fn from(m: CliMethod) -> Self {
        match m {
            CliMethod::None => RefineMethod::None,
            CliMethod::Gaussian => RefineMethod::Gaussian,
            CliMethod::Sg => RefineMethod::SavitzkyGolay,
            CliMethod::Oneeuro => RefineMethod::OneEuro,
            CliMethod::Ctrefine => RefineMethod::Ctrefine,
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Core(Error::Numerical(_) | Error::NonFinite(_)) => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Malformed or invalid configs are usage errors; an unreadable file is a
/// data error.
fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Json(_) => CliError::Usage(format!("config {}: {e}", p.display())),
            e => CliError::Core(e),
        })?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_seed_override(std::env::var(hoil_core::pipeline::SEED_ENV).ok().as_deref())?;
            cfg
        }
    })
}

fn train(args: &TrainArgs, mode: Option<Mode>) -> CliResult<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mode = mode.unwrap_or(cfg.mode);
    let dirs = if args.data.is_empty() { cfg.paths.data.clone() } else { args.data.clone() };
    if dirs.is_empty() {
        return Err(CliError::Usage("no data: pass --data or set paths.data".into()));
    }
    let init = args.ckpt.clone().or_else(|| cfg.paths.checkpoint.clone());
    if mode == Mode::Finetune && init.is_none() && !(args.resume && args.out.exists()) {
        return Err(CliError::Usage("finetune needs --ckpt".into()));
    }
    let data = dirs.iter().map(Dataset::load).collect::<Result<Vec<_>, _>>()?;
    let opts = TrainOptions {
        out: args.out.clone(),
        loss_log: args.loss_log.clone(),
        init,
        reinit_queries: args.reinit_queries,
        resume: args.resume,
    };
    let summary = run_training(&cfg, mode, &data, &opts)?;
    match summary.log.last() {
        Some(l) => println!("step {} loss {}; checkpoint {}", summary.steps, l.total, args.out.display()),
        None => println!("already at step {}; checkpoint {}", summary.steps, args.out.display()),
    }
    Ok(())
}

fn eval(args: &EvalArgs, method: Option<(CliMethod, Option<&Path>)>) -> CliResult<()> {
    let cfg = args.config.as_deref().map(|p| load_config(Some(p))).transpose()?;
    let m = load_model(&args.ckpt, cfg.as_ref())?;
    let data = Dataset::load(&args.data)?;
    let mut pred = predict(&m.model, &m.store, m.mode, &data)?;
    if let Some((method, ct_path)) = method {
        let method = RefineMethod::from(method);
        let ct = match (method, ct_path) {
            (RefineMethod::Ctrefine, Some(p)) => Some(load_ctrefine(p, &m.cfg)?),
            (RefineMethod::Ctrefine, None) => {
                log::info!("training CTRefine for {} steps", m.cfg.refine.train.steps);
                let (model, store, _) = fit_ctrefine(&m.cfg)?;
                Some((model, store))
            }
            _ => None,
        };
        pred = refine_predictions(method, &pred, &data, &m.cfg, ct.as_ref().map(|(c, s)| (c, s)))?;
    }
    let report = evaluate(&pred, &data)?;
    write_report(&report, &pred, &data, &ReportPaths::new(&args.report, args.plots.as_deref()))?;
    println!(
        "mpjpe {:.2} mm, pck3 {:.2}, pck5 {:.2} over {} frames",
        report.mpjpe_mm, report.pck3, report.pck5, report.n_frames
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, frames, out } => {
            if frames == 0 {
                return Err(CliError::Usage("--frames must be > 0".into()));
            }
            let cfg = load_config(config.as_deref())?;
            let data = simulate(&cfg, frames)?;
            data.save(&out)?;
            println!("wrote {frames} frames to {}", out.display());
            Ok(())
        }
        Command::Pretrain(a) => train(&a, Some(Mode::Pretrain)),
        Command::Finetune(a) => train(&a, Some(Mode::Finetune)),
        Command::Train(a) => train(&a, None),
        Command::Eval { eval: e } => eval(&e, None),
        Command::Refine { method, ctrefine, eval: e } => eval(&e, Some((method, ctrefine.as_deref()))),
        Command::TrainCtrefine { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let (_, store, losses) = fit_ctrefine(&cfg)?;
            checkpoint::save(&out, &store.named_values())?;
            println!(
                "trained {} steps, final loss {}; wrote {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
