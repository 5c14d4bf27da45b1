use std::path::PathBuf;
use std::process::ExitCode;

use affectmtl::experiment::{
    load_config, run_eval, run_generate, run_gradcheck, run_infer, run_train, run_zero_shot, EvalConfig,
    ExperimentConfig, GradcheckSettings, InferConfig, SynthConfig, ZeroShotConfig,
};
use affectmtl::losses::Task;
use affectmtl::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "affectmtl", version, about = "Multi-task affect models from partially annotated data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Va,
    Expr,
    Au,
}

impl From<EvalTask> for Task {
    fn from(t: EvalTask) -> Task {
        match t {
            EvalTask::Va => Task::Va,
            EvalTask::Expr => Task::Expr,
            EvalTask::Au => Task::Au,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic VA / expression / AU training sets and a test set.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Infer an empirical relatedness table from expression+AU annotations.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on an annotation CSV.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Restrict to these tasks (comma separated).
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<EvalTask>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score compound expressions from the basic-task outputs.
    ZeroShot {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing --{flag}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { config, seed, out } => {
            let mut c: SynthConfig = config.as_deref().map(load_config).transpose()?.unwrap_or_default();
            c.seed = seed.unwrap_or(c.seed);
            c.out = out.or(c.out);
            run_generate(&c)?;
            eprintln!("wrote synthetic sets to {}", c.out.unwrap().display());
        }
        Command::Infer {
            config,
            corpus,
            threshold,
            out,
        } => {
            let mut c = match config {
                Some(p) => load_config(&p)?,
                None => InferConfig {
                    corpus: required(corpus.clone(), "corpus")?,
                    threshold: affectmtl::relatedness::DEFAULT_EMPIRICAL_THRESHOLD,
                    out: None,
                },
            };
            c.corpus = corpus.unwrap_or(c.corpus);
            c.threshold = threshold.unwrap_or(c.threshold);
            c.out = out.or(c.out);
            run_infer(&c)?;
        }
        Command::Train { config, seed, out } => {
            let mut c = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                c.train.seed = s;
            }
            c.out = out.or(c.out);
            let run = run_train(&c)?;
            if let Some(m) = run.heldout.as_ref().and_then(|h| h.expr.as_ref()) {
                eprintln!("held-out expression accuracy {:.4}", m.accuracy);
            }
            eprintln!("run written to {}", run.out.display());
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            tasks,
            out,
        } => {
            let mut c = match config {
                Some(p) => load_config(&p)?,
                None => EvalConfig {
                    checkpoint: required(checkpoint.clone(), "checkpoint")?,
                    data: required(data.clone(), "data")?,
                    tasks: None,
                    out: None,
                },
            };
            c.checkpoint = checkpoint.unwrap_or(c.checkpoint);
            c.data = data.unwrap_or(c.data);
            if !tasks.is_empty() {
                c.tasks = Some(tasks.into_iter().map(Task::from).collect());
            }
            c.out = out.or(c.out);
            let report = run_eval(&c)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ZeroShot {
            config,
            checkpoint,
            data,
            profiles,
            out,
        } => {
            let mut c = match config {
                Some(p) => load_config(&p)?,
                None => ZeroShotConfig {
                    checkpoint: required(checkpoint.clone(), "checkpoint")?,
                    data: required(data.clone(), "data")?,
                    profiles: None,
                    out: None,
                },
            };
            c.checkpoint = checkpoint.unwrap_or(c.checkpoint);
            c.data = data.unwrap_or(c.data);
            c.profiles = profiles.or(c.profiles);
            c.out = out.or(c.out);
            let r = run_zero_shot(&c)?;
            if let Some(m) = r.metrics {
                eprintln!("compound accuracy {:.4}", m.accuracy);
            }
        }
        Command::Gradcheck { config, seed, out } => {
            let mut c: GradcheckSettings = config.as_deref().map(load_config).transpose()?.unwrap_or_default();
            c.seed = seed.unwrap_or(c.seed);
            c.out = out.or(c.out);
            let report = run_gradcheck(&c)?;
            for m in &report.modes {
                let worst = m.components.values().copied().fold(0.0, f64::max);
                println!("{:<20} max rel error {worst:.3e}", m.mode.name());
            }
            report.ensure_passed()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
