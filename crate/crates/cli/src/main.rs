use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dislab_cli::{cmd_all, cmd_audit, cmd_compare, cmd_synth, cmd_train, CliError, Experiment, RawConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Synth,
    Train,
    Audit,
    Compare,
    All,
}

/// Synthetic fundus shortcut experiments: generate, train, audit, compare.
#[derive(Parser, Debug)]
#[command(name = "dislab", version)]
#[command(after_help = "Examples:
  dislab synth   --config configs/experiment.cfg --out runs/data
  dislab train   --config configs/train_baseline.cfg --in runs/data --out runs/baseline
  dislab audit   --in runs/baseline --out runs/audit_baseline
  dislab compare --in runs/audit_baseline --in runs/audit_disentangled --out runs/compare
  dislab all     --config configs/experiment.cfg --out runs/all

TOOL_THREADS caps worker threads. Exit codes: 0 ok, 1 validation error, 2 runtime failure.")]
struct Args {
    command: Command,
    /// Experiment file of `section.key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input: dataset dir (train), predictions file or dir (audit), two audit dirs (compare).
    #[arg(long = "in")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue training from a saved checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn experiment(args: &Args, required: bool) -> Result<Experiment, CliError> {
    match &args.config {
        Some(p) => Experiment::load(p, args.seed),
        None if required => Err(CliError::Usage("--config is required".into())),
        None => Experiment::resolve(&RawConfig::default(), args.seed),
    }
}

fn inputs(args: &Args, n: usize) -> Result<&[PathBuf], CliError> {
    if args.inputs.len() == n {
        Ok(&args.inputs)
    } else {
        Err(CliError::Usage(format!(
            "expected {n} --in path(s), got {}",
            args.inputs.len()
        )))
    }
}

fn run(args: &Args) -> Result<dislab_cli::Outcome, CliError> {
    if args.resume.is_some() && !matches!(args.command, Command::Train) {
        return Err(CliError::Usage("--resume only applies to train".into()));
    }
    let cfg = args.config.as_deref();
    match args.command {
        Command::Synth => cmd_synth(&experiment(args, true)?, cfg, &args.out),
        Command::Train => {
            let exp = experiment(args, true)?;
            cmd_train(&exp, cfg, &inputs(args, 1)?[0], &args.out, args.resume.as_deref())
        }
        Command::Audit => {
            let exp = experiment(args, false)?;
            cmd_audit(&exp, cfg, &inputs(args, 1)?[0], &args.out)
        }
        Command::Compare => {
            let i = inputs(args, 2)?;
            cmd_compare(&i[0], &i[1], &args.out)
        }
        Command::All => cmd_all(&experiment(args, true)?, cfg, &args.out),
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("TOOL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("TOOL_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| run(&args));
    match result {
        Ok(o) => {
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(s) = &o.summary {
                println!("{s}");
            }
            println!("wrote {}", args.out.join(dislab_cli::manifest::MANIFEST).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
