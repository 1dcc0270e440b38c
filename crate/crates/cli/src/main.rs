use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ilflow_core::pipeline::StageOutput;
use ilflow_core::{load_config, DatasetKind, Run, RunConfig, RunSelection};

/// Imitation learning from observations with noise-conditioned flows.
#[derive(Debug, Parser)]
#[command(name = "ilflow", version, about)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "PATH")]
    output_dir: Option<PathBuf>,

    /// Run directory name under the output directory. Defaults to a new
    /// timestamp for `train-expert` and to the latest run otherwise.
    #[arg(long, global = true)]
    run_id: Option<String>,

    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a SAC expert on the ground-truth reward.
    TrainExpert,
    /// Roll out and store a dataset.
    Collect {
        /// expert, noisy_expert or random.
        #[arg(long, value_parser = parse_kind)]
        kind: DatasetKind,
        /// Number of trajectories (defaults from the dataset section).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit the conditional flow to the expert transitions.
    TrainFlow,
    /// Train the imitation agent on the frozen flow reward.
    TrainIl,
    /// Ground-truth evaluation of the trained agents.
    Eval,
    /// Rank held-out, noisy and random trajectories by flow log-probability.
    Calibrate,
    /// Run the exact and Monte-Carlo consistency checks.
    Verify,
    /// Draw next-state samples from the flow.
    SampleFlow {
        /// Conditioning state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        state: Vec<f64>,
        /// Noise level.
        #[arg(long, default_value_t = 0.0)]
        h: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
}

fn parse_kind(s: &str) -> Result<DatasetKind, String> {
    DatasetKind::parse(s).map_err(|e| e.to_string())
}

fn resolve_config(cli: &Cli) -> ilflow_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(quiet: bool, run_id: &str, out: &StageOutput) {
    if !quiet {
        println!("{} [{}] {} ({:.1} s)", out.stage, run_id, out.summary, out.wall_time_s);
    }
}

/// Runs the chosen stage; `Ok(false)` means the stage finished but its
/// checks failed.
fn execute(cli: &Cli) -> ilflow_core::Result<bool> {
    let cfg = resolve_config(cli)?;
    let selection = match cli.command {
        Command::TrainExpert => RunSelection::New,
        _ => RunSelection::Latest,
    };
    let mut run = Run::open(cfg, cli.run_id.clone(), selection)?;
    let q = cli.quiet;
    let id = run.run_id().to_string();
    match &cli.command {
        Command::TrainExpert => report(q, &id, &run.train_expert()?),
        Command::Collect { kind, n } => report(q, &id, &run.collect(*kind, *n)?),
        Command::TrainFlow => report(q, &id, &run.train_flow()?),
        Command::TrainIl => report(q, &id, &run.train_il()?),
        Command::Eval => {
            let (out, eval) = run.eval()?;
            report(q, &id, &out);
            if !q {
                println!("{}", serde_json::to_string_pretty(&eval)?);
            }
        }
        Command::Calibrate => {
            let (out, summary) = run.calibrate()?;
            report(q, &id, &out);
            if !q {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            }
        }
        Command::Verify => {
            let (out, verify) = run.verify()?;
            report(q, &id, &out);
            for check in verify.checks.iter().filter(|c| !q || !c.passed) {
                let status = if check.passed { "ok" } else { "FAILED" };
                println!("  {status:6} {}: {}", check.name, check.detail);
            }
            return Ok(verify.passed);
        }
        Command::SampleFlow { state, h, n } => report(q, &id, &run.sample_flow(state, *h, *n)?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: verification failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
