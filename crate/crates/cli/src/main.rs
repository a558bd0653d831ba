use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use posttrain_core::harness::{self, DecontamArgs, EvalTarget, Experiment, ExperimentConfig};
use posttrain_core::tasks::Split;
use posttrain_core::Error;

/// Post-training lab: SFT specialists, pass@k probing, checkpoint fusion, GRPO/MGPO.
#[derive(Parser, Debug)]
#[command(name = "posttrain", version)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,

    /// Skip stages whose artifacts already exist for the same config.
    #[arg(long, global = true)]
    resume: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the task universe and train the per-subdomain SFT checkpoint series.
    SftTrain,
    /// Score every SFT checkpoint's pass@k on its subdomain's probing set.
    Probe,
    /// Select each subdomain's best checkpoint and fuse them.
    Merge,
    /// Run the configured GRPO/MGPO stages from the fused checkpoint.
    RlTrain,
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Write CSV curves and a markdown summary of the run.
    Report,
    /// Drop training lines that share an n-gram with evaluation text.
    Decontam(DecontamCli),
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// init, warm-start, fused, final, or a checkpoint path.
    #[arg(long, default_value = "final")]
    checkpoint: String,
    /// train, probe or holdout.
    #[arg(long, default_value = "holdout")]
    split: String,
    /// Samples per problem (overrides the config).
    #[arg(long)]
    n: Option<usize>,
    /// k of pass@k (overrides the config).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct DecontamCli {
    /// Training corpus, one record per line.
    #[arg(long)]
    train: PathBuf,
    /// Evaluation text, one record per line. Repeatable.
    #[arg(long = "eval", required = true)]
    eval: Vec<PathBuf>,
    /// Where the surviving training lines are written.
    #[arg(long)]
    output: PathBuf,
    /// JSON report with counts and the matched window of every removed line.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = posttrain_core::decontam::DEFAULT_GRAM_LEN)]
    gram_len: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InputDomain(_) | Error::Locked(_)) => 2,
        Some(Error::MissingDependency { .. } | Error::MissingSnapshot(_)) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn open(cli: &Cli, tweak: impl FnOnce(&mut ExperimentConfig)) -> anyhow::Result<Experiment> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    tweak(&mut config);
    Ok(Experiment::open(config, cli.seed, &cli.out, cli.resume)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::SftTrain => {
            let mut exp = open(&cli, |_| {})?;
            let out = harness::cmd_sft_train(&mut exp)?;
            println!("wrote {} checkpoints under {}", out.checkpoints.len(), exp.path("sft").display());
        }
        Command::Probe => {
            let mut exp = open(&cli, |_| {})?;
            for r in harness::cmd_probe(&mut exp)? {
                println!("{:<10} step {:>6}  pass@1 {:.4}  pass@{} {:.4}", r.name, r.step, r.pass1, r.k, r.passk);
            }
        }
        Command::Merge => {
            let mut exp = open(&cli, |_| {})?;
            let m = harness::cmd_merge(&mut exp)?;
            for s in &m.specialists {
                println!("{:<10} step {:>6}  pass@k {:.4}  weight {:.4}", s.name, s.step, s.passk, s.weight);
            }
            println!("fused -> {}", exp.path(&m.fused).display());
        }
        Command::RlTrain => {
            let mut exp = open(&cli, |_| {})?;
            let out = harness::cmd_rl_train(&mut exp)?;
            for m in &out.monitor {
                println!("step {:>5}  pass@1 {:.4}  pass@k {:.4}", m.global_step, m.pass1, m.passk);
            }
            println!("final -> {}", exp.path(&out.final_checkpoint).display());
        }
        Command::Eval(a) => {
            let split: Split = a.split.parse()?;
            let target: EvalTarget = a.checkpoint.parse()?;
            let mut exp = open(&cli, |c| {
                if let Some(n) = a.n {
                    c.eval.n = n;
                }
                if let Some(k) = a.k {
                    c.eval.k = k;
                }
            })?;
            print!("{}", harness::cmd_eval(&mut exp, &target, split)?.render());
        }
        Command::Report => {
            let mut exp = open(&cli, |_| {})?;
            let r = harness::cmd_report(&mut exp)?;
            println!("{}", exp.path(&r.summary).display());
        }
        Command::Decontam(a) => {
            let r = harness::cmd_decontam(&DecontamArgs {
                train: &a.train,
                eval: &a.eval,
                output: &a.output,
                report: a.report.as_deref(),
                gram_len: a.gram_len,
            })
            .with_context(|| format!("decontaminating {}", a.train.display()))?;
            println!(
                "kept {} of {} records, removed {} ({} tokens in {:.3}s)",
                r.kept, r.train_records, r.removed, r.tokens, r.seconds
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
