use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use razor_cli::commands;
use razor_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "razor", version, about = "Selective unlearning on a toy two-tower encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch on the synthetic pairs.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Edit a pretrained checkpoint to forget the configured classes.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint at full precision, 8 and 4 bits.
    QuantEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pre-edit checkpoint for the drift and stability metrics.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run the six loss and update-strategy ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One unlearning run per initial step size.
    SweepLr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated initial step sizes.
        #[arg(long, value_delimiter = ',', default_values_t = commands::DEFAULT_SWEEP.to_vec())]
        lambdas: Vec<f64>,
    },
}

fn load(common: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    let out = commands::output_dir(&cfg, common.out.as_deref());
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let (cfg, out) = load(&common)?;
            let r = commands::cmd_pretrain(&cfg, &out)?;
            println!("pretrained: M1={:.4} M4={:.4} -> {}", r.train.m1, r.train.m4, out.join(commands::PRETRAINED_FILE).display());
        }
        Command::Unlearn { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let r = commands::cmd_unlearn(&cfg, &checkpoint, &out)?;
            let flag = if r.trace.target_met { "target-met" } else { "target-not-met" };
            println!(
                "{flag}: M1 {:.4} -> {:.4}, M4 {:.4} -> {:.4}, M5 {:.4} -> {}",
                r.before.m1,
                r.after.m1,
                r.before.m4,
                r.after.m4,
                r.after.m5,
                out.join(commands::EDITED_FILE).display()
            );
        }
        Command::QuantEval { common, checkpoint, reference } => {
            let (cfg, out) = load(&common)?;
            let q = commands::cmd_quant_eval(&cfg, &checkpoint, reference.as_deref(), &out)?;
            println!("precision  M1      M4      M5      M1_drift");
            for r in &q.rows {
                println!("{:<10} {:.4}  {:.4}  {:.4}  {:.4}", r.precision.as_str(), r.m1, r.m4, r.m5, r.m1_drift);
            }
        }
        Command::Ablate { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let a = commands::cmd_ablate(&cfg, &checkpoint, &out)?;
            println!("{:<18} {:.4}  {:.4}  {:.4}", "pre-edit", a.pre.m1, a.pre.m4, a.pre.m5);
            for r in &a.rows {
                println!("{:<18} {:.4}  {:.4}  {:.4}", r.scenario, r.m1, r.m4, r.m5);
            }
        }
        Command::SweepLr { common, checkpoint, lambdas } => {
            let (cfg, out) = load(&common)?;
            for r in commands::cmd_sweep_lr(&cfg, &checkpoint, &lambdas, &out)? {
                println!("lambda_init={:<8} M1={:.4} M4={:.4} M5={:.4}", r.lambda_init, r.m1, r.m4, r.m5);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &CliError) -> u8 {
    e.exit_code() as u8
}
