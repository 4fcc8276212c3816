use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use malab_core::guidance::GuidanceMode;
use malab_core::workbench::{self, Context, Outcome, Overrides, SweepParam};
use malab_core::Result;

/// Massive-activation analysis and detail guidance on a toy diffusion transformer.
#[derive(Parser)]
#[command(name = "malab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Guidance mode: cond, cfg, dg or cfg+dg.
    #[arg(long)]
    mode: Option<GuidanceMode>,
    /// CFG scale for the selected mode.
    #[arg(long)]
    lambda: Option<f64>,
    /// Detail-guidance scale for the selected mode.
    #[arg(long)]
    w: Option<f64>,
    /// Disrupted block depth, 1-based.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model and write a checkpoint and loss curve.
    Train(Common),
    /// Sample with one guidance mode and write samples, an image grid and metrics.
    Sample(Common),
    /// Layer, alpha, timestep and condition profiles.
    Analyze(Common),
    /// Compare disrupting detected dimensions against random controls.
    Intervene(Common),
    /// Sample metrics over a grid of one guidance knob.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// m, lambda or w.
        #[arg(long)]
        param: SweepParam,
        /// `1..6`, `1,2,4` or a single value.
        #[arg(long)]
        values: String,
    },
    /// Markdown summary of every CSV in the output directory.
    Report(Common),
}

type Driver = Box<dyn Fn(&Context) -> Result<Outcome>>;

fn run(cli: Cli) -> Result<()> {
    let (common, driver): (&Common, Driver) = match &cli.command {
        Command::Train(c) => (c, Box::new(workbench::run_train)),
        Command::Sample(c) => (c, Box::new(workbench::run_sample)),
        Command::Analyze(c) => (c, Box::new(workbench::run_analyze)),
        Command::Intervene(c) => (c, Box::new(workbench::run_intervene)),
        Command::Report(c) => (c, Box::new(workbench::run_report)),
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let values = workbench::parse_values(values)?;
            let param = *param;
            (
                common,
                Box::new(move |ctx| workbench::run_sweep(ctx, param, &values)),
            )
        }
    };
    let config = workbench::load_config(&common.config)?;
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        mode: common.mode,
        lambda: common.lambda,
        w: common.w,
        m: common.m,
    };
    let ctx = Context::new(config, &overrides)?;
    let outcome = driver(&ctx)?;
    for msg in &outcome.messages {
        eprintln!("{msg}");
    }
    for path in outcome.commit(&ctx.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    malab_core::numerics::retain_freed_memory();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("malab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
