use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcm_selfrepair::harness::{self, ExperimentConfig};
use pcm_selfrepair::Result;

#[derive(Parser)]
#[command(
    name = "selfrepair",
    version,
    about = "Quantize, program and self-repair a simulated PCM network"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML; defaults are used for anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact of the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set repair.probe_period=600`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the float network (and the noise-aware baseline when needed).
    Train,
    /// Anneal the dual-set scheme and decompose the trained weights.
    Quantize,
    /// Program crossbar tiles at t=0 and dump them.
    Program,
    /// Run the drift timeline for every configured variant.
    Run,
    /// Summarize a timeline log into CSV, gnuplot and text files.
    Report,
    /// Finite-difference check of the training gradients.
    Gradcheck,
    /// Print the file format reference.
    Formats,
}

fn run(cli: Cli) -> Result<()> {
    if let Cmd::Formats = cli.cmd {
        print!("{}", harness::FORMATS);
        return Ok(());
    }
    let c = cli.common;
    let cfg = ExperimentConfig::load(c.config.as_deref(), &c.set, c.seed, c.out)?;
    match cli.cmd {
        Cmd::Train => {
            let r = harness::cmd_train(&cfg)?;
            println!(
                "float accuracy {:.4} macro-F1 {:.4}",
                r.float.accuracy, r.float.macro_f1
            );
            if let Some(na) = r.noise_aware {
                println!("noise-aware accuracy {:.4} macro-F1 {:.4}", na.accuracy, na.macro_f1);
            }
            println!("weights below epsilon_small: {:.1}%", 100.0 * r.small_weight_fraction);
        }
        Cmd::Quantize => {
            let r = harness::cmd_quantize(&cfg)?;
            println!(
                "mse {:.3e} (start {:.3e}, uniform grid {:.3e}), {} combined levels",
                r.mse, r.initial_mse, r.uniform_grid_mse, r.sq_size
            );
            println!(
                "accuracy float {:.4} quantized {:.4}",
                r.float_accuracy, r.quantized_accuracy
            );
        }
        Cmd::Program => {
            let r = harness::cmd_program(&cfg)?;
            println!(
                "programmed {} quantized pairs, {} float pairs",
                r.quantized_cells, r.float_cells
            );
        }
        Cmd::Run => {
            let log = harness::cmd_run(&cfg)?;
            for s in &log.summaries {
                println!(
                    "{:18} initial {:.4} final {:.4} var {:.3e}",
                    s.variant.name(),
                    s.initial_accuracy,
                    s.final_accuracy,
                    s.accuracy_variance
                );
            }
            println!("{} repair events", log.events.len());
        }
        Cmd::Report => {
            let r = harness::cmd_report(&cfg)?;
            print!("{}", r.text);
        }
        Cmd::Gradcheck => {
            let g = harness::cmd_gradcheck(&cfg)?;
            println!(
                "{} parameters, max relative error {:.3e}, max absolute error {:.3e}",
                g.parameters, g.max_rel_error, g.max_abs_error
            );
            if g.max_rel_error.is_nan() || g.max_rel_error >= 1e-4 {
                return Err(pcm_selfrepair::Error::OutOfRange(format!(
                    "gradient check relative error {:.3e} is not below 1e-4",
                    g.max_rel_error
                )));
            }
        }
        Cmd::Formats => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
