//! `igstf` — incident-guided traffic forecasting pipeline.
//!
//! One stage per process: `gen`, `build`, `train`, `eval`, `ablate`,
//! `gradcheck`. Every command takes `--config <path>`; `IGSTF_OUTPUT_DIR`
//! in the environment overrides the configured output directory. Exit
//! codes: 0 success, 1 usage error, 2 input/IO error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use igstf_core::config::RunConfig;
use igstf_core::pipeline;
use igstf_core::CoreError;

#[derive(Parser)]
#[command(
    name = "igstf",
    version,
    about = "Incident-guided spatio-temporal traffic forecasting",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration, a JSON document.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Worker threads for batch work; 1 is sequential and bit-reproducible,
    /// 0 uses every core.
    #[arg(long, default_value_t = 1, value_name = "N")]
    threads: usize,

    /// Overrides both the generator seed and the training seed.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corridor dataset into <output_dir>/raw.
    Gen(Common),
    /// Assemble processed artifacts (graph, vocabulary, statistics) from raw files.
    Build(Common),
    /// Train one model variant and write its artifact directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Variant to train (full, no_icsf, no_tiid, no_s, no_d, no_i).
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Evaluate a trained variant on the test split; writes metrics and a horizon plot.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Variant whose artifact directory to evaluate.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Train and evaluate every configured ablation variant on identical data.
    Ablate(Common),
    /// Verify recorded gradients against central finite differences.
    Gradcheck(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen(c) | Command::Build(c) | Command::Ablate(c) | Command::Gradcheck(c) => c,
            Command::Train { common, .. } | Command::Eval { common, .. } => common,
        }
    }
}

/// Loads the config and applies the command-line overrides.
fn load_config(common: &Common) -> Result<RunConfig, CoreError> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.train.threads = common.threads;
    if let Some(seed) = common.seed {
        cfg.data.synth.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CoreError> {
    let cfg = load_config(cli.command.common())?;
    match cli.command {
        Command::Gen(_) => {
            let s = pipeline::run_gen(&cfg)?;
            println!(
                "gen: {} sensors, {} incidents, {} windows -> {}",
                s.sensors,
                s.incidents,
                s.windows,
                s.dir.display()
            );
        }
        Command::Build(_) => {
            let r = pipeline::run_build(&cfg)?;
            println!(
                "build: {} nodes, {} edges, {} incidents, {} instances \
                 (train {} / val {} / test {})",
                r.nodes,
                r.edges,
                r.incidents,
                r.instances,
                r.train_instances,
                r.val_instances,
                r.test_instances
            );
        }
        Command::Train { ref variant, .. } => {
            let r = pipeline::run_train(&cfg, variant)?;
            let mae = r
                .test_mae
                .map_or_else(|| "n/a".to_string(), |m| format!("{m:.6}"));
            println!(
                "train[{}]: {} epochs (best {}), val loss {:.6}, test MAE {}{}",
                r.variant,
                r.epochs,
                r.best_epoch,
                r.best_val_loss,
                mae,
                if r.stopped_early { ", stopped early" } else { "" }
            );
        }
        Command::Eval { ref variant, .. } => {
            let s = pipeline::run_eval(&cfg, variant)?;
            println!(
                "eval[{}]: {} test windows ({} incident-affected) -> {}",
                s.variant,
                s.test_windows,
                s.incident_windows,
                s.dir.display()
            );
        }
        Command::Ablate(_) => {
            let out = pipeline::run_ablate(&cfg)?;
            for r in &out.reports {
                let mae = r
                    .test_mae
                    .map_or_else(|| "n/a".to_string(), |m| format!("{m:.6}"));
                println!(
                    "ablate[{}]: best val loss {:.6}, test MAE {}",
                    r.variant, r.best_val_loss, mae
                );
            }
            println!(
                "ablate: {} variants, {} metric rows -> {}",
                out.reports.len(),
                out.rows.len(),
                cfg.ablation_dir().display()
            );
        }
        Command::Gradcheck(ref common) => {
            let summary = pipeline::run_gradcheck(common.seed.unwrap_or(0))?;
            for fam in &summary.families {
                println!(
                    "gradcheck[{}]: {} tensors, {} elements, max rel err {:.3e} ({}) {}",
                    fam.name,
                    fam.parameters,
                    fam.elements,
                    fam.max_rel_err,
                    fam.worst_param,
                    if fam.passed { "ok" } else { "FAILED" }
                );
            }
            if !summary.passed() {
                return Err(CoreError::numeric(format!(
                    "gradient check failed at tolerance {:e}",
                    summary.tol
                )));
            }
            println!("gradcheck: all families under tolerance {:e}", summary.tol);
        }
    }
    Ok(())
}

fn exit_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                // clap exits with 2 on bad arguments; the documented
                // contract reserves 2 for input errors and 1 for usage.
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
