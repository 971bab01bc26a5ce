//! Command-line driver for the federated proxy fine-tuning simulator.

use clap::{Args, Parser, Subcommand};
use fedpft_core::error::Error;
use fedpft_core::fed::evaluate;
use fedpft_core::harness::{
    build_datasets, build_proxy, build_source_model, check_theory, run_experiment,
    ExperimentConfig,
};
use fedpft_core::rng;
use fedpft_core::tensor::Precision;
use fedpft_core::transformer::{checkpoint, TransformerModel};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fedpft",
    about = "Desk-scale simulator of proxy-based federated fine-tuning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the compressed proxy and save it with its saliency report.
    BuildSub(Common),
    /// Build the proxy and run the pre-fine-tuning alignment.
    Distill(Common),
    /// Run the full federated pipeline for the configured mode.
    Federate(Common),
    /// Evaluate the compute/communication cost expressions.
    ReportCost(Common),
    /// Run the convergence-theory battery (descent testbed + gradient bound).
    CheckTheory {
        /// Experiment configuration (JSON); optional, used for the seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sabotage the bound constant to prove violations are detected.
        #[arg(long)]
        self_test: bool,
    },
    /// Report a checkpoint's accuracy on the configured eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 2; --help/--version exit 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e @ Error::Config { .. }) => {
            eprintln!("{e}");
            2
        }
        Err(e @ Error::TheoryViolation(_)) => {
            eprintln!("{e}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.federation.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::BuildSub(common) => {
            let cfg = load_config(&common)?;
            let precision = Precision::from_env()?;
            let out_dir = PathBuf::from(&cfg.output_dir);
            std::fs::create_dir_all(&out_dir)?;
            let (fm, built) = prepare_model_and_proxy(&cfg, precision)?;
            checkpoint::save_model(&out_dir.join("fm_initial.fpft"), &fm)?;
            checkpoint::save_model(&out_dir.join("subfm_raw.fpft"), &built.subfm)?;
            if let Some(sal) = &built.saliency {
                checkpoint::write_atomic(
                    &out_dir.join("saliency.json"),
                    serde_json::to_string_pretty(sal).map_err(Error::from)?.as_bytes(),
                )?;
            }
            println!("wrote proxy checkpoint to {}", out_dir.display());
            Ok(0)
        }
        Command::Distill(common) => {
            let cfg = load_config(&common)?;
            let precision = Precision::from_env()?;
            let out_dir = PathBuf::from(&cfg.output_dir);
            std::fs::create_dir_all(&out_dir)?;
            let (fm, built) = prepare_model_and_proxy(&cfg, precision)?;
            let (_, _, corpus) = build_datasets(&cfg)?;
            let seed = rng::derive_seed(cfg.seed, "pre-distill", 0, 0);
            let (aligned, losses) = if cfg.federation.mode == fedpft_core::fed::Mode::LayerDrop {
                fedpft_core::distill::pre_fl_distill_mapped(
                    &fm,
                    &built.subfm,
                    &built.layer_map,
                    &corpus.tokens,
                    &cfg.distill,
                    seed,
                    precision,
                )?
            } else {
                fedpft_core::distill::pre_fl_distill(
                    &fm,
                    &built.subfm,
                    &corpus.tokens,
                    &cfg.distill,
                    seed,
                    precision,
                )?
            };
            checkpoint::save_model(&out_dir.join("fm_initial.fpft"), &fm)?;
            checkpoint::save_model(&out_dir.join("subfm_distilled.fpft"), &aligned)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{i},{}\n", fedpft_core::fed::fmt_f64(*l)));
            }
            checkpoint::write_atomic(&out_dir.join("distill_losses.csv"), csv.as_bytes())?;
            println!(
                "distilled proxy over {} steps (loss {:.6} -> {:.6})",
                losses.len(),
                losses.first().copied().unwrap_or(0.0),
                losses.last().copied().unwrap_or(0.0)
            );
            Ok(0)
        }
        Command::Federate(common) => {
            let cfg = load_config(&common)?;
            let output = run_experiment(&cfg)?;
            println!(
                "mode {} seed {}: final model accuracy {:.4} ({} rounds); metrics at {}",
                cfg.federation.mode.as_str(),
                cfg.seed,
                output.run.final_fm_accuracy,
                cfg.federation.rounds,
                output.metrics_path.display()
            );
            Ok(0)
        }
        Command::ReportCost(common) => {
            let cfg = load_config(&common)?;
            let report = cfg.cost_report();
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            println!("{json}");
            let out_dir = PathBuf::from(&cfg.output_dir);
            std::fs::create_dir_all(&out_dir)?;
            checkpoint::write_atomic(&out_dir.join("cost_report.json"), json.as_bytes())?;
            Ok(0)
        }
        Command::CheckTheory {
            config,
            seed,
            out,
            self_test,
        } => {
            let seed = match (&config, seed) {
                (_, Some(s)) => s,
                (Some(path), None) => ExperimentConfig::from_path(path)?.seed,
                (None, None) => 7,
            };
            let report = check_theory(seed, self_test)?;
            let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            println!("{json}");
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                checkpoint::write_atomic(&out.join("theory_report.json"), json.as_bytes())?;
            }
            if !report.passed {
                if self_test {
                    eprintln!("self-test: sabotaged bound correctly detected");
                }
                return Err(Error::TheoryViolation(format!(
                    "{} descent violations, {} bound violations, {} linearized-bound violations",
                    report.decrease_violations, report.bound_violations, report.theorem2.violations
                )));
            }
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
        } => {
            let cfg = load_config(&common)?;
            let precision = Precision::from_env()?;
            let model = checkpoint::load_model(&ckpt, &cfg.model)?;
            let (_, eval, _) = build_datasets(&cfg)?;
            let acc = evaluate(&model, None, &eval.tokens, &eval.labels, precision)?;
            println!("{{\"accuracy\": {acc}}}");
            Ok(0)
        }
    }
}

/// Shared preamble: seeded init, pretraining, head warmup, proxy build.
fn prepare_model_and_proxy(
    cfg: &ExperimentConfig,
    precision: Precision,
) -> Result<(TransformerModel, fedpft_core::harness::BuiltProxy), Error> {
    let (_, _, corpus) = build_datasets(cfg)?;
    let fm = build_source_model(cfg, &corpus, precision)?;
    let built = build_proxy(&fm, cfg)?;
    Ok((fm, built))
}
