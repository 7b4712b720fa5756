//! Command-line pipeline driver.
//!
//! Subcommands mirror the pipeline stages: `train-victim`, `collect-pairs`,
//! `train-cdma`, `attack`, `eval-defenses`, `transfer`, `model-independent`,
//! `report`. Each reads the run configuration (one JSON document), applies
//! any scalar flag overrides, performs its stage, and writes artifacts plus a
//! manifest into the output directory.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cdma::pipeline::{self, RunPaths};
use cdma::runconfig::{example_config, parse_epsilon, Epsilon, RunConfig};
use cdma::schedule::ScheduleKind;

#[derive(Parser)]
#[command(name = "cdma", version, about = "Conditional-diffusion black-box attack pipeline")]
struct Cli {
    /// Run configuration JSON (see `emit-config` for a template).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override every seed with one master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the attack L-inf budget (e.g. `16/255` or `0.05`).
    #[arg(long, global = true)]
    epsilon: Option<String>,

    /// Override the query cap.
    #[arg(long, global = true)]
    qmax: Option<u32>,

    /// Override the attack mode (`untargeted` or `targeted`).
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Override the reverse-chain sampling step count.
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Override the sampling-time schedule (`linear` or `cosine`).
    #[arg(long, global = true)]
    schedule: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shadow and victim classifiers (or one of them).
    TrainVictim {
        /// Model id to train; trains all when omitted.
        #[arg(long)]
        victim: Option<String>,
    },
    /// Collect clean/adversarial pairs from the shadow model.
    CollectPairs,
    /// Train the conditional denoiser on the collected pairs.
    TrainCdma,
    /// Run the black-box attack against one victim.
    Attack {
        /// Victim model id.
        #[arg(long)]
        victim: String,
    },
    /// Evaluate stored AEs against input-transformation defenses.
    EvalDefenses {
        #[arg(long)]
        victim: String,
    },
    /// Evaluate stored AEs against the other models, one query each.
    Transfer {
        /// Source victim whose AEs are transferred.
        #[arg(long)]
        victim: String,
    },
    /// Model- and data-independent protocols on the second dataset.
    ModelIndependent,
    /// Aggregate every outcome file into the report.
    Report,
    /// Print a template run configuration and exit.
    EmitConfig,
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) -> Result<()> {
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds.data = seed;
        cfg.seeds.models = seed.wrapping_add(1);
        cfg.seeds.pairs = seed.wrapping_add(2);
        cfg.seeds.diffusion = seed.wrapping_add(3);
        cfg.seeds.attack = seed.wrapping_add(4);
    }
    if let Some(eps) = &cli.epsilon {
        let v = parse_epsilon(eps).with_context(|| format!("bad --epsilon `{eps}`"))?;
        if !(v > 0.0 && v <= 1.0) {
            bail!("--epsilon {v} out of (0, 1]");
        }
        cfg.attack.epsilon = Epsilon(v);
    }
    if let Some(q) = cli.qmax {
        cfg.attack.q_max = q;
    }
    if let Some(mode) = &cli.mode {
        cfg.attack.mode = mode.clone();
    }
    if let Some(steps) = cli.steps {
        cfg.sampling.steps = steps;
    }
    if let Some(sched) = &cli.schedule {
        cfg.sampling.schedule =
            Some(ScheduleKind::parse(sched).with_context(|| format!("bad --schedule `{sched}`"))?);
    }
    cfg.validate().context("config invalid after overrides")?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();

    if matches!(cli.command, Command::EmitConfig) {
        println!("{}", serde_json::to_string_pretty(&example_config())?);
        return Ok(());
    }

    let config_path = cli
        .config
        .as_ref()
        .context("--config is required (use `emit-config` for a template)")?;
    let mut cfg = RunConfig::load(config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    apply_overrides(&mut cfg, &cli)?;
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(paths.dir())?;

    match &cli.command {
        Command::EmitConfig => unreachable!("handled above"),
        Command::TrainVictim { victim } => {
            let results = pipeline::cmd_train_victim(&cfg, &paths, victim.as_deref())?;
            for (id, acc) in results {
                println!("trained {id}: holdout accuracy {:.2}%", acc * 100.0);
            }
        }
        Command::CollectPairs => {
            let kept = pipeline::cmd_collect_pairs(&cfg, &paths)?;
            println!(
                "collected {kept} clean/adversarial pairs (epsilon {})",
                cfg.pairs.epsilon.0
            );
        }
        Command::TrainCdma => {
            let trace = pipeline::cmd_train_denoiser(&cfg, &paths)?;
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!(
                    "denoiser trained: loss {:.4} -> {:.4} over {} steps",
                    first.1, last.1, cfg.train.steps
                );
            }
        }
        Command::Attack { victim } => {
            let result = pipeline::cmd_attack(&cfg, &paths, victim)?;
            let m = &result.metrics;
            println!(
                "attack on {victim}: ASR {:.2}% ({}/{}), Avg.Q {}, Med.Q {}",
                m.asr,
                m.successes,
                m.attempts,
                m.format_avg(),
                m.format_median()
            );
            println!("outcomes: {}", result.csv_path.display());
        }
        Command::EvalDefenses { victim } => {
            let rows = pipeline::cmd_eval_defenses(&cfg, &paths, victim)?;
            for r in rows {
                println!(
                    "{:<12} clean acc {:6.2}%  robust ASR {:6.2}%  ({} AEs)",
                    r.defense,
                    r.clean_accuracy * 100.0,
                    r.robust_asr,
                    r.kept_aes
                );
            }
        }
        Command::Transfer { victim } => {
            let rows = pipeline::cmd_transfer(&cfg, &paths, victim)?;
            for (target, asr, fooled, total) in rows {
                println!("{victim} -> {target}: {asr:.2}% ({fooled}/{total})");
            }
        }
        Command::ModelIndependent => {
            let result = pipeline::cmd_model_independent(&cfg, &paths)?;
            for v in &result.model_independent {
                println!(
                    "model-independent vs {}: ASR {:.2}% ({}/{})",
                    v.victim_id, v.asr, v.successes, v.attempts
                );
            }
            for (id, m) in &result.data_independent {
                println!(
                    "data-independent vs {id}: ASR {:.2}% ({}/{}), Avg.Q {}, Med.Q {}",
                    m.asr,
                    m.successes,
                    m.attempts,
                    m.format_avg(),
                    m.format_median()
                );
            }
        }
        Command::Report => {
            let text = pipeline::cmd_report(&cfg, &paths)?;
            println!("{text}");
        }
    }
    Ok(())
}
