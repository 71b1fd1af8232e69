//! Thin operator CLI over the library: `train`, `replay`, `eval`, `sample`.
//! The runnable examples are the richer tour; this binary is the entry point
//! for long runs and artifact inspection.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use easel::config::{Ablation, RunConfig};
use easel::env::EpisodeTrajectory;
use easel::eval::evaluate;
use easel::train::Trainer;
use std::ops::ControlFlow;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "easel", about = "Adversarial stroke-painting agents", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a training loop and write its artifacts.
    Train {
        /// Configuration file (TOML). Mutually exclusive with --preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Built-in configuration: smoke, toy-discs, toy-glyphs, toy-long.
        #[arg(long)]
        preset: Option<String>,
        /// Component flips applied on top of the config, repeatable.
        #[arg(long, value_enum)]
        ablation: Vec<Ablation>,
        /// Resume from a checkpoint (continues its embedded config).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override total learner steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Force fully deterministic single-threaded execution.
        #[arg(long)]
        single_thread: bool,
    },
    /// Re-render a trajectory log into annotated frames and a filmstrip.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction metrics for a conditional checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 9000)]
        seed: u64,
    },
    /// Sample a grid of final canvases from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4242)]
        seed: u64,
    },
}

fn preset(name: &str) -> Result<RunConfig> {
    Ok(match name {
        "smoke" => RunConfig::smoke(),
        "toy-discs" => RunConfig::toy_discs(),
        "toy-glyphs" => RunConfig::toy_glyphs(),
        "toy-long" => RunConfig::toy_long_episodes(),
        other => bail!("unknown preset `{other}` (expected smoke | toy-discs | toy-glyphs | toy-long)"),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, preset: preset_name, ablation, resume, seed, out, steps, single_thread } => {
            let mut trainer = if let Some(ckpt) = resume {
                Trainer::resume(&ckpt).with_context(|| format!("resume from {}", ckpt.display()))?
            } else {
                let mut cfg = match (config, preset_name) {
                    (Some(path), None) => RunConfig::load(&path)
                        .with_context(|| format!("load config {}", path.display()))?,
                    (None, Some(name)) => preset(&name)?,
                    (None, None) => RunConfig::default(),
                    (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
                };
                for a in &ablation {
                    a.apply(&mut cfg);
                }
                if let Some(s) = seed {
                    cfg.run.seed = s;
                }
                if let Some(o) = out {
                    cfg.run.out_dir = o;
                }
                if let Some(n) = steps {
                    cfg.run.total_learner_steps = n;
                }
                if single_thread {
                    cfg.run.single_thread = true;
                }
                cfg.validate()?;
                Trainer::new(cfg)?
            };
            eprintln!(
                "training: {} members, {} steps, out {}",
                trainer.population.len(),
                trainer.cfg.run.total_learner_steps,
                trainer.dirs().root.display()
            );
            let log_every = trainer.cfg.run.log_every.max(1);
            trainer.run(&mut |t, metrics| {
                if metrics.step % log_every == 0 {
                    let m0 = &metrics.members[0];
                    eprintln!(
                        "step {:>6}  reward {:+.4}  l2 {}  entropy {:.3}{}",
                        metrics.step,
                        m0.mean_final_score,
                        m0.mean_l2.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into()),
                        m0.learner.entropy,
                        metrics
                            .disc
                            .as_ref()
                            .map(|d| format!("  disc acc {:.2}/{:.2}", d.real_acc, d.fake_acc))
                            .unwrap_or_default(),
                    );
                }
                let _ = t;
                ControlFlow::Continue(())
            })?;
            eprintln!("done; artifacts in {}", trainer.dirs().root.display());
            Ok(())
        }
        Command::Replay { log, out } => {
            let traj = EpisodeTrajectory::read_log(&log)
                .with_context(|| format!("parse {}", log.display()))?;
            // Replay must reproduce the logged canvases bit-exactly.
            let replayed = traj.replay_canvases()?;
            anyhow::ensure!(replayed == traj.canvases, "replay diverged from the logged canvases");
            let frames = easel::replay::write_filmstrip(&traj, &out)?;
            eprintln!("wrote {} frames + filmstrip to {}", frames.len(), out.display());
            Ok(())
        }
        Command::Eval { checkpoint, episodes, out, seed } => {
            let trainer = Trainer::resume(&checkpoint)
                .with_context(|| format!("load {}", checkpoint.display()))?;
            if !trainer.cfg.env.conditional {
                bail!("eval requires a conditional checkpoint (this one is unconditional)");
            }
            let report = evaluate(&trainer, trainer.best_member(), episodes, seed)?;
            report.write_csv(&out)?;
            eprintln!(
                "episodes {}  mean final L2 {:.6}  blank L2 {:.6}  hue match {:.1}%",
                episodes,
                report.mean_final_l2(),
                report.mean_blank_l2(),
                100.0 * report.hue_match_rate()
            );
            Ok(())
        }
        Command::Sample { checkpoint, count, out, seed } => {
            let trainer = Trainer::resume(&checkpoint)
                .with_context(|| format!("load {}", checkpoint.display()))?;
            let canvases = trainer.sample_canvases(trainer.best_member(), count, seed)?;
            let grid = easel::png_io::tile_grid(&canvases, (count as f64).sqrt().ceil() as usize);
            easel::png_io::write_png(&out, &grid)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}
