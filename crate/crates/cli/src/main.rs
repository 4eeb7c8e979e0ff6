use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mdr_core::experiment::{
    self, presets, ExperimentConfig, RunManifest, SplitName, TrainingState,
};

/// Train and evaluate metric-learning models with multi-level distance regularization.
#[derive(Parser)]
#[command(name = "mdr", version)]
struct Cli {
    /// Where runs are written (overrides MDR_OUTPUT_ROOT).
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config (TOML) or re-run a manifest (JSON).
    Train { config: PathBuf },
    /// Evaluate a checkpoint on its train or test split.
    Evaluate {
        checkpoint: PathBuf,
        split: SplitName,
        /// Comma-separated recall cut-offs, e.g. 1,2,4,8.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Run every *.toml config in a directory and write a comparison report.
    Matrix { config_dir: PathBuf },
    /// Print levels, running distance statistics and embedding norms.
    Inspect { checkpoint: PathBuf },
    /// Write the built-in comparison configs into a directory.
    Presets {
        dir: PathBuf,
        /// Which set: comparison, levels, lambda or losses.
        #[arg(long, default_value = "comparison")]
        set: String,
        /// Training steps for every generated config.
        #[arg(long)]
        steps: Option<u64>,
    },
}

fn load_run_config(path: &Path) -> Result<ExperimentConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        Ok(RunManifest::load(path)?.config)
    } else {
        Ok(ExperimentConfig::load(path)?)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.output_root.unwrap_or_else(experiment::output_root);

    match cli.command {
        Command::Train { config } => {
            let config = load_run_config(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let manifest = experiment::train(&config, &root)?;
            println!(
                "run {} ({} seeds) -> {}",
                config.run.name,
                manifest.runs.len(),
                manifest.output_dir.display()
            );
            for (name, m) in &manifest.summary {
                println!("  {name:<22} {m}");
            }
        }
        Command::Evaluate {
            checkpoint,
            split,
            ks,
        } => {
            let state = TrainingState::load(&checkpoint)?;
            let report = experiment::evaluate(&state, split, ks.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Matrix { config_dir } => {
            let configs = experiment::load_config_dir(&config_dir)?;
            let report = experiment::run_matrix(&configs, &root)?;
            print!("{}", report.to_summary());
            let failed: usize = report.rows.iter().map(|r| r.failures.len()).sum();
            if failed > 0 {
                bail!(
                    "{failed} run(s) failed; see {}",
                    root.join("summary.txt").display()
                );
            }
        }
        Command::Inspect { checkpoint } => {
            let state = TrainingState::load(&checkpoint)?;
            let info = experiment::inspect(&state)?;
            println!("seed {} step {}", info.seed, info.step);
            println!("levels      {:?}", info.levels);
            println!("mu*         {}", info.mu_star);
            println!("sigma*      {}", info.sigma_star);
            println!("gamma       {}", info.gamma);
            for (label, n) in [
                ("train norms", info.train_norms),
                ("test norms", info.test_norms),
            ] {
                println!("{label} mean {:.6} std {:.6} cv {:.6}", n.mean, n.std, n.cv);
            }
            for (name, shape) in &info.parameters {
                println!("param {name} {shape:?}");
            }
        }
        Command::Presets { dir, set, steps } => {
            let base = ExperimentConfig::default();
            let mut configs = match set.as_str() {
                "comparison" => presets::mdr_comparison(&base),
                "levels" => presets::level_sweep(&base),
                "lambda" => presets::lambda_sweep(&base),
                "losses" => presets::loss_sweep(&base),
                other => bail!("unknown preset set '{other}'"),
            };
            std::fs::create_dir_all(&dir)?;
            for c in &mut configs {
                if let Some(steps) = steps {
                    c.optimizer.steps = steps;
                }
                let path = dir.join(format!("{}.toml", c.run.name));
                std::fs::write(&path, c.to_toml_string())?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}
