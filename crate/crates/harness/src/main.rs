use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use sacclf_harness::config::{preset_name, EnvName, ModeName, ReplayConfig, StudyKind};
use sacclf_harness::run::default_jobs;
use sacclf_harness::{
    ablate, export_plot_data, output_root, preset, run_arm, ExperimentConfig, PolicyCache, RunMode, PRESETS,
};

#[derive(Parser)]
#[command(name = "sacclf", version, about = "Safe SAC behind a CLF-QP filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Overrides {
    /// Episodes per seed.
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory (default: $SACCLF_OUTPUT_ROOT or ./runs, plus the run name).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds run concurrently (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Overrides {
    fn jobs(&self) -> usize {
        self.jobs.unwrap_or_else(default_jobs)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration on every seed.
    Train {
        /// TOML experiment file.
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Replay a saved policy through the filter without learning.
    Evaluate {
        config: PathBuf,
        /// policy.json written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the policy mean instead of sampling.
        #[arg(long)]
        deterministic: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every arm of a study preset and report the paired comparison.
    Ablate {
        #[arg(long)]
        study: StudyKind,
        #[arg(long)]
        env: EnvName,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Aggregate per-seed learning curves under a run directory into plot.csv files.
    ExportPlots { dir: PathBuf },
    /// List the preset studies, or print one study's arms as TOML.
    Presets { name: Option<String> },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
}

fn resolve_dir(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> PathBuf {
    if let Some(o) = out {
        return o.clone();
    }
    let root = output_root();
    match &cfg.output_dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => root.join(d),
        None => root.join(&cfg.name),
    }
}

fn run_single(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<bool> {
    overrides.apply(&mut cfg);
    let dir = resolve_dir(&cfg, &overrides.out);
    let run = run_arm(&cfg, Some(&dir), &mut PolicyCache::default(), overrides.jobs())?;
    let s = &run.summary;
    for seed in &s.seeds {
        println!(
            "seed {:>4}  mean cost {:.5}  violations {}  TV {:.3}  k_eta {:.4}",
            seed.seed, seed.mean_cost, seed.eps_violations, seed.mean_total_variation, seed.final_k_eta
        );
    }
    for f in &s.failures {
        eprintln!("seed {} failed: {}", f.seed, f.error);
    }
    println!(
        "mean cost {:.5} ± {:.5} over {} seed(s); artifacts in {}",
        s.mean_cost,
        s.std_cost,
        s.seeds.len(),
        dir.display()
    );
    Ok(s.succeeded())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, overrides } => {
            let mut cfg = load(&config)?;
            cfg.mode = RunMode::Train;
            run_single(cfg, &overrides)
        }
        Command::Evaluate {
            config,
            checkpoint,
            deterministic,
            overrides,
        } => {
            let mut cfg = load(&config)?;
            cfg.mode = RunMode::Replay;
            cfg.replay = ReplayConfig {
                checkpoint: Some(checkpoint),
                action_mode: if deterministic {
                    ModeName::Deterministic
                } else {
                    ModeName::Stochastic
                },
                ..cfg.replay
            };
            run_single(cfg, &overrides)
        }
        Command::Ablate { study, env, overrides } => {
            let mut study = preset(&preset_name(study, env))?;
            for arm in &mut study.arms {
                overrides.apply(arm);
            }
            let dir = overrides.out.clone().unwrap_or_else(|| output_root().join(&study.name));
            std::fs::create_dir_all(&dir)?;
            let report = ablate(&study, Some(&dir), overrides.jobs())?;
            for a in &report.arms {
                println!(
                    "{:<16} cost {:.5} ± {:.5}  violations {}  TV {:.3}  k_eta {:.4}",
                    a.name, a.mean_cost, a.std_cost, a.total_eps_violations, a.mean_total_variation, a.mean_final_k_eta
                );
            }
            for c in &report.comparisons {
                println!("{}", c.verdict);
            }
            for n in &report.notes {
                println!("note: {n}");
            }
            println!("report: {}", dir.join("report.json").display());
            Ok(report.succeeded())
        }
        Command::ExportPlots { dir } => {
            let written = export_plot_data(&dir)?;
            if written.is_empty() {
                anyhow::bail!("no seed_*/curve.csv found under {}", dir.display());
            }
            for p in written {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Presets { name: None } => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(true)
        }
        Command::Presets { name: Some(name) } => {
            for arm in preset(&name)?.arms {
                println!("# arm: {}\n{}", arm.name, arm.to_toml());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
