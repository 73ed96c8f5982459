//! Executes configured arms and studies and writes their artifacts.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sacclf_core::FilterConfig;
use sacclf_sac::train::{decile_costs, write_curve_csv};
use sacclf_sac::{
    evaluate, train, ActionMode, ActionSource, EpisodeRecord, GaussianPolicy, LoopSpec, PolicyCheckpoint, TrainOptions,
};

use crate::config::{Claim, ExperimentConfig, RunMode, Study};

/// Environment variable overriding the default `./runs` output root.
pub const OUTPUT_ROOT_VAR: &str = "SACCLF_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub episodes: usize,
    pub mean_cost: f64,
    /// Mean of `cost + effort_weight · ∫‖u‖²dt`.
    pub mean_effort_cost: f64,
    pub first_decile_cost: Option<f64>,
    pub last_decile_cost: Option<f64>,
    pub eps_violations: usize,
    pub mean_total_variation: f64,
    pub final_k_eta: f64,
    pub terminated_episodes: usize,
}

impl SeedSummary {
    pub fn from_curve(seed: u64, curve: &[EpisodeRecord], effort_weight: f64) -> Self {
        let n = curve.len().max(1) as f64;
        let deciles = decile_costs(curve, 0.1);
        Self {
            seed,
            episodes: curve.len(),
            mean_cost: curve.iter().map(|r| r.cost).sum::<f64>() / n,
            mean_effort_cost: curve.iter().map(|r| r.cost + effort_weight * r.effort).sum::<f64>() / n,
            first_decile_cost: deciles.map(|d| d.0),
            last_decile_cost: deciles.map(|d| d.1),
            eps_violations: curve.iter().map(|r| r.eps_violations).sum(),
            mean_total_variation: curve.iter().map(|r| r.total_variation).sum::<f64>() / n,
            final_k_eta: curve.last().map_or(0.0, |r| r.final_k_eta),
            terminated_episodes: curve.iter().filter(|r| r.terminated).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// Aggregate over seeds; spreads are population standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub fingerprint: String,
    pub mode: RunMode,
    pub filter: FilterConfig,
    pub seeds: Vec<SeedSummary>,
    pub failures: Vec<SeedFailure>,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub mean_effort_cost: f64,
    pub std_effort_cost: f64,
    pub total_eps_violations: usize,
    pub mean_total_variation: f64,
    pub std_total_variation: f64,
    pub mean_final_k_eta: f64,
    pub std_final_k_eta: f64,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Curves and policies of one arm, kept in memory for callers that need more
/// than the summary.
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub summary: RunSummary,
    pub curves: Vec<(u64, Vec<EpisodeRecord>)>,
    pub policies: Vec<(u64, GaussianPolicy)>,
}

/// Shares pretrained replay policies between arms of one study.
#[derive(Debug, Default)]
pub struct PolicyCache {
    policies: HashMap<String, GaussianPolicy>,
}

fn loop_spec(cfg: &ExperimentConfig) -> Result<LoopSpec> {
    let clf = cfg.build_clf().context("CLF synthesis failed")?;
    Ok(LoopSpec::new(cfg.environment(), clf, cfg.filter.clone())
        .with_disturbance(cfg.disturbance.as_ref().map(|d| d.spec())))
}

/// Policy replayed by `RunMode::Replay`: loaded from disk, or trained on the
/// nominal plant behind a β = 0 filter so every arm replays the same actor.
pub fn replay_policy(cfg: &ExperimentConfig, cache: &mut PolicyCache) -> Result<GaussianPolicy> {
    let env = cfg.environment();
    if let Some(path) = &cfg.replay.checkpoint {
        let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let policy = PolicyCheckpoint::from_json(&text)?.to_policy()?;
        if policy.obs_dim() != env.state_dim() || policy.action_dim() != env.input_dim() {
            bail!(
                "checkpoint {} maps {} → {} but {} needs {} → {}",
                path.display(),
                policy.obs_dim(),
                policy.action_dim(),
                env.name(),
                env.state_dim(),
                env.input_dim()
            );
        }
        return Ok(policy);
    }
    let mut base = cfg.clone();
    base.filter.beta = 0.0;
    base.disturbance = None;
    base.mode = RunMode::Train;
    base.name = "pretrain".into();
    base.output_dir = None;
    base.seeds = vec![cfg.replay.pretrain_seed];
    base.episodes = cfg.replay.pretrain_episodes;
    let key = base.fingerprint();
    if let Some(p) = cache.policies.get(&key) {
        return Ok(p.clone());
    }
    let opts = TrainOptions {
        k_eta_memory: base.k_eta_memory(),
        ..TrainOptions::new(base.episodes, cfg.replay.pretrain_seed)
    };
    let outcome = train(&loop_spec(&base)?, &base.sac, &opts)?;
    let policy = outcome.agent.policy;
    cache.policies.insert(key, policy.clone());
    Ok(policy)
}

struct SeedArtifacts {
    curve: Vec<EpisodeRecord>,
    trajectory: Option<sacclf_core::Trajectory>,
    policy: Option<GaussianPolicy>,
}

fn run_seed(
    cfg: &ExperimentConfig,
    spec: &LoopSpec,
    replay: Option<&GaussianPolicy>,
    seed: u64,
) -> Result<SeedArtifacts> {
    match replay {
        None => {
            let opts = TrainOptions {
                k_eta_memory: cfg.k_eta_memory(),
                ..TrainOptions::new(cfg.episodes, seed)
            };
            let out = train(spec, &cfg.sac, &opts)?;
            let policy = out.agent.policy;
            // One greedy episode after training; its initial state is the
            // next draw of the seed's environment stream.
            let source = ActionSource::Policy(&policy, ActionMode::Deterministic);
            let mut ev = evaluate(spec, &source, 1, seed, cfg.k_eta_memory())?;
            Ok(SeedArtifacts {
                curve: out.curve,
                trajectory: ev.trajectories.pop(),
                policy: Some(policy),
            })
        }
        Some(policy) => {
            let source = ActionSource::Policy(policy, cfg.replay.action_mode.into());
            let mut ev = evaluate(spec, &source, cfg.episodes, seed, cfg.k_eta_memory())?;
            Ok(SeedArtifacts {
                curve: ev.records,
                trajectory: ev.trajectories.pop(),
                policy: None,
            })
        }
    }
}

fn write_seed(dir: &Path, cfg: &ExperimentConfig, art: &SeedArtifacts) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_curve_csv(&art.curve, BufWriter::new(fs::File::create(dir.join("curve.csv"))?))?;
    if let Some(traj) = &art.trajectory {
        traj.write_csv(BufWriter::new(fs::File::create(dir.join("trajectory.csv"))?))?;
    }
    if let Some(policy) = &art.policy {
        fs::write(
            dir.join("policy.json"),
            PolicyCheckpoint::from_policy(policy, cfg.fingerprint()).to_json()?,
        )?;
    }
    Ok(())
}

/// Worker count for seed-parallel runs.
pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs every seed of one arm on up to `jobs` worker threads. A failing seed
/// is recorded and the remaining seeds still run. With `dir` set, artifacts
/// go to `dir/seed_<s>/` and the summary to `dir/summary.json`.
pub fn run_arm(cfg: &ExperimentConfig, dir: Option<&Path>, cache: &mut PolicyCache, jobs: usize) -> Result<ArmRun> {
    cfg.validate()?;
    let spec = loop_spec(cfg)?;
    let replay = match cfg.mode {
        RunMode::Train => None,
        RunMode::Replay => Some(replay_policy(cfg, cache)?),
    };
    if let Some(dir) = dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
    }
    let one = |seed: u64| {
        run_seed(cfg, &spec, replay.as_ref(), seed).and_then(|art| {
            if let Some(dir) = dir {
                write_seed(&dir.join(format!("seed_{seed}")), cfg, &art)?;
            }
            Ok(art)
        })
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedArtifacts>>>> = Mutex::new((0..cfg.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cfg.seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let r = one(seed);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    let mut curves = Vec::new();
    let mut policies = Vec::new();
    for (&seed, result) in cfg.seeds.iter().zip(results.into_inner().expect("worker panicked")) {
        match result.expect("every seed is claimed") {
            Ok(art) => {
                seeds.push(SeedSummary::from_curve(seed, &art.curve, cfg.sac.effort_weight));
                curves.push((seed, art.curve));
                if let Some(p) = art.policy {
                    policies.push((seed, p));
                }
            }
            Err(e) => failures.push(SeedFailure {
                seed,
                error: format!("{e:#}"),
            }),
        }
    }
    let col = |f: fn(&SeedSummary) -> f64| mean_std(&seeds.iter().map(f).collect::<Vec<_>>());
    let (mean_cost, std_cost) = col(|s| s.mean_cost);
    let (mean_effort, std_effort) = col(|s| s.mean_effort_cost);
    let (mean_tv, std_tv) = col(|s| s.mean_total_variation);
    let (mean_k, std_k) = col(|s| s.final_k_eta);
    let summary = RunSummary {
        name: cfg.name.clone(),
        fingerprint: cfg.fingerprint(),
        mode: cfg.mode,
        filter: cfg.filter.clone(),
        total_eps_violations: seeds.iter().map(|s| s.eps_violations).sum(),
        seeds,
        failures,
        mean_cost,
        std_cost,
        mean_effort_cost: mean_effort,
        std_effort_cost: std_effort,
        mean_total_variation: mean_tv,
        std_total_variation: std_tv,
        mean_final_k_eta: mean_k,
        std_final_k_eta: std_k,
    };
    if let Some(dir) = dir {
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(ArmRun {
        summary,
        curves,
        policies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDifference {
    pub seed: u64,
    /// Variant minus baseline.
    pub mean_cost: f64,
    pub eps_violations: i64,
    pub mean_total_variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub baseline: String,
    pub variant: String,
    pub claim: Claim,
    pub per_seed: Vec<SeedDifference>,
    /// Variant minus baseline of the arm aggregates.
    pub mean_cost: f64,
    pub cost_std: f64,
    pub eps_violations: i64,
    pub mean_total_variation: f64,
    pub claim_holds: bool,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub arms: Vec<RunSummary>,
    pub comparisons: Vec<PairedComparison>,
    pub notes: Vec<String>,
}

impl StudyReport {
    pub fn succeeded(&self) -> bool {
        self.arms.iter().all(RunSummary::succeeded)
    }
}

pub fn paired_comparison(base: &RunSummary, var: &RunSummary, claim: Claim) -> PairedComparison {
    let per_seed = var
        .seeds
        .iter()
        .filter_map(|v| {
            let b = base.seeds.iter().find(|b| b.seed == v.seed)?;
            Some(SeedDifference {
                seed: v.seed,
                mean_cost: v.mean_cost - b.mean_cost,
                eps_violations: v.eps_violations as i64 - b.eps_violations as i64,
                mean_total_variation: v.mean_total_variation - b.mean_total_variation,
            })
        })
        .collect();
    let claim_holds = match claim {
        Claim::LowerCost => var.mean_cost < base.mean_cost,
        Claim::LowerCostAndStd => var.mean_cost < base.mean_cost && var.std_cost < base.std_cost,
        Claim::LowerTotalVariation => var.mean_total_variation < base.mean_total_variation,
        Claim::Indistinguishable => (var.mean_cost - base.mean_cost).abs() <= var.std_cost + base.std_cost,
    };
    let what = match claim {
        Claim::LowerCost => "lower mean cost",
        Claim::LowerCostAndStd => "lower mean cost and smaller cost std",
        Claim::LowerTotalVariation => "lower control total variation",
        Claim::Indistinguishable => "overlapping mean ± std cost",
    };
    let verdict = format!(
        "{} vs {}: {what} {} (cost {:.5} ± {:.5} vs {:.5} ± {:.5}; TV {:.4} vs {:.4}; violations {} vs {})",
        var.name,
        base.name,
        if claim_holds { "holds" } else { "does not hold" },
        var.mean_cost,
        var.std_cost,
        base.mean_cost,
        base.std_cost,
        var.mean_total_variation,
        base.mean_total_variation,
        var.total_eps_violations,
        base.total_eps_violations,
    );
    PairedComparison {
        baseline: base.name.clone(),
        variant: var.name.clone(),
        claim,
        per_seed,
        mean_cost: var.mean_cost - base.mean_cost,
        cost_std: var.std_cost - base.std_cost,
        eps_violations: var.total_eps_violations as i64 - base.total_eps_violations as i64,
        mean_total_variation: var.mean_total_variation - base.mean_total_variation,
        claim_holds,
        verdict,
    }
}

/// Runs every arm of a study under `dir/<arm>/` and writes `dir/report.json`.
pub fn ablate(study: &Study, dir: Option<&Path>, jobs: usize) -> Result<StudyReport> {
    let mut cache = PolicyCache::default();
    let mut arms = Vec::new();
    for arm in &study.arms {
        let arm_dir = dir.map(|d| d.join(&arm.name));
        arms.push(run_arm(arm, arm_dir.as_deref(), &mut cache, jobs)?.summary);
    }
    let find = |name: &str| {
        arms.iter()
            .find(|a| a.name == name)
            .with_context(|| format!("no arm named {name}"))
    };
    let comparisons = study
        .comparisons
        .iter()
        .map(|c| Ok(paired_comparison(find(&c.baseline)?, find(&c.variant)?, c.claim)))
        .collect::<Result<Vec<_>>>()?;
    let mut notes = study.notes.clone();
    for a in &arms {
        if !a.failures.is_empty() {
            notes.push(format!("{}: {} seed(s) failed", a.name, a.failures.len()));
        }
    }
    let report = StudyReport {
        study: study.name.clone(),
        arms,
        comparisons,
        notes,
    };
    if let Some(dir) = dir {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Per-episode `(mean, population std)` across curves; episodes beyond the
/// shortest curve are dropped.
pub fn aggregate_curves(curves: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|k| mean_std(&curves.iter().map(|c| c[k]).collect::<Vec<_>>()))
        .collect()
}

pub fn read_curve_costs(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let col = header
        .split(',')
        .position(|h| h == "cost")
        .with_context(|| format!("{} has no cost column", path.display()))?;
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse::<f64>().ok())
                .with_context(|| format!("malformed row `{l}` in {}", path.display()))
        })
        .collect()
}

/// For every directory below `root` holding `seed_*/curve.csv`, writes
/// `plot.csv` as `episode,mean_cost,std_cost`. Returns the files written.
pub fn export_plot_data(root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut curves = Vec::new();
        let mut entries: Vec<_> = fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let path = entry.path();
            let curve = path.join("curve.csv");
            if entry.file_name().to_string_lossy().starts_with("seed_") && curve.is_file() {
                curves.push(read_curve_costs(&curve)?);
            } else {
                stack.push(path);
            }
        }
        if curves.is_empty() {
            continue;
        }
        let mut out = String::from("episode,mean_cost,std_cost\n");
        for (k, (m, s)) in aggregate_curves(&curves).into_iter().enumerate() {
            out.push_str(&format!("{k},{m},{s}\n"));
        }
        let path = dir.join("plot.csv");
        fs::write(&path, out)?;
        written.push(path);
    }
    written.sort();
    Ok(written)
}
