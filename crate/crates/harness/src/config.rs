//! Declarative experiment configuration and the study presets.

use std::path::PathBuf;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sacclf_core::{lqr_clf, DisturbanceSpec, Environment, FilterConfig, QuadraticClf};
use sacclf_sac::{ActionMode, KEtaMemory, SacParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error("unknown preset `{0}`; available: {1}")]
    UnknownPreset(String, String),
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvName {
    Nct,
    Satellite,
}

impl EnvName {
    pub fn build(self) -> Environment {
        match self {
            EnvName::Nct => Environment::nct(),
            EnvName::Satellite => Environment::satellite(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Nct => "nct",
            EnvName::Satellite => "satellite",
        }
    }
}

impl std::str::FromStr for EnvName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nct" => Ok(EnvName::Nct),
            "satellite" => Ok(EnvName::Satellite),
            other => Err(format!("unknown environment `{other}` (expected nct or satellite)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClfSource {
    #[default]
    #[serde(alias = "lqr-synthesized")]
    Lqr,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Train a fresh agent per seed.
    #[default]
    Train,
    /// Replay one frozen policy through the filter for every seed.
    Replay,
}

/// Unmodeled dynamics added to the simulated plant only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbanceConfig {
    Additive { value: Vec<f64> },
    DriftScaling { rho: f64 },
    InputBias { bias: Vec<f64> },
}

impl DisturbanceConfig {
    pub fn spec(&self) -> DisturbanceSpec {
        match self {
            DisturbanceConfig::Additive { value } => {
                DisturbanceSpec::AdditiveConstant(DVector::from_column_slice(value))
            }
            DisturbanceConfig::DriftScaling { rho } => DisturbanceSpec::DriftScaling(*rho),
            DisturbanceConfig::InputBias { bias } => DisturbanceSpec::InputBias(DVector::from_column_slice(bias)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    #[default]
    Stochastic,
    Deterministic,
}

impl From<ModeName> for ActionMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Stochastic => ActionMode::Stochastic,
            ModeName::Deterministic => ActionMode::Deterministic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    /// Policy checkpoint to replay; pretrained on the nominal plant if absent.
    pub checkpoint: Option<PathBuf>,
    pub pretrain_episodes: usize,
    pub pretrain_seed: u64,
    pub action_mode: ModeName,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            pretrain_episodes: 30,
            pretrain_seed: 1000,
            action_mode: ModeName::Stochastic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvName,
    #[serde(default)]
    pub clf: ClfSource,
    #[serde(default)]
    pub mode: RunMode,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Carry k_η across episodes of a seed.
    #[serde(default = "yes")]
    pub persistent_k_eta: bool,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub disturbance: Option<DisturbanceConfig>,
    #[serde(default)]
    pub sac: SacParams,
    #[serde(default)]
    pub replay: ReplayConfig,
    /// Relative to the output root unless absolute.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(field("name", "must be a non-empty path-free label"));
        }
        if self.seeds.is_empty() {
            return Err(field("seeds", "at least one seed is required"));
        }
        self.filter.validate().map_err(|e| field("filter", e.to_string()))?;
        self.sac.validate().map_err(|e| field("sac", e.to_string()))?;
        let env = self.env.build();
        let m = env.input_dim();
        match &self.disturbance {
            Some(DisturbanceConfig::Additive { value }) if value.len() != env.state_dim() => {
                return Err(field(
                    "disturbance.value",
                    format!("needs {} components for {}", env.state_dim(), self.env.as_str()),
                ));
            }
            Some(DisturbanceConfig::InputBias { bias }) if bias.len() != m => {
                return Err(field(
                    "disturbance.bias",
                    format!("needs {m} components for {}", self.env.as_str()),
                ));
            }
            Some(DisturbanceConfig::DriftScaling { rho }) if !rho.is_finite() => {
                return Err(field("disturbance.rho", "must be finite"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn environment(&self) -> Environment {
        self.env.build()
    }

    pub fn build_clf(&self) -> Result<QuadraticClf, sacclf_core::ClfError> {
        let env = self.environment();
        match self.clf {
            ClfSource::Lqr => lqr_clf(&env, self.filter.eta0),
            ClfSource::Identity => Ok(QuadraticClf::identity(env.error_dim(), self.filter.eta0)),
        }
    }

    pub fn k_eta_memory(&self) -> KEtaMemory {
        if self.persistent_k_eta {
            KEtaMemory::Persistent
        } else {
            KEtaMemory::PerEpisode
        }
    }

    /// FNV-1a over the canonical TOML, stamped into checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Directional claim checked for a baseline → variant pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Claim {
    LowerCost,
    LowerCostAndStd,
    LowerTotalVariation,
    /// Mean ± std intervals overlap.
    Indistinguishable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: String,
    pub variant: String,
    pub claim: Claim,
}

/// Named arms sharing one seed list, plus the comparisons to report.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub name: String,
    pub arms: Vec<ExperimentConfig>,
    pub comparisons: Vec<Comparison>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Clf,
    Adaptive,
    Smoothing,
}

impl std::str::FromStr for StudyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clf" => Ok(StudyKind::Clf),
            "adaptive" => Ok(StudyKind::Adaptive),
            "smoothing" => Ok(StudyKind::Smoothing),
            other => Err(format!("unknown study `{other}` (expected clf, adaptive or smoothing)")),
        }
    }
}

/// Preset name for a study on an environment.
pub fn preset_name(kind: StudyKind, env: EnvName) -> String {
    let study = match kind {
        StudyKind::Clf => "clf-compare",
        StudyKind::Adaptive => "adaptive",
        StudyKind::Smoothing => "smoothing",
    };
    format!("{}-{study}", env.as_str())
}

fn compare(baseline: &str, variant: &str, claim: Claim) -> Comparison {
    Comparison {
        baseline: baseline.into(),
        variant: variant.into(),
        claim,
    }
}

pub const PRESETS: &[&str] = &[
    "nct-clf-compare",
    "satellite-clf-compare",
    "nct-adaptive",
    "satellite-adaptive",
    "nct-smoothing",
    "satellite-smoothing",
];

/// Default training episodes per environment.
pub fn default_episodes(env: EnvName) -> usize {
    match env {
        EnvName::Nct => 100,
        EnvName::Satellite => 200,
    }
}

fn filter_setting(eta0: f64, omega_eta: f64, k_eps: f64, beta: f64) -> FilterConfig {
    FilterConfig {
        eta0,
        omega_eta,
        k_eps,
        beta,
        ..FilterConfig::default()
    }
}

fn arm(name: &str, env: EnvName, clf: ClfSource, mode: RunMode, filter: FilterConfig) -> ExperimentConfig {
    ExperimentConfig {
        name: name.to_string(),
        env,
        clf,
        mode,
        episodes: default_episodes(env),
        seeds: vec![0, 1, 2, 3, 4],
        persistent_k_eta: true,
        filter,
        disturbance: None,
        sac: SacParams::default(),
        replay: ReplayConfig::default(),
        output_dir: None,
    }
}

/// Model bias used by the adaptive study.
pub fn model_bias(env: EnvName) -> DisturbanceConfig {
    match env {
        EnvName::Nct => DisturbanceConfig::DriftScaling { rho: 0.1 },
        EnvName::Satellite => DisturbanceConfig::InputBias { bias: vec![0.02; 3] },
    }
}

pub fn preset(name: &str) -> Result<Study, ConfigError> {
    use ClfSource::*;
    use EnvName::*;
    let env = if name.starts_with("nct-") { Nct } else { Satellite };
    let (arms, comparisons, notes) = match name {
        "nct-clf-compare" | "satellite-clf-compare" => {
            let row = filter_setting(0.1, 0.0, 1e8, 0.0);
            let claim = if env == Nct {
                Claim::Indistinguishable
            } else {
                Claim::LowerCost
            };
            (
                vec![
                    arm("lqr", env, Lqr, RunMode::Train, row.clone()),
                    arm("identity", env, Identity, RunMode::Train, row),
                ],
                vec![compare("identity", "lqr", claim)],
                vec![],
            )
        }
        "nct-adaptive" | "satellite-adaptive" => {
            let (strict, slight) = if env == Nct { (0.1, 0.01) } else { (0.3, 0.03) };
            let arms = [
                ("strict-constant", strict, 0.0),
                ("strict-adaptive", strict, 0.01),
                ("slight-constant", slight, 0.0),
                ("slight-adaptive", slight, 0.01),
            ]
            .into_iter()
            .map(|(label, eta0, omega)| {
                let mut a = arm(label, env, Lqr, RunMode::Train, filter_setting(eta0, omega, 1e8, 0.0));
                a.disturbance = Some(model_bias(env));
                a
            })
            .collect();
            let mut notes = vec!["arms follow ω_η semantics: ω_η > 0 is adaptive, ω_η = 0 is constant".to_string()];
            if env == Satellite {
                notes.push(
                    "satellite labels follow ω_η even where hyperparameter listings for this plant \
                     name the adaptive and constant settings the other way round"
                        .into(),
                );
            }
            (
                arms,
                vec![
                    compare("strict-constant", "strict-adaptive", Claim::LowerCostAndStd),
                    compare("slight-constant", "slight-adaptive", Claim::LowerCostAndStd),
                ],
                notes,
            )
        }
        "nct-smoothing" | "satellite-smoothing" => (
            vec![
                arm(
                    "no-dampening",
                    env,
                    Lqr,
                    RunMode::Replay,
                    filter_setting(0.1, 0.0, 1e8, 0.0),
                ),
                arm(
                    "dampening",
                    env,
                    Lqr,
                    RunMode::Replay,
                    filter_setting(0.1, 0.0, 1e8, 1.0),
                ),
            ],
            vec![compare("no-dampening", "dampening", Claim::LowerTotalVariation)],
            vec![
                "β > 0 is dampening-on, even where hyperparameter listings name the two β values the other way round"
                    .into(),
            ],
        ),
        other => return Err(ConfigError::UnknownPreset(other.to_string(), PRESETS.join(", "))),
    };
    Ok(Study {
        name: name.to_string(),
        arms,
        comparisons,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(study: &Study) -> Vec<(f64, f64, f64, f64)> {
        study
            .arms
            .iter()
            .map(|a| (a.filter.eta0, a.filter.omega_eta, a.filter.k_eps, a.filter.beta))
            .collect()
    }

    #[test]
    fn clf_presets_use_reference_filter_settings() {
        for name in ["nct-clf-compare", "satellite-clf-compare"] {
            let s = preset(name).unwrap();
            assert_eq!(rows(&s), vec![(0.1, 0.0, 1e8, 0.0); 2]);
            assert_eq!(s.arms[0].clf, ClfSource::Lqr);
            assert_eq!(s.arms[1].clf, ClfSource::Identity);
            assert!(s.arms.iter().all(|a| a.seeds.len() == 5 && a.disturbance.is_none()));
        }
    }

    #[test]
    fn adaptive_presets_cross_strictness_with_adaptation() {
        let nct = preset("nct-adaptive").unwrap();
        assert_eq!(
            rows(&nct),
            vec![
                (0.1, 0.0, 1e8, 0.0),
                (0.1, 0.01, 1e8, 0.0),
                (0.01, 0.0, 1e8, 0.0),
                (0.01, 0.01, 1e8, 0.0)
            ]
        );
        assert!(nct
            .arms
            .iter()
            .all(|a| a.disturbance == Some(DisturbanceConfig::DriftScaling { rho: 0.1 })));
        let sat = preset("satellite-adaptive").unwrap();
        assert_eq!(
            rows(&sat),
            vec![
                (0.3, 0.0, 1e8, 0.0),
                (0.3, 0.01, 1e8, 0.0),
                (0.03, 0.0, 1e8, 0.0),
                (0.03, 0.01, 1e8, 0.0)
            ]
        );
        assert_eq!(sat.arms[0].episodes, 200);
    }

    #[test]
    fn smoothing_presets_toggle_only_beta() {
        for name in ["nct-smoothing", "satellite-smoothing"] {
            let s = preset(name).unwrap();
            assert_eq!(rows(&s), vec![(0.1, 0.0, 1e8, 0.0), (0.1, 0.0, 1e8, 1.0)]);
            assert!(s.arms.iter().all(|a| a.mode == RunMode::Replay));
            assert_eq!(s.arms[0].seeds, s.arms[1].seeds);
        }
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = preset("nct-adaptive").unwrap().arms[1].clone();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let bad = format!("{text}\nbogus = 1\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad_filter = text.replace("[filter]", "[filter]\nbeta_typo = 2.0");
        assert!(ExperimentConfig::from_toml(&bad_filter).is_err());
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            name = "quick"
            env = "satellite"
            clf = "identity"
            episodes = 3
            seeds = [7]

            [filter]
            beta = 1.0

            [disturbance]
            kind = "input-bias"
            bias = [0.02, 0.02, 0.02]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.filter.eta0, 0.1);
        assert_eq!(cfg.filter.beta, 1.0);
        assert_eq!(cfg.sac.batch_size, 64);
        assert!(cfg.build_clf().unwrap().dim() == 6);
    }

    #[test]
    fn field_level_errors() {
        let err = ExperimentConfig::from_toml(
            "name = \"x\"\nenv = \"nct\"\nepisodes = 1\nseeds = [0]\n[disturbance]\nkind = \"input-bias\"\nbias = [1.0, 2.0]\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("disturbance.bias"), "{err}");
        let err = ExperimentConfig::from_toml("name = \"x\"\nenv = \"nct\"\nepisodes = 1\nseeds = []\n").unwrap_err();
        assert!(err.to_string().contains("seeds"), "{err}");
    }

    #[test]
    fn unknown_preset_lists_choices() {
        let err = preset("nope").unwrap_err().to_string();
        assert!(err.contains("nct-smoothing"));
        for p in PRESETS {
            let s = preset(p).unwrap();
            for c in &s.comparisons {
                assert!(s.arms.iter().any(|a| a.name == c.baseline) && s.arms.iter().any(|a| a.name == c.variant));
            }
        }
        assert_eq!(
            preset_name(StudyKind::Adaptive, EnvName::Satellite),
            "satellite-adaptive"
        );
    }
}
