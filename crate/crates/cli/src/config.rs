//! Flat TOML run configuration with typed sections. Unknown keys are
//! rejected with the offending name so typos never silently revert to
//! defaults.

use anyhow::{bail, Context, Result};
use oar_core::attribution::{OutcomeProbe, ProbeKind};
use oar_core::policy::PolicyConfig;
use oar_core::reshaping::{GatingConfig, TauMode};
use oar_core::trainer::{CreditMethod, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Written verbatim by `oar init-config`; every tunable appears with its
/// default so a run is fully described by its config snapshot.
pub const DEFAULT_CONFIG: &str = r#"# oar run configuration

[model]
# "desk" (4 layers, d_model 128) or "ci" (4 layers, d_model 48).
preset = "desk"

[pretrain]
steps = 400
batch_size = 8
learning_rate = 0.001
difficulty_min = 1
difficulty_max = 3
seed = 0

[train]
group_size = 8
prompts_per_batch = 4
total_steps = 200
learning_rate = 0.0003
eps_low = 0.2
eps_high = 0.28          # clip-higher asymmetric upper bound
temperature = 1.0
max_new_tokens = 96
credit = "vanilla"       # vanilla | random | entropy | oar_p | oar_g
tau = 0.4                # gate threshold (or percentile level)
beta = 2.0               # boost slope above the threshold
tau_mode = "fixed"       # fixed | percentile
probe = "as_mean"        # lt_logits | as_mean | as_joint
warmup_fallback = true   # fall back to lt_logits when no answer span yet
alpha = 0.4              # entropy-baseline bonus coefficient
kappa = 4.0              # entropy-baseline cap divisor
batch_budget = 32
oar_g_repeats = 1
# sigma = 0.05           # fixed OAR-G noise scale; omit for the per-sequence default
difficulty_min = 1
difficulty_max = 3
seed = 0
force_degenerate = false
checkpoint_every = 50

[eval]
trajectories = 20
max_attempts = 400
heldout = 64
variance_trials = 20000
seed = 0
"#;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { preset: "desk".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub difficulty_min: u32,
    pub difficulty_max: u32,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 400,
            batch_size: 8,
            learning_rate: 1e-3,
            difficulty_min: 1,
            difficulty_max: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub credit: String,
    pub tau: f64,
    pub beta: f64,
    pub tau_mode: String,
    pub probe: String,
    pub warmup_fallback: bool,
    pub alpha: f64,
    pub kappa: f64,
    pub batch_budget: usize,
    pub oar_g_repeats: usize,
    pub sigma: Option<f64>,
    pub difficulty_min: u32,
    pub difficulty_max: u32,
    pub seed: u64,
    pub force_degenerate: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            group_size: t.group_size,
            prompts_per_batch: t.prompts_per_batch,
            total_steps: t.total_steps,
            learning_rate: t.learning_rate,
            eps_low: t.eps_low,
            eps_high: t.eps_high,
            temperature: t.temperature,
            max_new_tokens: t.max_new_tokens,
            credit: "vanilla".into(),
            tau: t.gating.tau,
            beta: t.gating.beta,
            tau_mode: "fixed".into(),
            probe: "as_mean".into(),
            warmup_fallback: true,
            alpha: t.alpha,
            kappa: t.kappa,
            batch_budget: t.batch_budget,
            oar_g_repeats: t.oar_g_repeats,
            sigma: None,
            difficulty_min: t.difficulty_min,
            difficulty_max: t.difficulty_max,
            seed: t.seed,
            force_degenerate: t.force_degenerate,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub trajectories: usize,
    pub max_attempts: usize,
    pub heldout: usize,
    pub variance_trials: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            trajectories: 20,
            max_attempts: 400,
            heldout: 64,
            variance_trials: 20_000,
            seed: 0,
        }
    }
}

pub fn parse_probe(s: &str) -> Result<ProbeKind> {
    match s {
        "lt_logits" => Ok(ProbeKind::LtLogits),
        "as_mean" => Ok(ProbeKind::AsMean),
        "as_joint" => Ok(ProbeKind::AsJoint),
        other => bail!("unknown probe {other:?}; valid: lt_logits, as_mean, as_joint"),
    }
}

fn parse_tau_mode(s: &str) -> Result<TauMode> {
    match s {
        "fixed" => Ok(TauMode::FixedValue),
        "percentile" => Ok(TauMode::PerSequencePercentile),
        other => bail!("unknown tau_mode {other:?}; valid: fixed, percentile"),
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let cfg: FileConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        cfg.train_config()?; // surfaces value errors at load time
        Ok(cfg)
    }

    pub fn policy_config(&self) -> Result<PolicyConfig> {
        let mut cfg = match self.model.preset.as_str() {
            "desk" => PolicyConfig::desk_default(),
            "ci" => PolicyConfig::ci_profile(),
            other => bail!("unknown model preset {other:?}; valid: desk, ci"),
        };
        cfg.vocab_size = oar_core::tasks::vocab::USED;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            group_size: t.group_size,
            prompts_per_batch: t.prompts_per_batch,
            total_steps: t.total_steps,
            learning_rate: t.learning_rate,
            eps_low: t.eps_low,
            eps_high: t.eps_high,
            temperature: t.temperature,
            max_new_tokens: t.max_new_tokens,
            credit: CreditMethod::parse(&t.credit)?,
            gating: GatingConfig {
                tau: t.tau,
                beta: t.beta,
                tau_mode: parse_tau_mode(&t.tau_mode)?,
                ..GatingConfig::default()
            },
            probe: OutcomeProbe::new(parse_probe(&t.probe)?, t.warmup_fallback),
            alpha: t.alpha,
            kappa: t.kappa,
            batch_budget: t.batch_budget,
            oar_g_repeats: t.oar_g_repeats,
            sigma: t.sigma,
            difficulty_min: t.difficulty_min,
            difficulty_max: t.difficulty_max,
            seed: t.seed,
            force_degenerate: t.force_degenerate,
            checkpoint_every: t.checkpoint_every,
        };
        cfg.validate().map_err(anyhow::Error::from)?;
        Ok(cfg)
    }

    pub fn snapshot_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("config snapshot encode")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_text_round_trips() {
        let cfg: FileConfig = toml::from_str(DEFAULT_CONFIG).unwrap();
        let train = cfg.train_config().unwrap();
        assert_eq!(train, TrainConfig::default());
        assert_eq!(cfg.policy_config().unwrap().d_model, 128);
    }

    #[test]
    fn unknown_key_names_offender() {
        let err = toml::from_str::<FileConfig>("[train]\ngruop_size = 8\n").unwrap_err();
        assert!(err.to_string().contains("gruop_size"), "{err}");
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = FileConfig::default();
        cfg.train.credit = "oar_x".into();
        let err = cfg.train_config().unwrap_err().to_string();
        assert!(err.contains("vanilla") && err.contains("oar_g"), "{err}");
        let mut cfg = FileConfig::default();
        cfg.train.tau = 1.5;
        assert!(cfg.train_config().is_err());
    }
}
