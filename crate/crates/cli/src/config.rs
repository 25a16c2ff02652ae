//! Run-configuration file: a TOML document mirroring the trainer and update
//! configs plus the MDP source. Unknown keys are rejected; every field has a
//! default, and `print-config` emits the complete default document.

use muesli_core::approx::Arch;
use muesli_core::env::{aliased_mdp, parse_mdp, random_mdp, TabularMDP};
use muesli_core::returns::ExpectationMode;
use muesli_core::trainer::{MixturePolicy, TrainConfig};
use muesli_core::updates::{KlMode, UpdateConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::CliError;

/// "exact" or a positive sample count, for the expectation-mode knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CountOrExact {
    Count(usize),
    Word(String),
}

impl CountOrExact {
    fn resolve(&self, field: &str) -> Result<Option<usize>, CliError> {
        match self {
            CountOrExact::Word(w) if w == "exact" => Ok(None),
            CountOrExact::Word(w) => Err(CliError::Usage(format!(
                "{field}: expected \"exact\" or a positive integer, got \"{w}\""
            ))),
            CountOrExact::Count(0) => {
                Err(CliError::Usage(format!("{field}: sample count must be positive")))
            }
            CountOrExact::Count(n) => Ok(Some(*n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdpKind {
    Aliased,
    Random,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpSection {
    pub kind: MdpKind,
    /// Path to an MDP text file (kind = "file").
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Shape of the generated MDP (kind = "random").
    pub states: usize,
    pub actions: usize,
    pub discount: f64,
    pub seed: u64,
    /// Multiplies every reward after construction.
    pub reward_scale: f64,
}

impl Default for MdpSection {
    fn default() -> Self {
        MdpSection {
            kind: MdpKind::Aliased,
            path: None,
            states: 10,
            actions: 2,
            discount: 0.9,
            seed: 7,
            reward_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Tabular,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub variant: String,
    pub total_steps: u64,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub replay_fraction: f64,
    pub replay_capacity_steps: usize,
    pub target_alpha: f64,
    pub learning_rate: f64,
    pub eval_interval: u64,
    pub max_episode_steps: usize,
    pub unroll_depth: usize,
    pub retrace_lambda: f64,
    /// "exact" or a sample count for the Retrace bootstrap expectation.
    pub retrace_expectation: CountOrExact,
    pub model_policy_loss: bool,
    pub value_loss_weight: f64,
    pub reward_loss_weight: f64,
    pub arch: ArchKind,
    /// Hidden width (arch = "mlp").
    pub hidden: usize,
    pub mixture_uniform: f64,
    pub mixture_current: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::desk_default(UpdateConfig::for_variant(Variant::Muesli));
        TrainSection {
            variant: "muesli".to_string(),
            total_steps: d.total_steps,
            batch_size: d.batch_size,
            sequence_length: d.sequence_length,
            replay_fraction: d.replay_fraction,
            replay_capacity_steps: d.replay_capacity_steps,
            target_alpha: d.target_alpha,
            learning_rate: d.learning_rate,
            eval_interval: d.eval_interval,
            max_episode_steps: d.max_episode_steps,
            unroll_depth: d.unroll_depth,
            retrace_lambda: d.retrace_lambda,
            retrace_expectation: CountOrExact::Word("exact".to_string()),
            model_policy_loss: d.model_policy_loss,
            value_loss_weight: d.value_loss_weight,
            reward_loss_weight: d.reward_loss_weight,
            arch: ArchKind::Tabular,
            hidden: 16,
            mixture_uniform: 0.0,
            mixture_current: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateSection {
    pub lambda_cmpo: f64,
    pub clip_c: f64,
    /// "exact" or the number of prior samples for the regularizer KL.
    pub kl_samples: CountOrExact,
    /// Defaults to the variant's own entropy weight when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy_weight: Option<f64>,
    pub trpo_weight: f64,
    pub ppo_epsilon: f64,
    pub lambda_mpo: f64,
    pub policy_loss_weight: f64,
}

impl Default for UpdateSection {
    fn default() -> Self {
        let d = UpdateConfig::for_variant(Variant::Muesli);
        UpdateSection {
            lambda_cmpo: d.lambda_cmpo,
            clip_c: d.clip_c,
            kl_samples: CountOrExact::Count(16),
            entropy_weight: None,
            trpo_weight: d.trpo_weight,
            ppo_epsilon: d.ppo_epsilon,
            lambda_mpo: d.lambda_mpo,
            policy_loss_weight: d.policy_loss_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub mdp: MdpSection,
    pub train: TrainSection,
    pub update: UpdateSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<RunConfigFile, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        Variant::parse(&self.train.variant).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            CliError::Usage(format!(
                "unknown variant \"{}\"; valid variants: {}",
                self.train.variant,
                names.join(", ")
            ))
        })
    }

    pub fn build_mdp(&self) -> Result<TabularMDP, CliError> {
        let m = &self.mdp;
        let base = match m.kind {
            MdpKind::Aliased => aliased_mdp(),
            MdpKind::Random => {
                if m.states < 1 || m.actions < 1 {
                    return Err(CliError::Usage(
                        "mdp: random MDPs need at least one state and action".to_string(),
                    ));
                }
                if m.discount >= 1.0 {
                    return Err(CliError::Usage(
                        "mdp: random MDPs have no terminal states, so discount must be < 1"
                            .to_string(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
                random_mdp(m.states, m.actions, m.discount, &mut rng)
            }
            MdpKind::File => {
                let path = m.path.as_ref().ok_or_else(|| {
                    CliError::Usage("mdp: kind = \"file\" requires a path".to_string())
                })?;
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("mdp: cannot read {}: {e}", path.display()))
                })?;
                parse_mdp(&text)
                    .map_err(|e| CliError::Usage(format!("mdp: {}: {e}", path.display())))?
            }
        };
        if !m.reward_scale.is_finite() {
            return Err(CliError::Usage("mdp: reward_scale must be finite".to_string()));
        }
        Ok(if m.reward_scale == 1.0 { base } else { base.with_scaled_rewards(m.reward_scale) })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let variant = self.variant()?;
        let mut update = UpdateConfig::for_variant(variant);
        let u = &self.update;
        update.lambda_cmpo = u.lambda_cmpo;
        update.clip_c = u.clip_c;
        update.kl_mode = match u.kl_samples.resolve("update.kl_samples")? {
            None => KlMode::Exact,
            Some(n) => KlMode::Samples(n),
        };
        if let Some(w) = u.entropy_weight {
            update.entropy_weight = w;
        }
        update.trpo_weight = u.trpo_weight;
        update.ppo_epsilon = u.ppo_epsilon;
        update.lambda_mpo = u.lambda_mpo;
        update.policy_loss_weight = u.policy_loss_weight;

        let t = &self.train;
        let mut cfg = TrainConfig::desk_default(update);
        cfg.total_steps = t.total_steps;
        cfg.batch_size = t.batch_size;
        cfg.sequence_length = t.sequence_length;
        cfg.replay_fraction = t.replay_fraction;
        cfg.replay_capacity_steps = t.replay_capacity_steps;
        cfg.target_alpha = t.target_alpha;
        cfg.learning_rate = t.learning_rate;
        cfg.eval_interval = t.eval_interval;
        cfg.max_episode_steps = t.max_episode_steps;
        cfg.unroll_depth = t.unroll_depth;
        cfg.retrace_lambda = t.retrace_lambda;
        cfg.retrace_mode = match t.retrace_expectation.resolve("train.retrace_expectation")? {
            None => ExpectationMode::Exact,
            Some(n) => ExpectationMode::Samples(n),
        };
        cfg.model_policy_loss = t.model_policy_loss;
        cfg.value_loss_weight = t.value_loss_weight;
        cfg.reward_loss_weight = t.reward_loss_weight;
        cfg.arch = match t.arch {
            ArchKind::Tabular => Arch::Tabular,
            ArchKind::Mlp => Arch::Mlp { hidden: t.hidden },
        };
        cfg.mixture = MixturePolicy { uniform: t.mixture_uniform, current: t.mixture_current };
        cfg.seed = t.seed;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}
