//! End-to-end training loop: act with the slow target policy, mix replay with
//! fresh data, build Retrace targets off the target network, normalize
//! advantages, combine the variant's policy loss with the value/reward/model
//! losses, and update with a clipped Adam step plus an EMA target network.
//!
//! One train step:
//! 1. Act with π_prior (the target network's policy, optionally mixed with
//!    uniform and the current policy) until enough fresh fragments exist;
//!    every fragment also enters the replay ring.
//! 2. Assemble an exact replay/online batch split:
//!    n_replay = round(fraction·batch), the rest drained FIFO from the fresh
//!    queue.
//! 3. For each fragment position, compute target-network quantities (policy
//!    rows, value baseline, one-step model action values) and Retrace
//!    action-value targets.
//! 4. Fold the batch's mean squared advantage into the variance tracker,
//!    then normalize (update-then-normalize), both the return-based
//!    advantages and the per-action rows.
//! 5. Accumulate gradients: policy-loss weight · (root policy loss + model
//!    policy distillation) + value weight · value loss (root value head plus
//!    model value steps, averaged over present terms) + reward weight ·
//!    model reward loss, batch-meaned over positions.
//! 6. Adam with each coordinate's update direction clipped to [−1, 1] before
//!    the learning rate; the rate decays linearly to exactly 0 at the final
//!    step; afterwards θ_prior += α(θ − θ_prior).
//!
//! Everything consumes one ChaCha8 stream in a fixed order, so runs are
//! bitwise deterministic given the seed, and checkpoints capture the complete
//! state (parameters, target, optimizer moments, normalizer, RNG position,
//! replay ring, online queue) for bit-exact resume.

use crate::approx::{Arch, NetSpec, ParamVector};
use crate::env::{sample_episode, MdpError, TabularMDP, Trajectory};
use crate::model::{model_losses, one_step_q, ModelLossWeights, UnrollTargets};
use crate::oracle::{evaluate, OracleError};
use crate::returns::{
    retrace, AdvNormState, ExpectationMode, FragmentReturns, ReturnsError, ADV_NORM_BETA,
    ADV_NORM_EPS,
};
use crate::targets::{cmpo_target, total_variation};
use crate::updates::{distill_target, policy_loss, StepCtx, UpdateConfig, UpdateError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] MdpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Returns(#[from] ReturnsError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Acting-policy mixture: act with
/// (1 − uniform − current)·π_prior + uniform·U + current·π. Off by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixturePolicy {
    pub uniform: f64,
    pub current: f64,
}

impl Default for MixturePolicy {
    fn default() -> Self {
        MixturePolicy { uniform: 0.0, current: 0.0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Fragments per batch.
    pub batch_size: usize,
    /// Maximum fragment length; episodes are cut at this boundary with a
    /// bootstrap observation.
    pub sequence_length: usize,
    pub replay_fraction: f64,
    /// Replay ring capacity counted in environment steps.
    pub replay_capacity_steps: usize,
    /// EMA rate for the target network.
    pub target_alpha: f64,
    /// Initial learning rate of the linear-to-zero schedule.
    pub learning_rate: f64,
    /// Metrics row every this many steps (the final step always logs).
    pub eval_interval: u64,
    /// Episode length cap while acting.
    pub max_episode_steps: usize,
    /// Model unroll depth K.
    pub unroll_depth: usize,
    pub retrace_lambda: f64,
    pub retrace_mode: ExpectationMode,
    /// Train the model's policy head toward the variant's distillation
    /// target (only variants with such a target ever do).
    pub model_policy_loss: bool,
    pub value_loss_weight: f64,
    pub reward_loss_weight: f64,
    pub arch: Arch,
    pub mixture: MixturePolicy,
    pub seed: u64,
    pub update: UpdateConfig,
}

impl TrainConfig {
    /// Desk-scale defaults: small batches and short sequences suited to MDPs
    /// with a handful of states.
    pub fn desk_default(update: UpdateConfig) -> TrainConfig {
        TrainConfig {
            total_steps: 8000,
            batch_size: 32,
            sequence_length: 10,
            replay_fraction: 0.75,
            replay_capacity_steps: 50_000,
            target_alpha: 0.1,
            learning_rate: 0.03,
            eval_interval: 100,
            max_episode_steps: 100,
            unroll_depth: 5,
            retrace_lambda: 0.95,
            retrace_mode: ExpectationMode::Exact,
            model_policy_loss: true,
            value_loss_weight: 0.25,
            reward_loss_weight: 1.0,
            arch: Arch::Tabular,
            mixture: MixturePolicy::default(),
            seed: 0,
            update,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let fail = |m: &str| Err(TrainerError::Config(m.to_string()));
        if self.total_steps == 0 {
            return fail("total_steps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.sequence_length == 0 {
            return fail("sequence_length must be positive");
        }
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return fail("replay_fraction must lie in [0, 1]");
        }
        if self.replay_capacity_steps == 0 {
            return fail("replay_capacity_steps must be positive");
        }
        if !(0.0..=1.0).contains(&self.target_alpha) {
            return fail("target_alpha must lie in [0, 1]");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be a finite non-negative number");
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be positive");
        }
        if self.max_episode_steps == 0 {
            return fail("max_episode_steps must be positive");
        }
        if self.unroll_depth == 0 {
            return fail("unroll_depth must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.retrace_lambda) {
            return fail("retrace_lambda must lie in [0, 1]");
        }
        if let ExpectationMode::Samples(0) = self.retrace_mode {
            return fail("retrace expectation sample count must be positive");
        }
        let m = self.mixture;
        if m.uniform < 0.0 || m.current < 0.0 || m.uniform + m.current > 1.0 {
            return fail("mixture weights must be non-negative and sum to at most 1");
        }
        if self.value_loss_weight < 0.0 || self.reward_loss_weight < 0.0 {
            return fail("loss weights must be non-negative");
        }
        if let Arch::Mlp { hidden: 0 } = self.arch {
            return fail("MLP hidden size must be positive");
        }
        Ok(())
    }

    fn replay_per_batch(&self) -> usize {
        (self.replay_fraction * self.batch_size as f64).round() as usize
    }
}

/// One stored trajectory fragment (at most `sequence_length` steps).
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub obs: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub discounts: Vec<f64>,
    /// Full behavior-policy rows recorded at acting time.
    pub behavior: Vec<Vec<f64>>,
    /// Observation after the final step when the fragment was cut before
    /// termination.
    pub bootstrap_obs: Option<usize>,
}

impl Fragment {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.bootstrap_obs.is_none()
    }
}

/// Cut an episode into fragments of at most `seq_len` steps; interior cuts
/// bootstrap from the next step's observation.
pub fn cut_fragments(traj: &Trajectory, seq_len: usize) -> Vec<Fragment> {
    assert!(seq_len > 0);
    let steps = &traj.steps;
    let mut out = Vec::new();
    let mut start = 0;
    while start < steps.len() {
        let end = (start + seq_len).min(steps.len());
        let boot =
            if end < steps.len() { Some(steps[end].obs) } else { traj.bootstrap_obs };
        let slice = &steps[start..end];
        out.push(Fragment {
            obs: slice.iter().map(|s| s.obs).collect(),
            actions: slice.iter().map(|s| s.action).collect(),
            rewards: slice.iter().map(|s| s.reward).collect(),
            discounts: slice.iter().map(|s| s.discount).collect(),
            behavior: slice.iter().map(|s| s.behavior.clone()).collect(),
            bootstrap_obs: boot,
        });
        start = end;
    }
    out
}

/// Uniform-with-replacement ring of fragments with a step-count capacity.
#[derive(Debug, Clone)]
struct ReplayRing {
    frags: VecDeque<Fragment>,
    steps: usize,
    capacity: usize,
}

impl ReplayRing {
    fn new(capacity: usize) -> ReplayRing {
        ReplayRing { frags: VecDeque::new(), steps: 0, capacity }
    }

    fn push(&mut self, frag: Fragment) {
        self.steps += frag.len();
        self.frags.push_back(frag);
        while self.steps > self.capacity && self.frags.len() > 1 {
            if let Some(old) = self.frags.pop_front() {
                self.steps -= old.len();
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> &Fragment {
        assert!(!self.frags.is_empty(), "replay ring is empty");
        &self.frags[rng.gen_range(0..self.frags.len())]
    }

    fn is_empty(&self) -> bool {
        self.frags.is_empty()
    }
}

/// Adam with the per-coordinate update direction clipped to [−1, 1] before
/// the learning rate, so no coordinate moves farther than the current rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: ParamVector,
    v: ParamVector,
    step: u64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> AdamState {
        AdamState { m: like.zeros_like(), v: like.zeros_like(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        let p = params.data_mut();
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let dir = (m_hat / (v_hat.sqrt() + ADAM_EPS)).clamp(-1.0, 1.0);
            p[i] -= lr * dir;
        }
    }
}

/// Version stamp emitted as the trailing column of every metrics row.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Oracle-evaluated expected return of the current policy.
    pub j_oracle: f64,
    /// Max over active observations of TV(regularized target, π_prior).
    pub tv_max: f64,
    pub loss_total: f64,
    pub loss_pg: f64,
    pub loss_reg: f64,
    pub loss_value: f64,
    pub loss_reward: f64,
    pub loss_model_policy: f64,
    pub entropy: f64,
    pub adv_std: f64,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv_header() -> &'static str {
        "step,j_oracle,tv_max,loss_total,loss_pg,loss_reg,loss_value,loss_reward,loss_model_policy,entropy,adv_std,lr,schema_version"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.j_oracle,
            self.tv_max,
            self.loss_total,
            self.loss_pg,
            self.loss_reg,
            self.loss_value,
            self.loss_reward,
            self.loss_model_policy,
            self.entropy,
            self.adv_std,
            self.lr,
            METRICS_SCHEMA_VERSION
        )
    }
}

/// Loss aggregates of one train step (means over batch positions).
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_pg: f64,
    pub loss_reg: f64,
    pub loss_value: f64,
    pub loss_reward: f64,
    pub loss_model_policy: f64,
    pub entropy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub final_j: f64,
    /// Current policy per observation.
    pub final_policy: Vec<Vec<f64>>,
    /// Argmax action per observation (ties to the lowest index).
    pub greedy: Vec<usize>,
    /// Largest regularized-target TV seen in any logged row.
    pub tv_max_overall: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<MetricsRow>,
    pub summary: RunSummary,
}

pub struct Trainer {
    cfg: TrainConfig,
    mdp: TabularMDP,
    net: NetSpec,
    params: ParamVector,
    target: ParamVector,
    adam: AdamState,
    norm: AdvNormState,
    rng: ChaCha8Rng,
    online: VecDeque<Fragment>,
    replay: ReplayRing,
    step_idx: u64,
}

impl Trainer {
    pub fn new(mdp: TabularMDP, cfg: TrainConfig) -> Result<Trainer, TrainerError> {
        cfg.validate()?;
        let net = NetSpec::new(mdp.num_obs(), mdp.num_actions(), cfg.arch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = net.init_params(&mut rng);
        let target = params.clone();
        let adam = AdamState::new(&params);
        let replay = ReplayRing::new(cfg.replay_capacity_steps);
        Ok(Trainer {
            cfg,
            mdp,
            net,
            params,
            target,
            adam,
            norm: AdvNormState::new(ADV_NORM_BETA, ADV_NORM_EPS),
            rng,
            online: VecDeque::new(),
            replay,
            step_idx: 0,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step_idx
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn target_params(&self) -> &ParamVector {
        &self.target
    }

    pub fn net(&self) -> &NetSpec {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Linear decay reaching exactly zero at the last step.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.cfg.total_steps;
        if total <= 1 {
            return self.cfg.learning_rate;
        }
        let frac = step as f64 / (total - 1) as f64;
        self.cfg.learning_rate * (1.0 - frac)
    }

    /// Current policy per observation.
    pub fn policy_table(&self) -> Vec<Vec<f64>> {
        (0..self.mdp.num_obs()).map(|o| self.net.forward(&self.params, o).probs).collect()
    }

    /// Target-network policy per observation.
    pub fn prior_policy_table(&self) -> Vec<Vec<f64>> {
        (0..self.mdp.num_obs()).map(|o| self.net.forward(&self.target, o).probs).collect()
    }

    /// The distribution actions are drawn from while acting.
    pub fn acting_policy_table(&self) -> Vec<Vec<f64>> {
        let prior = self.prior_policy_table();
        let m = self.cfg.mixture;
        if m.uniform == 0.0 && m.current == 0.0 {
            return prior;
        }
        let current = self.policy_table();
        let a = self.mdp.num_actions() as f64;
        let base = 1.0 - m.uniform - m.current;
        prior
            .into_iter()
            .zip(current)
            .map(|(pr, cu)| {
                pr.iter()
                    .zip(&cu)
                    .map(|(&p, &c)| base * p + m.uniform / a + m.current * c)
                    .collect()
            })
            .collect()
    }

    fn act_one_episode(&mut self) -> Result<(), TrainerError> {
        let acting = self.acting_policy_table();
        let traj = sample_episode(&self.mdp, &acting, self.cfg.max_episode_steps, &mut self.rng)?;
        for frag in cut_fragments(&traj, self.cfg.sequence_length) {
            self.online.push_back(frag.clone());
            self.replay.push(frag);
        }
        Ok(())
    }

    /// Per-position quantities derived from the target network.
    fn target_quantities(&mut self, frag: &Fragment) -> Result<TargetQuantities, TrainerError> {
        let t_len = frag.len();
        let mut prior_rows = Vec::with_capacity(t_len);
        let mut v_prior = Vec::with_capacity(t_len);
        let mut q_prior = Vec::with_capacity(t_len);
        for &o in &frag.obs {
            let out = self.net.forward(&self.target, o);
            q_prior.push(one_step_q(&self.net, &self.target, &out.hidden, self.mdp.discount()));
            v_prior.push(out.value);
            prior_rows.push(out.probs);
        }
        let bootstrap_value =
            frag.bootstrap_obs.map(|o| self.net.forward(&self.target, o).value);
        let behavior_taken: Vec<f64> =
            frag.actions.iter().zip(&frag.behavior).map(|(&a, row)| row[a]).collect();
        let estimates = {
            let view = FragmentReturns {
                rewards: &frag.rewards,
                discounts: &frag.discounts,
                actions: &frag.actions,
                behavior: &behavior_taken,
                pi: &prior_rows,
                values: &v_prior,
                bootstrap_value,
            };
            retrace(&view, &q_prior, self.cfg.retrace_lambda, self.cfg.retrace_mode, &mut self.rng)?
        };
        Ok(TargetQuantities { prior_rows, v_prior, q_prior, estimates })
    }

    /// One training update.
    pub fn step(&mut self) -> Result<StepStats, TrainerError> {
        let n_replay = self.cfg.replay_per_batch();
        let n_online = self.cfg.batch_size - n_replay.min(self.cfg.batch_size);

        // 1. Acting: fill the fresh queue (and, always, seed the replay ring).
        while self.online.len() < n_online || self.replay.is_empty() {
            self.act_one_episode()?;
        }

        // 2. Batch assembly: replay first, then FIFO online.
        let mut batch: Vec<Fragment> = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..n_replay.min(self.cfg.batch_size) {
            let f = self.replay.sample(&mut self.rng).clone();
            batch.push(f);
        }
        for _ in 0..n_online {
            batch.push(self.online.pop_front().expect("online queue was just filled"));
        }

        // 3. Target-network quantities and Retrace per fragment.
        let mut targets = Vec::with_capacity(batch.len());
        for frag in &batch {
            targets.push(self.target_quantities(frag)?);
        }

        // 4. Update-then-normalize on the batch's squared advantages.
        let n_pos: usize = batch.iter().map(|f| f.len()).sum();
        let mean_sq = targets
            .iter()
            .flat_map(|t| t.estimates.iter().map(|e| e.adv * e.adv))
            .sum::<f64>()
            / n_pos as f64;
        self.norm.update(mean_sq);
        let std = self.norm.std();

        // 5. Losses and gradient, batch-meaned over positions.
        let mut grad = self.params.zeros_like();
        let mut stats = StepStats::default();
        let w_policy = self.cfg.update.policy_loss_weight;
        let model_policy_on =
            self.cfg.model_policy_loss && crate::updates::distill_target_kind(self.cfg.update.variant).is_some();
        for (frag, tq) in batch.iter().zip(&targets) {
            let t_len = frag.len();
            let adv_rows: Vec<Vec<f64>> = (0..t_len)
                .map(|t| tq.q_prior[t].iter().map(|&q| (q - tq.v_prior[t]) / std).collect())
                .collect();
            for t in 0..t_len {
                let obs = frag.obs[t];
                let out = self.net.forward(&self.params, obs);
                // Root policy loss.
                let ctx = StepCtx {
                    action: frag.actions[t],
                    behavior: &frag.behavior[t],
                    pg_advantage: tq.estimates[t].adv / std,
                    advantages: &adv_rows[t],
                    prior: &tq.prior_rows[t],
                    q_prior: &tq.q_prior[t],
                };
                let pl = policy_loss(&self.cfg.update, &ctx, &out.logits, &mut self.rng)?;
                let scaled: Vec<f64> =
                    pl.dlogits.iter().map(|d| d * w_policy / n_pos as f64).collect();
                self.net.backward_logits(&self.params, obs, &out, &scaled, &mut grad);

                // Model targets along the unroll.
                let k_eff = self.cfg.unroll_depth.min(t_len - t);
                let mut value_targets = Vec::with_capacity(k_eff);
                let mut policy_targets = Vec::with_capacity(k_eff);
                for k in 1..=k_eff {
                    let idx = t + k;
                    if idx <= t_len - 1 {
                        value_targets.push(Some(tq.estimates[idx].g));
                        policy_targets.push(if model_policy_on {
                            distill_target(
                                &self.cfg.update,
                                &tq.prior_rows[idx],
                                &adv_rows[idx],
                                &tq.q_prior[idx],
                            )
                        } else {
                            None
                        });
                    } else {
                        // idx == t_len: the state after the fragment's last
                        // step. Terminal: absorbing value 0; truncation: no
                        // target.
                        value_targets
                            .push(if frag.terminated() { Some(0.0) } else { None });
                        policy_targets.push(None);
                    }
                }
                let unroll = UnrollTargets {
                    actions: frag.actions[t..t + k_eff].to_vec(),
                    rewards: frag.rewards[t..t + k_eff].to_vec(),
                    values: value_targets,
                    policies: policy_targets,
                };
                // Value terms pool the root value head with the model's value
                // steps: mean over 1 + (present unroll value targets).
                let n_v_model = unroll.values.iter().filter(|v| v.is_some()).count();
                let v_terms = (1 + n_v_model) as f64;
                let weights = ModelLossWeights {
                    reward: self.cfg.reward_loss_weight / n_pos as f64,
                    value: if n_v_model > 0 {
                        self.cfg.value_loss_weight * n_v_model as f64 / (v_terms * n_pos as f64)
                    } else {
                        0.0
                    },
                    policy: if model_policy_on { w_policy / n_pos as f64 } else { 0.0 },
                };
                let ml = model_losses(
                    &self.net,
                    &self.params,
                    obs,
                    &out,
                    &unroll,
                    weights,
                    Some(&mut grad),
                );
                // Root value regression toward the Retrace target.
                let err_root = out.value - tq.estimates[t].g;
                self.net.backward_value(
                    &self.params,
                    obs,
                    &out,
                    self.cfg.value_loss_weight * err_root / (v_terms * n_pos as f64),
                    &mut grad,
                );

                let l_v =
                    (0.5 * err_root * err_root + ml.value * n_v_model as f64) / v_terms;
                let l_m = ml.policy;
                let l_r = ml.reward;
                stats.loss_pg += pl.pg_term;
                stats.loss_reg += pl.regularizer;
                stats.entropy += pl.entropy;
                stats.loss_value += l_v;
                stats.loss_reward += l_r;
                stats.loss_model_policy += l_m;
                stats.loss_total += w_policy * (pl.total + l_m)
                    + self.cfg.value_loss_weight * l_v
                    + self.cfg.reward_loss_weight * l_r;
            }
        }
        let n = n_pos as f64;
        stats.loss_pg /= n;
        stats.loss_reg /= n;
        stats.entropy /= n;
        stats.loss_value /= n;
        stats.loss_reward /= n;
        stats.loss_model_policy /= n;
        stats.loss_total /= n;

        if !stats.loss_total.is_finite() {
            return Err(TrainerError::NonFiniteLoss {
                step: self.step_idx,
                detail: format!(
                    "total {} (pg {}, reg {}, value {}, reward {}, model policy {})",
                    stats.loss_total,
                    stats.loss_pg,
                    stats.loss_reg,
                    stats.loss_value,
                    stats.loss_reward,
                    stats.loss_model_policy
                ),
            });
        }

        // 6. Clipped Adam, learning-rate schedule, EMA target.
        let lr = self.lr_at(self.step_idx);
        stats.lr = lr;
        self.adam.apply(&mut self.params, &grad, lr);
        let alpha = self.cfg.target_alpha;
        let (t_data, p_data) = (self.target.data_mut(), self.params.data());
        for (t, &p) in t_data.iter_mut().zip(p_data) {
            *t += alpha * (p - *t);
        }
        self.step_idx += 1;
        Ok(stats)
    }

    /// Oracle return of the current policy.
    pub fn oracle_j(&self) -> Result<f64, TrainerError> {
        let per_state = self.mdp.expand_policy(&self.policy_table())?;
        Ok(evaluate(&self.mdp, &per_state)?.j)
    }

    /// Max over active observations of TV(clipped-advantage target, π_prior),
    /// built from the target network and the current normalizer scale.
    pub fn tv_max(&self) -> f64 {
        let std = self.norm.std();
        let mut max_tv: f64 = 0.0;
        for o in self.mdp.active_obs() {
            let out = self.net.forward(&self.target, o);
            let q = one_step_q(&self.net, &self.target, &out.hidden, self.mdp.discount());
            let adv: Vec<f64> = q.iter().map(|&x| (x - out.value) / std).collect();
            let target = cmpo_target(&out.probs, &adv, self.cfg.update.clip_c);
            max_tv = max_tv.max(total_variation(&target.probs, &out.probs));
        }
        max_tv
    }

    fn metrics_row(&self, stats: &StepStats) -> Result<MetricsRow, TrainerError> {
        Ok(MetricsRow {
            step: self.step_idx,
            j_oracle: self.oracle_j()?,
            tv_max: self.tv_max(),
            loss_total: stats.loss_total,
            loss_pg: stats.loss_pg,
            loss_reg: stats.loss_reg,
            loss_value: stats.loss_value,
            loss_reward: stats.loss_reward,
            loss_model_policy: stats.loss_model_policy,
            entropy: stats.entropy,
            adv_std: self.norm.std(),
            lr: stats.lr,
        })
    }

    /// Run the remaining steps, logging every `eval_interval` steps and at
    /// the end; `on_row` sees each metrics row as it is produced.
    pub fn run(
        &mut self,
        mut on_row: impl FnMut(&MetricsRow),
    ) -> Result<RunResult, TrainerError> {
        let mut metrics = Vec::new();
        let mut tv_overall: f64 = 0.0;
        while self.step_idx < self.cfg.total_steps {
            let stats = self.step()?;
            if self.step_idx % self.cfg.eval_interval == 0 || self.step_idx == self.cfg.total_steps
            {
                let row = self.metrics_row(&stats)?;
                tv_overall = tv_overall.max(row.tv_max);
                on_row(&row);
                metrics.push(row);
            }
        }
        let final_policy = self.policy_table();
        let greedy = final_policy
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect();
        let summary = RunSummary {
            steps: self.step_idx,
            final_j: self.oracle_j()?,
            final_policy,
            greedy,
            tv_max_overall: tv_overall,
        };
        Ok(RunResult { metrics, summary })
    }

    // ---- Checkpointing -------------------------------------------------

    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<(), TrainerError> {
        w.write_all(CHECKPOINT_MAGIC.as_bytes())?;
        write_u64(&mut w, self.step_idx)?;
        write_u64(&mut w, self.adam.step)?;
        w.write_all(&self.rng.get_seed())?;
        write_u64(&mut w, self.rng.get_stream())?;
        let pos = self.rng.get_word_pos();
        write_u64(&mut w, (pos & u128::from(u64::MAX)) as u64)?;
        write_u64(&mut w, (pos >> 64) as u64)?;
        let (var, beta_product, updates) = self.norm.raw_state();
        write_f64(&mut w, var)?;
        write_f64(&mut w, beta_product)?;
        write_u64(&mut w, updates)?;
        write_u64(&mut w, self.params.len() as u64)?;
        for vec in [&self.params, &self.target, &self.adam.m, &self.adam.v] {
            for &x in vec.data() {
                write_f64(&mut w, x)?;
            }
        }
        write_u64(&mut w, self.online.len() as u64)?;
        for f in &self.online {
            write_fragment(&mut w, f)?;
        }
        write_u64(&mut w, self.replay.frags.len() as u64)?;
        for f in &self.replay.frags {
            write_fragment(&mut w, f)?;
        }
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint; `mdp` and `cfg` must be the ones
    /// the checkpoint was created with.
    pub fn resume<R: Read>(
        mdp: TabularMDP,
        cfg: TrainConfig,
        mut r: R,
    ) -> Result<Trainer, TrainerError> {
        cfg.validate()?;
        let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
        r.read_exact(&mut magic)
            .map_err(|_| TrainerError::Checkpoint("truncated header".into()))?;
        if magic != CHECKPOINT_MAGIC.as_bytes() {
            return Err(TrainerError::Checkpoint("unrecognized format".into()));
        }
        let step_idx = read_u64(&mut r)?;
        let adam_step = read_u64(&mut r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = read_u64(&mut r)?;
        let pos_lo = read_u64(&mut r)?;
        let pos_hi = read_u64(&mut r)?;
        let var = read_f64(&mut r)?;
        let beta_product = read_f64(&mut r)?;
        let updates = read_u64(&mut r)?;
        let net = NetSpec::new(mdp.num_obs(), mdp.num_actions(), cfg.arch);
        let expected = net.layout().total();
        let stored = read_u64(&mut r)? as usize;
        if stored != expected {
            return Err(TrainerError::Checkpoint(format!(
                "parameter count {stored} does not match this configuration ({expected})"
            )));
        }
        let read_vec = |r: &mut R| -> Result<ParamVector, TrainerError> {
            let mut p = ParamVector::zeros(net.layout());
            for x in p.data_mut() {
                *x = read_f64(r)?;
            }
            Ok(p)
        };
        let params = read_vec(&mut r)?;
        let target = read_vec(&mut r)?;
        let m = read_vec(&mut r)?;
        let v = read_vec(&mut r)?;
        let n_online = read_u64(&mut r)? as usize;
        let mut online = VecDeque::with_capacity(n_online);
        for _ in 0..n_online {
            online.push_back(read_fragment(&mut r, mdp.num_actions())?);
        }
        let n_replay = read_u64(&mut r)? as usize;
        let mut replay = ReplayRing::new(cfg.replay_capacity_steps);
        for _ in 0..n_replay {
            replay.push(read_fragment(&mut r, mdp.num_actions())?);
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(pos_lo) | (u128::from(pos_hi) << 64));
        Ok(Trainer {
            cfg,
            mdp,
            net,
            params,
            target,
            adam: AdamState { m, v, step: adam_step },
            norm: AdvNormState::restore(ADV_NORM_BETA, ADV_NORM_EPS, (var, beta_product, updates)),
            rng,
            online,
            replay,
            step_idx,
        })
    }
}

struct TargetQuantities {
    prior_rows: Vec<Vec<f64>>,
    v_prior: Vec<f64>,
    q_prior: Vec<Vec<f64>>,
    estimates: Vec<crate::returns::ReturnEstimate>,
}

const CHECKPOINT_MAGIC: &str = "MUESLI-CHECKPOINT v1\n";

fn write_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn write_f64<W: Write>(w: &mut W, x: f64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TrainerError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| TrainerError::Checkpoint("truncated data".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, TrainerError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| TrainerError::Checkpoint("truncated data".into()))?;
    Ok(f64::from_le_bytes(b))
}

fn write_fragment<W: Write>(w: &mut W, f: &Fragment) -> std::io::Result<()> {
    write_u64(w, f.len() as u64)?;
    match f.bootstrap_obs {
        Some(o) => {
            write_u64(w, 1)?;
            write_u64(w, o as u64)?;
        }
        None => write_u64(w, 0)?,
    }
    for t in 0..f.len() {
        write_u64(w, f.obs[t] as u64)?;
        write_u64(w, f.actions[t] as u64)?;
        write_f64(w, f.rewards[t])?;
        write_f64(w, f.discounts[t])?;
        for &b in &f.behavior[t] {
            write_f64(w, b)?;
        }
    }
    Ok(())
}

fn read_fragment<R: Read>(r: &mut R, num_actions: usize) -> Result<Fragment, TrainerError> {
    let len = read_u64(r)? as usize;
    let bootstrap_obs = match read_u64(r)? {
        0 => None,
        1 => Some(read_u64(r)? as usize),
        _ => return Err(TrainerError::Checkpoint("bad bootstrap flag".into())),
    };
    let mut f = Fragment {
        obs: Vec::with_capacity(len),
        actions: Vec::with_capacity(len),
        rewards: Vec::with_capacity(len),
        discounts: Vec::with_capacity(len),
        behavior: Vec::with_capacity(len),
        bootstrap_obs,
    };
    for _ in 0..len {
        f.obs.push(read_u64(r)? as usize);
        f.actions.push(read_u64(r)? as usize);
        f.rewards.push(read_f64(r)?);
        f.discounts.push(read_f64(r)?);
        let mut row = Vec::with_capacity(num_actions);
        for _ in 0..num_actions {
            row.push(read_f64(r)?);
        }
        f.behavior.push(row);
    }
    Ok(f)
}
