//! Verifier batteries: numeric confirmation of the analytic claims the rest
//! of the crate relies on, shared by the CLI's `verify` subcommands and the
//! acceptance suite.
//!
//! * [`theorem_grid`] — the clipped-advantage target's maximum total
//!   variation from its prior equals tanh(c/2), at the predicted argmax.
//! * [`lemma_battery`] — the performance-difference identity
//!   J(π) − J(π_prior) = Σ_s d_π(s) Σ_a π(a|s) adv_prior(s, a) on seeded
//!   random MDPs, both sides computed by the exact oracle.
//! * [`bound_battery`] — the trust-region lower bound on improvement is
//!   never violated on seeded random MDPs.
//! * [`gradient_battery`] — every hand-derived gradient (all seven policy
//!   losses, the sampled-KL path, and the model's unroll losses on both
//!   architectures) agrees with central finite differences.

use crate::approx::{fd_check, Arch, NetSpec, ParamVector, FD_STEP};
use crate::env::random_mdp;
use crate::model::{model_losses, ModelLossWeights, UnrollTargets};
use crate::oracle::{evaluate, performance_difference, trpo_lower_bound, OracleError};
use crate::targets::{verify_theorem, TheoremReport};
use crate::updates::{policy_loss, KlMode, StepCtx, UpdateConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default clip-threshold grid for the TV-bound check.
pub const THEOREM_CLIP_GRID: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

#[derive(Debug, Clone)]
pub struct TheoremGrid {
    pub reports: Vec<TheoremReport>,
    pub pass: bool,
}

/// Run the TV-maximization check at each clip threshold.
pub fn theorem_grid(clips: &[f64]) -> TheoremGrid {
    let reports: Vec<TheoremReport> = clips.iter().map(|&c| verify_theorem(c)).collect();
    let pass = reports.iter().all(|r| r.pass);
    TheoremGrid { reports, pass }
}

#[derive(Debug, Clone, Copy)]
pub struct LemmaBattery {
    pub instances: usize,
    pub max_abs_gap: f64,
    pub tolerance: f64,
    pub failures: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBattery {
    pub instances: usize,
    pub violations: usize,
    /// Smallest actual-minus-bound slack seen (non-negative when the bound
    /// holds everywhere).
    pub min_slack: f64,
    pub pass: bool,
}

fn random_instance(
    seed: u64,
) -> (crate::env::TabularMDP, Vec<Vec<f64>>, Vec<Vec<f64>>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.gen_range(2..=8);
    let actions = rng.gen_range(2..=4);
    let mdp = random_mdp(states, actions, 0.9, &mut rng);
    let policy = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..states)
            .map(|_| {
                let raw: Vec<f64> = (0..actions).map(|_| rng.gen::<f64>() + 0.05).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / total).collect()
            })
            .collect()
    };
    let pi_new = policy(&mut rng);
    let pi_prior = policy(&mut rng);
    (mdp, pi_new, pi_prior, rng)
}

/// Check the performance-difference identity on `instances` seeded random
/// MDPs (γ = 0.9, 2–8 states, 2–4 actions) with random policy pairs.
pub fn lemma_battery(
    instances: usize,
    tolerance: f64,
    base_seed: u64,
) -> Result<LemmaBattery, OracleError> {
    let mut max_abs_gap: f64 = 0.0;
    let mut failures = 0;
    for i in 0..instances {
        let (mdp, pi_new, pi_prior, _) = random_instance(base_seed + i as u64);
        let lhs = evaluate(&mdp, &pi_new)?.j - evaluate(&mdp, &pi_prior)?.j;
        let rhs = performance_difference(&mdp, &pi_new, &pi_prior)?;
        let gap = (lhs - rhs).abs();
        max_abs_gap = max_abs_gap.max(gap);
        if gap > tolerance {
            failures += 1;
        }
    }
    Ok(LemmaBattery { instances, max_abs_gap, tolerance, failures, pass: failures == 0 })
}

/// Check the trust-region improvement bound on `instances` seeded random
/// MDPs; a violation is actual improvement below the bound beyond numeric
/// noise (1e-9).
pub fn bound_battery(instances: usize, base_seed: u64) -> Result<BoundBattery, OracleError> {
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for i in 0..instances {
        let (mdp, pi_new, pi_prior, _) = random_instance(base_seed + i as u64);
        let b = trpo_lower_bound(&mdp, &pi_new, &pi_prior)?;
        let slack = b.actual - b.bound;
        min_slack = min_slack.min(slack);
        if slack < -1e-9 {
            violations += 1;
        }
    }
    Ok(BoundBattery { instances, violations, min_slack, pass: violations == 0 })
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

struct CtxBuf {
    action: usize,
    behavior: Vec<f64>,
    pg_advantage: f64,
    advantages: Vec<f64>,
    prior: Vec<f64>,
    q_prior: Vec<f64>,
}

impl CtxBuf {
    fn borrow(&self) -> StepCtx<'_> {
        StepCtx {
            action: self.action,
            behavior: &self.behavior,
            pg_advantage: self.pg_advantage,
            advantages: &self.advantages,
            prior: &self.prior,
            q_prior: &self.q_prior,
        }
    }
}

fn simplex_row(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn random_ctx(actions: usize, rng: &mut ChaCha8Rng) -> CtxBuf {
    CtxBuf {
        action: rng.gen_range(0..actions),
        behavior: simplex_row(actions, rng),
        pg_advantage: rng.gen_range(-1.5..1.5),
        advantages: (0..actions).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        prior: simplex_row(actions, rng),
        q_prior: (0..actions).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// FD-check one policy-loss configuration at `points` random points, skipping
/// draws that land near the loss's importance-ratio kinks (where it is not
/// differentiable and FD is meaningless).
fn check_policy_loss(
    name: &str,
    cfg: &UpdateConfig,
    points: usize,
    tolerance: f64,
    seed: u64,
) -> GradientReport {
    let actions = 3;
    let net = NetSpec::new(1, actions, Arch::Tabular);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    while checked < points {
        let mut params = ParamVector::zeros(net.layout());
        for v in params.block_mut("policy_logits") {
            *v = rng.gen_range(-1.2..1.2);
        }
        let ctx = random_ctx(actions, &mut rng);
        let out = net.forward(&params, 0);
        let probs = &out.probs;
        let rho = probs[ctx.action] / ctx.behavior[ctx.action];
        if (rho - 1.0).abs() < 1e-2
            || (rho - (1.0 - cfg.ppo_epsilon)).abs() < 1e-2
            || (rho - (1.0 + cfg.ppo_epsilon)).abs() < 1e-2
        {
            continue;
        }
        checked += 1;
        // Frozen per-point seed: the sampled-KL path redraws the same actions
        // at every FD evaluation, making the loss deterministic.
        let draw = 10_000 + checked as u64;
        let pl = policy_loss(cfg, &ctx.borrow(), &out.logits, &mut ChaCha8Rng::seed_from_u64(draw))
            .expect("full-support behavior row");
        let mut grad = params.zeros_like();
        net.backward_logits(&params, 0, &out, &pl.dlogits, &mut grad);
        let report = fd_check(
            &params,
            |p| {
                let o = net.forward(p, 0);
                policy_loss(cfg, &ctx.borrow(), &o.logits, &mut ChaCha8Rng::seed_from_u64(draw))
                    .expect("full-support behavior row")
                    .total
            },
            &grad,
            FD_STEP,
            tolerance,
        );
        max_rel_error = max_rel_error.max(report.max_rel_error);
    }
    GradientReport {
        loss: name.to_string(),
        points,
        max_rel_error,
        tolerance,
        pass: max_rel_error < tolerance,
    }
}

/// FD-check the combined model losses (reward, value, policy along an
/// unroll, with some targets absent) at `points` random points.
fn check_model_losses(
    name: &str,
    arch: Arch,
    points: usize,
    tolerance: f64,
    seed: u64,
) -> GradientReport {
    let (num_obs, actions, depth) = (3, 2, 3);
    let net = NetSpec::new(num_obs, actions, arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_error: f64 = 0.0;
    for _ in 0..points {
        let mut params = net.init_params(&mut rng);
        for v in params.data_mut() {
            *v += rng.gen_range(-0.4..0.4);
        }
        let obs = rng.gen_range(0..num_obs);
        let targets = UnrollTargets {
            actions: (0..depth).map(|_| rng.gen_range(0..actions)).collect(),
            rewards: (0..depth).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            values: (0..depth)
                .map(|_| if rng.gen::<f64>() < 0.75 { Some(rng.gen_range(-1.0..1.0)) } else { None })
                .collect(),
            policies: (0..depth)
                .map(|_| {
                    if rng.gen::<f64>() < 0.75 {
                        Some(simplex_row(actions, &mut rng))
                    } else {
                        None
                    }
                })
                .collect(),
        };
        let weights = ModelLossWeights { reward: 1.0, value: 0.25, policy: 3.0 };
        let total = |p: &ParamVector| {
            let root = net.forward(p, obs);
            let l = model_losses(&net, p, obs, &root, &targets, weights, None);
            weights.reward * l.reward + weights.value * l.value + weights.policy * l.policy
        };
        let root = net.forward(&params, obs);
        let mut grad = params.zeros_like();
        model_losses(&net, &params, obs, &root, &targets, weights, Some(&mut grad));
        let report = fd_check(&params, total, &grad, FD_STEP, tolerance);
        max_rel_error = max_rel_error.max(report.max_rel_error);
    }
    GradientReport {
        loss: name.to_string(),
        points,
        max_rel_error,
        tolerance,
        pass: max_rel_error < tolerance,
    }
}

/// FD-check every loss the trainer can emit: all seven policy-loss variants
/// with exact regularizers, the sampled-KL path, and the model losses on
/// both architectures.
pub fn gradient_battery(points: usize, tolerance: f64, base_seed: u64) -> Vec<GradientReport> {
    let mut reports = Vec::new();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let mut cfg = UpdateConfig::for_variant(variant);
        cfg.kl_mode = KlMode::Exact;
        reports.push(check_policy_loss(
            variant.name(),
            &cfg,
            points,
            tolerance,
            base_seed + i as u64,
        ));
    }
    let mut sampled = UpdateConfig::for_variant(Variant::Muesli);
    sampled.kl_mode = KlMode::Samples(8);
    reports.push(check_policy_loss(
        "muesli_sampled_kl",
        &sampled,
        points,
        tolerance,
        base_seed + 100,
    ));
    reports.push(check_model_losses(
        "model_losses_tabular",
        Arch::Tabular,
        points,
        tolerance,
        base_seed + 200,
    ));
    reports.push(check_model_losses(
        "model_losses_mlp",
        Arch::Mlp { hidden: 5 },
        points,
        tolerance,
        base_seed + 201,
    ));
    reports
}
