//! The policy-loss family: the clipped-MPO regularized policy gradient
//! (Muesli) and its baselines, all evaluated at one fragment position.
//!
//! Every variant produces a scalar loss plus its exact gradient with respect
//! to the policy logits at the current observation; the caller maps that
//! adjoint through the network. Conventions:
//!
//! - The sampled policy-gradient term uses the taken action with a one-sided
//!   clipped importance weight: loss −min(1, ρ)·â, ρ = π(a|s)/π_b(a|s). The
//!   gradient flows through ρ on the unclipped side (ρ ≤ 1) and is zero when
//!   the clip is active, so freshly on-policy data (ρ = 1 exactly) gets the
//!   standard policy-gradient direction.
//! - Distillation terms are KL(target ‖ π) with the target held fixed, whose
//!   logit gradient is π − target. The sampled form draws N actions from the
//!   prior and weighs each −ln π(a_k) by the regularized-target tilt with a
//!   leave-one-out normalizer estimate; its reported value is the weighted
//!   cross-entropy (the KL minus an entropy constant of the implicit target).
//! - Entropy bonuses subtract weight·H(π) from the loss.
//!
//! The per-variant model-policy distillation targets (applied along unrolls
//! by the model module) are exposed through [`distill_target`].

use crate::targets::{
    cmpo_target, entropy, kl_div, kl_sample_weights, mpo_target, total_variation,
};
use crate::approx::softmax;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UpdateError {
    #[error("behavior probability {prob} for the taken action; the importance weight needs a positive denominator")]
    ZeroBehaviorProb { prob: f64 },
}

/// Policy-update variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Clipped-IS policy gradient + λ·KL(π_CMPO ‖ π) + model distillation.
    Muesli,
    /// Clipped-IS policy gradient with an entropy bonus.
    Pg,
    /// Policy gradient plus a KL(π_b ‖ π) trust-region penalty.
    PgTrpo,
    /// Clipped-surrogate objective.
    Ppo,
    /// Distillation toward the exponentiated-Q target, no gradient term.
    MpoIndirect,
    /// Policy gradient plus a λ·KL(π ‖ π_prior) penalty (reversed direction).
    MpoDirect,
    /// Distillation toward the clipped-advantage target alone.
    CmpoIndirect,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Muesli,
        Variant::Pg,
        Variant::PgTrpo,
        Variant::Ppo,
        Variant::MpoIndirect,
        Variant::MpoDirect,
        Variant::CmpoIndirect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Muesli => "muesli",
            Variant::Pg => "pg",
            Variant::PgTrpo => "pg_trpo",
            Variant::Ppo => "ppo",
            Variant::MpoIndirect => "mpo_indirect",
            Variant::MpoDirect => "mpo_direct",
            Variant::CmpoIndirect => "cmpo_indirect",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// How the regularizer KL is evaluated for the Muesli variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    /// Enumerate all actions against the exact target.
    Exact,
    /// Draw this many actions from the prior (leave-one-out normalizer).
    Samples(usize),
}

/// Which distillation target a variant trains its model-policy head toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillTargetKind {
    Cmpo,
    Mpo,
}

#[derive(Debug, Clone)]
pub struct UpdateConfig {
    pub variant: Variant,
    /// Weight of the Muesli regularizer KL.
    pub lambda_cmpo: f64,
    /// Advantage clip threshold in the regularized target.
    pub clip_c: f64,
    /// Exact or sampled regularizer evaluation (Muesli only; the indirect
    /// variants always use the exact target).
    pub kl_mode: KlMode,
    pub entropy_weight: f64,
    /// Weight of the pg_trpo trust-region penalty.
    pub trpo_weight: f64,
    pub ppo_epsilon: f64,
    /// MPO temperature (indirect target) and penalty weight (direct).
    pub lambda_mpo: f64,
    /// Multiplier the trainer applies to the policy loss (root term plus
    /// model-policy distillation) when composing the total loss.
    pub policy_loss_weight: f64,
}

impl UpdateConfig {
    /// Per-variant defaults; entropy weights follow the baseline family's
    /// standard settings (0.003 for plain policy gradient, 0.0003 for the
    /// trust-region and clipped-surrogate variants, none elsewhere).
    pub fn for_variant(variant: Variant) -> UpdateConfig {
        let entropy_weight = match variant {
            Variant::Pg => 0.003,
            Variant::PgTrpo | Variant::Ppo => 0.0003,
            _ => 0.0,
        };
        UpdateConfig {
            variant,
            lambda_cmpo: 1.0,
            clip_c: 1.0,
            kl_mode: KlMode::Samples(16),
            entropy_weight,
            trpo_weight: 0.01,
            ppo_epsilon: 0.5,
            lambda_mpo: 1.0,
            policy_loss_weight: 3.0,
        }
    }
}

/// Everything the policy loss needs at one fragment position. Advantages are
/// already normalized; `q_prior` stays in reward units because it feeds the
/// temperature-scaled exponentiated-Q target.
#[derive(Debug, Clone)]
pub struct StepCtx<'a> {
    /// Taken action.
    pub action: usize,
    /// Behavior policy row recorded when the step was generated.
    pub behavior: &'a [f64],
    /// Normalized return-minus-baseline advantage of the taken action.
    pub pg_advantage: f64,
    /// Normalized per-action advantages q̂_prior − v̂_prior (for the
    /// clipped-advantage target).
    pub advantages: &'a [f64],
    /// Target-network policy π_prior(·|s): regularization anchor and
    /// sampling prior.
    pub prior: &'a [f64],
    /// Target-network action values (for the exponentiated-Q target).
    pub q_prior: &'a [f64],
}

/// One evaluated policy loss: the combined scalar, its components, and the
/// gradient with respect to the policy logits.
#[derive(Debug, Clone)]
pub struct PolicyLoss {
    /// pg term + weighted regularizer − entropy bonus, as minimized.
    pub total: f64,
    /// Value of −min(1, ρ)·â (0 for the purely indirect variants).
    pub pg_term: f64,
    /// Unweighted regularizer value: KL or sampled cross-entropy (0 when the
    /// variant has none).
    pub regularizer: f64,
    /// H(π) at this position.
    pub entropy: f64,
    pub dlogits: Vec<f64>,
}

fn check_ctx(ctx: &StepCtx, actions: usize) {
    assert_eq!(ctx.behavior.len(), actions, "behavior row width");
    assert_eq!(ctx.advantages.len(), actions, "advantage row width");
    assert_eq!(ctx.prior.len(), actions, "prior row width");
    assert_eq!(ctx.q_prior.len(), actions, "q row width");
    assert!(ctx.action < actions, "taken action out of range");
}

/// loss −min(1, ρ)·â; gradient flows on the unclipped side ρ ≤ 1.
fn clipped_is_pg(
    ctx: &StepCtx,
    probs: &[f64],
    dlogits: &mut [f64],
) -> Result<f64, UpdateError> {
    let mu = ctx.behavior[ctx.action];
    if !(mu > 0.0) {
        return Err(UpdateError::ZeroBehaviorProb { prob: mu });
    }
    let rho = probs[ctx.action] / mu;
    let loss = -rho.min(1.0) * ctx.pg_advantage;
    if rho <= 1.0 {
        let coeff = -ctx.pg_advantage * rho;
        for (j, d) in dlogits.iter_mut().enumerate() {
            let indicator = if j == ctx.action { 1.0 } else { 0.0 };
            *d += coeff * (indicator - probs[j]);
        }
    }
    Ok(loss)
}

/// loss −w·H(π); d/dℓ_j = w·π_j(ln π_j + H).
fn entropy_bonus(weight: f64, probs: &[f64], dlogits: &mut [f64]) -> f64 {
    let h = entropy(probs);
    if weight != 0.0 {
        for (d, &p) in dlogits.iter_mut().zip(probs) {
            if p > 0.0 {
                *d += weight * p * (p.ln() + h);
            }
        }
    }
    h
}

/// loss KL(target ‖ π) with the target fixed; d/dℓ = π − target.
fn distill_exact(target: &[f64], probs: &[f64], weight: f64, dlogits: &mut [f64]) -> f64 {
    for ((d, &p), &t) in dlogits.iter_mut().zip(probs).zip(target) {
        *d += weight * (p - t);
    }
    kl_div(target, probs)
}

/// Sampled regularizer: actions drawn from the prior, each −ln π(a_k) weighed
/// by the tilt with a leave-one-out normalizer. Returns the weighted
/// cross-entropy; d/dℓ = Σ_k w_k (π − e_{a_k}).
fn distill_sampled<R: Rng>(
    ctx: &StepCtx,
    clip: f64,
    n: usize,
    probs: &[f64],
    weight: f64,
    rng: &mut R,
    dlogits: &mut [f64],
) -> f64 {
    assert!(n > 0, "sample count must be positive");
    let dist = WeightedIndex::new(ctx.prior).expect("prior is a distribution");
    let sampled: Vec<usize> = (0..n).map(|_| dist.sample(rng)).collect();
    let weights = kl_sample_weights(ctx.prior, ctx.advantages, clip, &sampled, 1.0);
    let mut ce = 0.0;
    let w_total: f64 = weights.iter().sum();
    for (d, &p) in dlogits.iter_mut().zip(probs) {
        *d += weight * w_total * p;
    }
    for (&a, &w) in sampled.iter().zip(&weights) {
        ce -= w * probs[a].ln();
        dlogits[a] -= weight * w;
    }
    ce
}

/// loss KL(π ‖ prior); d/dℓ_j = π_j(ln(π_j/prior_j) − KL).
fn reverse_kl_penalty(prior: &[f64], probs: &[f64], weight: f64, dlogits: &mut [f64]) -> f64 {
    let kl = kl_div(probs, prior);
    for ((d, &p), &pr) in dlogits.iter_mut().zip(probs).zip(prior) {
        if p > 0.0 {
            *d += weight * p * ((p / pr).ln() - kl);
        }
    }
    kl
}

/// loss −min(ρ·â, clip(ρ, 1±ε)·â); the gradient follows the unclipped branch
/// when it attains the min (ties included), and is zero when the clipped
/// branch is strictly smaller.
fn ppo_surrogate(
    ctx: &StepCtx,
    epsilon: f64,
    probs: &[f64],
    dlogits: &mut [f64],
) -> Result<f64, UpdateError> {
    let mu = ctx.behavior[ctx.action];
    if !(mu > 0.0) {
        return Err(UpdateError::ZeroBehaviorProb { prob: mu });
    }
    let a_hat = ctx.pg_advantage;
    let rho = probs[ctx.action] / mu;
    let unclipped = rho * a_hat;
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * a_hat;
    let loss = -unclipped.min(clipped);
    if unclipped <= clipped {
        let coeff = -a_hat * rho;
        for (j, d) in dlogits.iter_mut().enumerate() {
            let indicator = if j == ctx.action { 1.0 } else { 0.0 };
            *d += coeff * (indicator - probs[j]);
        }
    }
    Ok(loss)
}

/// The distillation target the variant's model-policy head trains toward
/// (also the root target of the indirect variants), or `None` for variants
/// without one.
pub fn distill_target_kind(variant: Variant) -> Option<DistillTargetKind> {
    match variant {
        Variant::Muesli | Variant::CmpoIndirect => Some(DistillTargetKind::Cmpo),
        Variant::MpoIndirect => Some(DistillTargetKind::Mpo),
        _ => None,
    }
}

/// Build the variant's distillation target at an observation from the prior
/// row, normalized advantages, and raw action values.
pub fn distill_target(
    cfg: &UpdateConfig,
    prior: &[f64],
    advantages: &[f64],
    q_prior: &[f64],
) -> Option<Vec<f64>> {
    match distill_target_kind(cfg.variant)? {
        DistillTargetKind::Cmpo => Some(cmpo_target(prior, advantages, cfg.clip_c).probs),
        DistillTargetKind::Mpo => Some(mpo_target(prior, q_prior, cfg.lambda_mpo)),
    }
}

/// TV(distillation target, prior) at one observation — the quantity whose
/// analytic bound is tanh(c/2) for the clipped-advantage target.
pub fn target_prior_tv(cfg: &UpdateConfig, prior: &[f64], advantages: &[f64], q_prior: &[f64]) -> Option<f64> {
    distill_target(cfg, prior, advantages, q_prior).map(|t| total_variation(&t, prior))
}

/// Evaluate the configured variant's policy loss at one position. `rng` is
/// consulted only by the Muesli variant in sampled-KL mode.
pub fn policy_loss<R: Rng>(
    cfg: &UpdateConfig,
    ctx: &StepCtx,
    logits: &[f64],
    rng: &mut R,
) -> Result<PolicyLoss, UpdateError> {
    check_ctx(ctx, logits.len());
    let probs = softmax(logits);
    let mut dlogits = vec![0.0; logits.len()];
    let mut pg_term = 0.0;
    let mut regularizer = 0.0;
    let mut total;

    match cfg.variant {
        Variant::Muesli => {
            pg_term = clipped_is_pg(ctx, &probs, &mut dlogits)?;
            regularizer = match cfg.kl_mode {
                KlMode::Exact => {
                    let t = cmpo_target(ctx.prior, ctx.advantages, cfg.clip_c).probs;
                    distill_exact(&t, &probs, cfg.lambda_cmpo, &mut dlogits)
                }
                KlMode::Samples(n) => distill_sampled(
                    ctx,
                    cfg.clip_c,
                    n,
                    &probs,
                    cfg.lambda_cmpo,
                    rng,
                    &mut dlogits,
                ),
            };
            total = pg_term + cfg.lambda_cmpo * regularizer;
        }
        Variant::Pg => {
            pg_term = clipped_is_pg(ctx, &probs, &mut dlogits)?;
            total = pg_term;
        }
        Variant::PgTrpo => {
            pg_term = clipped_is_pg(ctx, &probs, &mut dlogits)?;
            regularizer = distill_exact(ctx.behavior, &probs, cfg.trpo_weight, &mut dlogits);
            total = pg_term + cfg.trpo_weight * regularizer;
        }
        Variant::Ppo => {
            pg_term = ppo_surrogate(ctx, cfg.ppo_epsilon, &probs, &mut dlogits)?;
            total = pg_term;
        }
        Variant::MpoIndirect => {
            let t = mpo_target(ctx.prior, ctx.q_prior, cfg.lambda_mpo);
            regularizer = distill_exact(&t, &probs, 1.0, &mut dlogits);
            total = regularizer;
        }
        Variant::MpoDirect => {
            pg_term = clipped_is_pg(ctx, &probs, &mut dlogits)?;
            regularizer = reverse_kl_penalty(ctx.prior, &probs, cfg.lambda_mpo, &mut dlogits);
            total = pg_term + cfg.lambda_mpo * regularizer;
        }
        Variant::CmpoIndirect => {
            let t = cmpo_target(ctx.prior, ctx.advantages, cfg.clip_c).probs;
            regularizer = distill_exact(&t, &probs, 1.0, &mut dlogits);
            total = regularizer;
        }
    }

    let h = entropy_bonus(cfg.entropy_weight, &probs, &mut dlogits);
    total -= cfg.entropy_weight * h;

    Ok(PolicyLoss { total, pg_term, regularizer, entropy: h, dlogits })
}
