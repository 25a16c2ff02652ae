//! Multi-step return estimators (Retrace and V-trace) and the streaming
//! advantage normalizer.
//!
//! Both estimators operate on one trajectory fragment of length `T`:
//! per-step rewards, discounts (zero when the step entered a terminal state),
//! chosen-action behavior probabilities, full target-policy rows, and the
//! critic quantities supplied by the caller. Fragments that were cut mid
//! episode carry a bootstrap value for the state after the final step;
//! terminated fragments bootstrap with zero.
//!
//! Retrace forms G_t = q̂(s_t, a_t) + Σ_{j≥t} (Π_{t<i≤j} γ_{i-1} c_i) δ_j with
//! δ_j = r_j + γ_j v̄_{j+1} − q̂(s_j, a_j) and truncated importance weights
//! c_i = λ·min(1, π(a_i|s_i)/μ(a_i|s_i)). The expected next value
//! v̄_{j+1} = E_{A∼π}[q̂(s_{j+1}, A)] is enumerated exactly by default or
//! estimated from samples. When q̂ equals the true q_π of the policy used in
//! the ratios, every δ has zero conditional mean, so E[G_t] = q_π(s_t, a_t)
//! for any full-support behavior policy and any truncation point.
//!
//! V-trace corrects state-value estimates instead:
//! v_t = V_t + δ_t + γ_t c_t (v_{t+1} − V_{t+1}), δ_t = ρ_t(r_t + γ_t V_{t+1} − V_t),
//! with ρ_t, c_t the importance ratios clipped at ρ̄ and c̄; the action-value
//! target is G(s_t,a_t) = r_t + γ_t v_{t+1}.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReturnsError {
    #[error("behavior probability at step {step} is {prob}; importance ratios need positive behavior probabilities")]
    ZeroBehaviorProb { step: usize, prob: f64 },
    #[error("policy row at step {step} is not a distribution")]
    BadPolicyRow { step: usize },
}

/// How E_{A∼π}[q̂(s, A)] is evaluated inside Retrace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectationMode {
    /// Enumerate every action (exact).
    Exact,
    /// Average q̂ over this many actions sampled from π.
    Samples(usize),
}

/// Return estimate for one fragment position: the action-value target `g`
/// and its advantage `adv = g - baseline` against the caller's state-value
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnEstimate {
    pub g: f64,
    pub adv: f64,
}

/// Inputs shared by both estimators; slices are indexed by fragment position.
#[derive(Debug, Clone)]
pub struct FragmentReturns<'a> {
    /// r_t.
    pub rewards: &'a [f64],
    /// γ_t: the MDP discount, or 0 when step t entered a terminal state.
    pub discounts: &'a [f64],
    /// a_t.
    pub actions: &'a [usize],
    /// μ(a_t | s_t): probability the behavior policy gave the chosen action.
    pub behavior: &'a [f64],
    /// π(· | s_t): full target-policy rows.
    pub pi: &'a [Vec<f64>],
    /// State-value baselines v̂(s_t), used for the advantage outputs and, in
    /// V-trace, as the V_t being corrected.
    pub values: &'a [f64],
    /// Value of the state after the final step for fragments cut mid-episode;
    /// `None` means the fragment ended in a terminal state (value zero).
    pub bootstrap_value: Option<f64>,
}

impl FragmentReturns<'_> {
    fn validate(&self) -> Result<usize, ReturnsError> {
        let t = self.rewards.len();
        assert!(t > 0, "empty fragment");
        assert_eq!(self.discounts.len(), t, "discounts length");
        assert_eq!(self.actions.len(), t, "actions length");
        assert_eq!(self.behavior.len(), t, "behavior length");
        assert_eq!(self.pi.len(), t, "policy rows length");
        assert_eq!(self.values.len(), t, "values length");
        for (step, &b) in self.behavior.iter().enumerate() {
            if !(b > 0.0) {
                return Err(ReturnsError::ZeroBehaviorProb { step, prob: b });
            }
        }
        for (step, row) in self.pi.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if !(s - 1.0).abs().le(&1e-6) || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(ReturnsError::BadPolicyRow { step });
            }
        }
        Ok(t)
    }

    fn terminal_value(&self) -> f64 {
        self.bootstrap_value.unwrap_or(0.0)
    }
}

fn expected_q<R: Rng>(
    pi: &[f64],
    q_row: &[f64],
    mode: ExpectationMode,
    rng: &mut R,
) -> f64 {
    match mode {
        ExpectationMode::Exact => pi.iter().zip(q_row).map(|(&p, &q)| p * q).sum(),
        ExpectationMode::Samples(n) => {
            assert!(n > 0, "sample count must be positive");
            let dist = WeightedIndex::new(pi).expect("policy row is a distribution");
            (0..n).map(|_| q_row[dist.sample(rng)]).sum::<f64>() / n as f64
        }
    }
}

/// Retrace action-value targets for each fragment position.
///
/// `q_hat[t]` holds q̂(s_t, ·) rows (typically from the target network's
/// one-step model predictions). `lambda` scales the truncated importance
/// weights c_i = λ·min(1, π/μ). `mode` picks exact enumeration or sampling
/// for the expected next-state value; `rng` is only consulted when sampling.
pub fn retrace<R: Rng>(
    frag: &FragmentReturns,
    q_hat: &[Vec<f64>],
    lambda: f64,
    mode: ExpectationMode,
    rng: &mut R,
) -> Result<Vec<ReturnEstimate>, ReturnsError> {
    let t_len = frag.validate()?;
    assert_eq!(q_hat.len(), t_len, "q rows length");
    assert!((0.0..=1.0).contains(&lambda), "lambda must be in [0, 1]");

    // Expected value of the state after step j under π (bootstrap at the end).
    let mut vbar_next = vec![0.0; t_len];
    for j in 0..t_len {
        vbar_next[j] = if j + 1 < t_len {
            expected_q(&frag.pi[j + 1], &q_hat[j + 1], mode, rng)
        } else {
            frag.terminal_value()
        };
    }

    let q_taken: Vec<f64> =
        (0..t_len).map(|j| q_hat[j][frag.actions[j]]).collect();
    let delta: Vec<f64> = (0..t_len)
        .map(|j| frag.rewards[j] + frag.discounts[j] * vbar_next[j] - q_taken[j])
        .collect();

    // Backward recursion: corr_j = δ_j + γ_j c_{j+1} corr_{j+1}.
    let mut correction = vec![0.0; t_len];
    let mut next = 0.0;
    for j in (0..t_len).rev() {
        let c_next = if j + 1 < t_len {
            lambda * (frag.pi[j + 1][frag.actions[j + 1]] / frag.behavior[j + 1]).min(1.0)
        } else {
            0.0
        };
        correction[j] = delta[j] + frag.discounts[j] * c_next * next;
        next = correction[j];
    }

    Ok((0..t_len)
        .map(|j| {
            let g = q_taken[j] + correction[j];
            ReturnEstimate { g, adv: g - frag.values[j] }
        })
        .collect())
}

/// V-trace action-value targets for each fragment position.
///
/// `frag.values` are the V_t being corrected; `rho_bar` and `c_bar` clip the
/// importance ratios (both default to 1 in this codebase's configs).
pub fn vtrace(
    frag: &FragmentReturns,
    rho_bar: f64,
    c_bar: f64,
) -> Result<Vec<ReturnEstimate>, ReturnsError> {
    let t_len = frag.validate()?;
    assert!(rho_bar > 0.0 && c_bar > 0.0, "ratio clips must be positive");

    // v_t computed backward; v_{T} is the terminal/bootstrap value.
    let mut v = vec![0.0; t_len + 1];
    v[t_len] = frag.terminal_value();
    for t in (0..t_len).rev() {
        let ratio = frag.pi[t][frag.actions[t]] / frag.behavior[t];
        let rho = ratio.min(rho_bar);
        let c = ratio.min(c_bar);
        let value_next = if t + 1 < t_len { frag.values[t + 1] } else { frag.terminal_value() };
        let delta = rho * (frag.rewards[t] + frag.discounts[t] * value_next - frag.values[t]);
        v[t] = frag.values[t] + delta + frag.discounts[t] * c * (v[t + 1] - value_next);
    }

    Ok((0..t_len)
        .map(|t| {
            let g = frag.rewards[t] + frag.discounts[t] * v[t + 1];
            ReturnEstimate { g, adv: g - frag.values[t] }
        })
        .collect())
}

/// Default decay for the advantage-variance tracker.
pub const ADV_NORM_BETA: f64 = 0.99;
/// Default epsilon inside the normalizer's square root.
pub const ADV_NORM_EPS: f64 = 1e-12;

/// Debiased exponential moving average of mean squared advantages.
///
/// Each batch first folds its mean squared advantage into the tracker
/// (`update`), then divides its advantages by the tracked scale (`std`):
/// update-then-normalize. The bias correction divides by 1 − βⁿ, so after the
/// first update the corrected variance equals that batch's mean square
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvNormState {
    var: f64,
    beta: f64,
    beta_product: f64,
    eps: f64,
    updates: u64,
}

impl AdvNormState {
    pub fn new(beta: f64, eps: f64) -> AdvNormState {
        assert!((0.0..1.0).contains(&beta), "decay must be in [0, 1)");
        assert!(eps >= 0.0);
        AdvNormState { var: 0.0, beta, beta_product: 1.0, eps, updates: 0 }
    }

    pub fn update(&mut self, batch_mean_sq: f64) {
        assert!(batch_mean_sq >= 0.0, "mean squared advantage cannot be negative");
        self.var = self.beta * self.var + (1.0 - self.beta) * batch_mean_sq;
        self.beta_product *= self.beta;
        self.updates += 1;
    }

    pub fn corrected_var(&self) -> f64 {
        assert!(self.updates > 0, "normalizer queried before any update");
        self.var / (1.0 - self.beta_product)
    }

    pub fn std(&self) -> f64 {
        (self.corrected_var() + self.eps).sqrt()
    }

    pub fn normalize(&self, adv: f64) -> f64 {
        adv / self.std()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Raw internal state for checkpointing: (var, beta_product, updates).
    pub fn raw_state(&self) -> (f64, f64, u64) {
        (self.var, self.beta_product, self.updates)
    }

    pub fn restore(beta: f64, eps: f64, raw: (f64, f64, u64)) -> AdvNormState {
        AdvNormState { var: raw.0, beta, beta_product: raw.1, eps, updates: raw.2 }
    }
}
