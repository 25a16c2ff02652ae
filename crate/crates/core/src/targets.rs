//! MPO and clipped-MPO (CMPO) policy targets.
//!
//! The CMPO target tilts a prior by clipped advantages:
//!
//! ```text
//! pi_cmpo(a) = prior(a) exp(clamp(adv(a), -c, c)) / z,   z = sum_a prior(a) exp(clamp(adv(a)))
//! ```
//!
//! Clipping gives a hard guarantee: TV(pi_cmpo, prior) <= tanh(c/2) for every
//! prior and every advantage vector, with the maximum attained by a two-point
//! prior with mass p* = 1 / (1 + e^c) on a saturated +c advantage.
//! [`verify_theorem`] checks that claim numerically; [`z_estimate`] and
//! [`kl_sample_weights`] implement the stochastic estimate of z used when the
//! regularizer is evaluated from prior samples instead of a full enumeration.

fn check_dist(name: &str, p: &[f64]) {
    let sum: f64 = p.iter().sum();
    assert!(
        (sum - 1.0).abs() <= 1e-9 && p.iter().all(|&x| x >= 0.0),
        "{name} must be a distribution (sum {sum})"
    );
}

/// exp(clamp(adv, -clip, clip)) per action.
pub fn clipped_exp_advantages(advantages: &[f64], clip: f64) -> Vec<f64> {
    assert!(clip > 0.0, "clip threshold must be positive");
    advantages.iter().map(|&a| a.clamp(-clip, clip).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct CmpoTarget {
    pub probs: Vec<f64>,
    /// The exact normalizer sum_a prior(a) exp(clamp(adv(a))).
    pub z: f64,
}

/// The clipped-MPO target distribution with its normalizer.
pub fn cmpo_target(prior: &[f64], advantages: &[f64], clip: f64) -> CmpoTarget {
    check_dist("prior", prior);
    assert_eq!(prior.len(), advantages.len(), "prior/advantage length mismatch");
    let tilts = clipped_exp_advantages(advantages, clip);
    let z: f64 = prior.iter().zip(&tilts).map(|(&p, &t)| p * t).sum();
    let probs = prior.iter().zip(&tilts).map(|(&p, &t)| p * t / z).collect();
    CmpoTarget { probs, z }
}

/// The MPO target prior(a) exp(q(a)/temperature) / z (computed with the max
/// subtracted so small temperatures stay finite).
pub fn mpo_target(prior: &[f64], q: &[f64], temperature: f64) -> Vec<f64> {
    check_dist("prior", prior);
    assert_eq!(prior.len(), q.len(), "prior/q length mismatch");
    assert!(temperature > 0.0, "temperature must be positive");
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tilts: Vec<f64> = q.iter().map(|&x| ((x - m) / temperature).exp()).collect();
    let z: f64 = prior.iter().zip(&tilts).map(|(&p, &t)| p * t).sum();
    prior.iter().zip(&tilts).map(|(&p, &t)| p * t / z).collect()
}

/// Total variation distance (1/2) sum_a |p(a) - q(a)|.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<f64>()
}

/// KL divergence sum_a p(a) ln(p(a)/q(a)) with the 0·ln 0 = 0 convention.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 })
        .sum()
}

/// Shannon entropy -sum_a p(a) ln p(a) in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&a| if a > 0.0 { a * a.ln() } else { 0.0 }).sum::<f64>()
}

/// The analytic maximum of TV(pi_cmpo, prior) over all instances: tanh(c/2).
pub fn max_tv_bound(clip: f64) -> f64 {
    (clip / 2.0).tanh()
}

/// Prior mass on the +c action at which the two-action maximum is attained:
/// (1 - e^-c) / (e^c - e^-c) = 1 / (1 + e^c).
pub fn tv_argmax_prior_mass(clip: f64) -> f64 {
    1.0 / (1.0 + clip.exp())
}

#[derive(Debug, Clone, Copy)]
pub struct TheoremReport {
    pub clip: f64,
    pub numeric_max: f64,
    pub analytic_max: f64,
    pub numeric_argmax: f64,
    pub analytic_argmax: f64,
    /// |numeric_max - analytic_max|
    pub max_err: f64,
    /// |numeric_argmax - analytic_argmax|
    pub argmax_err: f64,
    pub pass: bool,
}

/// Maximize TV(cmpo_target([p, 1-p], [+c, -c]), prior) over p numerically
/// (grid at resolution 1e-4, then Newton refinement on the stationarity
/// condition) and compare to the analytic tanh(c/2) maximum at
/// p* = 1/(1 + e^c). Max error tolerance 1e-6, argmax tolerance 1e-5.
pub fn verify_theorem(clip: f64) -> TheoremReport {
    assert!(clip > 0.0, "clip threshold must be positive");
    let tv_at = |p: f64| -> f64 {
        let prior = [p, 1.0 - p];
        let target = cmpo_target(&prior, &[clip, -clip], clip);
        total_variation(&target.probs, &prior)
    };
    let mut best_p = 0.0;
    let mut best = 0.0;
    let resolution = 10_000usize;
    for i in 0..=resolution {
        let p = i as f64 / resolution as f64;
        let tv = tv_at(p);
        if tv > best {
            best = tv;
            best_p = p;
        }
    }
    // Newton refinement. With D(p) = p e^c + (1-p) e^-c, the two-action TV is
    // f(p) = p e^c / D - p, so f'(p) = 1/D^2 - 1 and f''(p) = -2k/D^3 with
    // k = e^c - e^-c.
    let k = clip.exp() - (-clip).exp();
    for _ in 0..3 {
        let d = (-clip).exp() + k * best_p;
        let f1 = 1.0 / (d * d) - 1.0;
        let f2 = -2.0 * k / (d * d * d);
        best_p = (best_p - f1 / f2).clamp(0.0, 1.0);
    }
    best = tv_at(best_p);

    let analytic_max = max_tv_bound(clip);
    let analytic_argmax = tv_argmax_prior_mass(clip);
    let max_err = (best - analytic_max).abs();
    let argmax_err = (best_p - analytic_argmax).abs();
    TheoremReport {
        clip,
        numeric_max: best,
        analytic_max,
        numeric_argmax: best_p,
        analytic_argmax,
        max_err,
        argmax_err,
        pass: max_err < 1e-6 && argmax_err < 1e-5,
    }
}

/// Leave-one-out stochastic estimate of the CMPO normalizer:
/// z~(i) = (z_init + sum_{k != i} terms[k]) / n, where `terms` are the
/// clipped-exp advantage values of the n sampled actions and z_init = 1
/// is the estimate's initial mass.
pub fn z_estimate(terms: &[f64], leave_out: usize, z_init: f64) -> f64 {
    let n = terms.len();
    assert!(leave_out < n, "leave-out index {leave_out} out of range for {n} samples");
    let sum: f64 = terms.iter().enumerate().filter(|&(k, _)| k != leave_out).map(|(_, &t)| t).sum();
    (z_init + sum) / n as f64
}

/// Per-sample weights for the sampled CMPO regularizer: sample k (an action
/// drawn from the prior) weighs its -log pi(a_k) term by
/// (1/n) exp(clamp(adv(a_k))) / z~(k). With zero advantages every weight is
/// 1/n; in expectation the weighted scatter of sampled actions reproduces the
/// CMPO target (exactly so when z~ is replaced by the exact normalizer, see
/// [`kl_sample_weights_exact_z`]).
pub fn kl_sample_weights(
    prior: &[f64],
    advantages: &[f64],
    clip: f64,
    sampled: &[usize],
    z_init: f64,
) -> Vec<f64> {
    check_dist("prior", prior);
    for &a in sampled {
        assert!(a < prior.len() && prior[a] > 0.0, "sampled action {a} has no prior mass");
    }
    let tilts = clipped_exp_advantages(advantages, clip);
    let terms: Vec<f64> = sampled.iter().map(|&a| tilts[a]).collect();
    let n = sampled.len() as f64;
    (0..sampled.len()).map(|k| terms[k] / (n * z_estimate(&terms, k, z_init))).collect()
}

/// Sample weights with the exact normalizer substituted for z~ (the oracle-z
/// estimator): weight_k = (1/n) exp(clamp(adv(a_k))) / z.
pub fn kl_sample_weights_exact_z(
    prior: &[f64],
    advantages: &[f64],
    clip: f64,
    sampled: &[usize],
    z: f64,
) -> Vec<f64> {
    check_dist("prior", prior);
    assert!(z > 0.0);
    let tilts = clipped_exp_advantages(advantages, clip);
    let n = sampled.len() as f64;
    sampled.iter().map(|&a| tilts[a] / (n * z)).collect()
}

/// Exact expectation of the sampled regularizer's scatter
/// E[sum_k weight_k one_hot(a_k)] over n prior draws, by enumerating the
/// multiset distribution of the n-1 leave-one-out samples (multinomial
/// weights). The n -> infinity limit is the CMPO target; the distance from it
/// is the estimator's bias at sample size n.
pub fn expected_sampled_policy(
    prior: &[f64],
    advantages: &[f64],
    clip: f64,
    n: usize,
    z_init: f64,
) -> Vec<f64> {
    check_dist("prior", prior);
    assert!(n >= 1);
    let tilts = clipped_exp_advantages(advantages, clip);
    let actions = prior.len();
    // E_S[ n / (z_init + S) ] where S is the tilt-sum of n-1 iid prior draws.
    let mut inv_expect = 0.0;
    let mut counts = vec![0usize; actions];
    let mut log_fact = vec![0.0f64; n];
    for i in 1..n {
        log_fact[i] = log_fact[i - 1] + (i as f64).ln();
    }
    fn walk(
        action: usize,
        remaining: usize,
        counts: &mut [usize],
        prior: &[f64],
        tilts: &[f64],
        log_fact: &[f64],
        total: usize,
        inv_expect: &mut f64,
        n: usize,
        z_init: f64,
    ) {
        if action == counts.len() - 1 {
            counts[action] = remaining;
            let mut log_p = log_fact[total];
            let mut s = 0.0;
            for (a, &cnt) in counts.iter().enumerate() {
                if cnt > 0 && prior[a] == 0.0 {
                    return;
                }
                log_p -= log_fact[cnt];
                if cnt > 0 {
                    log_p += cnt as f64 * prior[a].ln();
                }
                s += cnt as f64 * tilts[a];
            }
            *inv_expect += log_p.exp() * (n as f64) / (z_init + s);
            return;
        }
        for c in 0..=remaining {
            counts[action] = c;
            walk(action + 1, remaining - c, counts, prior, tilts, log_fact, total, inv_expect, n, z_init);
        }
    }
    walk(0, n - 1, &mut counts, prior, &tilts, &log_fact, n - 1, &mut inv_expect, n, z_init);
    // E[sum_k w_k e_{a_k}] = sum_a prior(a) tilt(a) E_S[1/((z_init + S)/n)] e_a.
    (0..actions).map(|a| prior[a] * tilts[a] * inv_expect).collect()
}
