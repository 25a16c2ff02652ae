//! Action-conditioned latent model with reward, value, and policy heads.
//!
//! The model advances a deterministic hidden state with a single tanh layer:
//! u_k = W_d·[g_{k-1}; onehot(a_k)] + b_d, g_k = tanh(u_k), rooted at the
//! network's representation g_0 of the current observation. Linear heads read
//! r̂_k, v̂_k, and policy logits off each g_k. The model is trained for
//! value equivalence — its predictions must match reward/return/policy
//! targets along observed action sequences — rather than for reconstructing
//! observations, and it supplies the one-step action values
//! q̂(s, a) = r̂_1 + γ·v̂_1 that the regularized policy targets are built from.
//!
//! Losses per unroll step: squared error ½(r̂-r)² and ½(v̂-G)², and
//! KL(target ‖ π̂) for the policy head. A fragment position near the end of a
//! fragment has fewer targets (the unroll is cut at the fragment boundary and
//! targets beyond the last in-fragment observation are absent); each loss
//! averages over the terms actually present. Backpropagation through the
//! unroll is hand-derived and checked by finite differences.

use crate::approx::{dot, matvec_acc, outer_acc, softmax, NetOutput, NetSpec, ParamVector};
use crate::targets::kl_div;

/// Cached forward pass of a `K`-step unroll.
#[derive(Debug, Clone)]
pub struct Unroll {
    /// g_0..g_K; g_0 is the root representation.
    pub hidden: Vec<Vec<f64>>,
    /// r̂_1..r̂_K.
    pub rewards: Vec<f64>,
    /// v̂_1..v̂_K.
    pub values: Vec<f64>,
    /// Policy-head logits at steps 1..K.
    pub logits: Vec<Vec<f64>>,
    actions: Vec<usize>,
}

impl Unroll {
    pub fn depth(&self) -> usize {
        self.actions.len()
    }
}

fn dyn_step(net: &NetSpec, params: &ParamVector, g: &[f64], action: usize) -> Vec<f64> {
    let h = net.repr_dim();
    let a_dim = net.num_actions();
    assert!(action < a_dim, "action {action} out of range");
    let w = params.block("dyn_w");
    let b = params.block("dyn_b");
    let cols = h + a_dim;
    (0..h)
        .map(|i| {
            let row = &w[i * cols..(i + 1) * cols];
            (dot(&row[..h], g) + row[h + action] + b[i]).tanh()
        })
        .collect()
}

fn head_scalar(params: &ParamVector, w_name: &str, b_name: &str, g: &[f64]) -> f64 {
    dot(params.block(w_name), g) + params.block(b_name)[0]
}

/// Unroll the model from a root representation along an action sequence.
pub fn unroll(
    net: &NetSpec,
    params: &ParamVector,
    root_hidden: &[f64],
    actions: &[usize],
) -> Unroll {
    assert_eq!(root_hidden.len(), net.repr_dim(), "root representation width");
    let mut hidden = vec![root_hidden.to_vec()];
    let mut rewards = Vec::with_capacity(actions.len());
    let mut values = Vec::with_capacity(actions.len());
    let mut logits = Vec::with_capacity(actions.len());
    for &a in actions {
        let g = dyn_step(net, params, hidden.last().unwrap(), a);
        rewards.push(head_scalar(params, "model_reward_w", "model_reward_b", &g));
        values.push(head_scalar(params, "model_value_w", "model_value_b", &g));
        let mut l = params.block("model_policy_b").to_vec();
        matvec_acc(params.block("model_policy_w"), &g, net.num_actions(), net.repr_dim(), &mut l);
        logits.push(l);
        hidden.push(g);
    }
    Unroll { hidden, rewards, values, logits, actions: actions.to_vec() }
}

/// One-step model action values q̂(s, a) = r̂_1 + γ·v̂_1 for every action.
pub fn one_step_q(
    net: &NetSpec,
    params: &ParamVector,
    root_hidden: &[f64],
    discount: f64,
) -> Vec<f64> {
    (0..net.num_actions())
        .map(|a| {
            let g = dyn_step(net, params, root_hidden, a);
            head_scalar(params, "model_reward_w", "model_reward_b", &g)
                + discount * head_scalar(params, "model_value_w", "model_value_b", &g)
        })
        .collect()
}

/// Targets for one fragment position's unroll; all slices share the unroll
/// depth. Reward targets are always present; value and policy targets are
/// absent (`None`) where the fragment boundary cuts them off.
#[derive(Debug, Clone)]
pub struct UnrollTargets {
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub policies: Vec<Option<Vec<f64>>>,
}

/// Gradient weights applied to the three model losses.
#[derive(Debug, Clone, Copy)]
pub struct ModelLossWeights {
    pub reward: f64,
    pub value: f64,
    pub policy: f64,
}

/// Unweighted per-position model losses (each already averaged over the
/// targets present in the unroll) and the term counts that formed them.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelLosses {
    pub reward: f64,
    pub value: f64,
    pub policy: f64,
    pub reward_terms: usize,
    pub value_terms: usize,
    pub policy_terms: usize,
}

/// Compute the model losses for one fragment position and, when `grad` is
/// given, accumulate the weighted gradient (including backpropagation through
/// the unroll into the encoder). Loss values returned are unweighted.
pub fn model_losses(
    net: &NetSpec,
    params: &ParamVector,
    obs: usize,
    root: &NetOutput,
    targets: &UnrollTargets,
    weights: ModelLossWeights,
    mut grad: Option<&mut ParamVector>,
) -> ModelLosses {
    let k = targets.actions.len();
    assert_eq!(targets.rewards.len(), k, "reward targets length");
    assert_eq!(targets.values.len(), k, "value targets length");
    assert_eq!(targets.policies.len(), k, "policy targets length");
    if k == 0 {
        return ModelLosses::default();
    }
    let un = unroll(net, params, &root.hidden, &targets.actions);
    let n_r = k;
    let n_v = targets.values.iter().filter(|v| v.is_some()).count();
    let n_m = targets.policies.iter().filter(|p| p.is_some()).count();

    let mut losses = ModelLosses {
        reward: 0.0,
        value: 0.0,
        policy: 0.0,
        reward_terms: n_r,
        value_terms: n_v,
        policy_terms: n_m,
    };
    // Per-step head adjoints of the weighted total loss.
    let mut dreward = vec![0.0; k];
    let mut dvalue = vec![0.0; k];
    let mut dlogits: Vec<Vec<f64>> = vec![vec![0.0; net.num_actions()]; k];

    for step in 0..k {
        let err_r = un.rewards[step] - targets.rewards[step];
        losses.reward += 0.5 * err_r * err_r / n_r as f64;
        dreward[step] = weights.reward * err_r / n_r as f64;
        if let Some(g_target) = targets.values[step] {
            let err_v = un.values[step] - g_target;
            losses.value += 0.5 * err_v * err_v / n_v as f64;
            dvalue[step] = weights.value * err_v / n_v as f64;
        }
        if let Some(ref t) = targets.policies[step] {
            assert_eq!(t.len(), net.num_actions(), "policy target width");
            let probs = softmax(&un.logits[step]);
            losses.policy += kl_div(t, &probs) / n_m as f64;
            for (d, (&p, &ti)) in dlogits[step].iter_mut().zip(probs.iter().zip(t)) {
                *d = weights.policy * (p - ti) / n_m as f64;
            }
        }
    }

    if let Some(grad) = grad.as_deref_mut() {
        unroll_backward(net, params, obs, root, &un, &dreward, &dvalue, &dlogits, grad);
    }
    losses
}

/// Backpropagate head adjoints through the unroll, accumulating into `grad`.
/// `dreward[k]`, `dvalue[k]`, `dlogits[k]` are d(loss)/d(head output) at
/// unroll step k+1; gradient reaching g_0 continues into the encoder.
#[allow(clippy::too_many_arguments)]
pub fn unroll_backward(
    net: &NetSpec,
    params: &ParamVector,
    obs: usize,
    root: &NetOutput,
    un: &Unroll,
    dreward: &[f64],
    dvalue: &[f64],
    dlogits: &[Vec<f64>],
    grad: &mut ParamVector,
) {
    let k = un.depth();
    assert_eq!(dreward.len(), k);
    assert_eq!(dvalue.len(), k);
    assert_eq!(dlogits.len(), k);
    let h = net.repr_dim();
    let a_dim = net.num_actions();
    let cols = h + a_dim;

    let mut dg = vec![0.0; h];
    for step in (0..k).rev() {
        let g = &un.hidden[step + 1];
        // Heads at this step.
        if dreward[step] != 0.0 {
            for (gw, &x) in grad.block_mut("model_reward_w").iter_mut().zip(g) {
                *gw += dreward[step] * x;
            }
            grad.block_mut("model_reward_b")[0] += dreward[step];
            for (d, &w) in dg.iter_mut().zip(params.block("model_reward_w")) {
                *d += dreward[step] * w;
            }
        }
        if dvalue[step] != 0.0 {
            for (gw, &x) in grad.block_mut("model_value_w").iter_mut().zip(g) {
                *gw += dvalue[step] * x;
            }
            grad.block_mut("model_value_b")[0] += dvalue[step];
            for (d, &w) in dg.iter_mut().zip(params.block("model_value_w")) {
                *d += dvalue[step] * w;
            }
        }
        if dlogits[step].iter().any(|&d| d != 0.0) {
            outer_acc(&dlogits[step], g, grad.block_mut("model_policy_w"));
            for (gb, &d) in grad.block_mut("model_policy_b").iter_mut().zip(&dlogits[step]) {
                *gb += d;
            }
            let w = params.block("model_policy_w");
            for (a, &d) in dlogits[step].iter().enumerate() {
                if d != 0.0 {
                    for j in 0..h {
                        dg[j] += d * w[a * h + j];
                    }
                }
            }
        }
        // Through the tanh dynamics into W_d, b_d, and the previous state.
        let du: Vec<f64> = dg.iter().zip(g).map(|(&d, &gi)| d * (1.0 - gi * gi)).collect();
        let g_prev = &un.hidden[step];
        let action = un.actions[step];
        {
            let gw = grad.block_mut("dyn_w");
            for (i, &dui) in du.iter().enumerate() {
                if dui != 0.0 {
                    let row = &mut gw[i * cols..(i + 1) * cols];
                    for (j, &xj) in g_prev.iter().enumerate() {
                        row[j] += dui * xj;
                    }
                    row[h + action] += dui;
                }
            }
        }
        for (gb, &dui) in grad.block_mut("dyn_b").iter_mut().zip(&du) {
            *gb += dui;
        }
        let w = params.block("dyn_w");
        let mut dg_prev = vec![0.0; h];
        for (i, &dui) in du.iter().enumerate() {
            if dui != 0.0 {
                for j in 0..h {
                    dg_prev[j] += dui * w[i * cols + j];
                }
            }
        }
        dg = dg_prev;
    }
    net.backward_hidden(params, obs, root, &dg, grad);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{fd_check, Arch, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(p: &mut ParamVector, rng: &mut ChaCha8Rng, scale: f64) {
        for v in p.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }

    fn random_targets(net: &NetSpec, depth: usize, rng: &mut ChaCha8Rng) -> UnrollTargets {
        let a = net.num_actions();
        let actions: Vec<usize> = (0..depth).map(|_| rng.gen_range(0..a)).collect();
        let rewards: Vec<f64> = (0..depth).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Leave some value/policy targets absent, as fragment boundaries do,
        // but keep at least one of each so every loss path is exercised.
        let values: Vec<Option<f64>> = (0..depth)
            .map(|i| (i == 0 || rng.gen_bool(0.7)).then(|| rng.gen_range(-1.0..1.0)))
            .collect();
        let policies: Vec<Option<Vec<f64>>> = (0..depth)
            .map(|i| {
                (i == 0 || rng.gen_bool(0.7)).then(|| {
                    let mut t: Vec<f64> = (0..a).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let z: f64 = t.iter().sum();
                    t.iter_mut().for_each(|x| *x /= z);
                    t
                })
            })
            .collect();
        UnrollTargets { actions, rewards, values, policies }
    }

    #[test]
    fn fresh_model_predicts_zero_and_uniform() {
        for arch in [Arch::Tabular, Arch::Mlp { hidden: 6 }] {
            let net = NetSpec::new(3, 4, arch);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let params = net.init_params(&mut rng);
            let root = net.forward(&params, 2);
            let un = unroll(&net, &params, &root.hidden, &[0, 3, 1]);
            for step in 0..3 {
                assert_eq!(un.rewards[step], 0.0);
                assert_eq!(un.values[step], 0.0);
                for &p in &softmax(&un.logits[step]) {
                    assert!((p - 0.25).abs() < 1e-15);
                }
            }
            let q = one_step_q(&net, &params, &root.hidden, 0.9);
            assert!(q.iter().all(|&x| x == 0.0), "zero heads give zero action values");
        }
    }

    #[test]
    fn one_step_q_matches_depth_one_unroll() {
        let net = NetSpec::new(4, 3, Arch::Mlp { hidden: 5 });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = net.init_params(&mut rng);
        randomize(&mut params, &mut rng, 0.7);
        let root = net.forward(&params, 1);
        let discount = 0.8;
        let q = one_step_q(&net, &params, &root.hidden, discount);
        for a in 0..3 {
            let un = unroll(&net, &params, &root.hidden, &[a]);
            let want = un.rewards[0] + discount * un.values[0];
            assert!((q[a] - want).abs() < 1e-14, "action {a}: {} vs {want}", q[a]);
        }
    }

    #[test]
    fn unroll_caches_have_consistent_shapes() {
        let net = NetSpec::new(2, 3, Arch::Tabular);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = net.init_params(&mut rng);
        let root = net.forward(&params, 0);
        let un = unroll(&net, &params, &root.hidden, &[2, 0]);
        assert_eq!(un.depth(), 2);
        assert_eq!(un.hidden.len(), 3);
        assert!(un.hidden.iter().all(|g| g.len() == net.repr_dim()));
        assert_eq!(un.logits.len(), 2);
        assert!(un.logits.iter().all(|l| l.len() == 3));
    }

    #[test]
    fn model_losses_pass_finite_difference_checks() {
        let weights = ModelLossWeights { reward: 1.0, value: 0.25, policy: 3.0 };
        for arch in [Arch::Tabular, Arch::Mlp { hidden: 5 }] {
            let net = NetSpec::new(3, 3, arch);
            let mut rng = ChaCha8Rng::seed_from_u64(40);
            for point in 0..25 {
                let mut params = net.init_params(&mut rng);
                randomize(&mut params, &mut rng, 0.6);
                let obs = point % 3;
                let depth = 1 + point % 4;
                let targets = random_targets(&net, depth, &mut rng);
                let root = net.forward(&params, obs);
                let mut grad = params.zeros_like();
                model_losses(&net, &params, obs, &root, &targets, weights, Some(&mut grad));
                let report = fd_check(
                    &params,
                    |p| {
                        let root = net.forward(p, obs);
                        let l = model_losses(&net, p, obs, &root, &targets, weights, None);
                        weights.reward * l.reward
                            + weights.value * l.value
                            + weights.policy * l.policy
                    },
                    &grad,
                    FD_STEP,
                    1e-4,
                );
                assert!(
                    report.pass,
                    "{arch:?} point {point} depth {depth}: err {} at {:?}",
                    report.max_rel_error, report.worst
                );
            }
        }
    }

    #[test]
    fn absent_targets_contribute_nothing() {
        let net = NetSpec::new(2, 2, Arch::Tabular);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = net.init_params(&mut rng);
        randomize(&mut params, &mut rng, 0.5);
        let root = net.forward(&params, 0);
        let targets = UnrollTargets {
            actions: vec![1, 0],
            rewards: vec![0.3, -0.2],
            values: vec![None, None],
            policies: vec![None, None],
        };
        let weights = ModelLossWeights { reward: 1.0, value: 0.25, policy: 3.0 };
        let mut grad = params.zeros_like();
        let l = model_losses(&net, &params, 0, &root, &targets, weights, Some(&mut grad));
        assert_eq!(l.value, 0.0);
        assert_eq!(l.policy, 0.0);
        assert_eq!(l.value_terms, 0);
        assert_eq!(l.policy_terms, 0);
        assert!(l.reward > 0.0);
        // Only reward-path parameters receive gradient.
        for name in ["model_value_w", "model_value_b", "model_policy_w", "model_policy_b"] {
            assert!(grad.block(name).iter().all(|&g| g == 0.0), "{name} untouched");
        }
        assert!(grad.block("model_reward_w").iter().any(|&g| g != 0.0));
    }

    #[test]
    fn depth_one_regression_learns_a_constant_reward() {
        // One observation, one action, constant reward 0.7: gradient descent
        // on the reward loss alone drives r̂ to the target.
        let net = NetSpec::new(1, 1, Arch::Tabular);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = net.init_params(&mut rng);
        let weights = ModelLossWeights { reward: 1.0, value: 0.0, policy: 0.0 };
        let targets = UnrollTargets {
            actions: vec![0],
            rewards: vec![0.7],
            values: vec![None],
            policies: vec![None],
        };
        for _ in 0..600 {
            let root = net.forward(&params, 0);
            let mut grad = params.zeros_like();
            model_losses(&net, &params, 0, &root, &targets, weights, Some(&mut grad));
            params.add_scaled(&grad, -0.5);
        }
        let root = net.forward(&params, 0);
        let un = unroll(&net, &params, &root.hidden, &[0]);
        assert!((un.rewards[0] - 0.7).abs() < 1e-3, "learned r̂ = {}", un.rewards[0]);
    }

    #[test]
    fn policy_loss_gradient_vanishes_when_model_matches_target() {
        // Choose a policy target equal to the model's own prediction: the
        // policy-loss gradient must vanish identically.
        let net = NetSpec::new(2, 3, Arch::Tabular);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = net.init_params(&mut rng);
        randomize(&mut params, &mut rng, 0.4);
        let root = net.forward(&params, 1);
        let un = unroll(&net, &params, &root.hidden, &[2]);
        let target = softmax(&un.logits[0]);
        let targets = UnrollTargets {
            actions: vec![2],
            rewards: vec![un.rewards[0]], // also zero reward error
            values: vec![None],
            policies: vec![Some(target)],
        };
        let weights = ModelLossWeights { reward: 1.0, value: 0.25, policy: 3.0 };
        let mut grad = params.zeros_like();
        let l = model_losses(&net, &params, 1, &root, &targets, weights, Some(&mut grad));
        assert!(l.policy.abs() < 1e-12);
        for &g in grad.data() {
            assert!(g.abs() < 1e-12, "gradient must vanish at the fixed point, got {g}");
        }
    }
}
