//! Acceptance suite: every release-gating property, one test per criterion,
//! each printing a single PASS line with its measured numbers (visible with
//! `cargo test --test acceptance -- --nocapture`).

use muesli_core::approx::Arch;
use muesli_core::env::{aliased_mdp, random_mdp, sample_episode};
use muesli_core::oracle::{
    aliased_closed_form, evaluate, obs_q, obs_v, ALIASED_OPTIMAL_J, ALIASED_OPTIMAL_P,
};
use muesli_core::returns::{retrace, ExpectationMode, FragmentReturns};
use muesli_core::targets::{cmpo_target, expected_sampled_policy, kl_sample_weights_exact_z, max_tv_bound};
use muesli_core::trainer::{RunResult, TrainConfig, Trainer};
use muesli_core::updates::{UpdateConfig, Variant};
use muesli_core::verify::{bound_battery, gradient_battery, lemma_battery, theorem_grid, THEOREM_CLIP_GRID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

/// Five full Muesli runs on the aliased task with the shipped defaults,
/// shared by criteria 2 (convergence) and 5 (online TV invariant).
fn aliased_muesli_runs() -> &'static Vec<(u64, RunResult)> {
    static RUNS: OnceLock<Vec<(u64, RunResult)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..5)
            .map(|seed| {
                let mut cfg =
                    TrainConfig::desk_default(UpdateConfig::for_variant(Variant::Muesli));
                cfg.seed = seed;
                let mut t = Trainer::new(aliased_mdp(), cfg).expect("valid defaults");
                (seed, t.run(|_| {}).expect("run completes"))
            })
            .collect()
    })
}

#[test]
fn criterion_1_tv_maximum_matches_the_analytic_bound() {
    let start = Instant::now();
    let grid = theorem_grid(&THEOREM_CLIP_GRID);
    let elapsed = start.elapsed();
    for r in &grid.reports {
        assert!(
            r.max_err < 1e-6,
            "c = {}: numeric max {} vs analytic {} (err {})",
            r.clip,
            r.numeric_max,
            r.analytic_max,
            r.max_err
        );
        assert!(
            r.argmax_err < 1e-5,
            "c = {}: numeric argmax {} vs analytic {} (err {})",
            r.clip,
            r.numeric_argmax,
            r.analytic_argmax,
            r.argmax_err
        );
    }
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget is 1 s");
    println!(
        "criterion 1 PASS: max TV matches tanh(c/2) within 1e-6 and argmax within 1e-5 \
         for c in {{0.1, 0.5, 1, 2}} in {elapsed:?}"
    );
}

#[test]
fn criterion_2_muesli_converges_on_the_aliased_task() {
    let mut details = Vec::new();
    for (seed, result) in aliased_muesli_runs() {
        let p_up = result.summary.final_policy[0][0];
        let j = result.summary.final_j;
        assert!(
            (0.60..=0.65).contains(&p_up),
            "seed {seed}: pi(up|shared obs) = {p_up}, outside [0.60, 0.65]"
        );
        assert!(
            (j - ALIASED_OPTIMAL_J).abs() <= 0.01,
            "seed {seed}: J = {j}, more than 0.01 from {ALIASED_OPTIMAL_J}"
        );
        details.push(format!("seed {seed}: p={p_up:.4} J={j:.4}"));
    }
    println!(
        "criterion 2 PASS: 5/5 seeds with pi(up) in [0.60, 0.65] (target {ALIASED_OPTIMAL_P}) \
         and |J - {ALIASED_OPTIMAL_J}| <= 0.01 [{}]",
        details.join("; ")
    );
}

#[test]
fn criterion_3_obs_level_q_degenerates_while_values_split() {
    let mdp = aliased_mdp();
    let per_obs = vec![vec![0.625, 0.375], vec![0.5, 0.5]];
    let per_state = mdp.expand_policy(&per_obs).unwrap();
    let eval = evaluate(&mdp, &per_state).unwrap();
    let q_obs = obs_q(&mdp, &eval);
    let v_obs = obs_v(&mdp, &eval);

    assert!((q_obs[0][0] - 0.25).abs() < 1e-10, "q(obs, up) = {}", q_obs[0][0]);
    assert!((q_obs[0][1] - 0.25).abs() < 1e-10, "q(obs, down) = {}", q_obs[0][1]);

    // Bootstrap-bias exhibit: the observation-aggregated value differs from
    // the up-successor's state value, so bootstrapping v(obs) in its place
    // is biased. Oracle and closed forms agree: 1/4 vs -1/4.
    let v_phi = v_obs[0];
    let v_up_successor = eval.v[1];
    assert!((v_phi - 0.25).abs() < 1e-10, "v_phi = {v_phi}");
    assert!((v_up_successor + 0.25).abs() < 1e-10, "v(up successor) = {v_up_successor}");
    assert!(
        (v_phi - v_up_successor).abs() > 0.4,
        "the aggregated value must differ from the state value"
    );

    let cf = aliased_closed_form(0.625).unwrap();
    assert!((cf.q_up - 0.25).abs() < 1e-12 && (cf.q_down - 0.25).abs() < 1e-12);
    assert!((cf.v_phi - 0.25).abs() < 1e-12 && (cf.v2 + 0.25).abs() < 1e-12);
    println!(
        "criterion 3 PASS: at p = 5/8, q(obs, up) = q(obs, down) = 1/4 within 1e-10; \
         v_obs = {v_phi} != v(up successor) = {v_up_successor}"
    );
}

#[test]
fn criterion_4_improvement_identity_and_trust_region_bound() {
    let lemma = lemma_battery(100, 1e-8, 0).unwrap();
    assert!(
        lemma.pass,
        "{} of {} instances broke the identity (max gap {})",
        lemma.failures, lemma.instances, lemma.max_abs_gap
    );
    let bound = bound_battery(100, 0).unwrap();
    assert!(
        bound.pass,
        "{} of {} instances violated the bound (min slack {})",
        bound.violations, bound.instances, bound.min_slack
    );
    println!(
        "criterion 4 PASS: performance-difference identity within 1e-8 on {} MDPs \
         (max gap {:.2e}); trust-region bound zero violations (min slack {:.3e})",
        lemma.instances, lemma.max_abs_gap, bound.min_slack
    );
}

#[test]
fn criterion_5_logged_tv_never_exceeds_the_bound() {
    let bound = max_tv_bound(1.0);
    let mut rows = 0;
    let mut worst: f64 = 0.0;
    for (seed, result) in aliased_muesli_runs() {
        for row in &result.metrics {
            rows += 1;
            worst = worst.max(row.tv_max);
            assert!(
                row.tv_max <= bound + 1e-9,
                "seed {seed} step {}: TV {} exceeds tanh(c/2) = {bound}",
                row.step,
                row.tv_max
            );
        }
    }
    println!(
        "criterion 5 PASS: max logged TV {worst:.6} <= tanh(1/2) = {bound:.6} + 1e-9 \
         across {rows} logged rows of 5 full runs"
    );
}

#[test]
fn criterion_6a_retrace_is_unbiased_against_the_oracle() {
    // 5-state, 3-action MDP; behavior and target policies differ everywhere.
    let mut rng = ChaCha8Rng::seed_from_u64(60_001);
    let mdp = random_mdp(5, 3, 0.9, &mut rng);
    let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    };
    let pi: Vec<Vec<f64>> = (0..5).map(|_| row(&mut rng)).collect();
    let mu: Vec<Vec<f64>> = (0..5).map(|_| row(&mut rng)).collect();
    let eval = evaluate(&mdp, &pi).unwrap();

    const TRIALS: usize = 30_000;
    const HORIZON: usize = 6;
    // First-position Retrace targets grouped by the (state, action) cell.
    let mut sum = vec![vec![0.0; 3]; 5];
    let mut sum_sq = vec![vec![0.0; 3]; 5];
    let mut count = vec![vec![0usize; 3]; 5];
    for _ in 0..TRIALS {
        let traj = sample_episode(&mdp, &mu, HORIZON, &mut rng).unwrap();
        let states: Vec<usize> = traj.steps.iter().map(|s| s.obs).collect();
        let behavior: Vec<f64> =
            traj.steps.iter().map(|s| s.behavior[s.action]).collect();
        let pi_rows: Vec<Vec<f64>> = states.iter().map(|&s| pi[s].clone()).collect();
        let values: Vec<f64> = states.iter().map(|&s| eval.v[s]).collect();
        let q_rows: Vec<Vec<f64>> = states.iter().map(|&s| eval.q[s].clone()).collect();
        let frag = FragmentReturns {
            rewards: &traj.steps.iter().map(|s| s.reward).collect::<Vec<_>>(),
            discounts: &traj.steps.iter().map(|s| s.discount).collect::<Vec<_>>(),
            actions: &traj.steps.iter().map(|s| s.action).collect::<Vec<_>>(),
            behavior: &behavior,
            pi: &pi_rows,
            values: &values,
            bootstrap_value: traj.bootstrap_obs.map(|o| eval.v[o]),
        };
        let est = retrace(&frag, &q_rows, 0.95, ExpectationMode::Exact, &mut rng).unwrap();
        let (s0, a0) = (states[0], traj.steps[0].action);
        sum[s0][a0] += est[0].g;
        sum_sq[s0][a0] += est[0].g * est[0].g;
        count[s0][a0] += 1;
    }
    let mut max_abs_z: f64 = 0.0;
    for s in 0..5 {
        for a in 0..3 {
            let n = count[s][a] as f64;
            assert!(count[s][a] > 200, "cell ({s},{a}) undersampled: {}", count[s][a]);
            let mean = sum[s][a] / n;
            let var = (sum_sq[s][a] / n - mean * mean).max(0.0);
            let se = (var / n).sqrt();
            let z = if se > 0.0 { (mean - eval.q[s][a]) / se } else { 0.0 };
            max_abs_z = max_abs_z.max(z.abs());
            assert!(
                z.abs() < 3.0,
                "cell ({s},{a}): mean {mean} vs oracle q {} is {z:.2} sigma off",
                eval.q[s][a]
            );
        }
    }
    println!(
        "criterion 6a PASS: Retrace first-step targets match oracle q within 3 sigma \
         for all 15 (state, action) cells over {TRIALS} off-policy episodes \
         (max |z| = {max_abs_z:.2})"
    );
}

#[test]
fn criterion_6b_sampled_kl_gradient_exactness_and_bias_decay() {
    // (1) With the exact normalizer, the sampled-KL gradient is unbiased:
    // its expectation over all ordered sample tuples equals the exact
    // gradient pi - target.
    let prior = vec![0.5, 0.2, 0.3];
    let advantages = vec![0.8, -0.4, 0.1];
    let pi = vec![0.25, 0.45, 0.30];
    let clip = 1.0;
    let n = 3;
    let target = cmpo_target(&prior, &advantages, clip);
    let exact_grad: Vec<f64> = pi.iter().zip(&target.probs).map(|(&p, &t)| p - t).collect();

    let actions = prior.len();
    let mut expected = vec![0.0; actions];
    let mut tuple = vec![0usize; n];
    loop {
        let p_tuple: f64 = tuple.iter().map(|&a| prior[a]).product();
        let w = kl_sample_weights_exact_z(&prior, &advantages, clip, &tuple, target.z);
        for (k, &a_k) in tuple.iter().enumerate() {
            for j in 0..actions {
                let one = if j == a_k { 1.0 } else { 0.0 };
                expected[j] += p_tuple * w[k] * (pi[j] - one);
            }
        }
        // Next tuple in lexicographic order.
        let mut idx = n;
        while idx > 0 {
            tuple[idx - 1] += 1;
            if tuple[idx - 1] < actions {
                break;
            }
            tuple[idx - 1] = 0;
            idx -= 1;
        }
        if idx == 0 {
            break;
        }
    }
    let mut max_gap: f64 = 0.0;
    for (e, g) in expected.iter().zip(&exact_grad) {
        max_gap = max_gap.max((e - g).abs());
    }
    assert!(max_gap < 1e-9, "enumerated expectation differs from exact gradient by {max_gap}");

    // (2) The self-normalized estimator's bias shrinks strictly as the
    // sample count grows on a fixed 4-action instance.
    let prior4 = vec![0.4, 0.3, 0.2, 0.1];
    let adv4 = vec![1.2, -0.7, 0.3, -1.5];
    let exact4 = cmpo_target(&prior4, &adv4, clip);
    let bias = |n: usize| -> f64 {
        let e = expected_sampled_policy(&prior4, &adv4, clip, n, 1.0);
        e.iter().zip(&exact4.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let biases: Vec<f64> = [1, 2, 4, 16].iter().map(|&n| bias(n)).collect();
    for w in biases.windows(2) {
        assert!(w[1] < w[0], "bias must decrease monotonically: {biases:?}");
    }
    println!(
        "criterion 6b PASS: exact-z sampled-KL gradient equals the enumerated gradient \
         within 1e-9 (gap {max_gap:.2e}); self-normalized bias decays {:?} over N = 1, 2, 4, 16",
        biases.iter().map(|b| format!("{b:.4}")).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_7_every_loss_passes_finite_difference_checks() {
    let reports = gradient_battery(20, 1e-4, 7_000);
    let mut worst: f64 = 0.0;
    for r in &reports {
        worst = worst.max(r.max_rel_error);
        assert!(
            r.pass,
            "{}: max relative error {} at {} points",
            r.loss, r.max_rel_error, r.points
        );
    }
    println!(
        "criterion 7 PASS: {} losses x 20 points, max relative FD error {worst:.2e} < 1e-4",
        reports.len()
    );
}

#[test]
fn criterion_8_reward_scale_invariance_of_the_greedy_policy() {
    let run = |variant: Variant, scale: f64| -> Vec<usize> {
        let mut cfg = TrainConfig::desk_default(UpdateConfig::for_variant(variant));
        cfg.seed = 0;
        let mdp = aliased_mdp().with_scaled_rewards(scale);
        let mut t = Trainer::new(mdp, cfg).expect("valid config");
        t.run(|_| {}).expect("run completes").summary.greedy
    };
    let tiny = run(Variant::Muesli, 1e-3);
    let unit = run(Variant::Muesli, 1.0);
    let huge = run(Variant::Muesli, 1e3);
    assert_eq!(tiny, unit, "greedy policy changed between reward scales 1e-3 and 1");
    assert_eq!(huge, unit, "greedy policy changed between reward scales 1e3 and 1");

    // Contrast arm: the indirect-MPO target exponentiates unclipped,
    // unnormalized action values, so scale robustness is not promised for
    // it; its outcome is reported without any assertion.
    let mpo_unit = run(Variant::MpoIndirect, 1.0);
    let mpo_huge = run(Variant::MpoIndirect, 1e3);
    let contrast = if mpo_unit == mpo_huge { "matched" } else { "diverged" };
    println!(
        "criterion 8 PASS: Muesli greedy policy {unit:?} identical at reward scales \
         1e-3, 1, 1e3; unclipped-MPO contrast arm {contrast} ({mpo_unit:?} vs {mpo_huge:?})"
    );
}

#[test]
fn criterion_9_unroll_and_policy_head_ablations_run_to_completion() {
    let base = || {
        let mut cfg = TrainConfig::desk_default(UpdateConfig::for_variant(Variant::Muesli));
        cfg.total_steps = 300;
        cfg.eval_interval = 100;
        cfg.arch = Arch::Mlp { hidden: 16 };
        cfg.max_episode_steps = 40;
        cfg.seed = 9;
        cfg
    };
    let mut mdp_rng = ChaCha8Rng::seed_from_u64(7);
    let mdp = random_mdp(10, 2, 0.9, &mut mdp_rng);

    let run = |label: &str, unroll: usize, policy_head: bool| -> Vec<String> {
        let mut cfg = base();
        cfg.unroll_depth = unroll;
        cfg.model_policy_loss = policy_head;
        let mut t = Trainer::new(mdp.clone(), cfg).expect("valid config");
        let result = t.run(|_| {}).unwrap_or_else(|e| panic!("{label} failed: {e}"));
        result.metrics.iter().map(|r| r.to_csv()).collect()
    };
    let deep = run("K=5 with policy head", 5, true);
    let shallow = run("K=1", 1, true);
    let headless = run("K=5 without policy head", 5, false);

    let header_cols = muesli_core::trainer::MetricsRow::csv_header().split(',').count();
    for (label, rows) in
        [("K=5", &deep), ("K=1", &shallow), ("no-policy-head", &headless)]
    {
        assert_eq!(rows.len(), 3, "{label}: expected rows at steps 100, 200, 300");
        for row in rows {
            assert_eq!(
                row.split(',').count(),
                header_cols,
                "{label}: row does not match the schema"
            );
        }
    }
    println!(
        "criterion 9 PASS: K=5, K=1, and no-policy-head ablations completed 300 MLP steps \
         on the 10-state MDP with schema-identical metrics (no ordering asserted)"
    );
}
