//! Exact tabular MDPs with observation aliasing.
//!
//! States are ids `0..num_states`, actions `0..num_actions`. Transitions and
//! rewards are dense `[s][a][s']` tensors. Every state maps to an observation
//! id through `obs_map`; function approximation consumes only observation ids,
//! so mapping several states to one observation produces partial observability
//! without any machinery beyond the map itself.
//!
//! Terminal states absorb: each action self-loops with probability 1 and
//! reward 0, and the step that *enters* a terminal state is recorded with
//! discount 0 so return computations stop there.

use rand::Rng;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("state {state} action {action}: transition row sums to {sum:.17} (must be 1 within 1e-12)")]
    RowNotNormalized { state: usize, action: usize, sum: f64 },
    #[error("transition probability out of range at ({state},{action},{next}): {value}")]
    BadProbability { state: usize, action: usize, next: usize, value: f64 },
    #[error("initial distribution sums to {sum:.17} (must be 1 within 1e-12)")]
    InitialNotNormalized { sum: f64 },
    #[error("initial distribution places mass {mass} on terminal state {state}")]
    InitialOnTerminal { state: usize, mass: f64 },
    #[error("terminal state {state} must self-loop with probability 1 and reward 0")]
    BadTerminalRow { state: usize },
    #[error("obs_map must cover 0..{expected} contiguously; observation {missing} has no state")]
    ObsMapNotSurjective { expected: usize, missing: usize },
    #[error("discount {0} out of range [0, 1]")]
    BadDiscount(f64),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("policy row for observation {obs} is not a distribution (sum {sum:.12}, min {min:.12})")]
    InvalidPolicyRow { obs: usize, sum: f64, min: f64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Sparse description of an MDP; `build` produces the validated dense form.
///
/// Terminal states may omit their transitions entirely; the builder fills in
/// the absorbing self-loop.
#[derive(Debug, Clone)]
pub struct MdpSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub initial: Vec<f64>,
    pub terminal: Vec<bool>,
    pub obs_map: Vec<usize>,
    /// `(s, a, s', probability, reward)` entries. Duplicate `(s, a, s')` keys
    /// accumulate probability; the reward of the last entry wins.
    pub transitions: Vec<(usize, usize, usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct TabularMDP {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial: Vec<f64>,
    terminal: Vec<bool>,
    obs_map: Vec<usize>,
    num_obs: usize,
}

impl MdpSpec {
    pub fn build(self) -> Result<TabularMDP, MdpError> {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(MdpError::BadDiscount(self.discount));
        }
        let mut transition = vec![0.0; s_n * a_n * s_n];
        let mut reward = vec![0.0; s_n * a_n * s_n];
        let mut touched = vec![false; s_n * a_n];
        for (s, a, s2, p, r) in &self.transitions {
            if *s >= s_n || *a >= a_n || *s2 >= s_n {
                return Err(MdpError::IndexOutOfRange(format!("transition ({s},{a},{s2})")));
            }
            let idx = (s * a_n + a) * s_n + s2;
            transition[idx] += p;
            reward[idx] = *r;
            touched[s * a_n + a] = true;
        }
        for s in 0..s_n {
            if self.terminal[s] && (0..a_n).all(|a| !touched[s * a_n + a]) {
                for a in 0..a_n {
                    transition[(s * a_n + a) * s_n + s] = 1.0;
                }
            }
        }
        let mdp = TabularMDP {
            num_states: s_n,
            num_actions: a_n,
            discount: self.discount,
            transition,
            reward,
            initial: self.initial,
            terminal: self.terminal,
            num_obs: self.obs_map.iter().max().map_or(0, |m| m + 1),
            obs_map: self.obs_map,
        };
        mdp.validate()?;
        Ok(mdp)
    }
}

impl TabularMDP {
    fn validate(&self) -> Result<(), MdpError> {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        assert_eq!(self.transition.len(), s_n * a_n * s_n, "transition tensor size");
        assert_eq!(self.reward.len(), s_n * a_n * s_n, "reward tensor size");
        assert_eq!(self.initial.len(), s_n, "initial distribution size");
        assert_eq!(self.terminal.len(), s_n, "terminal flags size");
        assert_eq!(self.obs_map.len(), s_n, "obs_map size");
        for s in 0..s_n {
            for a in 0..a_n {
                let mut sum = 0.0;
                for s2 in 0..s_n {
                    let p = self.p(s, a, s2);
                    if !(0.0..=1.0 + 1e-12).contains(&p) {
                        return Err(MdpError::BadProbability { state: s, action: a, next: s2, value: p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(MdpError::RowNotNormalized { state: s, action: a, sum });
                }
                if self.terminal[s] {
                    let self_loop = self.p(s, a, s);
                    let loop_reward = self.r(s, a, s);
                    if (self_loop - 1.0).abs() > 1e-12 || loop_reward != 0.0 {
                        return Err(MdpError::BadTerminalRow { state: s });
                    }
                }
            }
        }
        let init_sum: f64 = self.initial.iter().sum();
        if (init_sum - 1.0).abs() > 1e-12 || self.initial.iter().any(|&p| p < 0.0) {
            return Err(MdpError::InitialNotNormalized { sum: init_sum });
        }
        for s in 0..s_n {
            if self.terminal[s] && self.initial[s] > 0.0 {
                return Err(MdpError::InitialOnTerminal { state: s, mass: self.initial[s] });
            }
        }
        let mut seen = vec![false; self.num_obs];
        for &o in &self.obs_map {
            seen[o] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(MdpError::ObsMapNotSurjective { expected: self.num_obs, missing });
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_obs(&self) -> usize {
        self.num_obs
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + s2]
    }

    pub fn r(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.reward[(s * self.num_actions + a) * self.num_states + s2]
    }

    /// Expected immediate reward of taking `a` in `s`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        (0..self.num_states).map(|s2| self.p(s, a, s2) * self.r(s, a, s2)).sum()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn obs(&self, s: usize) -> usize {
        self.obs_map[s]
    }

    pub fn states_of_obs(&self, obs: usize) -> Vec<usize> {
        (0..self.num_states).filter(|&s| self.obs_map[s] == obs).collect()
    }

    /// Observations carrying at least one non-terminal state; metrics and
    /// policy tables range over these.
    pub fn active_obs(&self) -> Vec<usize> {
        let mut active = vec![false; self.num_obs];
        for s in 0..self.num_states {
            if !self.terminal[s] {
                active[self.obs_map[s]] = true;
            }
        }
        (0..self.num_obs).filter(|&o| active[o]).collect()
    }

    /// Same MDP with every reward multiplied by `scale`.
    pub fn with_scaled_rewards(&self, scale: f64) -> TabularMDP {
        let mut out = self.clone();
        for r in &mut out.reward {
            *r *= scale;
        }
        out
    }

    /// Expand a per-observation policy table to per-state rows.
    pub fn expand_policy(&self, per_obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MdpError> {
        for (o, row) in per_obs.iter().enumerate() {
            validate_policy_row(o, row, self.num_actions)?;
        }
        Ok((0..self.num_states).map(|s| per_obs[self.obs_map[s]].clone()).collect())
    }
}

fn validate_policy_row(obs: usize, row: &[f64], num_actions: usize) -> Result<(), MdpError> {
    let sum: f64 = row.iter().sum();
    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    if row.len() != num_actions || (sum - 1.0).abs() > 1e-9 || min < 0.0 {
        return Err(MdpError::InvalidPolicyRow { obs, sum, min });
    }
    Ok(())
}

/// One recorded transition. `discount` is 0 when the transition entered a
/// terminal state, else the MDP discount; `behavior` is the full acting-policy
/// row at `obs`, so `behavior[action]` is the probability the recorded action
/// had when taken.
#[derive(Debug, Clone)]
pub struct Step {
    pub state: usize,
    pub obs: usize,
    pub action: usize,
    pub reward: f64,
    pub discount: f64,
    pub behavior: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// Observation to bootstrap from when the episode was cut off before
    /// termination (length cap or fragment boundary). `None` means the last
    /// step entered a terminal state.
    pub bootstrap_obs: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.bootstrap_obs.is_none()
    }
}

/// Sample one episode under a per-observation policy, stopping at a terminal
/// state or after `max_len` steps (recording the bootstrap observation in the
/// latter case).
pub fn sample_episode<R: Rng>(
    mdp: &TabularMDP,
    policy: &[Vec<f64>],
    max_len: usize,
    rng: &mut R,
) -> Result<Trajectory, MdpError> {
    for (o, row) in policy.iter().enumerate() {
        validate_policy_row(o, row, mdp.num_actions())?;
    }
    let mut s = sample_index(mdp.initial(), rng);
    let mut steps = Vec::new();
    while steps.len() < max_len {
        let obs = mdp.obs(s);
        let row = &policy[obs];
        let action = sample_index(row, rng);
        let s2 = sample_next(mdp, s, action, rng);
        let entered_terminal = mdp.is_terminal(s2);
        steps.push(Step {
            state: s,
            obs,
            action,
            reward: mdp.r(s, action, s2),
            discount: if entered_terminal { 0.0 } else { mdp.discount() },
            behavior: row.clone(),
        });
        if entered_terminal {
            return Ok(Trajectory { steps, bootstrap_obs: None });
        }
        s = s2;
    }
    Ok(Trajectory { steps, bootstrap_obs: Some(mdp.obs(s)) })
}

fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Guard against the accumulated sum landing a hair below 1.
    weights.iter().rposition(|&w| w > 0.0).expect("weights must have positive mass")
}

fn sample_next<R: Rng>(mdp: &TabularMDP, s: usize, a: usize, rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for s2 in 0..mdp.num_states() {
        acc += mdp.p(s, a, s2);
        if u < acc {
            return s2;
        }
    }
    (0..mdp.num_states()).rev().find(|&s2| mdp.p(s, a, s2) > 0.0).expect("row has positive mass")
}

/// The four-state aliased task. State 0 starts every episode; up from it pays
/// +1 and leads to state 1, down pays 0 and leads to state 2. State 1 pays -1
/// for up and +1 for down, state 2 the reverse, both into the terminal state
/// 3. Discount is 1 and every non-terminal state shares observation 0, so any
/// observation-conditioned policy plays the same mixture everywhere.
pub fn aliased_mdp() -> TabularMDP {
    MdpSpec {
        num_states: 4,
        num_actions: 2,
        discount: 1.0,
        initial: vec![1.0, 0.0, 0.0, 0.0],
        terminal: vec![false, false, false, true],
        obs_map: vec![0, 0, 0, 1],
        transitions: vec![
            (0, 0, 1, 1.0, 1.0),
            (0, 1, 2, 1.0, 0.0),
            (1, 0, 3, 1.0, -1.0),
            (1, 1, 3, 1.0, 1.0),
            (2, 0, 3, 1.0, 1.0),
            (2, 1, 3, 1.0, -1.0),
        ],
    }
    .build()
    .expect("aliased MDP is valid by construction")
}

/// Random dense MDP: Dirichlet(1) transition rows, rewards uniform in [-1, 1],
/// uniform initial distribution, no terminal states, one observation per state.
/// Requires `discount < 1` so exact evaluation converges.
pub fn random_mdp<R: Rng>(
    num_states: usize,
    num_actions: usize,
    discount: f64,
    rng: &mut R,
) -> TabularMDP {
    assert!(discount < 1.0, "random MDPs have no terminal states; need discount < 1");
    let mut transitions = Vec::with_capacity(num_states * num_actions * num_states);
    for s in 0..num_states {
        for a in 0..num_actions {
            // Normalized Exp(1) draws are a flat Dirichlet sample.
            let gammas: Vec<f64> = (0..num_states).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
            let total: f64 = gammas.iter().sum();
            for s2 in 0..num_states {
                let reward = rng.gen_range(-1.0..1.0);
                transitions.push((s, a, s2, gammas[s2] / total, reward));
            }
        }
    }
    MdpSpec {
        num_states,
        num_actions,
        discount,
        initial: vec![1.0 / num_states as f64; num_states],
        terminal: vec![false; num_states],
        obs_map: (0..num_states).collect(),
        transitions,
    }
    .build()
    .expect("random MDP is valid by construction")
}

/// Parse the line-based MDP text format:
///
/// ```text
/// states 4
/// actions 2
/// discount 1.0
/// initial 0 1.0
/// terminal 3
/// obs 0 0
/// t 0 0 1 1.0 1.0        # t <s> <a> <s'> <prob> <reward>
/// ```
///
/// `#` starts a comment. `initial`/`terminal`/`obs`/`t` lines repeat as
/// needed; terminal states may omit transitions (the absorbing self-loop is
/// implied). Probabilities must be written precisely enough that each row sums
/// to 1 within 1e-12.
pub fn parse_mdp(text: &str) -> Result<TabularMDP, MdpError> {
    let mut num_states = None;
    let mut num_actions = None;
    let mut discount = None;
    let mut initial_entries: Vec<(usize, f64)> = Vec::new();
    let mut terminal_ids: Vec<usize> = Vec::new();
    let mut obs_entries: Vec<(usize, usize)> = Vec::new();
    let mut transitions = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let parse_err = |message: String| MdpError::Parse { line, message };
        match fields[0] {
            "states" => num_states = Some(parse_field(&fields, 1, line)?),
            "actions" => num_actions = Some(parse_field(&fields, 1, line)?),
            "discount" => discount = Some(parse_field(&fields, 1, line)?),
            "initial" => {
                initial_entries.push((parse_field(&fields, 1, line)?, parse_field(&fields, 2, line)?))
            }
            "terminal" => {
                for f in &fields[1..] {
                    terminal_ids.push(
                        f.parse().map_err(|e| parse_err(format!("bad state id {f:?}: {e}")))?,
                    );
                }
            }
            "obs" => {
                obs_entries.push((parse_field(&fields, 1, line)?, parse_field(&fields, 2, line)?))
            }
            "t" => transitions.push((
                parse_field(&fields, 1, line)?,
                parse_field(&fields, 2, line)?,
                parse_field(&fields, 3, line)?,
                parse_field(&fields, 4, line)?,
                parse_field(&fields, 5, line)?,
            )),
            other => return Err(parse_err(format!("unknown directive {other:?}"))),
        }
    }

    let num_states = num_states.ok_or(MdpError::Parse { line: 0, message: "missing `states`".into() })?;
    let num_actions =
        num_actions.ok_or(MdpError::Parse { line: 0, message: "missing `actions`".into() })?;
    let discount = discount.ok_or(MdpError::Parse { line: 0, message: "missing `discount`".into() })?;
    let mut initial = vec![0.0; num_states];
    for (s, p) in initial_entries {
        check_state(s, num_states)?;
        initial[s] = p;
    }
    let mut terminal = vec![false; num_states];
    for s in terminal_ids {
        check_state(s, num_states)?;
        terminal[s] = true;
    }
    let mut obs_map = vec![usize::MAX; num_states];
    for (s, o) in obs_entries {
        check_state(s, num_states)?;
        obs_map[s] = o;
    }
    if let Some(s) = obs_map.iter().position(|&o| o == usize::MAX) {
        return Err(MdpError::Parse { line: 0, message: format!("state {s} has no `obs` line") });
    }
    MdpSpec { num_states, num_actions, discount, initial, terminal, obs_map, transitions }.build()
}

fn check_state(s: usize, num_states: usize) -> Result<(), MdpError> {
    if s >= num_states {
        return Err(MdpError::IndexOutOfRange(format!("state {s} (num_states {num_states})")));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(fields: &[&str], idx: usize, line: usize) -> Result<T, MdpError>
where
    T::Err: std::fmt::Display,
{
    let raw = fields.get(idx).ok_or(MdpError::Parse {
        line,
        message: format!("expected at least {} fields", idx + 1),
    })?;
    raw.parse().map_err(|e| MdpError::Parse { line, message: format!("bad field {raw:?}: {e}") })
}

/// Render an MDP in the text format `parse_mdp` reads.
pub fn format_mdp(mdp: &TabularMDP) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "states {}", mdp.num_states());
    let _ = writeln!(out, "actions {}", mdp.num_actions());
    let _ = writeln!(out, "discount {}", mdp.discount());
    for s in 0..mdp.num_states() {
        if mdp.initial()[s] > 0.0 {
            let _ = writeln!(out, "initial {} {}", s, mdp.initial()[s]);
        }
    }
    for s in 0..mdp.num_states() {
        if mdp.is_terminal(s) {
            let _ = writeln!(out, "terminal {s}");
        }
    }
    for s in 0..mdp.num_states() {
        let _ = writeln!(out, "obs {} {}", s, mdp.obs(s));
    }
    for s in 0..mdp.num_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.num_actions() {
            for s2 in 0..mdp.num_states() {
                let p = mdp.p(s, a, s2);
                if p > 0.0 {
                    let _ = writeln!(out, "t {} {} {} {} {}", s, a, s2, p, mdp.r(s, a, s2));
                }
            }
        }
    }
    out
}
