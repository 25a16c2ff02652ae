//! Desk-scale laboratory for regularized policy optimization on exact tabular MDPs.
//!
//! The crate pairs every training-time estimator with an exact oracle so that
//! analytic claims are checkable end to end:
//!
//! - [`env`]: tabular MDPs with state aliasing, episode sampling, a text format.
//! - [`oracle`]: exact policy evaluation, visitation measures, the performance
//!   difference lemma and its trust-region lower bound, closed forms for the
//!   aliased four-state task.
//! - [`approx`]: flat parameter vectors, tabular and one-hidden-layer networks
//!   with hand-derived gradients, and the finite-difference checker that is the
//!   correctness authority for every loss.
//! - [`targets`]: MPO and clipped-MPO (CMPO) policy targets, total variation,
//!   the tanh(c/2) maximum-TV theorem verifier, and the stochastic estimate of
//!   the CMPO normalizer.
//! - [`returns`]: Retrace and V-trace multi-step return estimators and the
//!   bias-corrected advantage normalizer.
//! - [`model`]: the value-equivalent K-step model (dynamics + reward, value,
//!   policy heads) and its losses.
//! - [`updates`]: the Muesli loss and its baseline/ablation family (PG,
//!   PG+TRPO-penalty, PPO, MPO direct/indirect, CMPO indirect).
//! - [`trainer`]: replay, target network, clipped-Adam optimization, metrics,
//!   checkpoints.
//! - [`verify`]: the verifier battery shared by the CLI and the test suite.

pub mod approx;
pub mod env;
pub mod model;
pub mod oracle;
pub mod returns;
pub mod targets;
pub mod trainer;
pub mod updates;
pub mod verify;
