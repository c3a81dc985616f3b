//! Bias identification by influence-scored mask learning and one-step
//! unlearning for distance-softmax next-item recommenders.
//!
//! The pipeline trains an adapter-based recommender, scores how much each
//! candidate training sample contributes to a differentiable bias functional,
//! learns a sparse removal mask from those scores, and removes the selected
//! samples' effect with a single damped Newton step. An exact-retraining
//! oracle checks the step at small scale.

pub mod dataset;
pub mod error;
pub mod fairness;
pub mod influence;
pub mod maskopt;
pub mod par;
pub mod pipeline;
pub mod recmodel;
pub mod synth;
pub mod unlearn;

pub use error::{Error, Result};
