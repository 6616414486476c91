//! Negative-prompt-driven preference alignment for a tiny autoregressive
//! language model.
//!
//! A reference transformer is fine-tuned with a three-part objective (a
//! supervised term on the best response, a pairwise ranking hinge over
//! length-normalized log-probabilities, and a clipped penalty on the worst
//! response) while an online loop samples positive- and negative-prompted
//! responses, scores them with a programmatic reward oracle and grows the
//! preference dataset.

pub mod error;
pub mod eval;
pub mod lm;
pub mod loss;
pub mod optim;
pub mod prefdata;
pub mod reference;
pub mod reward;
pub mod sampler;
pub mod synth;
pub mod tokens;
pub mod trainer;

pub use error::{NeatError, Result};
