//! Actor-evaluator re-ranking with learning at serving time.
//!
//! An actor builds a list item by item from a candidate set; an evaluator
//! scores whole lists. At serving time the actor's scoring layers can be
//! nudged along the gradient of the probability of its own greedy list,
//! several step sizes are tried, the evaluator picks the best list, and the
//! nudge is thrown away before the next request.

pub mod actor;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod last;
mod net;
pub mod tensor;
pub mod training;

pub use actor::{ActorModel, Decode, GeneratedList, Request};
pub use error::{Error, Result};
pub use evaluator::EvaluatorModel;
pub use net::ModelDims;
pub use tensor::{AdaptableMask, ParamRead, ParamSet, ParamView, Tensor};
