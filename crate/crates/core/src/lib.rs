#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]
//! Multi-channel total-variation super-resolution of thick-sliced MR volumes.

pub mod baselines;
pub mod error;
pub mod estimation;
pub mod forward;
pub mod harness;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod regularizer;
pub mod report;
pub mod solver;
pub mod volume;

pub use error::{Error, Result};
pub use forward::{Gap, OperatorMode, ProfileKind, ProjectionOperator, SliceProfile};
pub use pipeline::{ChannelInput, Method, PipelineConfig, Reconstruction};
pub use regularizer::PriorKind;
pub use report::RunReport;
pub use solver::{Channel, InnerSolver, ModelSpec, Observation, Solution, SolverOptions};
pub use volume::{AffineMap, GridSpec, Volume, WorldBox};
