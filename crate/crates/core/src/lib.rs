//! Training–inference mismatch laboratory.
//!
//! A toy autoregressive policy is trained with REINFORCE and GRPO-style
//! objectives while its rollout and training forward passes run under
//! separately chosen numeric [`ExecutionProfile`]s. With equal profiles the
//! two paths agree bit for bit, which gives a mismatch-free reference; with a
//! reduced-precision rollout profile the per-token log-probability gap can be
//! measured and the correction objectives compared against that reference.

pub mod detkernels;
pub mod expcli;
pub mod policy;
mod preset;
pub mod rlcore;
pub mod rng;
pub mod rollout;
pub mod tasks;
pub mod trainer;

pub use detkernels::{ExecutionProfile, Matrix, PrecisionMode, ReductionOrder};
pub use policy::{PolicyConfig, PolicyParams, Token};
pub use rlcore::{LossBreakdown, LossConfig, RatioTriple, Variant};
pub use rollout::{TokenRecord, Trajectory, TrajectoryBatch};
pub use tasks::{Prompt, TaskKind, TaskSpec};
