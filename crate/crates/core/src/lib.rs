//! Group-relative policy optimisation with verifiable rewards for grounding
//! and report generation, sized to run on one machine.
//!
//! The building blocks are box geometry, the answer wire format, optimal
//! assignment for soft-F1, lexical report rewards, thresholded evaluation,
//! the clipped group-relative objective, a synthetic policy environment, a
//! concurrent reward pool and the training loop that ties them together.

pub mod assignment;
pub mod boxformat;
pub mod evaluation;
pub mod geometry;
pub mod grpo;
pub mod policy;
pub mod reward_pool;
pub mod rewards;
pub mod seed;
pub mod trainer;
