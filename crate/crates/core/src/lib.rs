//! Closed-loop actor/learner post-training on a gridworld task family.

pub mod actor;
pub mod algorithms;
pub mod bus;
pub mod envsim;
pub mod harness;
pub mod learner;
pub mod policy;
pub mod store;
pub mod util;
