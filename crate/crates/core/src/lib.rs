//! World-model agent that learns from demonstrations and rewards by
//! minimizing free-energy objectives over a recurrent state-space model.

pub mod container;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod freeenergy;
pub mod nets;
pub mod replay;
pub mod rssm;
pub mod trainer;

pub use error::{Error, Result};
