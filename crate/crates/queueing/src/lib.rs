//! Two routers sending requests to two servers, trained with MAPPO and
//! coordinated by either a measured entangled state or shared randomness.

pub mod checks;
pub mod compare;
pub mod coordinator;
pub mod env;
pub mod error;
pub mod mappo;
pub mod nn;

pub use error::{QueueError, Result};
