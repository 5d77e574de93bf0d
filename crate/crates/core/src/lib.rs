//! Curvature-based identification of adversarial observations for
//! Q-network policies, with the attack suite used to evaluate it.

pub mod agent;
pub mod attacks;
pub mod aware;
pub mod detector;
pub mod env;
pub mod error;
pub mod eval;
pub mod fd;
pub mod linalg;
pub mod net;
pub mod optim;
pub mod seed;
pub mod stats;
pub mod surrogate;

pub use error::{Error, Result};
pub use linalg::Mat64;
pub use net::{ActionDist, Activation, Model, PolicyNet};
