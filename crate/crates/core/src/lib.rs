pub mod diffusion;
pub mod envs;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod preference;
pub mod ras;
pub mod rng;
pub mod store;

pub use error::{PamError, Result};
pub use rng::Rng;
