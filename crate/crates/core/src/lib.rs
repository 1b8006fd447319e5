pub mod ablation;
pub mod archive;
pub mod autograd;
pub mod checkpoint;
mod codec;
pub mod error;
pub mod imaging;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod sampling;
pub mod training;
pub mod unfolding;
pub mod wavelet;

pub use error::{Error, Result};
