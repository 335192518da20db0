//! Single-image reflection removal: synthetic training data, a recurrent
//! detection-then-removal network with reflection confidence maps, the
//! five-term training loss, and a PSNR/SSIM evaluation harness.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imagecore;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
