//! Desk-scale laboratory for virtual contrast enhancement of brain MRI.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod export;
pub mod flowmatch;
pub mod mask;
pub mod metrics;
pub mod nets;
pub mod ode;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod posterior;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
pub use phantom::Modality;
pub use tensor::Tensor;
