//! Two-stage face-forgery detection: facial-part masked recovery of face
//! clips, followed by a residual mapping network that amplifies the
//! recovery discrepancy between pristine and manipulated faces.

pub mod autodiff;
pub mod checkpoint;
pub mod clip;
pub mod dataset;
pub mod error;
pub mod figures;
pub mod geometry;
pub mod mapping;
pub mod masking;
pub mod meta;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod recovery;
pub mod seeds;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
