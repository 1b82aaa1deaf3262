//! Paired-sample facial expression recognition with neutral-disentangled
//! features and self-paced sample selection.

pub mod backbone;
pub mod datamodel;
pub mod dataset_io;
pub mod error;
pub mod eval_report;
pub mod model;
pub mod ndf_head;
pub mod optim;
pub mod rng;
pub mod spl_scheduler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
