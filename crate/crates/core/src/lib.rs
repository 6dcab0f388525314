//! Conditional Wasserstein GAN synthesis of 3-component seismic waveforms,
//! with the dataset construction, classifier and experiment harness used to
//! measure synthetic quality and augmentation benefit.

mod binio;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod models;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod trace_store;
pub mod training;

pub use error::{Error, Result};
