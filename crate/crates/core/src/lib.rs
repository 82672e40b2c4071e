//! Contrastive multiple instance learning for person re-identification from
//! bag-level identity labels.

pub mod autodiff;
pub mod bag_data;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod models;
pub mod report;
pub mod sampling;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
