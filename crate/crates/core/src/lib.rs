//! Two-stage mitosis detection: a dense detector proposes candidates and a
//! patch classifier filters them.

pub mod attention;
pub mod backbone;
pub mod cascade;
pub mod checkpoint;
pub mod classifier;
pub mod data_eval;
pub mod detection_head;
pub mod detector;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod normalization;

pub use error::{Error, Result};
