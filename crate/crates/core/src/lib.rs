//! Differentiable classical ISP stages driven by a feedback controller that
//! reads a downstream recognizer's features.

pub mod controller;
pub mod error;
pub mod gradsuite;
pub mod init_buffer;
pub mod io;
pub mod isp;
pub mod ndiff;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
