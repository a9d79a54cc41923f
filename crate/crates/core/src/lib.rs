//! Multi-task CSI feedback: synthetic channels, angular-delay preprocessing,
//! encoder/decoder compression models with a shared encoder, and the
//! pre-train / fine-tune / test training scheme.

mod bytes;
pub mod channel;
pub mod config;
pub mod error;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
