//! Event-based plug-in for frozen image models on synthetic scenes.
//!
//! A frozen image encoder and task head see sparse, possibly degraded RGB
//! frames. A trainable plug (event encoder + e-former) fuses event streams
//! into the image features, both to repair degraded anchors and to produce
//! features between frames.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod degrade;
pub mod efformer;
pub mod encoders;
pub mod error;
pub mod event_file;
pub mod evalharness;
pub mod event_model;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
