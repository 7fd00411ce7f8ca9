//! Continual tuning for interactive segmentation.
//!
//! A shared encoder–decoder backbone feeds class-specific head generators.
//! Rounds of simulated expert revision refine the model: scans are scored by
//! importance, the top ones are revised, revisions are merged with AI
//! predictions into hybrid annotations, and only the revised classes' heads
//! are tuned while the shared network stays frozen.

pub mod domain;
pub mod error;
pub mod experiment;
pub mod hybrid;
pub mod model;
pub mod nn;
pub mod persist;
pub mod phantom;
pub mod selection;
pub mod train;

pub use error::{Error, Result};
