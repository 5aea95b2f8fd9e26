//! Two-block encoder-decoder point-cloud reconstruction.
//!
//! Coarse, partially wrong point clouds (the union of several back-projected
//! depth views) are mapped to dense object clouds by two stacked
//! shared-MLP/max-pool encoders with fully connected decoders. The crate also
//! ships the Chamfer / Earth Mover's metrics used both as training losses and
//! for evaluation, a synthetic multi-view data generator with radar-style
//! corruption, and the training / loss-ablation harness.

pub mod error;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
