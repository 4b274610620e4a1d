//! Self-supervised pre-training for multi-channel surface EMG.
//!
//! The pipeline has two ideas at its centre:
//!
//! * patches are labelled by the nearest K-means centroid of their short-time
//!   Fourier features, and a transformer encoder learns to predict the labels
//!   of masked patches ([`spectral`], [`train`]);
//! * attention uses a cylindrical rotary position embedding that rotates half
//!   of every query/key head along the time axis and the other half around the
//!   electrode ring ([`cyrope`]).
//!
//! Everything trainable lives in [`nn`], with hand-written backward passes that
//! are checked against finite differences by [`nn::gradcheck`].

pub mod config;
pub mod cyrope;
pub mod error;
pub mod nn;
pub mod signal;
pub mod spectral;
pub mod train;

mod binio;

pub use config::RunConfig;
pub use cyrope::CyRopeTable;
pub use error::{Error, Result};
pub use nn::{ModelConfig, ModelParams, PeType, TokenGrid};
pub use signal::{PreprocessConfig, SignalSegment};
pub use spectral::{SpectralCodebook, StftConfig};
pub use train::{RunReport, TrainMode};
