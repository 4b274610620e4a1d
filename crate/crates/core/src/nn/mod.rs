//! Trainable computation: CNN patch embedder, transformer encoder with
//! rotary attention, and the pre-training and kinematics heads.

pub mod attention;
pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_params, read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{MaskStyle, ModelConfig, PeType};
pub use model::{kin_head, ssl_head, Model, PatchInput, TokenGrid};
pub use params::ModelParams;
pub use tensor::{Mat, Tensor};
