//! Multimodal document pretraining on synthetic pages.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod quantizer;
pub mod seeding;
pub mod sequence;
pub mod tensor;
pub mod text_encoder;
pub mod trainer;
pub mod visual_encoder;

pub use error::{Error, Result};
