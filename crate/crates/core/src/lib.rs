//! Domain-agnostic mutual prompting on miniature frozen vision-language encoders.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod prompter;
pub mod pseudo;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{DampError, Result};
pub use scalar::Scalar;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Encoders64 = encoder::Encoders<f64>;
pub type Encoders32 = encoder::Encoders<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type Trainer32 = train::Trainer<f32>;
