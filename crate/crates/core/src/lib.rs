pub mod checkpoint;
pub mod datapipe;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod image;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use image::GrayImage;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type DiffusionModel = diffusion::ConditionedDenoiser<f32>;
pub type DiffusionModel64 = diffusion::ConditionedDenoiser<f64>;
pub type DenoiserNet = denoiser::DenoiserModel<f32>;
pub type DenoiserNet64 = denoiser::DenoiserModel<f64>;
pub type GlyphClassifier = evalharness::Classifier<f32>;
pub type GlyphClassifier64 = evalharness::Classifier<f64>;
