//! Query-propagation multiple-object tracking: a small autodiff engine, a
//! transformer detector whose queries follow objects across frames, clip-level
//! training, online inference and tracking metrics.

pub mod evaluation;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod matching;
pub mod model;
pub mod qim;
pub mod scalar;
pub mod simulator;
pub mod tensor;
pub mod tracker;
pub mod training;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Clip32 = simulator::Clip<f32>;
pub type Clip64 = simulator::Clip<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type BBox32 = geometry::BBox<f32>;
pub type BBox64 = geometry::BBox<f64>;
