//! Domain-adaptive crop/weed/soil segmentation from RGB-D input.
//!
//! The pipeline fuses depth-gradient-augmented depth features into RGB
//! features with cross-attention, trains with complementary geometry-aware
//! input masking, and adapts to an unlabeled target domain with an EMA
//! teacher. Everything is generic over the element type; the aliases below
//! pin the common choices.

pub mod ablation;
pub mod config;
pub mod error;
pub mod depth_features;
pub mod encoders;
pub mod evaluation;
pub mod fusion;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod params;
pub mod synthdata;
pub mod uda;

pub use error::{Error, Result};
pub use numerics::{grad_check, Graph, Scalar, Tensor, Var, IGNORE_INDEX};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
