//! Soil-moisture forecasting from multi-polarisation radar and optical
//! imagery.
//!
//! The crate covers the whole desk-scale pipeline: a gridded cube container
//! ([`raster`]), CSV ingestion and daily alignment ([`ingest`]), physical
//! preprocessing into a fixed 14-channel feature stack ([`features`]), a
//! seeded synthetic vineyard that acts as ground truth ([`simworld`]),
//! from-scratch reverse-mode numerics ([`nn`]), the ConvLSTM encoder-decoder
//! and sensor-fused LSTM forecasters ([`models`]), metrics and the data
//! ablation ([`eval`]), and the command implementations behind the
//! `smcforge` binary ([`pipeline`]).
//!
//! Model and tensor code is generic over [`Scalar`] (`f32` for training,
//! `f64` for gradient verification); the aliases below name the usual
//! instantiations.

pub mod error;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod simworld;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type AeModel32 = models::AeModel<f32>;
pub type AeModel64 = models::AeModel<f64>;
pub type LstmModel32 = models::LstmModel<f32>;
pub type LstmModel64 = models::LstmModel<f64>;
