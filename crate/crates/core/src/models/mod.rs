//! The imagery-only ConvLSTM encoder-decoder (AE) and the sensor-fused site
//! LSTM, their training loops and the data windows they consume.

pub mod ae;
pub mod dataset;
pub mod lstm;
pub mod train;
pub mod windows;

pub use ae::{ae_forward, AeConfig, AeModel};
pub use dataset::{prepare, FeatureSettings, Prepared, Split};
pub use lstm::{lstm_forecast, LstmConfig, LstmModel};
pub use train::{ae_mse, ae_train, init_rng, lstm_mse, lstm_train, teacher_forcing_prob, TrainConfig, TrainReport};
pub use windows::{origins_in, MapWindows, SiteWindows};

use serde::Serialize;

use crate::raster::Raster2D;

/// `K` forecast maps issued at `origin` (days since epoch).
#[derive(Debug, Clone)]
pub struct MapForecast {
    pub origin: i64,
    pub timestamps: Vec<i64>,
    pub maps: Vec<Raster2D>,
}

/// `K` forecast values for one site.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteForecast {
    pub site_id: String,
    pub origin: i64,
    pub timestamps: Vec<i64>,
    pub values: Vec<f32>,
}
