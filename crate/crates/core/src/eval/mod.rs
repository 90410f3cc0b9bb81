//! Forecast metrics, the radar inversion baseline, heatmap rendering and
//! the AE-versus-LSTM data ablation.

pub mod ablation;
pub mod baseline;
pub mod render;

pub use ablation::{
    ablation_experiment, evaluate_ae, evaluate_lstm, AblationConfig, MetricReport, ReportRow, SummaryCell,
};
pub use baseline::{baseline_invert, invert_vv};
pub use render::{encode_heatmap, heat_color, render_heatmap, DRY_RGB, NODATA_RGB, WET_RGB};

use serde::{Deserialize, Serialize};

use crate::error::{argument, validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub pearson: f64,
    pub n: usize,
}

/// RMSE, MAE, R^2 and Pearson correlation over pairs where both values are
/// present. Pearson is 0 when the predictions are constant.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(argument(format!("{} predictions for {} reference values", pred.len(), truth.len())));
    }
    let pairs: Vec<(f64, f64)> =
        pred.iter().zip(truth).filter(|(p, t)| !p.is_nan() && !t.is_nan()).map(|(&p, &t)| (p, t)).collect();
    let n = pairs.len();
    if n < 2 {
        return Err(argument(format!("need at least 2 valid pairs, got {n}")));
    }
    let nf = n as f64;
    let mean_t = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let mean_p = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let (mut sse, mut sae, mut sst, mut spp, mut spt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(p, t) in &pairs {
        let e = p - t;
        sse += e * e;
        sae += e.abs();
        sst += (t - mean_t) * (t - mean_t);
        spp += (p - mean_p) * (p - mean_p);
        spt += (p - mean_p) * (t - mean_t);
    }
    if sst == 0.0 {
        return Err(validation("reference values have zero variance; R^2 is undefined"));
    }
    let pearson = if spp == 0.0 { 0.0 } else { (spt / (spp * sst).sqrt()).clamp(-1.0, 1.0) };
    Ok(Metrics { rmse: (sse / nf).sqrt(), mae: sae / nf, r2: 1.0 - sse / sst, pearson, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        let t = [0.1, 0.2, 0.3, 0.4];
        let m = metrics(&t, &t).unwrap();
        assert_eq!((m.rmse, m.r2, m.n), (0.0, 1.0, 4));
        assert!((m.pearson - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        let m = metrics(&shifted, &t).unwrap();
        assert!((m.rmse - 0.1).abs() < 1e-12 && (m.mae - 0.1).abs() < 1e-12);

        let mean = [0.25; 4];
        let m = metrics(&mean, &t).unwrap();
        assert!(m.r2.abs() < 1e-12);
        assert_eq!(m.pearson, 0.0);

        assert!(metrics(&[0.1], &[0.1, 0.2]).is_err());
        assert!(metrics(&[0.1, 0.2], &[0.3, 0.3]).is_err());
        assert!(metrics(&[0.1, f64::NAN, 0.3], &[0.1, 0.2, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn metric_invariants(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..60)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(m) = metrics(&p, &t) {
                prop_assert!(m.rmse >= m.mae - 1e-12);
                prop_assert!(m.r2 <= 1.0 + 1e-12);
                prop_assert!((-1.0..=1.0).contains(&m.pearson));
            }
        }
    }
}
