//! Held-out evaluation and the training-data ablation of both forecasters.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{metrics, Metrics};
use crate::error::{validation, Result};
use crate::models::{
    ae_train, init_rng, lstm_train, AeConfig, AeModel, LstmConfig, LstmModel, Prepared, TrainConfig, TrainReport,
};

/// Predicted and reference values for one horizon step.
#[derive(Debug, Clone, Default)]
pub struct Pairs {
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ae,
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ae => "ae",
            ModelKind::Lstm => "lstm",
        }
    }
}

const EVAL_BATCH: usize = 16;

/// Free-running AE forecasts from every held-out-time origin, read at the
/// held-out site pixels. One entry per horizon step.
pub fn evaluate_ae(model: &AeModel<f32>, prep: &Prepared) -> Result<Vec<Pairs>> {
    let (t, k) = (model.cfg.input_len, model.cfg.horizon);
    let windows = prep.ae_test_windows(t, k);
    let sites = prep.heldout_sites();
    let mut out = vec![Pairs::default(); k];
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let maps = model.forecast(&windows.inputs::<f32>(chunk))?;
        for (h, m) in maps.iter().enumerate() {
            let plane = prep.geo.len();
            for (b, &wi) in chunk.iter().enumerate() {
                let day = windows.origins[wi] + h + 1;
                for &s in &sites {
                    let (px, py) = prep.site_px[s];
                    out[h].pred.push(m.data()[b * plane + prep.geo.index(px, py)] as f64);
                    out[h].truth.push(prep.reference(s, day) as f64);
                }
            }
        }
    }
    Ok(out)
}

/// LSTM forecasts at held-out sites from every held-out-time origin.
pub fn evaluate_lstm(model: &LstmModel<f32>, prep: &Prepared) -> Result<Vec<Pairs>> {
    let (t, k) = (model.cfg.input_len, model.cfg.horizon);
    let origins = prep.split.test_origins(t, k);
    let windows = prep.lstm_windows_at(&prep.heldout_sites(), &origins, t, k);
    let mut out = vec![Pairs::default(); k];
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH * 4) {
        let pred = model.forecast(&windows.inputs::<f32>(chunk))?;
        for (b, &wi) in chunk.iter().enumerate() {
            let (s, o) = windows.windows[wi];
            for h in 0..k {
                out[h].pred.push(pred.data()[b * k + h] as f64);
                out[h].truth.push(prep.reference(s, o + h + 1) as f64);
            }
        }
    }
    Ok(out)
}

/// Training-period mean at the held-out evaluation points.
pub fn evaluate_climatology(prep: &Prepared, horizon: usize, input_len: usize) -> Vec<Pairs> {
    let c = prep.climatology() as f64;
    let origins = prep.split.test_origins(input_len, horizon);
    (1..=horizon)
        .map(|h| {
            let mut p = Pairs::default();
            for &o in &origins {
                for s in prep.heldout_sites() {
                    p.pred.push(c);
                    p.truth.push(prep.reference(s, o + h) as f64);
                }
            }
            p
        })
        .collect()
}

/// Same-day radar inversion at held-out sites over held-out time.
pub fn evaluate_inversion(prep: &Prepared, theta_r: f32, theta_s: f32) -> Pairs {
    let n = prep.n_days();
    let mut p = Pairs::default();
    for s in prep.heldout_sites() {
        for d in prep.split.train_end..n {
            if let Some([vv, inc, ndvi]) = prep.radar_obs[s * n + d] {
                p.pred.push(super::invert_vv(vv, ndvi, inc, theta_r, theta_s) as f64);
                p.truth.push(prep.reference(s, d) as f64);
            }
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub fraction: f64,
    pub seed: u64,
    /// Step `1..=K`, `all` for the pooled steps, `0` for same-day retrieval.
    pub horizon: String,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub pearson: f64,
    pub n: usize,
}

impl ReportRow {
    fn new(model: &str, fraction: f64, seed: u64, horizon: String, m: Metrics) -> Self {
        ReportRow {
            model: model.to_string(),
            fraction,
            seed,
            horizon,
            rmse: m.rmse,
            mae: m.mae,
            r2: m.r2,
            pearson: m.pearson,
            n: m.n,
        }
    }
}

/// Per-step rows plus a pooled `all` row.
pub fn rows_for(model: &str, fraction: f64, seed: u64, steps: &[Pairs]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::with_capacity(steps.len() + 1);
    let mut all = Pairs::default();
    for (h, p) in steps.iter().enumerate() {
        rows.push(ReportRow::new(model, fraction, seed, (h + 1).to_string(), metrics(&p.pred, &p.truth)?));
        all.pred.extend_from_slice(&p.pred);
        all.truth.extend_from_slice(&p.truth);
    }
    rows.push(ReportRow::new(model, fraction, seed, "all".into(), metrics(&all.pred, &all.truth)?));
    Ok(rows)
}

/// Same-day inversion row (horizon `0`).
pub fn inversion_row(prep: &Prepared, theta_r: f32, theta_s: f32) -> Result<ReportRow> {
    let p = evaluate_inversion(prep, theta_r, theta_s);
    Ok(ReportRow::new("inversion", 1.0, 0, "0".into(), metrics(&p.pred, &p.truth)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryCell {
    pub model: String,
    pub fraction: f64,
    pub horizon: String,
    pub seeds: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
    pub pearson_mean: f64,
    pub pearson_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, std)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "model,fraction,seed,horizon,rmse,mae,r2,pearson,n";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.model, r.fraction, r.seed, r.horizon, r.rmse, r.mae, r.r2, r.pearson, r.n
            );
        }
        s
    }

    /// Mean and sample standard deviation across seeds per
    /// `(model, fraction, horizon)`, in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryCell> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<(String, u64, String), Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.model.clone(), r.fraction.to_bits(), r.horizon.clone());
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|key| {
                let rows = &groups[&key];
                let col = |f: fn(&ReportRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (rmse_mean, rmse_std) = col(|r| r.rmse);
                let (mae_mean, mae_std) = col(|r| r.mae);
                let (r2_mean, r2_std) = col(|r| r.r2);
                let (pearson_mean, pearson_std) = col(|r| r.pearson);
                SummaryCell {
                    model: key.0,
                    fraction: f64::from_bits(key.1),
                    horizon: key.2,
                    seeds: rows.len(),
                    rmse_mean,
                    rmse_std,
                    mae_mean,
                    mae_std,
                    r2_mean,
                    r2_std,
                    pearson_mean,
                    pearson_std,
                }
            })
            .collect()
    }

    /// Seed-mean pooled RMSE of `model` at `fraction`.
    pub fn mean_rmse(&self, model: &str, fraction: f64) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|c| c.model == model && c.fraction == fraction && c.horizon == "all")
            .map(|c| c.rmse_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub models: Vec<ModelKind>,
    pub ae: AeConfig,
    pub lstm: LstmConfig,
    pub ae_train: TrainConfig,
    pub lstm_train: TrainConfig,
}

pub fn train_ae(
    prep: &Prepared,
    cfg: &AeConfig,
    tc: &TrainConfig,
    fraction: f64,
    seed: u64,
) -> Result<(AeModel<f32>, TrainReport)> {
    let data = prep.ae_train_windows(cfg.input_len, cfg.horizon, fraction);
    if data.is_empty() {
        return Err(validation(format!("fraction {fraction} leaves no AE training windows")));
    }
    let mut model =
        AeModel::<f32>::new(cfg.clone(), prep.geo.height as usize, prep.geo.width as usize, &mut init_rng(seed))?;
    let report = ae_train(&mut model, &data, tc, seed)?;
    Ok((model, report))
}

pub fn train_lstm(
    prep: &Prepared,
    cfg: &LstmConfig,
    tc: &TrainConfig,
    fraction: f64,
    seed: u64,
) -> Result<(LstmModel<f32>, TrainReport)> {
    let data = prep.lstm_train_windows(cfg.input_len, cfg.horizon, fraction);
    if data.is_empty() {
        return Err(validation(format!("fraction {fraction} leaves no LSTM training windows")));
    }
    let mut model = LstmModel::<f32>::new(cfg.clone(), &mut init_rng(seed))?;
    let report = lstm_train(&mut model, &data, tc, seed)?;
    Ok((model, report))
}

fn run_cell(
    prep: &Prepared,
    cfg: &AblationConfig,
    kind: ModelKind,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ReportRow>> {
    log::info!("ablation: training {} at fraction {fraction}, seed {seed}", kind.name());
    let steps = match kind {
        ModelKind::Ae => {
            let (m, _) = train_ae(prep, &cfg.ae, &cfg.ae_train, fraction, seed)?;
            evaluate_ae(&m, prep)?
        }
        ModelKind::Lstm => {
            let (m, _) = train_lstm(prep, &cfg.lstm, &cfg.lstm_train, fraction, seed)?;
            evaluate_lstm(&m, prep)?
        }
    };
    rows_for(kind.name(), fraction, seed, &steps)
}

/// Trains every `(model, fraction, seed)` cell and evaluates it on held-out
/// sites over held-out time, adding a training-mean reference row per
/// fraction. Fractions shorter than one window are skipped with a warning.
/// Cells run in parallel; rows come back in grid order.
pub fn ablation_experiment(prep: &Prepared, cfg: &AblationConfig) -> Result<MetricReport> {
    if cfg.fractions.is_empty() || cfg.seeds.is_empty() || cfg.models.is_empty() {
        return Err(validation("ablation needs fractions, seeds and models"));
    }
    let mut cells = Vec::new();
    let mut usable = Vec::new();
    for &f in &cfg.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(validation(format!("fraction {f} outside (0, 1]")));
        }
        let days = prep.split.train_range(f).len();
        let need = cfg.ae.input_len.max(cfg.lstm.input_len) + cfg.ae.horizon.max(cfg.lstm.horizon);
        if days < need {
            log::warn!("skipping fraction {f}: {days} training days, {need} needed for one window");
            continue;
        }
        usable.push(f);
        for &kind in &cfg.models {
            for &seed in &cfg.seeds {
                cells.push((kind, f, seed));
            }
        }
    }
    let results: Vec<Result<Vec<ReportRow>>> =
        cells.par_iter().map(|&(kind, f, seed)| run_cell(prep, cfg, kind, f, seed)).collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let horizon = cfg.lstm.horizon.max(cfg.ae.horizon);
    let clim = evaluate_climatology(prep, horizon, cfg.lstm.input_len.max(cfg.ae.input_len));
    for f in usable {
        rows.extend(rows_for("climatology", f, 0, &clim)?);
    }
    Ok(MetricReport { rows })
}
