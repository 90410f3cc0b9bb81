//! Turns aligned records and imagery into normalised model inputs, with the
//! fixed train/held-out split.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::windows::{origins_in, MapWindows, SiteWindows};
use crate::error::{validation, Result};
use crate::features::{
    assemble_stack, complete_inputs, incidence_normalize, ChannelStats, FeatureInputs, StackMode, StatsAccumulator,
    DEFAULT_CROP_THRESHOLD, DEFAULT_REFERENCE_INCIDENCE_DEG,
};
use crate::ingest::{AlignedDataset, SiteMeta, DEFAULT_GAP_FILL_DAYS};
use crate::raster::{ChannelId, GridGeo, Raster2D, SceneSeries, N_FEATURES};

fn default_gap() -> u32 {
    DEFAULT_GAP_FILL_DAYS
}
fn default_ref() -> f32 {
    DEFAULT_REFERENCE_INCIDENCE_DEG
}
fn default_true() -> bool {
    true
}
fn default_threshold() -> f32 {
    DEFAULT_CROP_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSettings {
    #[serde(default = "default_gap")]
    pub gap_fill_days: u32,
    #[serde(default = "default_ref")]
    pub incidence_ref_deg: f32,
    #[serde(default = "default_true")]
    pub normalize_incidence: bool,
    #[serde(default = "default_threshold")]
    pub crop_threshold: f32,
    /// Date rendered by `ndvi-map`; the latest optical acquisition if absent.
    #[serde(default)]
    pub ndvi_date: Option<String>,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        FeatureSettings {
            gap_fill_days: default_gap(),
            incidence_ref_deg: default_ref(),
            normalize_incidence: true,
            crop_threshold: default_threshold(),
            ndvi_date: None,
        }
    }
}

/// Leading training days and held-out sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub n_days: usize,
    /// Days `0..train_end` are training time; the rest is held out.
    pub train_end: usize,
    /// Per site: never used for training.
    pub heldout: Vec<bool>,
}

impl Split {
    /// Holds out the last `holdout_time` of the days and an evenly spaced
    /// `holdout_sites` share of the sites.
    pub fn new(n_days: usize, n_sites: usize, holdout_time: f64, holdout_sites: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&holdout_time) || !(0.0..1.0).contains(&holdout_sites) {
            return Err(validation("holdout shares must lie in [0, 1)"));
        }
        let train_end = ((n_days as f64) * (1.0 - holdout_time)).floor() as usize;
        let count = ((n_sites as f64) * holdout_sites).round() as usize;
        let mut heldout = vec![false; n_sites];
        for j in 0..count {
            heldout[(j + 1) * n_sites / count - 1] = true;
        }
        Ok(Split { n_days, train_end, heldout })
    }

    /// The trailing `fraction` of the training days.
    pub fn train_range(&self, fraction: f64) -> Range<usize> {
        let len = ((self.train_end as f64) * fraction).ceil() as usize;
        self.train_end - len.min(self.train_end)..self.train_end
    }

    /// Forecast origins whose targets all lie in held-out time.
    pub fn test_origins(&self, input_len: usize, horizon: usize) -> Vec<usize> {
        let first = self.train_end.saturating_sub(1).max(input_len - 1);
        (first..self.n_days.saturating_sub(horizon)).collect()
    }
}

/// Normalised daily model inputs for one scene/sensor record set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub geo: GridGeo,
    pub days: Vec<i64>,
    pub site_ids: Vec<String>,
    pub site_px: Vec<(usize, usize)>,
    pub stats: ChannelStats,
    pub split: Split,
    /// `days x 14 x H x W`, imagery-only stacks.
    pub ae_frames: Vec<f32>,
    /// `sites x days x 14`, fused site vectors.
    pub site_features: Vec<f32>,
    /// `sites x days` aligned sensor values, NaN when missing.
    pub sensor: Vec<f32>,
    /// `days x H x W` reference maps when available.
    pub truth: Option<Vec<f32>>,
    /// `sites x days`: same-day `(vv_db, inc_deg, ndvi)` on radar days.
    pub radar_obs: Vec<Option<[f32; 3]>>,
}

/// NaN-ignoring mean of the 3x3 neighbourhood (clipped at the border).
fn patch_mean(r: &Raster2D, px: usize, py: usize) -> f32 {
    let (w, h) = (r.width(), r.height());
    let (mut sum, mut n) = (0.0f64, 0usize);
    for y in py.saturating_sub(1)..(py + 2).min(h) {
        for x in px.saturating_sub(1)..(px + 2).min(w) {
            let v = r.get(x, y);
            if !v.is_nan() {
                sum += v as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        f32::NAN
    } else {
        (sum / n as f64) as f32
    }
}

/// Builds model inputs. Normalisation statistics come from training days
/// only, and lagged soil moisture statistics from training sites only.
pub fn prepare(
    aligned: &AlignedDataset,
    series: &SceneSeries,
    sites: &[SiteMeta],
    truth: Option<&SceneSeries>,
    settings: &FeatureSettings,
    split: Split,
) -> Result<Prepared> {
    let geo = *series.geo().ok_or_else(|| validation("empty scene series"))?;
    let n_days = aligned.days.len();
    let n_sites = aligned.site_ids.len();
    if split.n_days != n_days || split.heldout.len() != n_sites {
        return Err(validation("split does not match the aligned data"));
    }
    let by_id: BTreeMap<&str, &SiteMeta> = sites.iter().map(|s| (s.site_id.as_str(), s)).collect();
    let site_px = aligned
        .site_ids
        .iter()
        .map(|id| {
            let s = by_id
                .get(id.as_str())
                .ok_or_else(|| validation(format!("sensor site {id} missing from site table")))?;
            if !geo.contains(s.px as i64, s.py as i64) {
                return Err(validation(format!("site {id} at ({}, {}) lies outside the grid", s.px, s.py)));
            }
            Ok((s.px as usize, s.py as usize))
        })
        .collect::<Result<Vec<_>>>()?;

    // lagged moisture: latest aligned value carried forward
    let mut lag = vec![f32::NAN; n_sites * n_days];
    for s in 0..n_sites {
        let mut last = f32::NAN;
        for d in 0..n_days {
            let v = aligned.smc[s][d];
            if !v.is_nan() {
                last = v;
            }
            lag[s * n_days + d] = last;
        }
    }

    // raw daily inputs
    let mut daily: Vec<FeatureInputs> = Vec::with_capacity(n_days);
    let mut radar_obs = vec![None; n_sites * n_days];
    for d in 0..n_days {
        let mut inputs = FeatureInputs::new();
        for (c, &id) in aligned.channels.iter().enumerate() {
            if !id.feature_index().is_some() {
                continue;
            }
            if let Some(r) = aligned.eo[d][c] {
                let stack = &series.stacks[r.stack];
                let plane = stack.get(id).expect("channel listed").clone();
                let plane = match (id, settings.normalize_incidence, stack.get(ChannelId::IncDeg)) {
                    (ChannelId::VvDb | ChannelId::VhDb | ChannelId::HhDb | ChannelId::HvDb, true, Some(inc))
                        if !inc.all_nan() =>
                    {
                        incidence_normalize(&plane, inc, settings.incidence_ref_deg)?
                    }
                    _ => plane,
                };
                inputs.insert(id, plane);
            }
        }
        inputs.insert(ChannelId::RainMm, Raster2D::filled(geo, aligned.weather[d].rain_mm)?);
        daily.push(inputs);
    }

    // same-day radar observations for the inversion baseline
    let vv_idx = aligned.channels.iter().position(|c| *c == ChannelId::VvDb);
    let inc_idx = aligned.channels.iter().position(|c| *c == ChannelId::IncDeg);
    for d in 0..n_days {
        let (Some(vi), Some(ii)) = (vv_idx, inc_idx) else { break };
        let (Some(vr), Some(ir)) = (aligned.eo[d][vi], aligned.eo[d][ii]) else { continue };
        if vr.age != 0 || ir.stack != vr.stack {
            continue;
        }
        let stack = &series.stacks[vr.stack];
        let (vv, inc) = (stack.get(ChannelId::VvDb).expect("listed"), stack.get(ChannelId::IncDeg).expect("listed"));
        let (_, planes) = complete_inputs(&daily[d], aligned.days[d])?;
        let ndvi = planes[ChannelId::Ndvi.feature_index().expect("feature")].as_ref();
        for (s, &(px, py)) in site_px.iter().enumerate() {
            let nd = ndvi.map(|p| p.get(px, py)).unwrap_or(f32::NAN);
            let obs = [vv.get(px, py), inc.get(px, py), nd];
            if obs.iter().all(|v| !v.is_nan()) {
                radar_obs[s * n_days + d] = Some(obs);
            }
        }
    }

    // statistics over training time
    let mut acc = StatsAccumulator::new();
    let mut completed = Vec::with_capacity(n_days);
    for (d, inputs) in daily.iter().enumerate() {
        let (_, planes) = complete_inputs(inputs, aligned.days[d])?;
        if d < split.train_end {
            for (id, p) in ChannelId::FEATURES.into_iter().zip(&planes) {
                if let Some(p) = p {
                    acc.push_plane(id, p.values());
                }
            }
            for s in (0..n_sites).filter(|&s| !split.heldout[s]) {
                acc.push(ChannelId::SmcLag, lag[s * n_days + d]);
            }
        }
        completed.push(planes);
    }
    let stats = acc.finish(&ChannelId::FEATURES);

    let plane = geo.len();
    let mut ae_frames = Vec::with_capacity(n_days * N_FEATURES * plane);
    for (d, inputs) in daily.iter().enumerate() {
        let assembled = assemble_stack(inputs, aligned.days[d], &stats, StackMode::Ae)?;
        for (_, r) in assembled.stack.channels() {
            ae_frames.extend_from_slice(r.values());
        }
    }

    let mut site_features = vec![0.0f32; n_sites * n_days * N_FEATURES];
    for (s, &(px, py)) in site_px.iter().enumerate() {
        for d in 0..n_days {
            let at = (s * n_days + d) * N_FEATURES;
            for (c, id) in ChannelId::FEATURES.into_iter().enumerate() {
                let stat = stats.require(id)?;
                let raw = if id == ChannelId::SmcLag {
                    lag[s * n_days + d]
                } else {
                    completed[d][c].as_ref().map(|p| patch_mean(p, px, py)).unwrap_or(f32::NAN)
                };
                site_features[at + c] = if raw.is_nan() { 0.0 } else { stat.zscore(raw) };
            }
        }
    }

    let sensor: Vec<f32> = aligned.smc.iter().flat_map(|v| v.iter().copied()).collect();

    let truth = match truth {
        None => None,
        Some(t) => {
            let index: BTreeMap<i64, usize> = t.stacks.iter().enumerate().map(|(i, s)| (s.timestamp(), i)).collect();
            let mut maps = Vec::with_capacity(n_days * plane);
            for &day in &aligned.days {
                let i = index.get(&day).ok_or_else(|| validation(format!("reference maps lack day {day}")))?;
                let map =
                    t.stacks[*i].get(ChannelId::SmcMap).ok_or_else(|| validation("reference cube lacks SMC_MAP"))?;
                if *map.geo() != geo {
                    return Err(validation("reference maps are on a different grid"));
                }
                maps.extend_from_slice(map.values());
            }
            Some(maps)
        }
    };

    Ok(Prepared {
        geo,
        days: aligned.days.clone(),
        site_ids: aligned.site_ids.clone(),
        site_px,
        stats,
        split,
        ae_frames,
        site_features,
        sensor,
        truth,
        radar_obs,
    })
}

impl Prepared {
    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn training_sites(&self) -> Vec<usize> {
        (0..self.n_sites()).filter(|&s| !self.split.heldout[s]).collect()
    }

    pub fn heldout_sites(&self) -> Vec<usize> {
        (0..self.n_sites()).filter(|&s| self.split.heldout[s]).collect()
    }

    /// Evaluation reference at a site: the reference map when present,
    /// otherwise the aligned sensor value.
    pub fn reference(&self, site: usize, day: usize) -> f32 {
        match &self.truth {
            Some(t) => {
                let (px, py) = self.site_px[site];
                t[day * self.geo.len() + self.geo.index(px, py)]
            }
            None => self.sensor[site * self.n_days() + day],
        }
    }

    /// Map supervision: reference maps with held-out site pixels blanked,
    /// or training-site sensor pixels only when no maps exist.
    fn map_targets(&self) -> Vec<f32> {
        let plane = self.geo.len();
        match &self.truth {
            Some(t) => {
                let mut out = t.clone();
                for s in self.heldout_sites() {
                    let (px, py) = self.site_px[s];
                    let i = self.geo.index(px, py);
                    for d in 0..self.n_days() {
                        out[d * plane + i] = f32::NAN;
                    }
                }
                out
            }
            None => {
                let mut out = vec![f32::NAN; self.n_days() * plane];
                for s in self.training_sites() {
                    let (px, py) = self.site_px[s];
                    let i = self.geo.index(px, py);
                    for d in 0..self.n_days() {
                        out[d * plane + i] = self.sensor[s * self.n_days() + d];
                    }
                }
                out
            }
        }
    }

    fn map_windows(&self, origins: Vec<usize>, input_len: usize, horizon: usize) -> MapWindows {
        MapWindows {
            channels: N_FEATURES,
            height: self.geo.height as usize,
            width: self.geo.width as usize,
            days: self.n_days(),
            frames: self.ae_frames.clone(),
            targets: self.map_targets(),
            origins,
            input_len,
            horizon,
        }
    }

    /// AE training windows over the trailing `fraction` of training time.
    pub fn ae_train_windows(&self, input_len: usize, horizon: usize, fraction: f64) -> MapWindows {
        let r = self.split.train_range(fraction);
        self.map_windows(origins_in(r.start, r.end, input_len, horizon), input_len, horizon)
    }

    /// AE windows forecasting into held-out time.
    pub fn ae_test_windows(&self, input_len: usize, horizon: usize) -> MapWindows {
        self.map_windows(self.split.test_origins(input_len, horizon), input_len, horizon)
    }

    /// AE windows for explicit origins (day indices).
    pub fn ae_windows_at(&self, origins: Vec<usize>, input_len: usize, horizon: usize) -> MapWindows {
        self.map_windows(origins, input_len, horizon)
    }

    fn site_windows(&self, windows: Vec<(usize, usize)>, input_len: usize, horizon: usize) -> SiteWindows {
        SiteWindows {
            dim: N_FEATURES,
            sites: self.n_sites(),
            days: self.n_days(),
            features: self.site_features.clone(),
            targets: self.sensor.clone(),
            windows,
            input_len,
            horizon,
        }
    }

    /// LSTM training windows at training sites over the trailing `fraction`
    /// of training time, keeping only windows with at least one target.
    pub fn lstm_train_windows(&self, input_len: usize, horizon: usize, fraction: f64) -> SiteWindows {
        let r = self.split.train_range(fraction);
        let origins = origins_in(r.start, r.end, input_len, horizon);
        let n = self.n_days();
        let windows = self
            .training_sites()
            .into_iter()
            .flat_map(|s| origins.iter().map(move |&o| (s, o)))
            .filter(|&(s, o)| (1..=horizon).any(|k| !self.sensor[s * n + o + k].is_nan()))
            .collect();
        self.site_windows(windows, input_len, horizon)
    }

    /// LSTM windows at `sites` for explicit origins.
    pub fn lstm_windows_at(&self, sites: &[usize], origins: &[usize], input_len: usize, horizon: usize) -> SiteWindows {
        let windows = sites.iter().flat_map(|&s| origins.iter().map(move |&o| (s, o))).collect();
        self.site_windows(windows, input_len, horizon)
    }

    /// Mean of the training-site sensor values over training time.
    pub fn climatology(&self) -> f32 {
        let n = self.n_days();
        let (mut sum, mut cnt) = (0.0f64, 0usize);
        for s in self.training_sites() {
            for d in 0..self.split.train_end {
                let v = self.sensor[s * n + d];
                if !v.is_nan() {
                    sum += v as f64;
                    cnt += 1;
                }
            }
        }
        if cnt == 0 {
            f32::NAN
        } else {
            (sum / cnt as f64) as f32
        }
    }
}
