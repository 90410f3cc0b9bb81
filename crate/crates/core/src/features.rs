//! Physical preprocessing and assembly of the fixed 14-channel feature stack.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::error::{argument, validation, Result};
use crate::ingest::day_to_date;
use crate::raster::{ChannelId, GridGeo, Raster2D, RasterStack, N_FEATURES};

/// Backscatter at or below this linear value maps to [`DB_FLOOR`].
pub const LINEAR_FLOOR: f32 = 1e-6;
pub const DB_FLOOR: f32 = -60.0;
pub const DEFAULT_REFERENCE_INCIDENCE_DEG: f32 = 35.0;
pub const DEFAULT_CROP_THRESHOLD: f32 = 0.3;
const YEAR_DAYS: f64 = 365.25;

fn same_geo(a: &Raster2D, b: &Raster2D, what: &str) -> Result<()> {
    if a.geo() != b.geo() {
        return Err(argument(format!("{what}: inputs are on different grids")));
    }
    Ok(())
}

/// `(NIR - RED) / (NIR + RED)` per pixel, NaN where either input is NaN or
/// the denominator vanishes.
pub fn ndvi(nir: &Raster2D, red: &Raster2D) -> Result<Raster2D> {
    same_geo(nir, red, "ndvi")?;
    let values = nir
        .values()
        .iter()
        .zip(red.values())
        .map(|(&n, &r)| {
            let (n, r) = (n as f64, r as f64);
            let denom = n + r;
            if n.is_nan() || r.is_nan() || denom == 0.0 {
                f32::NAN
            } else {
                ((n - r) / denom).clamp(-1.0, 1.0) as f32
            }
        })
        .collect();
    Raster2D::new(*nir.geo(), values)
}

/// Linear sigma-nought to decibels, clamping tiny values to -60 dB.
pub fn to_db(sigma0_linear: &Raster2D) -> Result<Raster2D> {
    if let Some(v) = sigma0_linear.values().iter().find(|v| **v < 0.0) {
        return Err(argument(format!("negative linear backscatter {v}")));
    }
    sigma0_linear.map(|x| {
        if x.is_nan() {
            f32::NAN
        } else if x <= LINEAR_FLOOR {
            DB_FLOOR
        } else {
            10.0 * x.log10()
        }
    })
}

/// Cosine-squared correction of dB backscatter to a reference incidence:
/// `sigma + 10 log10(cos^2(ref) / cos^2(inc))`.
pub fn incidence_normalize(sigma_db: &Raster2D, inc_deg: &Raster2D, ref_deg: f32) -> Result<Raster2D> {
    same_geo(sigma_db, inc_deg, "incidence_normalize")?;
    if !(ref_deg > 0.0 && ref_deg < 90.0) {
        return Err(argument(format!("reference incidence {ref_deg} outside (0, 90)")));
    }
    if let Some(v) = inc_deg.values().iter().find(|v| !v.is_nan() && !(**v > 0.0 && **v < 90.0)) {
        return Err(argument(format!("incidence angle {v} outside (0, 90)")));
    }
    let cos_ref = (ref_deg as f64).to_radians().cos();
    let values = sigma_db
        .values()
        .iter()
        .zip(inc_deg.values())
        .map(|(&s, &inc)| {
            if s.is_nan() || inc.is_nan() {
                return f32::NAN;
            }
            if inc == ref_deg {
                return s;
            }
            let cos_inc = (inc as f64).to_radians().cos();
            (s as f64 + 10.0 * ((cos_ref * cos_ref) / (cos_inc * cos_inc)).log10()) as f32
        })
        .collect();
    Raster2D::new(*sigma_db.geo(), values)
}

/// 1 where `ndvi >= threshold`, 0 below, NaN propagated.
pub fn crop_mask(ndvi: &Raster2D, threshold: f32) -> Result<Raster2D> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(argument(format!("threshold {threshold} outside [-1, 1]")));
    }
    ndvi.map(|v| {
        if v.is_nan() {
            f32::NAN
        } else if v >= threshold {
            1.0
        } else {
            0.0
        }
    })
}

/// `(sin, cos)` of the annual phase `2 pi doy / 365.25`.
pub fn seasonal_clock(doy: f64) -> (f32, f32) {
    let phase = 2.0 * PI * doy / YEAR_DAYS;
    (phase.sin() as f32, phase.cos() as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStat {
    pub mean: f32,
    pub std: f32,
    pub constant: bool,
}

impl ChannelStat {
    #[inline]
    pub fn zscore(&self, x: f32) -> f32 {
        if self.std == 0.0 {
            0.0
        } else {
            (x - self.mean) / self.std
        }
    }

    #[inline]
    pub fn unscale(&self, z: f32) -> f32 {
        z * self.std + self.mean
    }
}

/// Per-channel normalisation constants, serialised as
/// `{"VV_DB": {"mean": .., "std": .., "constant": ..}, ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelStats(pub BTreeMap<ChannelId, ChannelStat>);

impl ChannelStats {
    pub fn get(&self, id: ChannelId) -> Option<&ChannelStat> {
        self.0.get(&id)
    }

    pub fn require(&self, id: ChannelId) -> Result<&ChannelStat> {
        self.get(id).ok_or_else(|| validation(format!("channel statistics missing {id}")))
    }
}

/// Streaming mean/std over non-NaN samples, accumulated in `f64`.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    acc: BTreeMap<ChannelId, (u64, f64, f64)>,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: ChannelId, v: f32) {
        if v.is_nan() {
            return;
        }
        let e = self.acc.entry(id).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += v as f64;
        e.2 += (v as f64) * (v as f64);
    }

    pub fn push_plane(&mut self, id: ChannelId, plane: &[f32]) {
        for &v in plane {
            self.push(id, v);
        }
    }

    /// Channels in `ids` without samples come out as mean 0, std 0, constant.
    pub fn finish(&self, ids: &[ChannelId]) -> ChannelStats {
        let mut out = BTreeMap::new();
        for &id in ids {
            let stat = match self.acc.get(&id) {
                Some(&(n, s, ss)) if n > 0 => {
                    let mean = s / n as f64;
                    let var = (ss / n as f64 - mean * mean).max(0.0);
                    let std = var.sqrt() as f32;
                    // std below f32 resolution of the mean is numerical noise
                    let std = if (std as f64) <= mean.abs() * 1e-6 { 0.0 } else { std };
                    ChannelStat { mean: mean as f32, std, constant: std == 0.0 }
                }
                _ => ChannelStat { mean: 0.0, std: 0.0, constant: true },
            };
            out.insert(id, stat);
        }
        ChannelStats(out)
    }
}

/// Which ground channels a stack carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackMode {
    /// Earth-observation only: rain and lagged soil moisture are zero planes.
    Ae,
    /// Earth observation plus ground rain and soil-moisture planes.
    Fused,
}

/// Input planes keyed by channel; anything absent is derived or imputed.
pub type FeatureInputs = BTreeMap<ChannelId, Raster2D>;

/// Day-of-year (1-based) of a days-since-epoch timestamp.
pub fn day_of_year(day: i64) -> u32 {
    day_to_date(day).ordinal()
}

/// Raw (pre-normalisation) planes in feature order: provided planes, NDVI
/// derived from NIR/RED when not supplied, and the seasonal clock. `None`
/// marks channels that must be imputed.
pub fn complete_inputs(inputs: &FeatureInputs, date: i64) -> Result<(GridGeo, Vec<Option<Raster2D>>)> {
    let geo = *inputs.values().next().ok_or_else(|| argument("no input planes"))?.geo();
    if let Some((id, _)) = inputs.iter().find(|(_, r)| *r.geo() != geo) {
        return Err(argument(format!("input plane {id} is on a different grid")));
    }
    let (s, c) = seasonal_clock(day_of_year(date) as f64);
    let mut planes = Vec::with_capacity(N_FEATURES);
    for id in ChannelId::FEATURES {
        let plane = match id {
            ChannelId::DoySin => Some(Raster2D::filled(geo, s)?),
            ChannelId::DoyCos => Some(Raster2D::filled(geo, c)?),
            ChannelId::Ndvi => match inputs.get(&id) {
                Some(p) => Some(p.clone()),
                None => match (inputs.get(&ChannelId::Nir), inputs.get(&ChannelId::Red)) {
                    (Some(n), Some(r)) => Some(ndvi(n, r)?),
                    _ => None,
                },
            },
            _ => inputs.get(&id).cloned(),
        };
        planes.push(plane);
    }
    Ok((geo, planes))
}

/// What [`assemble_stack`] had to make up.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidityNote {
    /// Channels absent from the inputs, filled with their training mean.
    pub imputed_channels: Vec<ChannelId>,
    /// Nodata cells inside provided planes, filled with the training mean.
    pub filled_cells: usize,
}

#[derive(Debug, Clone)]
pub struct AssembledStack {
    pub stack: RasterStack,
    pub note: ValidityNote,
}

/// Builds the z-scored 14-channel stack for one date.
///
/// Missing channels and nodata cells take the channel's training mean before
/// normalisation (hence 0 after it). In [`StackMode::Ae`] the rain and lagged
/// soil-moisture channels are exactly zero.
pub fn assemble_stack(
    inputs: &FeatureInputs,
    date: i64,
    stats: &ChannelStats,
    mode: StackMode,
) -> Result<AssembledStack> {
    let (geo, planes) = complete_inputs(inputs, date)?;
    let mut note = ValidityNote::default();
    let mut channels = Vec::with_capacity(N_FEATURES);
    for (id, plane) in ChannelId::FEATURES.into_iter().zip(planes) {
        let stat = stats.require(id)?;
        let ground = matches!(id, ChannelId::RainMm | ChannelId::SmcLag);
        let values = if mode == StackMode::Ae && ground {
            vec![0.0; geo.len()]
        } else {
            match plane {
                Some(p) => p
                    .values()
                    .iter()
                    .map(|&v| {
                        if v.is_nan() {
                            note.filled_cells += 1;
                            0.0
                        } else {
                            stat.zscore(v)
                        }
                    })
                    .collect(),
                None => {
                    note.imputed_channels.push(id);
                    vec![stat.zscore(stat.mean); geo.len()]
                }
            }
        };
        channels.push((id, Raster2D::new(geo, values)?));
    }
    Ok(AssembledStack { stack: RasterStack::new(date, channels)?, note })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo(w: u32, h: u32) -> GridGeo {
        GridGeo::new(w, h, 0.0, 0.0, 10.0).unwrap()
    }

    fn plane(v: &[f32]) -> Raster2D {
        Raster2D::new(geo(v.len() as u32, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn ndvi_examples() {
        let out = ndvi(&plane(&[0.5, 0.3, 0.0, f32::NAN]), &plane(&[0.1, 0.3, 0.0, 0.2])).unwrap();
        assert!((out.values()[0] - 0.666_666_7).abs() < 1e-6);
        assert_eq!(out.values()[1], 0.0);
        assert!(out.values()[2].is_nan());
        assert!(out.values()[3].is_nan());
        assert!(ndvi(&plane(&[0.1]), &plane(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn to_db_examples() {
        let out = to_db(&plane(&[1.0, 0.1, 0.0, f32::NAN, 1e-7])).unwrap();
        assert_eq!(out.values()[0], 0.0);
        assert!((out.values()[1] + 10.0).abs() < 1e-6);
        assert_eq!(out.values()[2], -60.0);
        assert!(out.values()[3].is_nan());
        assert_eq!(out.values()[4], -60.0);
        assert!(to_db(&plane(&[-0.1])).is_err());
    }

    #[test]
    fn incidence_examples() {
        let out = incidence_normalize(&plane(&[-10.0, -12.5, f32::NAN]), &plane(&[45.0, 35.0, 40.0]), 35.0).unwrap();
        // scalar oracle
        let c35 = 35f64.to_radians().cos();
        let c45 = 45f64.to_radians().cos();
        let expected = -10.0 + 10.0 * (c35 * c35 / (c45 * c45)).log10();
        assert!((expected + 8.7224).abs() < 1e-4);
        assert!((out.values()[0] as f64 - expected).abs() < 1e-5);
        assert_eq!(out.values()[1], -12.5);
        assert!(out.values()[2].is_nan());
        assert!(incidence_normalize(&plane(&[-10.0]), &plane(&[95.0]), 35.0).is_err());
        assert!(incidence_normalize(&plane(&[-10.0]), &plane(&[0.0]), 35.0).is_err());
    }

    #[test]
    fn crop_mask_examples() {
        let m = crop_mask(&Raster2D::filled(geo(3, 3), 0.6).unwrap(), 0.3).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        let m = crop_mask(&plane(&[-1.0, -0.5, 0.9, f32::NAN]), -1.0).unwrap();
        assert_eq!(&m.values()[..3], &[1.0, 1.0, 1.0]);
        assert!(m.values()[3].is_nan());
        assert!(crop_mask(&plane(&[0.0]), 1.5).is_err());
    }

    #[test]
    fn crop_mask_half_ramp_at_median() {
        // 8x8 ramp over rows: top half below median, bottom half at/above
        let r = Raster2D::from_fn(geo(8, 8), |x, y| -0.8 + 0.2 * y as f32 + 0.001 * x as f32).unwrap();
        let mut sorted: Vec<f32> = r.values().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[32];
        let m = crop_mask(&r, median).unwrap();
        let ones: Vec<usize> = (0..64).filter(|&i| m.values()[i] == 1.0).collect();
        assert_eq!(ones.len(), 32);
        assert!(ones.iter().all(|&i| i >= 32));
    }

    #[test]
    fn quarter_year_clock() {
        let (s, c) = seasonal_clock(91.3125);
        assert!((s - 1.0).abs() < 1e-6);
        assert!(c.abs() < 1e-6);
    }

    fn unit_stats() -> ChannelStats {
        let mut m = BTreeMap::new();
        for id in ChannelId::FEATURES {
            m.insert(id, ChannelStat { mean: 0.5, std: 2.0, constant: false });
        }
        m.insert(ChannelId::HhDb, ChannelStat { mean: -14.0, std: 3.0, constant: false });
        ChannelStats(m)
    }

    fn eo_inputs(g: GridGeo) -> FeatureInputs {
        let mut inp = FeatureInputs::new();
        inp.insert(ChannelId::VvDb, Raster2D::filled(g, -12.0).unwrap());
        inp.insert(ChannelId::VhDb, Raster2D::filled(g, -19.0).unwrap());
        inp.insert(ChannelId::Nir, Raster2D::filled(g, 0.4).unwrap());
        inp.insert(ChannelId::Red, Raster2D::filled(g, 0.1).unwrap());
        inp.insert(ChannelId::RainMm, Raster2D::filled(g, 4.0).unwrap());
        inp.insert(ChannelId::SmcLag, Raster2D::filled(g, 0.2).unwrap());
        inp
    }

    #[test]
    fn ae_mode_zeroes_ground_channels() {
        let g = geo(4, 4);
        let out = assemble_stack(&eo_inputs(g), 16_500, &unit_stats(), StackMode::Ae).unwrap();
        let ids: Vec<_> = out.stack.channel_ids().collect();
        assert_eq!(ids, ChannelId::FEATURES.to_vec());
        for id in [ChannelId::RainMm, ChannelId::SmcLag] {
            assert!(out.stack.get(id).unwrap().values().iter().all(|&v| v == 0.0));
        }
        let fused = assemble_stack(&eo_inputs(g), 16_500, &unit_stats(), StackMode::Fused).unwrap();
        assert_eq!(fused.stack.get(ChannelId::RainMm).unwrap().values()[0], (4.0 - 0.5) / 2.0);
    }

    #[test]
    fn missing_polarisations_imputed_to_zero() {
        let out = assemble_stack(&eo_inputs(geo(3, 2)), 16_500, &unit_stats(), StackMode::Fused).unwrap();
        assert!(out.note.imputed_channels.contains(&ChannelId::HhDb));
        assert!(out.note.imputed_channels.contains(&ChannelId::HvDb));
        assert!(!out.note.imputed_channels.contains(&ChannelId::Ndvi));
        for id in [ChannelId::HhDb, ChannelId::HvDb] {
            assert!(out.stack.get(id).unwrap().values().iter().all(|&v| v == 0.0));
        }
        // NDVI derived from NIR/RED = 0.6, z-scored with (0.5, 2)
        let v = out.stack.get(ChannelId::Ndvi).unwrap().values()[0];
        assert!((v - (0.6 - 0.5) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn stats_missing_channel_and_geo_mismatch() {
        let mut s = unit_stats();
        s.0.remove(&ChannelId::Blue);
        assert!(assemble_stack(&eo_inputs(geo(2, 2)), 0, &s, StackMode::Ae).is_err());
        let mut inp = eo_inputs(geo(2, 2));
        inp.insert(ChannelId::Blue, Raster2D::filled(geo(3, 2), 0.0).unwrap());
        assert!(assemble_stack(&inp, 0, &unit_stats(), StackMode::Ae).is_err());
    }

    #[test]
    fn stats_json_shape() {
        let mut acc = StatsAccumulator::new();
        acc.push_plane(ChannelId::VvDb, &[1.0, 3.0, f32::NAN]);
        acc.push_plane(ChannelId::IncDeg, &[35.0, 35.0]);
        let s = acc.finish(&[ChannelId::VvDb, ChannelId::IncDeg, ChannelId::HhDb]);
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["VV_DB"]["mean"], 2.0);
        assert_eq!(json["VV_DB"]["std"], 1.0);
        assert_eq!(json["VV_DB"]["constant"], false);
        assert_eq!(json["INC_DEG"]["constant"], true);
        assert_eq!(json["HH_DB"]["std"], 0.0);
        let back: ChannelStats = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn ndvi_bounded_for_nonnegative(n in 0.0f32..1.0, r in 0.0f32..1.0) {
            let out = ndvi(&plane(&[n]), &plane(&[r])).unwrap().values()[0];
            prop_assert!(out.is_nan() || (-1.0..=1.0).contains(&out));
        }

        #[test]
        fn db_round_trip_above_floor(db in -59.0f32..20.0) {
            let lin = 10f32.powf(db / 10.0);
            let back = to_db(&plane(&[lin])).unwrap().values()[0];
            prop_assert!((back - db).abs() < 1e-5 * db.abs().max(1.0));
        }

        #[test]
        fn incidence_identity_at_reference(s in -40.0f32..5.0, r in 1.0f32..89.0) {
            let out = incidence_normalize(&plane(&[s]), &plane(&[r]), r).unwrap().values()[0];
            prop_assert_eq!(out, s);
        }

        #[test]
        fn channel_order_fixed_for_any_input_order(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let g = geo(2, 2);
            let mut items: Vec<_> = eo_inputs(g).into_iter().collect();
            items.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let inp: FeatureInputs = items.into_iter().collect();
            let out = assemble_stack(&inp, 16_000, &unit_stats(), StackMode::Fused).unwrap();
            prop_assert_eq!(out.stack.channel_ids().collect::<Vec<_>>(), ChannelId::FEATURES.to_vec());
        }

        #[test]
        fn zscored_training_planes_are_standardised(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = geo(6, 5);
            let days: Vec<FeatureInputs> = (0..8).map(|_| {
                let mut inp = FeatureInputs::new();
                for id in [ChannelId::VvDb, ChannelId::Red, ChannelId::Nir, ChannelId::RainMm] {
                    let scale = if id == ChannelId::VvDb { 5.0 } else { 0.3 };
                    inp.insert(id, Raster2D::from_fn(g, |_, _| {
                        if rng.random_bool(0.05) { f32::NAN } else { rng.random::<f32>() * scale }
                    }).unwrap());
                }
                inp
            }).collect();
            let mut acc = StatsAccumulator::new();
            for (d, inp) in days.iter().enumerate() {
                let (_, planes) = complete_inputs(inp, 16_000 + d as i64).unwrap();
                for (id, p) in ChannelId::FEATURES.into_iter().zip(planes) {
                    if let Some(p) = p { acc.push_plane(id, p.values()); }
                }
            }
            let stats = acc.finish(&ChannelId::FEATURES);
            for id in [ChannelId::VvDb, ChannelId::Red, ChannelId::Nir, ChannelId::Ndvi, ChannelId::RainMm] {
                let mut vals = Vec::new();
                for (d, inp) in days.iter().enumerate() {
                    let (_, planes) = complete_inputs(inp, 16_000 + d as i64).unwrap();
                    let raw = planes[id.feature_index().unwrap()].clone().unwrap();
                    let z = assemble_stack(inp, 16_000 + d as i64, &stats, StackMode::Fused).unwrap();
                    let zp = z.stack.get(id).unwrap();
                    for (r, v) in raw.values().iter().zip(zp.values()) {
                        if !r.is_nan() { vals.push(*v as f64); }
                    }
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() < 1e-3, "{id}: mean {mean}");
                prop_assert!((std - 1.0).abs() < 1e-3, "{id}: std {std}");
            }
        }
    }
}
