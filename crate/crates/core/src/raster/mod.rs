//! Grid data model shared by imagery, feature stacks and soil-moisture maps.
//!
//! Planes are row-major `f32` with NaN as the only nodata encoding.

mod cube;

pub use cube::{cube_encoded_len, cube_read, cube_write, decode_cube, encode_cube, CUBE_MAGIC, CUBE_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{argument, validation, Error, Result};

/// Spatial footprint of a plane: square pixels anchored at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGeo {
    pub width: u32,
    pub height: u32,
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size: f64,
}

impl GridGeo {
    pub fn new(width: u32, height: u32, origin_x: f64, origin_y: f64, pixel_size: f64) -> Result<Self> {
        let geo = GridGeo { width, height, origin_x, origin_y, pixel_size };
        geo.validate()?;
        Ok(geo)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(validation(format!("grid must be at least 1x1, got {}x{}", self.width, self.height)));
        }
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            return Err(validation(format!("pixel size must be positive, got {}", self.pixel_size)));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(validation("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, px: i64, py: i64) -> bool {
        px >= 0 && py >= 0 && px < self.width as i64 && py < self.height as i64
    }

    #[inline]
    pub fn index(&self, px: usize, py: usize) -> usize {
        py * self.width as usize + px
    }
}

/// A single row-major `f32` plane. NaN marks nodata.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster2D {
    geo: GridGeo,
    values: Vec<f32>,
}

impl Raster2D {
    pub fn new(geo: GridGeo, values: Vec<f32>) -> Result<Self> {
        geo.validate()?;
        if values.len() != geo.len() {
            return Err(validation(format!(
                "plane has {} values, grid {}x{} needs {}",
                values.len(),
                geo.width,
                geo.height,
                geo.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| v.is_infinite()) {
            return Err(validation(format!("non-finite value at index {i}")));
        }
        Ok(Raster2D { geo, values })
    }

    pub fn filled(geo: GridGeo, value: f32) -> Result<Self> {
        Raster2D::new(geo, vec![value; geo.len()])
    }

    pub fn from_fn(geo: GridGeo, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(geo.len());
        for y in 0..geo.height as usize {
            for x in 0..geo.width as usize {
                values.push(f(x, y));
            }
        }
        Raster2D::new(geo, values)
    }

    pub fn geo(&self) -> &GridGeo {
        &self.geo
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn width(&self) -> usize {
        self.geo.width as usize
    }

    pub fn height(&self) -> usize {
        self.geo.height as usize
    }

    #[inline]
    pub fn get(&self, px: usize, py: usize) -> f32 {
        self.values[self.geo.index(px, py)]
    }

    /// Per-pixel map preserving the grid; the result is re-validated.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Raster2D> {
        Raster2D::new(self.geo, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Mean over non-NaN cells, `None` when every cell is nodata.
    pub fn nan_mean(&self) -> Option<f32> {
        let (sum, n) =
            self.values.iter().filter(|v| !v.is_nan()).fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
        (n > 0).then(|| (sum / n as f64) as f32)
    }

    pub fn all_nan(&self) -> bool {
        self.values.iter().all(|v| v.is_nan())
    }

    /// Bitwise equality, treating NaN payloads as significant.
    pub fn bitwise_eq(&self, other: &Raster2D) -> bool {
        self.geo == other.geo
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Odd-sized square window centred on `(cx, cy)`. Cells falling outside the
/// source plane are NaN.
pub fn extract_patch(r: &Raster2D, cx: usize, cy: usize, k: usize) -> Result<Raster2D> {
    if k == 0 || k % 2 == 0 {
        return Err(argument(format!("patch size must be odd and >= 1, got {k}")));
    }
    let half = (k / 2) as i64;
    let (x0, y0) = (cx as i64 - half, cy as i64 - half);
    let src = r.geo();
    let geo = GridGeo {
        width: k as u32,
        height: k as u32,
        origin_x: src.origin_x + x0 as f64 * src.pixel_size,
        origin_y: src.origin_y - y0 as f64 * src.pixel_size,
        pixel_size: src.pixel_size,
    };
    let mut values = Vec::with_capacity(k * k);
    for y in y0..y0 + k as i64 {
        for x in x0..x0 + k as i64 {
            values.push(if src.contains(x, y) { r.get(x as usize, y as usize) } else { f32::NAN });
        }
    }
    Raster2D::new(geo, values)
}

/// Named channels. The first fourteen, in declaration order, are the fixed
/// model feature order; `SmcMap` labels soil-moisture target and forecast
/// planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelId {
    #[serde(rename = "VV_DB")]
    VvDb,
    #[serde(rename = "VH_DB")]
    VhDb,
    #[serde(rename = "HH_DB")]
    HhDb,
    #[serde(rename = "HV_DB")]
    HvDb,
    #[serde(rename = "INC_DEG")]
    IncDeg,
    #[serde(rename = "RED")]
    Red,
    #[serde(rename = "GREEN")]
    Green,
    #[serde(rename = "BLUE")]
    Blue,
    #[serde(rename = "NIR")]
    Nir,
    #[serde(rename = "NDVI")]
    Ndvi,
    #[serde(rename = "DOY_SIN")]
    DoySin,
    #[serde(rename = "DOY_COS")]
    DoyCos,
    #[serde(rename = "RAIN_MM")]
    RainMm,
    #[serde(rename = "SMC_LAG")]
    SmcLag,
    #[serde(rename = "SMC_MAP")]
    SmcMap,
}

/// Number of model feature channels.
pub const N_FEATURES: usize = 14;

impl ChannelId {
    pub const ALL: [ChannelId; 15] = [
        ChannelId::VvDb,
        ChannelId::VhDb,
        ChannelId::HhDb,
        ChannelId::HvDb,
        ChannelId::IncDeg,
        ChannelId::Red,
        ChannelId::Green,
        ChannelId::Blue,
        ChannelId::Nir,
        ChannelId::Ndvi,
        ChannelId::DoySin,
        ChannelId::DoyCos,
        ChannelId::RainMm,
        ChannelId::SmcLag,
        ChannelId::SmcMap,
    ];

    /// The fixed feature order.
    pub const FEATURES: [ChannelId; N_FEATURES] = [
        ChannelId::VvDb,
        ChannelId::VhDb,
        ChannelId::HhDb,
        ChannelId::HvDb,
        ChannelId::IncDeg,
        ChannelId::Red,
        ChannelId::Green,
        ChannelId::Blue,
        ChannelId::Nir,
        ChannelId::Ndvi,
        ChannelId::DoySin,
        ChannelId::DoyCos,
        ChannelId::RainMm,
        ChannelId::SmcLag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::VvDb => "VV_DB",
            ChannelId::VhDb => "VH_DB",
            ChannelId::HhDb => "HH_DB",
            ChannelId::HvDb => "HV_DB",
            ChannelId::IncDeg => "INC_DEG",
            ChannelId::Red => "RED",
            ChannelId::Green => "GREEN",
            ChannelId::Blue => "BLUE",
            ChannelId::Nir => "NIR",
            ChannelId::Ndvi => "NDVI",
            ChannelId::DoySin => "DOY_SIN",
            ChannelId::DoyCos => "DOY_COS",
            ChannelId::RainMm => "RAIN_MM",
            ChannelId::SmcLag => "SMC_LAG",
            ChannelId::SmcMap => "SMC_MAP",
        }
    }

    /// Position in the feature order, `None` for `SmcMap`.
    pub fn feature_index(self) -> Option<usize> {
        ChannelId::FEATURES.iter().position(|&c| c == self)
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ChannelId::ALL.iter().copied().find(|c| c.name() == s).ok_or_else(|| Error::UnknownChannel(s.to_string()))
    }
}

/// All channels of one acquisition date on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    timestamp: i64,
    channels: Vec<(ChannelId, Raster2D)>,
}

impl RasterStack {
    pub fn new(timestamp: i64, channels: Vec<(ChannelId, Raster2D)>) -> Result<Self> {
        if let Some((_, first)) = channels.first() {
            let geo = first.geo();
            for (id, plane) in &channels[1..] {
                if plane.geo() != geo {
                    return Err(validation(format!("channel {id} is on a different grid")));
                }
            }
        }
        for (i, (id, _)) in channels.iter().enumerate() {
            if channels[..i].iter().any(|(other, _)| other == id) {
                return Err(validation(format!("duplicate channel {id}")));
            }
        }
        Ok(RasterStack { timestamp, channels })
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn channels(&self) -> &[(ChannelId, Raster2D)] {
        &self.channels
    }

    pub fn channel_ids(&self) -> impl Iterator<Item = ChannelId> + '_ {
        self.channels.iter().map(|(id, _)| *id)
    }

    pub fn get(&self, id: ChannelId) -> Option<&Raster2D> {
        self.channels.iter().find(|(c, _)| *c == id).map(|(_, r)| r)
    }

    pub fn geo(&self) -> Option<&GridGeo> {
        self.channels.first().map(|(_, r)| r.geo())
    }
}

/// Time-ordered acquisitions on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSeries {
    pub stacks: Vec<RasterStack>,
    pub cadence: u32,
}

impl SceneSeries {
    pub fn new(stacks: Vec<RasterStack>, cadence: u32) -> Result<Self> {
        let s = SceneSeries { stacks, cadence };
        s.validate()?;
        Ok(s)
    }

    /// Checks ordering, a shared grid, and a shared channel list; the last is
    /// required by the cube container.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.stacks.first() else {
            return Err(validation("scene series is empty"));
        };
        let geo = first.geo().ok_or_else(|| validation("stack without channels"))?;
        let ids: Vec<ChannelId> = first.channel_ids().collect();
        for pair in self.stacks.windows(2) {
            if pair[1].timestamp() <= pair[0].timestamp() {
                return Err(validation(format!(
                    "timestamps not strictly increasing: {} then {}",
                    pair[0].timestamp(),
                    pair[1].timestamp()
                )));
            }
        }
        for stack in &self.stacks {
            if stack.geo() != Some(geo) {
                return Err(validation(format!("stack at day {} has a different grid", stack.timestamp())));
            }
            if !stack.channel_ids().eq(ids.iter().copied()) {
                return Err(validation(format!("stack at day {} has a different channel list", stack.timestamp())));
            }
        }
        Ok(())
    }

    pub fn geo(&self) -> Option<&GridGeo> {
        self.stacks.first().and_then(|s| s.geo())
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.stacks.iter().map(|s| s.timestamp()).collect()
    }

    pub fn bitwise_eq(&self, other: &SceneSeries) -> bool {
        self.cadence == other.cadence
            && self.stacks.len() == other.stacks.len()
            && self.stacks.iter().zip(&other.stacks).all(|(a, b)| {
                a.timestamp() == b.timestamp()
                    && a.channels().len() == b.channels().len()
                    && a.channels().iter().zip(b.channels()).all(|((ia, ra), (ib, rb))| ia == ib && ra.bitwise_eq(rb))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(w: u32, h: u32) -> GridGeo {
        GridGeo::new(w, h, 0.0, 0.0, 10.0).unwrap()
    }

    #[test]
    fn patch_identity_k1() {
        let r = Raster2D::new(geo(1, 1), vec![5.0]).unwrap();
        let p = extract_patch(&r, 0, 0, 1).unwrap();
        assert_eq!(p.values(), &[5.0]);
    }

    #[test]
    fn patch_corner_fills_nan() {
        let r = Raster2D::from_fn(geo(4, 4), |x, y| (y * 4 + x) as f32).unwrap();
        let p = extract_patch(&r, 0, 0, 3).unwrap();
        assert_eq!(p.values().iter().filter(|v| v.is_nan()).count(), 5);
        assert_eq!(p.get(1, 1), 0.0);
        assert_eq!(p.get(2, 2), 5.0);
    }

    #[test]
    fn patch_centre_of_ramp() {
        let w = 6usize;
        let r = Raster2D::from_fn(geo(6, 5), |x, y| (y * w + x) as f32).unwrap();
        let p = extract_patch(&r, 3, 2, 3).unwrap();
        // index arithmetic: rows 1..=3, cols 2..=4
        let mut expected = Vec::new();
        for y in 1..=3 {
            for x in 2..=4 {
                expected.push((y * w + x) as f32);
            }
        }
        assert_eq!(p.values(), expected.as_slice());
        assert_eq!(p.geo().origin_x, 20.0);
        assert_eq!(p.geo().origin_y, -10.0);
    }

    #[test]
    fn patch_even_k_rejected() {
        let r = Raster2D::filled(geo(3, 3), 0.0).unwrap();
        assert!(matches!(extract_patch(&r, 1, 1, 2), Err(Error::Argument(_))));
        assert!(matches!(extract_patch(&r, 1, 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn raster_rejects_bad_length_and_inf() {
        assert!(Raster2D::new(geo(2, 2), vec![0.0; 3]).is_err());
        assert!(Raster2D::new(geo(2, 2), vec![0.0, 1.0, f32::INFINITY, 0.0]).is_err());
        assert!(Raster2D::new(geo(2, 2), vec![0.0, 1.0, f32::NAN, 0.0]).is_ok());
    }

    #[test]
    fn grid_invariants() {
        assert!(GridGeo::new(0, 3, 0.0, 0.0, 1.0).is_err());
        assert!(GridGeo::new(3, 3, 0.0, 0.0, 0.0).is_err());
        assert!(GridGeo::new(3, 3, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn channel_names_unique_and_parse() {
        for (i, a) in ChannelId::ALL.iter().enumerate() {
            for b in &ChannelId::ALL[i + 1..] {
                assert_ne!(a.name(), b.name());
            }
            assert_eq!(a.name().parse::<ChannelId>().unwrap(), *a);
        }
        assert_eq!(ChannelId::FEATURES.len(), 14);
        assert_eq!(ChannelId::SmcLag.feature_index(), Some(13));
        assert_eq!(ChannelId::SmcMap.feature_index(), None);
        assert!("XX".parse::<ChannelId>().is_err());
    }

    #[test]
    fn stack_rejects_duplicates_and_mixed_grids() {
        let a = Raster2D::filled(geo(2, 2), 0.0).unwrap();
        let b = Raster2D::filled(geo(3, 2), 0.0).unwrap();
        assert!(RasterStack::new(0, vec![(ChannelId::Red, a.clone()), (ChannelId::Red, a.clone())]).is_err());
        assert!(RasterStack::new(0, vec![(ChannelId::Red, a), (ChannelId::Nir, b)]).is_err());
    }

    #[test]
    fn series_requires_increasing_timestamps() {
        let a = Raster2D::filled(geo(2, 2), 0.0).unwrap();
        let s1 = RasterStack::new(3, vec![(ChannelId::Red, a.clone())]).unwrap();
        let s2 = RasterStack::new(3, vec![(ChannelId::Red, a)]).unwrap();
        assert!(SceneSeries::new(vec![s1, s2], 1).is_err());
        assert!(SceneSeries::new(vec![], 1).is_err());
    }
}
