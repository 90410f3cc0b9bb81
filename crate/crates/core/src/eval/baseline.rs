//! Algebraic inversion of the simulator's noise-free radar model.

use crate::error::{argument, Result};
use crate::raster::Raster2D;
use crate::simworld::{INC_REF_DEG, VV_INC_SLOPE_DB, VV_NDVI_SLOPE_DB, VV_OFFSET_DB, VV_SMC_SLOPE_DB};

/// Moisture implied by one VV observation, clipped to `[theta_r, theta_s]`.
pub fn invert_vv(vv_db: f32, ndvi: f32, inc_deg: f32, theta_r: f32, theta_s: f32) -> f32 {
    if vv_db.is_nan() || ndvi.is_nan() || inc_deg.is_nan() {
        return f32::NAN;
    }
    let vv = vv_db as f64;
    let veg = VV_NDVI_SLOPE_DB as f64 * (ndvi as f64).max(0.0);
    let ang = VV_INC_SLOPE_DB as f64 * (inc_deg as f64 - INC_REF_DEG as f64);
    let theta = (vv - VV_OFFSET_DB as f64 - veg - ang) / VV_SMC_SLOPE_DB as f64;
    (theta as f32).clamp(theta_r, theta_s)
}

/// Per-pixel [`invert_vv`].
pub fn baseline_invert(
    vv_db: &Raster2D,
    ndvi: &Raster2D,
    inc_deg: &Raster2D,
    theta_r: f32,
    theta_s: f32,
) -> Result<Raster2D> {
    if vv_db.geo() != ndvi.geo() || vv_db.geo() != inc_deg.geo() {
        return Err(argument("baseline_invert: inputs are on different grids"));
    }
    if !(theta_r < theta_s) {
        return Err(argument("baseline_invert: theta_r must be below theta_s"));
    }
    let values = vv_db
        .values()
        .iter()
        .zip(ndvi.values())
        .zip(inc_deg.values())
        .map(|((&v, &n), &i)| invert_vv(v, n, i, theta_r, theta_s))
        .collect();
    Raster2D::new(*vv_db.geo(), values)
}
