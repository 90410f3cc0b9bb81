//! Seeded synthetic vineyard: weather, bucket soil-water balance, crop
//! phenology and radar/optical forward models.

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{argument, validation, Result};
use crate::ingest::{date_to_day, day_to_date, parse_date, Qc, SensorRecord, SiteMeta, WeatherRecord};
use crate::raster::{ChannelId, GridGeo, Raster2D, RasterStack, SceneSeries};

/// Above this moisture the profile drains.
pub const FIELD_CAPACITY: f32 = 0.30;
pub const RAIN_PROBABILITY: f64 = 0.25;
pub const RAIN_MEAN_MM: f64 = 6.0;

/// Radar forward-model constants: `vv = VV_OFFSET + VV_SMC_SLOPE θ
/// + VV_NDVI_SLOPE max(0, ndvi) + VV_INC_SLOPE (inc - INC_REF)`.
pub const VV_OFFSET_DB: f32 = -25.0;
pub const VV_SMC_SLOPE_DB: f32 = 40.0;
pub const VV_NDVI_SLOPE_DB: f32 = -4.0;
pub const VV_INC_SLOPE_DB: f32 = -0.15;
pub const INC_REF_DEG: f32 = 35.0;
pub const VH_OFFSET_DB: f32 = -7.0;

/// Channel layout of simulated scene stacks. Planes of the sensor not
/// acquired on a given day are nodata.
pub const SCENE_CHANNELS: [ChannelId; 7] = [
    ChannelId::VvDb,
    ChannelId::VhDb,
    ChannelId::IncDeg,
    ChannelId::Red,
    ChannelId::Green,
    ChannelId::Blue,
    ChannelId::Nir,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoilParams {
    pub theta_r: f32,
    pub theta_s: f32,
    pub k_infil: f32,
    pub k_drain: f32,
    pub kc: f32,
}

impl Default for SoilParams {
    fn default() -> Self {
        SoilParams { theta_r: 0.05, theta_s: 0.45, k_infil: 0.004, k_drain: 0.08, kc: 0.8 }
    }
}

impl SoilParams {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.theta_r
            && self.theta_r < self.theta_s
            && self.theta_s <= 1.0
            && self.k_infil >= 0.0
            && self.k_drain >= 0.0
            && self.kc >= 0.0;
        if !ok {
            return Err(validation(format!("invalid soil parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropPhenology {
    pub label: String,
    pub ndvi_min: f32,
    pub ndvi_max: f32,
    pub peak_doy: f32,
    pub width_days: f32,
}

impl CropPhenology {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0 <= self.ndvi_min && self.ndvi_min <= self.ndvi_max && self.ndvi_max <= 1.0) || self.width_days <= 0.0
        {
            return Err(validation(format!("invalid phenology {:?}", self.label)));
        }
        Ok(())
    }

    /// Gaussian green-up around `peak_doy`, wrapping over the year end.
    pub fn ndvi_at(&self, doy: f32) -> f32 {
        let mut d = (doy - self.peak_doy).abs() % 365.25;
        d = d.min(365.25 - d);
        self.ndvi_min + (self.ndvi_max - self.ndvi_min) * (-0.5 * (d / self.width_days).powi(2)).exp()
    }
}

/// Three southern-hemisphere grape varieties peaking around midsummer.
pub fn default_crops() -> Vec<CropPhenology> {
    vec![
        CropPhenology { label: "chardonnay".into(), ndvi_min: 0.20, ndvi_max: 0.75, peak_doy: 20.0, width_days: 45.0 },
        CropPhenology { label: "shiraz".into(), ndvi_min: 0.25, ndvi_max: 0.80, peak_doy: 35.0, width_days: 50.0 },
        CropPhenology { label: "semillon".into(), ndvi_min: 0.15, ndvi_max: 0.70, peak_doy: 5.0, width_days: 40.0 },
    ]
}

fn default_noise_db() -> f32 {
    0.5
}
fn default_optical_noise() -> f32 {
    0.01
}
fn default_sensor_noise() -> f32 {
    0.01
}
fn default_sensor_dropout() -> f32 {
    0.02
}
fn default_start_date() -> String {
    "2015-01-01".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub grid: GridGeo,
    pub n_sites: usize,
    pub n_regions: usize,
    pub days: u32,
    pub revisit_s1: u32,
    pub revisit_s2: u32,
    pub seed: u64,
    #[serde(default = "default_noise_db")]
    pub noise_db: f32,
    #[serde(default = "default_optical_noise")]
    pub optical_noise: f32,
    /// Standard deviation of in-situ probe noise.
    #[serde(default = "default_sensor_noise")]
    pub sensor_noise: f32,
    /// Probability that a probe reading is lost.
    #[serde(default = "default_sensor_dropout")]
    pub sensor_dropout: f32,
    /// ISO date of simulation day 0.
    #[serde(default = "default_start_date")]
    pub start_date: String,
}

impl SimConfig {
    /// 16x16 grid, 20 sites in 3 regions, two years of days.
    pub fn desk() -> Self {
        SimConfig {
            grid: GridGeo::new(16, 16, 500_000.0, 6_400_000.0, 10.0).expect("valid grid"),
            n_sites: 20,
            n_regions: 3,
            days: 730,
            revisit_s1: 3,
            revisit_s2: 5,
            seed: 42,
            noise_db: default_noise_db(),
            optical_noise: default_optical_noise(),
            sensor_noise: default_sensor_noise(),
            sensor_dropout: default_sensor_dropout(),
            start_date: default_start_date(),
        }
    }

    pub fn start(&self) -> Result<NaiveDate> {
        parse_date(&self.start_date)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.start()?;
        if self.revisit_s1 < 1 || self.revisit_s2 < 1 {
            return Err(validation("revisit intervals must be at least 1 day"));
        }
        if self.days < 2 {
            return Err(validation("simulation needs at least 2 days"));
        }
        if self.n_sites < 1 || self.n_sites > self.grid.len() {
            return Err(validation(format!("{} sites do not fit a {}-pixel grid", self.n_sites, self.grid.len())));
        }
        if self.n_regions < 1 || self.n_regions > self.grid.width as usize {
            return Err(validation(format!("{} regions do not fit the grid width", self.n_regions)));
        }
        let noises = [self.noise_db, self.optical_noise, self.sensor_noise];
        if noises.iter().any(|n| !(n.is_finite() && *n >= 0.0)) {
            return Err(validation("noise levels must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.sensor_dropout) {
            return Err(validation("sensor_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Independent, reproducible seed for a named random stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, id))
}

const STREAM_WEATHER: u64 = 1;
const STREAM_FIELDS: u64 = 2;
const STREAM_SITES: u64 = 3;
const STREAM_INCIDENCE: u64 = 4;
const STREAM_RADAR: u64 = 1 << 32;
const STREAM_OPTICAL: u64 = 2 << 32;
const STREAM_SENSOR: u64 = 3 << 32;

fn gauss(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0f64, std as f64).expect("finite std").sample(rng) as f32
}

/// Seeded daily weather: Bernoulli-exponential rain and a seasonal
/// reference evapotranspiration peaking in midsummer (January).
pub fn gen_weather(cfg: &SimConfig) -> Result<Vec<WeatherRecord>> {
    cfg.validate()?;
    let start = cfg.start()?;
    let mut rng = stream(cfg.seed, STREAM_WEATHER);
    let exp = Exp::new(1.0 / RAIN_MEAN_MM).expect("positive rate");
    let day0 = date_to_day(start);
    let mut out = Vec::with_capacity(cfg.days as usize);
    for d in 0..cfg.days as i64 {
        let date = day_to_date(day0 + d);
        let season = (2.0 * std::f64::consts::PI * (date.ordinal() as f64 - 15.0) / 365.25).cos();
        let wet = rng.random_bool(RAIN_PROBABILITY);
        let amount = exp.sample(&mut rng);
        let rain = if wet { amount as f32 } else { 0.0 };
        let et0 = ((3.5 + 2.0 * season) as f32 + gauss(&mut rng, 0.3)).max(0.0);
        let tmean = (17.0 + 7.0 * season) as f32 + gauss(&mut rng, 2.0);
        let tmin = tmean - 5.0 - 3.0 * rng.random::<f32>();
        let tmax = tmean + 5.0 + 3.0 * rng.random::<f32>();
        out.push(WeatherRecord { date, rain_mm: rain, et0_mm: et0, tmin_c: tmin, tmax_c: tmax });
    }
    Ok(out)
}

/// Individual terms of one water-balance step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterFluxes {
    pub infiltration: f64,
    pub evapotranspiration: f64,
    pub drainage: f64,
    /// `theta + infiltration - evapotranspiration - drainage` before clamping.
    pub unclamped: f64,
    pub theta_next: f32,
    /// The clamp changed the result.
    pub clamped: bool,
}

pub fn water_balance_fluxes(theta: f32, rain_mm: f32, et0_mm: f32, p: &SoilParams) -> Result<WaterFluxes> {
    if !(p.theta_r..=p.theta_s).contains(&theta) {
        return Err(argument(format!("theta {theta} outside [{}, {}]", p.theta_r, p.theta_s)));
    }
    if !(rain_mm >= 0.0 && et0_mm >= 0.0) {
        return Err(argument("rain and et0 must be non-negative"));
    }
    let th = theta as f64;
    let (tr, ts) = (p.theta_r as f64, p.theta_s as f64);
    let infiltration = p.k_infil as f64 * rain_mm as f64;
    let evapotranspiration = p.kc as f64 * et0_mm as f64 * 0.01 * (th - tr) / (ts - tr);
    let drainage = p.k_drain as f64 * (th - FIELD_CAPACITY as f64).max(0.0);
    let unclamped = th + infiltration - evapotranspiration - drainage;
    let theta_next = (unclamped as f32).clamp(p.theta_r, p.theta_s);
    Ok(WaterFluxes {
        infiltration,
        evapotranspiration,
        drainage,
        unclamped,
        theta_next,
        clamped: unclamped < tr || unclamped > ts,
    })
}

/// One daily bucket step, clamped to `[theta_r, theta_s]`.
pub fn step_water_balance(theta: f32, rain_mm: f32, et0_mm: f32, p: &SoilParams) -> Result<f32> {
    Ok(water_balance_fluxes(theta, rain_mm, et0_mm, p)?.theta_next)
}

/// Noise-free VV backscatter in dB.
#[inline]
pub fn vv_model_db(theta: f32, ndvi: f32, inc_deg: f32) -> f32 {
    VV_OFFSET_DB
        + VV_SMC_SLOPE_DB * theta
        + VV_NDVI_SLOPE_DB * ndvi.max(0.0)
        + VV_INC_SLOPE_DB * (inc_deg - INC_REF_DEG)
}

/// Simulated `(vv_db, vh_db)` for one acquisition. NaN moisture pixels stay
/// NaN; noise is drawn from a stream keyed by `seed` alone.
pub fn radar_forward(
    theta_map: &Raster2D,
    ndvi_map: &Raster2D,
    inc_deg: f32,
    noise_db: f32,
    seed: u64,
) -> Result<(Raster2D, Raster2D)> {
    if theta_map.geo() != ndvi_map.geo() {
        return Err(argument("radar_forward: moisture and NDVI grids differ"));
    }
    if theta_map.values().iter().any(|v| !v.is_nan() && !(0.0..=1.0).contains(v)) {
        return Err(argument("radar_forward: moisture outside [0, 1]"));
    }
    if ndvi_map.values().iter().any(|v| !v.is_nan() && !(-1.0..=1.0).contains(v)) {
        return Err(argument("radar_forward: NDVI outside [-1, 1]"));
    }
    if !(inc_deg.is_finite() && noise_db.is_finite() && noise_db >= 0.0) {
        return Err(argument("radar_forward: bad incidence or noise level"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = theta_map.values().len();
    let mut vv = Vec::with_capacity(n);
    let mut vh = Vec::with_capacity(n);
    for (&t, &nd) in theta_map.values().iter().zip(ndvi_map.values()) {
        let (e1, e2) = (gauss(&mut rng, noise_db), gauss(&mut rng, noise_db));
        if t.is_nan() {
            vv.push(f32::NAN);
            vh.push(f32::NAN);
            continue;
        }
        let v = vv_model_db(t, if nd.is_nan() { 0.0 } else { nd }, inc_deg) + e1;
        vv.push(v);
        vh.push(v + VH_OFFSET_DB + e2);
    }
    Ok((Raster2D::new(*theta_map.geo(), vv)?, Raster2D::new(*theta_map.geo(), vh)?))
}

/// Smooth field in `[-1, 1]`: mean of three random low-frequency waves.
fn smooth_field(geo: GridGeo, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            let fx = rng.random_range(-1.2f32..1.2);
            let fy = rng.random_range(-1.2f32..1.2);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            (fx, fy, phase)
        })
        .collect();
    let (w, h) = (geo.width as f32, geo.height as f32);
    let mut out = Vec::with_capacity(geo.len());
    for y in 0..geo.height {
        for x in 0..geo.width {
            let s: f32 = waves
                .iter()
                .map(|(fx, fy, ph)| (std::f32::consts::TAU * (fx * x as f32 / w + fy * y as f32 / h) + ph).sin())
                .sum();
            out.push(s / 3.0);
        }
    }
    out
}

/// Region index of a pixel column (vertical bands).
pub fn region_of(x: usize, width: usize, n_regions: usize) -> usize {
    (x * n_regions / width).min(n_regions - 1)
}

fn place_sites(cfg: &SimConfig, crops: &[CropPhenology]) -> Result<Vec<SiteMeta>> {
    let (w, h) = (cfg.grid.width as usize, cfg.grid.height as usize);
    let mut rng = stream(cfg.seed, STREAM_SITES);
    let mut taken = std::collections::BTreeSet::new();
    let mut sites = Vec::with_capacity(cfg.n_sites);
    for i in 0..cfg.n_sites {
        let r = i % cfg.n_regions;
        let (bx0, bx1) = (r * w / cfg.n_regions, ((r + 1) * w / cfg.n_regions).max(r * w / cfg.n_regions + 1));
        let interior_x = (bx0.max(1), bx1.min(w.saturating_sub(1)));
        let xr = if interior_x.0 < interior_x.1 { interior_x } else { (bx0, bx1) };
        let yr = if h >= 3 { (1, h - 1) } else { (0, h) };
        let mut placed = None;
        for _ in 0..10_000 {
            let p = (rng.random_range(xr.0..xr.1), rng.random_range(yr.0..yr.1));
            if taken.insert(p) {
                placed = Some(p);
                break;
            }
        }
        let (px, py) =
            placed.ok_or_else(|| validation(format!("no free pixel for site {} in region {}", i + 1, r + 1)))?;
        if !cfg.grid.contains(px as i64, py as i64) {
            return Err(validation(format!("site ({px}, {py}) outside grid")));
        }
        sites.push(SiteMeta {
            site_id: format!("S{:02}", i + 1),
            region_id: format!("R{}", r + 1),
            px: px as u32,
            py: py as u32,
            crop_label: crops[r % crops.len()].label.clone(),
        });
    }
    sites.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    Ok(sites)
}

/// Everything a simulation produces.
#[derive(Debug, Clone)]
pub struct World {
    pub sites: Vec<SiteMeta>,
    /// Radar and optical acquisitions.
    pub scenes: SceneSeries,
    pub sensors: Vec<SensorRecord>,
    pub weather: Vec<WeatherRecord>,
    /// Daily moisture maps (`SMC_MAP`).
    pub truth: SceneSeries,
    /// Daily noise-free NDVI maps.
    pub truth_ndvi: Vec<Raster2D>,
    /// `(day index, incidence)` of each radar acquisition.
    pub s1_incidence: Vec<(usize, f32)>,
    /// Soil parameters of each pixel (row-major), after infiltration jitter.
    pub pixel_soil: Vec<SoilParams>,
    /// Moisture before the first daily step.
    pub initial_theta: Raster2D,
}

/// Runs the full simulation. Day `d`'s moisture map already includes day
/// `d`'s rain and evapotranspiration.
pub fn generate_world(cfg: &SimConfig, soil: &SoilParams, crops: &[CropPhenology]) -> Result<World> {
    cfg.validate()?;
    soil.validate()?;
    if crops.is_empty() {
        return Err(validation("at least one crop phenology is required"));
    }
    for c in crops {
        c.validate()?;
    }
    let geo = cfg.grid;
    let (w, npx) = (geo.width as usize, geo.len());
    let weather = gen_weather(cfg)?;
    let sites = place_sites(cfg, crops)?;

    let mut frng = stream(cfg.seed, STREAM_FIELDS);
    let infil_field = smooth_field(geo, &mut frng);
    let ndvi_field = smooth_field(geo, &mut frng);
    let init_field = smooth_field(geo, &mut frng);
    let pixel_soil: Vec<SoilParams> =
        infil_field.iter().map(|f| SoilParams { k_infil: soil.k_infil * (1.0 + 0.3 * f), ..*soil }).collect();
    let pixel_crop: Vec<&CropPhenology> =
        (0..npx).map(|i| &crops[region_of(i % w, w, cfg.n_regions) % crops.len()]).collect();
    let mid = 0.5 * (soil.theta_r + soil.theta_s);
    let mut theta: Vec<f32> =
        init_field.iter().map(|f| (mid - 0.03 + 0.03 * f).clamp(soil.theta_r, soil.theta_s)).collect();
    let initial_theta = Raster2D::new(geo, theta.clone())?;

    let day0 = date_to_day(cfg.start()?);
    let mut inc_rng = stream(cfg.seed, STREAM_INCIDENCE);
    let mut truth_stacks = Vec::with_capacity(cfg.days as usize);
    let mut truth_ndvi = Vec::with_capacity(cfg.days as usize);
    let mut scene_stacks = Vec::new();
    let mut s1_incidence = Vec::new();
    for (d, wx) in weather.iter().enumerate() {
        for (t, p) in theta.iter_mut().zip(&pixel_soil) {
            *t = step_water_balance(*t, wx.rain_mm, wx.et0_mm, p)?;
        }
        let day = day0 + d as i64;
        let doy = wx.date.ordinal() as f32;
        let ndvi: Vec<f32> =
            (0..npx).map(|i| (pixel_crop[i].ndvi_at(doy) + 0.03 * ndvi_field[i]).clamp(-1.0, 1.0)).collect();
        let theta_map = Raster2D::new(geo, theta.clone())?;
        let ndvi_map = Raster2D::new(geo, ndvi)?;

        let s1 = d as u32 % cfg.revisit_s1 == 0;
        let s2 = d as u32 % cfg.revisit_s2 == 0;
        if s1 || s2 {
            let nodata = Raster2D::filled(geo, f32::NAN)?;
            let (vv, vh, inc) = if s1 {
                let inc = 30.0 + 15.0 * inc_rng.random::<f32>();
                s1_incidence.push((d, inc));
                let (vv, vh) = radar_forward(
                    &theta_map,
                    &ndvi_map,
                    inc,
                    cfg.noise_db,
                    derive_seed(cfg.seed, STREAM_RADAR + d as u64),
                )?;
                (vv, vh, Raster2D::filled(geo, inc)?)
            } else {
                (nodata.clone(), nodata.clone(), nodata.clone())
            };
            let bands = if s2 {
                optical_bands(&ndvi_map, cfg.optical_noise, derive_seed(cfg.seed, STREAM_OPTICAL + d as u64))?
            } else {
                [nodata.clone(), nodata.clone(), nodata.clone(), nodata.clone()]
            };
            let [red, green, blue, nir] = bands;
            let planes = vec![vv, vh, inc, red, green, blue, nir];
            scene_stacks.push(RasterStack::new(day, SCENE_CHANNELS.into_iter().zip(planes).collect())?);
        }
        truth_stacks.push(RasterStack::new(day, vec![(ChannelId::SmcMap, theta_map)])?);
        truth_ndvi.push(ndvi_map);
    }

    let mut sensors = Vec::with_capacity(sites.len() * weather.len());
    for (si, site) in sites.iter().enumerate() {
        let mut rng = stream(cfg.seed, STREAM_SENSOR + si as u64);
        let idx = geo.index(site.px as usize, site.py as usize);
        for (d, wx) in weather.iter().enumerate() {
            let noise = gauss(&mut rng, cfg.sensor_noise);
            let lost = rng.random::<f32>() < cfg.sensor_dropout;
            let truth = truth_stacks[d].channels()[0].1.values()[idx];
            let (smc, qc) = if lost { (f32::NAN, Qc::Missing) } else { ((truth + noise).clamp(0.0, 1.0), Qc::Ok) };
            sensors.push(SensorRecord { site_id: site.site_id.clone(), date: wx.date, depth_cm: 30.0, smc, qc });
        }
    }
    sensors.sort_by(|a, b| (a.date, &a.site_id).cmp(&(b.date, &b.site_id)));

    let cadence = gcd(cfg.revisit_s1, cfg.revisit_s2);
    Ok(World {
        sites,
        scenes: SceneSeries::new(scene_stacks, cadence)?,
        sensors,
        weather,
        truth: SceneSeries::new(truth_stacks, 1)?,
        truth_ndvi,
        s1_incidence,
        pixel_soil,
        initial_theta,
    })
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Surface reflectances consistent with a target NDVI, plus band noise.
fn optical_bands(ndvi: &Raster2D, noise: f32, seed: u64) -> Result<[Raster2D; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ndvi.values().len();
    let mut bands: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for &v in ndvi.values() {
        let v = v.max(-0.9);
        let nir = 0.3 + 0.2 * v;
        let red = nir * (1.0 - v) / (1.0 + v);
        let green = 0.2 * (red + nir);
        let blue = 0.6 * red;
        for (b, x) in bands.iter_mut().zip([red, green, blue, nir]) {
            b.push((x + gauss(&mut rng, noise)).max(0.0));
        }
    }
    let geo = *ndvi.geo();
    let [r, g, b, nir] = bands;
    Ok([Raster2D::new(geo, r)?, Raster2D::new(geo, g)?, Raster2D::new(geo, b)?, Raster2D::new(geo, nir)?])
}
