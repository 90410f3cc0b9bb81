//! CSV ingestion of ground records and alignment onto a shared daily axis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::raster::{ChannelId, SceneSeries};

/// Longest run of missing sensor days that is linearly interpolated.
pub const DEFAULT_GAP_FILL_DAYS: u32 = 3;

const SENSOR_HEADER: [&str; 5] = ["site_id", "date", "depth_cm", "smc_m3m3", "qc"];
const WEATHER_HEADER: [&str; 5] = ["date", "rain_mm", "et0_mm", "tmin_c", "tmax_c"];
const SITES_HEADER: [&str; 5] = ["site_id", "region_id", "px", "py", "crop_label"];

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch")
}

/// Days since 1970-01-01.
pub fn date_to_day(d: NaiveDate) -> i64 {
    (d - epoch()).num_days()
}

pub fn day_to_date(day: i64) -> NaiveDate {
    if day >= 0 {
        epoch().checked_add_days(Days::new(day as u64))
    } else {
        epoch().checked_sub_days(Days::new(day.unsigned_abs()))
    }
    .expect("day within calendar range")
}

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| validation(format!("bad date {s:?}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Qc {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "SUSPECT")]
    Suspect,
    #[serde(rename = "MISSING")]
    Missing,
}

impl fmt::Display for Qc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Qc::Ok => "OK",
            Qc::Suspect => "SUSPECT",
            Qc::Missing => "MISSING",
        })
    }
}

impl FromStr for Qc {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "OK" => Ok(Qc::Ok),
            "SUSPECT" => Ok(Qc::Suspect),
            "MISSING" => Ok(Qc::Missing),
            other => Err(format!("unknown qc flag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorRecord {
    pub site_id: String,
    pub date: NaiveDate,
    pub depth_cm: f32,
    /// NaN when the logger recorded nothing.
    pub smc: f32,
    pub qc: Qc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeatherRecord {
    pub date: NaiveDate,
    pub rain_mm: f32,
    pub et0_mm: f32,
    pub tmin_c: f32,
    pub tmax_c: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMeta {
    pub site_id: String,
    pub region_id: String,
    pub px: u32,
    pub py: u32,
    pub crop_label: String,
}

/// Reads a headed CSV, handing each record and its 1-based file line to `row`.
fn read_rows<T>(
    path: &Path,
    header: &[&str],
    mut row: impl FnMut(&csv::StringRecord) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let row_err = |line: u64, message: String| Error::Row { path: path.to_path_buf(), line, message };
    let got = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(row_err(
            1,
            format!("expected header {}, found {}", header.join(","), got.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                kind => row_err(line, format!("{kind:?}")),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        out.push(row(&rec).map_err(|m| row_err(line, m))?);
    }
    Ok(out)
}

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| format!("missing column {name}"))?;
    raw.parse().map_err(|e| format!("{name}: cannot parse {raw:?}: {e}"))
}

fn date_field(rec: &csv::StringRecord, i: usize) -> std::result::Result<NaiveDate, String> {
    parse_date(rec.get(i).unwrap_or("")).map_err(|e| e.to_string())
}

fn finite(v: f32, name: &str) -> std::result::Result<f32, String> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{name} must be finite"))
    }
}

pub fn load_sensor_csv(path: impl AsRef<Path>) -> Result<Vec<SensorRecord>> {
    read_rows(path.as_ref(), &SENSOR_HEADER, |rec| {
        let site_id: String = field(rec, 0, "site_id")?;
        if site_id.is_empty() {
            return Err("empty site_id".into());
        }
        let qc: Qc = field(rec, 4, "qc")?;
        let raw = rec.get(3).unwrap_or("");
        let smc = if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
            f32::NAN
        } else {
            field::<f32>(rec, 3, "smc_m3m3")?
        };
        if qc == Qc::Ok && !(0.0..=1.0).contains(&smc) {
            return Err(format!("smc_m3m3 {raw:?} outside [0, 1] on an OK record"));
        }
        Ok(SensorRecord {
            site_id,
            date: date_field(rec, 1)?,
            depth_cm: finite(field(rec, 2, "depth_cm")?, "depth_cm")?,
            smc,
            qc,
        })
    })
}

pub fn load_weather_csv(path: impl AsRef<Path>) -> Result<Vec<WeatherRecord>> {
    read_rows(path.as_ref(), &WEATHER_HEADER, |rec| {
        let r = WeatherRecord {
            date: date_field(rec, 0)?,
            rain_mm: finite(field(rec, 1, "rain_mm")?, "rain_mm")?,
            et0_mm: finite(field(rec, 2, "et0_mm")?, "et0_mm")?,
            tmin_c: finite(field(rec, 3, "tmin_c")?, "tmin_c")?,
            tmax_c: finite(field(rec, 4, "tmax_c")?, "tmax_c")?,
        };
        if r.rain_mm < 0.0 || r.et0_mm < 0.0 {
            return Err("rain_mm and et0_mm must be non-negative".into());
        }
        if r.tmin_c > r.tmax_c {
            return Err("tmin_c exceeds tmax_c".into());
        }
        Ok(r)
    })
}

pub fn load_sites_csv(path: impl AsRef<Path>) -> Result<Vec<SiteMeta>> {
    let sites = read_rows(path.as_ref(), &SITES_HEADER, |rec| {
        Ok(SiteMeta {
            site_id: field(rec, 0, "site_id")?,
            region_id: field(rec, 1, "region_id")?,
            px: field(rec, 2, "px")?,
            py: field(rec, 3, "py")?,
            crop_label: field(rec, 4, "crop_label")?,
        })
    })?;
    let mut seen = BTreeSet::new();
    for s in &sites {
        if !seen.insert(&s.site_id) {
            return Err(validation(format!("duplicate site {}", s.site_id)));
        }
    }
    Ok(sites)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_sensor_csv(path: impl AsRef<Path>, records: &[SensorRecord]) -> Result<()> {
    let mut s = SENSOR_HEADER.join(",") + "\n";
    for r in records {
        let smc = if r.smc.is_nan() { String::new() } else { r.smc.to_string() };
        s += &format!("{},{},{},{},{}\n", r.site_id, r.date, r.depth_cm, smc, r.qc);
    }
    write_text(path.as_ref(), &s)
}

pub fn write_weather_csv(path: impl AsRef<Path>, records: &[WeatherRecord]) -> Result<()> {
    let mut s = WEATHER_HEADER.join(",") + "\n";
    for r in records {
        s += &format!("{},{},{},{},{}\n", r.date, r.rain_mm, r.et0_mm, r.tmin_c, r.tmax_c);
    }
    write_text(path.as_ref(), &s)
}

pub fn write_sites_csv(path: impl AsRef<Path>, sites: &[SiteMeta]) -> Result<()> {
    let mut s = SITES_HEADER.join(",") + "\n";
    for m in sites {
        s += &format!("{},{},{},{},{}\n", m.site_id, m.region_id, m.px, m.py, m.crop_label);
    }
    write_text(path.as_ref(), &s)
}

/// Provenance of an aligned daily sensor value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFlag {
    Ok,
    Interpolated,
    Missing,
}

/// Most recent acquisition carrying a channel, relative to an aligned day.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EoRef {
    /// Index into the scene series.
    pub stack: usize,
    /// Days since that acquisition.
    pub age: u32,
}

/// Ground and imagery records on one contiguous daily axis.
#[derive(Debug, Clone)]
pub struct AlignedDataset {
    /// Days since epoch, contiguous and increasing.
    pub days: Vec<i64>,
    /// Sorted site identifiers.
    pub site_ids: Vec<String>,
    /// `[site][day]`, NaN where missing.
    pub smc: Vec<Vec<f32>>,
    pub flags: Vec<Vec<SampleFlag>>,
    /// One record per day.
    pub weather: Vec<WeatherRecord>,
    /// Channel list of the scene series.
    pub channels: Vec<ChannelId>,
    /// `[day][channel]` forward-fill source.
    pub eo: Vec<Vec<Option<EoRef>>>,
}

impl AlignedDataset {
    pub fn site_index(&self, site_id: &str) -> Option<usize> {
        self.site_ids.binary_search_by(|s| s.as_str().cmp(site_id)).ok()
    }

    /// Rows ordered by `(date, site_id)`.
    pub fn rows(&self) -> impl Iterator<Item = (i64, &str, f32, SampleFlag)> + '_ {
        self.days.iter().enumerate().flat_map(move |(d, &day)| {
            self.site_ids.iter().enumerate().map(move |(s, id)| (day, id.as_str(), self.smc[s][d], self.flags[s][d]))
        })
    }
}

/// Aligns sensor, weather and imagery records onto the days they all cover.
///
/// The window starts at the latest of the first sensor day, first weather
/// day and first acquisition, and ends at the earlier of the last sensor and
/// last weather day. Only `OK` readings count as observations. Gaps of at
/// most `gap_fill_days` between two observations are linearly interpolated;
/// longer gaps and anything before the first or after the last observation
/// stay missing. Imagery channels are forward-filled from the latest
/// acquisition whose plane is not entirely nodata.
pub fn align_daily(
    sensors: &[SensorRecord],
    weather: &[WeatherRecord],
    series: &SceneSeries,
    gap_fill_days: u32,
) -> Result<AlignedDataset> {
    series.validate()?;
    if sensors.is_empty() || weather.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let mut wx = BTreeMap::new();
    for w in weather {
        if wx.insert(date_to_day(w.date), w).is_some() {
            return Err(validation(format!("duplicate weather record for {}", w.date)));
        }
    }
    let mut by_site: BTreeMap<&str, BTreeMap<i64, &SensorRecord>> = BTreeMap::new();
    for r in sensors {
        if by_site.entry(&r.site_id).or_default().insert(date_to_day(r.date), r).is_some() {
            return Err(validation(format!("duplicate sensor record for {} on {}", r.site_id, r.date)));
        }
    }
    let s_first = by_site.values().filter_map(|m| m.keys().next()).min().copied().unwrap_or(i64::MAX);
    let s_last = by_site.values().filter_map(|m| m.keys().next_back()).max().copied().unwrap_or(i64::MIN);
    let w_first = *wx.keys().next().expect("non-empty");
    let w_last = *wx.keys().next_back().expect("non-empty");
    let eo_first = series.stacks[0].timestamp();
    let start = s_first.max(w_first).max(eo_first);
    let end = s_last.min(w_last);
    if start > end {
        return Err(Error::EmptyOverlap);
    }
    let days: Vec<i64> = (start..=end).collect();

    let weather: Vec<WeatherRecord> = days
        .iter()
        .map(|d| {
            wx.get(d)
                .map(|w| (*w).clone())
                .ok_or_else(|| validation(format!("no weather record for {}", day_to_date(*d))))
        })
        .collect::<Result<_>>()?;

    let site_ids: Vec<String> = by_site.keys().map(|s| s.to_string()).collect();
    let mut smc = Vec::with_capacity(site_ids.len());
    let mut flags = Vec::with_capacity(site_ids.len());
    for recs in by_site.values() {
        let obs: Vec<(i64, f32)> =
            recs.iter().filter(|(_, r)| r.qc == Qc::Ok && !r.smc.is_nan()).map(|(&d, r)| (d, r.smc)).collect();
        let mut vals = Vec::with_capacity(days.len());
        let mut fl = Vec::with_capacity(days.len());
        for &d in &days {
            let i = obs.partition_point(|&(od, _)| od < d);
            if i < obs.len() && obs[i].0 == d {
                vals.push(obs[i].1);
                fl.push(SampleFlag::Ok);
            } else if i > 0 && i < obs.len() && (obs[i].0 - obs[i - 1].0 - 1) <= gap_fill_days as i64 {
                let (d0, v0) = obs[i - 1];
                let (d1, v1) = obs[i];
                let t = (d - d0) as f64 / (d1 - d0) as f64;
                vals.push((v0 as f64 + t * (v1 as f64 - v0 as f64)) as f32);
                fl.push(SampleFlag::Interpolated);
            } else {
                vals.push(f32::NAN);
                fl.push(SampleFlag::Missing);
            }
        }
        smc.push(vals);
        flags.push(fl);
    }

    let channels: Vec<ChannelId> = series.stacks[0].channel_ids().collect();
    let mut eo = Vec::with_capacity(days.len());
    let mut latest: Vec<Option<usize>> = vec![None; channels.len()];
    let mut next = 0;
    for &d in &days {
        while next < series.stacks.len() && series.stacks[next].timestamp() <= d {
            for (c, (_, plane)) in series.stacks[next].channels().iter().enumerate() {
                if !plane.all_nan() {
                    latest[c] = Some(next);
                }
            }
            next += 1;
        }
        eo.push(
            latest
                .iter()
                .map(|l| l.map(|s| EoRef { stack: s, age: (d - series.stacks[s].timestamp()) as u32 }))
                .collect(),
        );
    }

    Ok(AlignedDataset { days, site_ids, smc, flags, weather, channels, eo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GridGeo, Raster2D, RasterStack};

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn sensor(site: &str, date: &str, v: f32, qc: Qc) -> SensorRecord {
        SensorRecord { site_id: site.into(), date: d(date), depth_cm: 30.0, smc: v, qc }
    }

    fn weather_span(from: &str, n: u64) -> Vec<WeatherRecord> {
        (0..n)
            .map(|i| WeatherRecord {
                date: d(from).checked_add_days(Days::new(i)).unwrap(),
                rain_mm: i as f32,
                et0_mm: 3.0,
                tmin_c: 8.0,
                tmax_c: 20.0,
            })
            .collect()
    }

    fn series_at(dates: &[&str]) -> SceneSeries {
        let g = GridGeo::new(2, 2, 0.0, 0.0, 10.0).unwrap();
        let stacks = dates
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let vv = Raster2D::filled(g, -10.0 - i as f32).unwrap();
                let nir =
                    if i % 2 == 0 { Raster2D::filled(g, 0.4).unwrap() } else { Raster2D::filled(g, f32::NAN).unwrap() };
                RasterStack::new(date_to_day(d(s)), vec![(ChannelId::VvDb, vv), (ChannelId::Nir, nir)]).unwrap()
            })
            .collect();
        SceneSeries::new(stacks, 1).unwrap()
    }

    #[test]
    fn date_round_trip() {
        assert_eq!(date_to_day(d("1970-01-01")), 0);
        assert_eq!(date_to_day(d("2015-01-01")), 16_436);
        assert_eq!(day_to_date(-1), d("1969-12-31"));
        for day in [-400, 0, 16_436, 20_000] {
            assert_eq!(date_to_day(day_to_date(day)), day);
        }
    }

    #[test]
    fn short_gap_interpolated() {
        let s = vec![sensor("A", "2020-01-01", 0.20, Qc::Ok), sensor("A", "2020-01-04", 0.26, Qc::Ok)];
        let a = align_daily(&s, &weather_span("2020-01-01", 10), &series_at(&["2020-01-01"]), 3).unwrap();
        assert_eq!(a.days.len(), 4);
        assert_eq!(
            a.flags[0],
            vec![SampleFlag::Ok, SampleFlag::Interpolated, SampleFlag::Interpolated, SampleFlag::Ok]
        );
        assert!((a.smc[0][1] - 0.22).abs() < 1e-6);
        assert!((a.smc[0][2] - 0.24).abs() < 1e-6);
    }

    #[test]
    fn long_gap_stays_missing() {
        let mut s = vec![sensor("A", "2020-01-01", 0.2, Qc::Ok), sensor("A", "2020-01-06", 0.3, Qc::Ok)];
        s.push(sensor("A", "2020-01-03", 0.9, Qc::Suspect));
        let a = align_daily(&s, &weather_span("2020-01-01", 10), &series_at(&["2020-01-01"]), 3).unwrap();
        assert!(a.flags[0][1..5].iter().all(|f| *f == SampleFlag::Missing));
        assert!(a.smc[0][1..5].iter().all(|v| v.is_nan()));
    }

    #[test]
    fn no_extrapolation_and_row_order() {
        let s = vec![
            sensor("B", "2020-01-01", 0.3, Qc::Ok),
            sensor("A", "2020-01-02", 0.2, Qc::Ok),
            sensor("A", "2020-01-03", f32::NAN, Qc::Missing),
            sensor("B", "2020-01-03", 0.31, Qc::Ok),
        ];
        let a = align_daily(&s, &weather_span("2020-01-01", 10), &series_at(&["2020-01-01"]), 3).unwrap();
        assert_eq!(a.site_ids, vec!["A", "B"]);
        assert_eq!(a.flags[0][0], SampleFlag::Missing);
        assert_eq!(a.flags[0][2], SampleFlag::Missing);
        let rows: Vec<_> = a.rows().map(|(day, id, _, _)| (day, id.to_string())).collect();
        let mut sorted = rows.clone();
        sorted.sort();
        assert_eq!(rows, sorted);
        assert_eq!(rows.len(), 6);
    }

    #[test]
    fn eo_forward_fill_and_age() {
        let s = vec![sensor("A", "2020-01-01", 0.2, Qc::Ok), sensor("A", "2020-01-06", 0.2, Qc::Ok)];
        let a = align_daily(&s, &weather_span("2020-01-01", 10), &series_at(&["2020-01-01", "2020-01-03"]), 3).unwrap();
        // VV present in both stacks, NIR nodata in the second
        assert_eq!(a.eo[3][0], Some(EoRef { stack: 1, age: 1 }));
        assert_eq!(a.eo[3][1], Some(EoRef { stack: 0, age: 3 }));
        assert_eq!(a.weather[2].rain_mm, 2.0);
    }

    #[test]
    fn empty_overlap() {
        let s = vec![sensor("A", "2020-01-01", 0.2, Qc::Ok)];
        let e = align_daily(&s, &weather_span("2021-01-01", 5), &series_at(&["2020-01-01"]), 3).unwrap_err();
        assert!(matches!(e, Error::EmptyOverlap));
    }

    #[test]
    fn csv_round_trip_and_row_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sensors.csv");
        let recs = vec![sensor("S01", "2020-01-01", 0.25, Qc::Ok), sensor("S01", "2020-01-02", f32::NAN, Qc::Missing)];
        write_sensor_csv(&p, &recs).unwrap();
        let back = load_sensor_csv(&p).unwrap();
        assert_eq!(back[0], recs[0]);
        assert!(back[1].smc.is_nan() && back[1].qc == Qc::Missing);

        fs::write(&p, "site_id,date,depth_cm,smc_m3m3,qc\nS01,2020-01-01,30,0.2,OK\nS01,2020-13-01,30,0.2,OK\n")
            .unwrap();
        match load_sensor_csv(&p).unwrap_err() {
            Error::Row { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        fs::write(&p, "site_id,date,depth_cm,smc_m3m3,qc\nS01,2020-01-01,30,1.4,OK\n").unwrap();
        assert!(matches!(load_sensor_csv(&p).unwrap_err(), Error::Row { line: 2, .. }));
        fs::write(&p, "site,date\n").unwrap();
        assert!(matches!(load_sensor_csv(&p).unwrap_err(), Error::Row { line: 1, .. }));
        assert!(matches!(load_sensor_csv(dir.path().join("nope.csv")).unwrap_err(), Error::Io { .. }));

        let w = dir.path().join("weather.csv");
        write_weather_csv(&w, &weather_span("2020-01-01", 3)).unwrap();
        assert_eq!(load_weather_csv(&w).unwrap(), weather_span("2020-01-01", 3));
        let sp = dir.path().join("sites.csv");
        let sites =
            vec![SiteMeta { site_id: "S01".into(), region_id: "R1".into(), px: 3, py: 4, crop_label: "shiraz".into() }];
        write_sites_csv(&sp, &sites).unwrap();
        assert_eq!(load_sites_csv(&sp).unwrap(), sites);
    }
}
