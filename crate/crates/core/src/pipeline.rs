//! Command implementations behind the `smcforge` binary.
//!
//! Every command reads one JSON [`RunConfig`], writes only below the work
//! directory and finishes by writing `manifests/<command>.json` with the
//! SHA-256 of every input and output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Error, Result};
use crate::eval::ablation::{evaluate_climatology, inversion_row, rows_for, ModelKind};
use crate::eval::{ablation_experiment, evaluate_ae, evaluate_lstm, render_heatmap, AblationConfig, MetricReport};
use crate::features::{crop_mask, ndvi};
use crate::ingest::{
    align_daily, date_to_day, day_to_date, load_sensor_csv, load_sites_csv, load_weather_csv, parse_date,
    write_sensor_csv, write_sites_csv, write_weather_csv,
};
use crate::models::{prepare, AeConfig, AeModel, FeatureSettings, LstmConfig, LstmModel, Prepared, Split, TrainConfig};
use crate::nn::{load_checkpoint, save_checkpoint, ParamStore};
use crate::raster::{cube_read, cube_write, ChannelId, Raster2D, RasterStack, SceneSeries};
use crate::simworld::{default_crops, generate_world, CropPhenology, SimConfig, SoilParams, World};

pub const SITES_FILE: &str = "sites.csv";
pub const SENSORS_FILE: &str = "sensors.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const SCENES_FILE: &str = "scenes.smc1";
pub const TRUTH_FILE: &str = "truth.smc1";
pub const WORLD_FILE: &str = "world.json";

const PREDICT_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Train,
    Predict,
    Evaluate,
    Compare,
    NdviMap,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Compare => "compare",
            Command::NdviMap => "ndvi-map",
        }
    }
}

fn default_models() -> Vec<ModelKind> {
    vec![ModelKind::Ae, ModelKind::Lstm]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    pub ae: TrainConfig,
    pub lstm: TrainConfig,
}

fn default_holdout_time() -> f64 {
    0.2
}
fn default_holdout_sites() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_holdout_time")]
    pub holdout_time: f64,
    #[serde(default = "default_holdout_sites")]
    pub holdout_sites: f64,
}

/// Inclusive range of forecast origin dates; the last available day when
/// both ends are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    #[serde(default)]
    pub start: Option<String>,
    #[serde(default)]
    pub end: Option<String>,
}

fn default_data_dir() -> String {
    "world".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub workdir: String,
    /// Directory of the record files, relative to the work directory.
    #[serde(default = "default_data_dir")]
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    #[serde(default)]
    pub soil: SoilParams,
    #[serde(default = "default_crops")]
    pub crops: Vec<CropPhenology>,
    #[serde(default)]
    pub features: FeatureSettings,
    #[serde(default)]
    pub ae: AeConfig,
    #[serde(default)]
    pub lstm: LstmConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub predict: PredictSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| validation(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.soil.validate()?;
        if self.crops.is_empty() {
            return Err(validation("config: at least one crop is required"));
        }
        for c in &self.crops {
            c.validate()?;
        }
        self.ae.validate()?;
        self.lstm.validate()?;
        self.train.ae.validate()?;
        self.train.lstm.validate()?;
        if self.train.models.is_empty() {
            return Err(validation("config: train.models is empty"));
        }
        if !(0.0..=1.0).contains(&self.features.crop_threshold) {
            return Err(validation("config: features.crop_threshold outside [0, 1]"));
        }
        let e = &self.eval;
        if e.fractions.is_empty() || e.seeds.is_empty() {
            return Err(validation("config: eval.fractions and eval.seeds must be non-empty"));
        }
        if let Some(f) = e.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(validation(format!("config: eval fraction {f} outside (0, 1]")));
        }
        if !(e.holdout_time > 0.0 && e.holdout_time < 1.0 && e.holdout_sites > 0.0 && e.holdout_sites < 1.0) {
            return Err(validation("config: holdout fractions must lie in (0, 1)"));
        }
        if self.ae.horizon != self.lstm.horizon {
            return Err(validation("config: ae.horizon and lstm.horizon differ"));
        }
        for d in [&self.predict.start, &self.predict.end].into_iter().flatten() {
            parse_date(d)?;
        }
        if let Some(d) = &self.features.ndvi_date {
            parse_date(d)?;
        }
        for p in [&self.paths.workdir, &self.paths.data] {
            if p.is_empty() {
                return Err(validation("config: empty path"));
            }
        }
        if Path::new(&self.paths.data).is_absolute() || self.paths.data.split(['/', '\\']).any(|c| c == "..") {
            return Err(validation("config: paths.data must stay inside the work directory"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the work directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn output(&self, path: &str) -> Option<&FileHash> {
        self.outputs.iter().find(|f| f.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A loaded configuration bound to its work directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub workdir: PathBuf,
    config_sha256: String,
}

impl Context {
    /// Reads and validates `config_path`. `seed` replaces both the world
    /// seed and the training seed; `workdir` replaces `paths.workdir`. A
    /// relative work directory from the file is taken relative to the file.
    pub fn load(config_path: impl AsRef<Path>, seed: Option<u64>, workdir: Option<PathBuf>) -> Result<Self> {
        let config_path = config_path.as_ref();
        let text = fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
        let mut config = RunConfig::from_json(&text)?;
        let workdir = match workdir {
            Some(w) => w,
            None => {
                let w = PathBuf::from(&config.paths.workdir);
                if w.is_relative() {
                    config_path.parent().unwrap_or(Path::new(".")).join(w)
                } else {
                    w
                }
            }
        };
        if let Some(s) = seed {
            config.sim.seed = s;
            config.train.seed = s;
        }
        Self::new(config, workdir)
    }

    pub fn new(config: RunConfig, workdir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let config_sha256 = sha256_hex(&serde_json::to_vec(&config)?);
        Ok(Context { config, workdir: workdir.into(), config_sha256 })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }

    fn data_rel(&self, file: &str) -> String {
        format!("{}/{}", self.config.paths.data.trim_end_matches('/'), file)
    }

    fn manifest_path(&self, cmd: Command) -> PathBuf {
        self.path(&format!("manifests/{}.json", cmd.name()))
    }

    fn split(&self, n_days: usize, n_sites: usize) -> Result<Split> {
        Split::new(n_days, n_sites, self.config.eval.holdout_time, self.config.eval.holdout_sites)
    }
}

/// Tracks files read and written by one command.
struct Recorder<'a> {
    ctx: &'a Context,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl<'a> Recorder<'a> {
    fn new(ctx: &'a Context) -> Self {
        Recorder { ctx, inputs: Vec::new(), outputs: Vec::new() }
    }

    fn hash(&self, rel: &str) -> Result<FileHash> {
        let p = self.ctx.path(rel);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(FileHash { path: rel.to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
    }

    /// Fails with a hint naming `producer` when the file is absent.
    fn require(&mut self, rel: &str, producer: Command) -> Result<PathBuf> {
        let p = self.ctx.path(rel);
        if !p.is_file() {
            return Err(Error::MissingArtifact { path: p, run_first: producer.name() });
        }
        let h = self.hash(rel)?;
        self.inputs.push(h);
        Ok(p)
    }

    fn optional(&mut self, rel: &str) -> Result<Option<PathBuf>> {
        let p = self.ctx.path(rel);
        if !p.is_file() {
            return Ok(None);
        }
        let h = self.hash(rel)?;
        self.inputs.push(h);
        Ok(Some(p))
    }

    /// Creates the parent directory and returns the absolute path.
    fn target(&self, rel: &str) -> Result<PathBuf> {
        let p = self.ctx.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    fn wrote(&mut self, rel: &str) -> Result<()> {
        let h = self.hash(rel)?;
        self.outputs.push(h);
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.target(rel)?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.wrote(rel)
    }

    fn finish(
        self,
        cmd: Command,
        seeds: BTreeMap<String, serde_json::Value>,
        summary: serde_json::Value,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool: "smcforge".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: cmd.name().into(),
            config_sha256: self.ctx.config_sha256.clone(),
            seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            summary,
        };
        let p = self.ctx.manifest_path(cmd);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }
}

fn seeds_of(pairs: &[(&str, serde_json::Value)]) -> BTreeMap<String, serde_json::Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn date_str(day: i64) -> String {
    day_to_date(day).format("%Y-%m-%d").to_string()
}

pub fn run(ctx: &Context, cmd: Command) -> Result<RunManifest> {
    log::info!("{} in {}", cmd.name(), ctx.workdir.display());
    match cmd {
        Command::Simulate => cmd_simulate(ctx),
        Command::Train => cmd_train(ctx),
        Command::Predict => cmd_predict(ctx),
        Command::Evaluate => cmd_evaluate(ctx),
        Command::Compare => cmd_compare(ctx),
        Command::NdviMap => cmd_ndvi_map(ctx),
    }
}

/// Generates the synthetic world into the data directory.
pub fn cmd_simulate(ctx: &Context) -> Result<RunManifest> {
    let c = &ctx.config;
    let world = generate_world(&c.sim, &c.soil, &c.crops)?;
    let mut rec = Recorder::new(ctx);
    let rel = |f| ctx.data_rel(f);
    write_sites_csv(rec.target(&rel(SITES_FILE))?, &world.sites)?;
    rec.wrote(&rel(SITES_FILE))?;
    write_sensor_csv(rec.target(&rel(SENSORS_FILE))?, &world.sensors)?;
    rec.wrote(&rel(SENSORS_FILE))?;
    write_weather_csv(rec.target(&rel(WEATHER_FILE))?, &world.weather)?;
    rec.wrote(&rel(WEATHER_FILE))?;
    cube_write(&world.scenes, rec.target(&rel(SCENES_FILE))?)?;
    rec.wrote(&rel(SCENES_FILE))?;
    cube_write(&world.truth, rec.target(&rel(TRUTH_FILE))?)?;
    rec.wrote(&rel(TRUTH_FILE))?;
    let world_doc = serde_json::json!({
        "seed": c.sim.seed,
        "sim": c.sim,
        "soil": c.soil,
        "crops": c.crops,
    });
    rec.write(&rel(WORLD_FILE), &serde_json::to_vec_pretty(&world_doc)?)?;
    let summary = serde_json::json!({
        "days": c.sim.days,
        "sites": world.sites.len(),
        "sensor_records": world.sensors.len(),
        "scenes": world.scenes.stacks.len(),
    });
    rec.finish(Command::Simulate, seeds_of(&[("sim", c.sim.seed.into())]), summary)
}

/// Model inputs for an in-memory world, split as `config.eval` prescribes.
pub fn prepare_world(config: &RunConfig, world: &World) -> Result<Prepared> {
    let aligned = align_daily(&world.sensors, &world.weather, &world.scenes, config.features.gap_fill_days)?;
    let split =
        Split::new(aligned.days.len(), aligned.site_ids.len(), config.eval.holdout_time, config.eval.holdout_sites)?;
    prepare(&aligned, &world.scenes, &world.sites, Some(&world.truth), &config.features, split)
}

/// Reads the record files of the data directory into model inputs.
fn load_prepared(ctx: &Context, rec: &mut Recorder) -> Result<Prepared> {
    let rel = |f| ctx.data_rel(f);
    let sites = load_sites_csv(rec.require(&rel(SITES_FILE), Command::Simulate)?)?;
    let sensors = load_sensor_csv(rec.require(&rel(SENSORS_FILE), Command::Simulate)?)?;
    let weather = load_weather_csv(rec.require(&rel(WEATHER_FILE), Command::Simulate)?)?;
    let scenes = cube_read(rec.require(&rel(SCENES_FILE), Command::Simulate)?)?;
    let truth = match rec.optional(&rel(TRUTH_FILE))? {
        Some(p) => Some(cube_read(p)?),
        None => None,
    };
    let aligned = align_daily(&sensors, &weather, &scenes, ctx.config.features.gap_fill_days)?;
    let split = ctx.split(aligned.days.len(), aligned.site_ids.len())?;
    prepare(&aligned, &scenes, &sites, truth.as_ref(), &ctx.config.features, split)
}

fn checkpoint_rel(kind: ModelKind) -> String {
    format!("models/{}.ckpt.json", kind.name())
}

/// Trains each configured model on all training days and sites.
pub fn cmd_train(ctx: &Context) -> Result<RunManifest> {
    let c = &ctx.config;
    let mut rec = Recorder::new(ctx);
    let prep = load_prepared(ctx, &mut rec)?;
    let seed = c.train.seed;
    let mut summary = serde_json::Map::new();
    for &kind in &c.train.models {
        let (store, report, config, tc) = match kind {
            ModelKind::Ae => {
                let (m, r) = crate::eval::ablation::train_ae(&prep, &c.ae, &c.train.ae, 1.0, seed)?;
                (m.store, r, serde_json::to_value(&c.ae)?, &c.train.ae)
            }
            ModelKind::Lstm => {
                let (m, r) = crate::eval::ablation::train_lstm(&prep, &c.lstm, &c.train.lstm, 1.0, seed)?;
                (m.store, r, serde_json::to_value(&c.lstm)?, &c.train.lstm)
            }
        };
        log::info!(
            "{}: {} steps, loss {:.4e} -> {:.4e}",
            kind.name(),
            report.steps,
            report.loss_trace[0],
            report.loss_trace.last().copied().unwrap_or(f64::NAN)
        );
        let hyper = serde_json::json!({
            "train": tc,
            "grid": [prep.geo.height, prep.geo.width],
        });
        let ckpt = checkpoint_rel(kind);
        save_checkpoint(rec.target(&ckpt)?, &store, kind.name(), config, hyper, seed, report.steps)?;
        rec.wrote(&ckpt)?;
        rec.wrote(&ckpt.replace(".json", ".bin"))?;
        let trace_rel = format!("models/{}.train.json", kind.name());
        rec.write(&trace_rel, &serde_json::to_vec_pretty(&report)?)?;
        summary.insert(
            kind.name().into(),
            serde_json::json!({ "steps": report.steps, "final_loss": report.loss_trace.last() }),
        );
    }
    rec.write("models/stats.json", &serde_json::to_vec_pretty(&prep.stats)?)?;
    rec.finish(Command::Train, seeds_of(&[("train", seed.into())]), summary.into())
}

enum Trained {
    Ae(AeModel<f32>),
    Lstm(LstmModel<f32>),
}

fn load_model(ctx: &Context, rec: &mut Recorder, kind: ModelKind, prep: &Prepared) -> Result<Trained> {
    let rel = checkpoint_rel(kind);
    let path = rec.require(&rel, Command::Train)?;
    rec.require(&rel.replace(".json", ".bin"), Command::Train)?;
    let (manifest, store): (_, ParamStore<f32>) = load_checkpoint(&path)?;
    if manifest.model != kind.name() {
        return Err(validation(format!("{} holds a {} model", path.display(), manifest.model)));
    }
    let bad = |e: serde_json::Error| validation(format!("{}: {e}", path.display()));
    Ok(match kind {
        ModelKind::Ae => {
            let cfg: AeConfig = serde_json::from_value(manifest.config).map_err(bad)?;
            if cfg != ctx.config.ae {
                log::warn!("using the AE architecture stored in {}", path.display());
            }
            Trained::Ae(AeModel::with_params(cfg, prep.geo.height as usize, prep.geo.width as usize, &store)?)
        }
        ModelKind::Lstm => {
            let cfg: LstmConfig = serde_json::from_value(manifest.config).map_err(bad)?;
            if cfg != ctx.config.lstm {
                log::warn!("using the LSTM architecture stored in {}", path.display());
            }
            Trained::Lstm(LstmModel::with_params(cfg, &store)?)
        }
    })
}

/// Day indices of the configured origin range that have a full history.
fn predict_origins(ctx: &Context, prep: &Prepared, input_len: usize) -> Result<Vec<usize>> {
    let days = &prep.days;
    let last = *days.last().ok_or_else(|| validation("no aligned days"))?;
    let p = &ctx.config.predict;
    let start = match &p.start {
        Some(d) => date_to_day(parse_date(d)?),
        None => p.end.as_deref().map(|d| parse_date(d).map(date_to_day)).transpose()?.unwrap_or(last),
    };
    let end = match &p.end {
        Some(d) => date_to_day(parse_date(d)?),
        None => last,
    };
    if start > end {
        return Err(validation("predict: start after end"));
    }
    let origins: Vec<usize> =
        (0..days.len()).filter(|&i| i + 1 >= input_len && days[i] >= start && days[i] <= end).collect();
    if origins.is_empty() {
        return Err(validation(format!(
            "predict: no origin in {}..={} with {input_len} days of history inside {}..={}",
            date_str(start),
            date_str(end),
            date_str(days[0]),
            date_str(last)
        )));
    }
    Ok(origins)
}

/// Forecast maps per lead as cubes, heatmaps of the latest origin, and site
/// forecasts as CSV.
pub fn cmd_predict(ctx: &Context) -> Result<RunManifest> {
    let mut rec = Recorder::new(ctx);
    let prep = load_prepared(ctx, &mut rec)?;
    let models: Vec<(ModelKind, Trained)> = ctx
        .config
        .train
        .models
        .iter()
        .map(|&k| Ok((k, load_model(ctx, &mut rec, k, &prep)?)))
        .collect::<Result<_>>()?;
    let mut summary = serde_json::Map::new();
    for (kind, model) in models {
        match model {
            Trained::Ae(m) => {
                let (t, k) = (m.cfg.input_len, m.cfg.horizon);
                let origins = predict_origins(ctx, &prep, t)?;
                let windows = prep.ae_windows_at(origins.clone(), t, k);
                let mut per_lead: Vec<Vec<RasterStack>> = vec![Vec::new(); k];
                let idx: Vec<usize> = (0..origins.len()).collect();
                let plane = prep.geo.len();
                for chunk in idx.chunks(PREDICT_BATCH) {
                    let maps = m.forecast(&windows.inputs::<f32>(chunk))?;
                    for (lead, out) in maps.iter().enumerate() {
                        for (b, &wi) in chunk.iter().enumerate() {
                            let values = out.data()[b * plane..(b + 1) * plane].to_vec();
                            let day = prep.days[origins[wi]] + lead as i64 + 1;
                            let raster = Raster2D::new(prep.geo, values)?;
                            per_lead[lead].push(RasterStack::new(day, vec![(ChannelId::SmcMap, raster)])?);
                        }
                    }
                }
                let last_origin = prep.days[*origins.last().expect("non-empty")];
                for (lead, stacks) in per_lead.into_iter().enumerate() {
                    let latest = stacks.last().expect("non-empty").get(ChannelId::SmcMap).expect("smc").clone();
                    let cube_rel = format!("predict/ae_lead{}.smc1", lead + 1);
                    cube_write(&SceneSeries::new(stacks, 1)?, rec.target(&cube_rel)?)?;
                    rec.wrote(&cube_rel)?;
                    let png_rel = format!("predict/ae_{}_lead{}.png", date_str(last_origin), lead + 1);
                    render_heatmap(&latest, m.cfg.theta_r, m.cfg.theta_s, rec.target(&png_rel)?)?;
                    rec.wrote(&png_rel)?;
                }
                summary.insert(kind.name().into(), serde_json::json!({ "origins": origins.len(), "leads": k }));
            }
            Trained::Lstm(m) => {
                let (t, k) = (m.cfg.input_len, m.cfg.horizon);
                let origins = predict_origins(ctx, &prep, t)?;
                let sites: Vec<usize> = (0..prep.n_sites()).collect();
                let windows = prep.lstm_windows_at(&sites, &origins, t, k);
                let mut csv = String::from("site_id,origin,target,lead,smc\n");
                let idx: Vec<usize> = (0..windows.len()).collect();
                for chunk in idx.chunks(PREDICT_BATCH * 4) {
                    let pred = m.forecast(&windows.inputs::<f32>(chunk))?;
                    for (b, &wi) in chunk.iter().enumerate() {
                        let (s, o) = windows.windows[wi];
                        for lead in 0..k {
                            csv += &format!(
                                "{},{},{},{},{}\n",
                                prep.site_ids[s],
                                date_str(prep.days[o]),
                                date_str(prep.days[o] + lead as i64 + 1),
                                lead + 1,
                                pred.data()[b * k + lead]
                            );
                        }
                    }
                }
                rec.write("predict/lstm_sites.csv", csv.as_bytes())?;
                summary.insert(
                    kind.name().into(),
                    serde_json::json!({ "origins": origins.len(), "sites": sites.len(), "leads": k }),
                );
            }
        }
    }
    rec.finish(Command::Predict, BTreeMap::new(), summary.into())
}

/// Held-out metrics of the trained models next to the training-mean and
/// same-day radar inversion references.
pub fn cmd_evaluate(ctx: &Context) -> Result<RunManifest> {
    let c = &ctx.config;
    let mut rec = Recorder::new(ctx);
    let prep = load_prepared(ctx, &mut rec)?;
    let mut report = MetricReport::default();
    let seed = c.train.seed;
    for &kind in &c.train.models {
        let steps = match load_model(ctx, &mut rec, kind, &prep)? {
            Trained::Ae(m) => evaluate_ae(&m, &prep)?,
            Trained::Lstm(m) => evaluate_lstm(&m, &prep)?,
        };
        report.rows.extend(rows_for(kind.name(), 1.0, seed, &steps)?);
    }
    let clim = evaluate_climatology(&prep, c.lstm.horizon, c.ae.input_len.max(c.lstm.input_len));
    report.rows.extend(rows_for("climatology", 1.0, 0, &clim)?);
    report.rows.push(inversion_row(&prep, c.lstm.theta_r, c.lstm.theta_s)?);
    rec.write("reports/metrics.csv", report.to_csv().as_bytes())?;
    let cells = report.summary();
    rec.write("reports/metrics_summary.json", &serde_json::to_vec_pretty(&cells)?)?;
    let summary: serde_json::Map<String, serde_json::Value> = cells
        .iter()
        .filter(|c| c.horizon == "all" || c.horizon == "0")
        .map(|c| (c.model.clone(), serde_json::json!(c.rmse_mean)))
        .collect();
    rec.finish(Command::Evaluate, seeds_of(&[("train", seed.into())]), serde_json::json!({ "rmse": summary }))
}

/// How the two forecasters compare across training-data fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonVerdict {
    pub low_fraction: f64,
    pub lstm_rmse_low: f64,
    pub ae_rmse_low: f64,
    pub lstm_better_low: bool,
    pub full_fraction: f64,
    pub lstm_rmse_full: f64,
    pub ae_rmse_full: f64,
    /// Larger over smaller mean RMSE at the full fraction.
    pub full_ratio: f64,
    pub within_band: bool,
    /// Training-mean predictor at the full fraction.
    pub climatology_rmse_full: f64,
    pub both_beat_climatology: bool,
}

pub const SIMILARITY_BAND: f64 = 1.5;

pub fn comparison_verdict(report: &MetricReport, fractions: &[f64]) -> Option<ComparisonVerdict> {
    let lo = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (l_lo, a_lo) = (report.mean_rmse("lstm", lo)?, report.mean_rmse("ae", lo)?);
    let (l_hi, a_hi) = (report.mean_rmse("lstm", hi)?, report.mean_rmse("ae", hi)?);
    let ratio = l_hi.max(a_hi) / l_hi.min(a_hi);
    let clim = report.mean_rmse("climatology", hi)?;
    Some(ComparisonVerdict {
        low_fraction: lo,
        lstm_rmse_low: l_lo,
        ae_rmse_low: a_lo,
        lstm_better_low: l_lo < a_lo,
        full_fraction: hi,
        lstm_rmse_full: l_hi,
        ae_rmse_full: a_hi,
        full_ratio: ratio,
        within_band: ratio <= SIMILARITY_BAND,
        climatology_rmse_full: clim,
        both_beat_climatology: l_hi < clim && a_hi < clim,
    })
}

pub fn ablation_config(c: &RunConfig) -> AblationConfig {
    AblationConfig {
        fractions: c.eval.fractions.clone(),
        seeds: c.eval.seeds.clone(),
        models: c.train.models.clone(),
        ae: c.ae.clone(),
        lstm: c.lstm.clone(),
        ae_train: c.train.ae.clone(),
        lstm_train: c.train.lstm.clone(),
    }
}

/// The training-data ablation over `eval.fractions` x `eval.seeds`.
pub fn cmd_compare(ctx: &Context) -> Result<RunManifest> {
    let c = &ctx.config;
    let mut rec = Recorder::new(ctx);
    let prep = load_prepared(ctx, &mut rec)?;
    let report = ablation_experiment(&prep, &ablation_config(c))?;
    rec.write("reports/ablation.csv", report.to_csv().as_bytes())?;
    let verdict = comparison_verdict(&report, &c.eval.fractions);
    let doc = serde_json::json!({ "cells": report.summary(), "verdict": verdict });
    rec.write("reports/ablation_summary.json", &serde_json::to_vec_pretty(&doc)?)?;
    rec.finish(
        Command::Compare,
        seeds_of(&[("eval", serde_json::to_value(&c.eval.seeds)?)]),
        serde_json::to_value(&verdict)?,
    )
}

fn optical_planes(stack: &RasterStack) -> Option<(&Raster2D, &Raster2D)> {
    let nir = stack.get(ChannelId::Nir)?;
    let red = stack.get(ChannelId::Red)?;
    (!nir.all_nan() && !red.all_nan()).then_some((nir, red))
}

/// NDVI heatmap of one optical acquisition; cells below the crop threshold
/// are shown as no-data.
pub fn cmd_ndvi_map(ctx: &Context) -> Result<RunManifest> {
    let c = &ctx.config;
    let mut rec = Recorder::new(ctx);
    let scenes = cube_read(rec.require(&ctx.data_rel(SCENES_FILE), Command::Simulate)?)?;
    let optical: Vec<&RasterStack> = scenes.stacks.iter().filter(|s| optical_planes(s).is_some()).collect();
    let stack = match &c.features.ndvi_date {
        Some(d) => {
            let day = date_to_day(parse_date(d)?);
            *optical.iter().find(|s| s.timestamp() == day).ok_or_else(|| {
                let nearest =
                    optical.iter().min_by_key(|s| (s.timestamp() - day).abs()).map(|s| date_str(s.timestamp()));
                validation(format!(
                    "no optical acquisition on {d} (nearest: {})",
                    nearest.unwrap_or_else(|| "none".into())
                ))
            })?
        }
        None => *optical.last().ok_or_else(|| validation("scene series has no optical acquisition"))?,
    };
    let (nir, red) = optical_planes(stack).expect("filtered");
    let index = ndvi(nir, red)?;
    let mask = crop_mask(&index, c.features.crop_threshold)?;
    let shown = Raster2D::new(
        *index.geo(),
        index.values().iter().zip(mask.values()).map(|(&v, &m)| if m > 0.5 { v } else { f32::NAN }).collect(),
    )?;
    let date = date_str(stack.timestamp());
    let rel = format!("ndvi/ndvi_{date}.png");
    render_heatmap(&shown, 0.0, 1.0, rec.target(&rel)?)?;
    rec.wrote(&rel)?;
    let crop_cells = mask.values().iter().filter(|&&m| m > 0.5).count();
    let summary = serde_json::json!({
        "date": date,
        "ndvi_mean": index.nan_mean(),
        "crop_fraction": crop_cells as f64 / mask.values().len() as f64,
    });
    rec.finish(Command::NdviMap, BTreeMap::new(), summary)
}

/// Reads `manifests/<command>.json` from the work directory.
pub fn read_manifest(ctx: &Context, cmd: Command) -> Result<RunManifest> {
    let p = ctx.manifest_path(cmd);
    let text = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_slice(&text)?)
}
