//! Adam + BPTT training loops for both forecasters.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ae::AeModel;
use super::lstm::LstmModel;
use super::windows::{MapWindows, SiteWindows};
use crate::error::{validation, Error, Result};
use crate::nn::{clip_global_norm, ensure_finite_grads, AdamState, Graph, NodeId, ParamStore, Tensor};
use crate::scalar::Scalar;
use crate::simworld::derive_seed;

fn default_clip() -> f32 {
    5.0
}
fn default_final_lr() -> f32 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    /// Extra epochs are added until at least this many optimizer steps run.
    #[serde(default)]
    pub min_steps: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f32,
    /// Learning rate at the last epoch as a fraction of `lr` (linear decay).
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f32,
    /// Decoupled (AdamW-style) weight decay.
    #[serde(default)]
    pub weight_decay: f32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(validation("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.clip_norm > 0.0) {
            return Err(validation("lr and clip_norm must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(validation("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(validation("final_lr_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Epoch count after honouring `min_steps` for `n` windows.
    pub fn effective_epochs(&self, n: usize) -> usize {
        let per_epoch = n.div_ceil(self.batch_size).max(1);
        self.epochs.max(self.min_steps.div_ceil(per_epoch))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: u64,
    pub epochs: usize,
}

/// Probability of feeding the true previous map to the decoder: 1 at the
/// first epoch, falling linearly to 0 at the halfway epoch.
pub fn teacher_forcing_prob(epoch: usize, total_epochs: usize) -> f64 {
    let half = total_epochs as f64 / 2.0;
    (1.0 - epoch as f64 / half).clamp(0.0, 1.0)
}

const STREAM_INIT: u64 = 10;
const STREAM_SHUFFLE: u64 = 11;

/// Seeded generator for model initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT))
}

/// Access to a model's parameters for the optimizer.
pub trait Trainable<F> {
    fn params(&self) -> &ParamStore<F>;
    fn params_mut(&mut self) -> &mut ParamStore<F>;
}

impl<F: Scalar> Trainable<F> for AeModel<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}

impl<F: Scalar> Trainable<F> for LstmModel<F> {
    fn params(&self) -> &ParamStore<F> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}

/// Shuffled mini-batch Adam with global-norm clipping. `loss_fn` builds the
/// batch loss given window indices and the teacher-forcing probability.
pub fn fit<F, M, L>(model: &mut M, n: usize, tc: &TrainConfig, seed: u64, mut loss_fn: L) -> Result<TrainReport>
where
    F: Scalar,
    M: Trainable<F>,
    L: FnMut(&mut Graph<F>, &M, &[usize], f64, &mut ChaCha8Rng) -> Result<NodeId>,
{
    tc.validate()?;
    if n == 0 {
        return Err(validation("no training windows"));
    }
    let epochs = tc.effective_epochs(n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE));
    let mut adam = AdamState::new(model.params(), F::lit(tc.lr as f64));
    adam.weight_decay = F::lit(tc.weight_decay as f64);
    // biases and the output head are not decayed
    adam.decay_mask =
        model.params().iter().map(|p| !p.name.ends_with(".bias") && !p.name.starts_with("head.")).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(epochs);
    let mut steps = 0u64;
    for epoch in 0..epochs {
        let frac = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 0.0 };
        adam.lr = F::lit(tc.lr as f64 * (1.0 - frac * (1.0 - tc.final_lr_fraction as f64)));
        let tf = teacher_forcing_prob(epoch, epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut g = Graph::new();
            let loss = loss_fn(&mut g, model, batch, tf, &mut rng)?;
            let lv = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {lv} at epoch {epoch}, step {steps} (previous epoch mean {:?})",
                    trace.last()
                )));
            }
            let mut grads = g.backward(loss, model.params());
            ensure_finite_grads(model.params(), &grads)?;
            clip_global_norm(&mut grads, F::lit(tc.clip_norm as f64));
            adam.update(model.params_mut(), &grads)?;
            total += lv * batch.len() as f64;
            steps += 1;
        }
        let mean = total / n as f64;
        log::debug!("epoch {epoch}: loss {mean:.6e}");
        trace.push(mean);
    }
    Ok(TrainReport { loss_trace: trace, steps, epochs })
}

fn stack_maps<F: Scalar>(g: &mut Graph<F>, maps: &[NodeId]) -> Result<NodeId> {
    if maps.len() == 1 {
        Ok(maps[0])
    } else {
        g.concat(maps)
    }
}

fn concat_tensors<F: Scalar>(parts: &[Tensor<F>]) -> Tensor<F> {
    // N x 1 x H x W pieces -> N x K x H x W
    let (n, _, h, w) = parts[0].dims4();
    let k = parts.len();
    let mut out = Vec::with_capacity(n * k * h * w);
    for i in 0..n {
        for p in parts {
            out.extend_from_slice(&p.data()[i * h * w..(i + 1) * h * w]);
        }
    }
    Tensor::new(&[n, k, h, w], out).expect("size")
}

/// Masked-MSE loss of the AE on windows `idx`; `tf` is the teacher-forcing
/// probability, decided per step for the whole batch.
pub fn ae_loss<F: Scalar>(
    g: &mut Graph<F>,
    model: &AeModel<F>,
    data: &MapWindows,
    idx: &[usize],
    tf: f64,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let frames: Vec<NodeId> = data.inputs::<F>(idx).into_iter().map(|f| g.input(f)).collect();
    let (targets, masks) = data.targets::<F>(idx);
    let mut feedback = vec![None; data.horizon];
    for k in 1..data.horizon {
        if tf > 0.0 && rng.random_bool(tf) {
            feedback[k] = Some(g.input(targets[k - 1].clone()));
        }
    }
    let outs = model.forward_graph(g, &frames, &feedback)?;
    let pred = stack_maps(g, &outs)?;
    g.masked_mse(pred, concat_tensors(&targets), concat_tensors(&masks))
}

pub fn lstm_loss<F: Scalar>(
    g: &mut Graph<F>,
    model: &LstmModel<F>,
    data: &SiteWindows,
    idx: &[usize],
) -> Result<NodeId> {
    let steps: Vec<NodeId> = data.inputs::<F>(idx).into_iter().map(|x| g.input(x)).collect();
    let (t, m) = data.targets::<F>(idx);
    let pred = model.forward_graph(g, &steps)?;
    g.masked_mse(pred, t, m)
}

pub fn ae_train<F: Scalar>(
    model: &mut AeModel<F>,
    data: &MapWindows,
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    data.validate()?;
    if data.input_len != model.cfg.input_len
        || data.horizon != model.cfg.horizon
        || data.channels != model.cfg.in_channels
    {
        return Err(validation("window layout does not match the AE configuration"));
    }
    fit(model, data.len(), tc, seed, |g, m, idx, tf, rng| ae_loss(g, m, data, idx, tf, rng))
}

pub fn lstm_train<F: Scalar>(
    model: &mut LstmModel<F>,
    data: &SiteWindows,
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    data.validate()?;
    if data.input_len != model.cfg.input_len || data.horizon != model.cfg.horizon || data.dim != model.cfg.input_dim {
        return Err(validation("window layout does not match the LSTM configuration"));
    }
    fit(model, data.len(), tc, seed, |g, m, idx, _, _| lstm_loss(g, m, data, idx))
}

/// Masked MSE of free-running AE forecasts over all windows.
pub fn ae_mse<F: Scalar>(model: &AeModel<F>, data: &MapWindows, batch: usize) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let out = model.forecast(&data.inputs::<F>(chunk))?;
        let (t, m) = data.targets::<F>(chunk);
        for ((o, t), m) in out.iter().zip(&t).zip(&m) {
            for ((p, y), w) in o.data().iter().zip(t.data()).zip(m.data()) {
                let e = (*p - *y).to_f64().unwrap_or(f64::NAN);
                let w = w.to_f64().unwrap_or(0.0);
                num += w * e * e;
                den += w;
            }
        }
    }
    Ok(num / den)
}

/// Masked MSE of LSTM forecasts over all windows.
pub fn lstm_mse<F: Scalar>(model: &LstmModel<F>, data: &SiteWindows, batch: usize) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let out = model.forecast(&data.inputs::<F>(chunk))?;
        let (t, m) = data.targets::<F>(chunk);
        for ((p, y), w) in out.data().iter().zip(t.data()).zip(m.data()) {
            let e = (*p - *y).to_f64().unwrap_or(f64::NAN);
            let w = w.to_f64().unwrap_or(0.0);
            num += w * e * e;
            den += w;
        }
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{AeConfig, LstmConfig};

    #[test]
    fn teacher_schedule() {
        assert_eq!(teacher_forcing_prob(0, 10), 1.0);
        assert_eq!(teacher_forcing_prob(5, 10), 0.0);
        assert_eq!(teacher_forcing_prob(9, 10), 0.0);
        assert!((teacher_forcing_prob(2, 10) - 0.6).abs() < 1e-12);
        assert_eq!(teacher_forcing_prob(0, 1), 1.0);
    }

    #[test]
    fn min_steps_extends_epochs() {
        let tc = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch_size: 4,
            min_steps: 10,
            clip_norm: 5.0,
            final_lr_fraction: 1.0,
            weight_decay: 0.0,
        };
        assert_eq!(tc.effective_epochs(8), 5);
        assert_eq!(tc.effective_epochs(100), 2);
    }

    fn toy_sites() -> SiteWindows {
        let (sites, days, dim) = (2, 20, 14);
        let features: Vec<f32> = (0..sites * days * dim).map(|i| ((i * 7919) % 13) as f32 / 13.0 - 0.5).collect();
        let targets: Vec<f32> = (0..sites * days).map(|i| 0.2 + 0.01 * ((i * 31) % 7) as f32).collect();
        let windows = (0..sites).flat_map(|s| (3..days - 2).map(move |o| (s, o))).collect();
        SiteWindows { dim, sites, days, features, targets, windows, input_len: 4, horizon: 2 }
    }

    #[test]
    fn lstm_training_deterministic_and_improves() {
        let data = toy_sites();
        let cfg = LstmConfig { hidden: 8, input_len: 4, horizon: 2, ..LstmConfig::default() };
        let tc = TrainConfig {
            epochs: 15,
            lr: 1e-2,
            batch_size: 8,
            min_steps: 0,
            clip_norm: 5.0,
            final_lr_fraction: 1.0,
            weight_decay: 0.0,
        };
        let run = || {
            let mut m = LstmModel::<f32>::new(cfg.clone(), &mut init_rng(3)).unwrap();
            let r = lstm_train(&mut m, &data, &tc, 3).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert!(m1.store.bitwise_eq(&m2.store));
        assert!(r1.loss_trace.iter().all(|v| v.is_finite()));
        assert!(r1.loss_trace.last().unwrap() < &r1.loss_trace[0]);
        assert!(lstm_mse(&m1, &data, 16).unwrap().is_finite());
    }

    #[test]
    fn ae_training_deterministic() {
        let (days, c, h, w) = (8, 14, 4, 4);
        let data = MapWindows {
            channels: c,
            height: h,
            width: w,
            days,
            frames: (0..days * c * h * w).map(|i| ((i * 31) % 11) as f32 / 11.0).collect(),
            targets: (0..days * h * w).map(|i| if i % 5 == 0 { f32::NAN } else { 0.2 + 0.001 * i as f32 }).collect(),
            origins: vec![1, 2, 3, 4],
            input_len: 2,
            horizon: 2,
        };
        let cfg = AeConfig { stem_channels: [2, 3], hidden: 3, input_len: 2, horizon: 2, ..AeConfig::default() };
        let tc = TrainConfig {
            epochs: 4,
            lr: 1e-2,
            batch_size: 2,
            min_steps: 0,
            clip_norm: 5.0,
            final_lr_fraction: 0.5,
            weight_decay: 0.0,
        };
        let run = || {
            let mut m = AeModel::<f32>::new(cfg.clone(), h, w, &mut init_rng(5)).unwrap();
            ae_train(&mut m, &data, &tc, 5).unwrap()
        };
        assert_eq!(run(), run());
    }
}
