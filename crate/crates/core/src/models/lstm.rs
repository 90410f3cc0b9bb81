//! Sensor-fused LSTM forecasting site moisture from per-site feature vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, validation, Result};
use crate::nn::{he_uniform, Graph, LstmCellParams, LstmLayer, NodeId, ParamId, ParamStore, Tensor};
use crate::raster::N_FEATURES;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// History length `T` fed per forecast.
    pub input_len: usize,
    /// Forecast steps `K`.
    pub horizon: usize,
    pub theta_r: f32,
    pub theta_s: f32,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            input_dim: N_FEATURES,
            hidden: 64,
            layers: 2,
            input_len: 10,
            horizon: 3,
            theta_r: 0.05,
            theta_s: 0.45,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 || self.input_len < 1 {
            return Err(validation("LSTM needs input_len >= 1 and horizon >= 1"));
        }
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(validation("LSTM sizes must be positive"));
        }
        if !(self.theta_r < self.theta_s) {
            return Err(validation("LSTM needs theta_r < theta_s"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LstmModel<F> {
    pub cfg: LstmConfig,
    pub store: ParamStore<F>,
    layers: Vec<LstmLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Scalar> LstmModel<F> {
    pub fn new(cfg: LstmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let layers = (0..cfg.layers)
            .map(|l| {
                let input = if l == 0 { cfg.input_dim } else { cfg.hidden };
                LstmLayer::register(&mut store, &format!("lstm.{l}"), LstmCellParams::init(input, cfg.hidden, rng))
            })
            .collect();
        let head_in = cfg.hidden + cfg.input_dim;
        let head_w = store.add("head.weight", he_uniform(&[cfg.horizon, head_in], head_in, rng));
        let head_b = store.add("head.bias", Tensor::zeros(&[cfg.horizon]));
        Ok(LstmModel { cfg, store, layers, head_w, head_b })
    }

    /// Rebuilds the layout and replaces parameters by name from `params`.
    pub fn with_params<G: Scalar>(cfg: LstmConfig, params: &ParamStore<G>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut m = Self::new(cfg, &mut rng)?;
        if params.len() != m.store.len() {
            return Err(validation(format!("checkpoint has {} tensors, model needs {}", params.len(), m.store.len())));
        }
        for p in m.store.iter_mut() {
            let id = params.find(&p.name).ok_or_else(|| validation(format!("checkpoint lacks tensor {}", p.name)))?;
            let src = params.get(id);
            if src.shape() != p.value.shape() {
                return Err(validation(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.cast();
        }
        Ok(m)
    }

    pub fn zero_head(&mut self) {
        for id in [self.head_w, self.head_b] {
            self.store.get_mut(id).scale(F::zero());
        }
    }

    /// `steps` nodes of `N x input_dim` in, one `N x K` node out. The dense
    /// head reads `[h_T, x_T]`.
    pub fn forward_graph(&self, g: &mut Graph<F>, steps: &[NodeId]) -> Result<NodeId> {
        if steps.is_empty() {
            return Err(argument("empty history"));
        }
        let shape = g.value(steps[0]).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(argument(format!("history steps must be N x {}, got {shape:?}", self.cfg.input_dim)));
        }
        let n = shape[0];
        let zero = g.input(Tensor::zeros(&[n, self.cfg.hidden]));
        let mut state = vec![(zero, zero); self.layers.len()];
        for &x0 in steps {
            let mut x = x0;
            for (layer, st) in self.layers.iter().zip(state.iter_mut()) {
                *st = layer.step(g, &self.store, x, st.0, st.1)?;
                x = st.0;
            }
        }
        // the head sees the last input next to the top hidden state
        let top = state.last().expect("at least one layer").0;
        let last = *steps.last().expect("non-empty");
        let top = g.concat(&[top, last])?;
        let (w, b) = (g.param(&self.store, self.head_w), g.param(&self.store, self.head_b));
        let y = g.linear(top, w, b)?;
        let s = g.sigmoid(y);
        let (tr, ts) = (F::lit(self.cfg.theta_r as f64), F::lit(self.cfg.theta_s as f64));
        Ok(g.affine(s, ts - tr, tr))
    }

    /// Batched forecast: each step `N x input_dim`, result `N x K`.
    pub fn forecast(&self, steps: &[Tensor<F>]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = steps.iter().map(|s| g.input(s.clone())).collect();
        let out = self.forward_graph(&mut g, &ids)?;
        Ok(g.value(out).clone())
    }
}

/// Forecast for one site from a `T x input_dim` history.
pub fn lstm_forecast<F: Scalar>(model: &LstmModel<F>, history: &Tensor<F>) -> Result<Vec<F>> {
    let (t, d) = match history.shape() {
        &[t, d] => (t, d),
        s => return Err(argument(format!("history must be T x features, got {s:?}"))),
    };
    if t == 0 {
        return Err(argument("empty history"));
    }
    let steps: Vec<Tensor<F>> =
        (0..t).map(|i| Tensor::new(&[1, d], history.data()[i * d..(i + 1) * d].to_vec())).collect::<Result<_>>()?;
    Ok(model.forecast(&steps)?.into_data())
}
