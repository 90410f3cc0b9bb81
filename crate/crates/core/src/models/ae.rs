//! ConvLSTM encoder-decoder forecasting soil-moisture maps from imagery.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, validation, Result};
use crate::nn::{
    he_uniform, ConvLstmCellParams, ConvLstmLayer, Graph, LstmCellParams, LstmLayer, NodeId, ParamId, ParamStore,
    Tensor,
};
use crate::raster::N_FEATURES;
use crate::scalar::Scalar;

/// Moisture value around which decoder feedback maps are centred.
const FEEDBACK_CENTER: f64 = 0.25;
const FEEDBACK_SCALE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeConfig {
    pub in_channels: usize,
    /// Output channels of the two stride-2 stem convolutions.
    pub stem_channels: [usize; 2],
    pub hidden: usize,
    /// ConvLSTM layers in the encoder and in the decoder.
    pub layers: usize,
    pub kernel: usize,
    /// Input frames `T`.
    pub input_len: usize,
    /// Forecast steps `K`.
    pub horizon: usize,
    pub theta_r: f32,
    pub theta_s: f32,
    /// Dense LSTM cells on flattened pixels instead of ConvLSTM cells.
    pub flatten_mode: bool,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            in_channels: N_FEATURES,
            stem_channels: [16, 32],
            hidden: 32,
            layers: 2,
            kernel: 3,
            input_len: 10,
            horizon: 3,
            theta_r: 0.05,
            theta_s: 0.45,
            flatten_mode: false,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_len < 1 || self.horizon < 1 {
            return Err(validation("AE needs input_len >= 1 and horizon >= 1"));
        }
        if self.in_channels == 0 || self.hidden == 0 || self.layers == 0 || self.stem_channels.contains(&0) {
            return Err(validation("AE channel counts and layer count must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(validation("AE kernel must be odd"));
        }
        if !(self.theta_r < self.theta_s) {
            return Err(validation("AE needs theta_r < theta_s"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn conv<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv {
            w: store.add(format!("{name}.weight"), he_uniform(&[cout, cin, k, k], cin * k * k, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn deconv<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv {
            w: store.add(format!("{name}.weight"), he_uniform(&[cin, cout, k, k], cin * k * k, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn dense<F: Scalar>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Conv {
            w: store.add(format!("{name}.weight"), he_uniform(&[cout, cin], cin, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn nodes<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>) -> (NodeId, NodeId) {
        (g.param(store, self.w), g.param(store, self.b))
    }
}

#[derive(Debug, Clone)]
enum Body {
    Conv {
        enc_stem: [Conv; 2],
        dec_stem: [Conv; 2],
        encoder: Vec<ConvLstmLayer>,
        decoder: Vec<ConvLstmLayer>,
        deconv: [Conv; 2],
    },
    Flat {
        encoder: Vec<LstmLayer>,
        decoder: Vec<LstmLayer>,
        head: Conv,
    },
}

/// Encoder-decoder over `T` imagery frames producing `K` moisture maps.
#[derive(Debug, Clone)]
pub struct AeModel<F> {
    pub cfg: AeConfig,
    /// Grid the flattened variant was built for; any grid divisible by 4 otherwise.
    pub grid: Option<(usize, usize)>,
    pub store: ParamStore<F>,
    body: Body,
}

impl<F: Scalar> AeModel<F> {
    /// Convolutional model (or flattened model for an `height x width` grid
    /// when `cfg.flatten_mode` is set).
    pub fn new(cfg: AeConfig, height: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(argument(format!("grid {height}x{width} is not divisible by 4")));
        }
        let mut store = ParamStore::new();
        let k = cfg.kernel;
        let body = if cfg.flatten_mode {
            let px = height * width;
            let layers = |store: &mut ParamStore<F>, name: &str, first_in: usize, rng: &mut _| -> Vec<LstmLayer> {
                (0..cfg.layers)
                    .map(|l| {
                        let input = if l == 0 { first_in } else { cfg.hidden };
                        LstmLayer::register(store, &format!("{name}.{l}"), LstmCellParams::init(input, cfg.hidden, rng))
                    })
                    .collect()
            };
            let encoder = layers(&mut store, "encoder", cfg.in_channels * px, rng);
            let decoder = layers(&mut store, "decoder", px, rng);
            let head = Conv::dense(&mut store, "head", cfg.hidden, px, rng);
            Body::Flat { encoder, decoder, head }
        } else {
            let [s0, s1] = cfg.stem_channels;
            let enc_stem = [
                Conv::conv(&mut store, "enc_stem.0", cfg.in_channels, s0, 3, rng),
                Conv::conv(&mut store, "enc_stem.1", s0, s1, 3, rng),
            ];
            let dec_stem = [
                Conv::conv(&mut store, "dec_stem.0", 1, s0, 3, rng),
                Conv::conv(&mut store, "dec_stem.1", s0, s1, 3, rng),
            ];
            let mut layers = |name: &str, rng: &mut _| -> Result<Vec<ConvLstmLayer>> {
                (0..cfg.layers)
                    .map(|l| {
                        let input = if l == 0 { s1 } else { cfg.hidden };
                        let p = ConvLstmCellParams::init(input, cfg.hidden, k, rng)?;
                        Ok(ConvLstmLayer::register(&mut store, &format!("{name}.{l}"), p))
                    })
                    .collect()
            };
            let encoder = layers("encoder", rng)?;
            let decoder = layers("decoder", rng)?;
            let deconv = [
                Conv::deconv(&mut store, "deconv.0", cfg.hidden, s0, 3, rng),
                Conv::deconv(&mut store, "deconv.1", s0, 1, 3, rng),
            ];
            Body::Conv { enc_stem, dec_stem, encoder, decoder, deconv }
        };
        Ok(AeModel { grid: cfg.flatten_mode.then_some((height, width)), cfg, store, body })
    }

    /// Rebuilds the layout and replaces parameters by name from `params`.
    pub fn with_params<G: Scalar>(cfg: AeConfig, height: usize, width: usize, params: &ParamStore<G>) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut m = Self::new(cfg, height, width, &mut rng)?;
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

    /// Zeroes the output layer so every forecast is the range midpoint.
    pub fn zero_head(&mut self) {
        let ids = match &self.body {
            Body::Conv { deconv, .. } => [deconv[1].w, deconv[1].b],
            Body::Flat { head, .. } => [head.w, head.b],
        };
        for id in ids {
            self.store.get_mut(id).scale(F::zero());
        }
    }

    fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(argument(format!("grid {h}x{w} is not divisible by 4")));
        }
        if let Some(grid) = self.grid {
            if grid != (h, w) {
                return Err(argument(format!("flattened model built for {grid:?}, got {h}x{w}")));
            }
        }
        Ok(())
    }

    fn head_output(&self, g: &mut Graph<F>, logits: NodeId) -> NodeId {
        let s = g.sigmoid(logits);
        let (tr, ts) = (F::lit(self.cfg.theta_r as f64), F::lit(self.cfg.theta_s as f64));
        g.affine(s, ts - tr, tr)
    }

    /// Builds the forward pass on `g`.
    ///
    /// `frames` holds `T` nodes of shape `N x C x H x W`. `feedback[k]`, when
    /// set, replaces the model's own step-`k-1` prediction as decoder input
    /// at step `k` (teacher forcing); index 0 is ignored since the first
    /// decoder step reads a zero map. Returns `K` nodes of shape
    /// `N x 1 x H x W`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<F>,
        frames: &[NodeId],
        feedback: &[Option<NodeId>],
    ) -> Result<Vec<NodeId>> {
        let cfg = &self.cfg;
        if frames.len() != cfg.input_len {
            return Err(argument(format!("expected {} frames, got {}", cfg.input_len, frames.len())));
        }
        let shape = g.value(frames[0]).shape().to_vec();
        if shape.len() != 4 || shape[1] != cfg.in_channels {
            return Err(argument(format!("frames must be N x {} x H x W, got {shape:?}", cfg.in_channels)));
        }
        if frames.iter().any(|f| g.value(*f).shape() != shape.as_slice()) {
            return Err(argument("frames differ in shape"));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        self.check_grid(h, w)?;
        let store = &self.store;
        let fb_scale = F::lit(1.0 / FEEDBACK_SCALE);
        let fb_shift = F::lit(-FEEDBACK_CENTER / FEEDBACK_SCALE);
        let mut outputs = Vec::with_capacity(cfg.horizon);
        match &self.body {
            Body::Conv { enc_stem, dec_stem, encoder, decoder, deconv } => {
                let stem = |g: &mut Graph<F>, convs: &[Conv; 2], x: NodeId| -> Result<NodeId> {
                    let mut x = x;
                    for c in convs {
                        let (cw, cb) = c.nodes(g, store);
                        let y = g.conv2d(x, cw, cb, 2, 1)?;
                        x = g.tanh(y);
                    }
                    Ok(x)
                };
                let zero = g.input(Tensor::zeros(&[n, cfg.hidden, h / 4, w / 4]));
                let mut state: Vec<(NodeId, NodeId)> = vec![(zero, zero); cfg.layers];
                for &f in frames {
                    let mut x = stem(g, enc_stem, f)?;
                    for (layer, st) in encoder.iter().zip(state.iter_mut()) {
                        *st = layer.step(g, store, x, st.0, st.1)?;
                        x = st.0;
                    }
                }
                let go = g.input(Tensor::zeros(&[n, 1, h, w]));
                let mut prev = go;
                for k in 0..cfg.horizon {
                    let inp = if k == 0 {
                        go
                    } else {
                        let src = feedback.get(k).copied().flatten().unwrap_or(prev);
                        g.affine(src, fb_scale, fb_shift)
                    };
                    let mut x = stem(g, dec_stem, inp)?;
                    for (layer, st) in decoder.iter().zip(state.iter_mut()) {
                        *st = layer.step(g, store, x, st.0, st.1)?;
                        x = st.0;
                    }
                    let (w0, b0) = deconv[0].nodes(g, store);
                    let y = g.conv_transpose2d(x, w0, b0, 2, 1, h / 2, w / 2)?;
                    let y = g.tanh(y);
                    let (w1, b1) = deconv[1].nodes(g, store);
                    let y = g.conv_transpose2d(y, w1, b1, 2, 1, h, w)?;
                    prev = self.head_output(g, y);
                    outputs.push(prev);
                }
            }
            Body::Flat { encoder, decoder, head } => {
                let zero = g.input(Tensor::zeros(&[n, cfg.hidden]));
                let mut state: Vec<(NodeId, NodeId)> = vec![(zero, zero); cfg.layers];
                for &f in frames {
                    let mut x = g.reshape(f, &[n, cfg.in_channels * h * w])?;
                    for (layer, st) in encoder.iter().zip(state.iter_mut()) {
                        *st = layer.step(g, store, x, st.0, st.1)?;
                        x = st.0;
                    }
                }
                let go = g.input(Tensor::zeros(&[n, 1, h, w]));
                let mut prev = go;
                for k in 0..cfg.horizon {
                    let inp = if k == 0 {
                        go
                    } else {
                        let src = feedback.get(k).copied().flatten().unwrap_or(prev);
                        g.affine(src, fb_scale, fb_shift)
                    };
                    let mut x = g.reshape(inp, &[n, h * w])?;
                    for (layer, st) in decoder.iter().zip(state.iter_mut()) {
                        *st = layer.step(g, store, x, st.0, st.1)?;
                        x = st.0;
                    }
                    let (hw, hb) = head.nodes(g, store);
                    let y = g.linear(x, hw, hb)?;
                    let y = self.head_output(g, y);
                    prev = g.reshape(y, &[n, 1, h, w])?;
                    outputs.push(prev);
                }
            }
        }
        Ok(outputs)
    }

    /// Free-running forecast for a batch: `T` frames of `N x C x H x W` in,
    /// `K` maps of `N x 1 x H x W` out.
    pub fn forecast(&self, frames: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = frames.iter().map(|f| g.input(f.clone())).collect();
        let out = self.forward_graph(&mut g, &ids, &[])?;
        Ok(out.into_iter().map(|o| g.value(o).clone()).collect())
    }
}

/// Single-sample forecast: `T` frames of `C x H x W` in, `K` maps of
/// `1 x H x W` out.
pub fn ae_forward<F: Scalar>(model: &AeModel<F>, frames: &[Tensor<F>]) -> Result<Vec<Tensor<F>>> {
    let batched = frames
        .iter()
        .map(|f| match f.shape() {
            &[c, h, w] => f.reshape(&[1, c, h, w]),
            s => Err(argument(format!("frame must be C x H x W, got {s:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    model
        .forecast(&batched)?
        .into_iter()
        .map(|m| {
            let (_, _, h, w) = m.dims4();
            m.reshape(&[1, h, w])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> AeConfig {
        AeConfig { stem_channels: [3, 4], hidden: 4, input_len: 3, horizon: 2, ..AeConfig::default() }
    }

    fn frames(t: usize, c: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = AeModel::<f32>::new(small_cfg(), 8, 12, &mut rng).unwrap();
        for (h, w) in [(8, 12), (4, 4), (16, 8)] {
            let out = ae_forward(&m, &frames(3, 14, h, w, 2)).unwrap();
            assert_eq!(out.len(), 2);
            for o in out {
                assert_eq!(o.shape(), &[1, h, w]);
                assert!(o.data().iter().all(|v| (0.05..=0.45).contains(v)));
            }
        }
    }

    #[test]
    fn zero_head_gives_midpoint() {
        for flatten_mode in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut m = AeModel::<f32>::new(AeConfig { flatten_mode, ..small_cfg() }, 4, 8, &mut rng).unwrap();
            m.zero_head();
            for o in ae_forward(&m, &frames(3, 14, 4, 8, 4)).unwrap() {
                assert!(o.data().iter().all(|v| (v - 0.25).abs() < 1e-7));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = AeModel::<f32>::new(small_cfg(), 8, 8, &mut rng).unwrap();
        assert!(ae_forward(&m, &frames(2, 14, 8, 8, 1)).is_err());
        assert!(ae_forward(&m, &frames(3, 14, 6, 8, 1)).is_err());
        assert!(ae_forward(&m, &frames(3, 13, 8, 8, 1)).is_err());
        assert!(AeModel::<f32>::new(small_cfg(), 6, 8, &mut rng).is_err());
        let flat = AeModel::<f32>::new(AeConfig { flatten_mode: true, ..small_cfg() }, 8, 8, &mut rng).unwrap();
        assert!(ae_forward(&flat, &frames(3, 14, 4, 8, 1)).is_err());
    }

    #[test]
    fn frame_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = AeModel::<f32>::new(small_cfg(), 8, 8, &mut rng).unwrap();
        let f = frames(3, 14, 8, 8, 7);
        let swapped = vec![f[1].clone(), f[0].clone(), f[2].clone()];
        let a = ae_forward(&m, &f).unwrap();
        let b = ae_forward(&m, &swapped).unwrap();
        let diff = a[0].data().iter().zip(b[0].data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn rebuild_from_params_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = AeModel::<f32>::new(small_cfg(), 8, 8, &mut rng).unwrap();
        let copy = AeModel::<f32>::with_params(small_cfg(), 8, 8, &m.store).unwrap();
        let f = frames(3, 14, 8, 8, 9);
        let (a, b) = (ae_forward(&m, &f).unwrap(), ae_forward(&copy, &f).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
