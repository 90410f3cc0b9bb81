//! ConvLSTM and LSTM cells.
//!
//! Both cells store their four gates stacked along the output axis in the
//! order input, forget, cell candidate, output, and read the concatenation
//! `[x, h]` along the input axis. So for the convolutional cell
//! `weight[g*H..(g+1)*H, ..Cin]` is the input kernel `W_x<g>` and
//! `weight[g*H..(g+1)*H, Cin..]` the recurrent kernel `W_h<g>` of gate `g`.
//! No peephole connections.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{he_uniform, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{argument, Result};
use crate::scalar::Scalar;

/// Gate order inside the stacked weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCellParams<F> {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    /// `4H x (Cin + H) x k x k`
    pub weight: Tensor<F>,
    /// `4H`
    pub bias: Tensor<F>,
}

impl<F: Scalar> ConvLstmCellParams<F> {
    pub fn zeros(in_channels: usize, hidden_channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(argument(format!("ConvLSTM kernel must be odd, got {kernel}")));
        }
        Ok(ConvLstmCellParams {
            in_channels,
            hidden_channels,
            kernel,
            weight: Tensor::zeros(&[4 * hidden_channels, in_channels + hidden_channels, kernel, kernel]),
            bias: Tensor::zeros(&[4 * hidden_channels]),
        })
    }

    /// He-uniform weights, forget bias +1, other biases 0.
    pub fn init(in_channels: usize, hidden_channels: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(in_channels, hidden_channels, kernel)?;
        let fan_in = (in_channels + hidden_channels) * kernel * kernel;
        p.weight = he_uniform(p.weight.shape(), fan_in, rng);
        p.set_gate_bias(Gate::Forget, F::lit(FORGET_BIAS));
        Ok(p)
    }

    pub fn set_gate_bias(&mut self, gate: Gate, v: F) {
        let h = self.hidden_channels;
        let g = gate as usize;
        self.bias.data_mut()[g * h..(g + 1) * h].fill(v);
    }

    /// Kernel slice for `gate` applied to the input (`from_hidden = false`)
    /// or to the previous hidden state, shaped `H x C x k x k`.
    pub fn gate_kernel(&self, gate: Gate, from_hidden: bool) -> Tensor<F> {
        let (h, cin, k) = (self.hidden_channels, self.in_channels, self.kernel);
        let c_all = cin + h;
        let (c0, cn) = if from_hidden { (cin, h) } else { (0, cin) };
        let kk = k * k;
        let g = gate as usize;
        let mut out = Vec::with_capacity(h * cn * kk);
        for o in g * h..(g + 1) * h {
            let row = &self.weight.data()[o * c_all * kk..(o + 1) * c_all * kk];
            out.extend_from_slice(&row[c0 * kk..(c0 + cn) * kk]);
        }
        Tensor::new(&[h, cn, k, k], out).expect("gate kernel shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams<F> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `4H x (F + H)`
    pub weight: Tensor<F>,
    /// `4H`
    pub bias: Tensor<F>,
}

impl<F: Scalar> LstmCellParams<F> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmCellParams {
            input_dim,
            hidden_dim,
            weight: Tensor::zeros(&[4 * hidden_dim, input_dim + hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        p.weight = he_uniform(p.weight.shape(), input_dim + hidden_dim, rng);
        p.set_gate_bias(Gate::Forget, F::lit(FORGET_BIAS));
        p
    }

    pub fn set_gate_bias(&mut self, gate: Gate, v: F) {
        let h = self.hidden_dim;
        let g = gate as usize;
        self.bias.data_mut()[g * h..(g + 1) * h].fill(v);
    }

    /// Dense cell acting like `conv` on a 1x1 grid: with same padding only
    /// the centre tap of each kernel ever touches data.
    pub fn from_conv_center(conv: &ConvLstmCellParams<F>) -> Self {
        let k = conv.kernel;
        let kk = k * k;
        let centre = (k / 2) * k + k / 2;
        let rows = 4 * conv.hidden_channels;
        let cols = conv.in_channels + conv.hidden_channels;
        let weight = Tensor::from_fn(&[rows, cols], |i| conv.weight.data()[i * kk + centre]);
        LstmCellParams {
            input_dim: conv.in_channels,
            hidden_dim: conv.hidden_channels,
            weight,
            bias: conv.bias.clone(),
        }
    }
}

fn gate_update<F: Scalar>(g: &mut Graph<F>, z: NodeId, hidden: usize, c_prev: NodeId) -> Result<(NodeId, NodeId)> {
    let zi = g.slice(z, 0, hidden)?;
    let zf = g.slice(z, hidden, hidden)?;
    let zg = g.slice(z, 2 * hidden, hidden)?;
    let zo = g.slice(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// One ConvLSTM step on graph nodes. `x: N x Cin x H x W`, `h, c: N x Hid x H x W`.
#[allow(clippy::too_many_arguments)]
pub fn convlstm_cell<F: Scalar>(
    g: &mut Graph<F>,
    weight: NodeId,
    bias: NodeId,
    hidden: usize,
    kernel: usize,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let xh = g.concat(&[x, h])?;
    let z = g.conv2d(xh, weight, bias, 1, kernel / 2)?;
    gate_update(g, z, hidden, c)
}

/// One dense LSTM step on graph nodes. `x: N x F`, `h, c: N x H`.
pub fn lstm_cell<F: Scalar>(
    g: &mut Graph<F>,
    weight: NodeId,
    bias: NodeId,
    hidden: usize,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let xh = g.concat(&[x, h])?;
    let z = g.linear(xh, weight, bias)?;
    gate_update(g, z, hidden, c)
}

/// Standalone ConvLSTM step: returns `(h_t, c_t)`.
pub fn convlstm_step<F: Scalar>(
    p: &ConvLstmCellParams<F>,
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    c_prev: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut g = Graph::new();
    let (w, b) = (g.input(p.weight.clone()), g.input(p.bias.clone()));
    let (xi, hi, ci) = (g.input(x.clone()), g.input(h_prev.clone()), g.input(c_prev.clone()));
    let (h, c) = convlstm_cell(&mut g, w, b, p.hidden_channels, p.kernel, xi, hi, ci)?;
    Ok((g.value(h).clone(), g.value(c).clone()))
}

/// Standalone dense LSTM step: returns `(h_t, c_t)`.
pub fn lstm_step<F: Scalar>(
    p: &LstmCellParams<F>,
    x: &Tensor<F>,
    h_prev: &Tensor<F>,
    c_prev: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut g = Graph::new();
    let (w, b) = (g.input(p.weight.clone()), g.input(p.bias.clone()));
    let (xi, hi, ci) = (g.input(x.clone()), g.input(h_prev.clone()), g.input(c_prev.clone()));
    let (h, c) = lstm_cell(&mut g, w, b, p.hidden_dim, xi, hi, ci)?;
    Ok((g.value(h).clone(), g.value(c).clone()))
}

/// A ConvLSTM cell whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
    pub kernel: usize,
}

impl ConvLstmLayer {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, p: ConvLstmCellParams<F>) -> Self {
        ConvLstmLayer {
            hidden: p.hidden_channels,
            kernel: p.kernel,
            weight: store.add(format!("{prefix}.weight"), p.weight),
            bias: store.add(format!("{prefix}.bias"), p.bias),
        }
    }

    pub fn step<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        convlstm_cell(g, w, b, self.hidden, self.kernel, x, h, c)
    }
}

/// A dense LSTM cell whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct LstmLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, p: LstmCellParams<F>) -> Self {
        LstmLayer {
            hidden: p.hidden_dim,
            weight: store.add(format!("{prefix}.weight"), p.weight),
            bias: store.add(format!("{prefix}.bias"), p.bias),
        }
    }

    pub fn step<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        lstm_cell(g, w, b, self.hidden, x, h, c)
    }
}
