//! Eager reverse-mode differentiation.
//!
//! Every op computes its value immediately and records what it needs for the
//! backward sweep. Parameter leaves are memoised per graph, so a weight used
//! at every timestep of an unrolled recurrence is one leaf whose gradient
//! accumulates across steps (backpropagation through time).

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{argument, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize, col: Vec<F> },
    ConvTranspose2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Affine { a: NodeId, scale: F },
    Concat(Vec<NodeId>),
    Slice { a: NodeId, start: usize },
    Reshape(NodeId),
    MaskedMse { pred: NodeId, target: Tensor<F>, mask: Tensor<F>, denom: F },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<NodeId>>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `src` (NCHW) into a `(c*k*k) x (n*ho*wo)` row-major matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    src: &[F],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<F> {
    let cols = n * ho * wo;
    let mut col = vec![F::zero(); c * k * k * cols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let plane = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters and accumulates `col` into `dst` (NCHW).
#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    col: &[F],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dst: &mut [F],
) {
    let cols = n * ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for ni in 0..n {
                    let plane = &mut dst[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// NCHW -> C x (N*H*W)
fn to_channel_major<F: Scalar>(src: &[F], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<F> {
    if n == 1 {
        return src.to_vec();
    }
    let hw = h * w;
    let mut out = vec![F::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]
                .copy_from_slice(&src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        }
    }
    out
}

/// C x (N*H*W) -> NCHW
fn from_channel_major<F: Scalar>(src: &[F], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<F> {
    if n == 1 {
        return src.to_vec();
    }
    let hw = h * w;
    let mut out = vec![F::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&src[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]);
        }
    }
    out
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf; receives no gradient outside the graph.
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// The leaf for parameter `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
        }
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        let node = self.push(store.get(id).clone(), Op::Param(id));
        self.param_nodes[id.0] = Some(node);
        node
    }

    /// Cross-correlation with zero padding `pad` and the given stride.
    /// `x: N x C x H x W`, `w: O x C x k x k`, `b: O`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape().len() != 4 || ws.shape().len() != 4 {
            return Err(argument(format!(
                "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
                xs.shape(),
                ws.shape()
            )));
        }
        let (n, c, h, wd) = xs.dims4();
        let (o, wc, kh, kw) = ws.dims4();
        if wc != c || kh != kw || bs.shape() != [o] || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(argument(format!(
                "conv2d shape mismatch: input {:?}, kernel {:?}, bias {:?}, stride {stride}",
                xs.shape(),
                ws.shape(),
                bs.shape()
            )));
        }
        let k = kh;
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let col = im2col(xs.data(), (n, c, h, wd), k, stride, pad, ho, wo);
        let cols = n * ho * wo;
        let ckk = c * k * k;
        let mut mat = vec![F::zero(); o * cols];
        F::gemm(
            o,
            ckk,
            cols,
            F::one(),
            ws.data(),
            ckk as isize,
            1,
            &col,
            cols as isize,
            1,
            F::zero(),
            &mut mat,
            cols as isize,
            1,
        );
        let bias = bs.data();
        for (oi, row) in mat.chunks_exact_mut(cols).enumerate() {
            for v in row {
                *v += bias[oi];
            }
        }
        let out = from_channel_major(&mat, (n, o, ho, wo));
        let value = Tensor::new(&[n, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad, col }))
    }

    /// Transposed convolution, the adjoint of [`Graph::conv2d`] with the same
    /// stride and padding. `x: N x Cin x H x W`, `w: Cin x Cout x k x k`,
    /// `b: Cout`; the output grid is `out_h x out_w`, which must map back to
    /// `H x W` under the forward convolution geometry.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape().len() != 4 || ws.shape().len() != 4 {
            return Err(argument("conv_transpose2d expects rank-4 input and kernel"));
        }
        let (n, cin, h, wd) = xs.dims4();
        let (wc, cout, kh, kw) = ws.dims4();
        let k = kh;
        if wc != cin
            || kh != kw
            || bs.shape() != [cout]
            || stride == 0
            || out_h + 2 * pad < k
            || out_w + 2 * pad < k
            || conv_out(out_h, k, stride, pad) != h
            || conv_out(out_w, k, stride, pad) != wd
        {
            return Err(argument(format!(
                "conv_transpose2d shape mismatch: input {:?}, kernel {:?}, output {out_h}x{out_w}, stride {stride}",
                xs.shape(),
                ws.shape()
            )));
        }
        let cols = n * h * wd;
        let ckk = cout * k * k;
        let xm = to_channel_major(xs.data(), (n, cin, h, wd));
        // col = W^T x, W viewed as Cin x (Cout*k*k)
        let mut col = vec![F::zero(); ckk * cols];
        F::gemm(
            ckk,
            cin,
            cols,
            F::one(),
            ws.data(),
            1,
            ckk as isize,
            &xm,
            cols as isize,
            1,
            F::zero(),
            &mut col,
            cols as isize,
            1,
        );
        let mut out = vec![F::zero(); n * cout * out_h * out_w];
        col2im(&col, (n, cout, out_h, out_w), k, stride, pad, h, wd, &mut out);
        let bias = bs.data();
        let plane = out_h * out_w;
        for ni in 0..n {
            for co in 0..cout {
                for v in &mut out[(ni * cout + co) * plane..(ni * cout + co + 1) * plane] {
                    *v += bias[co];
                }
            }
        }
        let value = Tensor::new(&[n, cout, out_h, out_w], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }))
    }

    /// `y = x W^T + b` with `x: N x I`, `w: O x I`, `b: O`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape().len() != 2 || ws.shape().len() != 2 {
            return Err(argument("linear expects rank-2 input and weight"));
        }
        let (n, i) = xs.dims2();
        let (o, wi) = ws.dims2();
        if wi != i || bs.shape() != [o] {
            return Err(argument(format!(
                "linear shape mismatch: input {:?}, weight {:?}, bias {:?}",
                xs.shape(),
                ws.shape(),
                bs.shape()
            )));
        }
        let mut out = vec![F::zero(); n * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(bs.data());
        }
        F::gemm(
            n,
            i,
            o,
            F::one(),
            xs.data(),
            i as isize,
            1,
            ws.data(),
            1,
            i as isize,
            F::one(),
            &mut out,
            o as isize,
            1,
        );
        let value = Tensor::new(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(argument(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let bv = self.value(b).data();
        let mut v = self.value(a).clone();
        for (x, &y) in v.data_mut().iter_mut().zip(bv) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: F, shift: F) -> NodeId {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine { a, scale })
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*parts.first().ok_or_else(|| argument("concat of nothing"))?).shape().to_vec();
        if first.len() < 2 {
            return Err(argument("concat needs rank >= 2"));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(argument(format!("concat shape mismatch {:?} vs {:?}", s, first)));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(n * total * inner);
        for ni in 0..n {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[ni * block..(ni + 1) * block]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start+len` along axis 1.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(argument(format!("slice {start}+{len} out of range for {:?}", s)));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * len * inner);
        for ni in 0..s[0] {
            let base = (ni * s[1] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Slice { a, start }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `sum(mask * (pred - target)^2) / sum(mask)` as a one-element tensor.
    pub fn masked_mse(&mut self, pred: NodeId, target: Tensor<F>, mask: Tensor<F>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return Err(argument(format!(
                "masked_mse shapes differ: pred {:?}, target {:?}, mask {:?}",
                p.shape(),
                target.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&m| m != F::zero() && m != F::one()) {
            return Err(argument("mask must be 0/1"));
        }
        let denom: F = mask.data().iter().copied().sum();
        if denom == F::zero() {
            return Err(argument("mask selects no elements"));
        }
        let mut acc = F::zero();
        for ((&pv, &tv), &m) in p.data().iter().zip(target.data()).zip(mask.data()) {
            if m != F::zero() {
                let e = pv - tv;
                acc += e * e;
            }
        }
        let value = Tensor::scalar(acc / denom);
        Ok(self.push(value, Op::MaskedMse { pred, target, mask, denom }))
    }

    /// Reverse sweep from the one-element node `loss`, seeded with
    /// `d loss = seed`. Returns one gradient tensor per parameter in `store`
    /// order; parameters not reached by the loss get zeros.
    pub fn backward_scaled(&self, loss: NodeId, seed: F, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), seed));
        let mut out = store.zeros_like();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out[pid.0].add_assign(&dy),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da = Tensor::from_fn(dy.shape(), |j| dy.data()[j] * bv[j]);
                    let db = Tensor::from_fn(dy.shape(), |j| dy.data()[j] * av[j]);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let d = Tensor::from_fn(dy.shape(), |j| dy.data()[j] * y[j] * (F::one() - y[j]));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let d = Tensor::from_fn(dy.shape(), |j| dy.data()[j] * (F::one() - y[j] * y[j]));
                    accumulate(&mut grads, *a, d);
                }
                Op::Affine { a, scale } => {
                    let s = *scale;
                    accumulate(&mut grads, *a, dy.map(|v| v * s));
                }
                Op::Reshape(a) => {
                    let d = dy.reshape(self.value(*a).shape()).expect("same element count");
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let n = dy.shape()[0];
                    let total = dy.shape()[1];
                    let inner: usize = dy.shape()[2..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.value(p).shape();
                        let c = ps[1];
                        let mut d = Vec::with_capacity(n * c * inner);
                        for ni in 0..n {
                            let base = (ni * total + offset) * inner;
                            d.extend_from_slice(&dy.data()[base..base + c * inner]);
                        }
                        accumulate(&mut grads, p, Tensor::new(ps, d).expect("part shape"));
                        offset += c;
                    }
                }
                Op::Slice { a, start } => {
                    let s = self.value(*a).shape();
                    let len = dy.shape()[1];
                    let inner: usize = s[2..].iter().product();
                    let mut d = Tensor::zeros(s);
                    for ni in 0..s[0] {
                        let base = (ni * s[1] + start) * inner;
                        d.data_mut()[base..base + len * inner]
                            .copy_from_slice(&dy.data()[ni * len * inner..(ni + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MaskedMse { pred, target, mask, denom } => {
                    let g = dy.data()[0] * F::lit(2.0) / *denom;
                    let p = self.value(*pred).data();
                    let d = Tensor::from_fn(target.shape(), |j| mask.data()[j] * g * (p[j] - target.data()[j]));
                    accumulate(&mut grads, *pred, d);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, inp) = xv.dims2();
                    let o = wv.shape()[0];
                    let mut dx = vec![F::zero(); n * inp];
                    F::gemm(
                        n,
                        o,
                        inp,
                        F::one(),
                        dy.data(),
                        o as isize,
                        1,
                        wv.data(),
                        inp as isize,
                        1,
                        F::zero(),
                        &mut dx,
                        inp as isize,
                        1,
                    );
                    let mut dw = vec![F::zero(); o * inp];
                    F::gemm(
                        o,
                        n,
                        inp,
                        F::one(),
                        dy.data(),
                        1,
                        o as isize,
                        xv.data(),
                        inp as isize,
                        1,
                        F::zero(),
                        &mut dw,
                        inp as isize,
                        1,
                    );
                    let mut db = vec![F::zero(); o];
                    for row in dy.data().chunks_exact(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(&[n, inp], dx).expect("shape"));
                    accumulate(&mut grads, *w, Tensor::new(&[o, inp], dw).expect("shape"));
                    accumulate(&mut grads, *b, Tensor::new(&[o], db).expect("shape"));
                }
                Op::Conv2d { x, w, b, stride, pad, col } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let xd = xv.dims4();
                    let (o, c, k, _) = wv.dims4();
                    let (n, _, ho, wo) = dy.dims4();
                    let cols = n * ho * wo;
                    let ckk = c * k * k;
                    let dmat = to_channel_major(dy.data(), (n, o, ho, wo));
                    let db: Vec<F> = dmat.chunks_exact(cols).map(|r| r.iter().copied().sum()).collect();
                    let mut dw = vec![F::zero(); o * ckk];
                    F::gemm(
                        o,
                        cols,
                        ckk,
                        F::one(),
                        &dmat,
                        cols as isize,
                        1,
                        col,
                        1,
                        cols as isize,
                        F::zero(),
                        &mut dw,
                        ckk as isize,
                        1,
                    );
                    let mut dcol = vec![F::zero(); ckk * cols];
                    F::gemm(
                        ckk,
                        o,
                        cols,
                        F::one(),
                        wv.data(),
                        1,
                        ckk as isize,
                        &dmat,
                        cols as isize,
                        1,
                        F::zero(),
                        &mut dcol,
                        cols as isize,
                        1,
                    );
                    let mut dx = vec![F::zero(); xv.len()];
                    col2im(&dcol, xd, k, *stride, *pad, ho, wo, &mut dx);
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
                    accumulate(&mut grads, *w, Tensor::new(wv.shape(), dw).expect("shape"));
                    accumulate(&mut grads, *b, Tensor::new(&[o], db).expect("shape"));
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, cin, h, wd) = xv.dims4();
                    let (_, cout, k, _) = wv.dims4();
                    let (_, _, oh, ow) = dy.dims4();
                    let cols = n * h * wd;
                    let ckk = cout * k * k;
                    let col = im2col(dy.data(), (n, cout, oh, ow), k, *stride, *pad, h, wd);
                    let mut dxm = vec![F::zero(); cin * cols];
                    F::gemm(
                        cin,
                        ckk,
                        cols,
                        F::one(),
                        wv.data(),
                        ckk as isize,
                        1,
                        &col,
                        cols as isize,
                        1,
                        F::zero(),
                        &mut dxm,
                        cols as isize,
                        1,
                    );
                    let xm = to_channel_major(xv.data(), (n, cin, h, wd));
                    let mut dw = vec![F::zero(); cin * ckk];
                    F::gemm(
                        cin,
                        cols,
                        ckk,
                        F::one(),
                        &xm,
                        cols as isize,
                        1,
                        &col,
                        1,
                        cols as isize,
                        F::zero(),
                        &mut dw,
                        ckk as isize,
                        1,
                    );
                    let plane = oh * ow;
                    let mut db = vec![F::zero(); cout];
                    for ni in 0..n {
                        for (co, acc) in db.iter_mut().enumerate() {
                            *acc += dy.data()[(ni * cout + co) * plane..(ni * cout + co + 1) * plane]
                                .iter()
                                .copied()
                                .sum::<F>();
                        }
                    }
                    let dx = from_channel_major(&dxm, (n, cin, h, wd));
                    accumulate(&mut grads, *x, Tensor::new(xv.shape(), dx).expect("shape"));
                    accumulate(&mut grads, *w, Tensor::new(wv.shape(), dw).expect("shape"));
                    accumulate(&mut grads, *b, Tensor::new(&[cout], db).expect("shape"));
                }
            }
        }
        out
    }

    pub fn backward(&self, loss: NodeId, store: &ParamStore<F>) -> Vec<Tensor<F>> {
        self.backward_scaled(loss, F::one(), store)
    }
}
