//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::collections::HashMap;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, F, F),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    GatherN(Var, Vec<usize>),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Tensor<F> },
    ConvT2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    SqErr { a: Var, b: Var, scale: F },
    KlStdNormal { mu: Var, logsig: Var, scale: F },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<F> {
    params: HashMap<ParamId, Tensor<F>>,
    retained: HashMap<Var, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<F>> {
        self.retained.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params.values().flat_map(|t| t.data().iter()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    bound: HashMap<ParamId, Var>,
    no_grad: bool,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), no_grad: false }
    }

    /// A graph that records no backward information (inference only).
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad: grad && !self.no_grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf that participates in differentiation without being a parameter
    /// (its gradient can be read back with [`Graph::backward_retain`]).
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Binds a parameter from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    /// Binds a parameter as a constant: it receives no gradient.
    pub fn frozen(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.input(store.value(id).clone())
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err(format!("linear: x {xs:?} w {ws:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![F::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != n {
                return Err(shape_err(format!("linear bias len {} != {n}", bv.len())));
            }
            for r in 0..m {
                out[r * n..(r + 1) * n].copy_from_slice(bv);
            }
        }
        F::gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let grad = self.g(x) || self.g(w) || b.is_some_and(|b| self.g(b));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Linear { x, w, b }, grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None).map(|v| {
            if let Op::Linear { x, w, .. } = self.nodes[v.0].op {
                self.nodes[v.0].op = Op::MatMul(x, w);
            }
            v
        })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let grad = self.g(a) || self.g(b);
        self.push(t, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(a).map(f);
        let grad = self.g(a);
        self.push(t, op, grad)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > F::zero() { x } else { x * slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| F::one() / (F::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err(format!("concat_cols: part {s:?}, rows {rows}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(parts.to_vec()), grad))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] {
            return Err(shape_err(format!("slice_cols {start}+{len} of {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let grad = self.g(a);
        Ok(self.push(Tensor::new(&[rows, len], out)?, Op::SliceCols(a, start), grad))
    }

    /// Concatenates along the leading dimension (rows of a matrix, or
    /// channels of a `[C, N, H, W]` activation).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err(format!("concat_rows: {s:?} vs tail {tail:?}")));
            }
            lead += s[0];
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let grad = parts.iter().any(|&p| self.g(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatRows(parts.to_vec()), grad))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if start + len > s[0] {
            return Err(shape_err(format!("slice_rows {start}+{len} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let grad = self.g(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceRows(a, start), grad))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err(format!("transpose of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let grad = self.g(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), grad))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let grad = self.g(a);
        Ok(self.push(t, Op::Reshape(a), grad))
    }

    /// Selects entries of the second axis of `[C, N, ...]`.
    pub fn gather_n(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err(format!("gather_n {idx:?} of {s:?}")));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * idx.len() * inner);
        for c in 0..s[0] {
            for &i in idx {
                let off = (c * s[1] + i) * inner;
                out.extend_from_slice(&src[off..off + inner]);
            }
        }
        let mut shape = s;
        shape[1] = idx.len();
        let grad = self.g(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::GatherN(a, idx.to_vec()), grad))
    }

    /// 2-D convolution. `x: [C, N, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err(format!("conv2d: x {xs:?} w {ws:?}")));
        }
        let geom = ConvGeom { channels: xs[0], batch: xs[1], h: xs[2], w: xs[3], k: ws[2], stride, pad };
        if xs[2] + 2 * pad < ws[2] {
            return Err(shape_err(format!("conv2d: kernel {} larger than padded input {xs:?}", ws[2])));
        }
        let (o, ho, wo) = (ws[0], geom.out_h(), geom.out_w());
        let (kr, nc) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![F::zero(); kr * nc];
        im2col(self.value(x).data(), &geom, &mut cols);
        let mut out = vec![F::zero(); o * nc];
        let bias = self.value(b).data();
        for (oc, chunk) in out.chunks_mut(nc).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[oc]);
        }
        F::gemm(o, kr, nc, self.value(w).data(), false, &cols, false, &mut out, true);
        let grad = self.g(x) || self.g(w) || self.g(b);
        let cols = if grad { Tensor::new(&[kr, nc], cols)? } else { Tensor::default() };
        Ok(self.push(Tensor::new(&[o, xs[1], ho, wo], out)?, Op::Conv2d { x, w, b, geom, cols }, grad))
    }

    /// Transposed 2-D convolution. `x: [Ci, N, h, w]`, `w: [Ci, Co, k, k]`, `b: [Co]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] {
            return Err(shape_err(format!("conv_transpose2d: x {xs:?} w {ws:?}")));
        }
        let (ci, n, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let big_h = ConvGeom::upsampled(h, k, stride, pad);
        let big_w = ConvGeom::upsampled(wd, k, stride, pad);
        let geom = ConvGeom { channels: co, batch: n, h: big_h, w: big_w, k, stride, pad };
        let (kr, nc) = (co * k * k, n * h * wd);
        let mut cols = vec![F::zero(); kr * nc];
        F::gemm(kr, ci, nc, self.value(w).data(), true, self.value(x).data(), false, &mut cols, false);
        let plane = big_h * big_w;
        let mut out = vec![F::zero(); co * n * plane];
        let bias = self.value(b).data();
        for (oc, chunk) in out.chunks_mut(n * plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[oc]);
        }
        col2im(&cols, &geom, &mut out);
        let grad = self.g(x) || self.g(w) || self.g(b);
        Ok(self.push(Tensor::new(&[co, n, big_h, big_w], out)?, Op::ConvT2d { x, w, b, geom }, grad))
    }

    /// `scale * sum((a - b)^2)` as a scalar.
    pub fn sq_err(&mut self, a: Var, b: Var, scale: F) -> Result<Var> {
        self.same_shape(a, b, "sq_err")?;
        let s: F = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let grad = self.g(a) || self.g(b);
        Ok(self.push(Tensor::scalar(s * scale), Op::SqErr { a, b, scale }, grad))
    }

    /// `scale * KL(N(mu, exp(logsig)^2) || N(0, I))`, summed over all entries.
    pub fn kl_std_normal(&mut self, mu: Var, logsig: Var, scale: F) -> Result<Var> {
        self.same_shape(mu, logsig, "kl_std_normal")?;
        let half = F::from_f64_lossy(0.5);
        let two = F::from_f64_lossy(2.0);
        let s: F = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(logsig).data())
            .map(|(&m, &ls)| half * (m * m + (two * ls).exp() - F::one() - two * ls))
            .sum();
        let grad = self.g(mu) || self.g(logsig);
        Ok(self.push(Tensor::scalar(s * scale), Op::KlStdNormal { mu, logsig, scale }, grad))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let grad = self.g(a);
        self.push(Tensor::scalar(s), Op::Sum(a), grad)
    }

    /// Sum of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.backward_retain(loss, &[])
    }

    /// Backpropagates from a scalar `loss`, also returning the gradients of
    /// the nodes in `retain`.
    pub fn backward_retain(&self, loss: Var, retain: &[Var]) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        if self.no_grad {
            return Err(Error::NoGrad);
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            if retain.contains(&Var(i)) {
                out.retained.insert(Var(i), g.clone());
            }
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.g(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce() -> Tensor<F>) {
        if self.g(v) {
            self.acc(grads, v, f());
        }
    }

    fn linear_back(&self, g: &Tensor<F>, x: Var, w: Var, b: Option<Var>, grads: &mut [Option<Tensor<F>>]) {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        self.acc_with(grads, x, || {
            let mut dx = vec![F::zero(); m * k];
            F::gemm(m, n, k, g.data(), false, wv.data(), true, &mut dx, false);
            Tensor::new(&[m, k], dx).expect("shape")
        });
        self.acc_with(grads, w, || {
            let mut dw = vec![F::zero(); k * n];
            F::gemm(k, m, n, xv.data(), true, g.data(), false, &mut dw, false);
            Tensor::new(&[k, n], dw).expect("shape")
        });
        if let Some(b) = b {
            self.acc_with(grads, b, || {
                let mut db = vec![F::zero(); n];
                for r in 0..m {
                    for (d, &v) in db.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                Tensor::new(&[n], db).expect("shape")
            });
        }
    }

    fn propagate(
        &self,
        node: &Node<F>,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        out: &mut Gradients<F>,
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                out.params.insert(*id, g);
            }
            Op::Linear { x, w, b } => self.linear_back(&g, *x, *w, *b, grads),
            Op::MatMul(x, w) => self.linear_back(&g, *x, *w, None, grads),
            Op::Add(a, b) => {
                self.acc_with(grads, *b, || g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *b, || g.map(|x| -x));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || zip_map(&g, val(*b), |gg, y| gg * y));
                self.acc_with(grads, *b, || zip_map(&g, val(*a), |gg, x| gg * x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|x| x * c));
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let t = zip_map(&g, val(*a), |gg, x| if x > F::zero() { gg } else { gg * s });
                self.acc(grads, *a, t);
            }
            Op::Sigmoid(a) => {
                let t = zip_map(&g, &node.value, |gg, y| gg * y * (F::one() - y));
                self.acc(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = zip_map(&g, &node.value, |gg, y| gg * (F::one() - y * y));
                self.acc(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = zip_map(&g, &node.value, |gg, y| gg * y);
                self.acc(grads, *a, t);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let t = zip_map(&g, val(*a), |gg, x| if x < lo || x > hi { F::zero() } else { gg });
                self.acc(grads, *a, t);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    self.acc_with(grads, p, || {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        Tensor::new(&[rows, w], d).expect("shape")
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let s = val(*a).shape();
                let (rows, cols) = (s[0], s[1]);
                let len = node.value.shape()[1];
                let mut d = Tensor::zeros(s);
                for r in 0..rows {
                    d.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    self.acc_with(grads, p, || {
                        Tensor::new(val(p).shape(), g.data()[off..off + n].to_vec()).expect("shape")
                    });
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let inner: usize = val(*a).shape()[1..].iter().product();
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut d = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.acc(grads, *a, Tensor::new(&[c, r], d)?);
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.acc(grads, *a, g.reshape(&shape)?);
            }
            Op::GatherN(a, idx) => {
                let s = val(*a).shape();
                let inner: usize = s[2..].iter().product();
                let mut d = Tensor::zeros(s);
                let k = idx.len();
                for c in 0..s[0] {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g.data()[(c * k + j) * inner..(c * k + j + 1) * inner];
                        let dst = &mut d.data_mut()[(c * s[1] + i) * inner..(c * s[1] + i + 1) * inner];
                        for (dd, &ss) in dst.iter_mut().zip(src) {
                            *dd += ss;
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = val(*w).shape()[0];
                let (kr, nc) = (geom.col_rows(), geom.col_cols());
                self.acc_with(grads, *b, || channel_sums(&g, o));
                self.acc_with(grads, *w, || {
                    let mut dw = vec![F::zero(); o * kr];
                    F::gemm(o, nc, kr, g.data(), false, cols.data(), true, &mut dw, false);
                    Tensor::new(val(*w).shape(), dw).expect("shape")
                });
                self.acc_with(grads, *x, || {
                    let mut dcols = vec![F::zero(); kr * nc];
                    F::gemm(kr, o, nc, val(*w).data(), true, g.data(), false, &mut dcols, false);
                    let mut dx = Tensor::zeros(val(*x).shape());
                    col2im(&dcols, geom, dx.data_mut());
                    dx
                });
            }
            Op::ConvT2d { x, w, b, geom } => {
                let (ci, co) = (val(*w).shape()[0], geom.channels);
                let (kr, nc) = (geom.col_rows(), geom.col_cols());
                self.acc_with(grads, *b, || channel_sums(&g, co));
                let mut dcols = vec![F::zero(); kr * nc];
                im2col(g.data(), geom, &mut dcols);
                self.acc_with(grads, *w, || {
                    let mut dw = vec![F::zero(); ci * kr];
                    F::gemm(ci, nc, kr, val(*x).data(), false, &dcols, true, &mut dw, false);
                    Tensor::new(val(*w).shape(), dw).expect("shape")
                });
                self.acc_with(grads, *x, || {
                    let mut dx = vec![F::zero(); ci * nc];
                    F::gemm(ci, kr, nc, val(*w).data(), false, &dcols, false, &mut dx, false);
                    Tensor::new(val(*x).shape(), dx).expect("shape")
                });
            }
            Op::SqErr { a, b, scale } => {
                let c = g.item() * *scale * F::from_f64_lossy(2.0);
                let diff = zip_map(val(*a), val(*b), |x, y| (x - y) * c);
                self.acc_with(grads, *b, || diff.map(|x| -x));
                self.acc(grads, *a, diff);
            }
            Op::KlStdNormal { mu, logsig, scale } => {
                let c = g.item() * *scale;
                let two = F::from_f64_lossy(2.0);
                self.acc_with(grads, *mu, || val(*mu).map(|m| m * c));
                self.acc_with(grads, *logsig, || val(*logsig).map(|ls| ((two * ls).exp() - F::one()) * c));
            }
            Op::Sum(a) => {
                let c = g.item();
                self.acc(grads, *a, Tensor::full(val(*a).shape(), c));
            }
        }
        Ok(())
    }
}

fn zip_map<F: Float>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Per-channel sums of a `[C, ...]` tensor.
fn channel_sums<F: Float>(g: &Tensor<F>, c: usize) -> Tensor<F> {
    let inner = g.len() / c;
    Tensor::from_fn(&[c], |i| g.data()[i * inner..(i + 1) * inner].iter().copied().sum())
}
