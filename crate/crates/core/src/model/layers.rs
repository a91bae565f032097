//! Parameterised layers on top of the autodiff tape.

use clasp_autodiff::init::{leaky_gain, uniform_fan_in};
use clasp_autodiff::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::Result;

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), uniform_fan_in(&[fan_in, fan_out], fan_in, gain, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.linear(x, w, Some(b))?)
    }
}

/// Fully connected stack with leaky-ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub slope: f64,
}

impl Mlp {
    /// `sizes` lists every width, input first, output last.
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, sizes: &[usize], slope: f64, rng: &mut impl Rng) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 < n { leaky_gain(slope) } else { 1.0 };
                Dense::new(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers, slope }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.leaky_relu(x, F::from_f64_lossy(self.slope));
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_fan_in(&[cout, cin, k, k], cin * k * k, gain, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees about cin * (k / stride)^2 inputs
        let fan_in = cin * (k * k / (stride * stride)).max(1);
        let w = store.add(format!("{name}.w"), uniform_fan_in(&[cin, cout, k, k], fan_in, gain, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.conv_transpose2d(x, w, b, self.stride, self.pad)?)
    }
}

/// Single-layer LSTM cell; gate order in the packed weights is i, f, g, o.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input: Dense,
    pub recurrent: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let dense = Dense::new(store, &format!("{name}.x"), input, 4 * hidden, 1.0, rng);
        // forget gate starts open
        for v in &mut store.value_mut(dense.b).data_mut()[hidden..2 * hidden] {
            *v = F::one();
        }
        let recurrent = store.add(format!("{name}.h"), uniform_fan_in(&[hidden, 4 * hidden], hidden, 1.0, rng));
        Self { input: dense, recurrent, hidden }
    }

    pub fn zero_state<F: Float>(&self, g: &mut Graph<F>, batch: usize) -> (Var, Var) {
        (g.input(Tensor::zeros(&[batch, self.hidden])), g.input(Tensor::zeros(&[batch, self.hidden])))
    }

    pub fn step<F: Float>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var, (h, c): (Var, Var)) -> Result<(Var, Var)> {
        let gx = self.input.forward(g, store, x)?;
        let wh = g.param(store, self.recurrent);
        let gh = g.matmul(h, wh)?;
        let gates = g.add(gx, gh)?;
        let n = self.hidden;
        let i = g.slice_cols(gates, 0, n)?;
        let i = g.sigmoid(i);
        let f = g.slice_cols(gates, n, n)?;
        let f = g.sigmoid(f);
        let cand = g.slice_cols(gates, 2 * n, n)?;
        let cand = g.tanh(cand);
        let o = g.slice_cols(gates, 3 * n, n)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}
