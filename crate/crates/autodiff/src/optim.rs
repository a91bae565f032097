use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

/// Adam with bias correction. Parameters that received no gradient in a step
/// are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) m: Vec<Option<Tensor<F>>>,
    pub(crate) v: Vec<Option<Tensor<F>>>,
    pub(crate) steps: Vec<u64>,
}

impl<F: Float> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: Vec::new(), v: Vec::new(), steps: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>) {
        let n = params.len();
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
            self.steps.resize(n, 0);
        }
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let eps = F::from_f64_lossy(self.eps);
        for (id, g) in grads.params() {
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let step = F::from_f64_lossy(self.lr / bc1);
            let bc2_sqrt = F::from_f64_lossy(bc2.sqrt());
            let p = params.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// Moment tensors and per-parameter step counts, for checkpointing.
    pub fn state(&self) -> (&[Option<Tensor<F>>], &[Option<Tensor<F>>], &[u64]) {
        (&self.m, &self.v, &self.steps)
    }

    pub fn restore(&mut self, m: Vec<Option<Tensor<F>>>, v: Vec<Option<Tensor<F>>>, steps: Vec<u64>) {
        self.m = m;
        self.v = v;
        self.steps = steps;
    }
}
