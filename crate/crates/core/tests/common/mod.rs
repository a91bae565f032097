//! Central-difference gradient checks on a tiny double-precision model.

use clasp_autodiff::{Graph, Tensor};
use clasp_core::composer::{loss_total, TrainMode};
use clasp_core::model::{ModelConfig, Predictor, ReconReduction};
use clasp_core::rng::stream_rng;
use clasp_core::svp::{pred_pass, Noise};
use rand::Rng;

pub const BATCH: usize = 2;

pub fn micro(mode: TrainMode) -> ModelConfig {
    let mut c = ModelConfig::new(8, mode);
    c.conv_channels = vec![3];
    c.enc_dim = 5;
    c.latent_dim = 2;
    c.hidden = 4;
    c.infer_hidden = vec![6];
    c.comp_hidden = vec![4];
    c.embed_hidden = vec![3];
    c.cond_frames = 2;
    c.seq_len = 7;
    c.comp_chunk = 2;
    c.beta_z = 0.3;
    c.beta_nu = 0.2;
    c.recon = ReconReduction::Sum;
    c
}

pub struct Fixture {
    pub p: Predictor<f64>,
    pub images: Tensor<f64>,
    pub actions: Vec<Vec<f64>>,
    pub noise: Noise<f64>,
}

pub fn fixture(mode: TrainMode) -> Fixture {
    let p = Predictor::<f64>::new(micro(mode), 11).unwrap();
    let mut rng = stream_rng(5, "fd-data", 0);
    let n = 3 * p.cfg.seq_len * BATCH * 64;
    let images = Tensor::new(&[3, p.cfg.seq_len * BATCH, 8, 8], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let actions = (0..BATCH).map(|_| (0..p.cfg.seq_len - 1).map(|_| rng.gen_range(0.0..40.0)).collect()).collect();
    let noise = Noise::sample(&p, BATCH, &mut stream_rng(5, "z", 0), &mut stream_rng(5, "nu", 0));
    Fixture { p, images, actions, noise }
}

pub fn objective(f: &Fixture, total: bool) -> (Graph<f64>, clasp_autodiff::Var) {
    let mut g = Graph::new();
    let acts = (f.p.cfg.mode == TrainMode::Supervised).then_some(f.actions.as_slice());
    let loss = if total {
        loss_total(&f.p, &mut g, &f.images, acts, BATCH, &f.noise).unwrap().total
    } else {
        pred_pass(&f.p, &mut g, &f.images, acts, BATCH, &f.noise).unwrap().loss
    };
    (g, loss)
}

/// Compares analytic and central-difference derivatives on a few entries of
/// every parameter tensor. Returns the number of entries compared and the
/// worst relative error with its location.
pub fn check(mode: TrainMode, total: bool) -> (usize, f64, String) {
    let mut f = fixture(mode);
    let (g, loss) = objective(&f, total);
    let grads = g.backward(loss).unwrap();
    let ids: Vec<_> = f.p.params.ids().collect();
    let mut rng = stream_rng(9, "fd-entries", 0);
    let mut checked = 0;
    let mut worst = (0.0f64, String::new());
    for id in ids {
        let len = f.p.params.value(id).len();
        let analytic_t = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(f.p.params.value(id).shape()));
        for _ in 0..3.min(len) {
            let i = rng.gen_range(0..len);
            let h = 1e-6;
            let orig = f.p.params.value(id).data()[i];
            f.p.params.value_mut(id).data_mut()[i] = orig + h;
            let up = {
                let (g, l) = objective(&f, total);
                g.value(l).item()
            };
            f.p.params.value_mut(id).data_mut()[i] = orig - h;
            let down = {
                let (g, l) = objective(&f, total);
                g.value(l).item()
            };
            f.p.params.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = analytic_t.data()[i];
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]: analytic {analytic:e} numeric {numeric:e}", f.p.params.name(id)));
            }
            checked += 1;
        }
    }
    (checked, worst.0, worst.1)
}

