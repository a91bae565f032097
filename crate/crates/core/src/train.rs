//! Training loop with line-delimited JSON metrics and atomic checkpoints.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clasp_autodiff::{Adam, Graph};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_predictor, PredictorMeta};
use crate::composer::{loss_total, TrainMode};
use crate::dataio::{Batch, BatchIterator, VideoSequence};
use crate::model::Predictor;
use crate::rng::stream_rng;
use crate::svp::Noise;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: u64,
    pub ckpt_every: u64,
    /// The KL weights ramp linearly from zero over this many steps (0: off).
    #[serde(default)]
    pub kl_warmup: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 6_000, batch_size: 16, lr: 2e-4, seed: 0, log_every: 50, ckpt_every: 1000, kl_warmup: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl_z: Option<f64>,
    pub recon_comp: Option<f64>,
    pub kl_nu: Option<f64>,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Where a run keeps its checkpoint and metrics log.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub dataset: Option<String>,
}

pub struct Trainer {
    pub predictor: Predictor<f32>,
    pub adam: Adam<f32>,
    /// Number of optimisation steps already taken.
    pub step: u64,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(predictor: Predictor<f32>, cfg: TrainConfig) -> Self {
        let adam = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
        Self { predictor, adam, step: 0, cfg }
    }

    /// Continues from a saved optimiser state.
    pub fn resume(predictor: Predictor<f32>, adam: Adam<f32>, step: u64, cfg: TrainConfig) -> Self {
        Self { predictor, adam, step, cfg }
    }

    /// Multiplier on both KL weights at the current step.
    pub fn kl_scale(&self) -> f64 {
        match self.cfg.kl_warmup {
            0 => 1.0,
            w => ((self.step + 1) as f64 / w as f64).min(1.0),
        }
    }

    /// One optimisation step on `batch`, using the noise streams of `self.step`.
    pub fn step_on(&mut self, batch: &Batch) -> Result<MetricRecord> {
        let t0 = Instant::now();
        let p = &self.predictor;
        let mut z_rng = stream_rng(self.cfg.seed, "z-noise", self.step);
        let mut nu_rng = stream_rng(self.cfg.seed, "nu-noise", self.step);
        let noise = Noise::sample(p, batch.batch, &mut z_rng, &mut nu_rng);
        if p.cfg.mode == TrainMode::Supervised && batch.actions.is_none() {
            return Err(Error::Config("supervised training needs labeled sequences".into()));
        }
        // warm-up scales the KL weights for this step only
        let base = (self.predictor.cfg.beta_z, self.predictor.cfg.beta_nu);
        let scale = self.kl_scale();
        self.predictor.cfg.beta_z = base.0 * scale;
        self.predictor.cfg.beta_nu = base.1 * scale;
        let mut g = Graph::new();
        let out = loss_total(&self.predictor, &mut g, &batch.images, batch.actions.as_deref(), batch.batch, &noise);
        (self.predictor.cfg.beta_z, self.predictor.cfg.beta_nu) = base;
        let out = out?;
        let val = |v| g.value(v).item() as f64;
        let rec = MetricRecord {
            step: self.step + 1,
            loss: val(out.total),
            recon: val(out.pred.recon),
            kl_z: out.pred.kl.map(val),
            recon_comp: out.comp.as_ref().map(|c| val(c.recon)),
            kl_nu: out.comp.as_ref().map(|c| val(c.kl)),
            grad_norm: 0.0,
            seconds: 0.0,
        };
        if !rec.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}: {rec:?}", rec.step)));
        }
        let grads = g.backward(out.total)?;
        if !grads.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at step {}: {rec:?}", rec.step)));
        }
        let grad_norm = grads.global_norm();
        self.adam.step(&mut self.predictor.params, &grads);
        self.step += 1;
        Ok(MetricRecord { grad_norm, seconds: t0.elapsed().as_secs_f64(), ..rec })
    }

    /// Trains until `cfg.steps`, drawing batches from `data`. With `files`,
    /// metrics are appended every `log_every` steps and checkpoints written
    /// every `ckpt_every` steps and at the end.
    pub fn run(&mut self, data: &[VideoSequence], files: Option<&RunFiles>) -> Result<Vec<MetricRecord>> {
        let mut batches = BatchIterator::new(data, self.cfg.batch_size, self.predictor.cfg.seq_len, self.cfg.seed)?;
        batches.skip_batches(self.step as usize);
        let mut history = Vec::new();
        let mut log = match files {
            Some(f) => Some(
                OpenOptions::new().create(true).append(true).open(&f.metrics).map_err(|e| Error::io(&f.metrics, e))?,
            ),
            None => None,
        };
        while self.step < self.cfg.steps {
            let batch = batches.next().ok_or_else(|| Error::Format("batch construction failed".into()))?;
            let rec = self.step_on(&batch)?;
            if rec.step % self.cfg.log_every.max(1) == 0 || rec.step == self.cfg.steps {
                log::info!(
                    "step {} loss {:.5} recon {:.5} kl_z {:?} comp {:?} ({:.2}s/step)",
                    rec.step,
                    rec.loss,
                    rec.recon,
                    rec.kl_z,
                    rec.recon_comp,
                    rec.seconds
                );
                if let (Some(w), Some(f)) = (log.as_mut(), files) {
                    writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&f.metrics, e))?;
                }
                history.push(rec.clone());
            }
            if let Some(f) = files {
                if rec.step % self.cfg.ckpt_every.max(1) == 0 || rec.step == self.cfg.steps {
                    self.save(&f.checkpoint, f.dataset.clone())?;
                }
            }
        }
        Ok(history)
    }

    pub fn save(&self, path: &Path, dataset: Option<String>) -> Result<()> {
        let meta = PredictorMeta { config: self.predictor.cfg.clone(), step: self.step, seed: self.cfg.seed, dataset, adam: None };
        save_predictor(path, &self.predictor, Some(&self.adam), meta)
    }
}
