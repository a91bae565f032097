//! Composability: trajectory latents composed from consecutive step latents,
//! the composed-decoding objective, and the combined training objective.

use std::fmt;
use std::str::FromStr;

use clasp_autodiff::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::model::latent::reparameterize;
use crate::model::Predictor;
use crate::svp::{gather_skips, pred_pass, recon_scale, skip_indices, InputSource, Noise, PredPass, StepTrace};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Prediction plus composability.
    Clasp,
    /// Prediction objective only (the ablation).
    NoComposability,
    /// True actions embedded in place of inferred latents.
    Supervised,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Clasp => "clasp",
            Self::NoComposability => "no-comp",
            Self::Supervised => "supervised",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "clasp" => Ok(Self::Clasp),
            "no-comp" | "no-composability" => Ok(Self::NoComposability),
            "supervised" => Ok(Self::Supervised),
            other => Err(Error::Config(format!("unknown mode '{other}' (clasp, no-comp, supervised)"))),
        }
    }
}

/// A composed trajectory latent in the graph.
pub struct TrajectoryLatent {
    pub sample: Var,
    pub mu: Var,
    pub log_std: Var,
    /// Number of step latents folded into it.
    pub span: usize,
    pub compose_calls: usize,
}

/// Left fold: `nu = sample(compose(z1, z2))`, then `nu = sample(compose(nu, zk))`.
/// `eps` supplies the reparameterisation noise of each call (zeros give means).
pub fn compose_chain<F: Float>(p: &Predictor<F>, g: &mut Graph<F>, zs: &[Var], eps: &[Tensor<F>]) -> Result<TrajectoryLatent> {
    if zs.len() < 2 {
        return Err(Error::Config(format!("cannot compose a chain of {} latents", zs.len())));
    }
    if eps.len() != zs.len() - 1 {
        return Err(Error::Config(format!("{} noise tensors for {} compose calls", eps.len(), zs.len() - 1)));
    }
    let mut acc = zs[0];
    let mut last = None;
    for (k, &z) in zs[1..].iter().enumerate() {
        let (mu, ls) = p.compose(g, acc, z)?;
        acc = reparameterize(g, mu, ls, eps[k].clone())?;
        last = Some((mu, ls));
    }
    let (mu, log_std) = last.expect("at least one call");
    Ok(TrajectoryLatent { sample: acc, mu, log_std, span: zs.len(), compose_calls: zs.len() - 1 })
}

/// Graph nodes of the composed-decoding pass.
pub struct CompPass {
    /// Decoded block end frames, block-major.
    pub predicted: Var,
    pub recon: Var,
    /// Batch-mean KL of the trajectory latents (unweighted).
    pub kl: Var,
    /// `recon + beta_nu * kl`.
    pub loss: Var,
    pub blocks: usize,
    pub compose_calls: usize,
    pub trace: Vec<StepTrace>,
}

/// Composed decoding over the predicted span: blocks of `C` steps aligned at
/// frame `K+1`. For a block starting at frame `s`, the core (continuing from
/// the state after step `K` and earlier blocks) takes the code of ground-truth
/// frame `s` with the trajectory latent of transitions `s+1..=s+C` and must
/// reconstruct frame `s+C`.
pub fn comp_pass<F: Float>(p: &Predictor<F>, g: &mut Graph<F>, pass: &PredPass, noise: &Noise<F>) -> Result<CompPass> {
    let cfg = &p.cfg;
    let (k, c, b) = (cfg.cond_frames, cfg.comp_chunk, pass.batch);
    let blocks = cfg.num_blocks();
    if blocks == 0 {
        return Err(Error::Config(format!("{} predicted steps cannot hold a block of {c}", cfg.seq_len - k)));
    }
    if noise.nu.len() < blocks * (c - 1) {
        return Err(Error::Config(format!("{} trajectory noise tensors for {blocks} blocks", noise.nu.len())));
    }
    let mut state = pass.branch;
    let mut outs = Vec::with_capacity(blocks);
    let mut kls = Vec::with_capacity(blocks);
    let mut trace = Vec::with_capacity(blocks);
    let mut target_idx = Vec::with_capacity(blocks * b);
    let mut skip_idx = Vec::with_capacity(blocks * b);
    let mut calls = 0;
    let kl_scale = F::from_f64_lossy(1.0 / b as f64);
    for blk in 0..blocks {
        let s = k + blk * c;
        // z for transition into frame t sits at rows (t-2)*B
        let zs: Vec<Var> = (s + 1..=s + c).map(|t| g.slice_rows(pass.z, (t - 2) * b, b)).collect::<std::result::Result<_, _>>()?;
        let eps = &noise.nu[blk * (c - 1)..(blk + 1) * (c - 1)];
        let nu = compose_chain(p, g, &zs, eps)?;
        calls += nu.compose_calls;
        kls.push(g.kl_std_normal(nu.mu, nu.log_std, kl_scale)?);
        let code = g.slice_rows(pass.encoded.code, (s - 1) * b, b)?;
        let (st, out) = p.core_step(g, state, code, nu.sample, 1.0)?;
        state = st;
        outs.push(out);
        trace.push(StepTrace { target: s + c, source: InputSource::GroundTruth(s), indicator: 1 });
        target_idx.extend((0..b).map(|bi| (s + c - 1) * b + bi));
        skip_idx.extend(skip_indices(k, s + 1..=s + 1, b));
    }
    let codes = g.concat_rows(&outs)?;
    let skips = if cfg.skip { Some(gather_skips(g, &pass.encoded.maps, &skip_idx)?) } else { None };
    let predicted = p.decode(g, codes, skips.as_deref())?;
    let target = g.gather_n(pass.frames, &target_idx)?;
    let recon = g.sq_err(predicted, target, recon_scale(p, b))?;
    let kl = g.add_all(&kls)?;
    let w = g.scale(kl, F::from_f64_lossy(cfg.beta_nu));
    let loss = g.add(recon, w)?;
    Ok(CompPass { predicted, recon, kl, loss, blocks, compose_calls: calls, trace })
}

/// The full objective for the predictor's training mode.
pub struct TotalLoss {
    pub total: Var,
    pub pred: PredPass,
    pub comp: Option<CompPass>,
}

impl TotalLoss {
    /// Every call into the recurrent core, prediction steps first.
    pub fn trace(&self) -> Vec<StepTrace> {
        let mut t = self.pred.trace.clone();
        if let Some(c) = &self.comp {
            t.extend_from_slice(&c.trace);
        }
        t
    }
}

/// Prediction objective plus, in `clasp` mode, the composability objective.
pub fn loss_total<F: Float>(
    p: &Predictor<F>,
    g: &mut Graph<F>,
    images: &Tensor<F>,
    actions: Option<&[Vec<f64>]>,
    batch: usize,
    noise: &Noise<F>,
) -> Result<TotalLoss> {
    let pred = pred_pass(p, g, images, actions, batch, noise)?;
    match p.cfg.mode {
        TrainMode::Clasp => {
            let comp = comp_pass(p, g, &pred, noise)?;
            let total = g.add(pred.loss, comp.loss)?;
            Ok(TotalLoss { total, pred, comp: Some(comp) })
        }
        TrainMode::NoComposability | TrainMode::Supervised => Ok(TotalLoss { total: pred.loss, pred, comp: None }),
    }
}
