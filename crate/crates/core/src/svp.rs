//! Stochastic video prediction: the prediction objective, posterior
//! inference over frame pairs, and autoregressive rollout.
//!
//! Batched frames are laid out `[3, T*B, S, S]` with step `t` (0-based) of
//! sample `b` at position `t*B + b`. Predicted step `t` (1-based, `2..=T`)
//! consumes the ground-truth code of frame `t-1` while `t-1 <= K`, and the
//! core's own previous output afterwards; frames are never re-encoded.

use clasp_autodiff::{Float, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::composer::TrainMode;
use crate::dataio::{stack_frames, VideoSequence};
use crate::model::latent::{reparameterize, GaussianLatent};
use crate::model::{normalize_action, Encoded, Predictor, ReconReduction};
use crate::{Error, Result};

/// Where the recurrent core's frame input came from at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSource {
    /// Code of ground-truth frame (1-based index).
    GroundTruth(usize),
    /// Core output of an earlier step (1-based index of the frame it predicted).
    Predicted(usize),
}

/// Instrumentation record for one call into the recurrent core.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepTrace {
    /// 1-based index of the frame this call predicts.
    pub target: usize,
    pub source: InputSource,
    pub indicator: u8,
}

/// Standard-normal noise for one training step.
#[derive(Clone, Debug)]
pub struct Noise<F> {
    /// `[(T-1)*B, d_z]`, one row per transition.
    pub z: Tensor<F>,
    /// One `[B, d_z]` tensor per compose call (block-major).
    pub nu: Vec<Tensor<F>>,
}

impl<F: Float> Noise<F> {
    pub fn zeros(p: &Predictor<F>, batch: usize) -> Self {
        let c = &p.cfg;
        let calls = c.num_blocks() * c.comp_chunk.saturating_sub(1);
        Self {
            z: Tensor::zeros(&[(c.seq_len - 1) * batch, c.latent_dim]),
            nu: (0..calls).map(|_| Tensor::zeros(&[batch, c.latent_dim])).collect(),
        }
    }

    /// Draws step noise from `z_rng` and trajectory noise from `nu_rng`.
    pub fn sample(p: &Predictor<F>, batch: usize, z_rng: &mut impl Rng, nu_rng: &mut impl Rng) -> Self {
        let mut n = Self::zeros(p, batch);
        fill_normal(&mut n.z, z_rng);
        for t in &mut n.nu {
            fill_normal(t, nu_rng);
        }
        n
    }
}

fn fill_normal<F: Float>(t: &mut Tensor<F>, rng: &mut impl Rng) {
    for v in t.data_mut() {
        *v = F::from_f64_lossy(rng.sample::<f64, _>(StandardNormal));
    }
}

/// Scale that turns a summed squared error over `frames` whole frames into
/// the configured per-frame reduction, averaged over the batch.
pub fn recon_scale<F: Float>(p: &Predictor<F>, batch: usize) -> F {
    let per_frame = match p.cfg.recon {
        ReconReduction::Mean => (3 * p.cfg.image_size * p.cfg.image_size) as f64,
        ReconReduction::Sum => 1.0,
    };
    F::from_f64_lossy(1.0 / (per_frame * batch as f64))
}

/// Graph nodes of one prediction pass over a batch.
pub struct PredPass {
    pub frames: Var,
    pub encoded: Encoded,
    /// Sampled (or embedded) latents, `[(T-1)*B, d_z]`.
    pub z: Var,
    pub mu: Option<Var>,
    pub log_std: Option<Var>,
    /// Decoded predictions of frames `2..=T`.
    pub predicted: Var,
    /// Batch-mean reconstruction term.
    pub recon: Var,
    /// Batch-mean KL of the step posteriors to the prior (unweighted).
    pub kl: Option<Var>,
    /// `recon + beta_z * kl`.
    pub loss: Var,
    /// Core state after step `K`, from which composed blocks branch.
    pub branch: (Var, Var),
    pub trace: Vec<StepTrace>,
    pub batch: usize,
}

fn check_batch<F: Float>(p: &Predictor<F>, images: &Tensor<F>, batch: usize) -> Result<()> {
    let s = images.shape();
    let size = p.cfg.image_size;
    if s.len() != 4 || s[0] != 3 || s[2] != size || s[3] != size || batch == 0 || s[1] != p.cfg.seq_len * batch {
        return Err(Error::Config(format!(
            "expected a batch [3, {}*{batch}, {size}, {size}], got {s:?}",
            p.cfg.seq_len
        )));
    }
    Ok(())
}

/// Frame indices (flattened `t*B + b`) of the skip source for predicted steps `2..=T`.
pub(crate) fn skip_indices(k: usize, steps: std::ops::RangeInclusive<usize>, batch: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    for t in steps {
        let f = (t - 1).min(k) - 1;
        idx.extend((0..batch).map(|b| f * batch + b));
    }
    idx
}

pub(crate) fn gather_skips<F: Float>(g: &mut Graph<F>, maps: &[Var], idx: &[usize]) -> Result<Vec<Var>> {
    maps.iter().map(|&m| Ok(g.gather_n(m, idx)?)).collect()
}

/// Builds the prediction objective for one batch.
///
/// `actions` (per sample, `T-1` degrees) is required by the supervised
/// baseline, which embeds true actions instead of inferring latents.
pub fn pred_pass<F: Float>(
    p: &Predictor<F>,
    g: &mut Graph<F>,
    images: &Tensor<F>,
    actions: Option<&[Vec<f64>]>,
    batch: usize,
    noise: &Noise<F>,
) -> Result<PredPass> {
    check_batch(p, images, batch)?;
    let cfg = &p.cfg;
    let (t_len, k, b) = (cfg.seq_len, cfg.cond_frames, batch);
    let rows = (t_len - 1) * b;

    let frames = g.input(images.clone());
    let encoded = p.encode(g, frames)?;
    let (z, mu, log_std, kl) = match cfg.mode {
        TrainMode::Supervised => {
            let acts = actions.ok_or_else(|| Error::Config("the supervised baseline needs action labels".into()))?;
            // row (t-2)*B + b holds the action into frame t
            let mut u = vec![F::zero(); rows];
            for (bi, a) in acts.iter().enumerate().take(b) {
                for (t, &v) in a.iter().enumerate().take(t_len - 1) {
                    u[t * b + bi] = F::from_f64_lossy(normalize_action(v));
                }
            }
            let u = g.input(Tensor::new(&[rows, 1], u)?);
            (p.embed_actions(g, u)?, None, None, None)
        }
        _ => {
            let cur = g.slice_rows(encoded.code, b, rows)?;
            let prev = g.slice_rows(encoded.code, 0, rows)?;
            let (mu, ls) = p.infer(g, cur, prev)?;
            if noise.z.shape() != [rows, cfg.latent_dim] {
                return Err(Error::Config(format!("noise {:?} for {rows} transitions", noise.z.shape())));
            }
            let z = reparameterize(g, mu, ls, noise.z.clone())?;
            let kl = g.kl_std_normal(mu, ls, F::from_f64_lossy(1.0 / b as f64))?;
            (z, Some(mu), Some(ls), Some(kl))
        }
    };

    let mut state = p.lstm.zero_state(g, b);
    let mut branch = state;
    let mut outs = Vec::with_capacity(t_len - 1);
    let mut trace = Vec::with_capacity(t_len - 1);
    let mut prev_out = None;
    for t in 2..=t_len {
        let (code, source) = match prev_out {
            Some(o) if t - 1 > k => (o, InputSource::Predicted(t - 1)),
            _ => (g.slice_rows(encoded.code, (t - 2) * b, b)?, InputSource::GroundTruth(t - 1)),
        };
        let zt = g.slice_rows(z, (t - 2) * b, b)?;
        let (s, out) = p.core_step(g, state, code, zt, 0.0)?;
        state = s;
        trace.push(StepTrace { target: t, source, indicator: 0 });
        outs.push(out);
        prev_out = Some(out);
        if t == k {
            branch = state;
        }
    }

    let codes = g.concat_rows(&outs)?;
    let skips = if cfg.skip { Some(gather_skips(g, &encoded.maps, &skip_indices(k, 2..=t_len, b))?) } else { None };
    let predicted = p.decode(g, codes, skips.as_deref())?;
    let target_idx: Vec<usize> = (b..t_len * b).collect();
    let target = g.gather_n(frames, &target_idx)?;
    let recon = g.sq_err(predicted, target, recon_scale(p, b))?;
    let loss = match kl {
        Some(kl) => {
            let w = g.scale(kl, F::from_f64_lossy(cfg.beta_z));
            g.add(recon, w)?
        }
        None => recon,
    };
    Ok(PredPass { frames, encoded, z, mu, log_std, predicted, recon, kl, loss, branch, trace, batch: b })
}

/// Selects rows of a `[N, d]` matrix.
pub(crate) fn select_rows<F: Float>(g: &mut Graph<F>, m: Var, idx: &[usize]) -> Result<Var> {
    let (n, d) = (g.shape(m)[0], g.shape(m)[1]);
    let m3 = g.reshape(m, &[1, n, d])?;
    let picked = g.gather_n(m3, idx)?;
    Ok(g.reshape(picked, &[idx.len(), d])?)
}

/// Posterior Gaussians for every consecutive frame pair of each sequence.
pub fn sequence_latents(p: &Predictor<f32>, seqs: &[&VideoSequence]) -> Result<Vec<Vec<GaussianLatent>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(16) {
        let frames: Vec<&[u8]> = chunk.iter().flat_map(|s| (0..s.len).map(move |t| s.frame_slice(t))).collect();
        let mut g = Graph::inference();
        let x = g.input(stack_frames(p.cfg.image_size, &frames)?);
        let enc = p.encode(&mut g, x)?;
        let (mut prev_idx, mut cur_idx, mut offset) = (Vec::new(), Vec::new(), 0);
        for s in chunk {
            for t in 1..s.len {
                prev_idx.push(offset + t - 1);
                cur_idx.push(offset + t);
            }
            offset += s.len;
        }
        let cur = select_rows(&mut g, enc.code, &cur_idx)?;
        let prev = select_rows(&mut g, enc.code, &prev_idx)?;
        let (mu, ls) = p.infer(&mut g, cur, prev)?;
        let d = p.cfg.latent_dim;
        let (mu, ls) = (g.value(mu), g.value(ls));
        let mut row = 0;
        for s in chunk {
            let mut lat = Vec::with_capacity(s.len - 1);
            for _ in 1..s.len {
                let m = mu.row(row).iter().map(|&v| v as f64).collect();
                let l: Vec<f64> = ls.row(row).iter().map(|&v| v as f64).collect();
                lat.push(GaussianLatent::from_log_std(m, &l)?);
                row += 1;
            }
            out.push(lat);
        }
        debug_assert_eq!(row * d, mu.len());
    }
    Ok(out)
}

/// Posterior over the latent between two frames (`[H, W, 3]` bytes each).
pub fn infer_latent(p: &Predictor<f32>, cur: &[u8], prev: &[u8]) -> Result<GaussianLatent> {
    let mut g = Graph::inference();
    let x = g.input(stack_frames(p.cfg.image_size, &[cur, prev])?);
    let enc = p.encode(&mut g, x)?;
    let c = g.slice_rows(enc.code, 0, 1)?;
    let q = g.slice_rows(enc.code, 1, 1)?;
    let (mu, ls) = p.infer(&mut g, c, q)?;
    let m = g.value(mu).data().iter().map(|&v| v as f64).collect();
    let l: Vec<f64> = g.value(ls).data().iter().map(|&v| v as f64).collect();
    GaussianLatent::from_log_std(m, &l)
}

/// One latent of a rollout's input stream.
#[derive(Clone, Debug)]
pub struct StepLatent<F> {
    /// `[B, d_z]`.
    pub z: Tensor<F>,
    pub indicator: u8,
}

pub struct Rollout<F> {
    /// Decoded frames `[3, n*B, S, S]`, in the order of `steps`.
    pub frames: Tensor<F>,
    /// 1-based indices of the decoded frames.
    pub steps: Vec<usize>,
    pub trace: Vec<StepTrace>,
}

/// Rolls the model forward from `K` context frames (`[3, K*B, S, S]`).
///
/// `latents[j]` drives the prediction of frame `j+2`, so `latents.len()`
/// must be at least `K-1`; the rollout predicts frames `2..=latents.len()+1`
/// and decodes those listed in `decode` (all of them when `None`).
pub fn rollout<F: Float>(
    p: &Predictor<F>,
    context: &Tensor<F>,
    batch: usize,
    latents: &[StepLatent<F>],
    decode: Option<&[usize]>,
) -> Result<Rollout<F>> {
    let s = context.shape();
    let size = p.cfg.image_size;
    if s.len() != 4 || s[0] != 3 || s[2] != size || s[3] != size || batch == 0 || s[1] % batch != 0 || s[1] == 0 {
        return Err(Error::Config(format!("context {s:?} is not [3, K*{batch}, {size}, {size}]")));
    }
    let k = s[1] / batch;
    if latents.len() + 1 < k {
        return Err(Error::Config(format!("{} latents cannot cover {k} context frames", latents.len())));
    }
    let last = latents.len() + 1;
    let steps: Vec<usize> = match decode {
        Some(d) => d.to_vec(),
        None => (2..=last).collect(),
    };
    if steps.iter().any(|&t| t < 2 || t > last) {
        return Err(Error::Config(format!("decode steps {steps:?} outside 2..={last}")));
    }
    let mut g = Graph::inference();
    let x = g.input(context.clone());
    let enc = p.encode(&mut g, x)?;
    let mut state = p.lstm.zero_state(&mut g, batch);
    let mut prev_out = None;
    let mut outs = Vec::with_capacity(latents.len());
    let mut trace = Vec::with_capacity(latents.len());
    for (j, lat) in latents.iter().enumerate() {
        let t = j + 2;
        if lat.z.shape() != [batch, p.cfg.latent_dim] {
            return Err(Error::Config(format!("latent {:?} for batch {batch}", lat.z.shape())));
        }
        let (code, source) = match prev_out {
            Some(o) if t - 1 > k => (o, InputSource::Predicted(t - 1)),
            _ => (g.slice_rows(enc.code, (t - 2) * batch, batch)?, InputSource::GroundTruth(t - 1)),
        };
        let z = g.input(lat.z.clone());
        let (st, out) = p.core_step(&mut g, state, code, z, lat.indicator as f64)?;
        state = st;
        trace.push(StepTrace { target: t, source, indicator: lat.indicator });
        outs.push(out);
        prev_out = Some(out);
    }
    let chosen: Vec<Var> = steps.iter().map(|&t| outs[t - 2]).collect();
    let codes = g.concat_rows(&chosen)?;
    let skips = if p.cfg.skip {
        let idx: Vec<usize> = steps.iter().flat_map(|&t| skip_indices(k, t..=t, batch)).collect();
        Some(gather_skips(&mut g, &enc.maps, &idx)?)
    } else {
        None
    };
    let frames = p.decode(&mut g, codes, skips.as_deref())?;
    Ok(Rollout { frames: g.value(frames).clone(), steps, trace })
}
