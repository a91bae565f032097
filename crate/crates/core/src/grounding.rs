//! Grounding: small networks mapping true actions to latents and back,
//! fitted on a labeled subset against a frozen predictor.

use std::path::Path;

use clasp_autodiff::{Adam, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_container, write_container};
use crate::dataio::VideoSequence;
use crate::evalkit::Stats;
use crate::model::layers::Mlp;
use crate::model::Predictor;
use crate::rng::stream_rng;
use crate::svp::sequence_latents;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub slope: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            lr: 1e-3,
            batch_size: 64,
            max_steps: 30_000,
            eval_every: 100,
            patience: 20,
            val_fraction: 0.1,
            seed: 0,
            slope: 0.2,
        }
    }
}

/// One labeled transition: the true action and the posterior-mean latent.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingPair {
    pub u: f64,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub n_pairs: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub steps: usize,
    /// Stopped by the patience rule rather than the step cap.
    pub converged: bool,
    pub val_loss: f64,
    /// |latent_to_act(z) - u| over held-out pairs, degrees.
    pub action_error: Stats,
    /// |latent_to_act(act_to_latent(u)) - u| over held-out actions, degrees.
    pub round_trip_error: Stats,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionEstimate {
    pub u: f64,
    /// The raw output fell outside the labeled action range and was clamped.
    pub extrapolated: bool,
}

#[derive(Clone, Debug)]
pub struct GroundingMaps {
    pub params: ParamStore<f32>,
    pub to_latent: Mlp,
    pub to_action: Mlp,
    pub latent_dim: usize,
    pub u_mean: f64,
    pub u_std: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub predictor_checksum: String,
    pub cfg: GroundingConfig,
}

#[derive(Serialize, Deserialize)]
struct GroundingMeta {
    latent_dim: usize,
    u_mean: f64,
    u_std: f64,
    u_min: f64,
    u_max: f64,
    predictor_checksum: String,
    config: GroundingConfig,
}

impl GroundingMaps {
    fn init(latent_dim: usize, pairs: &[GroundingPair], checksum: String, cfg: &GroundingConfig) -> Self {
        let us: Vec<f64> = pairs.iter().map(|p| p.u).collect();
        let s = Stats::of(&us);
        let mut params = ParamStore::new();
        let mut rng = stream_rng(cfg.seed, "init/grounding", 0);
        let lat_sizes = [&[1][..], &cfg.hidden, &[latent_dim]].concat();
        let act_sizes = [&[latent_dim][..], &cfg.hidden, &[1]].concat();
        let to_latent = Mlp::new(&mut params, "lat", &lat_sizes, cfg.slope, &mut rng);
        let to_action = Mlp::new(&mut params, "act", &act_sizes, cfg.slope, &mut rng);
        Self {
            params,
            to_latent,
            to_action,
            latent_dim,
            u_mean: s.mean,
            u_std: if s.std > 1e-9 { s.std } else { 1.0 },
            u_min: us.iter().copied().fold(f64::INFINITY, f64::min),
            u_max: us.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            predictor_checksum: checksum,
            cfg: cfg.clone(),
        }
    }

    pub fn normalize(&self, u: f64) -> f64 {
        (u - self.u_mean) / self.u_std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.u_std + self.u_mean
    }

    fn in_range(&self, u: f64) -> bool {
        u >= self.u_min - 1e-9 && u <= self.u_max + 1e-9
    }

    /// Latents for a batch of actions; the flag marks inputs outside the labeled range.
    pub fn act_to_latent_batch(&self, us: &[f64]) -> Result<Vec<(Vec<f64>, bool)>> {
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[us.len(), 1], us.iter().map(|&u| self.normalize(u) as f32).collect())?);
        let y = self.to_latent.forward(&mut g, &self.params, x)?;
        let out = g.value(y);
        Ok(us.iter().enumerate().map(|(i, &u)| (out.row(i).iter().map(|&v| v as f64).collect(), !self.in_range(u))).collect())
    }

    pub fn act_to_latent(&self, u: f64) -> Result<(Vec<f64>, bool)> {
        Ok(self.act_to_latent_batch(&[u])?.remove(0))
    }

    pub fn latent_to_act_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<ActionEstimate>> {
        let d = self.latent_dim;
        if zs.iter().any(|z| z.len() != d) {
            return Err(Error::Config(format!("latent_to_act expects {d}-dimensional latents")));
        }
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[zs.len(), d], zs.iter().flatten().map(|&v| v as f32).collect())?);
        let y = self.to_action.forward(&mut g, &self.params, x)?;
        Ok(g.value(y)
            .data()
            .iter()
            .map(|&v| {
                let raw = self.denormalize(v as f64);
                ActionEstimate { u: raw.clamp(self.u_min, self.u_max), extrapolated: !self.in_range(raw) }
            })
            .collect())
    }

    pub fn latent_to_act(&self, z: &[f64]) -> Result<ActionEstimate> {
        Ok(self.latent_to_act_batch(&[z.to_vec()])?.remove(0))
    }

    /// Refuses to pair these maps with a predictor they were not fitted on.
    pub fn check_predictor(&self, p: &Predictor<f32>) -> Result<()> {
        if p.checksum() != self.predictor_checksum {
            return Err(Error::Config("grounding maps were fitted on a different predictor checkpoint".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = GroundingMeta {
            latent_dim: self.latent_dim,
            u_mean: self.u_mean,
            u_std: self.u_std,
            u_min: self.u_min,
            u_max: self.u_max,
            predictor_checksum: self.predictor_checksum.clone(),
            config: self.cfg.clone(),
        };
        let tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        write_container(path, "grounding", serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = read_container(path, "grounding")?;
        let meta: GroundingMeta = serde_json::from_value(c.meta.clone())?;
        let mut maps = Self::init(meta.latent_dim, &[GroundingPair { u: 0.0, z: vec![] }], meta.predictor_checksum, &meta.config);
        let mut store = ParamStore::new();
        for (_, name, _) in maps.params.iter() {
            let t = c.take(name).ok_or_else(|| Error::Format(format!("{}: missing tensor {name}", path.display())))?;
            store.add(name, t);
        }
        maps.params.load_from(&store)?;
        maps.u_mean = meta.u_mean;
        maps.u_std = meta.u_std;
        maps.u_min = meta.u_min;
        maps.u_max = meta.u_max;
        Ok(maps)
    }
}

/// Posterior-mean latents paired with true actions, for every consecutive
/// frame pair of the labeled sequences.
pub fn grounding_pairs(p: &Predictor<f32>, labeled: &[&VideoSequence]) -> Result<Vec<Vec<GroundingPair>>> {
    let lat = sequence_latents(p, labeled)?;
    labeled
        .iter()
        .zip(lat)
        .map(|(s, l)| {
            let acts = s.actions.as_ref().ok_or_else(|| Error::Config(format!("sequence {} has no action labels", s.meta.seed)))?;
            Ok(acts.iter().zip(l).map(|(&u, q)| GroundingPair { u, z: q.mean }).collect())
        })
        .collect()
}

fn batch_loss(maps: &GroundingMaps, g: &mut Graph<f32>, pairs: &[&GroundingPair]) -> Result<clasp_autodiff::Var> {
    let d = maps.latent_dim;
    let n = pairs.len();
    let u = g.input(Tensor::new(&[n, 1], pairs.iter().map(|p| maps.normalize(p.u) as f32).collect())?);
    let z = g.input(Tensor::new(&[n, d], pairs.iter().flat_map(|p| p.z.iter().map(|&v| v as f32)).collect())?);
    let z_hat = maps.to_latent.forward(g, &maps.params, u)?;
    let u_hat = maps.to_action.forward(g, &maps.params, z)?;
    let scale = 1.0 / n as f32;
    let l1 = g.sq_err(z_hat, z, scale)?;
    let l2 = g.sq_err(u_hat, u, scale)?;
    Ok(g.add(l1, l2)?)
}

/// Fits both maps on the labeled sequences; the predictor is only read.
/// A tenth of the sequences (at least one) is held out for early stopping
/// and the reported errors.
pub fn fit_grounding(p: &Predictor<f32>, labeled: &[&VideoSequence], cfg: &GroundingConfig) -> Result<(GroundingMaps, GroundingReport)> {
    if labeled.is_empty() {
        return Err(Error::Config("grounding needs at least one labeled sequence".into()));
    }
    let checksum = p.checksum();
    let per_seq = grounding_pairs(p, labeled)?;
    let mut order: Vec<usize> = (0..per_seq.len()).collect();
    let mut rng = stream_rng(cfg.seed, "grounding", 0);
    order.shuffle(&mut rng);
    let n_val_seq = if per_seq.len() < 2 { 0 } else { ((per_seq.len() as f64 * cfg.val_fraction).round() as usize).max(1) };
    let (val_seq, train_seq) = order.split_at(n_val_seq);
    let train: Vec<&GroundingPair> = train_seq.iter().flat_map(|&i| &per_seq[i]).collect();
    let val: Vec<&GroundingPair> = if val_seq.is_empty() { train.clone() } else { val_seq.iter().flat_map(|&i| &per_seq[i]).collect() };
    let all: Vec<GroundingPair> = train.iter().map(|&p| p.clone()).collect();
    let mut maps = GroundingMaps::init(p.cfg.latent_dim, &all, checksum.clone(), cfg);

    let mut adam = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
    let mut best = (f64::INFINITY, maps.params.clone());
    let (mut since_best, mut converged, mut steps) = (0, false, 0);
    while steps < cfg.max_steps {
        let batch: Vec<&GroundingPair> = (0..cfg.batch_size.min(train.len())).map(|_| train[rng.gen_range(0..train.len())]).collect();
        let mut g = Graph::new();
        let loss = batch_loss(&maps, &mut g, &batch)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::Numerical(format!("grounding loss diverged at step {steps}")));
        }
        let grads = g.backward(loss)?;
        adam.step(&mut maps.params, &grads);
        steps += 1;
        if steps % cfg.eval_every == 0 {
            let mut g = Graph::inference();
            let v = batch_loss(&maps, &mut g, &val)?;
            let v = g.value(v).item() as f64;
            if v < best.0 {
                best = (v, maps.params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    converged = true;
                    break;
                }
            }
        }
    }
    maps.params = best.1;
    if p.checksum() != checksum {
        return Err(Error::Numerical("predictor parameters changed during grounding".into()));
    }

    let val_z: Vec<Vec<f64>> = val.iter().map(|p| p.z.clone()).collect();
    let est = maps.latent_to_act_batch(&val_z)?;
    let action_err: Vec<f64> = est.iter().zip(&val).map(|(e, p)| (e.u - p.u).abs()).collect();
    let val_u: Vec<f64> = val.iter().map(|p| p.u).collect();
    let lat: Vec<Vec<f64>> = maps.act_to_latent_batch(&val_u)?.into_iter().map(|(z, _)| z).collect();
    let back = maps.latent_to_act_batch(&lat)?;
    let rt_err: Vec<f64> = back.iter().zip(&val_u).map(|(e, u)| (e.u - u).abs()).collect();
    if !converged {
        log::warn!("grounding stopped at the step cap ({steps}); best validation loss {:.5}", best.0);
    }
    let report = GroundingReport {
        n_pairs: per_seq.iter().map(Vec::len).sum(),
        n_train: train.len(),
        n_val: val.len(),
        steps,
        converged,
        val_loss: best.0,
        action_error: Stats::of(&action_err),
        round_trip_error: Stats::of(&rt_err),
    };
    Ok((maps, report))
}

/// How real actions reach the predictor's latent input: through fitted
/// grounding maps, or through the supervised model's own action embedding.
#[derive(Clone, Copy, Debug)]
pub enum ActionInterface<'a> {
    Grounded(&'a GroundingMaps),
    Supervised,
}

impl<'a> ActionInterface<'a> {
    /// Picks the interface matching the predictor's training mode.
    pub fn for_predictor(p: &Predictor<f32>, maps: Option<&'a GroundingMaps>) -> Result<Self> {
        if p.embed.is_some() {
            return Ok(Self::Supervised);
        }
        let maps = maps.ok_or_else(|| Error::MissingArtifact("grounding maps are required for an unsupervised predictor".into()))?;
        maps.check_predictor(p)?;
        Ok(Self::Grounded(maps))
    }

    /// Dimension of the space a planner searches: latents when grounded,
    /// normalised actions when supervised.
    pub fn search_dim(&self, p: &Predictor<f32>) -> usize {
        match self {
            Self::Grounded(_) => p.cfg.latent_dim,
            Self::Supervised => 1,
        }
    }

    /// Predictor latents for points of the search space.
    pub fn search_to_latents(&self, p: &Predictor<f32>, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Grounded(_) => Ok(xs.to_vec()),
            Self::Supervised => embed(p, &xs.iter().map(|x| x[0]).collect::<Vec<_>>()),
        }
    }

    /// Executable action for a point of the search space.
    pub fn search_to_action(&self, x: &[f64]) -> Result<ActionEstimate> {
        match self {
            Self::Grounded(maps) => maps.latent_to_act(x),
            Self::Supervised => Ok(ActionEstimate { u: crate::model::denormalize_action(x[0]), extrapolated: false }),
        }
    }

    /// Predictor latents for real actions.
    pub fn actions_to_latents(&self, p: &Predictor<f32>, us: &[f64]) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Grounded(maps) => Ok(maps.act_to_latent_batch(us)?.into_iter().map(|(z, _)| z).collect()),
            Self::Supervised => embed(p, &us.iter().map(|&u| crate::model::normalize_action(u)).collect::<Vec<_>>()),
        }
    }
}

fn embed(p: &Predictor<f32>, u_norm: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::inference();
    let x = g.input(Tensor::new(&[u_norm.len(), 1], u_norm.iter().map(|&v| v as f32).collect())?);
    let z = p.embed_actions(&mut g, x)?;
    let z = g.value(z);
    Ok((0..u_norm.len()).map(|i| z.row(i).iter().map(|&v| v as f64).collect()).collect())
}
