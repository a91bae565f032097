//! The video-prediction network: convolutional encoder/decoder, recurrent
//! core, inference network and the optional composition/action-embedding
//! heads.

pub mod latent;
pub mod layers;

use clasp_autodiff::init::leaky_gain;
use clasp_autodiff::{Float, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composer::TrainMode;
use crate::env::MAX_ACTION_DEG;
use crate::rng::stream_rng;
use crate::{Error, Result};

use latent::gaussian_head;
use layers::{Conv, ConvT, Dense, Lstm, Mlp};

/// How the per-frame squared error is reduced over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconReduction {
    /// Mean over the `3*H*W` values of a frame.
    Mean,
    /// Sum over the values of a frame.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Widths of the strided conv levels, from the input side.
    pub conv_channels: Vec<usize>,
    pub enc_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub infer_hidden: Vec<usize>,
    pub comp_hidden: Vec<usize>,
    pub embed_hidden: Vec<usize>,
    /// Decoder skip connections from the last observed frame.
    pub skip: bool,
    /// Number of ground-truth conditioning frames `K`.
    pub cond_frames: usize,
    /// Total sequence length `T` seen in training.
    pub seq_len: usize,
    /// Steps composed into one trajectory latent, `C`.
    pub comp_chunk: usize,
    pub beta_z: f64,
    pub beta_nu: f64,
    pub mode: TrainMode,
    pub recon: ReconReduction,
    pub slope: f64,
}

impl ModelConfig {
    /// Defaults for a square image side of `image_size` pixels.
    pub fn new(image_size: usize, mode: TrainMode) -> Self {
        let levels = levels_for(image_size).unwrap_or(1);
        let base = if image_size >= 64 { 64 } else { 16 };
        Self {
            image_size,
            conv_channels: (0..levels).map(|i| base << i.min(3)).collect(),
            enc_dim: 128,
            latent_dim: 10,
            hidden: 256,
            infer_hidden: vec![256, 128],
            comp_hidden: vec![32, 32],
            embed_hidden: vec![32, 32],
            skip: false,
            cond_frames: 5,
            seq_len: 15,
            comp_chunk: 4,
            beta_z: 1e-2,
            beta_nu: 1e-8,
            mode,
            recon: ReconReduction::Sum,
            slope: 0.2,
        }
    }

    pub fn levels(&self) -> usize {
        self.conv_channels.len()
    }

    /// Number of composed blocks per training sequence.
    pub fn num_blocks(&self) -> usize {
        (self.seq_len - self.cond_frames) / self.comp_chunk
    }

    pub fn validate(&self) -> Result<()> {
        let levels = levels_for(self.image_size)
            .ok_or_else(|| Error::Config(format!("image size {} is not a power of two >= 8", self.image_size)))?;
        if self.conv_channels.len() != levels || self.conv_channels.contains(&0) {
            return Err(Error::Config(format!("{}x{} images need {levels} nonzero conv widths", self.image_size, self.image_size)));
        }
        if self.enc_dim == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("zero-sized network dimension".into()));
        }
        if self.cond_frames == 0 || self.cond_frames >= self.seq_len {
            return Err(Error::Config(format!("need 1 <= K < T, got K={} T={}", self.cond_frames, self.seq_len)));
        }
        if self.beta_z < 0.0 || self.beta_nu < 0.0 {
            return Err(Error::Config("KL weights must be non-negative".into()));
        }
        if self.mode == TrainMode::Clasp {
            if self.comp_chunk < 2 {
                return Err(Error::Config("composition needs at least 2 steps per block".into()));
            }
            if self.seq_len < self.cond_frames + self.comp_chunk {
                return Err(Error::Config(format!(
                    "rollout of {} predicted steps is shorter than one block of {}",
                    self.seq_len - self.cond_frames,
                    self.comp_chunk
                )));
            }
        }
        Ok(())
    }

    /// Short stable hash of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(&Sha256::digest(json)[..6])
    }
}

fn levels_for(size: usize) -> Option<usize> {
    (size >= 8 && size.is_power_of_two()).then(|| (size / 4).trailing_zeros() as usize)
}

/// Scale that maps actions in [0, 40] to zero mean and unit variance under
/// the uniform data distribution; used by the action-embedding head.
pub fn normalize_action(u: f64) -> f64 {
    (u - MAX_ACTION_DEG / 2.0) / (MAX_ACTION_DEG / 12f64.sqrt())
}

pub fn denormalize_action(v: f64) -> f64 {
    v * (MAX_ACTION_DEG / 12f64.sqrt()) + MAX_ACTION_DEG / 2.0
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub levels: Vec<Conv>,
    pub head: Conv,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub head: ConvT,
    pub levels: Vec<ConvT>,
}

/// Encoder output: one `[N, enc_dim]` code per frame plus the intermediate
/// feature maps (`[C_i, N, h_i, w_i]`, finest first) for skip connections.
pub struct Encoded {
    pub code: Var,
    pub maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Predictor<F> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub lstm: Lstm,
    pub core_out: Dense,
    /// Posterior network; absent for the supervised baseline.
    pub infer: Option<Mlp>,
    /// Composition network; present only when training with composability.
    pub comp: Option<Mlp>,
    /// Action embedding of the supervised baseline.
    pub embed: Option<Mlp>,
}

impl<F: Float> Predictor<F> {
    /// Initialises all parameters; each sub-network draws from its own
    /// random stream derived from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let gain = leaky_gain(cfg.slope);
        let ch = &cfg.conv_channels;
        let levels = cfg.levels();

        let mut rng = stream_rng(seed, "init/encoder", 0);
        let enc_levels = (0..levels)
            .map(|i| {
                let cin = if i == 0 { 3 } else { ch[i - 1] };
                Conv::new(&mut store, &format!("enc.{i}"), cin, ch[i], 4, 2, 1, gain, &mut rng)
            })
            .collect();
        let enc_head = Conv::new(&mut store, "enc.head", ch[levels - 1], cfg.enc_dim, 4, 1, 0, 1.0, &mut rng);

        let mut rng = stream_rng(seed, "init/decoder", 0);
        let dec_head = ConvT::new(&mut store, "dec.head", cfg.enc_dim, ch[levels - 1], 4, 1, 0, gain, &mut rng);
        let mult = if cfg.skip { 2 } else { 1 };
        let dec_levels = (0..levels)
            .rev()
            .map(|i| {
                let cout = if i == 0 { 3 } else { ch[i - 1] };
                let g = if i == 0 { 1.0 } else { gain };
                ConvT::new(&mut store, &format!("dec.{i}"), ch[i] * mult, cout, 4, 2, 1, g, &mut rng)
            })
            .collect();

        let mut rng = stream_rng(seed, "init/core", 0);
        let lstm = Lstm::new(&mut store, "core.lstm", cfg.enc_dim + cfg.latent_dim + 1, cfg.hidden, &mut rng);
        let core_out = Dense::new(&mut store, "core.out", cfg.hidden, cfg.enc_dim, 1.0, &mut rng);

        let d = cfg.latent_dim;
        let infer = (cfg.mode != TrainMode::Supervised).then(|| {
            let mut rng = stream_rng(seed, "init/infer", 0);
            let sizes = [&[2 * cfg.enc_dim][..], &cfg.infer_hidden, &[2 * d]].concat();
            Mlp::new(&mut store, "infer", &sizes, cfg.slope, &mut rng)
        });
        let embed = (cfg.mode == TrainMode::Supervised).then(|| {
            let mut rng = stream_rng(seed, "init/embed", 0);
            let sizes = [&[1][..], &cfg.embed_hidden, &[d]].concat();
            Mlp::new(&mut store, "embed", &sizes, cfg.slope, &mut rng)
        });
        // Composition parameters come last so that the remaining parameter
        // ids do not depend on whether composition is enabled.
        let comp = (cfg.mode == TrainMode::Clasp).then(|| {
            let mut rng = stream_rng(seed, "init/comp", 0);
            let sizes = [&[2 * d][..], &cfg.comp_hidden, &[2 * d]].concat();
            Mlp::new(&mut store, "comp", &sizes, cfg.slope, &mut rng)
        });

        Ok(Self {
            cfg,
            params: store,
            encoder: Encoder { levels: enc_levels, head: enc_head },
            decoder: Decoder { head: dec_head, levels: dec_levels },
            lstm,
            core_out,
            infer,
            comp,
            embed,
        })
    }

    /// SHA-256 over all parameter values, in storage order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn slope(&self) -> F {
        F::from_f64_lossy(self.cfg.slope)
    }

    /// `x: [3, N, S, S]` with values in [0, 1].
    pub fn encode(&self, g: &mut Graph<F>, x: Var) -> Result<Encoded> {
        let s = g.shape(x);
        if s.len() != 4 || s[0] != 3 || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(Error::Config(format!("encoder expects [3, N, {0}, {0}], got {s:?}", self.cfg.image_size)));
        }
        let n = s[1];
        let mut h = x;
        let mut maps = Vec::with_capacity(self.encoder.levels.len());
        for conv in &self.encoder.levels {
            h = conv.forward(g, &self.params, h)?;
            h = g.leaky_relu(h, self.slope());
            maps.push(h);
        }
        let code = self.encoder.head.forward(g, &self.params, h)?;
        let code = g.tanh(code);
        let code = g.reshape(code, &[self.cfg.enc_dim, n])?;
        let code = g.transpose(code)?;
        Ok(Encoded { code, maps })
    }

    /// `code: [N, enc_dim]` to frames `[3, N, S, S]` in (0, 1). `skips`
    /// must hold one map per encoder level (finest first) for the same `N`
    /// when skip connections are enabled.
    pub fn decode(&self, g: &mut Graph<F>, code: Var, skips: Option<&[Var]>) -> Result<Var> {
        let n = g.shape(code)[0];
        let t = g.transpose(code)?;
        let mut h = g.reshape(t, &[self.cfg.enc_dim, n, 1, 1])?;
        h = self.decoder.head.forward(g, &self.params, h)?;
        h = g.leaky_relu(h, self.slope());
        let levels = self.decoder.levels.len();
        for (j, up) in self.decoder.levels.iter().enumerate() {
            if self.cfg.skip {
                let maps = skips.ok_or_else(|| Error::Config("decoder needs skip features".into()))?;
                h = g.concat_rows(&[h, maps[levels - 1 - j]])?;
            }
            h = up.forward(g, &self.params, h)?;
            h = if j + 1 < levels { g.leaky_relu(h, self.slope()) } else { g.sigmoid(h) };
        }
        Ok(h)
    }

    /// Posterior `q(z_t | x_t, x_{t-1})` from the two frames' codes.
    pub fn infer(&self, g: &mut Graph<F>, cur: Var, prev: Var) -> Result<(Var, Var)> {
        let net = self.infer.as_ref().ok_or_else(|| Error::Config("model has no inference network".into()))?;
        let x = g.concat_cols(&[cur, prev])?;
        let out = net.forward(g, &self.params, x)?;
        gaussian_head(g, out, self.cfg.latent_dim)
    }

    /// Gaussian over a trajectory latent from two latents (step or trajectory).
    pub fn compose(&self, g: &mut Graph<F>, a: Var, b: Var) -> Result<(Var, Var)> {
        let net = self.comp.as_ref().ok_or_else(|| Error::Config("model has no composition network".into()))?;
        for v in [a, b] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != self.cfg.latent_dim {
                return Err(Error::Config(format!("compose expects [N, {}], got {:?}", self.cfg.latent_dim, g.shape(v))));
            }
        }
        let x = g.concat_cols(&[a, b])?;
        let out = net.forward(g, &self.params, x)?;
        gaussian_head(g, out, self.cfg.latent_dim)
    }

    /// Supervised baseline: latent from normalised actions `[N, 1]`.
    pub fn embed_actions(&self, g: &mut Graph<F>, u_norm: Var) -> Result<Var> {
        let net = self.embed.as_ref().ok_or_else(|| Error::Config("model has no action embedding".into()))?;
        net.forward(g, &self.params, u_norm)
    }

    /// One recurrent step on `(frame code, latent, indicator)`; returns the
    /// new state and the predicted next-frame code.
    pub fn core_step(&self, g: &mut Graph<F>, state: (Var, Var), code: Var, z: Var, indicator: f64) -> Result<((Var, Var), Var)> {
        let n = g.shape(code)[0];
        let ind = g.input(Tensor::full(&[n, 1], F::from_f64_lossy(indicator)));
        let x = g.concat_cols(&[code, z, ind])?;
        let state = self.lstm.step(g, &self.params, x, state)?;
        let out = self.core_out.forward(g, &self.params, state.0)?;
        Ok((state, g.tanh(out)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: TrainMode, skip: bool) -> ModelConfig {
        ModelConfig {
            conv_channels: vec![4],
            enc_dim: 6,
            latent_dim: 2,
            hidden: 5,
            infer_hidden: vec![7],
            comp_hidden: vec![3],
            embed_hidden: vec![3],
            skip,
            cond_frames: 2,
            seq_len: 5,
            comp_chunk: 2,
            ..ModelConfig::new(8, mode)
        }
    }

    #[test]
    fn default_widths_and_dims() {
        let c = ModelConfig::new(64, TrainMode::Clasp);
        assert_eq!(c.conv_channels, vec![64, 128, 256, 512]);
        assert_eq!((c.enc_dim, c.latent_dim), (128, 10));
        let c = ModelConfig::new(32, TrainMode::Clasp);
        assert_eq!(c.conv_channels, vec![16, 32, 64]);
        assert_eq!(c.num_blocks(), 2);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(32, TrainMode::Clasp);
        c.cond_frames = 15;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(32, TrainMode::Clasp);
        c.cond_frames = 12;
        assert!(c.validate().is_err());
        c.mode = TrainMode::NoComposability;
        assert!(c.validate().is_ok());
        assert!(ModelConfig::new(24, TrainMode::Clasp).validate().is_err());
    }

    #[test]
    fn encode_decode_shapes_and_range() {
        for skip in [false, true] {
            let p = Predictor::<f64>::new(tiny(TrainMode::Clasp, skip), 1).unwrap();
            let mut g = Graph::inference();
            let x = g.input(Tensor::from_fn(&[3, 3, 8, 8], |i| (i % 7) as f64 / 7.0));
            let e = p.encode(&mut g, x).unwrap();
            assert_eq!(g.shape(e.code), &[3, 6]);
            let y = p.decode(&mut g, e.code, Some(&e.maps)).unwrap();
            assert_eq!(g.shape(y), &[3, 3, 8, 8]);
            assert!(g.value(y).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let full = Predictor::<f32>::new(ModelConfig::new(32, TrainMode::Clasp), 0).unwrap();
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros(&[3, 2, 32, 32]));
        let e = full.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(e.code), &[2, 128]);
    }

    #[test]
    fn heads_follow_mode() {
        let p = Predictor::<f64>::new(tiny(TrainMode::Clasp, false), 0).unwrap();
        assert!(p.infer.is_some() && p.comp.is_some() && p.embed.is_none());
        let p = Predictor::<f64>::new(tiny(TrainMode::NoComposability, false), 0).unwrap();
        assert!(p.infer.is_some() && p.comp.is_none());
        let p = Predictor::<f64>::new(tiny(TrainMode::Supervised, false), 0).unwrap();
        assert!(p.infer.is_none() && p.embed.is_some());
    }

    #[test]
    fn shared_parameters_do_not_depend_on_composition() {
        let a = Predictor::<f32>::new(tiny(TrainMode::Clasp, false), 3).unwrap();
        let b = Predictor::<f32>::new(tiny(TrainMode::NoComposability, false), 3).unwrap();
        for (id, name, t) in b.params.iter() {
            assert_eq!(a.params.name(id), name);
            assert_eq!(a.params.value(id), t);
        }
    }

    #[test]
    fn action_normalisation_round_trip() {
        for u in [0.0, 13.7, 20.0, 40.0] {
            assert!((denormalize_action(normalize_action(u)) - u).abs() < 1e-12);
        }
        assert_eq!(normalize_action(20.0), 0.0);
    }
}
