//! Synthetic 1-DOF reacher: state, dynamics, sequence and dataset generation.

pub mod render;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use render::{draw_arm, render, AgentConfig, BackgroundSpec, Frame};

use crate::dataio::{DatasetManifest, DatasetWriter, SequenceMeta, Split, VideoSequence};
use crate::rng::{derive_seed, stream_rng};
use crate::{Error, Result};

/// Largest per-step rotation used when generating data, in degrees.
pub const MAX_ACTION_DEG: f64 = 40.0;

/// Absolute arm orientation in degrees, kept in [0, 360).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub angle: f64,
}

impl EnvState {
    pub fn new(angle: f64) -> Self {
        Self { angle: wrap_degrees(angle) }
    }
}

/// Relative counter-clockwise rotation in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub u: f64,
}

pub fn wrap_degrees(a: f64) -> f64 {
    let w = a.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

pub fn step(state: EnvState, action: Action) -> EnvState {
    EnvState::new(state.angle + action.u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    VariedBg,
    VariedAgent,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::VariedBg => "varied_bg",
            Self::VariedAgent => "varied_agent",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "plain" => Ok(Self::Plain),
            "varied_bg" => Ok(Self::VariedBg),
            "varied_agent" => Ok(Self::VariedAgent),
            other => Err(Error::Config(format!("unknown variant '{other}' (plain, varied_bg, varied_agent)"))),
        }
    }
}

/// Arm lengths (fraction of half width) of the varied-agent training grid.
pub const GRID_LENGTHS: [f64; 8] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.85, 0.90];
/// Arm widths in pixels at 32x32 for the varied-agent training grid.
pub const GRID_WIDTHS: [f64; 9] = [2.0, 2.5, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5];

/// The 72 training agents; the reference agent is deliberately not on the grid.
pub fn agent_grid(image_size: usize) -> Vec<AgentConfig> {
    let scale = image_size as f64 / 32.0;
    let mut out = Vec::with_capacity(GRID_LENGTHS.len() * GRID_WIDTHS.len());
    for &l in &GRID_LENGTHS {
        for &w in &GRID_WIDTHS {
            out.push(AgentConfig { arm_length: l, arm_width: w * scale, ..AgentConfig::reference(image_size) });
        }
    }
    out
}

/// Optional directory of background images; split into train/held-out by a
/// hash of the file name.
#[derive(Clone, Debug, Default)]
pub struct ImagePool {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

impl ImagePool {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut pool = Self::default();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for f in files {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if derive_seed(0, &name, 0) % 10 == 0 {
                pool.test.push(f);
            } else {
                pool.train.push(f);
            }
        }
        if pool.train.is_empty() || pool.test.is_empty() {
            return Err(Error::Config(format!("{} needs images for both the train and held-out splits", dir.display())));
        }
        Ok(pool)
    }
}

#[derive(Clone, Debug)]
pub struct GenOptions {
    pub image_size: usize,
    pub split: Split,
    pub images: Option<ImagePool>,
}

impl GenOptions {
    pub fn new(image_size: usize, split: Split) -> Self {
        Self { image_size, split, images: None }
    }
}

/// Generates one sequence of `len` frames, fully determined by `seed`.
pub fn generate_sequence(seed: u64, len: usize, variant: Variant, opts: &GenOptions) -> Result<VideoSequence> {
    if len < 2 {
        return Err(Error::Config(format!("sequence length {len} < 2")));
    }
    let mut rng = stream_rng(seed, "sequence", 0);
    let agent = match (variant, opts.split) {
        (Variant::VariedAgent, Split::Train) => agent_grid(opts.image_size).choose(&mut rng).cloned().expect("grid"),
        _ => AgentConfig::reference(opts.image_size),
    };
    let background = match variant {
        Variant::VariedBg => {
            let bg_seed = rng.gen::<u64>();
            match &opts.images {
                Some(pool) => {
                    let list = if opts.split == Split::Train { &pool.train } else { &pool.test };
                    let path = &list[(bg_seed % list.len() as u64) as usize];
                    BackgroundSpec::ExternalImage { path: path.to_string_lossy().into_owned(), seed: bg_seed }
                }
                None => BackgroundSpec::ProceduralTexture { seed: bg_seed },
            }
        }
        _ => BackgroundSpec::plain(),
    };
    let initial_angle = rng.gen_range(0.0..360.0);
    let actions: Vec<f64> = (1..len).map(|_| rng.gen_range(0.0..=MAX_ACTION_DEG)).collect();
    render_sequence(&agent, &background, initial_angle, &actions, SequenceMeta::new(seed, variant))
}

/// Renders a sequence starting at `initial_angle` and applying `actions`.
pub fn render_sequence(
    agent: &AgentConfig,
    background: &BackgroundSpec,
    initial_angle: f64,
    actions: &[f64],
    meta: SequenceMeta,
) -> Result<VideoSequence> {
    agent.validate()?;
    let raster = background.raster(agent.image_size)?;
    let mut state = EnvState::new(initial_angle);
    let mut frames = Vec::with_capacity((actions.len() + 1) * agent.image_size * agent.image_size * 3);
    frames.extend_from_slice(&draw_arm(&raster, state.angle, agent).pixels);
    for &u in actions {
        state = step(state, Action { u });
        frames.extend_from_slice(&draw_arm(&raster, state.angle, agent).pixels);
    }
    let meta = SequenceMeta { agent: agent.clone(), background: background.clone(), initial_angle: wrap_degrees(initial_angle), ..meta };
    VideoSequence::new(agent.image_size, actions.len() + 1, frames, Some(actions.to_vec()), meta)
}

/// Per-sequence seed; train and test draw from disjoint index ranges.
pub fn sequence_seed(master: u64, split: Split, index: u64) -> u64 {
    let base = match split {
        Split::Train => 0,
        Split::Test => 1u64 << 40,
    };
    derive_seed(master, "dataset", base + index)
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub variant: Variant,
    pub num_train: usize,
    pub num_test: usize,
    pub seq_len: usize,
    pub image_size: usize,
    pub seed: u64,
    pub background_dir: Option<PathBuf>,
}

/// Generates a dataset and writes it to `out` (manifest + shards).
pub fn generate_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    let images = spec.background_dir.as_deref().map(ImagePool::from_dir).transpose()?;
    let mut writer = DatasetWriter::create(out, spec.image_size, spec.seq_len, spec.variant)?;
    for (split, n) in [(Split::Train, spec.num_train), (Split::Test, spec.num_test)] {
        let opts = GenOptions { image_size: spec.image_size, split, images: images.clone() };
        for i in 0..n {
            let seq = generate_sequence(sequence_seed(spec.seed, split, i as u64), spec.seq_len, spec.variant, &opts)?;
            writer.append(split, &seq)?;
        }
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_wraps() {
        assert_eq!(step(EnvState::new(350.0), Action { u: 20.0 }).angle, 10.0);
        assert_eq!(step(EnvState::new(0.0), Action { u: 0.0 }).angle, 0.0);
        assert_eq!(step(EnvState::new(13.0), Action { u: 27.0 }).angle, 40.0);
        assert_eq!(EnvState::new(-30.0).angle, 330.0);
        assert_eq!(EnvState::new(720.0).angle, 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let opts = GenOptions::new(32, Split::Train);
        let a = generate_sequence(5, 6, Variant::Plain, &opts).unwrap();
        let b = generate_sequence(5, 6, Variant::Plain, &opts).unwrap();
        assert_eq!(a, b);
        let c = generate_sequence(6, 6, Variant::Plain, &opts).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn actions_in_range_and_sized() {
        let opts = GenOptions::new(32, Split::Train);
        for seed in 0..20 {
            let s = generate_sequence(seed, 15, Variant::Plain, &opts).unwrap();
            let acts = s.actions.as_ref().unwrap();
            assert_eq!(acts.len(), 14);
            assert!(acts.iter().all(|u| (0.0..=MAX_ACTION_DEG).contains(u)));
        }
        assert!(generate_sequence(0, 1, Variant::Plain, &opts).is_err());
    }

    #[test]
    fn grid_has_72_agents_excluding_reference() {
        let grid = agent_grid(32);
        assert_eq!(grid.len(), 72);
        let reference = AgentConfig::reference(32);
        assert!(!grid.contains(&reference));
        for a in &grid {
            a.validate().unwrap();
        }
        for a in agent_grid(64) {
            a.validate().unwrap();
        }
    }

    #[test]
    fn varied_agent_constant_within_sequence_and_reference_at_test() {
        let train = GenOptions::new(32, Split::Train);
        let s = generate_sequence(3, 4, Variant::VariedAgent, &train).unwrap();
        assert!(agent_grid(32).contains(&s.meta.agent));
        let test = GenOptions::new(32, Split::Test);
        let t = generate_sequence(3, 4, Variant::VariedAgent, &test).unwrap();
        assert_eq!(t.meta.agent, AgentConfig::reference(32));
    }

    #[test]
    fn variant_names() {
        assert_eq!("varied-bg".parse::<Variant>().unwrap(), Variant::VariedBg);
        assert_eq!("plain".parse::<Variant>().unwrap(), Variant::Plain);
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn seed_ranges_disjoint() {
        let train: std::collections::HashSet<u64> = (0..1000).map(|i| sequence_seed(1, Split::Train, i)).collect();
        assert!((0..1000).all(|i| !train.contains(&sequence_seed(1, Split::Test, i))));
    }
}
