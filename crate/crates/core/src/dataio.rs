//! On-disk dataset format, labeled subsets and training batches.
//!
//! A dataset directory holds `manifest.json` plus binary shards
//! `shard-%04d.bin`. Each sequence record in a shard is the raw row-major
//! `u8` frames `[T, H, W, 3]` followed, when labeled, by `T-1` actions as
//! little-endian `f64`. The manifest stores a SHA-256 per shard and a CRC32
//! per record, so single sequences can be read (and checked) without
//! touching the rest of the shard.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use clasp_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{AgentConfig, BackgroundSpec, Frame, Variant};
use crate::rng::stream_rng;
use crate::{fsutil, Error, Result};

pub const FORMAT_VERSION: &str = "clasp-ds-1";
pub const MANIFEST_NAME: &str = "manifest.json";
/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "CLASP_DATA_DIR";

const SEQUENCES_PER_SHARD: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub agent: AgentConfig,
    pub background: BackgroundSpec,
    pub initial_angle: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl SequenceMeta {
    /// Placeholder metadata completed by the renderer.
    pub fn new(seed: u64, variant: Variant) -> Self {
        Self { agent: AgentConfig::reference(32), background: BackgroundSpec::plain(), initial_angle: 0.0, seed, variant }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub size: usize,
    pub len: usize,
    /// `[T, H, W, 3]` row-major.
    pub frames: Vec<u8>,
    /// Relative rotations between consecutive frames (`T-1` entries).
    pub actions: Option<Vec<f64>>,
    pub meta: SequenceMeta,
}

impl VideoSequence {
    pub fn new(size: usize, len: usize, frames: Vec<u8>, actions: Option<Vec<f64>>, meta: SequenceMeta) -> Result<Self> {
        if len < 2 {
            return Err(Error::Format(format!("sequence of {len} frames; need at least 2")));
        }
        if frames.len() != len * size * size * 3 {
            return Err(Error::Format(format!("{} frame bytes for {len} frames of {size}x{size}", frames.len())));
        }
        if let Some(a) = &actions {
            if a.len() != len - 1 {
                return Err(Error::Format(format!("{} actions for {len} frames", a.len())));
            }
        }
        Ok(Self { size, len, frames, actions, meta })
    }

    pub fn frame_bytes(&self) -> usize {
        self.size * self.size * 3
    }

    pub fn frame(&self, t: usize) -> Frame {
        Frame { size: self.size, pixels: self.frame_slice(t).to_vec() }
    }

    /// Raw `[H, W, 3]` bytes of frame `t` (0-based).
    pub fn frame_slice(&self, t: usize) -> &[u8] {
        let n = self.frame_bytes();
        &self.frames[t * n..(t + 1) * n]
    }

    /// True absolute angle of frame `t`, from metadata and actions.
    pub fn true_angle(&self, t: usize) -> Option<f64> {
        let acts = self.actions.as_ref()?;
        Some(crate::env::wrap_degrees(self.meta.initial_angle + acts[..t].iter().sum::<f64>()))
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = self.frames.clone();
        if let Some(a) = &self.actions {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub shard: usize,
    pub offset: u64,
    pub bytes: u64,
    pub crc32: u32,
    pub seed: u64,
    /// Whether actions are stored for this sequence.
    pub labeled: bool,
    pub meta: SequenceMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub image_size: usize,
    pub seq_len: usize,
    pub variant: Variant,
    pub counts: SplitCounts,
    pub shards: Vec<ShardInfo>,
    pub train: Vec<SequenceRecord>,
    pub test: Vec<SequenceRecord>,
}

impl DatasetManifest {
    pub fn records(&self, split: Split) -> &[SequenceRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// SHA-256 over the shard checksums; identifies dataset content.
    pub fn content_checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.shards {
            h.update(s.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("dataset version '{}' (expected '{FORMAT_VERSION}')", self.version)));
        }
        if self.counts.train != self.train.len() || self.counts.test != self.test.len() {
            return Err(Error::Format("manifest counts do not match its records".into()));
        }
        if self.train.iter().chain(&self.test).any(|r| r.shard >= self.shards.len()) {
            return Err(Error::Format("record references a missing shard".into()));
        }
        Ok(())
    }
}

pub fn shard_name(i: usize) -> String {
    format!("shard-{i:04}.bin")
}

/// Writes `sequences` as a single shard file, returning its info and records
/// (with `shard` set to `index`).
pub fn write_shard(dir: &Path, index: usize, sequences: &[(Split, &VideoSequence)]) -> Result<(ShardInfo, Vec<(Split, SequenceRecord)>)> {
    let name = shard_name(index);
    let path = dir.join(&name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let mut offset = 0u64;
    let mut records = Vec::with_capacity(sequences.len());
    for (split, seq) in sequences {
        let bytes = seq.encode();
        hasher.update(&bytes);
        w.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        records.push((
            *split,
            SequenceRecord {
                shard: index,
                offset,
                bytes: bytes.len() as u64,
                crc32: crc32fast::hash(&bytes),
                seed: seq.meta.seed,
                labeled: seq.actions.is_some(),
                meta: seq.meta.clone(),
            },
        ));
        offset += bytes.len() as u64;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok((ShardInfo { name, sha256: hex::encode(hasher.finalize()), bytes: offset }, records))
}

/// Streams sequences into shards; call [`DatasetWriter::finish`] to write the manifest.
pub struct DatasetWriter {
    dir: PathBuf,
    manifest: DatasetManifest,
    pending: Vec<(Split, VideoSequence)>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, image_size: usize, seq_len: usize, variant: Variant) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: DatasetManifest {
                version: FORMAT_VERSION.into(),
                image_size,
                seq_len,
                variant,
                counts: SplitCounts { train: 0, test: 0 },
                shards: Vec::new(),
                train: Vec::new(),
                test: Vec::new(),
            },
            pending: Vec::new(),
        })
    }

    pub fn append(&mut self, split: Split, seq: &VideoSequence) -> Result<()> {
        if seq.size != self.manifest.image_size || seq.len != self.manifest.seq_len {
            return Err(Error::Config(format!(
                "sequence {}x{} with {} frames does not match dataset ({} px, {} frames)",
                seq.size, seq.size, seq.len, self.manifest.image_size, self.manifest.seq_len
            )));
        }
        self.pending.push((split, seq.clone()));
        if self.pending.len() >= SEQUENCES_PER_SHARD {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let refs: Vec<(Split, &VideoSequence)> = self.pending.iter().map(|(s, q)| (*s, q)).collect();
        let (info, records) = write_shard(&self.dir, self.manifest.shards.len(), &refs)?;
        self.manifest.shards.push(info);
        for (split, r) in records {
            match split {
                Split::Train => self.manifest.train.push(r),
                Split::Test => self.manifest.test.push(r),
            }
        }
        self.pending.clear();
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        self.flush()?;
        self.manifest.counts = SplitCounts { train: self.manifest.train.len(), test: self.manifest.test.len() };
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        fsutil::write_atomic(&self.dir.join(MANIFEST_NAME), &json)?;
        Ok(self.manifest)
    }
}

/// Read-only handle on a dataset directory. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("no dataset manifest at {}", path.display())),
            _ => Error::io(&path, e),
        })?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        manifest.validate()?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.records(split).len()
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    /// Recomputes every shard's SHA-256.
    pub fn verify(&self) -> Result<()> {
        for shard in &self.manifest.shards {
            let path = self.root.join(&shard.name);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() as u64 != shard.bytes {
                return Err(Error::Format(format!("{} is truncated ({} of {} bytes)", shard.name, bytes.len(), shard.bytes)));
            }
            if hex::encode(Sha256::digest(&bytes)) != shard.sha256 {
                return Err(Error::Checksum { shard: shard.name.clone() });
            }
        }
        Ok(())
    }

    pub fn read_sequence(&self, split: Split, index: usize) -> Result<VideoSequence> {
        let records = self.manifest.records(split);
        let rec = records.get(index).ok_or(Error::IndexOutOfRange { index, len: records.len() })?;
        let shard = &self.manifest.shards[rec.shard];
        let path = self.root.join(&shard.name);
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start(rec.offset)).map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; rec.bytes as usize];
        f.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format(format!("{} is truncated", shard.name)),
            _ => Error::io(&path, e),
        })?;
        if crc32fast::hash(&buf) != rec.crc32 {
            return Err(Error::Checksum { shard: shard.name.clone() });
        }
        let (size, len) = (self.manifest.image_size, self.manifest.seq_len);
        let frame_bytes = len * size * size * 3;
        let expected = frame_bytes + if rec.labeled { (len - 1) * 8 } else { 0 };
        if buf.len() != expected {
            return Err(Error::Format(format!("record of {} bytes, expected {expected}", buf.len())));
        }
        let actions = rec.labeled.then(|| {
            buf[frame_bytes..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        });
        buf.truncate(frame_bytes);
        VideoSequence::new(size, len, buf, actions, rec.meta.clone())
    }

    pub fn load(&self, split: Split) -> Result<Vec<VideoSequence>> {
        (0..self.len(split)).map(|i| self.read_sequence(split, i)).collect()
    }
}

/// Deterministic subset of `n_labeled` indices out of `total`. Subsets drawn
/// with the same seed are nested: a smaller budget is a prefix of a larger one.
pub fn labeled_subset(total: usize, n_labeled: usize, seed: u64) -> Result<Vec<usize>> {
    if n_labeled > total {
        return Err(Error::Config(format!("{n_labeled} labeled sequences requested from a dataset of {total}")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream_rng(seed, "labeled-subset", 0));
    let mut subset = order[..n_labeled].to_vec();
    subset.sort_unstable();
    Ok(subset)
}

/// Stacks `[H, W, 3]` byte frames into a `[3, N, H, W]` tensor in [0, 1].
pub fn stack_frames(size: usize, frames: &[&[u8]]) -> Result<Tensor<f32>> {
    let plane = size * size;
    let n = frames.len();
    let mut data = vec![0f32; 3 * n * plane];
    for (i, f) in frames.iter().enumerate() {
        if f.len() != plane * 3 {
            return Err(Error::Format(format!("frame of {} bytes, expected {size}x{size}x3", f.len())));
        }
        for (p, px) in f.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(c * n + i) * plane + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(&[3, n, size, size], data)?)
}

/// Inverse of [`stack_frames`] for sample `i`: `[H, W, 3]` bytes.
pub fn unstack_frame(t: &Tensor<f32>, i: usize) -> Frame {
    let s = t.shape();
    let (n, size) = (s[1], s[2]);
    let plane = size * size;
    let mut pixels = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            pixels.push((t.data()[(c * n + i) * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Frame { size, pixels }
}

/// A batch of equal-length clips, frames laid out `[3, T*B, H, W]` with
/// sample `b` of time step `t` at position `t*B + b`, values in [0, 1].
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    /// Per sample, the `T-1` actions inside the clip.
    pub actions: Option<Vec<Vec<f64>>>,
    pub len: usize,
    pub batch: usize,
    pub size: usize,
    /// (sequence index, crop start) per sample.
    pub origin: Vec<(usize, usize)>,
}

impl Batch {
    /// Builds a batch from `(sequence, crop start)` pairs.
    pub fn from_clips(clips: &[(&VideoSequence, usize)], crop_len: usize) -> Result<Self> {
        let b = clips.len();
        let size = clips[0].0.size;
        let mut frames = Vec::with_capacity(crop_len * b);
        for t in 0..crop_len {
            for (seq, start) in clips {
                if seq.size != size || start + crop_len > seq.len {
                    return Err(Error::Format(format!("clip {start}+{crop_len} out of a {}-frame sequence", seq.len)));
                }
                frames.push(seq.frame_slice(start + t));
            }
        }
        let actions = clips
            .iter()
            .map(|(seq, start)| seq.actions.as_ref().map(|a| a[*start..start + crop_len - 1].to_vec()))
            .collect::<Option<Vec<_>>>();
        Ok(Self { images: stack_frames(size, &frames)?, actions, len: crop_len, batch: b, size, origin: Vec::new() })
    }
}

/// Endless stream of shuffled batches; each epoch's order is a function of
/// the seed and epoch number. Clips never cross sequence boundaries.
pub struct BatchIterator<'a> {
    seqs: &'a [VideoSequence],
    batch_size: usize,
    crop_len: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(seqs: &'a [VideoSequence], batch_size: usize, crop_len: usize, seed: u64) -> Result<Self> {
        if seqs.is_empty() || batch_size == 0 {
            return Err(Error::Config("empty dataset or zero batch size".into()));
        }
        if seqs.iter().any(|s| s.len < crop_len) {
            return Err(Error::Config(format!("crop length {crop_len} exceeds a sequence length")));
        }
        Ok(Self { seqs, batch_size, crop_len, rng: stream_rng(seed, "batches", 0), order: Vec::new(), pos: 0 })
    }
}

impl BatchIterator<'_> {
    /// Picks the `(sequence, crop start)` pairs of the next batch.
    fn next_origins(&mut self) -> Vec<(usize, usize)> {
        let mut origin = Vec::with_capacity(self.batch_size);
        while origin.len() < self.batch_size {
            if self.pos >= self.order.len() {
                self.order = (0..self.seqs.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            let start = self.rng.gen_range(0..=self.seqs[i].len - self.crop_len);
            origin.push((i, start));
        }
        origin
    }

    /// Advances past `n` batches without materialising them.
    pub fn skip_batches(&mut self, n: usize) {
        for _ in 0..n {
            self.next_origins();
        }
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let origin = self.next_origins();
        let clips: Vec<(&VideoSequence, usize)> = origin.iter().map(|&(i, s)| (&self.seqs[i], s)).collect();
        let mut batch = Batch::from_clips(&clips, self.crop_len).ok()?;
        batch.origin = origin;
        Some(batch)
    }
}
