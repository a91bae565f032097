//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `CLASPCK1`, a little-endian `u64` header length,
//! a JSON header, then the concatenated `f32` little-endian payload of every
//! tensor listed in the header. The header carries a SHA-256 of the payload.

use std::path::Path;

use clasp_autodiff::{Adam, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelConfig, Predictor};
use crate::{fsutil, Error, Result};

const MAGIC: &[u8; 8] = b"CLASPCK1";
pub const VERSION: &str = "clasp-ckpt-1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Decoded container: its kind tag, free-form metadata and named tensors.
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Option<Tensor<f32>> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.swap_remove(i).1)
    }
}

pub fn write_container(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 4).sum());
    for (_, t) in tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: VERSION.into(),
        kind: kind.into(),
        meta,
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fsutil::write_atomic(path, &bytes)
}

pub fn read_container(path: &Path, kind: &str) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("no checkpoint at {}", path.display())),
        _ => Error::io(path, e),
    })?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.version != VERSION {
        return Err(bad(&format!("version '{}' (expected '{VERSION}')", header.version)));
    }
    if header.kind != kind {
        return Err(Error::Config(format!("{} holds a {} checkpoint, expected {kind}", path.display(), header.kind)));
    }
    let payload = &bytes[header_end..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Checksum { shard: path.display().to_string() });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let end = off + n * 4;
        if end > payload.len() {
            return Err(bad("truncated payload"));
        }
        let data = payload[off..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
        off = end;
    }
    if off != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Container { kind: header.kind, meta: header.meta, tensors })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Content checksum of the training dataset, when known.
    pub dataset: Option<String>,
    pub adam: Option<AdamMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: Vec<u64>,
}

pub struct PredictorCheckpoint {
    pub predictor: Predictor<f32>,
    pub adam: Option<Adam<f32>>,
    pub meta: PredictorMeta,
}

pub fn save_predictor(path: &Path, p: &Predictor<f32>, adam: Option<&Adam<f32>>, mut meta: PredictorMeta) -> Result<()> {
    meta.config = p.cfg.clone();
    let mut tensors: Vec<(String, &Tensor<f32>)> = p.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    meta.adam = adam.map(|a| {
        let (m, v, steps) = a.state();
        for (i, (m, v)) in m.iter().zip(v).enumerate() {
            let name = p.params.name(clasp_autodiff::ParamId(i));
            if let (Some(m), Some(v)) = (m, v) {
                tensors.push((format!("adam.m/{name}"), m));
                tensors.push((format!("adam.v/{name}"), v));
            }
        }
        AdamMeta { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, steps: steps.to_vec() }
    });
    write_container(path, "predictor", serde_json::to_value(&meta)?, &tensors)
}

pub fn load_predictor(path: &Path) -> Result<PredictorCheckpoint> {
    let mut c = read_container(path, "predictor")?;
    let meta: PredictorMeta = serde_json::from_value(c.meta.clone())?;
    // rebuild the architecture, then overwrite every tensor by name
    let mut predictor = Predictor::<f32>::new(meta.config.clone(), 0)?;
    let mut store = ParamStore::new();
    for (_, name, _) in predictor.params.iter() {
        let t = c.take(name).ok_or_else(|| Error::Format(format!("{}: missing tensor {name}", path.display())))?;
        store.add(name, t);
    }
    predictor.params.load_from(&store)?;
    let adam = match &meta.adam {
        Some(a) => {
            let mut opt = Adam::new(a.lr, a.beta1, a.beta2, a.eps);
            let n = predictor.params.len();
            let (mut ms, mut vs) = (vec![None; n], vec![None; n]);
            for (id, name, _) in predictor.params.iter() {
                ms[id.0] = c.take(&format!("adam.m/{name}"));
                vs[id.0] = c.take(&format!("adam.v/{name}"));
            }
            let mut steps = a.steps.clone();
            steps.resize(n, 0);
            opt.restore(ms, vs, steps);
            Some(opt)
        }
        None => None,
    };
    Ok(PredictorCheckpoint { predictor, adam, meta })
}
