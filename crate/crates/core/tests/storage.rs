//! Dataset shards and checkpoint containers: round trips and corruption.

use std::fs;
use std::path::Path;

use clasp_core::checkpoint::{load_predictor, read_container, save_predictor, write_container, PredictorMeta};
use clasp_core::composer::TrainMode;
use clasp_core::dataio::{Dataset, DatasetWriter, SequenceMeta, Split, VideoSequence};
use clasp_core::env::Variant;
use clasp_core::model::{ModelConfig, Predictor};
use clasp_core::Error;
use clasp_autodiff::Tensor;
use proptest::prelude::*;

fn write(dir: &Path, seqs: &[(Split, VideoSequence)], size: usize, len: usize) {
    let mut w = DatasetWriter::create(dir, size, len, Variant::Plain).unwrap();
    for (s, q) in seqs {
        w.append(*s, q).unwrap();
    }
    w.finish().unwrap();
}

fn sequence(size: usize, len: usize, seed: u64, labeled: bool) -> VideoSequence {
    let frames = (0..len * size * size * 3).map(|i| ((i as u64 * 31 + seed * 7) % 251) as u8).collect();
    let actions = labeled.then(|| (0..len - 1).map(|i| (i as f64 * 3.7 + seed as f64) % 40.0).collect());
    VideoSequence::new(size, len, frames, actions, SequenceMeta::new(seed, Variant::Plain)).unwrap()
}

fn shard_path(dir: &Path) -> std::path::PathBuf {
    dir.join(&Dataset::open(dir).unwrap().manifest().shards[0].name)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_round_trips(
        size in 2usize..6,
        len in 2usize..6,
        labels in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..6),
        pixels in proptest::collection::vec(any::<u8>(), 600),
        actions in proptest::collection::vec(0.0f64..40.0, 5),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let n = len * size * size * 3;
        let seqs: Vec<(Split, VideoSequence)> = labels.iter().enumerate().map(|(i, &(test, labeled))| {
            let frames = pixels.iter().cycle().skip(i).take(n).copied().collect();
            let acts = labeled.then(|| actions[..len - 1].to_vec());
            let split = if test { Split::Test } else { Split::Train };
            (split, VideoSequence::new(size, len, frames, acts, SequenceMeta::new(i as u64, Variant::Plain)).unwrap())
        }).collect();
        write(dir.path(), &seqs, size, len);
        let ds = Dataset::open(dir.path()).unwrap();
        ds.verify().unwrap();
        for split in [Split::Train, Split::Test] {
            let want: Vec<&VideoSequence> = seqs.iter().filter(|(s, _)| *s == split).map(|(_, q)| q).collect();
            let got = ds.load(split).unwrap();
            prop_assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(want) {
                prop_assert_eq!(g, w);
            }
        }
    }
}

#[test]
fn flipped_byte_is_a_checksum_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &[(Split::Train, sequence(4, 3, 1, true)), (Split::Train, sequence(4, 3, 2, false))], 4, 3);
    let path = shard_path(dir.path());
    let mut bytes = fs::read(&path).unwrap();
    bytes[5] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(matches!(ds.verify(), Err(Error::Checksum { .. })));
    assert!(matches!(ds.read_sequence(Split::Train, 0), Err(Error::Checksum { .. })));
    // the untouched record still reads
    assert_eq!(ds.read_sequence(Split::Train, 1).unwrap(), sequence(4, 3, 2, false));
}

#[test]
fn truncated_shard_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &[(Split::Test, sequence(4, 3, 1, true))], 4, 3);
    let path = shard_path(dir.path());
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(matches!(ds.verify(), Err(Error::Format(_))));
    assert!(matches!(ds.read_sequence(Split::Test, 0), Err(Error::Format(_))));
}

#[test]
fn missing_manifest_and_bad_index() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::open(dir.path()), Err(Error::MissingArtifact(_))));
    write(dir.path(), &[(Split::Train, sequence(4, 3, 1, false))], 4, 3);
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(matches!(ds.read_sequence(Split::Train, 1), Err(Error::IndexOutOfRange { index: 1, len: 1 })));
}

fn small() -> ModelConfig {
    let mut c = ModelConfig::new(16, TrainMode::Clasp);
    c.conv_channels = vec![4, 8];
    c.enc_dim = 8;
    c.hidden = 8;
    c.infer_hidden = vec![8];
    c.comp_hidden = vec![8];
    c
}

fn meta(cfg: &ModelConfig) -> PredictorMeta {
    PredictorMeta { config: cfg.clone(), step: 17, seed: 4, dataset: Some("abc".into()), adam: None }
}

#[test]
fn predictor_checkpoint_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let p = Predictor::<f32>::new(small(), 21).unwrap();
    save_predictor(&path, &p, None, meta(&p.cfg)).unwrap();
    let ck = load_predictor(&path).unwrap();
    assert_eq!(ck.predictor.checksum(), p.checksum());
    assert_eq!(ck.meta.step, 17);
    assert_eq!(ck.meta.dataset.as_deref(), Some("abc"));
    assert!(ck.adam.is_none());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let p = Predictor::<f32>::new(small(), 21).unwrap();
    save_predictor(&path, &p, None, meta(&p.cfg)).unwrap();
    let good = fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_predictor(&path), Err(Error::Checksum { .. })));

    fs::write(&path, &good[..good.len() - 4]).unwrap();
    assert!(load_predictor(&path).is_err());

    fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_predictor(&path), Err(Error::Format(_))));

    fs::remove_file(&path).unwrap();
    assert!(matches!(load_predictor(&path), Err(Error::MissingArtifact(_))));
}

#[test]
fn container_kind_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let t = Tensor::new(&[2, 2], vec![1.0f32, -2.0, 3.5, 0.0]).unwrap();
    write_container(&path, "grounding", serde_json::json!({"x": 1}), &[("w".into(), &t)]).unwrap();
    let mut c = read_container(&path, "grounding").unwrap();
    assert_eq!(c.meta["x"], 1);
    assert_eq!(c.take("w").unwrap().data(), t.data());
    assert!(matches!(read_container(&path, "predictor"), Err(Error::Config(_))));
}
