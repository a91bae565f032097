//! Training-loop behaviour on small models: ablation equivalence, call
//! accounting, resumption, grounding isolation and loss decrease.

use clasp_autodiff::{Adam, Graph};
use clasp_core::checkpoint::load_predictor;
use clasp_core::composer::{loss_total, TrainMode};
use clasp_core::dataio::{BatchIterator, Split, VideoSequence};
use clasp_core::env::{generate_sequence, GenOptions, Variant};
use clasp_core::grounding::{fit_grounding, GroundingConfig};
use clasp_core::model::{ModelConfig, Predictor, ReconReduction};
use clasp_core::rng::stream_rng;
use clasp_core::svp::{pred_pass, InputSource, Noise};
use clasp_core::train::{RunFiles, TrainConfig, Trainer};

fn small(mode: TrainMode) -> ModelConfig {
    let mut c = ModelConfig::new(16, mode);
    c.conv_channels = vec![4, 8];
    c.enc_dim = 16;
    c.latent_dim = 3;
    c.hidden = 16;
    c.infer_hidden = vec![16];
    c.comp_hidden = vec![8];
    c.embed_hidden = vec![8];
    c.seq_len = 8;
    c.cond_frames = 3;
    c.comp_chunk = 2;
    c.recon = ReconReduction::Sum;
    c
}

fn data(n: usize, len: usize) -> Vec<VideoSequence> {
    let opts = GenOptions::new(16, Split::Train);
    (0..n).map(|i| generate_sequence(100 + i as u64, len, Variant::Plain, &opts).unwrap()).collect()
}

fn tcfg(steps: u64) -> TrainConfig {
    TrainConfig { steps, batch_size: 4, lr: 1e-3, seed: 3, log_every: 1, ckpt_every: 1000, kl_warmup: 0 }
}

fn same_params(a: &Predictor<f32>, b: &Predictor<f32>) -> bool {
    a.params.iter().zip(b.params.iter()).all(|((_, na, ta), (_, nb, tb))| {
        na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    })
}

#[test]
fn ablation_updates_match_plain_prediction_training() {
    let seqs = data(12, 10);
    let steps = 5;
    let mut trainer = Trainer::new(Predictor::new(small(TrainMode::NoComposability), 4).unwrap(), tcfg(steps));
    trainer.run(&seqs, None).unwrap();

    // the same optimisation written directly against the prediction objective
    let mut p = Predictor::<f32>::new(small(TrainMode::NoComposability), 4).unwrap();
    let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
    let mut batches = BatchIterator::new(&seqs, 4, 8, 3).unwrap();
    for s in 0..steps {
        let batch = batches.next().unwrap();
        let noise = Noise::sample(&p, 4, &mut stream_rng(3, "z-noise", s), &mut stream_rng(3, "nu-noise", s));
        let mut g = Graph::new();
        let pass = pred_pass(&p, &mut g, &batch.images, None, 4, &noise).unwrap();
        let grads = g.backward(pass.loss).unwrap();
        adam.step(&mut p.params, &grads);
    }
    assert!(same_params(&trainer.predictor, &p));
}

#[test]
fn core_calls_follow_the_conditioning_and_block_schedule() {
    let seqs = data(4, 8);
    let p = Predictor::<f32>::new(small(TrainMode::Clasp), 1).unwrap();
    let batch = BatchIterator::new(&seqs, 2, 8, 0).unwrap().next().unwrap();
    let noise = Noise::zeros(&p, 2);
    let mut g = Graph::new();
    let out = loss_total(&p, &mut g, &batch.images, None, 2, &noise).unwrap();
    let (k, t, c) = (3, 8, 2);

    let pred = &out.pred.trace;
    assert_eq!(pred.len(), t - 1);
    for (j, s) in pred.iter().enumerate() {
        let target = j + 2;
        assert_eq!(s.target, target);
        assert_eq!(s.indicator, 0);
        let want = if target - 1 <= k { InputSource::GroundTruth(target - 1) } else { InputSource::Predicted(target - 1) };
        assert_eq!(s.source, want);
    }

    let comp = out.comp.as_ref().unwrap();
    assert_eq!(comp.blocks, (t - k) / c);
    assert_eq!(comp.compose_calls, comp.blocks * (c - 1));
    assert_eq!(comp.trace.len(), comp.blocks);
    for (blk, s) in comp.trace.iter().enumerate() {
        let start = k + blk * c;
        assert_eq!((s.target, s.source, s.indicator), (start + c, InputSource::GroundTruth(start), 1));
    }
    assert_eq!(out.trace().iter().filter(|s| s.indicator == 1).count(), comp.blocks);
}

#[test]
fn ablation_loss_equals_prediction_loss() {
    let seqs = data(4, 8);
    let p = Predictor::<f32>::new(small(TrainMode::NoComposability), 2).unwrap();
    let batch = BatchIterator::new(&seqs, 2, 8, 0).unwrap().next().unwrap();
    let noise = Noise::sample(&p, 2, &mut stream_rng(1, "z", 0), &mut stream_rng(1, "nu", 0));
    let mut g = Graph::new();
    let total = loss_total(&p, &mut g, &batch.images, None, 2, &noise).unwrap();
    let mut g2 = Graph::new();
    let pred = pred_pass(&p, &mut g2, &batch.images, None, 2, &noise).unwrap();
    assert_eq!(g.value(total.total).item().to_bits(), g2.value(pred.loss).item().to_bits());
    assert!(total.comp.is_none());
}

#[test]
fn zero_kl_weight_leaves_pure_reconstruction() {
    let seqs = data(4, 8);
    let mut cfg = small(TrainMode::Clasp);
    cfg.beta_z = 0.0;
    cfg.beta_nu = 0.0;
    let p = Predictor::<f32>::new(cfg, 2).unwrap();
    let batch = BatchIterator::new(&seqs, 2, 8, 0).unwrap().next().unwrap();
    let noise = Noise::sample(&p, 2, &mut stream_rng(1, "z", 0), &mut stream_rng(1, "nu", 0));
    let mut g = Graph::new();
    let out = loss_total(&p, &mut g, &batch.images, None, 2, &noise).unwrap();
    let comp = out.comp.as_ref().unwrap();
    let recon = g.value(out.pred.recon).item() + g.value(comp.recon).item();
    assert!((g.value(out.total).item() - recon).abs() <= 1e-6 * recon.abs());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let seqs = data(10, 8);
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(Predictor::new(small(TrainMode::Clasp), 6).unwrap(), tcfg(4));
    straight.run(&seqs, None).unwrap();

    let files = RunFiles { checkpoint: dir.path().join("p.ckpt"), metrics: dir.path().join("m.jsonl"), dataset: None };
    let mut first = Trainer::new(Predictor::new(small(TrainMode::Clasp), 6).unwrap(), tcfg(2));
    first.run(&seqs, Some(&files)).unwrap();
    let ck = load_predictor(&files.checkpoint).unwrap();
    assert_eq!(ck.meta.step, 2);
    let mut resumed = Trainer::resume(ck.predictor, ck.adam.unwrap(), ck.meta.step, tcfg(4));
    resumed.run(&seqs, Some(&files)).unwrap();
    assert!(same_params(&straight.predictor, &resumed.predictor));

    let lines = std::fs::read_to_string(&files.metrics).unwrap();
    let steps: Vec<u64> = lines.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
}

#[test]
fn grounding_leaves_the_predictor_untouched() {
    let seqs = data(8, 8);
    let p = Predictor::<f32>::new(small(TrainMode::Clasp), 8).unwrap();
    let before = p.checksum();
    let refs: Vec<&VideoSequence> = seqs.iter().collect();
    let cfg = GroundingConfig { max_steps: 200, eval_every: 20, ..Default::default() };
    let (maps, report) = fit_grounding(&p, &refs, &cfg).unwrap();
    assert_eq!(p.checksum(), before);
    assert_eq!(maps.predictor_checksum, before);
    maps.check_predictor(&p).unwrap();
    assert_eq!(report.n_pairs, 8 * 7);
    assert!(report.n_val > 0 && report.n_train + report.n_val == report.n_pairs);

    let other = Predictor::<f32>::new(small(TrainMode::Clasp), 9).unwrap();
    assert!(maps.check_predictor(&other).is_err());
}

#[test]
fn training_reduces_loss_on_a_micro_dataset() {
    let seqs = data(50, 8);
    let mut trainer = Trainer::new(Predictor::new(small(TrainMode::Clasp), 5).unwrap(), tcfg(150));
    let hist = trainer.run(&seqs, None).unwrap();
    let mean = |r: &[clasp_core::train::MetricRecord]| r.iter().map(|m| m.loss).sum::<f64>() / r.len() as f64;
    let (early, late) = (mean(&hist[..10]), mean(&hist[hist.len() - 10..]));
    assert!(late < 0.7 * early, "loss {early} -> {late}");
}
