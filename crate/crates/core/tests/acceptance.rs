//! Acceptance suite. Each test checks one criterion at its pinned tolerance
//! and prints a single `PASS`/`FAIL` line.
//!
//! Criteria 3 to 6 need trained models. They are built on first use under
//! `CLASP_ACCEPT_DIR` (default `target/acceptance`) and reused afterwards;
//! building them from scratch takes several CPU hours. Interrupted training
//! resumes from its last checkpoint. Those four tests are ignored by default:
//! `cargo test --release --test acceptance -- --include-ignored`.

mod common;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use clasp_core::checkpoint::load_predictor;
use clasp_core::composer::TrainMode;
use clasp_core::dataio::{labeled_subset, Dataset, DatasetWriter, SequenceMeta, Split, VideoSequence};
use clasp_core::env::{generate_dataset, render, AgentConfig, BackgroundSpec, DatasetSpec, Variant};
use clasp_core::evalkit::report::EvalReport;
use clasp_core::evalkit::studies::{data_efficiency_sweep, eval_action_conditioned, pca_latents, servo_study, transplant_study};
use clasp_core::evalkit::{angular_error, detect_angle, signed_angle_diff};
use clasp_core::grounding::{fit_grounding, ActionInterface, GroundingConfig, GroundingMaps, GroundingReport};
use clasp_core::model::latent::GaussianLatent;
use clasp_core::model::{ModelConfig, Predictor};
use clasp_core::planner::{select_elites, Episode, PlanConfig};
use clasp_core::rng::stream_rng;
use clasp_core::train::{RunFiles, TrainConfig, Trainer};
use rand::Rng;

// Criterion 1
const UNIT_BUDGET: Duration = Duration::from_secs(5 * 60);
const DETECTOR_RENDERS: usize = 1000;
const DETECTOR_MAX_ERROR_DEG: f64 = 10.0;
// Criterion 2
const GRAD_BUDGET: Duration = Duration::from_secs(10 * 60);
const GRAD_REL_TOL: f64 = 1e-3;
// Criterion 3
const NUM_TRAIN: usize = 5000;
const NUM_TEST: usize = 500;
const SEQ_LEN: usize = 15;
const IMAGE_SIZE: usize = 32;
const GROUNDING_LABELS: usize = 1000;
const PRED_MAX_DEG: f64 = 8.0;
const ABLATION_MIN_RATIO: f64 = 2.0;
const PCA_POINTS: usize = 1000;
const PC1_MIN_SHARE: f64 = 0.90;
const PC1_MIN_RANK_CORR: f64 = 0.95;
const ROUND_TRIP_MAX_DEG: f64 = 2.0;
// Criterion 4
const EPISODES: usize = 50;
const EPISODE_SEED: u64 = 1_000_000;
const SERVO_BUDGET: Duration = Duration::from_secs(30 * 60);
const SERVO_MAX_DEG: f64 = 6.0;
const RANDOM_MIN_RATIO: f64 = 3.0;
// Criterion 5
const BUDGETS: [usize; 3] = [50, 200, 1000];
const SWEEP_TEST_SEQS: usize = 200;
const CLASP_MAX_SPREAD: f64 = 2.0;
const SUPERVISED_MIN_RATIO: f64 = 3.0;
// Criterion 6
const VARIANT_SERVO_MAX_DEG: f64 = 8.0;
/// Twice the detector's per-frame tolerance.
const TRANSPLANT_MAX_DEG: f64 = 2.0 * 5.0;
const TRANSPLANT_PAIRS: usize = 50;

const DATA_SEED: u64 = 1;
const EVAL_SEED: u64 = 0;

fn verdict(id: &str, name: &str, pass: bool, detail: impl Display) -> bool {
    println!("criterion {id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn artifacts() -> PathBuf {
    let dir = std::env::var_os("CLASP_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Serialises artifact construction across the tests of this binary.
static BUILD: Mutex<()> = Mutex::new(());

fn dataset(variant: Variant) -> Dataset {
    let _guard = BUILD.lock().unwrap_or_else(|e| e.into_inner());
    let dir = artifacts().join(format!("data-{variant}"));
    if Dataset::open(&dir).is_err() {
        let spec = DatasetSpec {
            variant,
            num_train: NUM_TRAIN,
            num_test: NUM_TEST,
            seq_len: SEQ_LEN,
            image_size: IMAGE_SIZE,
            seed: DATA_SEED,
            background_dir: None,
        };
        generate_dataset(&spec, &dir).unwrap();
    }
    Dataset::open(&dir).unwrap()
}

/// Trains (or resumes, or loads) a predictor with the default recipe.
fn model(name: &str, mode: TrainMode, variant: Variant, labeled: Option<usize>) -> Predictor<f32> {
    let data = dataset(variant);
    let _guard = BUILD.lock().unwrap_or_else(|e| e.into_inner());
    let dir = artifacts();
    let files = RunFiles { checkpoint: dir.join(format!("{name}.ckpt")), metrics: dir.join(format!("{name}.jsonl")), dataset: None };
    let cfg = TrainConfig::default();
    let mut trainer = match load_predictor(&files.checkpoint) {
        Ok(ck) if ck.meta.step >= cfg.steps => return ck.predictor,
        Ok(ck) => Trainer::resume(ck.predictor, ck.adam.expect("optimiser state"), ck.meta.step, cfg),
        Err(_) => Trainer::new(Predictor::new(ModelConfig::new(IMAGE_SIZE, mode), cfg.seed).unwrap(), cfg),
    };
    let train = data.load(Split::Train).unwrap();
    let train = match labeled {
        Some(n) => labeled_subset(train.len(), n, 0).unwrap().into_iter().map(|i| train[i].clone()).collect(),
        None => train,
    };
    eprintln!("training {name} from step {} ({} sequences)", trainer.step, train.len());
    trainer.run(&train, Some(&files)).unwrap();
    trainer.predictor
}

fn grounding(name: &str, p: &Predictor<f32>, variant: Variant, labels: usize) -> (GroundingMaps, GroundingReport) {
    let train = dataset(variant).load(Split::Train).unwrap();
    let _guard = BUILD.lock().unwrap_or_else(|e| e.into_inner());
    let dir = artifacts();
    let (maps_path, report_path) = (dir.join(format!("{name}.grounding")), dir.join(format!("{name}.grounding.json")));
    if let (Ok(maps), Ok(text)) = (GroundingMaps::load(&maps_path), std::fs::read_to_string(&report_path)) {
        if maps.check_predictor(p).is_ok() {
            return (maps, serde_json::from_str(&text).unwrap());
        }
    }
    let labeled: Vec<&VideoSequence> = labeled_subset(train.len(), labels, 0).unwrap().into_iter().map(|i| &train[i]).collect();
    let (maps, report) = fit_grounding(p, &labeled, &GroundingConfig::default()).unwrap();
    maps.save(&maps_path).unwrap();
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    (maps, report)
}

fn test_split(variant: Variant, n: usize) -> Vec<VideoSequence> {
    let data = dataset(variant);
    (0..n.min(data.len(Split::Test))).map(|i| data.read_sequence(Split::Test, i).unwrap()).collect()
}

fn episodes(variant: Variant) -> Vec<Episode> {
    (0..EPISODES as u64).map(|i| Episode::sample(EPISODE_SEED + i, IMAGE_SIZE, PlanConfig::default().servo_steps, variant)).collect()
}

fn save_report(r: &EvalReport, name: &str) {
    r.save(&artifacts().join(format!("{name}.report.json"))).unwrap();
}

#[test]
fn criterion_1_unit_and_property_checks() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    // closed-form divergence to the standard normal
    let kl = |m: f64, s: f64| GaussianLatent::new(vec![m], vec![s]).unwrap().kl_to_prior();
    check(kl(0.0, 1.0) == 0.0, "KL at the prior");
    check((kl(1.0, 1.0) - 0.5).abs() < 1e-12, "KL of a unit shift");
    check((kl(0.0, 2.0) - (4.0 - 1.0 - 4f64.ln()) / 2.0).abs() < 1e-12, "KL of a doubled scale");

    // circular metric
    let mut rng = stream_rng(11, "acceptance-angles", 0);
    for _ in 0..10_000 {
        let (a, b, c): (f64, f64, f64) = (rng.gen_range(-720.0..720.0), rng.gen_range(-720.0..720.0), rng.gen_range(-720.0..720.0));
        let d = angular_error(a, b);
        let ok = (0.0..=180.0).contains(&d)
            && (d - angular_error(b, a)).abs() < 1e-9
            && d <= angular_error(a, c) + angular_error(c, b) + 1e-9
            && (signed_angle_diff(a, b).abs() - d).abs() < 1e-9;
        if !ok {
            check(false, &format!("circular metric at ({a}, {b}, {c})"));
            break;
        }
    }

    // elite selection picks exactly the cheapest samples
    for trial in 0..200 {
        let costs: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|&i, &j| costs[i].total_cmp(&costs[j]));
        if select_elites(&costs, 3) != order[..3] {
            check(false, &format!("elite selection, trial {trial}"));
            break;
        }
    }

    // reparameterisation: zero noise gives the mean, noise scales by the stddev
    let lat = GaussianLatent::from_log_std(vec![0.5, -1.0], &[0.0, 2f64.ln()]).unwrap();
    check(lat.sample(&[0.0, 0.0]) == vec![0.5, -1.0], "reparameterised sample at zero noise");
    check(lat.sample(&[1.0, -1.0]) == vec![1.5, -3.0], "reparameterised sample at unit noise");

    // dataset round trip is bit-exact
    let dir = tempfile::tempdir().unwrap();
    let size = 8;
    let seqs: Vec<VideoSequence> = (0..4u64)
        .map(|s| {
            let frames = (0..3 * size * size * 3).map(|_| rng.gen()).collect();
            let acts = (s % 2 == 0).then(|| (0..2).map(|_| rng.gen_range(0.0..40.0)).collect());
            VideoSequence::new(size, 3, frames, acts, SequenceMeta::new(s, Variant::Plain)).unwrap()
        })
        .collect();
    let mut w = DatasetWriter::create(dir.path(), size, 3, Variant::Plain).unwrap();
    for s in &seqs {
        w.append(Split::Train, s).unwrap();
    }
    w.finish().unwrap();
    let back = Dataset::open(dir.path()).unwrap().load(Split::Train).unwrap();
    check(back == seqs, "dataset round trip");

    // detector on random renders of the reference agent
    let agent = AgentConfig::reference(IMAGE_SIZE);
    let mut worst: f64 = 0.0;
    for _ in 0..DETECTOR_RENDERS {
        let a: f64 = rng.gen_range(0.0..360.0);
        let frame = render(a, &agent, &BackgroundSpec::plain()).unwrap();
        worst = worst.max(detect_angle(&frame, agent.length_px()).map_or(180.0, |e| angular_error(e.angle, a)));
    }
    check(worst <= DETECTOR_MAX_ERROR_DEG, &format!("detector max error {worst:.2}"));

    let elapsed = start.elapsed();
    check(elapsed <= UNIT_BUDGET, "runtime");
    let pass = verdict(
        "1",
        "unit and property checks",
        failures.is_empty(),
        format!("detector max error {worst:.2} deg (<= {DETECTOR_MAX_ERROR_DEG}), {:.1}s; failures: {failures:?}", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let start = Instant::now();
    let (n_pred, w_pred, at_pred) = common::check(TrainMode::NoComposability, false);
    let (n_total, w_total, at_total) = common::check(TrainMode::Clasp, true);
    let elapsed = start.elapsed();
    let pass = w_pred <= GRAD_REL_TOL && w_total <= GRAD_REL_TOL && n_pred > 0 && n_total > 0 && elapsed <= GRAD_BUDGET;
    let pass = verdict(
        "2",
        "gradient correctness",
        pass,
        format!(
            "worst relative error {w_pred:.2e} on prediction ({n_pred} entries, at {at_pred}), {w_total:.2e} on total ({n_total} entries, at {at_total}), tolerance {GRAD_REL_TOL:e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains desk-scale models; run with --ignored"]
fn criterion_3_desk_scale_training() {
    let clasp = model("clasp-plain", TrainMode::Clasp, Variant::Plain, None);
    let ablation = model("nocomp-plain", TrainMode::NoComposability, Variant::Plain, None);
    let test = test_split(Variant::Plain, NUM_TEST);
    let refs: Vec<&VideoSequence> = test.iter().collect();

    let (maps, fit) = grounding("clasp-plain", &clasp, Variant::Plain, GROUNDING_LABELS);
    let (ab_maps, _) = grounding("nocomp-plain", &ablation, Variant::Plain, GROUNDING_LABELS);
    let ours = eval_action_conditioned(&clasp, &ActionInterface::Grounded(&maps), &refs, EVAL_SEED).unwrap();
    let theirs = eval_action_conditioned(&ablation, &ActionInterface::Grounded(&ab_maps), &refs, EVAL_SEED).unwrap();
    save_report(&ours, "pred-clasp");
    save_report(&theirs, "pred-nocomp");
    let (e_ours, e_theirs) = (ours.stats("model").unwrap().mean, theirs.stats("model").unwrap().mean);
    let a = verdict(
        "3a",
        "action-conditioned prediction",
        e_ours <= PRED_MAX_DEG && e_theirs >= ABLATION_MIN_RATIO * e_ours,
        format!(
            "clasp {} deg (<= {PRED_MAX_DEG}), ablation {} deg (ratio {:.2}, >= {ABLATION_MIN_RATIO})",
            ours.stats("model").unwrap(),
            theirs.stats("model").unwrap(),
            e_theirs / e_ours
        ),
    );

    let pca = pca_latents(&clasp, &refs, PCA_POINTS).unwrap();
    let share = pca.pca.ratios[0];
    let b = verdict(
        "3b",
        "latent structure",
        share >= PC1_MIN_SHARE && pca.rank_correlation.abs() >= PC1_MIN_RANK_CORR,
        format!(
            "first component {:.1}% of variance (>= {:.0}%), rank correlation {:.3} (|rho| >= {PC1_MIN_RANK_CORR})",
            100.0 * share,
            100.0 * PC1_MIN_SHARE,
            pca.rank_correlation
        ),
    );

    let c = verdict(
        "3c",
        "grounding round trip",
        fit.round_trip_error.mean <= ROUND_TRIP_MAX_DEG,
        format!("{} deg on held-out actions (<= {ROUND_TRIP_MAX_DEG}), {GROUNDING_LABELS} labeled sequences", fit.round_trip_error),
    );
    assert!(a && b && c);
}

#[test]
#[ignore = "trains desk-scale models; run with --ignored"]
fn criterion_4_servoing() {
    let clasp = model("clasp-plain", TrainMode::Clasp, Variant::Plain, None);
    let (maps, _) = grounding("clasp-plain", &clasp, Variant::Plain, GROUNDING_LABELS);
    let start = Instant::now();
    let (r, _) = servo_study(&clasp, &ActionInterface::Grounded(&maps), &episodes(Variant::Plain), &PlanConfig::default(), EVAL_SEED, "clasp")
        .unwrap();
    let elapsed = start.elapsed();
    save_report(&r, "servo-clasp");
    let (ours, random) = (r.stats("final_distance").unwrap(), r.stats("random").unwrap());
    let pass = verdict(
        "4",
        "visual servoing",
        ours.mean <= SERVO_MAX_DEG && random.mean >= RANDOM_MIN_RATIO * ours.mean && elapsed <= SERVO_BUDGET,
        format!(
            "final distance {ours} deg (<= {SERVO_MAX_DEG}), random {random} deg (ratio {:.2}, >= {RANDOM_MIN_RATIO}), {EPISODES} episodes in {:.0}s",
            random.mean / ours.mean,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    max / min
}

#[test]
#[ignore = "trains desk-scale models; run with --ignored"]
fn criterion_5_data_efficiency() {
    let clasp = model("clasp-plain", TrainMode::Clasp, Variant::Plain, None);
    let supervised: Vec<(usize, Predictor<f32>)> =
        BUDGETS.iter().map(|&b| (b, model(&format!("supervised-{b}"), TrainMode::Supervised, Variant::Plain, Some(b)))).collect();
    let sup_refs: Vec<(usize, &Predictor<f32>)> = supervised.iter().map(|(b, p)| (*b, p)).collect();
    let train = dataset(Variant::Plain).load(Split::Train).unwrap();
    let test = test_split(Variant::Plain, SWEEP_TEST_SEQS);
    let refs: Vec<&VideoSequence> = test.iter().collect();
    let r = data_efficiency_sweep(
        &clasp,
        &sup_refs,
        &train,
        &refs,
        &BUDGETS,
        0,
        &GroundingConfig::default(),
        &PlanConfig::default(),
        &episodes(Variant::Plain),
        EVAL_SEED,
    )
    .unwrap();
    save_report(&r, "sweep");
    let mean = |name: String| r.stats(&name).unwrap().mean;
    let clasp_servo: Vec<f64> = BUDGETS.iter().map(|b| mean(format!("clasp/servo/{b}"))).collect();
    let clasp_pred: Vec<f64> = BUDGETS.iter().map(|b| mean(format!("clasp/pred/{b}"))).collect();
    let sup_servo: Vec<f64> = BUDGETS.iter().map(|b| mean(format!("supervised/servo/{b}"))).collect();
    let sup_ratio = sup_servo[0] / sup_servo[BUDGETS.len() - 1];
    let pass = verdict(
        "5",
        "data efficiency",
        spread(&clasp_servo) <= CLASP_MAX_SPREAD && spread(&clasp_pred) <= CLASP_MAX_SPREAD && sup_ratio >= SUPERVISED_MIN_RATIO,
        format!(
            "clasp servo {clasp_servo:.2?} (spread {:.2}), clasp prediction {clasp_pred:.2?} (spread {:.2}), both <= {CLASP_MAX_SPREAD}; supervised servo {sup_servo:.2?} (smallest/largest {sup_ratio:.2}, >= {SUPERVISED_MIN_RATIO})",
            spread(&clasp_servo),
            spread(&clasp_pred)
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "trains desk-scale models; run with --ignored"]
fn criterion_6_robustness_variants() {
    let plain_test = test_split(Variant::Plain, TRANSPLANT_PAIRS);
    let mut all = true;
    for variant in [Variant::VariedBg, Variant::VariedAgent] {
        let name = format!("clasp-{variant}");
        let p = model(&name, TrainMode::Clasp, variant, None);
        let (maps, _) = grounding(&name, &p, variant, GROUNDING_LABELS);
        let (r, _) = servo_study(&p, &ActionInterface::Grounded(&maps), &episodes(variant), &PlanConfig::default(), EVAL_SEED, &name).unwrap();
        save_report(&r, &format!("servo-{name}"));
        let servo = r.stats("final_distance").unwrap();

        // motion from plain sequences replayed in the variant's scenes
        let recipients = test_split(variant, TRANSPLANT_PAIRS);
        let pairs: Vec<(&VideoSequence, &VideoSequence)> = plain_test.iter().zip(&recipients).collect();
        let t = transplant_study(&p, &pairs, &name).unwrap();
        save_report(&t, &format!("transplant-{name}"));
        let moved = t.stats("relative_angle_error").unwrap();

        all &= verdict(
            &format!("6/{variant}"),
            "robustness",
            servo.mean <= VARIANT_SERVO_MAX_DEG && moved.mean <= TRANSPLANT_MAX_DEG,
            format!("servo {servo} deg (<= {VARIANT_SERVO_MAX_DEG}), transplanted relative angles {moved} deg (<= {TRANSPLANT_MAX_DEG})"),
        );
    }
    assert!(all);
}
