//! Planner mechanics on an untrained model: sampling distribution, elite
//! refits, determinism and servo-loop bookkeeping.

use clasp_core::composer::TrainMode;
use clasp_core::env::{Variant, MAX_ACTION_DEG};
use clasp_core::grounding::ActionInterface;
use clasp_core::model::{ModelConfig, Predictor};
use clasp_core::planner::{cem_plan, fit_diagonal, plan_context, select_elites, servo, Episode, PlanConfig};
use clasp_core::rng::stream_rng;

fn supervised() -> Predictor<f32> {
    let mut c = ModelConfig::new(16, TrainMode::Supervised);
    c.conv_channels = vec![4, 8];
    c.enc_dim = 8;
    c.hidden = 8;
    c.infer_hidden = vec![8];
    c.embed_hidden = vec![8];
    c.cond_frames = 2;
    Predictor::new(c, 12).unwrap()
}

#[test]
fn first_round_samples_the_standard_normal() {
    let p = supervised();
    let iface = ActionInterface::Supervised;
    let ep = Episode::sample(3, 16, 5, Variant::Plain);
    let frame = ep.observe(clasp_core::env::EnvState::new(ep.initial_angle)).unwrap();
    let ctx = plan_context(&p, &iface, &[frame], &[]).unwrap();
    let cfg = PlanConfig { samples: 400, elites: 10, iters: 1, ..Default::default() };
    let plan = cem_plan(&p, &iface, &ctx, &ep.goal_frame().unwrap(), 3, &cfg, &mut stream_rng(8, "cem", 0)).unwrap();
    let draws: Vec<f64> = plan.iterations[0].samples.iter().flatten().flatten().copied().collect();
    let n = draws.len() as f64;
    assert_eq!(draws.len(), 400 * 3);
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // five standard errors of the sample mean and variance of N(0, 1)
    assert!(mean.abs() < 5.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt(), "variance {var}");
}

#[test]
fn each_round_refits_on_its_elites() {
    let p = supervised();
    let iface = ActionInterface::Supervised;
    let ep = Episode::sample(4, 16, 5, Variant::Plain);
    let frames = vec![ep.observe(clasp_core::env::EnvState::new(ep.initial_angle)).unwrap(); 2];
    let ctx = plan_context(&p, &iface, &frames, &[0.0]).unwrap();
    let cfg = PlanConfig::default();
    let plan = cem_plan(&p, &iface, &ctx, &ep.goal_frame().unwrap(), 2, &cfg, &mut stream_rng(2, "cem", 0)).unwrap();
    assert_eq!(plan.iterations.len(), cfg.iters);
    for it in &plan.iterations {
        assert_eq!(it.samples.len(), cfg.samples);
        assert_eq!(it.elites, select_elites(&it.costs, cfg.elites));
        for h in 0..2 {
            let pts: Vec<&Vec<f64>> = it.elites.iter().map(|&i| &it.samples[i][h]).collect();
            let (m, s) = fit_diagonal(&pts, cfg.min_variance);
            assert_eq!((&it.mean[h], &it.std[h]), (&m, &s));
        }
    }
    let last = plan.iterations.last().unwrap();
    assert_eq!(plan.best, last.samples[last.elites[0]]);
    assert_eq!(plan.best_cost, last.costs[last.elites[0]]);
}

#[test]
fn servo_is_deterministic_and_bounded() {
    let p = supervised();
    let iface = ActionInterface::Supervised;
    let cfg = PlanConfig { samples: 6, elites: 2, iters: 2, stop_deg: 0.0, ..Default::default() };
    let ep = Episode::sample(9, 16, cfg.servo_steps, Variant::Plain);
    let a = servo(&p, &iface, &ep, &cfg, 5).unwrap();
    let b = servo(&p, &iface, &ep, &cfg, 5).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.steps.len(), cfg.servo_steps);
    for (t, s) in a.steps.iter().enumerate() {
        assert_eq!(s.t, t);
        assert_eq!(s.horizon, cfg.horizon.min(cfg.servo_steps - t));
        assert!((0.0..=MAX_ACTION_DEG).contains(&s.u));
    }
    assert_eq!(a.final_angle, a.steps.last().unwrap().angle_after);
    let other = servo(&p, &iface, &ep, &cfg, 6).unwrap();
    assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&other).unwrap());
}

#[test]
fn context_must_match_history() {
    let p = supervised();
    let ep = Episode::sample(1, 16, 5, Variant::Plain);
    let f = ep.goal_frame().unwrap();
    assert!(plan_context(&p, &ActionInterface::Supervised, &[f.clone()], &[3.0]).is_err());
    assert!(plan_context(&p, &ActionInterface::Supervised, &[], &[]).is_err());
}

#[test]
fn goal_frame_costs_nothing() {
    use clasp_core::dataio::stack_frames;
    use clasp_core::planner::{batch_cost, CostKind};
    let p = supervised();
    let ep = Episode::sample(2, 16, 5, Variant::Plain);
    let goal = ep.goal_frame().unwrap();
    let away = ep.observe(clasp_core::env::EnvState::new(ep.goal_angle + 90.0)).unwrap();
    let predicted = stack_frames(16, &[&away.pixels, &goal.pixels]).unwrap();
    for kind in [CostKind::FeatureCosine, CostKind::PixelL2] {
        let c = batch_cost(&p, kind, &predicted, &goal).unwrap();
        assert!(c[1].abs() < 1e-6, "{kind}: {c:?}");
        assert!(c[0] > c[1], "{kind}: {c:?}");
    }
}
