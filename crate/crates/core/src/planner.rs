//! Visual servoing: cross-entropy-method planning over latent sequences,
//! executed as model-predictive control against the reacher.

use std::fmt;
use std::str::FromStr;

use clasp_autodiff::{Graph, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::stack_frames;
use crate::env::{self, render, Action, AgentConfig, BackgroundSpec, EnvState, Frame, Variant, MAX_ACTION_DEG};
use crate::evalkit::angular_error;
use crate::evalkit::detector::detect_angle;
use crate::grounding::ActionInterface;
use crate::model::Predictor;
use crate::rng::{derive_seed, stream_rng};
use crate::svp::{infer_latent, rollout, StepLatent};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Cosine distance between frozen encoder codes.
    FeatureCosine,
    /// Mean squared pixel difference.
    PixelL2,
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature_cosine" | "feature-cosine" | "cosine" => Ok(Self::FeatureCosine),
            "pixel_l2" | "pixel-l2" | "l2" => Ok(Self::PixelL2),
            _ => Err(Error::Config(format!("unknown cost `{s}` (expected feature_cosine or pixel_l2)"))),
        }
    }
}

impl fmt::Display for CostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FeatureCosine => "feature_cosine",
            Self::PixelL2 => "pixel_l2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub servo_steps: usize,
    pub horizon: usize,
    pub samples: usize,
    pub elites: usize,
    pub iters: usize,
    pub cost: CostKind,
    pub min_variance: f64,
    /// Stop once the observed pose is this close to the goal (degrees).
    pub stop_deg: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { servo_steps: 5, horizon: 5, samples: 10, elites: 3, iters: 4, cost: CostKind::FeatureCosine, min_variance: 1e-4, stop_deg: 2.0 }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elites == 0 || self.elites > self.samples {
            return Err(Error::Config(format!("elites {} must be in 1..={}", self.elites, self.samples)));
        }
        if self.iters == 0 || self.horizon == 0 || self.servo_steps == 0 {
            return Err(Error::Config("iters, horizon and servo_steps must be positive".into()));
        }
        if !(self.min_variance > 0.0) {
            return Err(Error::Config("min_variance must be positive".into()));
        }
        Ok(())
    }
}

/// Cost of each predicted frame (`[3, M, S, S]`) against one goal frame.
pub fn batch_cost(p: &Predictor<f32>, kind: CostKind, predicted: &Tensor<f32>, goal: &Frame) -> Result<Vec<f64>> {
    let m = predicted.shape()[1];
    let goal_t = stack_frames(p.cfg.image_size, &[&goal.pixels])?;
    match kind {
        CostKind::PixelL2 => {
            let plane = p.cfg.image_size * p.cfg.image_size;
            let mut cost = vec![0.0; m];
            for (c, gplane) in goal_t.data().chunks(plane).enumerate() {
                for (i, cost) in cost.iter_mut().enumerate() {
                    let off = (c * m + i) * plane;
                    *cost += predicted.data()[off..off + plane].iter().zip(gplane).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>();
                }
            }
            Ok(cost.into_iter().map(|c| c / (3 * plane) as f64).collect())
        }
        CostKind::FeatureCosine => {
            // append the goal as sample m of every channel plane
            let plane = p.cfg.image_size * p.cfg.image_size;
            let both = Tensor::from_fn(&[3, m + 1, p.cfg.image_size, p.cfg.image_size], |i| {
                let (c, n, r) = (i / ((m + 1) * plane), (i / plane) % (m + 1), i % plane);
                if n < m { predicted.data()[(c * m + n) * plane + r] } else { goal_t.data()[c * plane + r] }
            });
            let mut g = Graph::inference();
            let both = g.input(both);
            let enc = p.encode(&mut g, both)?;
            let codes = g.value(enc.code);
            let target: Vec<f64> = codes.row(m).iter().map(|&v| v as f64).collect();
            Ok((0..m).map(|i| cosine_distance(&codes.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>(), &target)).collect())
        }
    }
}

/// `1 - cos`, in [0, 2]. Two zero vectors are at distance 0, one zero vector at 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Cost between two frames.
pub fn frame_cost(p: &Predictor<f32>, kind: CostKind, a: &Frame, goal: &Frame) -> Result<f64> {
    let t = stack_frames(p.cfg.image_size, &[&a.pixels])?;
    Ok(batch_cost(p, kind, &t, goal)?[0])
}

/// Indices of the `k` lowest costs, cheapest first; ties keep index order.
pub fn select_elites(costs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-coordinate mean and standard deviation (unbiased variance, floored).
pub fn fit_diagonal(points: &[&Vec<f64>], min_variance: f64) -> (Vec<f64>, Vec<f64>) {
    let n = points.len();
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let std = (0..d)
        .map(|j| {
            let var = if n > 1 { points.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            var.max(min_variance).sqrt()
        })
        .collect();
    (mean, std)
}

/// One refinement round of the planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CemIteration {
    /// The round's candidates, `[sample][horizon][dim]` in search space.
    pub samples: Vec<Vec<Vec<f64>>>,
    pub costs: Vec<f64>,
    pub elites: Vec<usize>,
    /// Fitted per-timestep Gaussians after this round, `[horizon][dim]`.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct CemPlan {
    /// Lowest-cost sequence of the final round, `[horizon][dim]` in search space.
    pub best: Vec<Vec<f64>>,
    pub best_cost: f64,
    pub best_frame: Frame,
    pub iterations: Vec<CemIteration>,
}

/// Context for planning: the last `K` observations (oldest first) and the
/// `K-1` latents between them.
pub struct PlanContext {
    pub frames: Vec<Frame>,
    pub latents: Vec<Vec<f64>>,
}

/// Builds the conditioning window from the observation history, repeating
/// the earliest frame when fewer than `K` frames exist. Latents between
/// observed frames come from the posterior mean (or, for a supervised model,
/// the executed action's embedding); padded pairs use the zero action.
pub fn plan_context(p: &Predictor<f32>, iface: &ActionInterface, observed: &[Frame], executed: &[f64]) -> Result<PlanContext> {
    let k = p.cfg.cond_frames;
    if observed.is_empty() || executed.len() + 1 != observed.len() {
        return Err(Error::Config(format!("{} observations do not match {} executed actions", observed.len(), executed.len())));
    }
    let pad = k.saturating_sub(observed.len());
    let start = observed.len().saturating_sub(k);
    let frames: Vec<Frame> = std::iter::repeat(observed[0].clone()).take(pad).chain(observed[start..].iter().cloned()).collect();
    // index into `observed` of each window frame (padding maps to 0)
    let src: Vec<usize> = (0..k).map(|i| (start + i).saturating_sub(pad)).collect();
    let mut latents = Vec::with_capacity(k - 1);
    for i in 1..k {
        let (a, b) = (src[i - 1], src[i]);
        let z = match iface {
            ActionInterface::Supervised => {
                let u = if b > a { executed[a] } else { 0.0 };
                iface.actions_to_latents(p, &[u])?.remove(0)
            }
            ActionInterface::Grounded(_) => infer_latent(p, &frames[i].pixels, &frames[i - 1].pixels)?.mean,
        };
        latents.push(z);
    }
    Ok(PlanContext { frames, latents })
}

/// Cross-entropy-method search over `horizon` latents whose rollout from
/// `ctx` ends closest to `goal`.
pub fn cem_plan(
    p: &Predictor<f32>,
    iface: &ActionInterface,
    ctx: &PlanContext,
    goal: &Frame,
    horizon: usize,
    cfg: &PlanConfig,
    rng: &mut impl Rng,
) -> Result<CemPlan> {
    cfg.validate()?;
    let k = p.cfg.cond_frames;
    if ctx.frames.len() != k || ctx.latents.len() + 1 != k {
        return Err(Error::Config(format!("context needs {k} frames and {} latents", k - 1)));
    }
    let m = cfg.samples;
    let dim = iface.search_dim(p);
    let d = p.cfg.latent_dim;
    let frames: Vec<&[u8]> = ctx.frames.iter().flat_map(|f| std::iter::repeat(f.pixels.as_slice()).take(m)).collect();
    let context = stack_frames(p.cfg.image_size, &frames)?;
    let repeat = |z: &[f64]| Tensor::new(&[m, d], (0..m).flat_map(|_| z.iter().map(|&v| v as f32)).collect());
    let mut stream: Vec<StepLatent<f32>> =
        ctx.latents.iter().map(|z| Ok(StepLatent { z: repeat(z)?, indicator: 0 })).collect::<Result<_>>()?;
    let target = k + horizon;

    let mut mean = vec![vec![0.0; dim]; horizon];
    let mut std = vec![vec![1.0; dim]; horizon];
    let mut iterations = Vec::with_capacity(cfg.iters);
    let mut last = None;
    for _ in 0..cfg.iters {
        // samples[i][h] is sample i's point at planning step h
        let samples: Vec<Vec<Vec<f64>>> = (0..m)
            .map(|_| {
                (0..horizon)
                    .map(|h| (0..dim).map(|j| mean[h][j] + std[h][j] * rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        stream.truncate(k - 1);
        for h in 0..horizon {
            let pts: Vec<Vec<f64>> = samples.iter().map(|s| s[h].clone()).collect();
            let zs = iface.search_to_latents(p, &pts)?;
            stream.push(StepLatent { z: Tensor::new(&[m, d], zs.iter().flatten().map(|&v| v as f32).collect())?, indicator: 0 });
        }
        let roll = rollout(p, &context, m, &stream, Some(&[target]))?;
        let costs = batch_cost(p, cfg.cost, &roll.frames, goal)?;
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numerical("non-finite planning cost".into()));
        }
        let elites = select_elites(&costs, cfg.elites);
        for h in 0..horizon {
            let pts: Vec<&Vec<f64>> = elites.iter().map(|&i| &samples[i][h]).collect();
            let (mu, sd) = fit_diagonal(&pts, cfg.min_variance);
            mean[h] = mu;
            std[h] = sd;
        }
        iterations.push(CemIteration { samples: samples.clone(), costs: costs.clone(), elites: elites.clone(), mean: mean.clone(), std: std.clone() });
        last = Some((samples, costs, elites, roll.frames));
    }
    let (samples, costs, elites, frames) = last.expect("at least one iteration");
    let best = elites[0];
    let plane = 3 * p.cfg.image_size * p.cfg.image_size;
    let single = Tensor::from_fn(&[3, 1, p.cfg.image_size, p.cfg.image_size], |i| {
        let (c, r) = (i / (plane / 3), i % (plane / 3));
        frames.data()[(c * m + best) * (plane / 3) + r]
    });
    Ok(CemPlan {
        best: samples[best].clone(),
        best_cost: costs[best],
        best_frame: crate::dataio::unstack_frame(&single, 0),
        iterations,
    })
}

/// A servoing task: start pose and a goal pose reachable in `servo_steps`
/// actions from the data distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub initial_angle: f64,
    pub goal_angle: f64,
    pub agent: AgentConfig,
    pub background: BackgroundSpec,
}

impl Episode {
    /// The test agent is always the reference agent; varied-background
    /// episodes get a procedural texture of their own.
    pub fn sample(seed: u64, image_size: usize, steps: usize, variant: Variant) -> Self {
        let mut rng = stream_rng(seed, "episode", 0);
        let initial_angle = rng.gen_range(0.0..360.0);
        let total: f64 = (0..steps).map(|_| rng.gen_range(0.0..=MAX_ACTION_DEG)).sum();
        let background = match variant {
            Variant::VariedBg => BackgroundSpec::ProceduralTexture { seed: rng.gen() },
            _ => BackgroundSpec::plain(),
        };
        Self {
            seed,
            initial_angle,
            goal_angle: env::wrap_degrees(initial_angle + total),
            agent: AgentConfig::reference(image_size),
            background,
        }
    }

    pub fn goal_frame(&self) -> Result<Frame> {
        render(self.goal_angle, &self.agent, &self.background)
    }

    pub fn observe(&self, state: EnvState) -> Result<Frame> {
        render(state.angle, &self.agent, &self.background)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServoStep {
    pub t: usize,
    pub angle: f64,
    pub horizon: usize,
    pub iterations: Vec<CemIteration>,
    pub best_cost: f64,
    /// First planned point (search space) that was executed.
    pub first: Vec<f64>,
    /// Executed action after clamping to the legal range.
    pub u: f64,
    pub extrapolated: bool,
    pub angle_after: f64,
    #[serde(skip)]
    pub predicted_goal: Option<Frame>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanResult {
    pub episode: Episode,
    pub steps: Vec<ServoStep>,
    pub initial_distance: f64,
    pub final_angle: f64,
    pub final_distance: f64,
    pub stopped_early: bool,
}

/// Whether the observed frame shows the arm within `tol` degrees of the goal frame's.
fn reached(observed: &Frame, goal: &Frame, arm_px: f64, tol: f64) -> bool {
    match (detect_angle(observed, arm_px), detect_angle(goal, arm_px)) {
        (Some(a), Some(b)) => angular_error(a.angle, b.angle) < tol,
        _ => false,
    }
}

/// Model-predictive control: plan, execute the first action, observe, replan.
/// The horizon shrinks to the number of remaining steps, and the loop stops
/// once the detector sees the arm within `stop_deg` of the goal.
pub fn servo(p: &Predictor<f32>, iface: &ActionInterface, episode: &Episode, cfg: &PlanConfig, planner_seed: u64) -> Result<PlanResult> {
    cfg.validate()?;
    let goal = episode.goal_frame()?;
    let arm_px = episode.agent.length_px();
    let mut state = EnvState::new(episode.initial_angle);
    let mut observed = vec![episode.observe(state)?];
    let mut executed = Vec::new();
    let mut steps = Vec::new();
    let mut stopped_early = false;
    let stream = derive_seed(planner_seed, "servo", episode.seed);
    for t in 0..cfg.servo_steps {
        if reached(observed.last().expect("observation"), &goal, arm_px, cfg.stop_deg) {
            stopped_early = true;
            break;
        }
        let horizon = cfg.horizon.min(cfg.servo_steps - t);
        let ctx = plan_context(p, iface, &observed, &executed)?;
        let mut rng = stream_rng(stream, "cem", t as u64);
        let plan = cem_plan(p, iface, &ctx, &goal, horizon, cfg, &mut rng)?;
        let est = iface.search_to_action(&plan.best[0])?;
        let u = est.u.clamp(0.0, MAX_ACTION_DEG);
        let before = state.angle;
        state = env::step(state, Action { u });
        observed.push(episode.observe(state)?);
        executed.push(u);
        steps.push(ServoStep {
            t,
            angle: before,
            horizon,
            iterations: plan.iterations,
            best_cost: plan.best_cost,
            first: plan.best[0].clone(),
            u,
            extrapolated: est.extrapolated || u != est.u,
            angle_after: state.angle,
            predicted_goal: Some(plan.best_frame),
        });
    }
    Ok(PlanResult {
        episode: episode.clone(),
        steps,
        initial_distance: angular_error(episode.initial_angle, episode.goal_angle),
        final_angle: state.angle,
        final_distance: angular_error(state.angle, episode.goal_angle),
        stopped_early,
    })
}

/// Control baseline: `servo_steps` uniformly random actions, ignoring the goal.
pub fn random_control(episode: &Episode, steps: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(derive_seed(seed, "random-control", episode.seed), "actions", 0);
    let mut state = EnvState::new(episode.initial_angle);
    for _ in 0..steps {
        state = env::step(state, Action { u: rng.gen_range(0.0..=MAX_ACTION_DEG) });
    }
    angular_error(state.angle, episode.goal_angle)
}
