//! Subcommand implementations. Each writes only inside its run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use clasp_core::checkpoint::load_predictor;
use clasp_core::composer::TrainMode;
use clasp_core::dataio::{labeled_subset, Dataset, Split, VideoSequence};
use clasp_core::env::{generate_dataset, DatasetSpec, EnvState, Frame, Variant};
use clasp_core::evalkit::pca::PcaResult;
use clasp_core::evalkit::plots::{lines_svg, save_frame_grid, scatter_svg};
use clasp_core::evalkit::report::EvalReport;
use clasp_core::evalkit::studies::{self, LatentPca};
use clasp_core::fsutil::write_atomic;
use clasp_core::grounding::{fit_grounding, ActionInterface, GroundingConfig, GroundingMaps};
use clasp_core::model::{ModelConfig, Predictor, ReconReduction};
use clasp_core::planner::{CostKind, Episode, PlanConfig, PlanResult};
use clasp_core::train::{RunFiles, TrainConfig, Trainer};
use clasp_core::Error;
use serde::Serialize;

use crate::config::{create_run_dir, render_config};

pub struct Ctx {
    pub run_root: PathBuf,
    pub run_dir: Option<PathBuf>,
}

impl Ctx {
    fn open<T: Serialize>(&self, cmd: &str, args: &T) -> Result<PathBuf> {
        let dir = create_run_dir(&self.run_root, self.run_dir.as_deref(), cmd, &render_config(cmd, args)?)?;
        log::info!("run directory {}", dir.display());
        Ok(dir)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn config_error(msg: String) -> anyhow::Error {
    Error::Config(msg).into()
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::open(path)?)
}

fn load_model(path: &Path) -> Result<Predictor<f32>> {
    Ok(load_predictor(path)?.predictor)
}

/// Refuses to evaluate a model on data of a different frame size or length.
fn check_compatible(p: &Predictor<f32>, data: &Dataset) -> Result<()> {
    let m = data.manifest();
    if m.image_size != p.cfg.image_size {
        return Err(config_error(format!("dataset frames are {}px but the checkpoint expects {}px", m.image_size, p.cfg.image_size)));
    }
    if m.seq_len < p.cfg.seq_len {
        return Err(config_error(format!("dataset sequences have {} frames, the checkpoint needs {}", m.seq_len, p.cfg.seq_len)));
    }
    Ok(())
}

fn load_grounding(path: Option<&Path>, p: &Predictor<f32>) -> Result<Option<GroundingMaps>> {
    if p.cfg.mode == TrainMode::Supervised {
        return Ok(None);
    }
    let path = path.ok_or_else(|| Error::MissingArtifact("--grounding is required for an unsupervised checkpoint".into()))?;
    let maps = GroundingMaps::load(path)?;
    maps.check_predictor(p)?;
    Ok(Some(maps))
}

fn test_subset(data: &Dataset, n: Option<usize>) -> Result<Vec<VideoSequence>> {
    let total = data.len(Split::Test);
    let n = n.unwrap_or(total).min(total);
    Ok((0..n).map(|i| data.read_sequence(Split::Test, i)).collect::<clasp_core::Result<_>>()?)
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value = "plain")]
    pub variant: String,
    #[arg(long, default_value_t = 5000)]
    pub num_train: usize,
    #[arg(long, default_value_t = 500)]
    pub num_test: usize,
    #[arg(long, default_value_t = 15)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory of background images (train/ and test/ subfolders) for varied_bg.
    #[arg(long)]
    pub background_dir: Option<PathBuf>,
}

pub fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let dir = ctx.open("gen-data", &a)?;
    let spec = DatasetSpec {
        variant: a.variant.parse()?,
        num_train: a.num_train,
        num_test: a.num_test,
        seq_len: a.seq_len,
        image_size: a.image_size,
        seed: a.seed,
        background_dir: a.background_dir.clone(),
    };
    let out = dir.join("dataset");
    let manifest = generate_dataset(&spec, &out)?;
    println!("dataset {} ({} train / {} test) checksum {}", out.display(), manifest.counts.train, manifest.counts.test, manifest.content_checksum());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long, env = "CLASP_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long, default_value = "clasp")]
    pub mode: String,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    pub beta_z: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub beta_nu: f64,
    /// Ramp the KL weights up from zero over this many steps (0: off).
    #[arg(long, default_value_t = 0)]
    pub kl_warmup: u64,
    #[arg(long, default_value_t = 4)]
    pub comp_chunk: usize,
    #[arg(long, default_value_t = 5)]
    pub cond_frames: usize,
    #[arg(long, default_value_t = 15)]
    pub rollout_frames: usize,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    /// Must match the dataset; checked before training starts.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Conv widths per level, comma-separated (default depends on image size).
    #[arg(long, value_delimiter = ',')]
    pub widths: Vec<usize>,
    #[arg(long, default_value = "sum")]
    pub recon: String,
    #[arg(long)]
    pub skip: bool,
    /// Train only on this many labeled sequences (nested subsets by --label-seed).
    #[arg(long)]
    pub labeled: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub label_seed: u64,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
    #[arg(long, default_value_t = 1000)]
    pub ckpt_every: u64,
}

fn model_config(a: &TrainArgs, image_size: usize) -> Result<ModelConfig> {
    let mode: TrainMode = a.mode.parse()?;
    let mut cfg = ModelConfig::new(image_size, mode);
    if !a.widths.is_empty() {
        cfg.conv_channels = a.widths.clone();
    }
    cfg.beta_z = a.beta_z;
    cfg.beta_nu = a.beta_nu;
    cfg.comp_chunk = a.comp_chunk;
    cfg.cond_frames = a.cond_frames;
    cfg.seq_len = a.rollout_frames;
    cfg.latent_dim = a.latent_dim;
    cfg.skip = a.skip;
    cfg.recon = match a.recon.as_str() {
        "sum" => ReconReduction::Sum,
        "mean" => ReconReduction::Mean,
        other => return Err(config_error(format!("unknown reconstruction reduction `{other}` (sum or mean)"))),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let data = open_dataset(&a.data)?;
    let m = data.manifest();
    if let Some(s) = a.image_size {
        if s != m.image_size {
            return Err(config_error(format!("--image-size {s} but the dataset has {}px frames", m.image_size)));
        }
    }
    let tcfg = TrainConfig { steps: a.steps, batch_size: a.batch_size, lr: a.lr, seed: a.seed, log_every: a.log_every, ckpt_every: a.ckpt_every, kl_warmup: a.kl_warmup };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_predictor(path)?;
            let adam = ck.adam.ok_or_else(|| config_error(format!("{} has no optimiser state to resume", path.display())))?;
            log::info!("resuming from step {}; model options are taken from the checkpoint", ck.meta.step);
            Trainer::resume(ck.predictor, adam, ck.meta.step, tcfg)
        }
        None => Trainer::new(Predictor::new(model_config(&a, m.image_size)?, a.seed)?, tcfg),
    };
    let pcfg = &trainer.predictor.cfg;
    if pcfg.image_size != m.image_size || pcfg.seq_len > m.seq_len {
        return Err(config_error(format!(
            "checkpoint expects {}px x {} frames, dataset has {}px x {}",
            pcfg.image_size, pcfg.seq_len, m.image_size, m.seq_len
        )));
    }
    let dir = ctx.open("train", &a)?;
    let mut seqs = data.load(Split::Train)?;
    if let Some(n) = a.labeled {
        let keep = labeled_subset(seqs.len(), n, a.label_seed)?;
        seqs = keep.into_iter().map(|i| seqs[i].clone()).collect();
    }
    log::info!(
        "training {} ({} parameters) on {} sequences",
        trainer.predictor.cfg.mode,
        trainer.predictor.params.num_scalars(),
        seqs.len()
    );
    let files = RunFiles { checkpoint: dir.join("predictor.ckpt"), metrics: dir.join("metrics.jsonl"), dataset: Some(m.content_checksum()) };
    trainer.run(&seqs, Some(&files))?;
    println!("{}", files.checkpoint.display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct GroundArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = "CLASP_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub labeled: usize,
    #[arg(long, default_value_t = 0)]
    pub label_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GroundingConfig::default().max_steps)]
    pub max_steps: usize,
    #[arg(long, default_value_t = GroundingConfig::default().lr)]
    pub lr: f64,
}

pub fn ground(ctx: &Ctx, a: GroundArgs) -> Result<()> {
    let p = load_model(&a.ckpt)?;
    if p.cfg.mode == TrainMode::Supervised {
        return Err(config_error("a supervised checkpoint embeds actions directly and needs no grounding".into()));
    }
    let data = open_dataset(&a.data)?;
    check_compatible(&p, &data)?;
    let dir = ctx.open("ground", &a)?;
    let idx = labeled_subset(data.len(Split::Train), a.labeled, a.label_seed)?;
    let seqs: Vec<VideoSequence> = idx.iter().map(|&i| data.read_sequence(Split::Train, i)).collect::<clasp_core::Result<_>>()?;
    let refs: Vec<&VideoSequence> = seqs.iter().collect();
    let cfg = GroundingConfig { seed: a.seed, max_steps: a.max_steps, lr: a.lr, ..Default::default() };
    let (maps, report) = fit_grounding(&p, &refs, &cfg)?;
    maps.save(&dir.join("grounding.ckpt"))?;
    write_json(&dir.join("grounding_report.json"), &report)?;
    println!("action error {}  round trip {}  ({} steps)", report.action_error, report.round_trip_error, report.steps);
    println!("{}", dir.join("grounding.ckpt").display());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct EvalPredArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub grounding: Option<PathBuf>,
    #[arg(long, env = "CLASP_DATA_DIR")]
    pub data: PathBuf,
    /// Evaluate on the first N test sequences (default: all).
    #[arg(long)]
    pub num_seqs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn eval_pred(ctx: &Ctx, a: EvalPredArgs) -> Result<()> {
    let p = load_model(&a.ckpt)?;
    let maps = load_grounding(a.grounding.as_deref(), &p)?;
    let data = open_dataset(&a.data)?;
    check_compatible(&p, &data)?;
    let dir = ctx.open("eval-pred", &a)?;
    let iface = ActionInterface::for_predictor(&p, maps.as_ref())?;
    let seqs = test_subset(&data, a.num_seqs)?;
    let refs: Vec<&VideoSequence> = seqs.iter().collect();
    let report = studies::eval_action_conditioned(&p, &iface, &refs, a.seed)?;
    report.save(&dir.join("report.json"))?;
    print!("{}", report.summary());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct TransplantArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub donor_data: PathBuf,
    #[arg(long)]
    pub recipient_data: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    /// Frame strips written for the first N pairs.
    #[arg(long, default_value_t = 4)]
    pub strips: usize,
}

pub fn transplant(ctx: &Ctx, a: TransplantArgs) -> Result<()> {
    let p = load_model(&a.ckpt)?;
    let donors = open_dataset(&a.donor_data)?;
    let recipients = open_dataset(&a.recipient_data)?;
    check_compatible(&p, &donors)?;
    check_compatible(&p, &recipients)?;
    let dir = ctx.open("transplant", &a)?;
    let n = a.pairs.min(donors.len(Split::Test)).min(recipients.len(Split::Test));
    // recipient i receives donor (i + 1) mod n so the two never coincide
    let d: Vec<VideoSequence> = (0..n).map(|i| donors.read_sequence(Split::Test, (i + 1) % n)).collect::<clasp_core::Result<_>>()?;
    let r: Vec<VideoSequence> = (0..n).map(|i| recipients.read_sequence(Split::Test, i)).collect::<clasp_core::Result<_>>()?;
    let pairs: Vec<(&VideoSequence, &VideoSequence)> = d.iter().zip(&r).collect();
    let results = studies::transplant_many(&p, &pairs)?;
    let mut report = EvalReport::new("transplant", &format!("{} -> {}", donors.manifest().variant, recipients.manifest().variant), 0);
    report.checkpoints.insert("predictor".into(), p.checksum());
    report.add_metric("relative_angle_error", results.iter().flat_map(|t| t.errors.iter().copied()).collect());
    report.save(&dir.join("report.json"))?;
    let k = p.cfg.cond_frames;
    for (i, (t, (donor, recipient))) in results.iter().zip(&pairs).take(a.strips).enumerate() {
        let rows = vec![
            (0..p.cfg.seq_len).map(|j| donor.frame(j)).collect(),
            (0..k).map(|j| recipient.frame(j)).chain(t.frames.iter().cloned()).collect(),
        ];
        save_frame_grid(&rows, &dir.join(format!("transplant_{i:03}.png")))?;
    }
    print!("{}", report.summary());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct ServoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub grounding: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long, default_value_t = 5)]
    pub servo_steps: usize,
    #[arg(long, default_value_t = 5)]
    pub horizon: usize,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 3)]
    pub elites: usize,
    #[arg(long, default_value_t = 4)]
    pub iters: usize,
    #[arg(long, default_value = "feature_cosine")]
    pub cost: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seeds of the episodes start here.
    #[arg(long, default_value_t = 1_000_000)]
    pub episode_seed: u64,
    #[arg(long, default_value = "plain")]
    pub variant: String,
    #[arg(long, default_value_t = 4)]
    pub strips: usize,
}

fn plan_config(a: &ServoArgs) -> Result<PlanConfig> {
    let cfg = PlanConfig {
        servo_steps: a.servo_steps,
        horizon: a.horizon,
        samples: a.samples,
        elites: a.elites,
        iters: a.iters,
        cost: a.cost.parse::<CostKind>()?,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Observed poses of an episode above the predicted goal frame of each step.
fn servo_strip(trace: &PlanResult) -> Result<Vec<Vec<Frame>>> {
    let e = &trace.episode;
    let mut observed = vec![e.observe(EnvState::new(e.initial_angle))?];
    let mut predicted = vec![Frame::filled(e.agent.image_size, [0, 0, 0])];
    for s in &trace.steps {
        observed.push(e.observe(EnvState::new(s.angle_after))?);
        predicted.push(s.predicted_goal.clone().unwrap_or_else(|| Frame::filled(e.agent.image_size, [0, 0, 0])));
    }
    observed.push(e.goal_frame()?);
    Ok(vec![observed, predicted])
}

pub fn servo(ctx: &Ctx, a: ServoArgs) -> Result<()> {
    let p = load_model(&a.ckpt)?;
    let maps = load_grounding(a.grounding.as_deref(), &p)?;
    let cfg = plan_config(&a)?;
    let variant: Variant = a.variant.parse()?;
    let dir = ctx.open("servo", &a)?;
    let iface = ActionInterface::for_predictor(&p, maps.as_ref())?;
    let episodes: Vec<Episode> =
        (0..a.episodes as u64).map(|i| Episode::sample(a.episode_seed + i, p.cfg.image_size, cfg.servo_steps, variant)).collect();
    let (report, traces) = studies::servo_study(&p, &iface, &episodes, &cfg, a.seed, p.cfg.mode.name())?;
    let mut lines = String::new();
    for t in &traces {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
    }
    write_atomic(&dir.join("traces.jsonl"), lines.as_bytes())?;
    report.save(&dir.join("report.json"))?;
    for (i, t) in traces.iter().take(a.strips).enumerate() {
        save_frame_grid(&servo_strip(t)?, &dir.join(format!("servo_{i:03}.png")))?;
    }
    print!("{}", report.summary());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct PcaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = "CLASP_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
}

pub fn pca(ctx: &Ctx, a: PcaArgs) -> Result<()> {
    let p = load_model(&a.ckpt)?;
    if p.infer.is_none() {
        return Err(config_error("PCA of inferred latents needs a model with an inference network".into()));
    }
    let data = open_dataset(&a.data)?;
    check_compatible(&p, &data)?;
    let dir = ctx.open("pca", &a)?;
    let per = p.cfg.seq_len - 1;
    let seqs = test_subset(&data, Some(a.points.div_ceil(per)))?;
    let refs: Vec<&VideoSequence> = seqs.iter().collect();
    let result = studies::pca_latents(&p, &refs, a.points)?;
    write_json(&dir.join("pca.json"), &result)?;
    fs::write(dir.join("pca.svg"), pca_figure(&result, p.cfg.mode.name()))?;
    println!("explained variance {:?}", result.pca.ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>());
    println!("rank correlation (PC1, u) {:.4}", result.rank_correlation);
    Ok(())
}

fn pca_figure(r: &LatentPca, label: &str) -> String {
    let PcaResult { ratios, projections, .. } = &r.pca;
    scatter_svg(
        projections,
        &r.actions,
        &format!("{label}: latents on first two components (colour = action)"),
        &format!("PC1 ({:.1}%)", 100.0 * ratios[0]),
        &format!("PC2 ({:.1}%)", 100.0 * ratios.get(1).copied().unwrap_or(0.0)),
    )
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    /// Unsupervised checkpoint whose grounding is refitted per budget.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Supervised checkpoints as BUDGET=PATH (repeatable).
    #[arg(long)]
    pub supervised: Vec<String>,
    #[arg(long, env = "CLASP_DATA_DIR")]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![50, 200, 1000])]
    pub budgets: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub label_seed: u64,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub episode_seed: u64,
    #[arg(long)]
    pub num_seqs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let p = load_model(&a.ckpt)?;
    let data = open_dataset(&a.data)?;
    check_compatible(&p, &data)?;
    let mut sup = Vec::new();
    for spec in &a.supervised {
        let (b, path) = spec.split_once('=').ok_or_else(|| config_error(format!("--supervised expects BUDGET=PATH, got `{spec}`")))?;
        let budget: usize = b.parse().map_err(|_| config_error(format!("bad budget `{b}`")))?;
        let m = load_model(Path::new(path))?;
        if m.cfg.mode != TrainMode::Supervised {
            return Err(config_error(format!("{path} is a {} checkpoint, not supervised", m.cfg.mode)));
        }
        check_compatible(&m, &data)?;
        sup.push((budget, m));
    }
    let dir = ctx.open("sweep", &a)?;
    let train = data.load(Split::Train)?;
    let test = test_subset(&data, a.num_seqs)?;
    let refs: Vec<&VideoSequence> = test.iter().collect();
    let plan = PlanConfig::default();
    let episodes: Vec<Episode> =
        (0..a.episodes as u64).map(|i| Episode::sample(a.episode_seed + i, p.cfg.image_size, plan.servo_steps, Variant::Plain)).collect();
    let sup_refs: Vec<(usize, &Predictor<f32>)> = sup.iter().map(|(b, m)| (*b, m)).collect();
    let report = studies::data_efficiency_sweep(
        &p,
        &sup_refs,
        &train,
        &refs,
        &a.budgets,
        a.label_seed,
        &GroundingConfig { seed: a.seed, ..Default::default() },
        &plan,
        &episodes,
        a.seed,
    )?;
    report.save(&dir.join("report.json"))?;
    fs::write(dir.join("efficiency.svg"), efficiency_figure(&report))?;
    print!("{}", report.summary());
    Ok(())
}

/// Per-model, per-task mean error against label budget.
fn efficiency_figure(r: &EvalReport) -> String {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (name, m) in &r.metrics {
        let mut parts = name.rsplitn(2, '/');
        let (Some(budget), Some(key)) = (parts.next(), parts.next()) else { continue };
        if let Ok(b) = budget.parse::<f64>() {
            series.entry(key.to_string()).or_default().push((b, m.stats.mean));
        }
    }
    let mut xs: Vec<f64> = series.values().flatten().map(|(b, _)| *b).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let lines: Vec<(String, Vec<f64>)> = series
        .into_iter()
        .filter_map(|(k, pts)| {
            let ys: Option<Vec<f64>> = xs.iter().map(|x| pts.iter().find(|(b, _)| b == x).map(|(_, y)| *y)).collect();
            ys.map(|ys| (k, ys))
        })
        .collect();
    lines_svg(&xs, &lines, "Error against labeled sequences", "labeled sequences", "mean angular error (deg)")
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// Run directories or report files to collect.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

fn collect_json(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(Error::MissingArtifact(format!("report input {}", p.display())).into());
        }
    }
    Ok(files)
}

fn table_row(r: &EvalReport, names: &[&str]) -> String {
    let cells: Vec<String> = names.iter().map(|n| r.stats(n).map_or("-".into(), |s| s.to_string())).collect();
    format!("| {} | {} |\n", r.label, cells.join(" | "))
}

pub fn report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let dir = ctx.open("report", &a)?;
    let mut md = String::from("# Results\n");
    let (mut pred, mut servo, mut sweep, mut transplant) = (String::new(), String::new(), String::new(), String::new());
    let mut figures = 0;
    for path in collect_json(&a.inputs)? {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
            r.verify().with_context(|| format!("integrity check of {}", path.display()))?;
            match r.kind.as_str() {
                "action_conditioned" => pred.push_str(&table_row(&r, &["model", "start_state", "random"])),
                "servo" => servo.push_str(&table_row(&r, &["final_distance", "random"])),
                "transplant" => transplant.push_str(&table_row(&r, &["relative_angle_error"])),
                "data_efficiency" => {
                    for (name, m) in &r.metrics {
                        sweep.push_str(&format!("| {name} | {} |\n", m.stats));
                    }
                    figures += 1;
                    fs::write(dir.join(format!("efficiency_{figures}.svg")), efficiency_figure(&r))?;
                }
                _ => {}
            }
        } else if let Ok(p) = serde_json::from_str::<LatentPca>(&text) {
            figures += 1;
            let name = path.parent().and_then(|d| d.file_name()).map_or("pca".into(), |n| n.to_string_lossy().into_owned());
            fs::write(dir.join(format!("pca_{figures}.svg")), pca_figure(&p, &name))?;
            md.push_str(&format!(
                "\nPCA ({name}): first component {:.1}% of variance, rank correlation with action {:.3}\n",
                100.0 * p.pca.ratios[0],
                p.rank_correlation
            ));
        }
    }
    let section = |title: &str, header: &str, body: &str| {
        if body.is_empty() {
            String::new()
        } else {
            format!("\n## {title}\n\n{header}\n{body}")
        }
    };
    md.push_str(&section(
        "Action-conditioned prediction (mean angular error, deg)",
        "| model | prediction | start state | random |\n|---|---|---|---|",
        &pred,
    ));
    md.push_str(&section("Servoing (final distance to goal, deg)", "| model | servo | random |\n|---|---|---|", &servo));
    md.push_str(&section("Transplantation (per-step relative angle error, deg)", "| pair | error |\n|---|---|", &transplant));
    md.push_str(&section("Label efficiency", "| metric | mean ± std |\n|---|---|", &sweep));
    write_atomic(&dir.join("summary.md"), md.as_bytes())?;
    print!("{md}");
    Ok(())
}
