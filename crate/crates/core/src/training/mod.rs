//! View sampling, the capacity curriculum, synthetic data and the training loop.

mod sampling;
mod schedule;
mod synthetic;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use sampling::{sample_views, split_subsets, SampleSpec, SubsetSplit, ViewSample};
pub use schedule::{stage_at, StageSchedule};
pub use synthetic::{make_synthetic_scene, SyntheticConfig, SyntheticScene};

use crate::config::RunConfig;
use crate::decoder::StagePoint;
use crate::diff::{lr_schedule, optimizer_step, Bound, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{canonicalize, CameraView};
use crate::image::Image;
use crate::losses::{consistency_loss, decoder_regularizer, frustum_loss, rendering_loss, total_objective, weighted};
use crate::metrics::{psnr, ssim};
use crate::model::Model;
use crate::render::{render_scene, render_var, Camera, RenderConfig};
use crate::scene::GaussianScene;

/// An ordered posed sequence plus the views kept out of training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<CameraView>,
    pub held_out: Vec<CameraView>,
    /// Frames used as input when evaluating on `held_out`.
    pub eval_context: Vec<usize>,
}

impl Dataset {
    pub fn views(&self, indices: &[usize]) -> Result<Vec<CameraView>> {
        indices
            .iter()
            .map(|i| {
                self.frames
                    .get(*i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("frame {i} out of range ({} frames)", self.frames.len())))
            })
            .collect()
    }

    /// The configured dataset directory, or the synthetic scene.
    pub fn load(run: &RunConfig) -> Result<Self> {
        match &run.io.dataset {
            Some(dir) => crate::io::dataset::read_dataset(dir, run.io.resolution),
            None => Ok(make_synthetic_scene(&run.training.synthetic, &run.render)?.dataset),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BranchTerms {
    loss: Var,
    mse: Var,
    perceptual: Var,
    frustum: Var,
    decoder: Var,
    accumulation: Var,
    /// Depth in world units.
    depth: Var,
    gaussians: usize,
}

fn mean_of(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let w = 1.0 / vars.len() as f64;
    let terms: Vec<(f64, Var)> = vars.iter().map(|v| (w, *v)).collect();
    weighted(g, &terms)
}

fn image_tensor(img: &Image) -> Result<Tensor> {
    Tensor::new(&[img.height, img.width, 3], img.data.clone())
}

fn branch(g: &mut Graph, p: &Bound, model: &Model, run: &RunConfig, context: &[CameraView], targets: &[CameraView], point: StagePoint) -> Result<BranchTerms> {
    let scene = canonicalize(context)?;
    let f = model.forward(g, p, &scene, point)?;
    let cfg = &run.losses;
    let (mut ren, mut mse, mut perc, mut acc, mut depth) = (vec![], vec![], vec![], vec![], vec![]);
    for t in targets {
        let camera = Camera { pose: scene.transform_pose(&t.pose), intrinsics: t.intrinsics };
        let out = render_var(g, &f.scene, &camera, &run.render)?;
        let color = g.slice(out, 1, 0, 3)?;
        let color = g.reshape(color, &[t.image.height, t.image.width, 3])?;
        let target = g.constant(image_tensor(&t.image)?);
        let l = rendering_loss(g, color, target, cfg)?;
        ren.push(l.total);
        mse.push(l.mse);
        perc.push(l.perceptual);
        let d = g.slice(out, 1, 3, 4)?;
        depth.push(g.scale(d, scene.scale));
        acc.push(g.slice(out, 1, 4, 5)?);
    }
    let ren = mean_of(g, &ren)?;
    let mse = mean_of(g, &mse)?;
    let perceptual = mean_of(g, &perc)?;
    let cams: Vec<Camera> = scene.views.iter().map(|v| Camera { pose: v.pose, intrinsics: v.intrinsics }).collect();
    let frustum = frustum_loss(g, f.scene.means, &cams, cfg.frustum_tau, cfg.z_near)?;
    let decoder = decoder_regularizer(g, &f.candidates, cfg)?.total;
    let loss = weighted(g, &[(1.0, ren), (cfg.frustum, frustum), (cfg.decoder, decoder)])?;
    Ok(BranchTerms {
        loss,
        mse,
        perceptual,
        frustum,
        decoder,
        accumulation: g.concat(&acc, 0)?,
        depth: g.concat(&depth, 0)?,
        gaussians: f.scene.len(g),
    })
}

/// What one optimizer step did.
#[derive(Clone, Debug, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    /// Unweighted terms, averaged over branches.
    pub terms: BTreeMap<&'static str, f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub stage: u32,
    pub lambda: f64,
    pub gaussians: usize,
    pub forward_passes: usize,
}

/// Step-specific randomness, independent of how many steps ran before.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Runs optimizer step number `model.store.step`.
pub fn train_step(model: &mut Model, data: &Dataset, run: &RunConfig) -> Result<StepReport> {
    let t = &run.training;
    let mut rng = step_rng(t.seed, model.store.step);
    let sample = sample_views(data.frames.len(), &t.sample, &mut rng)?;
    train_on(model, data, run, &sample)
}

/// One optimizer step on a given view sample.
pub fn train_on(model: &mut Model, data: &Dataset, run: &RunConfig, sample: &ViewSample) -> Result<StepReport> {
    let t = &run.training;
    let step = model.store.step;
    let targets = data.views(&sample.targets)?;
    let point = stage_at(step, &t.schedule);

    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mut terms = BTreeMap::new();
    let (total, branches) = if t.consistency {
        let split = split_subsets(sample.context.len())?;
        let pick = |s: &[usize]| s.iter().map(|i| sample.context[*i]).collect::<Vec<_>>();
        let a = branch(&mut g, &p, model, run, &data.views(&pick(&split.a))?, &targets, point)?;
        let b = branch(&mut g, &p, model, run, &data.views(&pick(&split.b))?, &targets, point)?;
        let con = consistency_loss(&mut g, a.accumulation, b.accumulation, a.depth, b.depth, &run.losses)?;
        terms.insert("con_alpha", g.value(con.alpha).item());
        terms.insert("con_depth", g.value(con.depth).item());
        (total_objective(&mut g, a.loss, Some(b.loss), Some(con.total))?, vec![a, b])
    } else {
        let a = branch(&mut g, &p, model, run, &data.views(&sample.context)?, &targets, point)?;
        (total_objective(&mut g, a.loss, None, None)?, vec![a])
    };
    let n = branches.len() as f64;
    let avg = |f: fn(&BranchTerms) -> Var| branches.iter().map(|b| g.value(f(b)).item()).sum::<f64>() / n;
    terms.insert("mse", avg(|b| b.mse));
    terms.insert("perceptual", avg(|b| b.perceptual));
    terms.insert("frustum", avg(|b| b.frustum));
    terms.insert("decoder", avg(|b| b.decoder));
    let loss = g.value(total).item();
    if !loss.is_finite() {
        let breakdown: Vec<String> = terms.iter().map(|(k, v)| format!("{k}={v}")).collect();
        return Err(Error::NonFinite(format!("loss at step {step} ({})", breakdown.join(", "))));
    }
    let grads = g.backward(total)?;
    model.store.zero_grads();
    model.store.accumulate(&p, &grads);
    let lr = lr_schedule(step, t.steps, t.warmup_steps, t.learning_rate);
    let grad_norm = optimizer_step(&mut model.store, &t.optimizer, lr).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
        e => e,
    })?;
    Ok(StepReport {
        step,
        loss,
        terms,
        lr,
        grad_norm,
        stage: point.stage,
        lambda: point.lambda,
        gaussians: branches[0].gaussians,
        forward_passes: branches.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Reconstruction from `context`, scored on every held-out view.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub views: Vec<ViewMetrics>,
    pub scene: GaussianScene,
    /// Wall time of the reconstruction from the input views.
    pub encode_seconds: f64,
    /// Bytes held by the reconstruction graph.
    pub graph_bytes: usize,
}

impl Evaluation {
    pub fn mean_psnr(&self) -> f64 {
        self.views.iter().map(|v| v.psnr).sum::<f64>() / self.views.len().max(1) as f64
    }
}

/// `k` frame indices spread evenly over a sequence of `frames`, ends included.
pub fn spread_context(frames: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 || k > frames {
        return Err(Error::invalid(format!("cannot pick {k} context views from {frames} frames")));
    }
    Ok((0..k).map(|i| (i * (frames - 1) + (k - 1) / 2) / (k - 1)).collect())
}

pub fn render_views(scene: &GaussianScene, canonical: &crate::geometry::NormalizedScene, views: &[CameraView], cfg: &RenderConfig) -> Result<Vec<Image>> {
    views
        .iter()
        .map(|v| {
            let camera = Camera { pose: canonical.transform_pose(&v.pose), intrinsics: v.intrinsics };
            let out = render_scene(scene, &camera, cfg)?;
            Image::new(out.width, out.height, out.color)
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset, context: &[usize], point: StagePoint, render: &RenderConfig) -> Result<Evaluation> {
    let canonical = canonicalize(&data.views(context)?)?;
    let start = Instant::now();
    let (scene, graph_bytes) = model.reconstruct_profiled(&canonical, point)?;
    let encode_seconds = start.elapsed().as_secs_f64();
    let images = render_views(&scene, &canonical, &data.held_out, render)?;
    let views = images
        .iter()
        .zip(&data.held_out)
        .map(|(img, v)| Ok(ViewMetrics { psnr: psnr(img, &v.image)?, ssim: ssim(img, &v.image)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { views, scene, encode_seconds, graph_bytes })
}

/// Repeated timing of one reconstruction.
#[derive(Clone, Debug)]
pub struct EncodeProfile {
    /// Wall time of every run, warm-up included.
    pub samples: Vec<f64>,
    /// Mean over `samples[1..]`; the first run only warms caches.
    pub encode_seconds: f64,
    pub graph_bytes: usize,
    pub gaussians: usize,
}

/// Reconstructs from `views` `repeats` times (at least 2) and reports the
/// timing with the first sample discarded.
pub fn profile_encode(model: &Model, views: &[CameraView], point: StagePoint, repeats: usize) -> Result<EncodeProfile> {
    if repeats < 2 {
        return Err(Error::invalid("profiling needs at least 2 runs (the first is discarded)"));
    }
    let canonical = canonicalize(views)?;
    let mut samples = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let out = model.reconstruct_profiled(&canonical, point)?;
        samples.push(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    let (scene, graph_bytes) = last.expect("repeats >= 2");
    let encode_seconds = samples[1..].iter().sum::<f64>() / (repeats - 1) as f64;
    Ok(EncodeProfile { samples, encode_seconds, graph_bytes, gaussians: scene.len() })
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    report: &'a StepReport,
    psnr: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    /// `(step, mean held-out PSNR)` before each evaluated step and after the last one.
    pub psnr: Vec<(u64, f64)>,
}

/// Trains until `run.training.steps`, resuming from `model.store.step`.
/// With `out`, metrics go to `out/metrics.jsonl` and checkpoints to
/// `out/checkpoint.bin`.
pub fn train(model: &mut Model, data: &Dataset, run: &RunConfig, out: Option<&Path>) -> Result<TrainSummary> {
    train_with(model, data, run, out, |_, _| {})
}

/// [`train`] with a callback after every step (report, held-out PSNR if evaluated).
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    run: &RunConfig,
    out: Option<&Path>,
    mut on_step: impl FnMut(&StepReport, Option<f64>),
) -> Result<TrainSummary> {
    run.validate()?;
    let t = &run.training;
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = File::options().create(true).append(true).open(&path).map_err(|e| Error::file(&path, e))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let save = |model: &Model| -> Result<()> {
        match out {
            Some(dir) => crate::io::checkpoint::save(&dir.join("checkpoint.bin"), model, run),
            None => Ok(()),
        }
    };
    let held_out_psnr = |model: &Model, step: u64| -> Result<Option<f64>> {
        if data.held_out.is_empty() || data.eval_context.len() < 2 {
            return Ok(None);
        }
        Ok(Some(evaluate(model, data, &data.eval_context, stage_at(step, &t.schedule), &run.render)?.mean_psnr()))
    };
    let mut summary = TrainSummary::default();
    while model.store.step < t.steps {
        let step = model.store.step;
        let eval = if t.eval_every > 0 && step % t.eval_every == 0 { held_out_psnr(model, step)? } else { None };
        if let Some(v) = eval {
            summary.psnr.push((step, v));
        }
        let report = train_step(model, data, run)?;
        summary.losses.push(report.loss);
        on_step(&report, eval);
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&MetricsLine { report: &report, psnr: eval }).map_err(|e| Error::format(e))?;
            writeln!(w, "{line}")?;
        }
        if t.checkpoint_every > 0 && model.store.step % t.checkpoint_every == 0 {
            save(model)?;
        }
    }
    if let Some(v) = held_out_psnr(model, model.store.step.saturating_sub(1))? {
        summary.psnr.push((model.store.step, v));
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    save(model)?;
    Ok(summary)
}
