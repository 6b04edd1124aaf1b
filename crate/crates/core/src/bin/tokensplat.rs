use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tokensplat::config::RunConfig;
use tokensplat::decoder::{candidates_from_raw, decode_stage, group_size, StagePoint, CANDIDATES, GEO_CHANNELS};
use tokensplat::diff::Graph;
use tokensplat::geometry::{canonicalize, CameraPose, Intrinsics, NormalizedScene};
use tokensplat::image::Image;
use tokensplat::io::{checkpoint, dataset, ply, ppm};
use tokensplat::model::Model;
use tokensplat::nn::trunc_normal;
use tokensplat::render::{render_scene, Camera};
use tokensplat::scene::{GaussianScene, SH_WIDTH};
use tokensplat::training::{evaluate, make_synthetic_scene, profile_encode, spread_context, train_with, Dataset};
use tokensplat::verify::{run_suite, Group};

#[derive(Parser)]
#[command(name = "tokensplat", version, about = "Feed-forward Gaussian splatting from latent scene tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides io.output_dir (default ./tokensplat-run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint (its config must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a checkpoint reconstruction or a PLY file from a novel camera.
    Render(RenderArgs),
    /// Reconstruct a scene and write it as PLY.
    ExportPly {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Gaussians one token decodes to at a stage and transition coefficient.
    MergeDemo {
        #[arg(long, default_value_t = 2)]
        stage: u32,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        /// Only checks whose name contains this.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score held-out views and report encode time, graph bytes and Gaussian count.
    Eval {
        #[command(flatten)]
        source: ModelSource,
        /// Timed reconstructions; the first is discarded as warm-up.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic toy dataset as a dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Config whose [training.synthetic] and [render] sections are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelSource {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; defaults to the checkpoint config's dataset or synthetic scene.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of context views spread over the sequence; defaults to the dataset's eval context.
    #[arg(long)]
    context: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long, conflicts_with = "ply", required_unless_present = "ply")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ply: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    context: Option<usize>,
    /// Camera center, x,y,z (world frame; canonical frame for --ply).
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    eye: Vector3<f64>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, default_value = "0,0,0")]
    target: Vector3<f64>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true, default_value = "0,1,0")]
    up: Vector3<f64>,
    #[arg(long, default_value_t = 70.0)]
    focal: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vector3::new(x, y, z)),
        _ => Err(format!("expected three finite numbers x,y,z, got {s:?}")),
    }
}

struct Loaded {
    run: RunConfig,
    model: Model,
    data: Dataset,
    context: Vec<usize>,
}

fn load_source(src: &ModelSource) -> anyhow::Result<Loaded> {
    let (mut run, model) = checkpoint::load(&src.checkpoint)?;
    if let Some(dir) = &src.dataset {
        run.io.dataset = Some(dir.clone());
    }
    let data = Dataset::load(&run)?;
    let context = match src.context {
        Some(k) => spread_context(data.frames.len(), k)?,
        None if data.eval_context.len() >= 2 => data.eval_context.clone(),
        None => spread_context(data.frames.len(), data.frames.len().min(5))?,
    };
    Ok(Loaded { run, model, data, context })
}

fn final_point(run: &RunConfig) -> StagePoint {
    StagePoint::settled(run.training.schedule.final_stage())
}

fn reconstruct(l: &Loaded) -> anyhow::Result<(GaussianScene, NormalizedScene)> {
    let canonical = canonicalize(&l.data.views(&l.context)?)?;
    let scene = l.model.reconstruct(&canonical, final_point(&l.run))?;
    Ok((scene, canonical))
}

fn cmd_train(config: &Path, out: Option<PathBuf>, resume: Option<PathBuf>) -> anyhow::Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(o) = out {
        run.io.output_dir = Some(o);
    }
    let mut model = match resume {
        Some(path) => {
            let (saved, model) = checkpoint::load(&path)?;
            if saved.model() != run.model() {
                bail!("{} was trained with a different model config", path.display());
            }
            model
        }
        None => Model::new(run.model(), run.training.seed)?,
    };
    let data = Dataset::load(&run)?;
    println!(
        "{} parameters, {} frames, {} held-out views, {} steps from step {}",
        model.store.numel(),
        data.frames.len(),
        data.held_out.len(),
        run.training.steps,
        model.store.step
    );
    let out_dir = run.io.output_dir.clone().unwrap_or_else(|| PathBuf::from("tokensplat-run"));
    let start = Instant::now();
    let summary = train_with(&mut model, &data, &run, Some(&out_dir), |r, psnr| {
        if let Some(p) = psnr {
            println!("step {:>6}  held-out PSNR {p:.2} dB", r.step);
        }
        if r.step % 10 == 0 {
            println!(
                "step {:>6}  loss {:.5}  stage {} λ {:.2}  #G {}  lr {:.2e}  |g| {:.3}  {:.0}s",
                r.step,
                r.loss,
                r.stage,
                r.lambda,
                r.gaussians,
                r.lr,
                r.grad_norm,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some((step, p)) = summary.psnr.last() {
        println!("final held-out PSNR {p:.2} dB at step {step}");
    }
    println!("wrote {}", out_dir.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> anyhow::Result<()> {
    let pose = CameraPose::look_at(a.eye, a.target, a.up)?;
    let intrinsics = Intrinsics::new(a.focal, a.focal, a.width as f64 / 2.0, a.height as f64 / 2.0, a.width, a.height)?;
    let (scene, pose, render) = match (&a.checkpoint, &a.ply) {
        (Some(ckpt), _) => {
            let l = load_source(&ModelSource { checkpoint: ckpt.clone(), dataset: a.dataset.clone(), context: a.context })?;
            let (scene, canonical) = reconstruct(&l)?;
            (scene, canonical.transform_pose(&pose), l.run.render)
        }
        (None, Some(path)) => (ply::read_ply(path)?, pose, Default::default()),
        (None, None) => bail!("one of --checkpoint or --ply is required"),
    };
    let out = render_scene(&scene, &Camera { pose, intrinsics }, &render)?;
    ppm::write_ppm(&a.out, &Image::new(out.width, out.height, out.color)?)?;
    println!("rendered {} Gaussians to {}", scene.len(), a.out.display());
    Ok(())
}

fn cmd_export(src: &ModelSource, out: &Path) -> anyhow::Result<()> {
    let l = load_source(src)?;
    let (scene, _) = reconstruct(&l)?;
    let bytes = ply::write_ply(out, &scene)?;
    println!("wrote {} Gaussians ({} bytes) from {} context views to {}", scene.len(), bytes, l.context.len(), out.display());
    Ok(())
}

fn cmd_merge_demo(stage: u32, lambda: f64, seed: u64) -> anyhow::Result<()> {
    let point = StagePoint { stage, lambda };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let geo = g.constant(trunc_normal(&mut rng, &[1, CANDIDATES * GEO_CHANNELS], 0.5));
    let app = g.constant(trunc_normal(&mut rng, &[1, CANDIDATES * SH_WIDTH], 0.5));
    let cfg = Default::default();
    let c = candidates_from_raw(&mut g, &cfg, geo, app)?;
    let s = decode_stage(&mut g, &c, point, cfg.tau)?.to_scene(&g);
    println!(
        "stage {stage}, λ {lambda}: {CANDIDATES} candidates, groups of {} → {} Gaussians",
        group_size(stage)?,
        s.len()
    );
    println!("{:>3}  {:>27}  {:>27}  {:>7}", "#", "mean", "scale", "opacity");
    for i in 0..s.len() {
        let m = &s.means[3 * i..3 * i + 3];
        let sc = &s.scales[3 * i..3 * i + 3];
        println!(
            "{i:>3}  {:>8.4} {:>8.4} {:>8.4}  {:>8.4} {:>8.4} {:>8.4}  {:>7.4}",
            m[0], m[1], m[2], sc[0], sc[1], sc[2], s.opacities[i]
        );
    }
    Ok(())
}

fn cmd_grad_check(filter: Option<&str>, seed: u64) -> anyhow::Result<bool> {
    let start = Instant::now();
    let results = run_suite(seed, filter)?;
    if results.is_empty() {
        bail!("no check matches {:?}", filter.unwrap_or_default());
    }
    let mut ok = true;
    for r in &results {
        let group = match r.group {
            Group::Op => "op",
            Group::Loss => "loss",
            Group::Decoder => "decoder",
            Group::Renderer => "renderer",
        };
        println!(
            "{}  {group:<8} {:<20} max rel err {:.2e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.check.max_rel_error,
            r.tolerance
        );
        ok &= r.passed();
    }
    println!("{} checks in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    Ok(ok)
}

fn cmd_eval(src: &ModelSource, repeats: usize, json: bool) -> anyhow::Result<()> {
    if repeats < 2 {
        bail!("--repeats must be at least 2 (the first timing is discarded)");
    }
    let l = load_source(src)?;
    if l.data.held_out.is_empty() {
        bail!("dataset has no held-out views");
    }
    let point = final_point(&l.run);
    let e = evaluate(&l.model, &l.data, &l.context, point, &l.run.render)?;
    let prof = profile_encode(&l.model, &l.data.views(&l.context)?, point, repeats)?;
    if json {
        let report = serde_json::json!({
            "context_views": l.context.len(),
            "gaussians": prof.gaussians,
            "graph_bytes": prof.graph_bytes,
            "encode_seconds": prof.encode_seconds,
            "encode_samples": prof.samples,
            "mean_psnr": e.mean_psnr(),
            "views": e.views,
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    for (i, v) in e.views.iter().enumerate() {
        println!("view {i:>3}  PSNR {:>6.2} dB  SSIM {:.4}", v.psnr, v.ssim);
    }
    println!("mean PSNR {:.2} dB", e.mean_psnr());
    println!("context views {}", l.context.len());
    println!("Gaussians {}", prof.gaussians);
    println!("graph bytes {}", prof.graph_bytes);
    println!("encode time {:.4}s (mean of {} after warm-up)", prof.encode_seconds, repeats - 1);
    Ok(())
}

fn cmd_synth(out: &Path, config: Option<&Path>) -> anyhow::Result<()> {
    let run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let s = make_synthetic_scene(&run.training.synthetic, &run.render)?;
    dataset::write_dataset(out, &s.dataset).with_context(|| format!("writing {}", out.display()))?;
    ply::write_ply(&out.join("ground_truth.ply"), &s.scene)?;
    println!(
        "wrote {} frames, {} held-out views and {} ground-truth Gaussians to {}",
        s.dataset.frames.len(),
        s.dataset.held_out.len(),
        s.scene.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out, resume } => cmd_train(config, out.clone(), resume.clone()).map(|_| true),
        Command::Render(a) => cmd_render(a).map(|_| true),
        Command::ExportPly { source, out } => cmd_export(source, out).map(|_| true),
        Command::MergeDemo { stage, lambda, seed } => cmd_merge_demo(*stage, *lambda, *seed).map(|_| true),
        Command::GradCheck { filter, seed } => cmd_grad_check(filter.as_deref(), *seed),
        Command::Eval { source, repeats, json } => cmd_eval(source, *repeats, *json).map(|_| true),
        Command::Synth { out, config } => cmd_synth(out, config.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
