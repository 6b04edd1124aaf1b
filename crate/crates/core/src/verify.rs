//! Finite-difference verification of every differentiable piece: tape
//! operations, losses, the full decoder (heads included) and the renderer.
//!
//! Inputs are drawn away from kinks (`abs`, `relu`, clamps, hinges) so
//! central differences are meaningful.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{candidates_from_raw, decode_candidates, decode_stage, DecoderConfig, DecoderParams, StagePoint, CANDIDATES, GEO_CHANNELS};
use crate::diff::{grad_check_scaled, Bound, GradCheck, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::geometry::{CameraPose, Intrinsics};
use crate::losses::{consistency_loss, decoder_regularizer, frustum_loss, perceptual_proxy, rendering_loss, LossConfig};
use crate::nn::trunc_normal;
use crate::render::{render_var, Camera, RenderConfig};
use crate::scene::{RandomScene, SceneVars, SH_WIDTH};

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;
pub const RENDER_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Op,
    Loss,
    Decoder,
    Renderer,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub group: Group,
    pub tolerance: f64,
    pub check: GradCheck,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.check.max_rel_error < self.tolerance
    }
}

type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    group: Group,
    points: Vec<Tensor>,
    body: Body,
    scale: f64,
    tolerance: f64,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    trunc_normal(rng, shape, 1.0)
}

/// Random values in `[lo, hi]` at least `margin` from every kink.
fn away(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            data.push(v);
        }
    }
    Tensor::new(shape, data).expect("shape matches")
}

/// Projects any output onto a fixed random direction, so every output
/// coordinate contributes to the scalar under test.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = normal(&mut ChaCha8Rng::seed_from_u64(seed), g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn op_case(name: &'static str, points: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    let seed = name.bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    Case {
        name,
        group: Group::Op,
        points,
        body: Box::new(move |g, x| {
            let y = f(g, x)?;
            project(g, y, seed)
        }),
        scale: 1.0,
        tolerance: TOLERANCE,
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let m = &[3, 4];
    let mut v = vec![
        op_case("add", vec![normal(rng, m), normal(rng, &[4])], |g, x| g.add(x[0], x[1])),
        op_case("sub", vec![normal(rng, &[3, 1]), normal(rng, m)], |g, x| g.sub(x[0], x[1])),
        op_case("mul", vec![normal(rng, m), normal(rng, &[1, 4])], |g, x| g.mul(x[0], x[1])),
        op_case("div", vec![normal(rng, m), away(rng, &[3, 1], 0.5, 2.0, &[], 0.0)], |g, x| g.div(x[0], x[1])),
        op_case("exp", vec![normal(rng, m)], |g, x| Ok(g.exp(x[0]))),
        op_case("log", vec![away(rng, m, 0.2, 3.0, &[], 0.0)], |g, x| Ok(g.log(x[0]))),
        op_case("sigmoid", vec![normal(rng, m)], |g, x| Ok(g.sigmoid(x[0]))),
        op_case("softplus", vec![normal(rng, m)], |g, x| Ok(g.softplus(x[0]))),
        op_case("relu", vec![away(rng, m, -2.0, 2.0, &[0.0], 0.05)], |g, x| Ok(g.relu(x[0]))),
        op_case("gelu", vec![normal(rng, m)], |g, x| Ok(g.gelu(x[0]))),
        op_case("sqrt", vec![away(rng, m, 0.2, 3.0, &[], 0.0)], |g, x| Ok(g.sqrt(x[0]))),
        op_case("square", vec![normal(rng, m)], |g, x| Ok(g.square(x[0]))),
        op_case("abs", vec![away(rng, m, -2.0, 2.0, &[0.0], 0.05)], |g, x| Ok(g.abs(x[0]))),
        op_case("neg", vec![normal(rng, m)], |g, x| Ok(g.neg(x[0]))),
        op_case("scale", vec![normal(rng, m)], |g, x| Ok(g.scale(x[0], -1.7))),
        op_case("offset", vec![normal(rng, m)], |g, x| Ok(g.offset(x[0], 0.4))),
        op_case("max_const", vec![away(rng, m, -2.0, 2.0, &[0.3], 0.05)], |g, x| Ok(g.max_const(x[0], 0.3))),
        op_case("clamp", vec![away(rng, m, -2.0, 2.0, &[-1.0, 1.0], 0.05)], |g, x| Ok(g.clamp(x[0], -1.0, 1.0))),
        op_case("clamp_soft", vec![normal(rng, m)], |g, x| Ok(g.clamp_soft(x[0], -0.5, 0.5))),
        op_case("matmul", vec![normal(rng, m), normal(rng, &[4, 2])], |g, x| g.matmul(x[0], x[1])),
        op_case("transpose", vec![normal(rng, m)], |g, x| g.transpose(x[0])),
        op_case("sum_axis", vec![normal(rng, &[2, 3, 4])], |g, x| g.sum_axis(x[0], 1)),
        op_case("mean_axis", vec![normal(rng, &[2, 3, 4])], |g, x| g.mean_axis(x[0], 2)),
        op_case("sum", vec![normal(rng, m)], |g, x| Ok(g.sum(x[0]))),
        op_case("mean", vec![normal(rng, m)], |g, x| Ok(g.mean(x[0]))),
        op_case("softmax", vec![normal(rng, m)], |g, x| g.softmax(x[0], 1, 0.7)),
        op_case("normalize_l2", vec![normal(rng, m)], |g, x| g.normalize_l2(x[0], 1)),
        op_case("layer_norm", vec![normal(rng, m)], |g, x| g.layer_norm(x[0], 1, 1e-5)),
        op_case("concat", vec![normal(rng, &[3, 2]), normal(rng, m)], |g, x| g.concat(&[x[0], x[1]], 1)),
        op_case("slice", vec![normal(rng, m)], |g, x| g.slice(x[0], 1, 1, 3)),
        op_case("broadcast_to", vec![normal(rng, &[1, 4])], |g, x| g.broadcast_to(x[0], &[3, 4])),
        op_case("reshape", vec![normal(rng, m)], |g, x| g.reshape(x[0], &[2, 6])),
        op_case("cross3", vec![normal(rng, &[4, 3]), normal(rng, &[4, 3])], |g, x| g.cross3(x[0], x[1])),
        op_case("sobel", vec![normal(rng, &[5, 6, 2])], |g, x| g.sobel(x[0])),
        op_case("avg_pool2", vec![normal(rng, &[4, 6, 2])], |g, x| g.avg_pool2(x[0])),
    ];
    // the product rule through a shared node
    v.push(op_case("shared_node", vec![normal(rng, m)], |g, x| {
        let s = g.sigmoid(x[0]);
        let p = g.mul(s, x[0])?;
        g.add(p, x[0])
    }));
    v
}

fn loss_case(name: &'static str, points: Vec<Tensor>, scale: f64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Case {
    Case { name, group: Group::Loss, points, body: Box::new(f), scale, tolerance: TOLERANCE }
}

fn frustum_cameras() -> Vec<Camera> {
    let k = Intrinsics::new(10.0, 10.0, 5.0, 5.0, 10, 10).expect("valid intrinsics");
    vec![
        Camera { pose: CameraPose::identity(), intrinsics: k },
        Camera {
            pose: CameraPose::new(Rotation3::from_euler_angles(0.0, 0.6, 0.0).into_inner(), Vector3::new(-1.0, 0.0, 0.2))
                .expect("rotation is orthonormal"),
            intrinsics: k,
        },
    ]
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let cfg = LossConfig::default();
    let img = |rng: &mut ChaCha8Rng| trunc_normal(rng, &[12, 12, 3], 0.2).map(|v| 0.5 + v);
    let maps = |rng: &mut ChaCha8Rng| {
        let o = away(rng, &[6, 6], 0.05, 0.95, &[cfg.support_threshold], 0.05);
        let o2 = away(rng, &[6, 6], 0.05, 0.95, &[cfg.support_threshold], 0.05);
        let d = away(rng, &[6, 6], 0.5, 3.0, &[], 0.0);
        let d2 = away(rng, &[6, 6], 0.5, 3.0, &[], 0.0);
        vec![o, o2, d, d2]
    };
    // points outside every frustum, behind one camera, and well inside
    let means = Tensor::new(
        &[4, 3],
        vec![1.4, 0.1, 1.0, -0.3, 2.0, 1.5, 0.05, -0.1, -0.7, 0.02, 0.03, 2.0],
    )
    .expect("4×3");
    let cams = frustum_cameras();
    let geo = trunc_normal(rng, &[2, CANDIDATES * GEO_CHANNELS], 0.7);
    let app = trunc_normal(rng, &[2, CANDIDATES * SH_WIDTH], 0.7);
    let (c1, c2, c3, c4) = (cfg.clone(), cfg.clone(), cfg.clone(), cfg);
    vec![
        loss_case("rendering", vec![img(rng), img(rng)], 1.0, move |g, x| Ok(rendering_loss(g, x[0], x[1], &c1)?.total)),
        loss_case("perceptual_proxy", vec![img(rng), img(rng)], 1.0, |g, x| perceptual_proxy(g, x[0], x[1], 3)),
        // the stopped half of each pair is invisible to the tape, so the
        // analytic gradient is half the finite difference
        loss_case("consistency", maps(rng), 2.0, move |g, x| Ok(consistency_loss(g, x[0], x[1], x[2], x[3], &c2)?.total)),
        loss_case("frustum", vec![means], 1.0, move |g, x| frustum_loss(g, x[0], &cams, c3.frustum_tau, c3.z_near)),
        loss_case("decoder_regularizer", vec![geo, app], 1.0, move |g, x| {
            let c = candidates_from_raw(g, &DecoderConfig::default(), x[0], x[1])?;
            Ok(decoder_regularizer(g, &c, &c4)?.total)
        }),
    ]
}

fn decoder_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    const WIDTH: usize = 6;
    const TOKENS: usize = 2;
    let mut store = ParamStore::new();
    let params = DecoderParams::new(&mut store, WIDTH, rng)?;
    let mut points = vec![trunc_normal(rng, &[TOKENS, WIDTH], 1.0), trunc_normal(rng, &[TOKENS, WIDTH], 1.0)];
    // perturb gains and biases away from their identity initialization
    points.extend(store.params().iter().map(|p| p.value.clone()));
    for p in points.iter_mut().skip(2) {
        let noise = trunc_normal(rng, p.shape(), 0.1);
        for (a, b) in p.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    let mut cases = Vec::new();
    for (name, point) in [
        ("decoder_stage1", StagePoint { stage: 1, lambda: 0.25 }),
        ("decoder_stage3", StagePoint { stage: 3, lambda: 0.6 }),
    ] {
        cases.push(Case {
            name,
            group: Group::Decoder,
            points: points.clone(),
            body: Box::new(move |g, x| {
                let bound = Bound::from_vars(x[2..].to_vec());
                let c = decode_candidates(g, &bound, &params, &DecoderConfig::default(), x[0], x[1])?;
                let s = decode_stage(g, &c, point, 0.7)?;
                let all = g.concat(&[s.means, s.scales, s.rotations, s.opacities, s.sh], 1)?;
                project(g, all, 5)
            }),
            scale: 1.0,
            tolerance: TOLERANCE,
        });
    }
    Ok(cases)
}

fn renderer_case(seed: u64) -> Result<Case> {
    let scene = RandomScene {
        count: 4,
        lo: [-0.6, -0.6, 1.5],
        hi: [0.6, 0.6, 3.0],
        scale: (0.05, 0.3),
        opacity: (0.2, 0.8),
        color: (0.1, 0.9),
        sh_rest_std: 0.1,
    }
    .sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let camera = Camera {
        pose: CameraPose::new(Rotation3::from_euler_angles(0.05, -0.1, 0.02).into_inner(), Vector3::new(0.05, -0.02, 0.1))?,
        intrinsics: Intrinsics::new(9.0, 9.5, 4.1, 3.9, 8, 8)?,
    };
    let cfg = RenderConfig { background: [0.2, 0.5, 0.1], ..RenderConfig::default() };
    let n = scene.len();
    let points = vec![
        Tensor::new(&[n, 3], scene.means.clone())?,
        Tensor::new(&[n, 3], scene.scales.clone())?,
        Tensor::new(&[n, 9], scene.rotations.clone())?,
        Tensor::new(&[n, 1], scene.opacities.clone())?,
        Tensor::new(&[n, SH_WIDTH], scene.sh.clone())?,
    ];
    Ok(Case {
        name: "renderer",
        group: Group::Renderer,
        points,
        body: Box::new(move |g, x| {
            let vars = SceneVars { means: x[0], scales: x[1], rotations: x[2], opacities: x[3], sh: x[4] };
            let out = render_var(g, &vars, &camera, &cfg)?;
            project(g, out, seed)
        }),
        scale: 1.0,
        tolerance: RENDER_TOLERANCE,
    })
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = op_cases(&mut rng);
    all.extend(loss_cases(&mut rng));
    all.extend(decoder_cases(&mut rng)?);
    all.push(renderer_case(11)?);
    Ok(all)
}

/// Names of every check in suite order.
pub fn check_names() -> Vec<&'static str> {
    cases(0).map(|c| c.iter().map(|c| c.name).collect()).unwrap_or_default()
}

/// Runs the checks whose name contains `filter` (all when `None`).
pub fn run_suite(seed: u64, filter: Option<&str>) -> Result<Vec<CheckResult>> {
    run(cases(seed)?.into_iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))))
}

fn run(cases: impl Iterator<Item = Case>) -> Result<Vec<CheckResult>> {
    cases
        .map(|c| {
            let check = grad_check_scaled(&c.body, &c.points, EPS, c.scale)?;
            Ok(CheckResult { name: c.name, group: c.group, tolerance: c.tolerance, check })
        })
        .collect()
}
