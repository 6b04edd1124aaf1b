//! Training objectives.

use serde::{Deserialize, Serialize};

use crate::decoder::Candidates;
use crate::diff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::render::Camera;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mse: f64,
    pub perceptual: f64,
    pub frustum: f64,
    pub decoder: f64,
    pub con_alpha: f64,
    pub con_depth: f64,
    /// Opacity above which the opacity hinge activates.
    pub alpha_max: f64,
    pub scale_max: f64,
    pub sh_max: f64,
    pub sh_tau: f64,
    pub sh_power: f64,
    pub frustum_tau: f64,
    pub z_near: f64,
    pub support_threshold: f64,
    /// Dyadic scales of the image-gradient perceptual proxy.
    pub perceptual_scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mse: 2.0,
            perceptual: 1.0,
            frustum: 1e-2,
            decoder: 1e-2,
            con_alpha: 1e-3,
            con_depth: 1e-2,
            alpha_max: 0.2,
            scale_max: 0.5,
            sh_max: 3.0,
            sh_tau: 1.0,
            sh_power: 2.0,
            frustum_tau: 0.1,
            z_near: 0.01,
            support_threshold: 0.5,
            perceptual_scales: 3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.mse, self.perceptual, self.frustum, self.decoder, self.con_alpha, self.con_depth];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(self.alpha_max > 0.0 && self.alpha_max < 1.0) {
            return Err(Error::Config("losses.alpha_max must lie in (0, 1)".into()));
        }
        if !(self.scale_max > 0.0 && self.sh_tau > 0.0 && self.frustum_tau > 0.0 && self.sh_power > 0.0) {
            return Err(Error::Config("losses: scale_max, sh_tau, sh_power and frustum_tau must be positive".into()));
        }
        if self.perceptual_scales == 0 {
            return Err(Error::Config("losses.perceptual_scales must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean absolute difference of Sobel gradients, averaged over dyadic scales.
/// Coarser scales are skipped once the image is too small to pool and filter.
pub fn perceptual_proxy(g: &mut Graph, a: Var, b: Var, scales: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(scales);
    let (mut a, mut b) = (a, b);
    for s in 0..scales {
        let sh = g.shape(a).to_vec();
        if sh[0] < 3 || sh[1] < 3 {
            break;
        }
        let ga = g.sobel(a)?;
        let gb = g.sobel(b)?;
        let d = g.sub(ga, gb)?;
        let d = g.abs(d);
        terms.push(g.mean(d));
        if s + 1 < scales {
            if sh[0] % 2 != 0 || sh[1] % 2 != 0 || sh[0] < 6 || sh[1] < 6 {
                break;
            }
            a = g.avg_pool2(a)?;
            b = g.avg_pool2(b)?;
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("image too small for the gradient proxy"));
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(g.scale(total, 1.0 / n))
}

#[derive(Clone, Copy, Debug)]
pub struct RenderLoss {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Var,
}

/// `λ_mse·MSE + λ_perc·proxy` between `[H, W, 3]` images.
pub fn rendering_loss(g: &mut Graph, rendered: Var, target: Var, cfg: &LossConfig) -> Result<RenderLoss> {
    if g.shape(rendered) != g.shape(target) || g.shape(rendered).len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "rendering_loss",
            lhs: g.shape(rendered).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(rendered, target)?;
    let d = g.square(d);
    let mse = g.mean(d);
    let perceptual = perceptual_proxy(g, rendered, target, cfg.perceptual_scales)?;
    let a = g.scale(mse, cfg.mse);
    let b = g.scale(perceptual, cfg.perceptual);
    let total = g.add(a, b)?;
    Ok(RenderLoss { total, mse, perceptual })
}

#[derive(Clone, Copy, Debug)]
pub struct ConsistencyLoss {
    pub total: Var,
    pub alpha: Var,
    pub depth: Var,
}

fn half_pair(g: &mut Graph, a: Var, b: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let sb = g.stop_gradient(b);
    let sa = g.stop_gradient(a);
    let mut d1 = g.sub(a, sb)?;
    d1 = g.abs(d1);
    let mut d2 = g.sub(b, sa)?;
    d2 = g.abs(d2);
    if let Some(m) = mask {
        d1 = g.mul(d1, m)?;
        d2 = g.mul(d2, m)?;
    }
    Ok((d1, d2))
}

/// Symmetric stop-gradient agreement of accumulation and depth maps of two
/// branches rendered from the same cameras (any matching shapes).
pub fn consistency_loss(g: &mut Graph, oa: Var, ob: Var, da: Var, db: Var, cfg: &LossConfig) -> Result<ConsistencyLoss> {
    for (x, y) in [(oa, ob), (oa, da), (oa, db)] {
        if g.shape(x) != g.shape(y) {
            return Err(Error::ShapeMismatch { op: "consistency_loss", lhs: g.shape(x).to_vec(), rhs: g.shape(y).to_vec() });
        }
    }
    let (a1, a2) = half_pair(g, oa, ob, None)?;
    let m1 = g.mean(a1);
    let m2 = g.mean(a2);
    let alpha = g.add(m1, m2)?;
    let alpha = g.scale(alpha, 0.5);

    let thr = cfg.support_threshold;
    let mask: Vec<f64> = g
        .value(oa)
        .data()
        .iter()
        .zip(g.value(ob).data())
        .map(|(a, b)| if *a > thr && *b > thr { 1.0 } else { 0.0 })
        .collect();
    let support = mask.iter().sum::<f64>().max(1.0);
    let mask = g.constant(Tensor::new(g.shape(oa), mask)?);
    let (d1, d2) = half_pair(g, da, db, Some(mask))?;
    let s1 = g.sum(d1);
    let s2 = g.sum(d2);
    let depth = g.add(s1, s2)?;
    let depth = g.scale(depth, 0.5 / support);

    let wa = g.scale(alpha, cfg.con_alpha);
    let wd = g.scale(depth, cfg.con_depth);
    let total = g.add(wa, wd)?;
    Ok(ConsistencyLoss { total, alpha, depth })
}

/// Penalty added for points behind a camera, on top of the depth term.
pub const BEHIND_CAMERA_PENALTY: f64 = 2.0;

/// Violation of one camera-space point and its gradient in camera coordinates.
fn violation(t: [f64; 3], cam: &Camera, z_near: f64) -> (f64, [f64; 3]) {
    let z = t[2];
    if z <= 0.0 {
        return (z_near - z + BEHIND_CAMERA_PENALTY, [0.0, 0.0, -1.0]);
    }
    let k = &cam.intrinsics;
    let mut v = 0.0;
    let mut grad = [0.0; 3];
    if z < z_near {
        v += z_near - z;
        grad[2] -= 1.0;
    }
    for (axis, (f, c, size)) in [(k.fx, k.cx, k.width), (k.fy, k.cy, k.height)].into_iter().enumerate() {
        let half = size as f64 / 2.0;
        let ndc = (f * t[axis] / z + c) / half - 1.0;
        if ndc.abs() > 1.0 {
            let sign = ndc.signum();
            v += ndc.abs() - 1.0;
            grad[axis] += sign * f / (half * z);
            grad[2] -= sign * f * t[axis] / (half * z * z);
        }
    }
    (v, grad)
}

fn camera_point(cam: &Camera, p: &[f64]) -> [f64; 3] {
    let r = cam.pose.rotation;
    let c = cam.pose.center;
    let d = [p[0] - c.x, p[1] - c.y, p[2] - c.z];
    [0, 1, 2].map(|j| r[(0, j)] * d[0] + r[(1, j)] * d[1] + r[(2, j)] * d[2])
}

/// Minimum violation over cameras; returns the value, the arg-min camera and
/// the gradient with respect to the world point.
fn min_violation(p: &[f64], cameras: &[Camera], z_near: f64) -> (f64, [f64; 3]) {
    let mut best = (f64::INFINITY, [0.0; 3]);
    for cam in cameras {
        let (v, gt) = violation(camera_point(cam, p), cam, z_near);
        if v < best.0 {
            let r = cam.pose.rotation;
            let gw = [0, 1, 2].map(|i| r[(i, 0)] * gt[0] + r[(i, 1)] * gt[1] + r[(i, 2)] * gt[2]);
            best = (v, gw);
        }
    }
    best
}

struct FrustumOp {
    cameras: Vec<Camera>,
    tau: f64,
    z_near: f64,
}

impl CustomOp for FrustumOp {
    fn name(&self) -> &'static str {
        "frustum"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let means = inputs[0].data();
        let n = means.len() / 3;
        let mut out = vec![0.0; means.len()];
        for i in 0..n {
            let (v, gw) = min_violation(&means[3 * i..3 * i + 3], &self.cameras, self.z_near);
            let s = grad[0] / (n as f64 * (self.tau + v));
            for k in 0..3 {
                out[3 * i + k] = s * gw[k];
            }
        }
        vec![Some(out)]
    }
}

/// `mean_n ln(1 + v_n / τ)` with `v_n` the smallest frustum violation of
/// mean `n` over `cameras`.
pub fn frustum_loss(g: &mut Graph, means: Var, cameras: &[Camera], tau: f64, z_near: f64) -> Result<Var> {
    if cameras.is_empty() {
        return Err(Error::invalid("frustum loss needs at least one camera"));
    }
    let shape = g.shape(means).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::ShapeMismatch { op: "frustum_loss", lhs: shape, rhs: vec![0, 3] });
    }
    let d = g.value(means).data();
    let n = shape[0];
    let total: f64 = (0..n)
        .map(|i| (min_violation(&d[3 * i..3 * i + 3], cameras, z_near).0 / tau).ln_1p())
        .sum();
    let value = if n == 0 { 0.0 } else { total / n as f64 };
    let op = FrustumOp { cameras: cameras.to_vec(), tau, z_near };
    Ok(g.custom(Box::new(op), &[means], Tensor::scalar(value)))
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderRegularizer {
    /// `10⁻²·(op + scale + rotation + sh)`, before the outer weight.
    pub total: Var,
    pub opacity: Var,
    pub scale: Var,
    pub rotation: Var,
    pub sh: Var,
}

/// Inner factor of the decoder regularizer (applied in addition to the outer weight).
pub const DECODER_REG_INNER: f64 = 1e-2;

fn hinge_sq(g: &mut Graph, x: Var, at: f64) -> Var {
    let h = g.offset(x, -at);
    let h = g.relu(h);
    let h = g.square(h);
    g.mean(h)
}

/// Opacity, scale, rotation-residual and SH soft-cap penalties over every candidate.
pub fn decoder_regularizer(g: &mut Graph, c: &Candidates, cfg: &LossConfig) -> Result<DecoderRegularizer> {
    let t = (cfg.alpha_max / (1.0 - cfg.alpha_max)).ln();
    let alpha = g.sigmoid(c.opacity_logits);
    let mean_alpha = g.mean(alpha);
    let over = hinge_sq(g, c.opacity_logits, t);
    let opacity = g.add(mean_alpha, over)?;

    let scale = hinge_sq(g, c.log_scales, cfg.scale_max.ln());

    let r2 = g.square(c.rot6d_residual);
    let r2 = g.sum_axis(r2, 1)?;
    let rotation = g.mean(r2);

    let a = g.abs(c.sh);
    let a = g.offset(a, -cfg.sh_max);
    let a = g.scale(a, 1.0 / cfg.sh_tau);
    let a = g.softplus(a);
    let a = g.scale(a, cfg.sh_tau);
    let a = if cfg.sh_power == 2.0 {
        g.square(a)
    } else {
        let l = g.log(a);
        let l = g.scale(l, cfg.sh_power);
        g.exp(l)
    };
    let sh = g.mean(a);

    let s1 = g.add(opacity, scale)?;
    let s2 = g.add(rotation, sh)?;
    let sum = g.add(s1, s2)?;
    let total = g.scale(sum, DECODER_REG_INNER);
    Ok(DecoderRegularizer { total, opacity, scale, rotation, sh })
}

/// Weighted sum `Σ w·x` of scalar terms.
pub fn weighted(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = g.scalar(0.0);
    for (w, v) in terms {
        let s = g.scale(*v, *w);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// `½(Lᵃ + Lᵇ) + L_con`, or the single branch loss when there is no second branch.
pub fn total_objective(g: &mut Graph, a: Var, b: Option<Var>, consistency: Option<Var>) -> Result<Var> {
    let Some(b) = b else {
        return Ok(a);
    };
    let ab = g.add(a, b)?;
    let half = g.scale(ab, 0.5);
    match consistency {
        Some(c) => g.add(half, c),
        None => Ok(half),
    }
}
