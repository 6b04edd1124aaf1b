//! Candidate heads and the stage-dependent parameter-aware merge.
//!
//! Every latent token always predicts 16 candidates. At stage `s` the
//! candidates of a token are split into `G = 2^s` groups of `b = 16 / G`
//! consecutive candidates, and each group is merged into one Gaussian with
//! softmax gate weights. Attributes are merged in their native domains:
//! positions, 6D rotation values and SH linearly; log-scales linearly plus a
//! `ln(b)/3` volume correction; opacity through the log-transmittance
//! `ln(1 − α)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Norm};
use crate::scene::{SceneVars, SH_WIDTH};

pub const CANDIDATES: usize = 16;
pub const MAX_STAGE: u32 = 4;
/// Geometry head channels per candidate: position 3, log-scale 3, 6D rotation 6, opacity 1, gate 1.
pub const GEO_CHANNELS: usize = 14;
const OPACITY_EPS: f64 = 1e-7;
const ROT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Gate softmax temperature.
    pub tau: f64,
    pub mean_offset: [f64; 3],
    pub log_scale_offset: f64,
    pub opacity_offset: f64,
    pub rot6d_offset: [f64; 6],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            mean_offset: [0.0, 0.0, 1.5],
            log_scale_offset: -2.0,
            opacity_offset: -5.0,
            rot6d_offset: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("decoder.tau must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized linear heads for the geometry and appearance streams.
#[derive(Clone, Copy, Debug)]
pub struct DecoderParams {
    pub geo_norm: Norm,
    pub geo_head: Linear,
    pub app_norm: Norm,
    pub app_head: Linear,
}

impl DecoderParams {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            geo_norm: Norm::new(store, "decoder.geo_norm", width)?,
            geo_head: Linear::new(store, "decoder.geo_head", width, CANDIDATES * GEO_CHANNELS, true, rng)?,
            app_norm: Norm::new(store, "decoder.app_norm", width)?,
            app_head: Linear::new(store, "decoder.app_head", width, CANDIDATES * SH_WIDTH, true, rng)?,
        })
    }
}

/// Raw candidates of `tokens` tokens, each attribute with `tokens · 16` rows.
#[derive(Clone, Copy, Debug)]
pub struct Candidates {
    pub tokens: usize,
    pub positions: Var,
    pub log_scales: Var,
    /// Network residual before the static offset.
    pub rot6d_residual: Var,
    pub rot6d: Var,
    pub opacity_logits: Var,
    pub gate_logits: Var,
    pub sh: Var,
}

fn add_row(g: &mut Graph, x: Var, row: &[f64]) -> Result<Var> {
    let c = g.constant(Tensor::vector(row));
    g.add(x, c)
}

/// Splits raw head outputs (`[T, 16·14]` and `[T, 16·48]`) into candidate
/// attributes and applies the static offsets.
pub fn candidates_from_raw(g: &mut Graph, cfg: &DecoderConfig, geo: Var, app: Var) -> Result<Candidates> {
    let tokens = g.shape(geo)[0];
    if g.shape(geo) != [tokens, CANDIDATES * GEO_CHANNELS] || g.shape(app) != [tokens, CANDIDATES * SH_WIDTH] {
        return Err(Error::ShapeMismatch {
            op: "candidates_from_raw",
            lhs: g.shape(geo).to_vec(),
            rhs: g.shape(app).to_vec(),
        });
    }
    let rows = tokens * CANDIDATES;
    let geo = g.reshape(geo, &[rows, GEO_CHANNELS])?;
    let sh = g.reshape(app, &[rows, SH_WIDTH])?;
    let pos = g.slice(geo, 1, 0, 3)?;
    let positions = add_row(g, pos, &cfg.mean_offset)?;
    let ls = g.slice(geo, 1, 3, 6)?;
    let log_scales = g.offset(ls, cfg.log_scale_offset);
    let rot6d_residual = g.slice(geo, 1, 6, 12)?;
    let rot6d = add_row(g, rot6d_residual, &cfg.rot6d_offset)?;
    let op = g.slice(geo, 1, 12, 13)?;
    let opacity_logits = g.offset(op, cfg.opacity_offset);
    let gate_logits = g.slice(geo, 1, 13, 14)?;
    Ok(Candidates {
        tokens,
        positions,
        log_scales,
        rot6d_residual,
        rot6d,
        opacity_logits,
        gate_logits,
        sh,
    })
}

/// Runs both heads on the final stream features (`[T, d]` each).
pub fn decode_candidates(
    g: &mut Graph,
    p: &Bound,
    params: &DecoderParams,
    cfg: &DecoderConfig,
    geo_features: Var,
    app_features: Var,
) -> Result<Candidates> {
    let geo = params.geo_norm.forward(g, p, geo_features)?;
    let geo = params.geo_head.forward(g, p, geo)?;
    let app = params.app_norm.forward(g, p, app_features)?;
    let app = params.app_head.forward(g, p, app)?;
    candidates_from_raw(g, cfg, geo, app)
}

/// Stage and transition coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePoint {
    pub stage: u32,
    pub lambda: f64,
}

impl StagePoint {
    pub fn settled(stage: u32) -> Self {
        Self { stage, lambda: 1.0 }
    }

    /// Gaussians per token, `2^s`.
    pub fn per_token(&self) -> usize {
        1 << self.stage
    }
}

/// Candidates per merged Gaussian at `stage`.
pub fn group_size(stage: u32) -> Result<usize> {
    if stage > MAX_STAGE {
        return Err(Error::invalid(format!("stage {stage} exceeds {MAX_STAGE}")));
    }
    Ok(CANDIDATES >> stage)
}

/// Attributes in the domains where merging and interpolation are linear.
#[derive(Clone, Copy, Debug)]
pub struct Native {
    pub means: Var,
    pub log_scales: Var,
    pub rot6d: Var,
    /// `ln(1 − α)`.
    pub log_transmittance: Var,
    pub sh: Var,
}

/// Candidate attributes in native domains, opacity clamped to `(1e-7, 1 − 1e-7)`.
pub fn candidate_native(g: &mut Graph, c: &Candidates) -> Native {
    let alpha = g.sigmoid(c.opacity_logits);
    let log_transmittance = log_transmittance(g, alpha);
    Native {
        means: c.positions,
        log_scales: c.log_scales,
        rot6d: c.rot6d,
        log_transmittance,
        sh: c.sh,
    }
}

fn log_transmittance(g: &mut Graph, alpha: Var) -> Var {
    let a = g.clamp(alpha, OPACITY_EPS, 1.0 - OPACITY_EPS);
    let u = g.neg(a);
    let u = g.offset(u, 1.0);
    g.log(u)
}

/// Gate weights `[rows / b, b]`: softmax of `logits / tau` within consecutive groups.
pub fn group_weights(g: &mut Graph, gate_logits: Var, group: usize, tau: f64) -> Result<Var> {
    let rows = g.shape(gate_logits)[0];
    if group == 0 || rows % group != 0 {
        return Err(Error::invalid(format!("{rows} candidates do not split into groups of {group}")));
    }
    let grouped = g.reshape(gate_logits, &[rows / group, group])?;
    g.softmax(grouped, 1, tau)
}

fn weighted_sum(g: &mut Graph, x: Var, weights: Var) -> Result<Var> {
    let (groups, b) = (g.shape(weights)[0], g.shape(weights)[1]);
    let k = g.shape(x)[1];
    let x = g.reshape(x, &[groups, b, k])?;
    let w = g.reshape(weights, &[groups, b, 1])?;
    let prod = g.mul(x, w)?;
    g.sum_axis(prod, 1)
}

/// Merges consecutive groups of native attributes with weights `[groups, b]`.
pub fn merge_native(g: &mut Graph, n: &Native, weights: Var) -> Result<Native> {
    let b = g.shape(weights)[1];
    let ls = weighted_sum(g, n.log_scales, weights)?;
    Ok(Native {
        means: weighted_sum(g, n.means, weights)?,
        log_scales: g.offset(ls, (b as f64).ln() / 3.0),
        rot6d: weighted_sum(g, n.rot6d, weights)?,
        log_transmittance: weighted_sum(g, n.log_transmittance, weights)?,
        sh: weighted_sum(g, n.sh, weights)?,
    })
}

fn repeat_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let (rows, k) = (g.shape(x)[0], g.shape(x)[1]);
    let x = g.reshape(x, &[rows, 1, k])?;
    let x = g.broadcast_to(x, &[rows, 2, k])?;
    g.reshape(x, &[2 * rows, k])
}

/// Each parent becomes two consecutive identical children with scale
/// `· 2^(−1/3)` and transmittance `√u`.
pub fn split_native(g: &mut Graph, n: &Native) -> Result<Native> {
    let ls = repeat_rows(g, n.log_scales)?;
    let lu = repeat_rows(g, n.log_transmittance)?;
    Ok(Native {
        means: repeat_rows(g, n.means)?,
        log_scales: g.offset(ls, -(2f64.ln()) / 3.0),
        rot6d: repeat_rows(g, n.rot6d)?,
        log_transmittance: g.scale(lu, 0.5),
        sh: repeat_rows(g, n.sh)?,
    })
}

fn lerp(g: &mut Graph, a: Var, b: Var, lambda: f64) -> Result<Var> {
    let a = g.scale(a, 1.0 - lambda);
    let b = g.scale(b, lambda);
    g.add(a, b)
}

/// `(1 − λ)·prev + λ·cur` attribute-wise in native domains.
pub fn interpolate_native(g: &mut Graph, prev: &Native, cur: &Native, lambda: f64) -> Result<Native> {
    Ok(Native {
        means: lerp(g, prev.means, cur.means, lambda)?,
        log_scales: lerp(g, prev.log_scales, cur.log_scales, lambda)?,
        rot6d: lerp(g, prev.rot6d, cur.rot6d, lambda)?,
        log_transmittance: lerp(g, prev.log_transmittance, cur.log_transmittance, lambda)?,
        sh: lerp(g, prev.sh, cur.sh, lambda)?,
    })
}

/// Gram–Schmidt of `[N, 6]` into column-stacked rotations `[N, 9]`.
pub fn rot6d_to_matrix_var(g: &mut Graph, r6: Var) -> Result<Var> {
    let rows = g.shape(r6)[0];
    let d = g.value(r6).data();
    for r in 0..rows {
        let a1 = &d[6 * r..6 * r + 3];
        if (a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]).sqrt() < ROT_EPS {
            return Err(Error::Degenerate(format!("6D rotation {r} has a near-zero first column")));
        }
    }
    let a1 = g.slice(r6, 1, 0, 3)?;
    let a2 = g.slice(r6, 1, 3, 6)?;
    let b1 = g.normalize_l2(a1, 1)?;
    let dot = g.mul(a2, b1)?;
    let dot = g.sum_axis(dot, 1)?;
    let dot = g.reshape(dot, &[rows, 1])?;
    let proj = g.mul(dot, b1)?;
    let rest = g.sub(a2, proj)?;
    let b2 = g.normalize_l2(rest, 1)?;
    let b3 = g.cross3(b1, b2)?;
    g.concat(&[b1, b2, b3], 1)
}

/// Maps native attributes to renderer inputs.
pub fn activate(g: &mut Graph, n: &Native) -> Result<SceneVars> {
    let rotations = rot6d_to_matrix_var(g, n.rot6d)?;
    let u = g.exp(n.log_transmittance);
    let neg = g.neg(u);
    Ok(SceneVars {
        means: n.means,
        scales: g.exp(n.log_scales),
        rotations,
        opacities: g.offset(neg, 1.0),
        sh: n.sh,
    })
}

/// Native attributes of the `M · 2^s` Gaussians at `point`.
pub fn stage_native(g: &mut Graph, c: &Candidates, point: StagePoint, tau: f64) -> Result<Native> {
    if !(0.0..=1.0).contains(&point.lambda) {
        return Err(Error::invalid(format!("transition coefficient {} outside [0, 1]", point.lambda)));
    }
    let b = group_size(point.stage)?;
    let native = candidate_native(g, c);
    let w = group_weights(g, c.gate_logits, b, tau)?;
    let current = merge_native(g, &native, w)?;
    if point.lambda == 1.0 {
        return Ok(current);
    }
    if point.stage == 0 {
        return Err(Error::invalid("stage 0 has no previous stage to interpolate from"));
    }
    let wp = group_weights(g, c.gate_logits, 2 * b, tau)?;
    let parents = merge_native(g, &native, wp)?;
    let previous = split_native(g, &parents)?;
    interpolate_native(g, &previous, &current, point.lambda)
}

/// The decoded scene at `point`.
pub fn decode_stage(g: &mut Graph, c: &Candidates, point: StagePoint, tau: f64) -> Result<SceneVars> {
    let n = stage_native(g, c, point, tau)?;
    activate(g, &n)
}

/// One Gaussian in native parameters, for worked examples and oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rot6d: [f64; 6],
    pub opacity: f64,
    pub sh: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: [f64; 3], scale: f64, opacity: f64) -> Self {
        Self {
            mean,
            log_scale: [scale.ln(); 3],
            rot6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            opacity,
            sh: vec![0.0; SH_WIDTH],
        }
    }
}

fn constant_rows(g: &mut Graph, items: &[GaussianParams], width: usize, f: impl Fn(&GaussianParams) -> Vec<f64>) -> Result<Var> {
    let data: Vec<f64> = items.iter().flat_map(f).collect();
    Ok(g.constant(Tensor::new(&[items.len(), width], data)?))
}

fn native_of(g: &mut Graph, items: &[GaussianParams]) -> Result<Native> {
    if let Some(p) = items.iter().find(|p| !(p.opacity > 0.0 && p.opacity < 1.0)) {
        return Err(Error::invalid(format!("opacity {} has no finite log-transmittance", p.opacity)));
    }
    if items.iter().any(|p| p.sh.len() != SH_WIDTH) {
        return Err(Error::invalid("SH block must hold 48 coefficients"));
    }
    let alpha = constant_rows(g, items, 1, |p| vec![p.opacity])?;
    Ok(Native {
        means: constant_rows(g, items, 3, |p| p.mean.to_vec())?,
        log_scales: constant_rows(g, items, 3, |p| p.log_scale.to_vec())?,
        rot6d: constant_rows(g, items, 6, |p| p.rot6d.to_vec())?,
        log_transmittance: log_transmittance(g, alpha),
        sh: constant_rows(g, items, SH_WIDTH, |p| p.sh.clone())?,
    })
}

fn params_of(g: &Graph, n: &Native) -> Vec<GaussianParams> {
    let rows = g.shape(n.means)[0];
    let d = |v: Var| g.value(v).data();
    (0..rows)
        .map(|r| GaussianParams {
            mean: d(n.means)[3 * r..3 * r + 3].try_into().expect("3"),
            log_scale: d(n.log_scales)[3 * r..3 * r + 3].try_into().expect("3"),
            rot6d: d(n.rot6d)[6 * r..6 * r + 6].try_into().expect("6"),
            opacity: 1.0 - d(n.log_transmittance)[r].exp(),
            sh: d(n.sh)[SH_WIDTH * r..SH_WIDTH * (r + 1)].to_vec(),
        })
        .collect()
}

/// Temperature-scaled softmax of one group's gate logits.
pub fn gate_weights(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[logits.len(), 1], logits.to_vec())?);
    let w = group_weights(&mut g, x, logits.len(), tau)?;
    Ok(g.value(w).data().to_vec())
}

/// Merges one group with explicit weights (which must sum to 1).
pub fn merge_group(items: &[GaussianParams], weights: &[f64]) -> Result<GaussianParams> {
    if items.is_empty() || items.len() != weights.len() {
        return Err(Error::invalid("merge_group needs one weight per candidate"));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("merge weights must sum to 1"));
    }
    let mut g = Graph::new();
    let n = native_of(&mut g, items)?;
    let w = g.constant(Tensor::new(&[1, weights.len()], weights.to_vec())?);
    let merged = merge_native(&mut g, &n, w)?;
    Ok(params_of(&g, &merged).remove(0))
}

/// Inverse binary split of one parent.
pub fn split_parent(parent: &GaussianParams) -> Result<[GaussianParams; 2]> {
    let mut g = Graph::new();
    let n = native_of(&mut g, std::slice::from_ref(parent))?;
    let children = split_native(&mut g, &n)?;
    let mut out = params_of(&g, &children);
    let second = out.pop().expect("two children");
    let first = out.pop().expect("two children");
    Ok([first, second])
}

/// Gram–Schmidt rotation (rows of the returned array are matrix rows).
pub fn rot6d_to_matrix(r6: [f64; 6]) -> Result<[[f64; 3]; 3]> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 6], r6.to_vec())?);
    let r = rot6d_to_matrix_var(&mut g, x)?;
    let d = g.value(r).data();
    let mut m = [[0.0; 3]; 3];
    for (j, col) in d.chunks(3).enumerate() {
        for i in 0..3 {
            m[i][j] = col[i];
        }
    }
    Ok(m)
}
