//! Input context construction and the dual-branch latent encoder.
//!
//! The context holds one token per image patch: a camera part (projected
//! Plücker features plus the per-view camera code) concatenated with an
//! appearance part (projected pixels). A fixed set of learnable latents plus
//! register tokens is refined by `B` blocks; in each block the state is
//! projected into a geometry and an appearance stream, each stream
//! cross-attends to the context and then self-attends `L` times, and a
//! two-layer mixer fuses the streams back into the latent state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{camera_code, patchify, plucker_rays, CameraCodeParams, NormalizedScene};
use crate::nn::{trunc_normal, Linear, Mlp, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Number of latent scene tokens `M`.
    pub latents: usize,
    /// Token width `d`.
    pub width: usize,
    pub blocks: usize,
    /// Self-attention layers per stream and block.
    pub self_layers: usize,
    pub heads: usize,
    pub rgb_width: usize,
    pub ray_width: usize,
    pub registers: usize,
    pub patch_size: usize,
    pub fourier_frequencies: usize,
    /// Initial value of the learned per-layer residual scales.
    pub layer_scale_init: f64,
    /// Standard deviation of the initial latent and register tokens.
    pub latent_init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latents: 64,
            width: 64,
            blocks: 2,
            self_layers: 2,
            heads: 4,
            rgb_width: 64,
            ray_width: 32,
            registers: 8,
            patch_size: 8,
            fourier_frequencies: 6,
            layer_scale_init: 0.1,
            latent_init_std: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("encoder: {m}")));
        if self.latents == 0 || self.width == 0 || self.heads == 0 || self.patch_size == 0 {
            return bad("latents, width, heads and patch_size must be positive");
        }
        if self.width % self.heads != 0 {
            return bad("width must be divisible by heads");
        }
        if self.rgb_width == 0 || self.ray_width == 0 {
            return bad("rgb_width and ray_width must be positive");
        }
        if !(self.latent_init_std > 0.0) || !self.layer_scale_init.is_finite() {
            return bad("latent_init_std must be positive and layer_scale_init finite");
        }
        Ok(())
    }

    pub fn context_width(&self) -> usize {
        self.rgb_width + self.ray_width
    }
}

/// Pre-norm multi-head attention with a learned residual scale.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub norm_q: Norm,
    /// Normalization of the key/value source (cross-attention only).
    pub norm_kv: Option<Norm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub scale: ParamId,
}

impl AttentionParams {
    fn new(store: &mut ParamStore, name: &str, width: usize, source: Option<usize>, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let kv_in = source.unwrap_or(width);
        Ok(Self {
            norm_q: Norm::new(store, &format!("{name}.norm_q"), width)?,
            norm_kv: match source {
                Some(c) => Some(Norm::new(store, &format!("{name}.norm_kv"), c)?),
                None => None,
            },
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_in, width, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_in, width, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng)?,
            scale: store.register(&format!("{name}.scale"), Tensor::full(&[width], cfg.layer_scale_init))?,
        })
    }
}

/// Pre-norm feed-forward block (hidden width `4d`) with a learned residual scale.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub norm: Norm,
    pub mlp: Mlp,
    pub scale: ParamId,
}

impl FeedForwardParams {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.width;
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), d)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, d, rng)?,
            scale: store.register(&format!("{name}.scale"), Tensor::full(&[d], cfg.layer_scale_init))?,
        })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        let h = g.mul(h, p.var(self.scale))?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct StreamParams {
    pub proj: Linear,
    pub cross: AttentionParams,
    pub cross_ffn: FeedForwardParams,
    pub layers: Vec<(AttentionParams, FeedForwardParams)>,
}

impl StreamParams {
    fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.width;
        let mut layers = Vec::with_capacity(cfg.self_layers);
        for l in 0..cfg.self_layers {
            layers.push((
                AttentionParams::new(store, &format!("{name}.self{l}"), d, None, cfg, rng)?,
                FeedForwardParams::new(store, &format!("{name}.self{l}.ffn"), cfg, rng)?,
            ));
        }
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), d, d, true, rng)?,
            cross: AttentionParams::new(store, &format!("{name}.cross"), d, Some(cfg.context_width()), cfg, rng)?,
            cross_ffn: FeedForwardParams::new(store, &format!("{name}.cross.ffn"), cfg, rng)?,
            layers,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub geo: StreamParams,
    pub app: StreamParams,
    pub mixer: Mlp,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub latents: ParamId,
    pub registers: Option<ParamId>,
    pub ray_proj: Linear,
    pub rgb_proj: Linear,
    pub camera_code: CameraCodeParams,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, p) = (cfg.width, cfg.patch_size);
        let latents = store.register("encoder.latents", trunc_normal(rng, &[cfg.latents, d], cfg.latent_init_std))?;
        let registers = if cfg.registers > 0 {
            Some(store.register("encoder.registers", trunc_normal(rng, &[cfg.registers, d], cfg.latent_init_std))?)
        } else {
            None
        };
        let ray_proj = Linear::new(store, "encoder.ray_proj", p * p * 6, cfg.ray_width, false, rng)?;
        let rgb_proj = Linear::new(store, "encoder.rgb_proj", p * p * 3, cfg.rgb_width, true, rng)?;
        let camera_code = CameraCodeParams::new(store, cfg.ray_width, cfg.fourier_frequencies, rng)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            blocks.push(BlockParams {
                geo: StreamParams::new(store, &format!("encoder.block{b}.geo"), cfg, rng)?,
                app: StreamParams::new(store, &format!("encoder.block{b}.app"), cfg, rng)?,
                mixer: Mlp::new(store, &format!("encoder.block{b}.mixer"), 2 * d, 2 * d, d, rng)?,
            });
        }
        Ok(Self {
            latents,
            registers,
            ray_proj,
            rgb_proj,
            camera_code,
            blocks,
        })
    }
}

/// Context tokens `[V·P, rgb_width + ray_width]`, camera part first.
#[derive(Clone, Copy, Debug)]
pub struct InputContext {
    pub tokens: Var,
    pub views: usize,
    pub patches_per_view: usize,
}

/// Stacked patchified ray and pixel features of all views.
fn patch_features(scene: &NormalizedScene, patch: usize) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let first = scene.views.first().ok_or_else(|| Error::invalid("no input views"))?;
    let (w, h) = (first.image.width, first.image.height);
    let mut rays = Vec::new();
    let mut rgb = Vec::new();
    for v in &scene.views {
        if v.image.width != w || v.image.height != h || v.intrinsics.width != w || v.intrinsics.height != h {
            return Err(Error::invalid("all input views must share one image size"));
        }
        let map = plucker_rays(&v.pose, &v.intrinsics)?;
        rays.extend(patchify(&map.data, h, w, 6, patch)?);
        rgb.extend(patchify(&v.image.data, h, w, 3, patch)?);
    }
    Ok((rays, rgb, (h / patch) * (w / patch)))
}

pub fn build_context(g: &mut Graph, p: &Bound, params: &EncoderParams, cfg: &EncoderConfig, scene: &NormalizedScene) -> Result<InputContext> {
    let ps = cfg.patch_size;
    let (rays, rgb, per_view) = patch_features(scene, ps)?;
    let views = scene.views.len();
    let rows = views * per_view;
    let rays = g.constant(Tensor::new(&[rows, ps * ps * 6], rays)?);
    let rgb = g.constant(Tensor::new(&[rows, ps * ps * 3], rgb)?);
    let ray_tokens = params.ray_proj.forward(g, p, rays)?;
    let mut codes = Vec::with_capacity(views);
    for v in &scene.views {
        codes.push(camera_code(g, p, &params.camera_code, &v.pose, &v.intrinsics)?);
    }
    let codes = g.concat(&codes, 0)?;
    let codes = g.reshape(codes, &[views, 1, cfg.ray_width])?;
    let ray_tokens = g.reshape(ray_tokens, &[views, per_view, cfg.ray_width])?;
    let cam = g.add(ray_tokens, codes)?;
    let cam = g.reshape(cam, &[rows, cfg.ray_width])?;
    let app = params.rgb_proj.forward(g, p, rgb)?;
    let tokens = g.concat(&[cam, app], 1)?;
    Ok(InputContext { tokens, views, patches_per_view: per_view })
}

/// Scaled dot-product attention; returns the output and per-head weights `[n, m]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
    let d = g.shape(q)[1];
    if d % heads != 0 || g.shape(k)[1] != d || g.shape(v)[1] != d {
        return Err(Error::ShapeMismatch { op: "attention", lhs: g.shape(q).to_vec(), rhs: g.shape(k).to_vec() });
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, (h + 1) * dh)?;
        let kh = g.slice(k, 1, h * dh, (h + 1) * dh)?;
        let vh = g.slice(v, 1, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let a = g.softmax(scores, 1, (dh as f64).sqrt())?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let out = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok((out, weights))
}

fn attend(
    g: &mut Graph,
    p: &Bound,
    a: &AttentionParams,
    x: Var,
    source: Option<Var>,
    heads: usize,
    trace: &mut Vec<Vec<Var>>,
) -> Result<Var> {
    let xn = a.norm_q.forward(g, p, x)?;
    let src = match (source, &a.norm_kv) {
        (Some(s), Some(norm)) => norm.forward(g, p, s)?,
        (Some(s), None) => s,
        (None, _) => xn,
    };
    let q = a.q.forward(g, p, xn)?;
    let k = a.k.forward(g, p, src)?;
    let v = a.v.forward(g, p, src)?;
    let (o, w) = attention(g, q, k, v, heads)?;
    trace.push(w);
    let o = a.out.forward(g, p, o)?;
    let o = g.mul(o, p.var(a.scale))?;
    g.add(x, o)
}

fn run_stream(
    g: &mut Graph,
    p: &Bound,
    s: &StreamParams,
    state: Var,
    ctx: Var,
    heads: usize,
    cross_trace: &mut Vec<Vec<Var>>,
) -> Result<Var> {
    let mut f = s.proj.forward(g, p, state)?;
    f = attend(g, p, &s.cross, f, Some(ctx), heads, cross_trace)?;
    f = s.cross_ffn.forward(g, p, f)?;
    let mut self_trace = Vec::new();
    for (attn, ffn) in &s.layers {
        f = attend(g, p, attn, f, None, heads, &mut self_trace)?;
        f = ffn.forward(g, p, f)?;
    }
    Ok(f)
}

/// Encoder result. Register rows are already removed from every field.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Fused latent state `[M, d]`.
    pub scene_tokens: Var,
    /// Final geometry / appearance stream features `[M, d]` (the latents when `B = 0`).
    pub geo: Var,
    pub app: Var,
    /// Cross-attention weights per block and stream (geo then app), one `[M+R, V·P]` map per head.
    pub cross_attention: Vec<Vec<Var>>,
}

pub fn encode_context(g: &mut Graph, p: &Bound, params: &EncoderParams, cfg: &EncoderConfig, ctx: &InputContext) -> Result<EncoderOutput> {
    let m = cfg.latents;
    let mut state = p.var(params.latents);
    if let Some(r) = params.registers {
        state = g.concat(&[state, p.var(r)], 0)?;
    }
    let mut trace = Vec::new();
    let mut streams = None;
    for block in &params.blocks {
        let fg = run_stream(g, p, &block.geo, state, ctx.tokens, cfg.heads, &mut trace)?;
        let fa = run_stream(g, p, &block.app, state, ctx.tokens, cfg.heads, &mut trace)?;
        let joined = g.concat(&[fg, fa], 1)?;
        let mixed = block.mixer.forward(g, p, joined)?;
        state = g.add(state, mixed)?;
        streams = Some((fg, fa));
    }
    let rows = g.shape(state)[0];
    let keep = |g: &mut Graph, v: Var| if rows == m { Ok(v) } else { g.slice(v, 0, 0, m) };
    let scene_tokens = keep(g, state)?;
    let (geo, app) = match streams {
        Some((fg, fa)) => (keep(g, fg)?, keep(g, fa)?),
        None => (scene_tokens, scene_tokens),
    };
    Ok(EncoderOutput { scene_tokens, geo, app, cross_attention: trace })
}

pub fn encode(g: &mut Graph, p: &Bound, params: &EncoderParams, cfg: &EncoderConfig, scene: &NormalizedScene) -> Result<EncoderOutput> {
    let ctx = build_context(g, p, params, cfg, scene)?;
    encode_context(g, p, params, cfg, &ctx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::geometry::{canonicalize, CameraPose, CameraView, Intrinsics};
    use crate::image::Image;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn views(n: usize, size: usize, seed: u64) -> Vec<CameraView> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let a = 0.3 * i as f64 - 0.5;
                let eye = Vector3::new(3.0 * a.sin(), 0.2 * i as f64, -3.0 * a.cos());
                let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
                let f = size as f64 * 1.2;
                let c = size as f64 / 2.0;
                let data = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
                CameraView {
                    pose,
                    intrinsics: Intrinsics::new(f, f, c, c, size, size).unwrap(),
                    image: Image::new(size, size, data).unwrap(),
                }
            })
            .collect()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            latents: 8,
            width: 16,
            blocks: 1,
            self_layers: 1,
            heads: 2,
            rgb_width: 8,
            ray_width: 8,
            registers: 2,
            ..Default::default()
        }
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let params = EncoderParams::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, params)
    }

    #[test]
    fn one_view_gives_one_token_per_patch() {
        let cfg = EncoderConfig::default();
        let (store, params) = setup(&cfg, 0);
        let scene = canonicalize(&views(1, 64, 1)).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let ctx = build_context(&mut g, &p, &params, &cfg, &scene).unwrap();
        assert_eq!(g.shape(ctx.tokens), &[64, 96]);
    }

    #[test]
    fn zero_camera_code_leaves_projected_rays() {
        let cfg = small();
        let (mut store, params) = setup(&cfg, 2);
        let code = params.camera_code;
        store.set_value(code.proj.weight, Tensor::zeros(store.value(code.proj.weight).shape())).unwrap();
        store.set_value(code.proj.bias.unwrap(), Tensor::zeros(&[cfg.ray_width])).unwrap();
        let scene = canonicalize(&views(2, 16, 3)).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let ctx = build_context(&mut g, &p, &params, &cfg, &scene).unwrap();
        let cam = g.slice(ctx.tokens, 1, 0, cfg.ray_width).unwrap();
        let (rays, _, _) = patch_features(&scene, cfg.patch_size).unwrap();
        let rays = g.constant(Tensor::new(&[8, 384], rays).unwrap());
        let direct = params.ray_proj.forward(&mut g, &p, rays).unwrap();
        assert_eq!(g.value(cam), g.value(direct));
    }

    #[test]
    fn single_context_token_gets_all_attention() {
        let cfg = small();
        let (store, params) = setup(&cfg, 4);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = g.constant(trunc_normal(&mut rng, &[1, cfg.context_width()], 1.0));
        let ctx = InputContext { tokens, views: 1, patches_per_view: 1 };
        let out = encode_context(&mut g, &p, &params, &cfg, &ctx).unwrap();
        for w in out.cross_attention.iter().flatten() {
            assert!(g.value(*w).data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small();
        let (store, params) = setup(&cfg, 6);
        let scene = canonicalize(&views(3, 16, 7)).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let out = encode(&mut g, &p, &params, &cfg, &scene).unwrap();
        assert_eq!(out.cross_attention.len(), 2);
        for w in out.cross_attention.iter().flatten() {
            let t = g.value(*w);
            assert_eq!(t.shape(), &[10, 12]);
            for row in t.data().chunks(12) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn latent_count_is_independent_of_views() {
        let cfg = small();
        let (store, params) = setup(&cfg, 8);
        for v in [2, 4, 8] {
            let scene = canonicalize(&views(v, 16, 9)).unwrap();
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let out = encode(&mut g, &p, &params, &cfg, &scene).unwrap();
            assert_eq!(g.shape(out.scene_tokens), &[8, 16]);
            assert!(g.value(out.scene_tokens).all_finite());
        }
    }

    #[test]
    fn zero_blocks_return_the_initial_latents() {
        let cfg = EncoderConfig { blocks: 0, ..small() };
        let (store, params) = setup(&cfg, 10);
        let scene = canonicalize(&views(2, 16, 11)).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let out = encode(&mut g, &p, &params, &cfg, &scene).unwrap();
        assert_eq!(g.value(out.scene_tokens), store.value(params.latents));
        assert_eq!(out.geo, out.scene_tokens);
    }

    #[test]
    fn view_order_does_not_matter() {
        let cfg = small();
        let (store, params) = setup(&cfg, 12);
        let v = views(4, 16, 13);
        let rev: Vec<CameraView> = v.iter().rev().cloned().collect();
        let run = |vs: &[CameraView]| {
            let scene = canonicalize(vs).unwrap();
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let out = encode(&mut g, &p, &params, &cfg, &scene).unwrap();
            g.value(out.scene_tokens).clone()
        };
        assert!(run(&v).max_abs_diff(&run(&rev)) < 1e-9);
    }

    #[test]
    fn encoder_gradients_match_differences() {
        let cfg = small();
        let (store, params) = setup(&cfg, 14);
        let scene = canonicalize(&views(2, 16, 15)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let probe = trunc_normal(&mut rng, &[8, 16], 1.0);
        let points: Vec<Tensor> = store.params().iter().map(|p| p.value.clone()).collect();
        let r = grad_check(
            |g, x| {
                let p = Bound::from_vars(x.to_vec());
                let out = encode(g, &p, &params, &cfg, &scene)?;
                let w = g.constant(probe.clone());
                let geo = g.mul(out.geo, w)?;
                let app = g.mul(out.app, w)?;
                let s = g.add(geo, app)?;
                Ok(g.sum(s))
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
