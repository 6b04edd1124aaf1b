use rayon::prelude::*;

use super::project::{self, CameraMats, SplatGrad};
use super::{Camera, RenderConfig, RenderGrads, RenderOutput, Splat};
use crate::scene::SceneRef;

const DEPTH_FLOOR: f64 = 1e-6;

pub(super) fn preprocess(scene: &SceneRef, camera: &Camera, cfg: &RenderConfig) -> Vec<Splat> {
    let mats = CameraMats::new(camera);
    let mut splats: Vec<Splat> = (0..scene.len())
        .filter_map(|n| project::project(scene, n, &mats, camera, cfg))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

#[inline]
fn covers(s: &Splat, x: f64, y: f64) -> bool {
    (x - s.mean[0]).abs() <= s.radius && (y - s.mean[1]).abs() <= s.radius
}

struct Hit {
    k: usize,
    alpha: f64,
    transmittance: f64,
    falloff: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

/// Front-to-back blending at one pixel; `visit` sees every contributing splat.
/// Returns (Σ c α T, Σ z α T, final transmittance).
#[inline]
fn blend_pixel(
    splats: &[Splat],
    order: impl Iterator<Item = usize>,
    x: f64,
    y: f64,
    cfg: &RenderConfig,
    mut visit: impl FnMut(Hit),
) -> ([f64; 3], f64, f64) {
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut t = 1.0;
    for k in order {
        let s = &splats[k];
        if !covers(s, x, y) {
            continue;
        }
        let dx = x - s.mean[0];
        let dy = y - s.mean[1];
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        let falloff = (-0.5 * q).exp();
        let raw = s.opacity * falloff;
        let clamped = raw > cfg.alpha_max;
        let alpha = if clamped { cfg.alpha_max } else { raw };
        let w = alpha * t;
        for c in 0..3 {
            color[c] += s.color[c] * w;
        }
        depth += s.depth * w;
        visit(Hit { k, alpha, transmittance: t, falloff, clamped, dx, dy });
        t *= 1.0 - alpha;
        if t < cfg.min_transmittance {
            break;
        }
    }
    (color, depth, t)
}

fn finish(out: &mut RenderOutput, i: usize, acc: ([f64; 3], f64, f64), bg: [f64; 3]) {
    let (color, depth, t) = acc;
    for c in 0..3 {
        out.color[3 * i + c] = color[c] + t * bg[c];
    }
    let o = 1.0 - t;
    out.accumulation[i] = o;
    out.depth[i] = depth / o.max(DEPTH_FLOOR);
}

fn blank(camera: &Camera) -> RenderOutput {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    RenderOutput {
        width: w,
        height: h,
        color: vec![0.0; w * h * 3],
        depth: vec![0.0; w * h],
        accumulation: vec![0.0; w * h],
    }
}

pub(super) fn forward_reference(splats: &[Splat], camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
    let mut out = blank(camera);
    let (width, height) = (out.width, out.height);
    for py in 0..height {
        for px in 0..width {
            let acc = blend_pixel(splats, 0..splats.len(), px as f64 + 0.5, py as f64 + 0.5, cfg, |_| {});
            finish(&mut out, py * width + px, acc, cfg.background);
        }
    }
    out
}

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    /// Positions into the sorted splat list, ascending.
    list: Vec<usize>,
}

/// Conservative binning: each list holds every splat whose support box can
/// reach a pixel center of the tile (one pixel of slack).
fn bin(splats: &[Splat], width: usize, height: usize, size: usize) -> Vec<Tile> {
    let (tw, th) = (width.div_ceil(size), height.div_ceil(size));
    let mut tiles: Vec<Tile> = (0..th)
        .flat_map(|ty| {
            (0..tw).map(move |tx| Tile {
                x0: tx * size,
                y0: ty * size,
                x1: ((tx + 1) * size).min(width),
                y1: ((ty + 1) * size).min(height),
                list: Vec::new(),
            })
        })
        .collect();
    let clamp = |v: f64, n: usize| -> usize { (v.max(0.0) as usize).min(n - 1) };
    for (k, s) in splats.iter().enumerate() {
        let r = s.radius + 1.0;
        let tx0 = clamp(((s.mean[0] - r) / size as f64).floor(), tw);
        let tx1 = clamp(((s.mean[0] + r) / size as f64).floor(), tw);
        let ty0 = clamp(((s.mean[1] - r) / size as f64).floor(), th);
        let ty1 = clamp(((s.mean[1] + r) / size as f64).floor(), th);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tw + tx].list.push(k);
            }
        }
    }
    tiles
}

pub(super) fn forward_tiled(splats: &[Splat], camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
    let mut out = blank(camera);
    let tiles = bin(splats, out.width, out.height, cfg.tile_size);
    let results: Vec<Vec<([f64; 3], f64, f64)>> = tiles
        .par_iter()
        .map(|tile| {
            let mut px_out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
            for py in tile.y0..tile.y1 {
                for px in tile.x0..tile.x1 {
                    let order = tile.list.iter().copied();
                    px_out.push(blend_pixel(splats, order, px as f64 + 0.5, py as f64 + 0.5, cfg, |_| {}));
                }
            }
            px_out
        })
        .collect();
    let width = out.width;
    for (tile, res) in tiles.iter().zip(results) {
        let mut it = res.into_iter();
        for py in tile.y0..tile.y1 {
            for px in tile.x0..tile.x1 {
                let acc = it.next().expect("one result per pixel");
                finish(&mut out, py * width + px, acc, cfg.background);
            }
        }
    }
    out
}

struct TileGrads {
    /// Aligned with the tile's list.
    splat: Vec<SplatGrad>,
    background: [f64; 3],
}

fn backward_tile(
    tile: &Tile,
    splats: &[Splat],
    width: usize,
    cfg: &RenderConfig,
    d_color: &[f64],
    d_depth: &[f64],
    d_accum: &[f64],
) -> TileGrads {
    let mut local = vec![SplatGrad::default(); tile.list.len()];
    let mut background = [0.0; 3];
    let mut hits: Vec<Hit> = Vec::new();
    for py in tile.y0..tile.y1 {
        for px in tile.x0..tile.x1 {
            let i = py * width + px;
            hits.clear();
            let (_, dsum, t_final) = blend_pixel(
                splats,
                tile.list.iter().copied(),
                px as f64 + 0.5,
                py as f64 + 0.5,
                cfg,
                |h| hits.push(h),
            );
            let gc = [d_color[3 * i], d_color[3 * i + 1], d_color[3 * i + 2]];
            let o = 1.0 - t_final;
            let denom = o.max(DEPTH_FLOOR);
            let gd = d_depth[i] / denom;
            let mut go = d_accum[i];
            if o > DEPTH_FLOOR {
                go -= d_depth[i] * dsum / (o * o);
            }
            let bg = cfg.background;
            let gt = gc[0] * bg[0] + gc[1] * bg[1] + gc[2] * bg[2] - go;
            for c in 0..3 {
                background[c] += gc[c] * t_final;
            }
            let mut suffix = gt * t_final;
            for h in hits.iter().rev() {
                let s = &splats[h.k];
                let g = &mut local[tile.list.binary_search(&h.k).expect("hit comes from the tile list")];
                let w = gc[0] * s.color[0] + gc[1] * s.color[1] + gc[2] * s.color[2] + gd * s.depth;
                let g_alpha = h.transmittance * w - suffix / (1.0 - h.alpha);
                suffix += w * h.alpha * h.transmittance;
                let weight = h.alpha * h.transmittance;
                for c in 0..3 {
                    g.color[c] += gc[c] * weight;
                }
                g.depth += gd * weight;
                if !h.clamped {
                    g.opacity += g_alpha * h.falloff;
                    let gq = -0.5 * h.alpha * g_alpha;
                    g.conic[0] += gq * h.dx * h.dx;
                    g.conic[1] += gq * 2.0 * h.dx * h.dy;
                    g.conic[2] += gq * h.dy * h.dy;
                    g.mean[0] -= gq * 2.0 * (s.conic[0] * h.dx + s.conic[1] * h.dy);
                    g.mean[1] -= gq * 2.0 * (s.conic[1] * h.dx + s.conic[2] * h.dy);
                }
            }
        }
    }
    TileGrads { splat: local, background }
}

pub(super) fn backward(
    scene: &SceneRef,
    camera: &Camera,
    cfg: &RenderConfig,
    d_color: &[f64],
    d_depth: &[f64],
    d_accum: &[f64],
) -> RenderGrads {
    let splats = preprocess(scene, camera, cfg);
    let (width, height) = (camera.intrinsics.width, camera.intrinsics.height);
    let tiles = bin(&splats, width, height, cfg.tile_size);
    let per_tile: Vec<TileGrads> = tiles
        .par_iter()
        .map(|t| backward_tile(t, &splats, width, cfg, d_color, d_depth, d_accum))
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); splats.len()];
    let mut background = [0.0; 3];
    for (tile, tg) in tiles.iter().zip(&per_tile) {
        for (k, g) in tile.list.iter().zip(&tg.splat) {
            splat_grads[*k].add(g);
        }
        for c in 0..3 {
            background[c] += tg.background[c];
        }
    }

    let n = scene.len();
    let mut out = RenderGrads {
        means: vec![0.0; 3 * n],
        scales: vec![0.0; 3 * n],
        rotations: vec![0.0; 9 * n],
        opacities: vec![0.0; n],
        sh: vec![0.0; 48 * n],
        background,
    };
    let mats = CameraMats::new(camera);
    for (s, g) in splats.iter().zip(&splat_grads) {
        let gg = project::project_backward(scene, s, g, &mats, camera);
        let i = s.index;
        out.means[3 * i..3 * i + 3].copy_from_slice(&gg.mean);
        out.scales[3 * i..3 * i + 3].copy_from_slice(&gg.scale);
        for j in 0..3 {
            for r in 0..3 {
                out.rotations[9 * i + 3 * j + r] = gg.rotation[r][j];
            }
        }
        out.opacities[i] = gg.opacity;
        out.sh[48 * i..48 * i + 48].copy_from_slice(&gg.sh);
    }
    out
}
