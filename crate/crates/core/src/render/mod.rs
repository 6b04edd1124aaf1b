//! Differentiable CPU splatting.
//!
//! Gaussians are projected with the EWA approximation, sorted globally by
//! view depth (ties broken by index), and alpha-blended front to back per
//! pixel. Pixel `(px, py)` samples the image plane at `(px + 0.5, py + 0.5)`.
//! The tiled renderer and the brute-force reference share the per-pixel
//! blending routine and support predicate, so they agree bitwise.

mod project;
mod raster;
pub mod sh;

use serde::{Deserialize, Serialize};

use crate::diff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics};
use crate::scene::{GaussianScene, SceneRef, SceneVars, SH_WIDTH};

pub use project::{covariance3d, Splat};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Added to the diagonal of every screen covariance (px²).
    pub dilation: f64,
    /// Upper clamp on the per-splat blending weight.
    pub alpha_max: f64,
    /// Blending stops once transmittance falls below this.
    pub min_transmittance: f64,
    pub z_near: f64,
    /// Support half-width in standard deviations.
    pub cull_sigma: f64,
    pub tile_size: usize,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            dilation: 0.3,
            alpha_max: 0.99,
            min_transmittance: 1e-4,
            z_near: 0.01,
            cull_sigma: 3.0,
            tile_size: 16,
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

/// Row-major maps; `color` is interleaved RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub accumulation: Vec<f64>,
}

/// Gradients of a scalar with respect to every rendered attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGrads {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacities: Vec<f64>,
    pub sh: Vec<f64>,
    pub background: [f64; 3],
}

fn check(scene: &SceneRef, camera: &Camera, cfg: &RenderConfig) -> Result<()> {
    scene.check()?;
    camera.intrinsics.validate()?;
    if cfg.tile_size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    Ok(())
}

/// Projects, culls and depth-sorts the scene for one camera.
pub fn preprocess(scene: SceneRef, camera: &Camera, cfg: &RenderConfig) -> Result<Vec<Splat>> {
    check(&scene, camera, cfg)?;
    Ok(raster::preprocess(&scene, camera, cfg))
}

/// Tiled renderer.
pub fn render(scene: SceneRef, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    check(&scene, camera, cfg)?;
    let splats = raster::preprocess(&scene, camera, cfg);
    Ok(raster::forward_tiled(&splats, camera, cfg))
}

/// Per-pixel loop over every splat; the oracle for [`render`].
pub fn render_reference(scene: SceneRef, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    check(&scene, camera, cfg)?;
    let splats = raster::preprocess(&scene, camera, cfg);
    Ok(raster::forward_reference(&splats, camera, cfg))
}

/// Adjoint of [`render`] given upstream gradients on the three output maps.
pub fn render_backward(
    scene: SceneRef,
    camera: &Camera,
    cfg: &RenderConfig,
    d_color: &[f64],
    d_depth: &[f64],
    d_accumulation: &[f64],
) -> Result<RenderGrads> {
    check(&scene, camera, cfg)?;
    let pixels = camera.intrinsics.width * camera.intrinsics.height;
    if d_color.len() != 3 * pixels || d_depth.len() != pixels || d_accumulation.len() != pixels {
        return Err(Error::invalid("upstream gradient maps do not match the image size"));
    }
    Ok(raster::backward(&scene, camera, cfg, d_color, d_depth, d_accumulation))
}

pub fn render_scene(scene: &GaussianScene, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    render(scene.as_ref(), camera, cfg)
}

struct RenderOp {
    camera: Camera,
    cfg: RenderConfig,
}

fn scene_from_inputs<'a>(inputs: &[&'a Tensor]) -> SceneRef<'a> {
    SceneRef {
        means: inputs[0].data(),
        scales: inputs[1].data(),
        rotations: inputs[2].data(),
        opacities: inputs[3].data(),
        sh: inputs[4].data(),
    }
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let pixels = grad.len() / 5;
        let mut dc = Vec::with_capacity(3 * pixels);
        let mut dd = Vec::with_capacity(pixels);
        let mut da = Vec::with_capacity(pixels);
        for p in grad.chunks_exact(5) {
            dc.extend_from_slice(&p[..3]);
            dd.push(p[3]);
            da.push(p[4]);
        }
        let scene = scene_from_inputs(inputs);
        let g = raster::backward(&scene, &self.camera, &self.cfg, &dc, &dd, &da);
        vec![Some(g.means), Some(g.scales), Some(g.rotations), Some(g.opacities), Some(g.sh)]
    }
}

/// Records a render on the graph. The output has shape `[H·W, 5]` with
/// columns `(r, g, b, depth, accumulation)`.
pub fn render_var(g: &mut Graph, scene: &SceneVars, camera: &Camera, cfg: &RenderConfig) -> Result<Var> {
    let inputs = [scene.means, scene.scales, scene.rotations, scene.opacities, scene.sh];
    let n = g.shape(scene.opacities)[0];
    let expect: [&[usize]; 5] = [&[n, 3], &[n, 3], &[n, 9], &[n, 1], &[n, SH_WIDTH]];
    for (v, want) in inputs.iter().zip(expect) {
        if g.shape(*v) != want {
            return Err(Error::ShapeMismatch { op: "render", lhs: g.shape(*v).to_vec(), rhs: want.to_vec() });
        }
    }
    let tensors: Vec<&Tensor> = inputs.iter().map(|v| g.value(*v)).collect();
    let scene_ref = scene_from_inputs(&tensors);
    let out = render(scene_ref, camera, cfg)?;
    let pixels = out.width * out.height;
    let mut data = Vec::with_capacity(pixels * 5);
    for i in 0..pixels {
        data.extend_from_slice(&out.color[3 * i..3 * i + 3]);
        data.push(out.depth[i]);
        data.push(out.accumulation[i]);
    }
    let output = Tensor::new(&[pixels, 5], data)?;
    Ok(g.custom(Box::new(RenderOp { camera: *camera, cfg: *cfg }), &inputs, output))
}
