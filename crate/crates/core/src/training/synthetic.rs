use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, CameraView, Intrinsics};
use crate::image::Image;
use crate::render::{render_scene, Camera, RenderConfig};
use crate::scene::{GaussianScene, RandomScene};

/// Colored blobs in the cube `[-½, ½]³` watched by cameras on a horizontal
/// arc around its center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub blobs: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub radius: f64,
    /// Camera height above the cube center.
    pub elevation: f64,
    /// Angle swept by the whole sequence.
    pub arc_degrees: f64,
    pub held_out: usize,
    pub eval_context: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            blobs: 20,
            frames: 240,
            width: 64,
            height: 64,
            focal: 70.0,
            radius: 1.8,
            elevation: 0.4,
            arc_degrees: 150.0,
            held_out: 4,
            eval_context: 5,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blobs == 0 || self.frames < 2 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("synthetic: blobs, frames and image size must be positive".into()));
        }
        if self.eval_context < 2 || self.eval_context > self.frames {
            return Err(Error::Config("synthetic: eval_context must lie in [2, frames]".into()));
        }
        if !(self.focal > 0.0 && self.radius > 0.9) {
            return Err(Error::Config("synthetic: focal must be positive and radius must clear the cube".into()));
        }
        Ok(())
    }

    /// Camera at fractional sequence position `t ∈ [0, frames − 1]`.
    pub fn camera_at(&self, t: f64) -> Result<Camera> {
        let span = self.arc_degrees.to_radians();
        let phi = -0.5 * span + span * t / (self.frames - 1) as f64;
        let eye = Vector3::new(self.radius * phi.sin(), self.elevation, -self.radius * phi.cos());
        let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0))?;
        let intrinsics = Intrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )?;
        Ok(Camera { pose, intrinsics })
    }
}

/// Ground truth plus the posed renders made from it.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub scene: GaussianScene,
    pub dataset: Dataset,
}

fn view(scene: &GaussianScene, camera: Camera, render: &RenderConfig) -> Result<CameraView> {
    let out = render_scene(scene, &camera, render)?;
    Ok(CameraView {
        pose: camera.pose,
        intrinsics: camera.intrinsics,
        image: Image::new(out.width, out.height, out.color)?,
    })
}

pub fn make_synthetic_scene(cfg: &SyntheticConfig, render: &RenderConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = RandomScene {
        count: cfg.blobs,
        lo: [-0.5; 3],
        hi: [0.5; 3],
        scale: (0.02, 0.1),
        opacity: (0.4, 0.9),
        color: (0.05, 0.95),
        sh_rest_std: 0.0,
    }
    .sample(&mut rng);
    let frames = (0..cfg.frames)
        .map(|i| view(&scene, cfg.camera_at(i as f64)?, render))
        .collect::<Result<Vec<_>>>()?;
    // evaluation context spans the middle half of the arc; held-out cameras
    // sit between its views, half a frame off the training grid
    let last = (cfg.frames - 1) as f64;
    let (lo, hi) = (0.25 * last, 0.75 * last);
    let eval_context = (0..cfg.eval_context)
        .map(|i| (lo + (hi - lo) * i as f64 / (cfg.eval_context - 1) as f64).round() as usize)
        .collect();
    let held_out = (0..cfg.held_out)
        .map(|i| {
            let t = lo + (hi - lo) * (i as f64 + 0.5) / cfg.held_out as f64;
            view(&scene, cfg.camera_at(t.floor() + 0.5)?, render)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene { scene, dataset: Dataset { frames, held_out, eval_context } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig { frames: 12, width: 32, height: 32, focal: 35.0, ..SyntheticConfig::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let r = RenderConfig::default();
        let a = make_synthetic_scene(&small(), &r).unwrap();
        let b = make_synthetic_scene(&small(), &r).unwrap();
        assert_eq!(a.scene, b.scene);
        for (x, y) in a.dataset.frames.iter().zip(&b.dataset.frames).chain(a.dataset.held_out.iter().zip(&b.dataset.held_out)) {
            assert_eq!(x.image, y.image);
        }
        let c = make_synthetic_scene(&SyntheticConfig { seed: 8, ..small() }, &r).unwrap();
        assert_ne!(a.scene, c.scene);
    }

    #[test]
    fn blobs_are_visible() {
        let s = make_synthetic_scene(&small(), &RenderConfig::default()).unwrap();
        for v in &s.dataset.frames {
            assert!(v.image.data.iter().any(|c| *c > 0.05));
        }
        assert_eq!(s.dataset.held_out.len(), 4);
        assert_eq!(s.dataset.eval_context.len(), 5);
        let scales = &s.scene.scales;
        assert!(scales.iter().all(|v| (0.02..=0.1).contains(v)));
    }
}
