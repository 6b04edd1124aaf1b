//! Posed-image dataset directories.
//!
//! A directory holds `cameras.json` and the PPM images it names:
//!
//! ```json
//! { "frames": [ { "image": "frames/0000.ppm", "fx": 70, "fy": 70, "cx": 32, "cy": 32,
//!                 "rotation": [[1,0,0],[0,1,0],[0,0,1]], "center": [0,0,0] } ],
//!   "held_out": [ ... ], "eval_context": [0, 4, 8] }
//! ```
//!
//! `rotation` is world-from-camera (rows), camera axes x right, y down, z forward.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::ppm::{read_ppm, write_ppm};
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, CameraView, Intrinsics};
use crate::image::Image;
use crate::training::Dataset;

pub const MANIFEST: &str = "cameras.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    image: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [[f64; 3]; 3],
    center: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    frames: Vec<ViewRecord>,
    #[serde(default)]
    held_out: Vec<ViewRecord>,
    #[serde(default)]
    eval_context: Vec<usize>,
}

/// Largest square centered on the principal point, resampled to `side`×`side`
/// with bilinear filtering; intrinsics follow the crop and scale.
pub fn crop_and_resize(view: &CameraView, side: usize) -> Result<CameraView> {
    let k = &view.intrinsics;
    let img = &view.image;
    let half = k.cx.min(img.width as f64 - k.cx).min(k.cy).min(img.height as f64 - k.cy);
    if !(half >= 0.5) || side == 0 {
        return Err(Error::invalid("principal point leaves no room for a centered crop"));
    }
    let (x0, y0) = (k.cx - half, k.cy - half);
    let s = 2.0 * half / side as f64;
    let sample = |x: f64, y: f64, c: usize| {
        let x = (x - 0.5).clamp(0.0, (img.width - 1) as f64);
        let y = (y - 0.5).clamp(0.0, (img.height - 1) as f64);
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((xi + 1).min(img.width - 1), (yi + 1).min(img.height - 1));
        let (fx, fy) = (x - xi as f64, y - yi as f64);
        let at = |u: usize, v: usize| img.data[(v * img.width + u) * 3 + c];
        (1.0 - fy) * ((1.0 - fx) * at(xi, yi) + fx * at(x1, yi)) + fy * ((1.0 - fx) * at(xi, y1) + fx * at(x1, y1))
    };
    let mut data = Vec::with_capacity(side * side * 3);
    for v in 0..side {
        for u in 0..side {
            let (x, y) = (x0 + (u as f64 + 0.5) * s, y0 + (v as f64 + 0.5) * s);
            for c in 0..3 {
                data.push(sample(x, y, c));
            }
        }
    }
    Ok(CameraView {
        pose: view.pose,
        intrinsics: Intrinsics::new(k.fx / s, k.fy / s, (k.cx - x0) / s, (k.cy - y0) / s, side, side)?,
        image: Image::new(side, side, data)?,
    })
}

fn load_view(dir: &Path, r: &ViewRecord, resolution: Option<usize>) -> Result<CameraView> {
    let image = read_ppm(&dir.join(&r.image))?;
    let rotation = Matrix3::from_row_slice(&r.rotation.concat());
    let view = CameraView {
        pose: CameraPose::new(rotation, Vector3::from(r.center))?,
        intrinsics: Intrinsics::new(r.fx, r.fy, r.cx, r.cy, image.width, image.height)?,
        image,
    };
    match resolution {
        Some(side) => crop_and_resize(&view, side),
        None => Ok(view),
    }
}

pub fn read_dataset(dir: &Path, resolution: Option<usize>) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if m.frames.is_empty() {
        return Err(Error::format(format!("{}: no frames", path.display())));
    }
    if let Some(i) = m.eval_context.iter().find(|i| **i >= m.frames.len()) {
        return Err(Error::format(format!("{}: eval_context index {i} out of range", path.display())));
    }
    let load = |rs: &[ViewRecord]| rs.iter().map(|r| load_view(dir, r, resolution)).collect::<Result<Vec<_>>>();
    Ok(Dataset { frames: load(&m.frames)?, held_out: load(&m.held_out)?, eval_context: m.eval_context })
}

fn record(v: &CameraView, image: String) -> ViewRecord {
    let r = v.pose.rotation;
    ViewRecord {
        image,
        fx: v.intrinsics.fx,
        fy: v.intrinsics.fy,
        cx: v.intrinsics.cx,
        cy: v.intrinsics.cy,
        rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
        center: [v.pose.center.x, v.pose.center.y, v.pose.center.z],
    }
}

/// Writes images as 8-bit PPM, so reading back quantizes colors.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["frames", "held_out"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::file(&dir.join(sub), e))?;
    }
    let write = |views: &[CameraView], sub: &str| -> Result<Vec<ViewRecord>> {
        views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let name = format!("{sub}/{i:04}.ppm");
                write_ppm(&dir.join(&name), &v.image)?;
                Ok(record(v, name))
            })
            .collect()
    };
    let manifest = Manifest {
        frames: write(&data.frames, "frames")?,
        held_out: write(&data.held_out, "held_out")?,
        eval_context: data.eval_context.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::format)?;
    super::write_atomic(&dir.join(MANIFEST), text.as_bytes())
}
