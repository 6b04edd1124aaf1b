//! C ABI over the tokensplat core: PLY scenes, rendering, the merge/split
//! algebra and checkpoint inference.
//!
//! Every fallible function returns a [`TsStatus`]; on failure the message is
//! kept per thread and read with [`ts_last_error`]. Handles are opaque and
//! must be released with their `_free` function. Panics never cross the
//! boundary; they surface as [`TsStatus::Panic`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::{Matrix3, Vector3};
use tokensplat::decoder::{gate_weights, merge_group, split_parent, GaussianParams, StagePoint};
use tokensplat::geometry::{canonicalize, CameraPose, CameraView, Intrinsics, NormalizedScene};
use tokensplat::image::Image;
use tokensplat::io::{checkpoint, ply};
use tokensplat::render::{render_scene, Camera, RenderConfig};
use tokensplat::scene::{GaussianScene, SH_WIDTH};
use tokensplat::{config::RunConfig, model::Model, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Panic = 6,
}

/// Gaussian scene handle.
pub struct TsScene(GaussianScene);

/// Trained model handle.
pub struct TsModel {
    run: RunConfig,
    model: Model,
}

/// Pinhole camera. `rotation` is world-from-camera, row-major; camera axes
/// are x right, y down, z forward.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TsCamera {
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// One posed input image; `rgb` holds `width·height·3` values in [0, 1], row-major.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TsView {
    pub camera: TsCamera,
    pub rgb: *const f64,
}

/// Similarity mapping canonical points to world: `R·(s·p) + c`, `R` row-major.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TsSimilarity {
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub scale: f64,
}

/// One Gaussian in merge parameters (log scales, 6D rotation, opacity).
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TsGaussian {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rot6d: [f64; 6],
    pub opacity: f64,
    pub sh: [f64; 48],
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(TsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } | Error::Invalid(_) | Error::Degenerate(_) | Error::Config(_) => TsStatus::InvalidArgument,
            Error::NonFinite(_) => TsStatus::Numeric,
            Error::Format(_) => TsStatus::Format,
            Error::File { .. } | Error::Io(_) => TsStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(TsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TsStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".into());
        Err(Failure(TsStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            TsStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn camera(c: &TsCamera) -> Result<Camera, Failure> {
    Ok(Camera {
        pose: CameraPose::new(Matrix3::from_row_slice(&c.rotation), Vector3::from(c.center))?,
        intrinsics: Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?,
    })
}

fn ts_camera(c: &Camera) -> TsCamera {
    let r = c.pose.rotation;
    TsCamera {
        rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        center: [c.pose.center.x, c.pose.center.y, c.pose.center.z],
        fx: c.intrinsics.fx,
        fy: c.intrinsics.fy,
        cx: c.intrinsics.cx,
        cy: c.intrinsics.cy,
        width: c.intrinsics.width,
        height: c.intrinsics.height,
    }
}

fn to_params(g: &TsGaussian) -> GaussianParams {
    GaussianParams { mean: g.mean, log_scale: g.log_scale, rot6d: g.rot6d, opacity: g.opacity, sh: g.sh.to_vec() }
}

fn from_params(p: &GaussianParams) -> TsGaussian {
    let mut sh = [0.0; 48];
    sh.copy_from_slice(&p.sh);
    TsGaussian { mean: p.mean, log_scale: p.log_scale, rot6d: p.rot6d, opacity: p.opacity, sh }
}

/// Copies the message of the last failure on this thread into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length
/// without the terminator. `buf` may be null to query the length.
#[no_mangle]
pub unsafe extern "C" fn ts_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

#[no_mangle]
pub unsafe extern "C" fn ts_scene_new(out: *mut *mut TsScene) -> TsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = Box::into_raw(Box::new(TsScene(GaussianScene::default())));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ts_scene_free(scene: *mut TsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of Gaussians, 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_len(scene: *const TsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.len())
}

/// Appends a Gaussian. `rotation` is row-major, `sh` holds 48 channel-major coefficients.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_push(
    scene: *mut TsScene,
    mean: *const [f64; 3],
    scale: *const [f64; 3],
    rotation: *const [f64; 9],
    opacity: f64,
    sh: *const [f64; 48],
) -> TsStatus {
    guard(|| {
        let s = scene.as_mut().ok_or_else(|| null("scene"))?;
        let r = deref(rotation, "rotation")?;
        let rot = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
        let (mean, scale, sh) = (*deref(mean, "mean")?, *deref(scale, "scale")?, deref(sh, "sh")?);
        let mut one = GaussianScene::default();
        one.push(mean, scale, rot, opacity, sh);
        one.validate()?;
        s.0.push(mean, scale, rot, opacity, sh);
        Ok(())
    })
}

/// Reads Gaussian `index`; any output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_get(
    scene: *const TsScene,
    index: usize,
    mean: *mut [f64; 3],
    scale: *mut [f64; 3],
    rotation: *mut [f64; 9],
    opacity: *mut f64,
    sh: *mut [f64; 48],
) -> TsStatus {
    guard(|| {
        let s = &deref(scene, "scene")?.0;
        if index >= s.len() {
            return Err(invalid(format!("index {index} out of range ({} Gaussians)", s.len())));
        }
        if let Some(m) = mean.as_mut() {
            m.copy_from_slice(&s.means[3 * index..3 * index + 3]);
        }
        if let Some(m) = scale.as_mut() {
            m.copy_from_slice(&s.scales[3 * index..3 * index + 3]);
        }
        if let Some(m) = rotation.as_mut() {
            m.copy_from_slice(&s.rotations[9 * index..9 * index + 9]);
        }
        if let Some(m) = opacity.as_mut() {
            *m = s.opacities[index];
        }
        if let Some(m) = sh.as_mut() {
            m.copy_from_slice(&s.sh[SH_WIDTH * index..SH_WIDTH * (index + 1)]);
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ts_scene_read_ply(path: *const c_char, out: *mut *mut TsScene) -> TsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let scene = ply::read_ply(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TsScene(scene)));
        Ok(())
    })
}

/// Writes the scene; `bytes_written` may be null.
#[no_mangle]
pub unsafe extern "C" fn ts_scene_write_ply(scene: *const TsScene, path: *const c_char, bytes_written: *mut usize) -> TsStatus {
    guard(|| {
        let n = ply::write_ply(&path_arg(path)?, &deref(scene, "scene")?.0)?;
        if let Some(b) = bytes_written.as_mut() {
            *b = n;
        }
        Ok(())
    })
}

/// Renders `width·height` pixels. `rgb` needs `3·width·height` values;
/// `depth` and `alpha` (`width·height` each) and `background` (3) may be null.
#[no_mangle]
pub unsafe extern "C" fn ts_render(
    scene: *const TsScene,
    cam: *const TsCamera,
    background: *const [f64; 3],
    rgb: *mut f64,
    rgb_len: usize,
    depth: *mut f64,
    alpha: *mut f64,
) -> TsStatus {
    guard(|| {
        let s = &deref(scene, "scene")?.0;
        let cam = camera(deref(cam, "camera")?)?;
        let mut cfg = RenderConfig::default();
        if let Some(b) = background.as_ref() {
            cfg.background = *b;
        }
        let pixels = cam.intrinsics.width * cam.intrinsics.height;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if rgb_len != 3 * pixels {
            return Err(invalid(format!("rgb buffer holds {rgb_len} values, expected {}", 3 * pixels)));
        }
        let out = render_scene(s, &cam, &cfg)?;
        ptr::copy_nonoverlapping(out.color.as_ptr(), rgb, 3 * pixels);
        if !depth.is_null() {
            ptr::copy_nonoverlapping(out.depth.as_ptr(), depth, pixels);
        }
        if !alpha.is_null() {
            ptr::copy_nonoverlapping(out.accumulation.as_ptr(), alpha, pixels);
        }
        Ok(())
    })
}

/// Temperature-scaled softmax of `n` gate logits into `weights`.
#[no_mangle]
pub unsafe extern "C" fn ts_gate_weights(logits: *const f64, n: usize, tau: f64, weights: *mut f64) -> TsStatus {
    guard(|| {
        let w = gate_weights(slice(logits, n, "logits")?, tau)?;
        if weights.is_null() {
            return Err(null("weights"));
        }
        ptr::copy_nonoverlapping(w.as_ptr(), weights, n);
        Ok(())
    })
}

/// Merges `n` Gaussians with weights summing to 1.
#[no_mangle]
pub unsafe extern "C" fn ts_merge_group(items: *const TsGaussian, weights: *const f64, n: usize, out: *mut TsGaussian) -> TsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let items: Vec<GaussianParams> = slice(items, n, "items")?.iter().map(to_params).collect();
        *out = from_params(&merge_group(&items, slice(weights, n, "weights")?)?);
        Ok(())
    })
}

/// Splits a parent into the two children written to `out[0]`, `out[1]`.
#[no_mangle]
pub unsafe extern "C" fn ts_split_parent(parent: *const TsGaussian, out: *mut TsGaussian) -> TsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let [a, b] = split_parent(&to_params(deref(parent, "parent")?))?;
        *out = from_params(&a);
        *out.add(1) = from_params(&b);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ts_model_load(path: *const c_char, out: *mut *mut TsModel) -> TsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let (run, model) = checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(TsModel { run, model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ts_model_free(model: *mut TsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reconstructs a scene from `n` posed views at the model's final stage.
/// The scene lives in the canonical frame described by `frame` (may be
/// null); use [`ts_canonical_camera`] to render it from a world camera.
#[no_mangle]
pub unsafe extern "C" fn ts_model_reconstruct(
    model: *const TsModel,
    views: *const TsView,
    n: usize,
    out: *mut *mut TsScene,
    frame: *mut TsSimilarity,
) -> TsStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let views = slice(views, n, "views")?
            .iter()
            .map(|v| {
                let cam = camera(&v.camera)?;
                let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
                let rgb = slice(v.rgb, w * h * 3, "view rgb")?;
                Ok(CameraView { pose: cam.pose, intrinsics: cam.intrinsics, image: Image::new(w, h, rgb.to_vec())? })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let canonical = canonicalize(&views)?;
        let point = StagePoint::settled(m.run.training.schedule.final_stage());
        let scene = m.model.reconstruct(&canonical, point)?;
        if let Some(f) = frame.as_mut() {
            let c = ts_camera(&Camera { pose: canonical.average_pose, intrinsics: views[0].intrinsics });
            *f = TsSimilarity { rotation: c.rotation, center: c.center, scale: canonical.scale };
        }
        *out = Box::into_raw(Box::new(TsScene(scene)));
        Ok(())
    })
}

/// Expresses a world camera in the canonical frame `frame`.
#[no_mangle]
pub unsafe extern "C" fn ts_canonical_camera(frame: *const TsSimilarity, world: *const TsCamera, out: *mut TsCamera) -> TsStatus {
    guard(|| {
        let f = deref(frame, "frame")?;
        if !(f.scale > 0.0) {
            return Err(invalid("frame scale must be positive"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cam = camera(deref(world, "world")?)?;
        let canonical = NormalizedScene {
            views: Vec::new(),
            scale: f.scale,
            average_pose: CameraPose::new(Matrix3::from_row_slice(&f.rotation), Vector3::from(f.center))?,
        };
        *out = ts_camera(&Camera { pose: canonical.transform_pose(&cam.pose), intrinsics: cam.intrinsics });
        Ok(())
    })
}
