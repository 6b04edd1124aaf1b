//! Camera pose algebra, scene canonicalization and per-pixel ray features.
//!
//! Camera convention: the camera looks along its local `+z`, `x` points right
//! and `y` points down in the image. A [`CameraPose`] maps camera coordinates
//! to world coordinates (`world = R · cam + center`).
//!
//! Patch ordering contract used by every consumer of patchified maps: patches
//! are enumerated row-major over the patch grid; inside a patch, pixels are
//! row-major and channels vary fastest. A patch vector therefore has layout
//! `[(py * p + px) * F + f]`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::diff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Linear, Mlp};

const ORTHO_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CameraPose {
    /// Validates that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        let err = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid(format!(
                "camera rotation is not orthonormal (error {err:.3e}, det {:.6})",
                rotation.determinant()
            )));
        }
        Ok(Self { rotation, center })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    /// Camera at `eye` whose `+z` axis points at `target`; `up` fixes the roll
    /// (image `y` points away from it).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Degenerate("look_at target equals eye".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Degenerate("look_at up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        Ok(Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            center: eye,
        })
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.center)
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Resolution-normalized `(fx/W, fy/H, cx/W, cy/H)`.
    pub fn normalized(&self) -> [f64; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [self.fx / w, self.fy / h, self.cx / w, self.cy / h]
    }

    /// Intrinsics after resizing the image to `width × height`.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// A posed input image.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub image: Image,
}

/// Input views expressed in the canonical frame.
#[derive(Clone, Debug)]
pub struct NormalizedScene {
    pub views: Vec<CameraView>,
    /// Diameter of the camera constellation after alignment (1 for a single view).
    pub scale: f64,
    pub average_pose: CameraPose,
}

impl NormalizedScene {
    /// Applies the same similarity transform to another (e.g. target) pose.
    pub fn transform_pose(&self, pose: &CameraPose) -> CameraPose {
        let ra = self.average_pose.rotation;
        CameraPose {
            rotation: ra.transpose() * pose.rotation,
            center: ra.transpose() * (pose.center - self.average_pose.center) / self.scale,
        }
    }

    /// Maps a canonical-frame point back to world coordinates.
    pub fn point_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.average_pose.rotation * (p * self.scale) + self.average_pose.center
    }
}

/// Average camera: mean center and Gram–Schmidt re-orthonormalized mean axes
/// (forward kept, down axis orthogonalized, right = down × forward).
pub fn average_pose(poses: &[CameraPose]) -> Result<CameraPose> {
    if poses.is_empty() {
        return Err(Error::invalid("average_pose of zero poses"));
    }
    let n = poses.len() as f64;
    let center = poses.iter().map(|p| p.center).sum::<Vector3<f64>>() / n;
    let forward_sum: Vector3<f64> = poses.iter().map(|p| p.rotation.column(2).into_owned()).sum();
    let down_sum: Vector3<f64> = poses.iter().map(|p| p.rotation.column(1).into_owned()).sum();
    let forward = (forward_sum / n)
        .try_normalize(1e-6)
        .ok_or_else(|| Error::Degenerate("averaged viewing direction has near-zero norm".into()))?;
    let down = down_sum / n;
    let down = (down - forward * down.dot(&forward))
        .try_normalize(1e-6)
        .ok_or_else(|| Error::Degenerate("averaged up axis is parallel to the viewing direction".into()))?;
    let right = down.cross(&forward);
    Ok(CameraPose {
        rotation: Matrix3::from_columns(&[right, down, forward]),
        center,
    })
}

/// Expresses all views in the average camera's frame and divides centers by
/// the constellation diameter.
pub fn canonicalize(views: &[CameraView]) -> Result<NormalizedScene> {
    let poses: Vec<CameraPose> = views.iter().map(|v| v.pose).collect();
    let avg = average_pose(&poses)?;
    let ra_t = avg.rotation.transpose();
    let aligned: Vec<CameraPose> = poses
        .iter()
        .map(|p| CameraPose {
            rotation: ra_t * p.rotation,
            center: ra_t * (p.center - avg.center),
        })
        .collect();
    let scale = if aligned.len() < 2 {
        1.0
    } else {
        let mut diameter: f64 = 0.0;
        for (i, a) in aligned.iter().enumerate() {
            for b in &aligned[i + 1..] {
                diameter = diameter.max((a.center - b.center).norm());
            }
        }
        if diameter <= 1e-12 {
            return Err(Error::Degenerate("all camera centers coincide".into()));
        }
        diameter
    };
    let views = views
        .iter()
        .zip(aligned)
        .map(|(v, p)| CameraView {
            pose: CameraPose {
                rotation: p.rotation,
                center: p.center / scale,
            },
            intrinsics: v.intrinsics,
            image: v.image.clone(),
        })
        .collect();
    Ok(NormalizedScene {
        views,
        scale,
        average_pose: avg,
    })
}

/// Per-pixel Plücker coordinates `(d, o × d)`, stored `H×W×6`.
#[derive(Clone, Debug)]
pub struct PluckerMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl PluckerMap {
    pub fn at(&self, u: usize, v: usize) -> [f64; 6] {
        let i = (v * self.width + u) * 6;
        self.data[i..i + 6].try_into().expect("six channels")
    }
}

/// Rays through pixel centers: `d = normalize(R K⁻¹ (u+½, v+½, 1))`, `m = o × d`.
pub fn plucker_rays(pose: &CameraPose, intr: &Intrinsics) -> Result<PluckerMap> {
    intr.validate()?;
    let (w, h) = (intr.width, intr.height);
    let mut data = Vec::with_capacity(w * h * 6);
    for v in 0..h {
        for u in 0..w {
            let cam = Vector3::new(
                (u as f64 + 0.5 - intr.cx) / intr.fx,
                (v as f64 + 0.5 - intr.cy) / intr.fy,
                1.0,
            );
            let d = (pose.rotation * cam).normalize();
            let m = pose.center.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    Ok(PluckerMap { width: w, height: h, data })
}

/// Splits an `H×W×F` map into `(H/p)·(W/p)` patch vectors of length `p·p·F`.
pub fn patchify(map: &[f64], height: usize, width: usize, channels: usize, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::invalid(format!(
            "{height}x{width} map is not divisible into {patch}x{patch} patches"
        )));
    }
    if map.len() != height * width * channels {
        return Err(Error::invalid("map length does not match its dimensions"));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(map.len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * width + px * patch;
                out.extend_from_slice(&map[row * channels..(row + patch) * channels]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64], height: usize, width: usize, channels: usize, patch: usize) -> Result<Vec<f64>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 || patches.len() != height * width * channels {
        return Err(Error::invalid("patch layout does not match the requested map"));
    }
    let (gh, gw) = (height / patch, width / patch);
    let mut out = vec![0.0; patches.len()];
    let mut src = 0;
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * width + px * patch;
                let len = patch * channels;
                out[row * channels..row * channels + len].copy_from_slice(&patches[src..src + len]);
                src += len;
            }
        }
    }
    Ok(out)
}

/// Sin/cos features of each coordinate at frequencies `2^k π`, `k < frequencies`:
/// all sines (coordinate-major) followed by all cosines.
pub fn fourier_encode(v: &[f64; 3], frequencies: usize) -> Vec<f64> {
    let mut sin = Vec::with_capacity(3 * frequencies);
    let mut cos = Vec::with_capacity(3 * frequencies);
    for &c in v {
        for k in 0..frequencies {
            let a = (1u64 << k) as f64 * PI * c;
            sin.push(a.sin());
            cos.push(a.cos());
        }
    }
    sin.extend(cos);
    sin
}

/// Learned per-view camera code `W_proj [MLP(φ(K)); PE(o)]`.
#[derive(Clone, Copy, Debug)]
pub struct CameraCodeParams {
    pub intrinsics_mlp: Mlp,
    pub proj: Linear,
    pub frequencies: usize,
}

pub const INTRINSICS_HIDDEN: usize = 64;

impl CameraCodeParams {
    pub fn new(store: &mut ParamStore, width: usize, frequencies: usize, rng: &mut impl Rng) -> Result<Self> {
        let intrinsics_mlp = Mlp::new(store, "camera_code.intrinsics", 4, INTRINSICS_HIDDEN, INTRINSICS_HIDDEN, rng)?;
        let proj = Linear::new(store, "camera_code.proj", INTRINSICS_HIDDEN + 6 * frequencies, width, true, rng)?;
        Ok(Self { intrinsics_mlp, proj, frequencies })
    }
}

/// Per-view code, shape `[1, width]`.
pub fn camera_code(g: &mut Graph, p: &Bound, params: &CameraCodeParams, pose: &CameraPose, intr: &Intrinsics) -> Result<Var> {
    let phi = g.constant(Tensor::new(&[1, 4], intr.normalized().to_vec())?);
    let k = params.intrinsics_mlp.forward(g, p, phi)?;
    let center = [pose.center.x, pose.center.y, pose.center.z];
    let pe = fourier_encode(&center, params.frequencies);
    let pe = g.constant(Tensor::new(&[1, pe.len()], pe)?);
    let joined = g.concat(&[k, pe], 1)?;
    params.proj.forward(g, p, joined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn rot_y(deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), deg.to_radians()).into_inner()
    }

    fn view(pose: CameraPose) -> CameraView {
        CameraView {
            pose,
            intrinsics: Intrinsics::new(8.0, 8.0, 4.0, 4.0, 8, 8).unwrap(),
            image: Image::filled(8, 8, [0.0; 3]),
        }
    }

    #[test]
    fn average_of_one_pose_is_itself() {
        let p = CameraPose::new(rot_y(23.0), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let a = average_pose(&[p]).unwrap();
        assert!((a.rotation - p.rotation).abs().max() < 1e-15);
        assert_eq!(a.center, p.center);
    }

    #[test]
    fn average_of_symmetric_pair() {
        let a = CameraPose::identity();
        let b = CameraPose { center: Vector3::new(2.0, 0.0, 0.0), ..a };
        let avg = average_pose(&[a, b]).unwrap();
        assert_eq!(avg.center, Vector3::new(1.0, 0.0, 0.0));
        assert!((avg.rotation - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn symmetric_yaw_fan_averages_to_center_rotation() {
        let poses: Vec<CameraPose> = [-10.0, 0.0, 10.0]
            .iter()
            .zip([Vector3::new(0.3, 1.0, -2.0), Vector3::new(5.0, 0.0, 0.0), Vector3::new(-1.0, 2.0, 0.5)])
            .map(|(d, c)| CameraPose::new(rot_y(*d), c).unwrap())
            .collect();
        let avg = average_pose(&poses).unwrap();
        // oracle: forward axes (sin θ, 0, cos θ) average to +z; down axis is +y throughout
        assert!((avg.rotation - Matrix3::identity()).abs().max() < 1e-6);
    }

    #[test]
    fn opposing_cameras_are_degenerate() {
        let a = CameraPose::identity();
        let b = CameraPose::new(rot_y(180.0), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(matches!(average_pose(&[a, b]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_view_canonicalizes_to_identity() {
        let p = CameraPose::new(rot_y(40.0), Vector3::new(3.0, -1.0, 2.0)).unwrap();
        let s = canonicalize(&[view(p)]).unwrap();
        assert_eq!(s.scale, 1.0);
        assert!((s.views[0].pose.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(s.views[0].pose.center.norm() < 1e-12);
    }

    #[test]
    fn two_views_normalize_to_unit_diameter() {
        let a = CameraPose::identity();
        let b = CameraPose { center: Vector3::new(3.0, 0.0, 0.0), ..a };
        let s = canonicalize(&[view(a), view(b)]).unwrap();
        assert_eq!(s.scale, 3.0);
        assert!((s.views[0].pose.center - Vector3::new(-0.5, 0.0, 0.0)).norm() < 1e-15);
        assert!((s.views[1].pose.center - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn coincident_centers_are_rejected() {
        let a = CameraPose::identity();
        let b = CameraPose::new(rot_y(5.0), Vector3::zeros()).unwrap();
        assert!(matches!(canonicalize(&[view(a), view(b)]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn canonicalization_is_idempotent() {
        let poses = [
            CameraPose::new(rot_y(-20.0), Vector3::new(1.0, 0.2, -3.0)).unwrap(),
            CameraPose::new(rot_y(5.0), Vector3::new(-2.0, 0.5, 1.0)).unwrap(),
            CameraPose::new(rot_y(30.0), Vector3::new(0.5, -0.7, 2.0)).unwrap(),
        ];
        let views: Vec<CameraView> = poses.iter().map(|p| view(*p)).collect();
        let once = canonicalize(&views).unwrap();
        let twice = canonicalize(&once.views).unwrap();
        assert!((twice.scale - 1.0).abs() < 1e-9);
        for (a, b) in once.views.iter().zip(&twice.views) {
            assert!((a.pose.rotation - b.pose.rotation).abs().max() < 1e-9);
            assert!((a.pose.center - b.pose.center).norm() < 1e-9);
        }
    }

    #[test]
    fn principal_ray_from_origin() {
        let k = Intrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
        let map = plucker_rays(&CameraPose::identity(), &k).unwrap();
        let r = map.at(3, 3);
        assert_eq!(&r[..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&r[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn principal_ray_from_offset_center() {
        let k = Intrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
        let pose = CameraPose { center: Vector3::new(1.0, 0.0, 0.0), ..CameraPose::identity() };
        let r = plucker_rays(&pose, &k).unwrap().at(3, 3);
        assert_eq!(&r[..3], &[0.0, 0.0, 1.0]);
        assert_eq!(&r[3..], &[0.0, -1.0, 0.0]);
    }

    #[test]
    fn patchify_single_patch_is_flat_copy() {
        let map: Vec<f64> = (0..64).map(f64::from).collect();
        assert_eq!(patchify(&map, 8, 8, 1, 8).unwrap(), map);
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let map: Vec<f64> = (0..256).map(f64::from).collect();
        let p = patchify(&map, 16, 16, 1, 8).unwrap();
        let first: Vec<f64> = (0..8).flat_map(|y| (0..8).map(move |x| (y * 16 + x) as f64)).collect();
        assert_eq!(&p[..64], &first[..]);
        // second patch starts at column 8 of row 0
        assert_eq!(p[64], 8.0);
        assert!(patchify(&map, 16, 16, 1, 5).is_err());
    }

    #[test]
    fn fourier_encoding_of_origin() {
        let e = fourier_encode(&[0.0; 3], 6);
        assert_eq!(e.len(), 36);
        assert!(e[..18].iter().all(|&v| v == 0.0));
        assert!(e[18..].iter().all(|&v| v == 1.0));
    }
}
