//! Per-Gaussian screen-space projection and its adjoint.

use super::sh;
use super::{Camera, RenderConfig};
use crate::scene::{SceneRef, SH_COEFFS};

type M3 = [[f64; 3]; 3];

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn mat_vec(a: &M3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// `Σ = R diag(s²) Rᵀ`.
pub fn covariance3d(scale: [f64; 3], rotation: &M3) -> M3 {
    let mut m = *rotation;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= scale[j];
        }
    }
    mat_mul(&m, &transpose(&m))
}

/// A Gaussian after projection into one camera.
#[derive(Clone, Copy, Debug)]
pub struct Splat {
    /// Index into the source scene.
    pub index: usize,
    /// Pixel coordinates of the projected mean (pixel centers at `+0.5`).
    pub mean: [f64; 2],
    /// Dilated screen covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    /// View-space depth.
    pub depth: f64,
    /// Half-width of the square support box.
    pub radius: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

pub(crate) struct CameraMats {
    /// World-to-camera rotation.
    w: M3,
    center: [f64; 3],
}

impl CameraMats {
    pub(crate) fn new(camera: &Camera) -> Self {
        let r = camera.pose.rotation;
        let mut w = [[0.0; 3]; 3];
        for (i, row) in w.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[(j, i)];
            }
        }
        let c = camera.pose.center;
        Self { w, center: [c.x, c.y, c.z] }
    }
}

fn view_dir(mean: [f64; 3], center: [f64; 3]) -> ([f64; 3], f64) {
    let d = [mean[0] - center[0], mean[1] - center[1], mean[2] - center[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if len == 0.0 {
        return ([0.0, 0.0, 1.0], 0.0);
    }
    (d.map(|v| v / len), len)
}

struct Projected {
    t: [f64; 3],
    j: [[f64; 3]; 2],
    sigma_c: M3,
}

fn project_core(scene: &SceneRef, n: usize, cam: &CameraMats, camera: &Camera) -> Projected {
    let m = &scene.means[3 * n..3 * n + 3];
    let rel = [m[0] - cam.center[0], m[1] - cam.center[1], m[2] - cam.center[2]];
    let t = mat_vec(&cam.w, rel);
    let k = &camera.intrinsics;
    let z = t[2];
    let j = [
        [k.fx / z, 0.0, -k.fx * t[0] / (z * z)],
        [0.0, k.fy / z, -k.fy * t[1] / (z * z)],
    ];
    let s = &scene.scales[3 * n..3 * n + 3];
    let sigma = covariance3d([s[0], s[1], s[2]], &scene.rotation(n));
    let sigma_c = mat_mul(&mat_mul(&cam.w, &sigma), &transpose(&cam.w));
    Projected { t, j, sigma_c }
}

fn screen_cov(p: &Projected, dilation: f64) -> [f64; 3] {
    let js = |r: usize, c: usize| -> f64 {
        (0..3)
            .map(|a| (0..3).map(|b| p.j[r][a] * p.sigma_c[a][b] * p.j[c][b]).sum::<f64>())
            .sum()
    };
    [js(0, 0) + dilation, js(0, 1), js(1, 1) + dilation]
}

/// Projects Gaussian `n`; `None` when culled.
pub(crate) fn project(scene: &SceneRef, n: usize, cam: &CameraMats, camera: &Camera, cfg: &RenderConfig) -> Option<Splat> {
    let p = project_core(scene, n, cam, camera);
    let z = p.t[2];
    if !(z > cfg.z_near) {
        return None;
    }
    let cov = screen_cov(&p, cfg.dilation);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let mid = 0.5 * (cov[0] + cov[2]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = cfg.cull_sigma * lambda_max.sqrt();
    let k = &camera.intrinsics;
    let u = k.fx * p.t[0] / z + k.cx;
    let v = k.fy * p.t[1] / z + k.cy;
    if u + radius < 0.0 || u - radius > k.width as f64 || v + radius < 0.0 || v - radius > k.height as f64 {
        return None;
    }
    let mean3 = [scene.means[3 * n], scene.means[3 * n + 1], scene.means[3 * n + 2]];
    let (dir, _) = view_dir(mean3, cam.center);
    let color = sh::eval(&scene.sh[n * 48..n * 48 + 48], dir);
    Some(Splat {
        index: n,
        mean: [u, v],
        cov,
        conic,
        depth: z,
        radius,
        color,
        opacity: scene.opacities[n],
    })
}

/// Upstream gradient of one splat's screen-space quantities.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SplatGrad {
    pub conic: [f64; 3],
    pub mean: [f64; 2],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

impl SplatGrad {
    pub(crate) fn add(&mut self, o: &SplatGrad) {
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        self.depth += o.depth;
        self.opacity += o.opacity;
    }
}

/// Gradients of one Gaussian's scene attributes.
pub(crate) struct GaussianGrad {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: M3,
    pub opacity: f64,
    pub sh: [f64; 48],
}

/// Chains a splat gradient back to the Gaussian's attributes.
pub(crate) fn project_backward(
    scene: &SceneRef,
    splat: &Splat,
    g: &SplatGrad,
    cam: &CameraMats,
    camera: &Camera,
) -> GaussianGrad {
    let n = splat.index;
    let p = project_core(scene, n, cam, camera);
    let k = &camera.intrinsics;
    let (x, y, z) = (p.t[0], p.t[1], p.t[2]);

    // conic = cov⁻¹: dL/dcov = −Q G Q with G the symmetric conic gradient
    let q = [[splat.conic[0], splat.conic[1]], [splat.conic[1], splat.conic[2]]];
    let gq = [[g.conic[0], 0.5 * g.conic[1]], [0.5 * g.conic[1], g.conic[2]]];
    let mut gcov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += q[i][a] * gq[a][b] * q[b][j];
                }
            }
            gcov[i][j] = -acc;
        }
    }

    // cov = J Σc Jᵀ + dilation
    let mut g_sigma_c = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            g_sigma_c[a][b] = (0..2)
                .map(|r| (0..2).map(|c| p.j[r][a] * gcov[r][c] * p.j[c][b]).sum::<f64>())
                .sum();
        }
    }
    let mut gj = [[0.0; 3]; 2];
    for r in 0..2 {
        for a in 0..3 {
            gj[r][a] = 2.0
                * (0..2)
                    .map(|c| gcov[r][c] * (0..3).map(|b| p.j[c][b] * p.sigma_c[b][a]).sum::<f64>())
                    .sum::<f64>();
        }
    }

    let mut gt = [0.0; 3];
    let z2 = z * z;
    let z3 = z2 * z;
    gt[0] += gj[0][2] * (-k.fx / z2);
    gt[1] += gj[1][2] * (-k.fy / z2);
    gt[2] += gj[0][0] * (-k.fx / z2) + gj[0][2] * (2.0 * k.fx * x / z3) + gj[1][1] * (-k.fy / z2) + gj[1][2] * (2.0 * k.fy * y / z3);
    gt[0] += g.mean[0] * k.fx / z;
    gt[1] += g.mean[1] * k.fy / z;
    gt[2] += -g.mean[0] * k.fx * x / z2 - g.mean[1] * k.fy * y / z2 + g.depth;

    let wt = transpose(&cam.w);
    let mut g_mean = mat_vec(&wt, gt);

    // Σc = W Σ Wᵀ, Σ = M Mᵀ with M = R diag(s)
    let g_sigma = mat_mul(&mat_mul(&wt, &g_sigma_c), &cam.w);
    let rot = scene.rotation(n);
    let s = [scene.scales[3 * n], scene.scales[3 * n + 1], scene.scales[3 * n + 2]];
    let mut m = rot;
    for row in m.iter_mut() {
        for j in 0..3 {
            row[j] *= s[j];
        }
    }
    let sym = |a: usize, b: usize| g_sigma[a][b] + g_sigma[b][a];
    let mut gm = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gm[i][j] = (0..3).map(|a| sym(i, a) * m[a][j]).sum();
        }
    }
    let mut g_rot = [[0.0; 3]; 3];
    let mut g_scale = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            g_rot[i][j] = gm[i][j] * s[j];
            g_scale[j] += gm[i][j] * rot[i][j];
        }
    }

    // color = max(Σ sh·Y(dir) + ½, 0), dir = normalize(μ − o)
    let mean3 = [scene.means[3 * n], scene.means[3 * n + 1], scene.means[3 * n + 2]];
    let (dir, len) = view_dir(mean3, cam.center);
    let (basis, dbasis) = sh::basis_with_grad(dir);
    let coeffs = &scene.sh[n * 48..n * 48 + 48];
    let mut g_sh = [0.0; 48];
    let mut g_dir = [0.0; 3];
    for c in 0..3 {
        let raw: f64 = (0..SH_COEFFS).map(|kk| coeffs[c * SH_COEFFS + kk] * basis[kk]).sum::<f64>() + 0.5;
        if raw <= 0.0 {
            continue;
        }
        let gc = g.color[c];
        for kk in 0..SH_COEFFS {
            g_sh[c * SH_COEFFS + kk] = gc * basis[kk];
            for a in 0..3 {
                g_dir[a] += gc * coeffs[c * SH_COEFFS + kk] * dbasis[kk][a];
            }
        }
    }
    if len > 0.0 {
        let dot = g_dir[0] * dir[0] + g_dir[1] * dir[1] + g_dir[2] * dir[2];
        for a in 0..3 {
            g_mean[a] += (g_dir[a] - dot * dir[a]) / len;
        }
    }

    GaussianGrad {
        mean: g_mean,
        scale: g_scale,
        rotation: g_rot,
        opacity: g.opacity,
        sh: g_sh,
    }
}
