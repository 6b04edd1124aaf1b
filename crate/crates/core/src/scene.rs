//! Explicit Gaussian scene in flat, renderer-ready storage.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Spherical-harmonic coefficients per color channel (degree 3).
pub const SH_COEFFS: usize = 16;
/// SH values per Gaussian, stored channel-major: `sh[c * 16 + k]`.
pub const SH_WIDTH: usize = 3 * SH_COEFFS;

/// `N` Gaussians. Rotations are stored column by column, so entry
/// `rotations[9n + 3j + i]` is `R[i][j]` of Gaussian `n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianScene {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacities: Vec<f64>,
    pub sh: Vec<f64>,
}

/// Borrowed view with the same layout as [`GaussianScene`].
#[derive(Clone, Copy, Debug)]
pub struct SceneRef<'a> {
    pub means: &'a [f64],
    pub scales: &'a [f64],
    pub rotations: &'a [f64],
    pub opacities: &'a [f64],
    pub sh: &'a [f64],
}

impl<'a> SceneRef<'a> {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.means.len() != 3 * n
            || self.scales.len() != 3 * n
            || self.rotations.len() != 9 * n
            || self.sh.len() != SH_WIDTH * n
        {
            return Err(Error::invalid(format!("inconsistent attribute lengths for {n} Gaussians")));
        }
        Ok(())
    }

    pub fn rotation(&self, n: usize) -> [[f64; 3]; 3] {
        let r = &self.rotations[9 * n..9 * n + 9];
        [[r[0], r[3], r[6]], [r[1], r[4], r[7]], [r[2], r[5], r[8]]]
    }
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacities.is_empty()
    }

    pub fn as_ref(&self) -> SceneRef<'_> {
        SceneRef {
            means: &self.means,
            scales: &self.scales,
            rotations: &self.rotations,
            opacities: &self.opacities,
            sh: &self.sh,
        }
    }

    pub fn push(&mut self, mean: [f64; 3], scale: [f64; 3], rotation: [[f64; 3]; 3], opacity: f64, sh: &[f64; SH_WIDTH]) {
        self.means.extend_from_slice(&mean);
        self.scales.extend_from_slice(&scale);
        for j in 0..3 {
            for row in &rotation {
                self.rotations.push(row[j]);
            }
        }
        self.opacities.push(opacity);
        self.sh.extend_from_slice(sh);
    }

    /// Checks lengths, positive finite scales, opacities in `(0, 1)` and
    /// orthonormal rotations (within `1e-6`).
    pub fn validate(&self) -> Result<()> {
        let s = self.as_ref();
        s.check()?;
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.means) && finite(&self.scales) && finite(&self.rotations) && finite(&self.opacities) && finite(&self.sh)) {
            return Err(Error::NonFinite("scene attribute".into()));
        }
        if let Some(i) = self.scales.iter().position(|&v| v <= 0.0) {
            return Err(Error::invalid(format!("non-positive scale at Gaussian {}", i / 3)));
        }
        if let Some(i) = self.opacities.iter().position(|&a| a <= 0.0 || a >= 1.0) {
            return Err(Error::invalid(format!("opacity outside (0, 1) at Gaussian {i}")));
        }
        for n in 0..self.len() {
            let r = s.rotation(n);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    if (dot - want).abs() > 1e-6 {
                        return Err(Error::invalid(format!("rotation of Gaussian {n} is not orthonormal")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Distribution of random scenes used for synthetic data and tests.
#[derive(Clone, Copy, Debug)]
pub struct RandomScene {
    pub count: usize,
    /// Means are uniform in the box `[lo, hi]`.
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    /// Per-axis scales are uniform in this range.
    pub scale: (f64, f64),
    pub opacity: (f64, f64),
    /// Range of the direction-independent base color per channel.
    pub color: (f64, f64),
    /// Standard deviation of the higher-order SH coefficients (0 for flat color).
    pub sh_rest_std: f64,
}

impl RandomScene {
    pub fn sample(&self, rng: &mut impl Rng) -> GaussianScene {
        let mut scene = GaussianScene::default();
        let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let mut items = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let mean = [0, 1, 2].map(|k| uniform(self.lo[k], self.hi[k]));
            let scale = [0; 3].map(|_| uniform(self.scale.0, self.scale.1));
            let opacity = uniform(self.opacity.0, self.opacity.1);
            let color = [0; 3].map(|_| uniform(self.color.0, self.color.1));
            items.push((mean, scale, opacity, color));
        }
        for (mean, scale, opacity, color) in items {
            let mut q = [0.0; 4];
            for v in &mut q {
                *v = StandardNormal.sample(rng);
            }
            let mut sh = [0.0; SH_WIDTH];
            for c in 0..3 {
                sh[c * SH_COEFFS] = (color[c] - 0.5) / crate::render::sh::SH_C0;
                for k in 1..SH_COEFFS {
                    let z: f64 = StandardNormal.sample(rng);
                    sh[c * SH_COEFFS + k] = z * self.sh_rest_std;
                }
            }
            scene.push(mean, scale, quat_to_matrix(q), opacity, &sh);
        }
        scene
    }
}

/// Rotation matrix of a quaternion `(w, x, y, z)`; the input is normalized first.
pub fn quat_to_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0` for a rotation matrix.
pub fn matrix_to_quat(r: &[[f64; 3]; 3]) -> [f64; 4] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    };
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

/// Scene attributes recorded on a graph, shapes `[N,3] [N,3] [N,9] [N,1] [N,48]`
/// with the same layouts as [`GaussianScene`].
#[derive(Clone, Copy, Debug)]
pub struct SceneVars {
    pub means: Var,
    pub scales: Var,
    pub rotations: Var,
    pub opacities: Var,
    pub sh: Var,
}

impl SceneVars {
    fn record(g: &mut Graph, scene: &GaussianScene, leaf: fn(&mut Graph, Tensor) -> Var) -> Result<Self> {
        scene.as_ref().check()?;
        let n = scene.len();
        Ok(Self {
            means: leaf(g, Tensor::new(&[n, 3], scene.means.clone())?),
            scales: leaf(g, Tensor::new(&[n, 3], scene.scales.clone())?),
            rotations: leaf(g, Tensor::new(&[n, 9], scene.rotations.clone())?),
            opacities: leaf(g, Tensor::new(&[n, 1], scene.opacities.clone())?),
            sh: leaf(g, Tensor::new(&[n, SH_WIDTH], scene.sh.clone())?),
        })
    }

    pub fn constant(g: &mut Graph, scene: &GaussianScene) -> Result<Self> {
        Self::record(g, scene, Graph::constant)
    }

    pub fn param(g: &mut Graph, scene: &GaussianScene) -> Result<Self> {
        Self::record(g, scene, Graph::param)
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.opacities)[0]
    }

    pub fn to_scene(&self, g: &Graph) -> GaussianScene {
        GaussianScene {
            means: g.value(self.means).data().to_vec(),
            scales: g.value(self.scales).data().to_vec(),
            rotations: g.value(self.rotations).data().to_vec(),
            opacities: g.value(self.opacities).data().to_vec(),
            sh: g.value(self.sh).data().to_vec(),
        }
    }
}
