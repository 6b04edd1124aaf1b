//! Real spherical harmonics up to degree 3.

use std::ops::{Add, Mul, Sub};

use crate::scene::SH_COEFFS;

pub const SH_C0: f64 = 0.28209479177387814;
const C1: f64 = 0.4886025119029199;
const C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
const C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Value with its gradient with respect to a 3-vector.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 3],
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]] }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]] }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let d = |k: usize| self.d[k] * o.v + self.v * o.d[k];
        Dual { v: self.v * o.v, d: [d(0), d(1), d(2)] }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, c: f64) -> Dual {
        Dual { v: self.v * c, d: [self.d[0] * c, self.d[1] * c, self.d[2] * c] }
    }
}

fn basis_generic<T>(one: T, x: T, y: T, z: T) -> [T; SH_COEFFS]
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<Output = T> + Mul<f64, Output = T>,
{
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        one * SH_C0,
        y * -C1,
        z * C1,
        x * -C1,
        x * y * C2[0],
        y * z * C2[1],
        (zz * 2.0 - xx - yy) * C2[2],
        x * z * C2[3],
        (xx - yy) * C2[4],
        y * (xx * 3.0 - yy) * C3[0],
        x * y * z * C3[1],
        y * (zz * 4.0 - xx - yy) * C3[2],
        z * (zz * 2.0 - xx * 3.0 - yy * 3.0) * C3[3],
        x * (zz * 4.0 - xx - yy) * C3[4],
        z * (xx - yy) * C3[5],
        x * (xx - yy * 3.0) * C3[6],
    ]
}

/// The 16 basis values at a unit direction.
pub fn basis(dir: [f64; 3]) -> [f64; SH_COEFFS] {
    basis_generic(1.0, dir[0], dir[1], dir[2])
}

/// Basis values and their gradients with respect to the direction components.
pub fn basis_with_grad(dir: [f64; 3]) -> ([f64; SH_COEFFS], [[f64; 3]; SH_COEFFS]) {
    let var = |k: usize| {
        let mut d = [0.0; 3];
        d[k] = 1.0;
        Dual { v: dir[k], d }
    };
    let one = Dual { v: 1.0, d: [0.0; 3] };
    let b = basis_generic(one, var(0), var(1), var(2));
    (b.map(|t| t.v), b.map(|t| t.d))
}

/// RGB from coefficients laid out `sh[c * 16 + k]`: `max(Σ_k sh·Y_k + ½, 0)`.
pub fn eval(sh: &[f64], dir: [f64; 3]) -> [f64; 3] {
    let y = basis(dir);
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let raw: f64 = (0..SH_COEFFS).map(|k| sh[c * SH_COEFFS + k] * y[k]).sum();
        *out = (raw + 0.5).max(0.0);
    }
    rgb
}
