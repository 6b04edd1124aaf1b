//! Forward constructors for every differentiable operation.

use super::graph::{cross, gemm, sobel_forward, unary_forward, Graph, Op, Unary, Var};
use super::tensor::{axis_split, broadcast_shapes, broadcast_strides, for_each_broadcast, Tensor};
use crate::error::{Error, Result};

impl Graph {
    fn binary(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(va.shape(), vb.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: op_name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            data
        };
        Ok((Tensor::new(&out_shape, data)?, self.tracked_any(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, tr) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), tr))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.value(x).map(|v| unary_forward(kind, v));
        let tr = self.is_tracked(x);
        self.push(t, Op::Unary(x, kind), tr)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Offset(c))
    }

    /// `max(x, c)` elementwise.
    pub fn max_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::MaxConst(c))
    }

    /// Hard clamp; zero gradient outside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    /// Smooth clamp `lo + softplus(x - lo) - softplus(x - hi)`.
    pub fn clamp_soft(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::ClampSoft(lo, hi))
    }

    /// Forwards the value and blocks every gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut c);
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], c)?, Op::MatMul(a, b), tr))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), tr))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(x, axis, if mean { "mean" } else { "sum" })?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&xs, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + l) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = xs;
        shape.remove(axis);
        let tr = self.is_tracked(x);
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push(Tensor::new(&shape, out)?, op, tr))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let tr = self.is_tracked(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let tr = self.is_tracked(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), tr)
    }

    /// `softmax(x / temperature)` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&xs, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[at(l)] / temperature).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] / temperature - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(&xs, out)?, Op::Softmax { x, axis, temperature }, tr))
    }

    /// Divides each slice along `axis` by its Euclidean norm.
    pub fn normalize_l2(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "normalize_l2")?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&xs, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let norm = (0..len).map(|l| d[at(l)] * d[at(l)]).sum::<f64>().sqrt();
                for l in 0..len {
                    out[at(l)] = d[at(l)] / norm;
                }
            }
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(&xs, out)?, Op::NormalizeL2 { x, axis }, tr))
    }

    /// Zero-mean, unit-variance normalization along `axis` (no affine part).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis, "layer_norm")?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&xs, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        let nl = len as f64;
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| d[at(l)]).sum::<f64>() / nl;
                let var = (0..len).map(|l| (d[at(l)] - mean).powi(2)).sum::<f64>() / nl;
                let inv = 1.0 / (var + eps).sqrt();
                for l in 0..len {
                    out[at(l)] = (d[at(l)] - mean) * inv;
                }
            }
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(&xs, out)?, Op::LayerNorm { x, axis, eps }, tr))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let tr = self.tracked_any(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, tr))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let xs = self.shape(x).to_vec();
        if start > end || end > xs[axis] {
            return Err(Error::ShapeMismatch { op: "slice", lhs: xs, rhs: vec![start, end] });
        }
        let (outer, full, inner) = axis_split(&xs, axis);
        let len = end - start;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, tr))
    }

    /// Broadcasts `x` to `shape` following numpy rules.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if broadcast_shapes(&xs, shape).as_deref() != Some(shape) {
            return Err(Error::ShapeMismatch { op: "broadcast", lhs: xs, rhs: shape.to_vec() });
        }
        let sx = broadcast_strides(&xs, shape);
        let zeros = vec![0; shape.len()];
        let d = self.value(x).data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_broadcast(shape, &sx, &zeros, |o, ix, _| out[o] = d[ix]);
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Broadcast(x), tr))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tr = self.is_tracked(x);
        Ok(self.push(t, Op::Reshape(x), tr))
    }

    /// Row-wise cross product over a trailing axis of length 3.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.last() != Some(&3) {
            return Err(Error::ShapeMismatch { op: "cross3", lhs: sa, rhs: sb });
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len());
        for r in 0..da.len() / 3 {
            out.extend_from_slice(&cross(&da[r * 3..r * 3 + 3], &db[r * 3..r * 3 + 3]));
        }
        let tr = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(&sa, out)?, Op::Cross3(a, b), tr))
    }

    /// Valid-mode Sobel gradients of an `H×W×C` image: output `(H-2)×(W-2)×C×2`.
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] < 3 || xs[1] < 3 {
            return Err(Error::ShapeMismatch { op: "sobel", lhs: xs, rhs: vec![3, 3] });
        }
        let out = sobel_forward(&xs, self.value(x).data());
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(&[xs[0] - 2, xs[1] - 2, xs[2], 2], out)?, Op::Sobel(x), tr))
    }

    /// 2×2 average pooling of an `H×W×C` image with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] % 2 != 0 || xs[1] % 2 != 0 {
            return Err(Error::ShapeMismatch { op: "avg_pool2", lhs: xs, rhs: vec![2, 2] });
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        for i in 0..ho {
            for j in 0..wo {
                for ch in 0..c {
                    let at = |ii: usize, jj: usize| d[(ii * w + jj) * c + ch];
                    out[(i * wo + j) * c + ch] = 0.25
                        * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
                }
            }
        }
        let tr = self.is_tracked(x);
        Ok(self.push(Tensor::new(&[ho, wo, c], out)?, Op::AvgPool2(x), tr))
    }

    /// Scalar constant node.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }
}
