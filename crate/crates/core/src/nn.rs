//! Small layer building blocks shared by the encoder, camera code and decoder heads.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Normal samples with standard deviation `std`, redrawn outside ±2 std.
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Affine map `x W + b` over the last axis of a 2-D input.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(&format!("{name}.weight"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD))?;
        let bias = if bias {
            Some(store.register(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => g.add(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(&format!("{name}.gain"), Tensor::full(&[width], 1.0))?,
            bias: store.register(&format!("{name}.bias"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        let n = g.layer_norm(x, axis, LN_EPS)?;
        let n = g.mul(n, p.var(self.gain))?;
        g.add(n, p.var(self.bias))
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), fan_in, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, fan_out, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}
