//! Layer building blocks shared by the text encoder and the noise predictor.

use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Result, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = ps.add_linear(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| ps.add_const(format!("{name}.b"), &[fan_out], 0.0));
        Self { w, b }
    }

    /// Zero-initialised weights, used for residual output projections.
    pub fn zeros(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.add_const(format!("{name}.w"), &[fan_in, fan_out], 0.0);
        let b = Some(ps.add_const(format!("{name}.b"), &[fan_out], 0.0));
        Self { w, b }
    }

    pub fn forward<'t, E: Element>(&self, p: &Bound<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let y = x.matmul(p.get(self.w))?;
        match self.b {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add_const(format!("{name}.g"), &[dim], 1.0),
            beta: ps.add_const(format!("{name}.b"), &[dim], 0.0),
        }
    }

    pub fn forward<'t, E: Element>(&self, p: &Bound<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward<'t, E: Element>(&self, p: &Bound<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let h = self.up.forward(p, x)?.gelu();
        self.down.forward(p, h)
    }
}

/// Scaled dot-product attention for a single head:
/// `softmax(q k^T / sqrt(d) + bias) v`. Returns `(attention map, output)`.
pub fn attend<'t, E: Element>(
    q: Var<'t, E>,
    k: Var<'t, E>,
    v: Var<'t, E>,
    bias: Option<&Tensor<E>>,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let d = q.value().shape()[1];
    let scores = q.matmul(k.transpose()?)?.scale(E::one() / E::from_usize(d).unwrap().sqrt());
    let a = scores.softmax(bias)?;
    let out = a.matmul(v)?;
    Ok((a, out))
}

/// Multi-head self-attention with fused `[dim, 3*dim]` QKV projection.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % heads, 0);
        Self {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, false, rng),
            out: Linear::new(ps, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    pub fn forward<'t, E: Element>(&self, p: &Bound<'t, E>, x: Var<'t, E>, bias: Option<&Tensor<E>>) -> Result<Var<'t, E>> {
        let qkv = self.qkv.forward(p, x)?;
        let dh = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = qkv.slice(1, h * dh, (h + 1) * dh)?;
            let k = qkv.slice(1, self.dim + h * dh, self.dim + (h + 1) * dh)?;
            let v = qkv.slice(1, 2 * self.dim + h * dh, 2 * self.dim + (h + 1) * dh)?;
            outs.push(attend(q, k, v, bias)?.1);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 1)? };
        self.out.forward(p, merged)
    }
}

/// Sinusoidal embedding of a scalar timestep.
pub fn timestep_embedding(t: f32, dim: usize, max_period: f32) -> Tensor<f32> {
    let half = dim / 2;
    Tensor::from_fn([dim], |i| {
        let k = i % half;
        let freq = (-(max_period.ln()) * k as f32 / half as f32).exp();
        let a = t * freq;
        if i < half {
            a.cos()
        } else {
            a.sin()
        }
    })
}
