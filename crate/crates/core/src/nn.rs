//! Small tape-level layers shared by the conditioner and the backbone.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self {
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `bias` takes the init for the bias vector, if any.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
        w_init: Init,
        bias: Option<Init>,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), w_init.tensor(&[din, dout], rng));
        let b = bias.map(|i| ps.add(format!("{name}.b"), i.tensor(&[dout], rng)));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// RMS norm with a learned gain.
#[derive(Clone, Debug)]
pub struct Norm(pub ParamId);

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Norm(ps.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)))
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.rms_norm(x, p.var(self.0))
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, std: f64, out_init: Init, rng: &mut impl Rng) -> Self {
        let mut lin = |n: &str, init| Linear::new(ps, &format!("{name}.{n}"), dim, dim, init, None, rng);
        let q = lin("q", Init::Normal(std));
        let k = lin("k", Init::Normal(std));
        let v = lin("v", Init::Normal(std));
        let o = lin("o", out_init);
        Self { q, k, v, o, heads }
    }

    /// softmax(Q Kᵀ / √d_h) V per head, concatenated, then projected.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, xq: Var, xkv: Var) -> Result<Var> {
        let dim = tape.shape(xq)[1];
        if tape.shape(xkv)[1] != dim {
            return Err(shape_err!(
                "attention width mismatch: queries {:?}, keys {:?}",
                tape.shape(xq),
                tape.shape(xkv)
            ));
        }
        let q = self.q.apply(tape, p, xq)?;
        let k = self.k.apply(tape, p, xkv)?;
        let v = self.v.apply(tape, p, xkv)?;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, a, b)?, tape.slice_cols(k, a, b)?, tape.slice_cols(v, a, b)?)
            };
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, scale);
            let w = tape.softmax_rows(s);
            outs.push(tape.matmul(w, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        self.o.apply(tape, p, cat)
    }
}

/// Two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, std: f64, out_init: Init, rng: &mut impl Rng) -> Self {
        let up = Linear::new(ps, &format!("{name}.up"), dim, hidden, Init::Normal(std), Some(Init::Zeros), rng);
        let down = Linear::new(ps, &format!("{name}.down"), hidden, dim, out_init, Some(Init::Zeros), rng);
        Self { up, down }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.apply(tape, p, x)?;
        let h = tape.silu(h);
        self.down.apply(tape, p, h)
    }
}
