//! Transformer building blocks expressed on the tape.

use rand::Rng;

use crate::autodiff::{AttnGroups, AttnSpec, Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Affine map `x W + b`; weights `N(0, std^2)`, zero bias.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), fan_in, fan_out, std, rng);
        let b = store.add_filled(format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.add_filled(format!("{name}.bias"), 1, dim, 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Multi-head attention with query/key/value/output projections.
/// Self-attention passes the same node as `queries` and `context`.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let s_in = 1.0 / (in_dim as f64).sqrt();
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            q: Linear::new(store, &format!("{name}.q"), in_dim, dim, s_in, rng),
            k: Linear::new(store, &format!("{name}.k"), in_dim, dim, s_in, rng),
            v: Linear::new(store, &format!("{name}.v"), in_dim, dim, s_in, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, s, rng),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        queries: Var,
        context: Var,
        causal: bool,
        groups: AttnGroups,
    ) -> Result<Var> {
        let q = self.q.forward(tape, p, queries)?;
        let k = self.k.forward(tape, p, context)?;
        let v = self.v.forward(tape, p, context)?;
        let spec = AttnSpec {
            heads: self.heads,
            causal,
        };
        let mixed = tape.attention(q, k, v, spec, groups)?;
        self.o.forward(tape, p, mixed)
    }
}

/// Position-wise `down(gelu(up(x)))`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, 1.0 / (dim as f64).sqrt(), rng),
            down: Linear::new(
                store,
                &format!("{name}.down"),
                hidden,
                dim,
                1.0 / (hidden as f64).sqrt(),
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }
}

/// Post-norm residual block: `LN(f(x) + x)`.
pub fn residual_norm<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    norm: &LayerNorm,
    x: Var,
    fx: Var,
) -> Result<Var> {
    let sum = tape.add(fx, x)?;
    norm.forward(tape, p, sum)
}
