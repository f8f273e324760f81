//! Transformer building blocks shared by the encoders and the triplane decoder.

use crate::autograd::{Graph, Var};
use crate::params::{xavier, ParamStore, ParamVars};
use crate::tensor::Tensor;
use crate::util::Rng;

pub const LN_EPS: f64 = 1e-6;

pub fn init_linear(store: &mut ParamStore, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros([fan_out]));
}

pub fn linear(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let w = pv.get(&format!("{prefix}.w"));
    let b = pv.get(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn init_attention(store: &mut ParamStore, rng: &mut Rng, prefix: &str, dim: usize) {
    for name in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{name}"), dim, dim);
    }
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
pub fn attention(g: &mut Graph, pv: &ParamVars, prefix: &str, queries: Var, context: Var, heads: usize) -> Var {
    let q = linear(g, pv, &format!("{prefix}.q"), queries);
    let k = linear(g, pv, &format!("{prefix}.k"), context);
    let v = linear(g, pv, &format!("{prefix}.v"), context);
    let dim = g.value(q).cols();
    assert_eq!(dim % heads, 0, "width {dim} not divisible by {heads} heads");
    let dh = dim / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt);
        let s = g.scale(s, inv);
        let a = g.softmax(s);
        outs.push(g.matmul(a, vh));
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, pv, &format!("{prefix}.o"), o)
}

pub fn init_mlp(store: &mut ParamStore, rng: &mut Rng, prefix: &str, dim: usize, hidden: usize) {
    init_linear(store, rng, &format!("{prefix}.fc1"), dim, hidden);
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, dim);
}

pub fn mlp(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let h = linear(g, pv, &format!("{prefix}.fc1"), x);
    let h = g.gelu(h);
    linear(g, pv, &format!("{prefix}.fc2"), h)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full([dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros([dim]));
}

pub fn layer_norm_affine(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var) -> Var {
    let y = g.layer_norm(x, LN_EPS);
    let y = g.mul_row(y, pv.get(&format!("{prefix}.g")));
    g.add_row(y, pv.get(&format!("{prefix}.b")))
}
