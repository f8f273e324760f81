//! Per-token residual fusion of semantic and geometric tokens.
//!
//! `fused = sem + W2 · silu(W1 · [sem ‖ geo] + b1) + b2`, with `W2`, `b2`
//! zero at construction so the fused tokens start out equal to `sem`.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::encoders::{TokenGrid, TokenKind};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{ParamStore, ParamVars};
use crate::tensor::Tensor;
use crate::util::Rng;

pub const PREFIX: &str = "fuser";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Residual,
    TokenConcat,
    Disabled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetwork {
    mode: FusionMode,
    dim: usize,
    hidden: usize,
}

impl FusionNetwork {
    /// Registers the fusion weights in `store` (residual mode only).
    pub fn new(store: &mut ParamStore, rng: &mut Rng, mode: FusionMode, dim: usize, hidden: usize) -> Self {
        store.remove_prefix(&format!("{PREFIX}."));
        if mode == FusionMode::Residual {
            nn::init_linear(store, rng, &format!("{PREFIX}.fc1"), 2 * dim, hidden);
            store.insert(format!("{PREFIX}.fc2.w"), Tensor::zeros([hidden, dim]));
            store.insert(format!("{PREFIX}.fc2.b"), Tensor::zeros([dim]));
        }
        Self { mode, dim, hidden }
    }

    /// Rebuilds the description of a network whose weights already live in a store.
    pub fn from_store(store: &ParamStore, mode: FusionMode, dim: usize) -> Result<Self> {
        if mode != FusionMode::Residual {
            return Ok(Self { mode, dim, hidden: 0 });
        }
        let w = store
            .get(&format!("{PREFIX}.fc2.w"))
            .ok_or_else(|| Error::Checkpoint("fusion weights missing".into()))?;
        if w.shape().len() != 2 || w.shape()[1] != dim {
            return Err(Error::Checkpoint(format!("fusion weights have shape {:?}", w.shape())));
        }
        Ok(Self { mode, dim, hidden: w.shape()[0] })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        match self.mode {
            FusionMode::Residual => 2 * self.dim * self.hidden + self.hidden + self.hidden * self.dim + self.dim,
            _ => 0,
        }
    }

    /// Fused tokens of one view. Token-concat mode returns `2N` tokens.
    pub fn fuse(&self, g: &mut Graph, pv: &ParamVars, sem: TokenGrid, geo: TokenGrid) -> Result<TokenGrid> {
        if sem.kind != TokenKind::Semantic || geo.kind != TokenKind::Geometric {
            return Err(Error::InvalidArgument("fusion needs a semantic and a geometric token grid".into()));
        }
        if sem.view != geo.view {
            return Err(Error::InvalidArgument(format!("view mismatch: {} vs {}", sem.view, geo.view)));
        }
        if g.shape(sem.tokens) != g.shape(geo.tokens) {
            return Err(Error::Shape(format!(
                "token grids differ: {:?} vs {:?}",
                g.shape(sem.tokens),
                g.shape(geo.tokens)
            )));
        }
        let tokens = match self.mode {
            FusionMode::Disabled => sem.tokens,
            FusionMode::TokenConcat => concat_variant(g, sem, geo)?.tokens,
            FusionMode::Residual => {
                let x = g.concat_cols(&[sem.tokens, geo.tokens]);
                let h = nn::linear(g, pv, &format!("{PREFIX}.fc1"), x);
                let h = g.silu(h);
                let r = nn::linear(g, pv, &format!("{PREFIX}.fc2"), h);
                g.add(sem.tokens, r)
            }
        };
        Ok(TokenGrid { tokens, view: sem.view, kind: TokenKind::Fused })
    }
}

/// Geometric tokens appended after the semantic ones along the token axis.
pub fn concat_variant(g: &mut Graph, sem: TokenGrid, geo: TokenGrid) -> Result<TokenGrid> {
    if g.shape(sem.tokens) != g.shape(geo.tokens) {
        return Err(Error::Shape("token-concat needs equal token grids".into()));
    }
    let tokens = g.concat_rows(&[sem.tokens, geo.tokens]);
    Ok(TokenGrid { tokens, view: sem.view, kind: TokenKind::Fused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use crate::util::rng;

    fn grids(g: &mut Graph, n: usize, d: usize, seed: u64) -> (TokenGrid, TokenGrid) {
        let mut r = rng(seed);
        let s = g.constant(normal(&mut r, [n, d], 1.0));
        let t = g.constant(normal(&mut r, [n, d], 1.0));
        (
            TokenGrid { tokens: s, view: 0, kind: TokenKind::Semantic },
            TokenGrid { tokens: t, view: 0, kind: TokenKind::Geometric },
        )
    }

    #[test]
    fn fresh_network_is_identity() {
        let mut store = ParamStore::new();
        let net = FusionNetwork::new(&mut store, &mut rng(3), FusionMode::Residual, 8, 8);
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &store, |_| true);
        let (s, t) = grids(&mut g, 16, 8, 1);
        let f = net.fuse(&mut g, &pv, s, t).unwrap();
        assert_eq!(g.value(f.tokens).data(), g.value(s.tokens).data());
        assert_eq!(f.kind, TokenKind::Fused);
        assert_eq!(net.param_count(), store.num_scalars(|_| true));
    }

    #[test]
    fn concat_doubles_tokens() {
        let mut g = Graph::new();
        let (s, t) = grids(&mut g, 16, 4, 2);
        let c = concat_variant(&mut g, s, t).unwrap();
        assert_eq!(g.shape(c.tokens), &[32, 4]);
        assert_eq!(&g.value(c.tokens).data()[..64], g.value(s.tokens).data());
    }

    #[test]
    fn rejects_view_mismatch() {
        let mut store = ParamStore::new();
        let net = FusionNetwork::new(&mut store, &mut rng(0), FusionMode::Residual, 4, 4);
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &store, |_| true);
        let (s, mut t) = grids(&mut g, 4, 4, 0);
        t.view = 1;
        assert!(net.fuse(&mut g, &pv, s, t).is_err());
    }
}
