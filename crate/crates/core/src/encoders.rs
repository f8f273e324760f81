//! Camera-conditioned micro vision transformers: the semantic encoder over
//! RGB views and the geometry encoder over rendered normals and depth.
//!
//! Each block applies AdaLN modulation produced by a single linear map of the
//! camera conditioning vector:
//!
//! ```text
//! [shift1 scale1 gate1 shift2 scale2 gate2] = cond · W + b
//! x = x + (1 + gate1) ⊙ attn(LN(x) ⊙ (1 + scale1) + shift1)
//! x = x + (1 + gate2) ⊙ mlp(LN(x) ⊙ (1 + scale2) + shift2)
//! ```
//!
//! `W` and `b` start at zero, which makes the modulation an exact identity.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{normal, xavier, ParamStore, ParamVars};
use crate::scenekit::{CameraPose, COND_DIM};
use crate::tensor::Tensor;
use crate::util::Rng;

pub const SEMANTIC: &str = "sem";
pub const GEOMETRIC: &str = "geo";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Semantic,
    Geometric,
    Fused,
}

/// `N × d` tokens of one view, living on a graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub view: usize,
    pub kind: TokenKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_res: usize,
    pub patch: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image_res / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_res.is_multiple_of(self.patch) {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by patch {}",
                self.image_res, self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!("width {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    /// Scalar parameter count; a pure function of the shape hyperparameters.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let per_block = COND_DIM * 6 * d + 6 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        self.patch_dim() * d + d + self.tokens() * d + self.depth * per_block + 2 * d
    }
}

/// Flat source index for every entry of the patch matrix of an `h × h × c` image.
///
/// Row `k` is the `k`-th patch in row-major patch order; within a row pixels
/// are row-major with channels fastest.
pub fn patch_indices(h: usize, c: usize, p: usize) -> Vec<usize> {
    let side = h / p;
    let mut idx = Vec::with_capacity(h * h * c);
    for pr in 0..side {
        for pc in 0..side {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (pr * p + py, pc * p + px);
                    for ch in 0..c {
                        idx.push((y * h + x) * c + ch);
                    }
                }
            }
        }
    }
    idx
}

fn check_patchable(shape: &[usize], p: usize) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("expected a square H×W×C image, got {shape:?}")));
    }
    if p == 0 || !shape[0].is_multiple_of(p) {
        return Err(Error::Shape(format!("image side {} not divisible by patch {p}", shape[0])));
    }
    Ok((shape[0], shape[2]))
}

pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, c) = check_patchable(image.shape(), p)?;
    let n = (h / p) * (h / p);
    let data = patch_indices(h, c, p).into_iter().map(|i| image.data()[i]).collect();
    Ok(Tensor::new([n, p * p * c], data))
}

pub fn unpatchify(patches: &Tensor, h: usize, c: usize, p: usize) -> Tensor {
    let mut out = vec![0.0; h * h * c];
    for (src, dst) in patch_indices(h, c, p).into_iter().enumerate() {
        out[dst] = patches.data()[src];
    }
    Tensor::new([h, h, c], out)
}

pub fn init_encoder(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: &EncoderConfig) {
    let d = cfg.dim;
    store.insert(format!("{prefix}.patch.w"), xavier(rng, cfg.patch_dim(), d));
    store.insert(format!("{prefix}.patch.b"), Tensor::zeros([d]));
    store.insert(format!("{prefix}.pos"), normal(rng, [cfg.tokens(), d], 0.02));
    for i in 0..cfg.depth {
        let b = format!("{prefix}.blocks.{i}");
        store.insert(format!("{b}.ada.w"), Tensor::zeros([COND_DIM, 6 * d]));
        store.insert(format!("{b}.ada.b"), Tensor::zeros([6 * d]));
        nn::init_attention(store, rng, &format!("{b}.attn"), d);
        nn::init_mlp(store, rng, &format!("{b}.mlp"), d, 4 * d);
    }
    nn::init_layer_norm(store, &format!("{prefix}.norm"), d);
}

/// Per-block `[1, 6d]` modulation vector from the conditioning vector.
pub fn adaln_modulation(g: &mut Graph, pv: &ParamVars, block: &str, cond: Var) -> Var {
    let w = pv.get(&format!("{block}.ada.w"));
    let b = pv.get(&format!("{block}.ada.b"));
    let m = g.matmul(cond, w);
    g.add_row(m, b)
}

/// `LN(x) ⊙ (1 + scale) + shift`, or plain `LN(x)` when unconditioned.
fn modulate(g: &mut Graph, x: Var, m: Option<(Var, usize)>, which: usize) -> Var {
    let h = g.layer_norm(x, nn::LN_EPS);
    match m {
        None => h,
        Some((m, d)) => {
            let shift = g.slice_cols(m, 3 * d * which, d);
            let scale = g.slice_cols(m, 3 * d * which + d, d);
            let scale = g.offset(scale, 1.0);
            let h = g.mul_row(h, scale);
            g.add_row(h, shift)
        }
    }
}

fn gated(g: &mut Graph, y: Var, m: Option<(Var, usize)>, which: usize) -> Var {
    match m {
        None => y,
        Some((m, d)) => {
            let gate = g.slice_cols(m, 3 * d * which + 2 * d, d);
            let gate = g.offset(gate, 1.0);
            g.mul_row(y, gate)
        }
    }
}

/// One transformer block; `cond = None` runs it without any modulation.
pub fn adaln_block(g: &mut Graph, pv: &ParamVars, block: &str, heads: usize, x: Var, cond: Option<Var>) -> Var {
    let d = g.value(x).cols();
    let m = cond.map(|c| (adaln_modulation(g, pv, block, c), d));
    let h = modulate(g, x, m, 0);
    let a = nn::attention(g, pv, &format!("{block}.attn"), h, h, heads);
    let a = gated(g, a, m, 0);
    let x = g.add(x, a);
    let h = modulate(g, x, m, 1);
    let f = nn::mlp(g, pv, &format!("{block}.mlp"), h);
    let f = gated(g, f, m, 1);
    g.add(x, f)
}

/// Full encoder pass over an `H × W × C` image variable.
pub fn encoder_forward(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    cfg: &EncoderConfig,
    image: Var,
    cond: Var,
) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    let (h, c) = check_patchable(&shape, cfg.patch)?;
    if h != cfg.image_res || c != cfg.channels {
        return Err(Error::Shape(format!(
            "{prefix} encoder expects {0}×{0}×{1}, got {shape:?}",
            cfg.image_res, cfg.channels
        )));
    }
    if g.value(cond).numel() != COND_DIM {
        return Err(Error::Shape(format!("conditioning vector has {} entries", g.value(cond).numel())));
    }
    let n = cfg.tokens();
    let patches = g.gather(image, patch_indices(h, c, cfg.patch), [n, cfg.patch_dim()]);
    let mut x = nn::linear(g, pv, &format!("{prefix}.patch"), patches);
    x = g.add(x, pv.get(&format!("{prefix}.pos")));
    let cond = g.reshape(cond, [1, COND_DIM]);
    for i in 0..cfg.depth {
        x = adaln_block(g, pv, &format!("{prefix}.blocks.{i}"), cfg.heads, x, Some(cond));
    }
    Ok(nn::layer_norm_affine(g, pv, &format!("{prefix}.norm"), x))
}

pub fn camera_var(g: &mut Graph, camera: &CameraPose) -> Var {
    g.constant(Tensor::new([1, COND_DIM], camera.conditioning().to_vec()))
}

pub fn encode_semantic(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &EncoderConfig,
    rgb: &[f64],
    camera: &CameraPose,
    view: usize,
) -> Result<TokenGrid> {
    let r = cfg.image_res;
    if rgb.len() != r * r * 3 || cfg.channels != 3 {
        return Err(Error::Shape(format!("semantic encoder needs a {r}×{r}×3 image")));
    }
    let image = g.constant(Tensor::new([r, r, 3], rgb.to_vec()));
    let cond = camera_var(g, camera);
    let tokens = encoder_forward(g, pv, SEMANTIC, cfg, image, cond)?;
    Ok(TokenGrid { tokens, view, kind: TokenKind::Semantic })
}

/// Which geometry channels reach the geometry encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryInput {
    #[default]
    Both,
    NormalOnly,
    DepthOnly,
}

/// Stacks `(n_x, n_y, n_z, depth / depth_divisor)` into an `H × W × 4` variable.
///
/// `depth` is `[H·W, 1]` and `normal` is `[H·W, 3]`; excluded channels are zeroed.
pub fn geometry_image(
    g: &mut Graph,
    res: usize,
    depth: Var,
    normal: Var,
    depth_divisor: f64,
    input: GeometryInput,
) -> Result<Var> {
    if !g.value(depth).is_finite() || !g.value(normal).is_finite() {
        return Err(Error::NonFinite("geometry encoder input".into()));
    }
    if g.value(depth).numel() != res * res || g.value(normal).numel() != 3 * res * res {
        return Err(Error::Shape(format!("geometry maps must be {res}×{res}")));
    }
    let depth = g.reshape(depth, [res * res, 1]);
    let normal = g.reshape(normal, [res * res, 3]);
    let dn = g.scale(depth, 1.0 / depth_divisor);
    let (normal, dn) = match input {
        GeometryInput::Both => (normal, dn),
        GeometryInput::NormalOnly => (normal, g.scale(dn, 0.0)),
        GeometryInput::DepthOnly => (g.scale(normal, 0.0), dn),
    };
    let stacked = g.concat_cols(&[normal, dn]);
    Ok(g.reshape(stacked, [res, res, 4]))
}

#[allow(clippy::too_many_arguments)]
pub fn encode_geometry(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &EncoderConfig,
    depth: Var,
    normal: Var,
    camera: &CameraPose,
    depth_divisor: f64,
    input: GeometryInput,
    view: usize,
) -> Result<TokenGrid> {
    if cfg.channels != 4 {
        return Err(Error::Shape("geometry encoder needs 4 input channels".into()));
    }
    let image = geometry_image(g, cfg.image_res, depth, normal, depth_divisor, input)?;
    let cond = camera_var(g, camera);
    let tokens = encoder_forward(g, pv, GEOMETRIC, cfg, image, cond)?;
    Ok(TokenGrid { tokens, view, kind: TokenKind::Geometric })
}

/// Copies every semantic-encoder parameter into the geometry encoder. The
/// patch embedding gains a fourth (depth) input channel with zero weights;
/// the three colour channels keep their weights and are fed by normals.
pub fn init_geoformer_from_semantic(store: &mut ParamStore, sem: &EncoderConfig) -> Result<()> {
    if sem.channels != 3 {
        return Err(Error::InvalidArgument("copy-initialization needs a 3-channel source encoder".into()));
    }
    store.remove_prefix(&format!("{GEOMETRIC}."));
    let src: Vec<(String, Tensor)> = store
        .iter()
        .filter(|(k, _)| k.starts_with(&format!("{SEMANTIC}.")))
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    let d = sem.dim;
    let pixels = sem.patch * sem.patch;
    for (name, t) in src {
        let new_name = format!("{GEOMETRIC}{}", &name[SEMANTIC.len()..]);
        if name == format!("{SEMANTIC}.patch.w") {
            let mut w = vec![0.0; pixels * 4 * d];
            for px in 0..pixels {
                for c in 0..3 {
                    let (dst, srcr) = ((px * 4 + c) * d, (px * 3 + c) * d);
                    w[dst..dst + d].copy_from_slice(&t.data()[srcr..srcr + d]);
                }
            }
            store.insert(new_name, Tensor::new([pixels * 4, d], w));
        } else {
            store.insert(new_name, t);
        }
    }
    Ok(())
}

/// Fresh random geometry encoder with the same shapes, for the random-init ablation.
pub fn init_geoformer_random(store: &mut ParamStore, rng: &mut Rng, sem: &EncoderConfig) {
    store.remove_prefix(&format!("{GEOMETRIC}."));
    let cfg = EncoderConfig { channels: 4, ..sem.clone() };
    init_encoder(store, rng, GEOMETRIC, &cfg);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;

    #[test]
    fn patchify_shapes_and_constant_rows() {
        let img = Tensor::full([32, 32, 3], 0.25);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[16, 192]);
        assert!(p.data().iter().all(|&v| v == 0.25));
        assert!(patchify(&Tensor::zeros([32, 30, 3]), 8).is_err());
        assert!(patchify(&Tensor::zeros([30, 30, 3]), 8).is_err());
    }

    #[test]
    fn patch_order_is_row_major_channels_fastest() {
        let data: Vec<f64> = (0..4 * 4 * 2).map(|v| v as f64).collect();
        let p = patchify(&Tensor::new([4, 4, 2], data), 2).unwrap();
        // patch 1 is the top-right 2×2 block: pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(p.row(1), &[4., 5., 6., 7., 12., 13., 14., 15.]);
    }

    #[test]
    fn param_count_matches_initializer() {
        let cfg = EncoderConfig { image_res: 32, patch: 8, channels: 3, dim: 16, depth: 2, heads: 2 };
        let mut s = ParamStore::new();
        init_encoder(&mut s, &mut rng(0), SEMANTIC, &cfg);
        assert_eq!(s.num_scalars(|_| true), cfg.param_count());
    }

    #[test]
    fn copy_init_grows_patch_embedding() {
        let cfg = EncoderConfig { image_res: 16, patch: 8, channels: 3, dim: 8, depth: 1, heads: 1 };
        let mut s = ParamStore::new();
        init_encoder(&mut s, &mut rng(0), SEMANTIC, &cfg);
        init_geoformer_from_semantic(&mut s, &cfg).unwrap();
        assert_eq!(s.get("sem.patch.w").unwrap().numel(), 8 * 8 * 3 * 8);
        assert_eq!(s.get("geo.patch.w").unwrap().numel(), 8 * 8 * 4 * 8);
        let w = s.get("geo.patch.w").unwrap();
        for px in 0..64 {
            assert!(w.row(px * 4 + 3).iter().all(|&v| v == 0.0));
        }
        assert_eq!(s.get("geo.blocks.0.attn.q.w"), s.get("sem.blocks.0.attn.q.w"));
    }
}
