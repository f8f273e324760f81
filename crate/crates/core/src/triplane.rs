//! Triplane decoder and differentiable field renderer.
//!
//! The decoder turns `3R²` learnable query tokens into three `R × R × d`
//! feature planes (XY, XZ, YZ, each row-major) by cross-attending to the
//! concatenated tokens of every view. Points are decoded by summing bilinear
//! lookups on the three planes and running a small MLP that yields a density
//! and a colour; views are rendered by alpha compositing along camera rays.

use serde::{Deserialize, Serialize};

use crate::autograd::{CompositeSpec, Graph, NormalSpec, Var};
use crate::encoders::TokenGrid;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{normal, ParamStore, ParamVars};
use crate::scenekit::{CameraPose, BACKGROUND, SQRT3};
use crate::tensor::Tensor;
use crate::util::{self, Rng};

pub const DECODER: &str = "dec";
pub const FIELD: &str = "field";
/// Initial bias of the density pre-activation, so a fresh field starts mostly transparent.
pub const DENSITY_BIAS: f64 = -2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub res: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl DecoderConfig {
    pub fn queries(&self) -> usize {
        3 * self.res * self.res
    }
}

pub fn init_decoder(store: &mut ParamStore, rng: &mut Rng, cfg: &DecoderConfig) {
    let d = cfg.dim;
    store.insert(format!("{DECODER}.queries"), normal(rng, [cfg.queries(), d], 0.5));
    for i in 0..cfg.depth {
        let b = format!("{DECODER}.blocks.{i}");
        nn::init_layer_norm(store, &format!("{b}.ln1"), d);
        nn::init_attention(store, rng, &format!("{b}.xattn"), d);
        nn::init_layer_norm(store, &format!("{b}.ln2"), d);
        nn::init_attention(store, rng, &format!("{b}.attn"), d);
        nn::init_layer_norm(store, &format!("{b}.ln3"), d);
        nn::init_mlp(store, rng, &format!("{b}.mlp"), d, 4 * d);
    }
    nn::init_layer_norm(store, &format!("{DECODER}.norm"), d);
}

/// Decodes the tokens of all views into planes `[3, R, R, d]`.
pub fn decode_triplane(g: &mut Graph, pv: &ParamVars, cfg: &DecoderConfig, views: &[TokenGrid]) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("triplane decoding needs at least one view".into()));
    }
    for v in views {
        let s = g.shape(v.tokens);
        if s.len() != 2 || s[1] != cfg.dim {
            return Err(Error::Shape(format!("view {} tokens have shape {s:?}, width {} expected", v.view, cfg.dim)));
        }
    }
    let parts: Vec<Var> = views.iter().map(|v| v.tokens).collect();
    let context = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    let mut x = pv.get(&format!("{DECODER}.queries"));
    for i in 0..cfg.depth {
        let b = format!("{DECODER}.blocks.{i}");
        let h = nn::layer_norm_affine(g, pv, &format!("{b}.ln1"), x);
        let a = nn::attention(g, pv, &format!("{b}.xattn"), h, context, cfg.heads);
        x = g.add(x, a);
        let h = nn::layer_norm_affine(g, pv, &format!("{b}.ln2"), x);
        let a = nn::attention(g, pv, &format!("{b}.attn"), h, h, cfg.heads);
        x = g.add(x, a);
        let h = nn::layer_norm_affine(g, pv, &format!("{b}.ln3"), x);
        let f = nn::mlp(g, pv, &format!("{b}.mlp"), h);
        x = g.add(x, f);
    }
    let x = nn::layer_norm_affine(g, pv, &format!("{DECODER}.norm"), x);
    Ok(g.reshape(x, [3, cfg.res, cfg.res, cfg.dim]))
}

pub fn init_field(store: &mut ParamStore, rng: &mut Rng, dim: usize) {
    nn::init_linear(store, rng, &format!("{FIELD}.fc1"), dim, dim);
    nn::init_linear(store, rng, &format!("{FIELD}.fc2"), dim, dim);
    nn::init_linear(store, rng, &format!("{FIELD}.out"), dim, 4);
    let b = store.get_mut(&format!("{FIELD}.out.b")).expect("just inserted");
    b.data_mut()[0] = DENSITY_BIAS;
}

/// Features `[S, d]` to `(density [S, 1], rgb [S, 3])`.
pub fn field_decode(g: &mut Graph, pv: &ParamVars, features: Var) -> (Var, Var) {
    let h = nn::linear(g, pv, &format!("{FIELD}.fc1"), features);
    let h = g.silu(h);
    let h = nn::linear(g, pv, &format!("{FIELD}.fc2"), h);
    let h = g.silu(h);
    let raw = nn::linear(g, pv, &format!("{FIELD}.out"), h);
    let sigma = g.slice_cols(raw, 0, 1);
    let color = g.slice_cols(raw, 1, 3);
    (g.softplus(sigma), g.sigmoid(color))
}

/// Anything that maps world points `[S, 3]` to `(density [S, 1], rgb [S, 3])`.
pub trait Field {
    fn query(&self, g: &mut Graph, points: Var) -> (Var, Var);
}

/// The learned field: triplane lookup followed by the field MLP.
pub struct TriplaneField<'a> {
    pub planes: Var,
    pub params: &'a ParamVars,
}

impl Field for TriplaneField<'_> {
    fn query(&self, g: &mut Graph, points: Var) -> (Var, Var) {
        let f = g.triplane_sample(self.planes, points);
        field_decode(g, self.params, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub res: usize,
    pub samples: usize,
    /// Central-difference step for density-gradient normals.
    pub normal_step: f64,
}

/// Differentiable render of one view. Everything is per ray, `rays = res²`.
#[derive(Clone, Copy, Debug)]
pub struct RenderedView {
    pub res: usize,
    /// `[rays, 5]`: rgb, depth, accumulation.
    pub composite: Var,
    /// `[rays, 3]` camera-space normals, zero on rays with accumulation ≤ 0.5.
    pub normal: Var,
}

/// Plain buffers of a rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImages {
    pub res: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
    pub acc: Vec<f64>,
}

impl RenderedImages {
    pub fn mask(&self) -> Vec<f64> {
        self.acc.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect()
    }
}

impl RenderedView {
    pub fn rgb(&self, g: &mut Graph) -> Var {
        g.slice_cols(self.composite, 0, 3)
    }

    pub fn depth(&self, g: &mut Graph) -> Var {
        g.slice_cols(self.composite, 3, 1)
    }

    pub fn acc(&self, g: &mut Graph) -> Var {
        g.slice_cols(self.composite, 4, 1)
    }

    pub fn images(&self, g: &Graph) -> RenderedImages {
        let c = g.value(self.composite);
        let n = self.res * self.res;
        let mut out = RenderedImages {
            res: self.res,
            rgb: Vec::with_capacity(3 * n),
            depth: Vec::with_capacity(n),
            normal: g.value(self.normal).data().to_vec(),
            acc: Vec::with_capacity(n),
        };
        for r in c.data().chunks(5) {
            out.rgb.extend_from_slice(&r[..3]);
            out.depth.push(r[3]);
            out.acc.push(r[4]);
        }
        out
    }
}

/// Ray interval through the bounding cube for a camera at distance `dist`.
pub fn ray_bounds(dist: f64) -> (f64, f64) {
    ((dist - SQRT3).max(0.0), dist + SQRT3)
}

/// Midpoints of `samples` equal strata over the ray interval, and the stratum length.
pub fn sample_distances(camera: &CameraPose, samples: usize) -> (Vec<f64>, f64) {
    let (near, far) = ray_bounds(camera.distance());
    let delta = (far - near) / samples as f64;
    ((0..samples).map(|i| near + (i as f64 + 0.5) * delta).collect(), delta)
}

pub fn render_view(g: &mut Graph, field: &dyn Field, camera: &CameraPose, opts: &RenderOptions) -> Result<RenderedView> {
    if opts.samples < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 samples per ray, got {}", opts.samples)));
    }
    let res = opts.res;
    let rays = res * res;
    let (t, delta) = sample_distances(camera, opts.samples);
    let dirs: Vec<_> = (0..rays).map(|i| camera.ray_dir(i / res, i % res, res)).collect();
    let mut pts = Vec::with_capacity(rays * opts.samples * 3);
    for d in &dirs {
        for &ti in &t {
            pts.extend_from_slice(&util::add(camera.position, util::scale(*d, ti)));
        }
    }
    let points = g.constant(Tensor::new([rays * opts.samples, 3], pts));
    let (density, rgb) = field.query(g, points);
    if !g.value(density).is_finite() {
        let bad = g.value(density).data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(Error::NonFinite(format!(
            "density at ray {} sample {}",
            bad / opts.samples,
            bad % opts.samples
        )));
    }
    let spec = CompositeSpec { rays, samples: opts.samples, t, delta, background: BACKGROUND };
    let composite = g.composite(density, rgb, spec);

    // Normals at the (detached) expected surface point of every covered ray.
    let cv = g.value(composite).data().to_vec();
    let mut foreground = Vec::new();
    let mut probes = Vec::new();
    let h = opts.normal_step;
    for (r, d) in dirs.iter().enumerate() {
        if cv[r * 5 + 4] <= 0.5 {
            continue;
        }
        foreground.push(r);
        let p = util::add(camera.position, util::scale(*d, cv[r * 5 + 3]));
        for a in 0..3 {
            for s in [h, -h] {
                let mut q = p;
                q[a] += s;
                probes.extend_from_slice(&q);
            }
        }
    }
    let nspec = NormalSpec { rays, foreground, step: h, rotation: camera.rotation };
    let normal = if nspec.foreground.is_empty() {
        g.constant(Tensor::zeros([rays, 3]))
    } else {
        let n = nspec.foreground.len() * 6;
        let probe_points = g.constant(Tensor::new([n, 3], probes));
        let (pd, _) = field.query(g, probe_points);
        g.density_normals(pd, nspec)
    };
    Ok(RenderedView { res, composite, normal })
}

/// Analytic field: constant density inside a sphere, zero outside.
pub struct SphereField {
    pub radius: f64,
    pub density: f64,
    pub albedo: [f64; 3],
}

impl Field for SphereField {
    fn query(&self, g: &mut Graph, points: Var) -> (Var, Var) {
        let p = g.value(points);
        let n = p.rows();
        let mut d = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(3 * n);
        for q in p.data().chunks(3) {
            let inside = util::norm([q[0], q[1], q[2]]) < self.radius;
            d.push(if inside { self.density } else { 0.0 });
            c.extend_from_slice(&self.albedo);
        }
        (g.constant(Tensor::new([n, 1], d)), g.constant(Tensor::new([n, 3], c)))
    }
}

/// `n³` points of a regular grid spanning the bounding cube, x fastest.
pub fn grid_points(n: usize) -> Tensor {
    let c = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let mut pts = Vec::with_capacity(n * n * n * 3);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                pts.extend_from_slice(&[c(x), c(y), c(z)]);
            }
        }
    }
    Tensor::new([n * n * n, 3], pts)
}

/// Density of a learned field on [`grid_points`].
pub fn density_grid(planes: &Tensor, store: &ParamStore, n: usize) -> Vec<f64> {
    density_at(planes, store, grid_points(n))
}

/// Density of a learned field at `[N,3]` points.
pub fn density_at(planes: &Tensor, store: &ParamStore, points: Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, store, |_| false);
    let planes = g.constant(planes.clone());
    let points = g.constant(points);
    let (d, _) = TriplaneField { planes, params: &pv }.query(&mut g, points);
    g.value(d).data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::composite_weights;
    use crate::util::rng;

    #[test]
    fn zero_feature_field_closed_form() {
        let mut store = ParamStore::new();
        init_field(&mut store, &mut rng(0), 4);
        for (k, t) in store.iter_mut() {
            if k.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &store, |_| false);
        let f = g.constant(Tensor::zeros([2, 4]));
        let (d, c) = field_decode(&mut g, &pv, f);
        assert!((g.value(d).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!(g.value(c).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn empty_volume_renders_background() {
        let cam = CameraPose::orbit(30.0, 10.0, 2.0, 40.0).unwrap();
        let mut g = Graph::new();
        let field = SphereField { radius: 0.5, density: 0.0, albedo: [0.2; 3] };
        let opts = RenderOptions { res: 16, samples: 16, normal_step: 0.25 };
        let v = render_view(&mut g, &field, &cam, &opts).unwrap().images(&g);
        assert!(v.acc.iter().all(|&a| a == 0.0));
        assert!(v.rgb.iter().all(|&c| c == 1.0));
        assert!(v.depth.iter().all(|&d| d == 0.0));
        assert!(v.normal.iter().all(|&n| n == 0.0));
    }

    #[test]
    fn dense_sphere_depth_and_conservation() {
        let cam = CameraPose::look_at_origin([0.0, 0.0, -2.0], 40.0).unwrap();
        let samples = 64;
        let field = SphereField { radius: 0.5, density: 200.0, albedo: [0.3, 0.6, 0.9] };
        let mut g = Graph::new();
        let opts = RenderOptions { res: 16, samples, normal_step: 0.05 };
        let v = render_view(&mut g, &field, &cam, &opts).unwrap().images(&g);
        let (near, far) = ray_bounds(2.0);
        let c = 8 * 16 + 8;
        assert!((v.depth[c] - 1.5).abs() < 2.0 * (far - near) / samples as f64);
        // the field normal of the sphere points back at the camera
        assert!(v.normal[3 * c + 2] < -0.9);

        let (t, delta) = sample_distances(&cam, samples);
        let spec = CompositeSpec { rays: 1, samples, t, delta, background: BACKGROUND };
        let dens: Vec<f64> = (0..samples).map(|i| if (10..30).contains(&i) { 3.0 } else { 0.1 }).collect();
        let (w, res) = composite_weights(&dens, &spec);
        assert!((w.iter().sum::<f64>() + res[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decoder_output_shape() {
        let cfg = DecoderConfig { res: 4, dim: 8, depth: 1, heads: 2 };
        let mut store = ParamStore::new();
        init_decoder(&mut store, &mut rng(1), &cfg);
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &store, |_| false);
        let toks: Vec<TokenGrid> = (0..3)
            .map(|i| TokenGrid {
                tokens: g.constant(normal(&mut rng(i as u64), [16, 8], 1.0)),
                view: i,
                kind: crate::encoders::TokenKind::Semantic,
            })
            .collect();
        let planes = decode_triplane(&mut g, &pv, &cfg, &toks).unwrap();
        assert_eq!(g.shape(planes), &[3, 4, 4, 8]);
    }
}
