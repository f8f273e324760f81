//! Quick invariant suite run by the `selftest` subcommand: pipeline identity,
//! copy-initialization, gradient checks, renderer and metric closed forms.

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, Stage};
use crate::encoders::{encode_geometry, encode_semantic, init_encoder, EncoderConfig, GeometryInput, SEMANTIC};
use crate::error::Result;
use crate::geofuser::{FusionMode, FusionNetwork};
use crate::gradcheck::{check, GradCheck};
use crate::kernels::composite_weights;
use crate::loss::view_loss;
use crate::metrics::{decode_normals, encode_normals, perceptual_distance, psnr, ssim};
use crate::model::{infer, render_planes, Ablation, Model, ModelConfig};
use crate::params::{ParamStore, ParamVars};
use crate::scenekit::{conditioning_rig, make_scene, render_ground_truth, CameraPose, ViewRecord, BACKGROUND};
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::triplane::{init_field, ray_bounds, render_view, sample_distances, RenderOptions, SphereField, TriplaneField};
use crate::util::{derive_seed, rng};
use crate::autograd::CompositeSpec;

use rand_distr::{Distribution, Normal, Uniform};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:<22} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn outcome(name: &'static str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: format!("error: {e}") },
    }
}

pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome("pipeline-identity", pipeline_identity(3, 7)),
        outcome("copy-init", copy_init_equivalence(20, 11)),
        outcome("grad-fuser", grad_fuser().map(grad_summary)),
        outcome("grad-adaln", grad_adaln().map(grad_summary)),
        outcome("grad-triplane", grad_triplane().map(grad_summary)),
        outcome("grad-field-mlp", grad_field_mlp().map(grad_summary)),
        outcome("grad-end-to-end", grad_end_to_end().map(grad_summary)),
        outcome("renderer-oracle", renderer_oracle()),
        outcome("metrics", metric_closed_forms()),
        outcome("checkpoint", checkpoint_round_trip()),
    ]
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn grad_summary(c: GradCheck) -> (bool, String) {
    (c.passes(GRAD_TOLERANCE), format!("relative error {:.2e} over {} entries", c.rel_err, c.analytic.len()))
}

/// Small model used by the quick checks.
pub fn tiny_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        dim: 16,
        heads: 2,
        encoder_depth: 1,
        plane_res: 4,
        fusion_hidden: 16,
        samples: 12,
        ..Default::default()
    };
    Model::new(cfg, seed)
}

/// Conditioning views of a procedural object built in memory.
pub fn object_views(seed: u64, cond_views: usize, res: usize) -> Result<Vec<ViewRecord>> {
    let scene = make_scene(seed, 3)?;
    conditioning_rig(cond_views, 2.0, 40.0)?.iter().map(|c| render_ground_truth(&scene, c, res)).collect()
}

/// Largest per-pixel difference between renders after one and two passes
/// with a freshly attached refiner.
pub fn pipeline_identity(objects: usize, seed: u64) -> Result<(bool, String)> {
    let mut model = tiny_model(seed)?;
    model.attach_refiner(Ablation::None, seed + 1)?;
    let cam = CameraPose::orbit(30.0, 10.0, 2.0, 40.0)?;
    let mut worst = 0.0f64;
    for k in 0..objects {
        let cond = object_views(derive_seed(seed, &[k as u64]), 2, model.config.image_res)?;
        let states = infer(&model, &cond, 2)?;
        let a = render_planes(&model, &states[0].planes, &cam, 16)?;
        let b = render_planes(&model, &states[1].planes, &cam, 16)?;
        for (x, y) in a.rgb.iter().chain(&a.depth).chain(&a.normal).zip(b.rgb.iter().chain(&b.depth).chain(&b.normal)) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst <= 1e-6, format!("max pixel difference {worst:.3e} over {objects} objects")))
}

/// Runs the copied geometry encoder on normal maps and the semantic encoder
/// on the same maps read as colour, and counts bitwise mismatches.
pub fn copy_init_equivalence(cases: usize, seed: u64) -> Result<(bool, String)> {
    let cfg = EncoderConfig { image_res: 16, patch: 8, channels: 3, dim: 16, depth: 2, heads: 2 };
    let mut r = rng(seed);
    let mut mismatched = 0;
    for case in 0..cases {
        let mut store = ParamStore::new();
        init_encoder(&mut store, &mut rng(derive_seed(seed, &[case as u64])), SEMANTIC, &cfg);
        // nonzero modulation so the camera path is exercised
        let normal_init = Normal::new(0.0, 0.1).unwrap();
        for (name, t) in store.iter_mut() {
            if name.contains(".ada.") {
                t.data_mut().iter_mut().for_each(|v| *v = normal_init.sample(&mut r));
            }
        }
        crate::encoders::init_geoformer_from_semantic(&mut store, &cfg)?;
        let n = cfg.image_res * cfg.image_res;
        let u = Uniform::new(-1.0, 1.0);
        let normals: Vec<f64> = (0..3 * n).map(|_| u.sample(&mut r)).collect();
        let depth: Vec<f64> = (0..n).map(|_| u.sample(&mut r) + 2.0).collect();
        let az = Uniform::new(0.0, 360.0).sample(&mut r);
        let cam = CameraPose::orbit(az, 15.0, 1.8, 40.0)?;

        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &store, |_| false);
        let sem = encode_semantic(&mut g, &pv, &cfg, &normals, &cam, 0)?;
        let dv = g.constant(Tensor::new([n, 1], depth));
        let nv = g.constant(Tensor::new([n, 3], normals));
        let geo_cfg = EncoderConfig { channels: 4, ..cfg.clone() };
        let geo = encode_geometry(&mut g, &pv, &geo_cfg, dv, nv, &cam, 3.0, GeometryInput::Both, 0)?;
        let same = g.value(sem.tokens).data().iter().zip(g.value(geo.tokens).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatched += 1;
        }
    }
    Ok((mismatched == 0, format!("{} of {cases} cases bitwise identical", cases - mismatched)))
}

fn randn(r: &mut crate::util::Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
    crate::params::normal(r, shape, std)
}

/// Gradient of a random projection of `f`'s output with respect to one of
/// the named tensors in `inputs`.
fn check_named<F>(inputs: Vec<(String, Tensor)>, target: &str, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamVars) -> Var,
{
    let which = inputs.iter().position(|(n, _)| n == target).expect("target is an input");
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor> = inputs.into_iter().map(|(_, t)| t).collect();
    check(&tensors, which, 1e-5, |g, vars| {
        let pv = ParamVars::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        f(g, &pv)
    })
}

fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = randn(&mut rng(seed), g.shape(x).to_vec(), 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w);
    g.sum(p)
}

fn store_inputs(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(n, t)| (n.clone(), t.clone())).collect()
}

pub fn grad_fuser() -> Result<GradCheck> {
    let (d, hidden, n) = (6, 8, 5);
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let net = FusionNetwork::new(&mut store, &mut r, FusionMode::Residual, d, hidden);
    // leave the zero initialization so the output layer carries signal
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    for k in names {
        let shape = store.get(&k).unwrap().shape().to_vec();
        store.insert(k, randn(&mut r, shape, 0.5));
    }
    let mut inputs = store_inputs(&store);
    inputs.push(("sem".into(), randn(&mut r, [n, d], 1.0)));
    inputs.push(("geo".into(), randn(&mut r, [n, d], 1.0)));
    let run = |target: &str| {
        check_named(inputs.clone(), target, |g, pv| {
            use crate::encoders::{TokenGrid, TokenKind};
            let sem = TokenGrid { tokens: pv.get("sem"), view: 0, kind: TokenKind::Semantic };
            let geo = TokenGrid { tokens: pv.get("geo"), view: 0, kind: TokenKind::Geometric };
            let out = net.fuse(g, pv, sem, geo).expect("shapes agree");
            project(g, out.tokens, 9)
        })
    };
    Ok(worst(["geo", "fuser.fc1.w", "fuser.fc2.w"].map(run)))
}

fn worst<const N: usize>(checks: [GradCheck; N]) -> GradCheck {
    checks.into_iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("non-empty")
}

pub fn grad_adaln() -> Result<GradCheck> {
    let d = 8;
    let cfg = EncoderConfig { image_res: 8, patch: 4, channels: 3, dim: d, depth: 1, heads: 2 };
    let mut store = ParamStore::new();
    let mut r = rng(5);
    init_encoder(&mut store, &mut r, SEMANTIC, &cfg);
    store.insert("sem.blocks.0.ada.w", randn(&mut r, [crate::scenekit::COND_DIM, 6 * d], 0.2));
    store.insert("sem.blocks.0.ada.b", randn(&mut r, [6 * d], 0.2));
    let mut inputs = store_inputs(&store);
    inputs.push(("x".into(), randn(&mut r, [4, d], 1.0)));
    inputs.push(("cond".into(), randn(&mut r, [1, crate::scenekit::COND_DIM], 1.0)));
    let run = |target: &str| {
        check_named(inputs.clone(), target, |g, pv| {
            let y = crate::encoders::adaln_block(g, pv, "sem.blocks.0", 2, pv.get("x"), Some(pv.get("cond")));
            project(g, y, 13)
        })
    };
    Ok(worst(["cond", "sem.blocks.0.ada.w", "x"].map(run)))
}

fn interior_points(r: &mut crate::util::Rng, n: usize) -> Tensor {
    // keep away from texel boundaries where bilinear lookup has kinks
    let u = Uniform::new(-0.9, 0.9);
    Tensor::new([n, 3], (0..3 * n).map(|_| u.sample(r)).collect())
}

pub fn grad_triplane() -> Result<GradCheck> {
    let mut r = rng(17);
    let inputs = vec![("planes".to_string(), randn(&mut r, [3, 4, 4, 3], 1.0)), ("points".to_string(), interior_points(&mut r, 6))];
    let run = |target: &str| {
        check_named(inputs.clone(), target, |g, pv| {
            let f = g.triplane_sample(pv.get("planes"), pv.get("points"));
            project(g, f, 19)
        })
    };
    Ok(worst(["planes", "points"].map(run)))
}

pub fn grad_field_mlp() -> Result<GradCheck> {
    let d = 6;
    let mut store = ParamStore::new();
    let mut r = rng(23);
    init_field(&mut store, &mut r, d);
    let mut inputs = store_inputs(&store);
    inputs.push(("features".into(), randn(&mut r, [5, d], 1.0)));
    let run = |target: &str| {
        check_named(inputs.clone(), target, |g, pv| {
            let (density, rgb) = crate::triplane::field_decode(g, pv, pv.get("features"));
            let a = project(g, density, 29);
            let b = project(g, rgb, 31);
            g.add(a, b)
        })
    };
    Ok(worst(["features", "field.fc1.w", "field.out.w"].map(run)))
}

/// Masked-pixel loss of a small render with respect to the triplane.
pub fn grad_end_to_end() -> Result<GradCheck> {
    let d = 4;
    let mut store = ParamStore::new();
    let mut r = rng(37);
    init_field(&mut store, &mut r, d);
    let scene = make_scene(41, 2)?;
    let cam = CameraPose::orbit(20.0, 15.0, 2.0, 40.0)?;
    let gt = render_ground_truth(&scene, &cam, 16)?.subsample(8)?;
    let mut inputs = store_inputs(&store);
    // a strong field so some rays are covered and the normal path is live
    inputs.push(("planes".into(), randn(&mut r, [3, 4, 4, d], 1.5)));
    let opts = RenderOptions { res: 8, samples: 8, normal_step: 0.25 };
    Ok(check_named(inputs, "planes", |g, pv| {
        let field = TriplaneField { planes: pv.get("planes"), params: pv };
        let view = render_view(g, &field, &cam, &opts).expect("valid options");
        let terms = view_loss(g, &view, &gt).expect("matching resolution").terms;
        // the normal term is left out: its probe points are placed at the
        // detached expected depth, which finite differences would move
        let a = g.add(terms[0], terms[1]);
        let b = g.add(terms[2], terms[3]);
        g.add(a, b)
    }))
}

pub fn renderer_oracle() -> Result<(bool, String)> {
    let samples = 64;
    let cam = CameraPose::orbit(0.0, 0.0, 2.0, 40.0)?;
    let field = SphereField { radius: 0.5, density: 400.0, albedo: [0.5; 3] };
    let res = 16;
    let mut g = Graph::new();
    let view = render_view(&mut g, &field, &cam, &RenderOptions { res, samples, normal_step: 0.05 })?;
    let img = view.images(&g);
    let (near, far) = ray_bounds(cam.distance());
    let bound = 2.0 * (far - near) / samples as f64;
    let mut worst_depth = 0.0f64;
    for i in 0..res * res {
        let dir = cam.ray_dir(i / res, i % res, res);
        if let Some(t) = ray_sphere(cam.position, dir, 0.5) {
            worst_depth = worst_depth.max((img.depth[i] - t).abs());
        }
    }
    let (t, delta) = sample_distances(&cam, samples);
    let spec = CompositeSpec { rays: 1, samples, t, delta, background: BACKGROUND };
    let mut r = rng(43);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let dens: Vec<f64> = (0..samples).map(|_| Uniform::new(0.0, 20.0).sample(&mut r)).collect();
        let (w, trans) = composite_weights(&dens, &spec);
        worst_sum = worst_sum.max((w.iter().sum::<f64>() + trans[0] - 1.0).abs());
    }
    Ok((
        worst_depth < bound && worst_sum < 1e-5,
        format!("depth error {worst_depth:.4} (bound {bound:.4}), mass error {worst_sum:.1e}"),
    ))
}

/// Distance to the first intersection with a centred sphere.
pub fn ray_sphere(o: [f64; 3], d: [f64; 3], radius: f64) -> Option<f64> {
    let b = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
    let c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - radius * radius;
    let disc = b * b - c;
    (disc >= 0.0).then(|| -b - disc.sqrt())
}

pub fn metric_closed_forms() -> Result<(bool, String)> {
    let res = 16;
    let mut r = rng(47);
    let u = Uniform::new(0.0, 0.9);
    let a: Vec<f64> = (0..res * res * 3).map(|_| u.sample(&mut r)).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    let p = psnr(&a, &b)?;
    let s = ssim(&a, &a, res, 3)?;
    let d0 = perceptual_distance(&a, &a, res, 3)?;
    let dab = perceptual_distance(&a, &b, res, 3)?;
    let dba = perceptual_distance(&b, &a, res, 3)?;
    let n: Vec<f64> = (0..res * res)
        .flat_map(|i| {
            let t = i as f64 * 0.37;
            
            [t.sin() * 0.6, t.cos() * 0.6, 0.529_150_262_212_918]
        })
        .collect();
    let mask = vec![1.0; res * res];
    let enc = encode_normals(&n, &mask);
    let quant: Vec<f64> = enc.iter().map(|v| (v * 255.0).round() / 255.0).collect();
    let back = decode_normals(&quant);
    let rt = n.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let passed = (p - 20.0).abs() < 1e-9 && s == 1.0 && d0 == 0.0 && dab == dba && rt <= 1.0 / 255.0;
    Ok((passed, format!("psnr {p:.6} dB, ssim {s}, perceptual {d0}/{dab:.4}, normal round trip {rt:.2e}")))
}

pub fn checkpoint_round_trip() -> Result<(bool, String)> {
    let mut model = tiny_model(53)?;
    model.attach_refiner(Ablation::None, 54)?;
    let ck = Checkpoint::from_model(&model, Stage::Refiner, 0, &TrainConfig::default(), "selftest", "none", vec![]);
    let back = Checkpoint::decode(&ck.encode()?)?;
    let ok = back.params == ck.params && back.header == ck.header;
    Ok((ok, format!("{} tensors", back.params.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all() {
            assert!(c.passed, "{c}");
        }
    }
}
