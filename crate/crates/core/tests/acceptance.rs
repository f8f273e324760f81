//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if a hard criterion fails. The ablation ordering is
//! reported but never fails the run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use georefine::autograd::Graph;
use georefine::checkpoint::{Checkpoint, Stage};
use georefine::encoders::{encode_geometry, encode_semantic, GeometryInput};
use georefine::eval::{cost_report, evaluate_iterations, summary_table, EvalConfig, MetricsReport};
use georefine::experiment::{ablation_table, scene_hashes, split_holdout, ABLATION_ROWS};
use georefine::metrics::{decode_normals, encode_normals, perceptual_distance, psnr, ssim};
use georefine::model::{infer, is_backbone, render_planes, Ablation, Model, ModelConfig};
use georefine::params::ParamVars;
use georefine::scenekit::{build_dataset, CameraPose, Dataset, DatasetConfig, ObjectViews};
use georefine::selftest;
use georefine::tensor::Tensor;
use georefine::train::{train_baseline, train_refiner, TrainConfig};
use georefine::triplane::{render_view, Field, RenderOptions};

const DESK_OBJECTS: usize = 80;
const DESK_HELD_OUT: usize = 16;
const DESK_BASE_STEPS: usize = 2000;
const DESK_REFINE_STEPS: usize = 1000;
const DESK_BASE_LR: f64 = 3e-3;
const ABLATION_STEPS: usize = 100;
const ABLATION_OBJECTS: usize = 8;
const FROZEN_STEPS: usize = 200;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    hard: bool,
    detail: String,
    seconds: f64,
}

struct Run {
    outcomes: Vec<Outcome>,
}

impl Run {
    fn record(&mut self, id: usize, name: &'static str, hard: bool, start: Instant, result: Result<(bool, String), String>) {
        let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        let o = Outcome { id, name, passed, hard, detail, seconds: start.elapsed().as_secs_f64() };
        let tag = match (o.passed, o.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (soft)",
        };
        println!("[{tag}] {:>2} {:<28} {} ({:.1}s)", o.id, o.name, o.detail, o.seconds);
        self.outcomes.push(o);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// Metrics against closed forms computed here.
fn metric_suite() -> Result<(bool, String), String> {
    let res = 32;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..res * res * 3).map(|_| r.gen_range(0.0..0.9)).collect();
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    let noisy: Vec<f64> = a.iter().map(|v| v + r.gen_range(-0.05..0.05)).collect();
    // mse = 0.01 so psnr = 10 log10(1 / 0.01) = 20
    let p = psnr(&a, &shifted).map_err(err)?;
    let self_ssim = ssim(&a, &a, res, 3).map_err(err)?;
    let d_self = perceptual_distance(&a, &a, res, 3).map_err(err)?;
    let d_ab = perceptual_distance(&a, &noisy, res, 3).map_err(err)?;
    let d_ba = perceptual_distance(&noisy, &a, res, 3).map_err(err)?;

    let mut worst_rt = 0.0f64;
    for _ in 0..200 {
        let v = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0f64)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
        let n: Vec<f64> = v.iter().map(|c| c / len).collect();
        let enc = encode_normals(&n, &[1.0]);
        let stored: Vec<f64> = enc.iter().map(|c| (c * 255.0).round() / 255.0).collect();
        let back = decode_normals(&stored);
        worst_rt = n.iter().zip(&back).map(|(x, y)| (x - y).abs()).fold(worst_rt, f64::max);
    }
    let passed = (p - 20.0).abs() < 1e-6
        && (self_ssim - 1.0).abs() < 1e-12
        && d_self == 0.0
        && d_ab > 0.0
        && d_ab == d_ba
        && worst_rt <= 1.0 / 255.0;
    Ok((
        passed,
        format!("psnr(+0.1) {p:.6} dB, ssim(x,x) {self_ssim}, perceptual 0/{d_ab:.4}=={d_ba:.4}, normal round trip {worst_rt:.2e}"),
    ))
}

/// Step-density sphere at the origin with its own intersection test.
struct Ball {
    radius: f64,
    density: f64,
}

impl Ball {
    fn inside(&self, p: &[f64]) -> bool {
        p[0] * p[0] + p[1] * p[1] + p[2] * p[2] < self.radius * self.radius
    }

    fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let b = o[0] * d[0] + o[1] * d[1] + o[2] * d[2];
        let c = o[0] * o[0] + o[1] * o[1] + o[2] * o[2] - self.radius * self.radius;
        let disc = b * b - c;
        (disc >= 0.0).then(|| -b - disc.sqrt())
    }
}

impl Field for Ball {
    fn query(&self, g: &mut Graph, points: georefine::autograd::Var) -> (georefine::autograd::Var, georefine::autograd::Var) {
        let p = g.value(points).clone();
        let n = p.rows();
        let d: Vec<f64> = p.data().chunks(3).map(|q| if self.inside(q) { self.density } else { 0.0 }).collect();
        (g.constant(Tensor::new([n, 1], d)), g.constant(Tensor::full([n, 3], 0.5)))
    }
}

fn renderer_oracle() -> Result<(bool, String), String> {
    let res = 24;
    let samples = 64;
    let mut worst_depth = 0.0f64;
    let mut worst_mass = 0.0f64;
    let mut bound = f64::INFINITY;
    for (k, (az, el, dist)) in [(0.0, 0.0, 2.0), (75.0, 20.0, 2.2), (210.0, -30.0, 1.8)].into_iter().enumerate() {
        let ball = Ball { radius: 0.4 + 0.1 * k as f64, density: 300.0 };
        let cam = CameraPose::orbit(az, el, dist, 40.0).map_err(err)?;
        let mut g = Graph::new();
        let view = render_view(&mut g, &ball, &cam, &RenderOptions { res, samples, normal_step: 0.05 }).map_err(err)?;
        let img = view.images(&g);
        // ray interval through the [-1, 1]³ cube
        let half_diag = 3f64.sqrt();
        let (near, far) = ((dist - half_diag).max(0.0), dist + half_diag);
        let delta = (far - near) / samples as f64;
        bound = bound.min(2.0 * (far - near) / samples as f64);
        for i in 0..res * res {
            let dir = cam.ray_dir(i / res, i % res, res);
            let mut optical = 0.0;
            for s in 0..samples {
                let t = near + (s as f64 + 0.5) * delta;
                let p = [0, 1, 2].map(|a| cam.position[a] + t * dir[a]);
                if ball.inside(&p) {
                    optical += ball.density * delta;
                }
            }
            let residual = (-optical).exp();
            worst_mass = worst_mass.max((img.acc[i] + residual - 1.0).abs());
            if let Some(t) = ball.hit(cam.position, dir) {
                if img.acc[i] > 0.5 {
                    worst_depth = worst_depth.max((img.depth[i] - t).abs());
                }
            } else if img.acc[i] > 1e-9 {
                return Err(format!("ray {i} misses the sphere but accumulated {}", img.acc[i]));
            }
        }
    }
    Ok((
        worst_depth <= bound && worst_mass < 1e-5,
        format!("depth error {worst_depth:.4} (bound {bound:.4}), weights + transmittance error {worst_mass:.1e}"),
    ))
}

fn gradient_suite() -> Result<(bool, String), String> {
    let checks = [
        ("fuser", selftest::grad_fuser()),
        ("adaln", selftest::grad_adaln()),
        ("triplane", selftest::grad_triplane()),
        ("field-mlp", selftest::grad_field_mlp()),
        ("end-to-end", selftest::grad_end_to_end()),
    ];
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, c) in checks {
        let c = c.map_err(err)?;
        let nonzero = c.analytic.iter().any(|v| v.abs() > 1e-8);
        passed &= c.rel_err < 1e-4 && nonzero;
        parts.push(format!("{name} {:.1e}", c.rel_err));
    }
    Ok((passed, parts.join(", ")))
}

/// Geometry encoder after copy-initialization against the semantic encoder on
/// the same normal map read as colour, on a backbone with perturbed weights.
fn copy_init(cases: usize) -> Result<(bool, String), String> {
    let cfg = ModelConfig::default();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut identical = 0;
    for case in 0..cases {
        let mut model = Model::new(cfg.clone(), case as u64).map_err(err)?;
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("sem.") {
                t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
            }
        }
        model.attach_refiner(Ablation::None, case as u64).map_err(err)?;
        let n = cfg.image_res * cfg.image_res;
        let normals: Vec<f64> = (0..3 * n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let depth: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..3.5)).collect();
        let cam = CameraPose::orbit(r.gen_range(0.0..360.0), r.gen_range(-40.0..40.0), r.gen_range(1.6..2.4), 40.0).map_err(err)?;
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &model.params, |_| false);
        let sem = encode_semantic(&mut g, &pv, &cfg.semantic(), &normals, &cam, 0).map_err(err)?;
        let dv = g.constant(Tensor::new([n, 1], depth));
        let nv = g.constant(Tensor::new([n, 3], normals));
        let geo = encode_geometry(&mut g, &pv, &cfg.geometric(), dv, nv, &cam, cfg.depth_divisor, GeometryInput::Both, 0)
            .map_err(err)?;
        let a = g.value(sem.tokens).data();
        let b = g.value(geo.tokens).data();
        if a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
            identical += 1;
        }
    }
    Ok((identical == cases, format!("{identical} of {cases} cases bitwise identical")))
}

fn cost(model: &Model, obj: &ObjectViews) -> Result<(bool, String), String> {
    let report = cost_report(model, &obj.cond, &[1, 2], 3).map_err(err)?;
    let ratio = report.ratio(2, 1).ok_or("missing entries")?;
    let mut worst = 0.0f64;
    for e in &report.entries {
        let a = e.analytic.total() as f64;
        worst = worst.max((a - e.instrumented as f64).abs() / e.instrumented as f64);
    }
    let reference = 8.687 / 3.878;
    Ok((
        ratio > 1.8 && worst < 0.10,
        format!("analytic ratio {ratio:.2} (reference {reference:.2}), analytic vs counted within {:.1}%", 100.0 * worst),
    ))
}

/// Backbone digest computed here from raw parameter bytes.
fn backbone_digest(model: &Model) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.iter().filter(|(n, _)| is_backbone(n)) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn frozen_backbone(base: &Model, train: &[ObjectViews]) -> Result<(bool, String), String> {
    let mut model = base.clone();
    model.attach_refiner(Ablation::None, 5).map_err(err)?;
    let before = (backbone_digest(&model), model.backbone_hash());
    let refiner_before: Vec<Tensor> = model.params.iter().filter(|(n, _)| !is_backbone(n)).map(|(_, t)| t.clone()).collect();
    let cfg = TrainConfig { refine_steps: FROZEN_STEPS, ..Default::default() };
    train_refiner(&mut model, train, &cfg, |_| {}).map_err(err)?;
    let after = (backbone_digest(&model), model.backbone_hash());
    let refiner_after: Vec<Tensor> = model.params.iter().filter(|(n, _)| !is_backbone(n)).map(|(_, t)| t.clone()).collect();
    let moved = refiner_before != refiner_after;
    Ok((before == after && moved, format!("backbone {} after {FROZEN_STEPS} steps, refiner moved: {moved}", &after.0[..16])))
}

fn pipeline_identity(base: &Model, held: &[ObjectViews]) -> Result<(bool, String), String> {
    let mut model = base.clone();
    model.attach_refiner(Ablation::None, 11).map_err(err)?;
    let eval = EvalConfig::default();
    let cams = eval.cameras().map_err(err)?;
    let mut worst = 0.0f64;
    for obj in held {
        let states = infer(&model, &obj.cond, 2).map_err(err)?;
        for cam in cams.iter().step_by(5) {
            let a = render_planes(&model, &states[0].planes, cam, eval.res).map_err(err)?;
            let b = render_planes(&model, &states[1].planes, cam, eval.res).map_err(err)?;
            for (x, y) in a.rgb.iter().chain(&a.normal).chain(&a.depth).zip(b.rgb.iter().chain(&b.normal).chain(&b.depth)) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok((worst <= 1e-6, format!("max pixel difference {worst:.2e} over {} objects", held.len())))
}

fn normal_psnr(r: &MetricsReport) -> f64 {
    r.normal.psnr
}

fn main() {
    let mut run = Run { outcomes: Vec::new() };
    println!("acceptance run");

    let t = Instant::now();
    run.record(10, "metric unit suite", true, t, metric_suite());
    let t = Instant::now();
    run.record(4, "renderer oracle", true, t, renderer_oracle());
    let t = Instant::now();
    run.record(3, "gradient suite", true, t, gradient_suite());
    let t = Instant::now();
    run.record(2, "copy-init equivalence", true, t, copy_init(100));

    let dir = tempfile::tempdir().expect("temp dir");
    let data = DatasetConfig { objects: DESK_OBJECTS, ..Default::default() };
    let t = Instant::now();
    let ds = build_dataset(&data, dir.path(), false).and_then(|_| Dataset::load(dir.path())).expect("desk dataset builds");
    let (train, held) = split_holdout(&ds.objects, DESK_HELD_OUT).expect("holdout fits");
    println!("     dataset: {} training and {} held-out objects ({:.1}s)", train.len(), held.len(), t.elapsed().as_secs_f64());

    let tc = TrainConfig { base_steps: DESK_BASE_STEPS, refine_steps: DESK_REFINE_STEPS, lr: DESK_BASE_LR, ..Default::default() };
    let mut base = Model::new(ModelConfig::default(), 0).expect("model builds");
    let t = Instant::now();
    train_baseline(&mut base, train, &tc, |s| {
        if s.step % 500 == 0 {
            println!("     baseline step {:>4} loss {:.4}", s.step, s.passes[0].total);
        }
    })
    .expect("baseline trains");
    println!("     baseline: {DESK_BASE_STEPS} steps ({:.1}s)", t.elapsed().as_secs_f64());
    // the refiner starts from the stored baseline, as it does on the command line
    let stored = Checkpoint::from_model(&base, Stage::Baseline, DESK_BASE_STEPS, &tc, "", "", scene_hashes(train));
    let base = Checkpoint::decode(&stored.encode().expect("checkpoint encodes")).expect("checkpoint decodes").model();

    let t = Instant::now();
    run.record(1, "zero-init pipeline identity", true, t, pipeline_identity(&base, &held[..10]));
    let t = Instant::now();
    run.record(5, "frozen backbone", true, t, frozen_backbone(&base, train));

    let mut refined = base.clone();
    refined.attach_refiner(Ablation::None, tc.seed).expect("refiner attaches");
    let t = Instant::now();
    let desk = train_refiner(&mut refined, train, &tc, |s| {
        if s.step % 250 == 0 {
            let totals: Vec<String> = s.passes.iter().map(|p| format!("{:.4}", p.total)).collect();
            println!("     refiner step {:>4} pass losses [{}]", s.step, totals.join(", "));
        }
    })
    .and_then(|_| evaluate_iterations(&refined, "proposed", held, &scene_hashes(train), &EvalConfig::default(), 3));
    match desk {
        Ok(reports) => {
            print!("{}", summary_table(&reports));
            let (n1, n2, n3) = (normal_psnr(&reports[0]), normal_psnr(&reports[1]), normal_psnr(&reports[2]));
            let normal_gain = n2 - n1;
            let rgb_gain = reports[1].rgb.psnr - reports[0].rgb.psnr;
            run.record(
                6,
                "desk-scale refinement",
                true,
                t,
                Ok((
                    normal_gain > 0.0 && normal_gain >= rgb_gain,
                    format!("normal PSNR +{normal_gain:.3} dB vs RGB {rgb_gain:+.3} dB from iteration 1 to 2"),
                )),
            );
            let late = n3 - n2;
            run.record(
                7,
                "iteration plateau",
                true,
                Instant::now(),
                Ok((late <= normal_gain, format!("normal PSNR gain 2->3 {late:+.3} dB vs 1->2 {normal_gain:+.3} dB"))),
            );
        }
        Err(e) => {
            run.record(6, "desk-scale refinement", true, t, Err(e.to_string()));
            run.record(7, "iteration plateau", true, t, Err("desk run failed".into()));
        }
    }

    let t = Instant::now();
    run.record(9, "cost accounting", true, t, cost(&refined, &held[0]));

    let t = Instant::now();
    let ab_cfg = TrainConfig { refine_steps: ABLATION_STEPS, ..tc.clone() };
    let ablation = ablation_table(&base, train, &held[..ABLATION_OBJECTS], &ABLATION_ROWS, &ab_cfg, &EvalConfig::default(), |_, _| {})
        .map_err(err)
        .map(|rows| {
            print!("{}", summary_table(&rows));
            let proposed = rows.last().expect("proposed row").normal.perceptual;
            let beaten: Vec<&str> = rows[1..rows.len() - 1]
                .iter()
                .filter(|r| r.normal.perceptual < proposed)
                .map(|r| r.method.as_str())
                .collect();
            let detail = if beaten.is_empty() {
                format!("proposed normal perceptual {proposed:.4} is lowest of the variants")
            } else {
                format!("proposed normal perceptual {proposed:.4} is above: {}", beaten.join(", "))
            };
            (beaten.is_empty(), detail)
        });
    run.record(8, "ablation ordering", false, t, ablation);

    run.outcomes.sort_by_key(|o| o.id);
    println!("summary");
    for o in &run.outcomes {
        println!("  {:>2} {:<28} {}", o.id, o.name, if o.passed { "pass" } else if o.hard { "FAIL" } else { "fail (reported)" });
    }
    if run.outcomes.iter().any(|o| o.hard && !o.passed) {
        std::process::exit(1);
    }
}
