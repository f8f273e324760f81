//! Evaluation on held-out objects over a fixed orbit of cameras, iteration
//! sweeps and compute-cost accounting.
//!
//! Metrics are averaged over the views of an object first and then over
//! objects. Normal maps are compared in camera space, encoded as `(n + 1) / 2`
//! on a white background.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::metrics::{encode_normals, Triple};
use crate::model::{self, infer_counted, Model, ReconstructionState};
use crate::scenekit::{evaluation_grid, render_ground_truth, CameraPose, ObjectViews, ViewRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub res: usize,
    pub radius: f64,
    pub fov_deg: f64,
    pub iterations: usize,
    pub max_iterations: usize,
    /// Number of objects at the end of the dataset kept out of training.
    pub holdout: usize,
    pub timing_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { res: 32, radius: 2.0, fov_deg: 40.0, iterations: 2, max_iterations: 3, holdout: 2, timing_runs: 5 }
    }
}

impl EvalConfig {
    pub fn cameras(&self) -> Result<Vec<CameraPose>> {
        evaluation_grid(self.radius, self.fov_deg)
    }

    pub fn grid_description(&self) -> String {
        format!(
            "elevations -20,-10,0,10,20 deg x azimuths 0..300 step 60 deg, radius {}, fov {} deg, {}x{}",
            self.radius, self.fov_deg, self.res, self.res
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub id: String,
    pub iterations: usize,
    pub rgb: Triple,
    pub normal: Triple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub iterations: usize,
    pub objects: usize,
    pub views: String,
    pub averaging: String,
    pub rgb: Triple,
    pub normal: Triple,
    pub per_object: Vec<ObjectMetrics>,
}

impl MetricsReport {
    fn from_objects(method: &str, iterations: usize, views: String, per_object: Vec<ObjectMetrics>) -> Self {
        let rgb: Vec<Triple> = per_object.iter().map(|o| o.rgb).collect();
        let normal: Vec<Triple> = per_object.iter().map(|o| o.normal).collect();
        Self {
            method: method.into(),
            iterations,
            objects: per_object.len(),
            views,
            averaging: "mean over views per object, then mean over objects; normals in camera space".into(),
            rgb: Triple::mean(&rgb),
            normal: Triple::mean(&normal),
            per_object,
        }
    }
}

/// Ground-truth views of one object on the evaluation orbit.
pub fn ground_truth_views(obj: &ObjectViews, cfg: &EvalConfig) -> Result<Vec<ViewRecord>> {
    cfg.cameras()?.iter().map(|c| render_ground_truth(&obj.scene, c, cfg.res)).collect()
}

/// Metrics of one reconstruction against ground-truth views.
pub fn score_state(model: &Model, state: &ReconstructionState, gts: &[ViewRecord]) -> Result<(Triple, Triple)> {
    let mut rgb = Vec::with_capacity(gts.len());
    let mut nrm = Vec::with_capacity(gts.len());
    for gt in gts {
        let img = model::render_planes(model, &state.planes, &gt.camera, gt.res)?;
        rgb.push(Triple::measure(&img.rgb, &gt.rgb, gt.res)?);
        let pn = encode_normals(&img.normal, &img.mask());
        let gn = encode_normals(&gt.normal, &gt.mask);
        nrm.push(Triple::measure(&pn, &gn, gt.res)?);
    }
    Ok((Triple::mean(&rgb), Triple::mean(&nrm)))
}

/// Fails if any evaluation object was seen in training.
pub fn check_disjoint(train_scenes: &[String], objects: &[ObjectViews]) -> Result<()> {
    let seen: HashSet<&str> = train_scenes.iter().map(String::as_str).collect();
    if let Some(o) = objects.iter().find(|o| seen.contains(o.scene.content_hash().as_str())) {
        return Err(Error::Dataset(format!("evaluation object {} was used for training", o.id)));
    }
    Ok(())
}

/// One report per iteration count `1..=max_iterations`, sharing reconstructions.
pub fn evaluate_iterations(
    model: &Model,
    method: &str,
    objects: &[ObjectViews],
    train_scenes: &[String],
    cfg: &EvalConfig,
    max_iterations: usize,
) -> Result<Vec<MetricsReport>> {
    check_disjoint(train_scenes, objects)?;
    if max_iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let mut per_iter: Vec<Vec<ObjectMetrics>> = vec![Vec::new(); max_iterations];
    for obj in objects {
        let gts = ground_truth_views(obj, cfg)?;
        let (states, _) = infer_counted(model, &obj.cond, max_iterations)?;
        for (k, state) in states.iter().enumerate() {
            let (rgb, normal) = score_state(model, state, &gts)?;
            per_iter[k].push(ObjectMetrics { id: obj.id.clone(), iterations: k + 1, rgb, normal });
        }
    }
    Ok(per_iter
        .into_iter()
        .enumerate()
        .map(|(k, objs)| MetricsReport::from_objects(method, k + 1, cfg.grid_description(), objs))
        .collect())
}

pub fn eval_model(
    model: &Model,
    method: &str,
    objects: &[ObjectViews],
    train_scenes: &[String],
    cfg: &EvalConfig,
    iterations: usize,
) -> Result<MetricsReport> {
    let mut all = evaluate_iterations(model, method, objects, train_scenes, cfg, iterations)?;
    Ok(all.pop().expect("at least one iteration"))
}

pub const CSV_HEADER: &str = "object_id,iterations,domain,psnr,ssim,perceptual";

/// Per-object rows in the metrics CSV schema.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        for o in &r.per_object {
            for (domain, t) in [("rgb", o.rgb), ("normal", o.normal)] {
                let _ = writeln!(s, "{},{},{domain},{:.6},{:.6},{:.6}", o.id, o.iterations, t.psnr, t.ssim, t.perceptual);
            }
        }
    }
    s
}

pub const SWEEP_HEADER: &str = "iterations,rgb_psnr,rgb_ssim,rgb_perceptual,normal_psnr,normal_ssim,normal_perceptual";

/// One summary row per iteration count.
pub fn sweep_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.iterations, r.rgb.psnr, r.rgb.ssim, r.rgb.perceptual, r.normal.psnr, r.normal.ssim, r.normal.perceptual
        );
    }
    s
}

/// Fixed-width table: method, iterations, then the RGB triple and the normal triple.
pub fn summary_table(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<16} {:>4} | {:>8} {:>7} {:>8} | {:>8} {:>7} {:>8}",
        "method", "iter", "RGB PSNR", "SSIM", "percept", "Nrm PSNR", "SSIM", "percept"
    );
    let _ = writeln!(s, "{}", "-".repeat(80));
    for r in reports {
        let _ = writeln!(
            s,
            "{:<16} {:>4} | {:>8.3} {:>7.4} {:>8.4} | {:>8.3} {:>7.4} {:>8.4}",
            r.method, r.iterations, r.rgb.psnr, r.rgb.ssim, r.rgb.perceptual, r.normal.psnr, r.normal.ssim, r.normal.perceptual
        );
    }
    s
}

/// Line plot of RGB (red) and normal (blue) PSNR over iterations.
pub fn sweep_plot(reports: &[MetricsReport]) -> RgbImage {
    let (w, h, m) = (320usize, 200usize, 24usize);
    let mut img = RgbImage::new(w, h, [255, 255, 255]);
    let values: Vec<f64> = reports.iter().flat_map(|r| [r.rgb.psnr, r.normal.psnr]).collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).floor() - 0.5;
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil() + 0.5;
    let n = reports.len().max(2);
    let px = |i: usize| m + i * (w - 2 * m) / (n - 1);
    let py = |v: f64| {
        let f = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        (h - m) - (f * (h - 2 * m) as f64).round() as usize
    };
    for x in m..w - m {
        img.put(x, h - m, [0, 0, 0]);
    }
    for y in m..=h - m {
        img.put(m, y, [0, 0, 0]);
    }
    for (series, color) in [(0usize, [200u8, 30, 30]), (1, [30, 60, 200])] {
        let pts: Vec<(usize, usize)> = reports
            .iter()
            .enumerate()
            .map(|(i, r)| (px(i), py(if series == 0 { r.rgb.psnr } else { r.normal.psnr })))
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &pts {
            for dy in 0..3 {
                for dx in 0..3 {
                    img.put((x + dx).saturating_sub(1), (y + dy).saturating_sub(1), color);
                }
            }
        }
    }
    img.label(m, 6, &format!("PSNR {lo:.1}-{hi:.1} DB"), 1, [0, 0, 0]);
    img.label(w - m - 60, 6, "RGB", 1, [200, 30, 30]);
    img.label(w - m - 30, 6, "NRM", 1, [30, 60, 200]);
    for (i, r) in reports.iter().enumerate() {
        img.label(px(i).saturating_sub(2), h - m + 6, &r.iterations.to_string(), 1, [0, 0, 0]);
    }
    img
}

fn draw_line(img: &mut RgbImage, a: (usize, usize), b: (usize, usize), color: [u8; 3]) {
    let steps = (a.0.abs_diff(b.0)).max(a.1.abs_diff(b.1)).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 as f64 + t * (b.0 as f64 - a.0 as f64);
        let y = a.1 as f64 + t * (b.1 as f64 - a.1 as f64);
        img.put(x.round() as usize, y.round() as usize, color);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageFlops {
    pub encoder: u64,
    pub fuser: u64,
    pub decoder: u64,
    pub renderer: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.encoder + self.fuser + self.decoder + self.renderer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub iterations: usize,
    pub analytic: StageFlops,
    pub instrumented: u64,
    pub seconds_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn ratio(&self, a: usize, b: usize) -> Option<f64> {
        let get = |k: usize| self.entries.iter().find(|e| e.iterations == k).map(|e| e.analytic.total() as f64);
        Some(get(a)? / get(b)?)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9}",
            "iter", "encoder", "fuser", "decoder", "renderer", "analytic", "counted", "seconds"
        );
        for e in &self.entries {
            let a = &e.analytic;
            let _ = writeln!(
                s,
                "{:>4} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9.4}",
                e.iterations,
                a.encoder,
                a.fuser,
                a.decoder,
                a.renderer,
                a.total(),
                e.instrumented,
                e.seconds_median
            );
        }
        s
    }
}

/// `2·rows·fan_in·fan_out` for one linear map application.
pub fn linear_flops(rows: usize, fan_in: usize, fan_out: usize) -> u64 {
    2 * (rows * fan_in * fan_out) as u64
}

fn attention_flops(q: usize, kv: usize, d: usize) -> u64 {
    linear_flops(q, d, d) * 2 + linear_flops(kv, d, d) * 2 + 4 * (q * kv * d) as u64
}

/// Analytic operation counts from layer shapes.
pub fn encoder_flops(model: &Model, channels: usize) -> u64 {
    let c = &model.config;
    let n = (c.image_res / c.patch).pow(2);
    let d = c.dim;
    let block = linear_flops(1, crate::scenekit::COND_DIM, 6 * d)
        + attention_flops(n, n, d)
        + linear_flops(n, d, 4 * d)
        + linear_flops(n, 4 * d, d);
    linear_flops(n, c.patch * c.patch * channels, d) + c.encoder_depth as u64 * block
}

pub fn decoder_flops(model: &Model, context_tokens: usize) -> u64 {
    let c = &model.config;
    let q = 3 * c.plane_res * c.plane_res;
    let d = c.dim;
    let block = attention_flops(q, context_tokens, d)
        + attention_flops(q, q, d)
        + linear_flops(q, d, 4 * d)
        + linear_flops(q, 4 * d, d);
    c.decoder_depth as u64 * block
}

pub fn fuser_flops(model: &Model, views: usize) -> u64 {
    let c = &model.config;
    let n = (c.image_res / c.patch).pow(2);
    match model.fusion().ok().flatten() {
        Some(f) if f.mode() == crate::geofuser::FusionMode::Residual => {
            views as u64 * (linear_flops(n, 2 * c.dim, f.hidden()) + linear_flops(n, f.hidden(), c.dim))
        }
        _ => 0,
    }
}

/// Field queries for one rendered view with `covered` rays getting normals.
pub fn render_flops(model: &Model, res: usize, covered: usize) -> u64 {
    let c = &model.config;
    let d = c.dim;
    let rays = res * res;
    let points = (rays * c.samples + 6 * covered) as u64;
    let per_point = 24 * d as u64 + linear_flops(1, d, d) * 2 + linear_flops(1, d, 4);
    points * per_point + 12 * (rays * c.samples) as u64 + 30 * covered as u64
}

/// Analytic and counted cost of reconstructing `obj` with each iteration count.
pub fn cost_report(model: &Model, cond: &[ViewRecord], iterations: &[usize], timing_runs: usize) -> Result<CostReport> {
    let c = &model.config;
    let views = cond.len();
    let n = (c.image_res / c.patch).pow(2);
    let mut entries = Vec::with_capacity(iterations.len());
    for &k in iterations {
        let (states, counted) = infer_counted(model, cond, k)?;
        let mut a = StageFlops {
            encoder: views as u64 * encoder_flops(model, 3),
            decoder: decoder_flops(model, views * n),
            ..Default::default()
        };
        for state in &states[1..] {
            let maps = state.geometry.as_ref().expect("refined states carry geometry");
            let tokens_per_view = if model.fusion()?.map(|f| f.mode()) == Some(crate::geofuser::FusionMode::TokenConcat) {
                2 * n
            } else {
                n
            };
            a.encoder += views as u64 * encoder_flops(model, 4);
            a.fuser += fuser_flops(model, views);
            a.decoder += decoder_flops(model, views * tokens_per_view);
            for m in maps {
                let covered = m.depth.iter().filter(|&&d| d > 0.0).count();
                a.renderer += render_flops(model, m.res, covered);
            }
        }
        let mut times = Vec::with_capacity(timing_runs.max(1));
        for _ in 0..timing_runs.max(1) {
            let t = Instant::now();
            model::infer(model, cond, k)?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(|x, y| x.total_cmp(y));
        entries.push(CostEntry {
            iterations: k,
            analytic: a,
            instrumented: counted.iter().sum(),
            seconds_median: times[times.len() / 2],
        });
    }
    Ok(CostReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_flop_formula() {
        assert_eq!(linear_flops(16, 64, 64), 2 * 16 * 64 * 64);
    }

    #[test]
    fn csv_layout() {
        let t = Triple { psnr: 20.0, ssim: 0.5, perceptual: 0.1 };
        let r = MetricsReport::from_objects(
            "m",
            1,
            String::new(),
            vec![ObjectMetrics { id: "obj_0001".into(), iterations: 1, rgb: t, normal: t }],
        );
        let csv = metrics_csv(std::slice::from_ref(&r));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("obj_0001,1,rgb,20.000000"));
        let sweep = sweep_csv(&[r.clone(), MetricsReport { iterations: 2, ..r }]);
        assert_eq!(sweep.lines().count(), 3);
        assert_eq!(sweep.lines().nth(1).unwrap().split(',').count(), 7);
    }
}
