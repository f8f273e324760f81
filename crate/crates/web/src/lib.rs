//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each exported function has a plain Rust counterpart so it can be tested natively.

use wasm_bindgen::prelude::*;

use georefine::mesh;
use georefine::metrics::{encode_normals, perceptual_distance, psnr, ssim};
use georefine::scenekit::{make_scene, render_ground_truth, CameraPose, ViewRecord};
use georefine::util::rng;

const MAX_PRIMITIVES: usize = 4;
const RADIUS: f64 = 2.0;
const FOV_DEG: f64 = 40.0;

fn view(seed: u64, azimuth: f64, elevation: f64, res: usize) -> georefine::error::Result<ViewRecord> {
    let scene = make_scene(seed, MAX_PRIMITIVES)?;
    let cam = CameraPose::orbit(azimuth, elevation, RADIUS, FOV_DEG)?;
    render_ground_truth(&scene, &cam, res)
}

fn to_rgba(rgb: &[f64], out: &mut Vec<u8>) {
    for px in rgb.chunks(3) {
        out.extend(px.iter().map(|&v| georefine::image::to_u8(v)));
        out.push(255);
    }
}

/// `res × 2res` RGBA: the shaded view on top, its normal map below.
pub fn render_pair(seed: u64, azimuth: f64, elevation: f64, res: usize) -> georefine::error::Result<Vec<u8>> {
    let v = view(seed, azimuth, elevation, res)?;
    let mut out = Vec::with_capacity(res * res * 8);
    to_rgba(&v.rgb, &mut out);
    to_rgba(&encode_normals(&v.normal, &v.mask), &mut out);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseScores {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

/// Scores a view against a copy with uniform noise of the given amplitude.
pub fn noise_scores(seed: u64, azimuth: f64, elevation: f64, res: usize, amplitude: f64) -> georefine::error::Result<NoiseScores> {
    use rand::Rng;
    let v = view(seed, azimuth, elevation, res)?;
    let mut r = rng(seed ^ 0x5eed);
    let noisy: Vec<f64> = v.rgb.iter().map(|&c| (c + amplitude * r.gen_range(-1.0..=1.0)).clamp(0.0, 1.0)).collect();
    Ok(NoiseScores {
        psnr: psnr(&v.rgb, &noisy)?,
        ssim: ssim(&v.rgb, &noisy, res, 3)?,
        perceptual: perceptual_distance(&v.rgb, &noisy, res, 3)?,
    })
}

/// Surface of the scene's signed distance field as OBJ text.
pub fn scene_mesh(seed: u64, grid: usize) -> georefine::error::Result<mesh::Mesh> {
    let scene = make_scene(seed, MAX_PRIMITIVES)?;
    // 1 - sdf is positive everywhere near the surface and crosses 1 on it
    mesh::extract(grid, 1.0, &|pts| pts.iter().map(|&p| 1.0 - scene.sdf(p)).collect())
}

fn js(e: georefine::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = renderPair)]
pub fn render_pair_js(seed: u32, azimuth: f64, elevation: f64, res: usize) -> Result<Vec<u8>, JsError> {
    render_pair(seed as u64, azimuth, elevation, res).map_err(js)
}

/// `[psnr, ssim, perceptual]`.
#[wasm_bindgen(js_name = noiseScores)]
pub fn noise_scores_js(seed: u32, azimuth: f64, elevation: f64, res: usize, amplitude: f64) -> Result<Vec<f64>, JsError> {
    let s = noise_scores(seed as u64, azimuth, elevation, res, amplitude).map_err(js)?;
    Ok(vec![s.psnr, s.ssim, s.perceptual])
}

#[wasm_bindgen(js_name = sceneMesh)]
pub fn scene_mesh_js(seed: u32, grid: usize) -> Result<String, JsError> {
    scene_mesh(seed as u64, grid).map(|m| m.to_obj()).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_layout() {
        let px = render_pair(3, 30.0, 10.0, 32).unwrap();
        assert_eq!(px.len(), 32 * 64 * 4);
        // top-left corner is background in both halves
        assert_eq!(&px[..4], &[255, 255, 255, 255]);
        assert_eq!(&px[32 * 32 * 4..32 * 32 * 4 + 4], &[255, 255, 255, 255]);
    }

    #[test]
    fn scores_degrade_with_noise() {
        let a = noise_scores(1, 0.0, 0.0, 32, 0.02).unwrap();
        let b = noise_scores(1, 0.0, 0.0, 32, 0.1).unwrap();
        assert!(a.psnr > b.psnr && a.ssim > b.ssim && a.perceptual < b.perceptual);
    }

    #[test]
    fn mesh_vertices_lie_on_the_surface() {
        let m = scene_mesh(2, 24).unwrap();
        assert!(!m.triangles.is_empty());
        let scene = make_scene(2, MAX_PRIMITIVES).unwrap();
        assert!(m.vertices.iter().all(|&v| scene.sdf(v).abs() < 1e-3));
    }
}
