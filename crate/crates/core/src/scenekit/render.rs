use crate::error::{Error, Result};
use crate::util::{self, Vec3};

use super::camera::CameraPose;
use super::scene::SceneSpec;

pub const SQRT3: f64 = 1.732_050_807_568_877_2;
pub const VALID_RESOLUTIONS: [usize; 4] = [16, 32, 64, 128];
const MAX_STEPS: usize = 256;
const HIT_EPS: f64 = 1e-4;
const MIN_STEP: f64 = 5e-3;
/// Rays passing this close to the surface count as foreground-adjacent.
const ADJACENT: f64 = 0.05;
const GRAD_STEP: f64 = 1e-4;
pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];

/// One posed view with exact geometry buffers. Images are row-major `res × res`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub res: usize,
    /// `res·res·3`, values in `[0,1]`, white background.
    pub rgb: Vec<f64>,
    /// Ray distance; 0 on background.
    pub depth: Vec<f64>,
    /// Camera-space unit normals; zero on background.
    pub normal: Vec<f64>,
    /// 0 or 1.
    pub mask: Vec<f64>,
    pub camera: CameraPose,
}

impl ViewRecord {
    pub fn pixels(&self) -> usize {
        self.res * self.res
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.5).count()
    }

    /// Checks the buffer conventions: unit normals and positive depth on the
    /// foreground, zero sentinels elsewhere, depth inside the bounding shell.
    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if self.rgb.len() != 3 * n || self.depth.len() != n || self.normal.len() != 3 * n || self.mask.len() != n {
            return Err(Error::Shape(format!("view buffers do not match res {}", self.res)));
        }
        let dist = self.camera.distance();
        for i in 0..n {
            let nrm = &self.normal[3 * i..3 * i + 3];
            let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
            let m = self.mask[i];
            if m == 1.0 {
                if (len - 1.0).abs() > 1e-4 {
                    return Err(Error::Dataset(format!("pixel {i}: foreground normal has length {len}")));
                }
                let d = self.depth[i];
                if !(d > 0.0 && d > dist - SQRT3 && d < dist + SQRT3) {
                    return Err(Error::Dataset(format!("pixel {i}: depth {d} outside shell around {dist}")));
                }
            } else if m == 0.0 {
                if self.depth[i] != 0.0 || len != 0.0 {
                    return Err(Error::Dataset(format!("pixel {i}: background carries geometry")));
                }
            } else {
                return Err(Error::Dataset(format!("pixel {i}: mask value {m} not binary")));
            }
            if self.rgb[3 * i..3 * i + 3].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("pixel {i}: rgb outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Every `factor`-th pixel along both axes. With the pixel-ray convention
    /// of [`CameraPose::ray_dir`] this is exactly the view rendered at `res / factor`.
    pub fn subsample(&self, res: usize) -> Result<ViewRecord> {
        if res == 0 || !self.res.is_multiple_of(res) {
            return Err(Error::InvalidArgument(format!("cannot subsample {} to {res}", self.res)));
        }
        let f = self.res / res;
        let mut out = ViewRecord {
            res,
            rgb: Vec::with_capacity(3 * res * res),
            depth: Vec::with_capacity(res * res),
            normal: Vec::with_capacity(3 * res * res),
            mask: Vec::with_capacity(res * res),
            camera: self.camera.clone(),
        };
        for row in 0..res {
            for col in 0..res {
                let i = (row * f) * self.res + col * f;
                out.rgb.extend_from_slice(&self.rgb[3 * i..3 * i + 3]);
                out.depth.push(self.depth[i]);
                out.normal.extend_from_slice(&self.normal[3 * i..3 * i + 3]);
                out.mask.push(self.mask[i]);
            }
        }
        Ok(out)
    }

    /// World-space surface point seen by pixel `i`, if it is foreground.
    pub fn surface_point(&self, i: usize) -> Option<Vec3> {
        if self.mask[i] < 0.5 {
            return None;
        }
        let d = self.camera.ray_dir(i / self.res, i % self.res, self.res);
        Some(util::add(self.camera.position, util::scale(d, self.depth[i])))
    }
}

fn sdf_normal(scene: &SceneSpec, p: Vec3) -> Vec3 {
    let h = GRAD_STEP;
    let e = |dx: f64, dy: f64, dz: f64| scene.sdf([p[0] + dx, p[1] + dy, p[2] + dz]);
    util::normalize([e(h, 0.0, 0.0) - e(-h, 0.0, 0.0), e(0.0, h, 0.0) - e(0.0, -h, 0.0), e(0.0, 0.0, h) - e(0.0, 0.0, -h)])
}

enum Trace {
    Hit(f64),
    /// Missed; carries the smallest distance seen along the ray.
    Miss(f64),
    Diverged,
}

/// Sphere tracing with a floor on the step length. A step that lands inside
/// the surface is resolved by bisection, so grazing rays along flat faces
/// still terminate within the step budget.
fn trace(scene: &SceneSpec, origin: Vec3, dir: Vec3, t_near: f64, t_far: f64) -> Trace {
    let at = |t: f64| scene.sdf(util::add(origin, util::scale(dir, t)));
    let mut t = t_near;
    let mut prev_t = t;
    let mut closest = f64::INFINITY;
    let mut steps = 0;
    while steps < MAX_STEPS {
        let d = at(t);
        steps += 1;
        closest = closest.min(d);
        if d < 0.0 && t > t_near {
            let (mut lo, mut hi) = (prev_t, t);
            while steps < MAX_STEPS {
                let mid = 0.5 * (lo + hi);
                let dm = at(mid);
                steps += 1;
                if dm.abs() < HIT_EPS {
                    return Trace::Hit(mid);
                }
                if dm > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Trace::Diverged;
        }
        if d < HIT_EPS {
            return Trace::Hit(t);
        }
        prev_t = t;
        t += d.max(MIN_STEP);
        if t > t_far {
            return Trace::Miss(closest);
        }
    }
    Trace::Diverged
}

/// Sphere-traced ground truth with headlight Lambertian shading.
///
/// Rays that exhaust the step budget are treated as background as long as
/// they stay under 0.1% of the foreground-adjacent rays (hits plus rays that
/// pass within 0.05 of the surface); beyond that the render fails.
pub fn render_ground_truth(scene: &SceneSpec, camera: &CameraPose, res: usize) -> Result<ViewRecord> {
    if !VALID_RESOLUTIONS.contains(&res) {
        return Err(Error::InvalidArgument(format!("resolution {res} not in {VALID_RESOLUTIONS:?}")));
    }
    let n = res * res;
    let mut view = ViewRecord {
        res,
        rgb: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        normal: vec![0.0; 3 * n],
        mask: vec![0.0; n],
        camera: camera.clone(),
    };
    let dist = camera.distance();
    let (t_near, t_far) = ((dist - SQRT3).max(0.0), dist + SQRT3);
    let mut diverged = Vec::new();
    let mut adjacent = 0;
    for row in 0..res {
        for col in 0..res {
            let i = row * res + col;
            let dir = camera.ray_dir(row, col, res);
            match trace(scene, camera.position, dir, t_near, t_far) {
                Trace::Hit(t) => {
                    adjacent += 1;
                    let p = util::add(camera.position, util::scale(dir, t));
                    let nw = sdf_normal(scene, p);
                    let albedo = scene.eval(p).1;
                    let shade = 0.2 + 0.8 * util::dot(nw, util::scale(dir, -1.0)).max(0.0);
                    let nc = camera.to_camera(nw);
                    for c in 0..3 {
                        view.rgb[3 * i + c] = (albedo[c] * shade).clamp(0.0, 1.0);
                        view.normal[3 * i + c] = nc[c];
                    }
                    view.depth[i] = t;
                    view.mask[i] = 1.0;
                }
                Trace::Miss(closest) => {
                    if closest < ADJACENT {
                        adjacent += 1;
                    }
                    view.rgb[3 * i..3 * i + 3].copy_from_slice(&BACKGROUND);
                }
                Trace::Diverged => {
                    adjacent += 1;
                    diverged.push((row, col));
                    view.rgb[3 * i..3 * i + 3].copy_from_slice(&BACKGROUND);
                }
            }
        }
    }
    if diverged.len() * 1000 > adjacent {
        return Err(Error::TraceDiverged {
            count: diverged.len(),
            total: adjacent,
            first: diverged.into_iter().take(8).collect(),
        });
    }
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenekit::scene::{make_scene, Primitive, SceneSpec, Shape};

    fn sphere() -> SceneSpec {
        SceneSpec::new(
            vec![Primitive { shape: Shape::Sphere { radius: 0.5 }, center: [0.0; 3], albedo: [0.8, 0.5, 0.2] }],
            0.0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn sphere_center_depth_and_normal() {
        let cam = CameraPose::look_at_origin([0.0, 0.0, -2.0], 40.0).unwrap();
        let v = render_ground_truth(&sphere(), &cam, 32).unwrap();
        let c = 16 * 32 + 16;
        // analytic: the optical axis meets the sphere at distance 2 - 0.5
        assert!((v.depth[c] - 1.5).abs() < 1e-3);
        let n = &v.normal[3 * c..3 * c + 3];
        assert!(n[0].abs() < 1e-3 && n[1].abs() < 1e-3 && (n[2] + 1.0).abs() < 1e-3);
        assert_eq!(v.mask[0], 0.0);
        assert_eq!(v.depth[0], 0.0);
        assert_eq!(&v.normal[0..3], &[0.0; 3]);
        v.validate().unwrap();
    }

    #[test]
    fn rejects_unsupported_resolution() {
        let cam = CameraPose::look_at_origin([0.0, 0.0, -2.0], 40.0).unwrap();
        assert!(render_ground_truth(&sphere(), &cam, 24).is_err());
    }

    #[test]
    fn random_scenes_satisfy_view_invariants() {
        for seed in 0..6 {
            let scene = make_scene(seed, 4).unwrap();
            let cam = crate::scenekit::camera::sample_camera(seed, 1.5, 2.2, 40.0).unwrap();
            render_ground_truth(&scene, &cam, 32).unwrap().validate().unwrap();
        }
    }
}
