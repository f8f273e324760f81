use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Vec3};

pub const COND_DIM: usize = 20;
pub const DEFAULT_FOV_DEG: f64 = 40.0;
pub const RADIUS_LO: f64 = 1.5;
pub const RADIUS_HI: f64 = 2.2;

/// Pinhole camera looking at the origin.
///
/// Camera space follows the x-right, y-down, z-forward convention. Pixel
/// `(row, col)` of a `res × res` image shoots its ray through normalized
/// coordinates `((col - res/2) / (res/2), (row - res/2) / (res/2))`, so pixel
/// `(res/2, res/2)` looks straight down the optical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// World-to-camera rotation, rows are the camera axes in world space.
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
    pub fov_deg: f64,
}

impl CameraPose {
    pub fn look_at_origin(position: Vec3, fov_deg: f64) -> Result<Self> {
        let dist = util::norm(position);
        if !(dist > 0.0) || !dist.is_finite() {
            return Err(Error::InvalidArgument("camera position must be finite and non-zero".into()));
        }
        let forward = util::scale(position, -1.0 / dist);
        let mut up = [0.0, 0.0, 1.0];
        if util::norm(util::cross(forward, up)) < 1e-3 {
            up = [1.0, 0.0, 0.0];
        }
        let right = util::normalize(util::cross(forward, up));
        let down = util::cross(forward, right);
        Ok(Self { rotation: [right, down, forward], position, fov_deg })
    }

    /// Camera on an orbit: azimuth measured from +x towards +y, elevation above the xy plane.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_deg: f64) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let pos = [radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin()];
        Self::look_at_origin(pos, fov_deg)
    }

    pub fn distance(&self) -> f64 {
        util::norm(self.position)
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }

    pub fn tan_half_fov(&self) -> f64 {
        (self.fov_deg.to_radians() * 0.5).tan()
    }

    /// Unit ray direction in world space for pixel `(row, col)`.
    ///
    /// The principal ray passes through pixel `(res/2, res/2)`, so pixel `f·k`
    /// at resolution `res` casts the same ray as pixel `k` at `res / f`.
    pub fn ray_dir(&self, row: usize, col: usize, res: usize) -> Vec3 {
        let half = res as f64 * 0.5;
        let th = self.tan_half_fov();
        let u = (col as f64 - half) / half * th;
        let v = (row as f64 - half) / half * th;
        let cam = util::normalize([u, v, 1.0]);
        util::mat_t_vec(&self.rotation, cam)
    }

    pub fn to_camera(&self, v: Vec3) -> Vec3 {
        util::mat_vec(&self.rotation, v)
    }

    /// `[R | -R·c]` row-major (12), normalized intrinsics `fx, fy, cx, cy` (4), four zeros.
    pub fn conditioning(&self) -> [f64; COND_DIM] {
        let t = util::scale(util::mat_vec(&self.rotation, self.position), -1.0);
        let f = 0.5 / self.tan_half_fov();
        let mut c = [0.0; COND_DIM];
        for r in 0..3 {
            c[r * 4..r * 4 + 3].copy_from_slice(&self.rotation[r]);
            c[r * 4 + 3] = t[r];
        }
        c[12] = f;
        c[13] = f;
        c[14] = 0.5;
        c[15] = 0.5;
        c
    }

    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let e = util::dot(r[i], r[j]) - if i == j { 1.0 } else { 0.0 };
                worst = worst.max(e.abs());
            }
        }
        worst
    }
}

/// Camera with uniformly random viewing direction and radius `U(radius_lo, radius_hi)`.
pub fn sample_camera(seed: u64, radius_lo: f64, radius_hi: f64, fov_deg: f64) -> Result<CameraPose> {
    if !(radius_lo > 0.0 && radius_lo <= radius_hi) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < radius_lo <= radius_hi, got {radius_lo}, {radius_hi}"
        )));
    }
    if !(10.0..=90.0).contains(&fov_deg) {
        return Err(Error::InvalidArgument(format!("fov {fov_deg} outside [10, 90] degrees")));
    }
    let mut rng = util::rng(util::derive_seed(seed, &[0xca3e7a]));
    let dir = loop {
        let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = util::norm(v);
        if n > 1e-9 {
            break util::scale(v, 1.0 / n);
        }
    };
    let radius = if radius_hi > radius_lo { rng.gen_range(radius_lo..=radius_hi) } else { radius_lo };
    CameraPose::look_at_origin(util::scale(dir, radius), fov_deg)
}

/// Fixed conditioning rig: evenly spaced azimuths starting at 30°, elevations alternating +20° / −10°.
pub fn conditioning_rig(count: usize, radius: f64, fov_deg: f64) -> Result<Vec<CameraPose>> {
    (0..count)
        .map(|k| {
            let az = 30.0 + 360.0 * k as f64 / count as f64;
            let el = if k % 2 == 0 { 20.0 } else { -10.0 };
            CameraPose::orbit(az, el, radius, fov_deg)
        })
        .collect()
}

/// Evaluation grid: elevations {−20, −10, 0, 10, 20}° × six azimuths, 30 views.
pub fn evaluation_grid(radius: f64, fov_deg: f64) -> Result<Vec<CameraPose>> {
    let mut out = Vec::with_capacity(30);
    for el in [-20.0, -10.0, 0.0, 10.0, 20.0] {
        for k in 0..6 {
            out.push(CameraPose::orbit(60.0 * k as f64, el, radius, fov_deg)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_bounds_and_look_at() {
        for seed in 0..200 {
            let c = sample_camera(seed, RADIUS_LO, RADIUS_HI, DEFAULT_FOV_DEG).unwrap();
            let d = c.distance();
            assert!((RADIUS_LO..=RADIUS_HI).contains(&d));
            assert!(c.orthonormality_error() < 1e-6);
            let to_origin = util::scale(c.position, -1.0 / d);
            let f = c.to_camera(to_origin);
            assert!((f[0]).abs() < 1e-6 && (f[1]).abs() < 1e-6 && (f[2] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_radii() {
        assert!(sample_camera(0, 2.0, 1.5, 40.0).is_err());
        assert!(sample_camera(0, 0.0, 1.5, 40.0).is_err());
        assert!(sample_camera(0, 1.5, 2.2, 5.0).is_err());
    }

    #[test]
    fn directions_are_uniform_on_the_sphere() {
        let mut mean = [0.0; 3];
        let n = 100_000;
        for seed in 0..n {
            let c = sample_camera(seed, 1.5, 2.2, 40.0).unwrap();
            let d = util::normalize(c.position);
            mean = util::add(mean, d);
        }
        let m = util::norm(util::scale(mean, 1.0 / n as f64));
        assert!(m < 0.02, "mean direction norm {m}");
    }

    #[test]
    fn polar_fallback_up_vector() {
        let c = CameraPose::look_at_origin([0.0, 0.0, 2.0], 40.0).unwrap();
        assert!(c.orthonormality_error() < 1e-12);
        assert_eq!(c.forward(), [0.0, 0.0, -1.0]);
    }

    #[test]
    fn center_pixel_is_optical_axis() {
        let c = CameraPose::orbit(10.0, 5.0, 2.0, 40.0).unwrap();
        let d = c.ray_dir(16, 16, 32);
        assert!(util::norm(util::sub(d, c.forward())) < 1e-12);
    }

    #[test]
    fn conditioning_is_pure() {
        let c = sample_camera(5, 1.5, 2.2, 40.0).unwrap();
        assert_eq!(c.conditioning(), c.clone().conditioning());
        assert_eq!(&c.conditioning()[16..], &[0.0; 4]);
    }
}
