use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Vec3};

pub const MAX_PRIMITIVES: usize = 6;
/// Every primitive's bounding sphere stays inside `[-BOUND, BOUND]³`.
pub const BOUND: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    /// Ring around the local z axis.
    Torus { major: f64, minor: f64 },
    RoundedBox { half: Vec3, radius: f64 },
}

impl Shape {
    fn sdf(&self, q: Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => util::norm(q) - radius,
            Shape::Box { half } => box_sdf(q, half),
            Shape::Torus { major, minor } => {
                let ring = (q[0] * q[0] + q[1] * q[1]).sqrt() - major;
                (ring * ring + q[2] * q[2]).sqrt() - minor
            }
            Shape::RoundedBox { half, radius } => {
                box_sdf(q, [half[0] - radius, half[1] - radius, half[2] - radius]) - radius
            }
        }
    }

    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } | Shape::RoundedBox { half, .. } => util::norm(half),
            Shape::Torus { major, minor } => major + minor,
        }
    }

    fn sizes_positive(&self) -> bool {
        match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half } => half.iter().all(|&h| h > 0.0),
            Shape::Torus { major, minor } => major > 0.0 && minor > 0.0 && minor < major,
            Shape::RoundedBox { half, radius } => {
                radius > 0.0 && half.iter().all(|&h| h > radius)
            }
        }
    }
}

fn box_sdf(q: Vec3, half: Vec3) -> f64 {
    let d = [q[0].abs() - half[0], q[1].abs() - half[1], q[2].abs() - half[2]];
    let outside = util::norm([d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
    outside + d[0].max(d[1]).max(d[2]).min(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.shape.sdf(util::sub(p, self.center))
    }
}

/// A small CSG scene: primitives merged by (smooth) union.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Smooth-union blend radius; 0 is a hard union.
    pub blend: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, blend: f64, seed: u64) -> Result<Self> {
        let s = Self { primitives, blend, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.primitives.len();
        if n == 0 || n > MAX_PRIMITIVES {
            return Err(Error::InvalidArgument(format!("scene has {n} primitives, expected 1..=6")));
        }
        if !(self.blend >= 0.0) {
            return Err(Error::InvalidArgument(format!("blend radius {} < 0", self.blend)));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !p.shape.sizes_positive() {
                return Err(Error::InvalidArgument(format!("primitive {i} has invalid sizes")));
            }
            let r = p.shape.bounding_radius();
            if p.center.iter().any(|c| c.abs() + r > BOUND + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "primitive {i} leaves the [-{BOUND},{BOUND}]³ safety cube"
                )));
            }
            if p.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::InvalidArgument(format!("primitive {i} albedo outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Signed distance and the albedo of the nearest primitive (lowest index on ties).
    pub fn eval(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut dist = f64::INFINITY;
        let mut nearest = f64::INFINITY;
        let mut albedo = self.primitives[0].albedo;
        for prim in &self.primitives {
            let d = prim.sdf(p);
            if d < nearest {
                nearest = d;
                albedo = prim.albedo;
            }
            dist = if dist.is_infinite() { d } else { smooth_min(dist, d, self.blend) };
        }
        (dist, albedo)
    }

    pub fn sdf(&self, p: Vec3) -> f64 {
        self.eval(p).0
    }

    pub fn content_hash(&self) -> String {
        util::sha256_hex(serde_json::to_string(self).expect("scene serializes").as_bytes())
    }
}

/// Polynomial smooth minimum; exact `min` for `k = 0`.
pub fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

pub fn sdf_eval(scene: &SceneSpec, point: Vec3) -> (f64, [f64; 3]) {
    scene.eval(point)
}

/// Deterministic random scene with `1..=max_primitives` primitives.
pub fn make_scene(seed: u64, max_primitives: usize) -> Result<SceneSpec> {
    if !(1..=MAX_PRIMITIVES).contains(&max_primitives) {
        return Err(Error::InvalidArgument(format!(
            "max_primitives must be in [1,6], got {max_primitives}"
        )));
    }
    let mut rng = util::rng(util::derive_seed(seed, &[0x5ce7e]));
    let count = rng.gen_range(1..=max_primitives);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = match rng.gen_range(0..4) {
            0 => Shape::Sphere { radius: rng.gen_range(0.25..0.55) },
            1 => Shape::Box {
                half: [rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4)],
            },
            2 => Shape::Torus { major: rng.gen_range(0.3..0.5), minor: rng.gen_range(0.08..0.18) },
            _ => {
                let half = [rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4), rng.gen_range(0.15..0.4)];
                let hmin = half.iter().copied().fold(f64::INFINITY, f64::min);
                Shape::RoundedBox { half, radius: rng.gen_range(0.2..0.6) * hmin }
            }
        };
        let reach = (BOUND - shape.bounding_radius()).min(0.35);
        let center = [
            rng.gen_range(-reach..=reach),
            rng.gen_range(-reach..=reach),
            rng.gen_range(-reach..=reach),
        ];
        let albedo = [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)];
        primitives.push(Primitive { shape, center, albedo });
    }
    let blend = if count > 1 { rng.gen_range(0.0..0.15) } else { 0.0 };
    SceneSpec::new(primitives, blend, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unit_sphere(radius: f64) -> SceneSpec {
        SceneSpec::new(
            vec![Primitive { shape: Shape::Sphere { radius }, center: [0.0; 3], albedo: [0.8, 0.5, 0.2] }],
            0.0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn sphere_closed_form() {
        let s = unit_sphere(0.5);
        assert_eq!(sdf_eval(&s, [0.0, 0.0, 0.0]).0, -0.5);
        assert_eq!(sdf_eval(&s, [1.0, 0.0, 0.0]).0, 0.5);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = make_scene(0, 1).unwrap();
        assert_eq!(a.primitives.len(), 1);
        assert_eq!(a, make_scene(0, 1).unwrap());
        assert_ne!(make_scene(0, 4).unwrap().primitives, make_scene(1, 4).unwrap().primitives);
    }

    #[test]
    fn rejects_primitive_count_outside_range() {
        assert!(make_scene(0, 0).is_err());
        assert!(make_scene(0, 7).is_err());
    }

    #[test]
    fn thousand_seeds_stay_inside_safety_cube() {
        for seed in 0..1000 {
            let s = make_scene(seed, 6).unwrap();
            for p in &s.primitives {
                let r = p.shape.bounding_radius();
                assert!(p.center.iter().all(|c| c.abs() + r <= BOUND), "seed {seed}");
            }
            assert!((1..=6).contains(&s.primitives.len()));
            assert!(s.blend >= 0.0);
        }
    }

    #[test]
    fn albedo_ties_break_by_index() {
        let p = |c: f64, a: f64| Primitive {
            shape: Shape::Sphere { radius: 0.2 },
            center: [c, 0.0, 0.0],
            albedo: [a; 3],
        };
        let s = SceneSpec::new(vec![p(-0.3, 0.1), p(0.3, 0.9)], 0.0, 0).unwrap();
        assert_eq!(s.eval([0.0, 0.0, 0.0]).1, [0.1; 3]);
        assert_eq!(s.eval([0.29, 0.0, 0.0]).1, [0.9; 3]);
    }

    #[test]
    fn smooth_union_never_exceeds_hard_union() {
        for i in 0..50 {
            let a = (i as f64 * 0.37).sin();
            let b = (i as f64 * 0.91).cos();
            assert!(smooth_min(a, b, 0.1) <= a.min(b));
        }
    }
}
