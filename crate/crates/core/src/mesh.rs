//! Iso-surface extraction by marching tetrahedra, for inspection only.
//!
//! Each grid cube is split into six tetrahedra around its main diagonal, so
//! the output needs no ambiguity tables. Vertices on crossed edges start at
//! the linear interpolant and are then refined by bisection against the
//! field itself, which keeps them on the level set of the continuous field
//! rather than of its grid samples.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::triplane::{density_at, grid_points};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

const CUBE_CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

/// Six tetrahedra sharing the 0-6 diagonal.
const TETS: [[usize; 4]; 6] = [[0, 1, 2, 6], [0, 2, 3, 6], [0, 3, 7, 6], [0, 7, 4, 6], [0, 4, 5, 6], [0, 5, 1, 6]];

const BISECTIONS: usize = 24;

impl Mesh {
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} vertices, {} triangles", self.vertices.len(), self.triangles.len());
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }
}

/// Surface `{p : density(p) = level}` inside `[-1,1]³` sampled on an `n³` grid.
/// `field` evaluates a batch of points.
pub fn extract(n: usize, level: f64, field: &dyn Fn(&[[f64; 3]]) -> Vec<f64>) -> Result<Mesh> {
    if n < 2 {
        return Err(Error::InvalidArgument("mesh grid needs at least 2 samples per axis".into()));
    }
    if !(level > 0.0) {
        return Err(Error::InvalidArgument(format!("iso level {level} must be positive")));
    }
    let pts: Vec<[f64; 3]> = grid_points(n).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let values = field(&pts);
    let idx = |x: usize, y: usize, z: usize| (z * n + y) * n + x;

    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut triangles = Vec::new();
    let mut vertex = |a: usize, b: usize| -> usize {
        let key = (a.min(b), a.max(b));
        *edge_vertex.entry(key).or_insert_with(|| {
            edges.push(key);
            edges.len() - 1
        })
    };
    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let corner = CUBE_CORNERS.map(|c| idx(x + c[0], y + c[1], z + c[2]));
                for tet in TETS {
                    let ids = tet.map(|k| corner[k]);
                    let inside: Vec<usize> = (0..4).filter(|&k| values[ids[k]] >= level).collect();
                    let outside: Vec<usize> = (0..4).filter(|&k| values[ids[k]] < level).collect();
                    match inside.len() {
                        1 | 3 => {
                            let (apex, base) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
                            let v: Vec<usize> = base.iter().map(|&k| vertex(ids[apex], ids[k])).collect();
                            triangles.push([v[0], v[1], v[2]]);
                        }
                        2 => {
                            let (i0, i1, o0, o1) = (inside[0], inside[1], outside[0], outside[1]);
                            let a = vertex(ids[i0], ids[o0]);
                            let b = vertex(ids[i0], ids[o1]);
                            let c = vertex(ids[i1], ids[o1]);
                            let d = vertex(ids[i1], ids[o0]);
                            triangles.push([a, b, c]);
                            triangles.push([a, c, d]);
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    // Bisection on each crossed edge, all edges advanced together so the
    // field sees one batch per round.
    let mut lo: Vec<[f64; 3]> = Vec::with_capacity(edges.len());
    let mut hi: Vec<[f64; 3]> = Vec::with_capacity(edges.len());
    let mut vertices: Vec<[f64; 3]> = Vec::with_capacity(edges.len());
    for &(a, b) in &edges {
        let (inner, outer) = if values[a] >= level { (a, b) } else { (b, a) };
        let t = (level - values[inner]) / (values[outer] - values[inner]);
        lo.push(pts[inner]);
        hi.push(pts[outer]);
        vertices.push(lerp(pts[inner], pts[outer], t.clamp(0.0, 1.0)));
    }
    let mut best: Vec<f64> = field(&vertices).iter().map(|v| (v - level).abs()).collect();
    let mut mids = vec![[0.0; 3]; edges.len()];
    for _ in 0..BISECTIONS {
        for i in 0..edges.len() {
            mids[i] = lerp(lo[i], hi[i], 0.5);
        }
        let dm = field(&mids);
        for i in 0..edges.len() {
            let err = (dm[i] - level).abs();
            if err < best[i] {
                best[i] = err;
                vertices[i] = mids[i];
            }
            if dm[i] >= level {
                lo[i] = mids[i];
            } else {
                hi[i] = mids[i];
            }
        }
    }
    for t in &mut triangles {
        fix_winding(&vertices, t, &pts, &edges, &values, level);
    }
    Ok(Mesh { vertices, triangles })
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

/// Points each triangle's normal away from the dense side.
fn fix_winding(verts: &[[f64; 3]], t: &mut [usize; 3], pts: &[[f64; 3]], edges: &[(usize, usize)], values: &[f64], level: f64) {
    let (p0, p1, p2) = (verts[t[0]], verts[t[1]], verts[t[2]]);
    let u = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
    let w = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
    let nrm = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
    let (a, b) = edges[t[0]];
    let (inner, outer) = if values[a] >= level { (a, b) } else { (b, a) };
    let out = [pts[outer][0] - pts[inner][0], pts[outer][1] - pts[inner][1], pts[outer][2] - pts[inner][2]];
    if nrm[0] * out[0] + nrm[1] * out[1] + nrm[2] * out[2] < 0.0 {
        t.swap(1, 2);
    }
}

/// Mesh of a learned field at density `level`.
pub fn extract_planes(planes: &Tensor, store: &ParamStore, n: usize, level: f64) -> Result<Mesh> {
    extract(n, level, &|pts| field_density(planes, store, pts))
}

/// Density of a learned field at arbitrary points.
pub fn field_density(planes: &Tensor, store: &ParamStore, pts: &[[f64; 3]]) -> Vec<f64> {
    if pts.is_empty() {
        return Vec::new();
    }
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    density_at(planes, store, Tensor::new([pts.len(), 3], flat))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(pts: &[[f64; 3]]) -> Vec<f64> {
        pts.iter().map(|p| 2.0 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).collect()
    }

    #[test]
    fn sphere_level_set() {
        // level 1.5 of 2 - |p| is the sphere of radius 0.5
        let m = extract(12, 1.5, &ball).unwrap();
        assert!(!m.triangles.is_empty());
        for v in &m.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.5).abs() < 1e-5, "vertex radius {r}");
        }
        // every triangle faces outward
        for t in &m.triangles {
            let (a, b, c) = (m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [u[1] * w[2] - u[2] * w[1], u[2] * w[0] - u[0] * w[2], u[0] * w[1] - u[1] * w[0]];
            assert!(n[0] * a[0] + n[1] * a[1] + n[2] * a[2] >= 0.0);
        }
    }

    #[test]
    fn closed_surface_has_paired_edges() {
        let m = extract(9, 1.4, &ball).unwrap();
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(count.values().all(|&c| c == 2));
    }

    #[test]
    fn obj_text_is_one_based() {
        let m = Mesh { vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], triangles: vec![[0, 1, 2]] };
        let obj = m.to_obj();
        assert!(obj.lines().any(|l| l == "f 1 2 3"));
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 3);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(extract(1, 1.0, &ball).is_err());
        assert!(extract(8, 0.0, &ball).is_err());
    }
}
