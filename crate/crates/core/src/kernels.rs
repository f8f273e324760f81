//! Hand-written forward and backward kernels for the rendering ops on the tape.

use crate::autograd::{CompositeSpec, NormalSpec};

/// Planes are stored `[plane][row][col][d]`; plane 0 is XY (col = x, row = y),
/// plane 1 is XZ (col = x, row = z), plane 2 is YZ (col = y, row = z).
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisCoord {
    pub i0: usize,
    pub frac: f64,
    /// d(grid coordinate)/d(world coordinate); zero where the point was clamped.
    pub scale: f64,
}

/// Grid nodes sit at `-1 + 2i/(res-1)`; coordinates outside the cube are clamped.
pub(crate) fn axis_coord(c: f64, res: usize) -> AxisCoord {
    let span = (res - 1) as f64;
    let inside = (-1.0..=1.0).contains(&c);
    let cc = c.clamp(-1.0, 1.0);
    let u = (cc + 1.0) * 0.5 * span;
    let i0 = (u.floor() as usize).min(res - 2);
    AxisCoord { i0, frac: u - i0 as f64, scale: if inside { 0.5 * span } else { 0.0 } }
}

#[inline]
fn plane_offset(p: usize, row: usize, col: usize, res: usize, d: usize) -> usize {
    ((p * res + row) * res + col) * d
}

pub fn triplane_forward(planes: &[f64], res: usize, d: usize, points: &[f64]) -> Vec<f64> {
    let s = points.len() / 3;
    let mut out = vec![0.0; s * d];
    for (pt, orow) in points.chunks(3).zip(out.chunks_mut(d)) {
        let coords = [axis_coord(pt[0], res), axis_coord(pt[1], res), axis_coord(pt[2], res)];
        for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (ca, cb) = (coords[a], coords[b]);
            let w = [
                (1.0 - ca.frac) * (1.0 - cb.frac),
                ca.frac * (1.0 - cb.frac),
                (1.0 - ca.frac) * cb.frac,
                ca.frac * cb.frac,
            ];
            let offs = [
                plane_offset(p, cb.i0, ca.i0, res, d),
                plane_offset(p, cb.i0, ca.i0 + 1, res, d),
                plane_offset(p, cb.i0 + 1, ca.i0, res, d),
                plane_offset(p, cb.i0 + 1, ca.i0 + 1, res, d),
            ];
            for (&wk, &off) in w.iter().zip(&offs) {
                for (o, &v) in orow.iter_mut().zip(&planes[off..off + d]) {
                    *o += wk * v;
                }
            }
        }
    }
    out
}

pub fn triplane_backward_planes(points: &[f64], res: usize, d: usize, g: &[f64], dplanes: &mut [f64]) {
    for (pt, grow) in points.chunks(3).zip(g.chunks(d)) {
        let coords = [axis_coord(pt[0], res), axis_coord(pt[1], res), axis_coord(pt[2], res)];
        for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (ca, cb) = (coords[a], coords[b]);
            let w = [
                (1.0 - ca.frac) * (1.0 - cb.frac),
                ca.frac * (1.0 - cb.frac),
                (1.0 - ca.frac) * cb.frac,
                ca.frac * cb.frac,
            ];
            let offs = [
                plane_offset(p, cb.i0, ca.i0, res, d),
                plane_offset(p, cb.i0, ca.i0 + 1, res, d),
                plane_offset(p, cb.i0 + 1, ca.i0, res, d),
                plane_offset(p, cb.i0 + 1, ca.i0 + 1, res, d),
            ];
            for (&wk, &off) in w.iter().zip(&offs) {
                for (o, &gv) in dplanes[off..off + d].iter_mut().zip(grow) {
                    *o += wk * gv;
                }
            }
        }
    }
}

pub fn triplane_backward_points(
    planes: &[f64],
    res: usize,
    d: usize,
    points: &[f64],
    g: &[f64],
    dpoints: &mut [f64],
) {
    let dot = |off: usize, grow: &[f64]| -> f64 {
        planes[off..off + d].iter().zip(grow).map(|(a, b)| a * b).sum()
    };
    for ((pt, grow), dpt) in points.chunks(3).zip(g.chunks(d)).zip(dpoints.chunks_mut(3)) {
        let coords = [axis_coord(pt[0], res), axis_coord(pt[1], res), axis_coord(pt[2], res)];
        for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
            let (ca, cb) = (coords[a], coords[b]);
            let v00 = dot(plane_offset(p, cb.i0, ca.i0, res, d), grow);
            let v01 = dot(plane_offset(p, cb.i0, ca.i0 + 1, res, d), grow);
            let v10 = dot(plane_offset(p, cb.i0 + 1, ca.i0, res, d), grow);
            let v11 = dot(plane_offset(p, cb.i0 + 1, ca.i0 + 1, res, d), grow);
            let dfa = (1.0 - cb.frac) * (v01 - v00) + cb.frac * (v11 - v10);
            let dfb = (1.0 - ca.frac) * (v10 - v00) + ca.frac * (v11 - v01);
            dpt[a] += dfa * ca.scale;
            dpt[b] += dfb * cb.scale;
        }
    }
}

pub fn composite_forward(density: &[f64], rgb: &[f64], spec: &CompositeSpec) -> Vec<f64> {
    let s = spec.samples;
    let mut out = vec![0.0; spec.rays * 5];
    for (r, o) in out.chunks_mut(5).enumerate() {
        let mut trans = 1.0;
        let mut acc = 0.0;
        let mut col = [0.0; 3];
        let mut dsum = 0.0;
        for i in 0..s {
            let k = r * s + i;
            let e = (-density[k] * spec.delta).exp();
            let w = trans * (1.0 - e);
            acc += w;
            for c in 0..3 {
                col[c] += w * rgb[k * 3 + c];
            }
            dsum += w * spec.t[i];
            trans *= e;
        }
        for c in 0..3 {
            o[c] = col[c] + (1.0 - acc) * spec.background[c];
        }
        o[3] = if acc > 0.5 { dsum / acc.max(1e-6) } else { 0.0 };
        o[4] = acc;
    }
    out
}

/// Per-ray compositing weights and the transmittance left after the last sample.
pub fn composite_weights(density: &[f64], spec: &CompositeSpec) -> (Vec<f64>, Vec<f64>) {
    let s = spec.samples;
    let mut w = vec![0.0; spec.rays * s];
    let mut residual = Vec::with_capacity(spec.rays);
    for (wr, dr) in w.chunks_mut(s).zip(density.chunks(s)) {
        let mut trans = 1.0;
        for (wk, &dk) in wr.iter_mut().zip(dr) {
            let e = (-dk * spec.delta).exp();
            *wk = trans * (1.0 - e);
            trans *= e;
        }
        residual.push(trans);
    }
    (w, residual)
}

pub fn composite_backward(
    density: &[f64],
    rgb: &[f64],
    out: &[f64],
    g: &[f64],
    spec: &CompositeSpec,
) -> (Vec<f64>, Vec<f64>) {
    let s = spec.samples;
    let mut gd = vec![0.0; density.len()];
    let mut gc = vec![0.0; rgb.len()];
    let mut trans = vec![0.0; s + 1];
    let mut w = vec![0.0; s];
    let mut gw = vec![0.0; s];
    for r in 0..spec.rays {
        let o = &out[r * 5..r * 5 + 5];
        let gr = &g[r * 5..r * 5 + 5];
        trans[0] = 1.0;
        for i in 0..s {
            let e = (-density[r * s + i] * spec.delta).exp();
            w[i] = trans[i] * (1.0 - e);
            trans[i + 1] = trans[i] * e;
        }
        let acc = o[4];
        let depth_active = acc > 0.5;
        for i in 0..s {
            let k = r * s + i;
            let mut gi = gr[4];
            for c in 0..3 {
                gi += gr[c] * (rgb[k * 3 + c] - spec.background[c]);
                gc[k * 3 + c] += w[i] * gr[c];
            }
            if depth_active {
                gi += gr[3] * (spec.t[i] - o[3]) / acc;
            }
            gw[i] = gi;
        }
        let mut suffix = 0.0;
        for i in (0..s).rev() {
            gd[r * s + i] += spec.delta * (trans[i + 1] * gw[i] - suffix);
            suffix += w[i] * gw[i];
        }
    }
    (gd, gc)
}

const NORMAL_EPS: f64 = 1e-12;

fn probe_gradient(d: &[f64], step: f64) -> [f64; 3] {
    let inv = 1.0 / (2.0 * step);
    [(d[0] - d[1]) * inv, (d[2] - d[3]) * inv, (d[4] - d[5]) * inv]
}

pub fn normals_forward(density: &[f64], spec: &NormalSpec) -> Vec<f64> {
    let mut out = vec![0.0; spec.rays * 3];
    for (j, &ray) in spec.foreground.iter().enumerate() {
        let g = probe_gradient(&density[j * 6..j * 6 + 6], spec.step);
        let s = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + NORMAL_EPS).sqrt();
        let nw = [-g[0] / s, -g[1] / s, -g[2] / s];
        for (r, row) in spec.rotation.iter().enumerate() {
            out[ray * 3 + r] = row[0] * nw[0] + row[1] * nw[1] + row[2] * nw[2];
        }
    }
    out
}

pub fn normals_backward(density: &[f64], gout: &[f64], spec: &NormalSpec, gd: &mut [f64]) {
    let inv = 1.0 / (2.0 * spec.step);
    let rot = &spec.rotation;
    for (j, &ray) in spec.foreground.iter().enumerate() {
        let g = probe_gradient(&density[j * 6..j * 6 + 6], spec.step);
        let s2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + NORMAL_EPS;
        let s = s2.sqrt();
        let gc = &gout[ray * 3..ray * 3 + 3];
        let mut dn = [0.0; 3];
        for (c, v) in dn.iter_mut().enumerate() {
            *v = rot[0][c] * gc[0] + rot[1][c] * gc[1] + rot[2][c] * gc[2];
        }
        let gdn = g[0] * dn[0] + g[1] * dn[1] + g[2] * dn[2];
        for a in 0..3 {
            let dg = -(dn[a] / s - g[a] * gdn / (s2 * s));
            gd[j * 6 + 2 * a] += dg * inv;
            gd[j * 6 + 2 * a + 1] -= dg * inv;
        }
    }
}

pub fn pool2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2 * c];
    for y in 0..h2 {
        for xx in 0..w2 {
            for ch in 0..c {
                let at = |yy: usize, xq: usize| x[(yy * w + xq) * c + ch];
                out[(y * w2 + xx) * c + ch] = 0.25
                    * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
            }
        }
    }
    out
}

pub fn pool2_backward(g: &[f64], h: usize, w: usize, c: usize, dx: &mut [f64]) {
    let w2 = w / 2;
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                dx[(y * w + xx) * c + ch] += 0.25 * g[((y / 2) * w2 + xx / 2) * c + ch];
            }
        }
    }
}

pub fn upsample2(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; h2 * w2 * c];
    for y in 0..h2 {
        for xx in 0..w2 {
            for ch in 0..c {
                out[(y * w2 + xx) * c + ch] = x[((y / 2) * w + xx / 2) * c + ch];
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &[f64], h: usize, w: usize, c: usize, dx: &mut [f64]) {
    let w2 = 2 * w;
    for y in 0..2 * h {
        for xx in 0..w2 {
            for ch in 0..c {
                dx[((y / 2) * w + xx / 2) * c + ch] += g[(y * w2 + xx) * c + ch];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compositing_conserves_mass() {
        let spec = CompositeSpec {
            rays: 3,
            samples: 8,
            t: (0..8).map(|i| 1.0 + i as f64 * 0.1).collect(),
            delta: 0.1,
            background: [1.0; 3],
        };
        let density: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin().abs() * 20.0).collect();
        let (w, residual) = composite_weights(&density, &spec);
        for r in 0..3 {
            let total: f64 = w[r * 8..r * 8 + 8].iter().sum::<f64>() + residual[r];
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_then_upsample_is_block_mean() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = pool2(&x, 4, 4, 1);
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(&p, 2, 2, 1);
        assert_eq!(u[0], 2.5);
        assert_eq!(u[5], 2.5);
        assert_eq!(u[15], 12.5);
    }

    #[test]
    fn clamped_coordinates_have_zero_slope() {
        let c = axis_coord(1.3, 8);
        assert_eq!(c.i0, 6);
        assert_eq!(c.frac, 1.0);
        assert_eq!(c.scale, 0.0);
        let c = axis_coord(-1.0, 8);
        assert_eq!((c.i0, c.frac), (0, 0.0));
    }
}
