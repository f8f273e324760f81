//! Training loss: photometric, perceptual, mask, depth, normal and a density
//! total-variation regularizer, combined with fixed weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::metrics::{check_pyramid_size, PYRAMID_LEVELS};
use crate::scenekit::ViewRecord;
use crate::tensor::Tensor;
use crate::triplane::{grid_points, Field, RenderedView};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rgb: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub depth: f64,
    pub normal: f64,
    pub regularizer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 1.0, perceptual: 2.0, mask: 1.0, depth: 0.5, normal: 0.2, regularizer: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub depth: f64,
    pub normal: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.rgb * self.rgb
            + w.perceptual * self.perceptual
            + w.mask * self.mask
            + w.depth * self.depth
            + w.normal * self.normal
            + w.regularizer * self.regularizer
    }

    pub fn from_components(c: [f64; 6], w: &LossWeights) -> Self {
        let mut b = Self { rgb: c[0], perceptual: c[1], mask: c[2], depth: c[3], normal: c[4], regularizer: c[5], total: 0.0 };
        b.total = b.weighted_total(w);
        b
    }

    pub fn components(&self) -> [(&'static str, f64); 6] {
        [
            ("rgb", self.rgb),
            ("perceptual", self.perceptual),
            ("mask", self.mask),
            ("depth", self.depth),
            ("normal", self.normal),
            ("regularizer", self.regularizer),
        ]
    }

    /// Names the first non-finite or negative component.
    pub fn check(&self) -> Result<()> {
        for (name, v) in self.components() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite(format!("loss component {name} = {v}")));
            }
        }
        if !self.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss = {}", self.total)));
        }
        Ok(())
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let f = |get: fn(&LossBreakdown) -> f64| items.iter().map(get).sum::<f64>() / n;
        LossBreakdown {
            rgb: f(|b| b.rgb),
            perceptual: f(|b| b.perceptual),
            mask: f(|b| b.mask),
            depth: f(|b| b.depth),
            normal: f(|b| b.normal),
            regularizer: f(|b| b.regularizer),
            total: f(|b| b.total),
        }
    }
}

/// Differentiable Laplacian-pyramid L1 distance between two `[res, res, c]` images.
pub fn perceptual_loss(g: &mut Graph, a: Var, b: Var, res: usize) -> Var {
    let d = g.sub(a, b);
    let mut cur = d;
    let mut r = res;
    let mut terms = Vec::with_capacity(PYRAMID_LEVELS + 1);
    // The pyramid is linear, so the pyramid of the difference is the difference of pyramids.
    for _ in 0..PYRAMID_LEVELS {
        let low = g.pool2(cur, r, r);
        let up = g.upsample2(low, r / 2, r / 2);
        let band = g.sub(cur, up);
        let band = g.unary(band, Unary::Abs);
        terms.push(g.mean(band));
        cur = low;
        r /= 2;
    }
    let low = g.unary(cur, Unary::Abs);
    terms.push(g.mean(low));
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    total
}

/// Per-view loss terms as scalar graph nodes, in breakdown order (without the regularizer).
pub struct ViewLoss {
    pub terms: [Var; 5],
}

pub fn view_loss(g: &mut Graph, pred: &RenderedView, gt: &ViewRecord) -> Result<ViewLoss> {
    if pred.res != gt.res {
        return Err(Error::Shape(format!("rendered at {} but ground truth is {}", pred.res, gt.res)));
    }
    check_pyramid_size(gt.res)?;
    let res = gt.res;
    let n = res * res;
    let fg: Vec<usize> = (0..n).filter(|&i| gt.mask[i] > 0.5).collect();

    let rgb = pred.rgb(g);
    let gt_rgb = g.constant(Tensor::new([n, 3], gt.rgb.clone()));
    let diff = g.sub(rgb, gt_rgb);
    let sq = g.unary(diff, Unary::Square);
    let l_rgb = g.mean(sq);

    let a = g.reshape(rgb, [res, res, 3]);
    let b = g.reshape(gt_rgb, [res, res, 3]);
    let l_perc = perceptual_loss(g, a, b, res);

    let acc = pred.acc(g);
    let gt_mask = g.constant(Tensor::new([n, 1], gt.mask.clone()));
    let dm = g.sub(acc, gt_mask);
    let dm = g.unary(dm, Unary::Square);
    let l_mask = g.mean(dm);

    let (l_depth, l_normal) = if fg.is_empty() {
        let z = g.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let depth = pred.depth(g);
        let pd = g.gather(depth, fg.clone(), [fg.len()]);
        let gd = g.constant(Tensor::new([fg.len()], fg.iter().map(|&i| gt.depth[i]).collect()));
        let dd = g.sub(pd, gd);
        let dd = g.unary(dd, Unary::Abs);
        let l_depth = g.mean(dd);

        let idx: Vec<usize> = fg.iter().flat_map(|&i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        let gn: Vec<f64> = idx.iter().map(|&k| gt.normal[k]).collect();
        let pn = g.gather(pred.normal, idx, [fg.len(), 3]);
        let gn = g.constant(Tensor::new([fg.len(), 3], gn));
        let prod = g.mul(pn, gn);
        let cos = g.mean(prod);
        // mean over rows of (1 - n·n̂) = 1 - 3·mean(elementwise product)
        let s = g.scale(cos, -3.0);
        (l_depth, g.offset(s, 1.0))
    };
    Ok(ViewLoss { terms: [l_rgb, l_perc, l_mask, l_depth, l_normal] })
}

/// Mean absolute density difference between grid neighbours along all three axes.
pub fn density_tv(g: &mut Graph, field: &dyn Field, n: usize) -> Var {
    let points = g.constant(grid_points(n));
    let (density, _) = field.query(g, points);
    let at = |x: usize, y: usize, z: usize| (z * n + y) * n + x;
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (x2, y2, z2) = (x + dx, y + dy, z + dz);
                    if x2 < n && y2 < n && z2 < n {
                        lo.push(at(x, y, z));
                        hi.push(at(x2, y2, z2));
                    }
                }
            }
        }
    }
    let m = lo.len();
    let a = g.gather(density, lo, [m]);
    let b = g.gather(density, hi, [m]);
    let d = g.sub(b, a);
    let d = g.unary(d, Unary::Abs);
    g.mean(d)
}

/// Combines per-view terms (averaged over views) and the regularizer into a
/// scalar graph loss and its breakdown.
pub fn combine(g: &mut Graph, views: &[ViewLoss], regularizer: Var, w: &LossWeights) -> (Var, LossBreakdown) {
    let weights = [w.rgb, w.perceptual, w.mask, w.depth, w.normal];
    let inv = 1.0 / views.len().max(1) as f64;
    let mut comps = [0.0; 6];
    let mut total = g.scale(regularizer, w.regularizer);
    for (k, &wk) in weights.iter().enumerate() {
        for v in views {
            comps[k] += g.value(v.terms[k]).item();
            let t = g.scale(v.terms[k], wk * inv);
            total = g.add(total, t);
        }
        comps[k] *= inv;
    }
    comps[5] = g.value(regularizer).item();
    (total, LossBreakdown::from_components(comps, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_components_give_weight_sum() {
        let b = LossBreakdown::from_components([1.0; 6], &LossWeights::default());
        assert!((b.total - 5.7).abs() < 1e-12);
        assert_eq!(b.total, b.weighted_total(&LossWeights::default()));
    }

    #[test]
    fn perceptual_loss_matches_metric() {
        let a: Vec<f64> = (0..16 * 16 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let b: Vec<f64> = (0..16 * 16 * 3).map(|i| ((i * 53) % 97) as f64 / 96.0).collect();
        let mut g = Graph::new();
        let va = g.constant(Tensor::new([16, 16, 3], a.clone()));
        let vb = g.constant(Tensor::new([16, 16, 3], b.clone()));
        let l = perceptual_loss(&mut g, va, vb, 16);
        let m = crate::metrics::perceptual_distance(&a, &b, 16, 3).unwrap();
        assert!((g.value(l).item() - m).abs() < 1e-12);
    }

    #[test]
    fn negative_check_names_component() {
        let mut b = LossBreakdown::from_components([0.1; 6], &LossWeights::default());
        b.depth = f64::NAN;
        let e = b.check().unwrap_err().to_string();
        assert!(e.contains("depth"));
    }
}
