//! Central finite-difference gradient checks against the reverse-mode tape.

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Checks d f / d inputs[which] where `f` builds a scalar on a fresh graph.
///
/// Every input is registered as a variable; only `which` is perturbed.
pub fn check<F>(inputs: &[Tensor], which: usize, h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic = grads
        .get(vars[which])
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs[which].numel() {
        let base = inputs[which].data()[i];
        probe[which].data_mut()[i] = base + h;
        let fp = eval(&probe);
        probe[which].data_mut()[i] = base - h;
        let fm = eval(&probe);
        probe[which].data_mut()[i] = base;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let rel_err = relative_error(&analytic, &numeric);
    GradCheck { analytic, numeric, rel_err }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}
