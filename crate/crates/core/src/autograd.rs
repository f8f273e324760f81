//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Graph`] owns every intermediate value. Nodes whose inputs are all
//! constants are stored as constants themselves, so a forward pass over
//! frozen parameters records no backward state at all.

use crate::kernels;
use crate::tensor::{matmul_acc, matmul_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Gelu,
    Softplus,
    Sigmoid,
    Square,
    Abs,
}

/// Per-ray compositing constants for [`Graph::composite`].
#[derive(Clone, Debug)]
pub struct CompositeSpec {
    pub rays: usize,
    pub samples: usize,
    /// Sample distances along the ray, shared by every ray of a view.
    pub t: Vec<f64>,
    pub delta: f64,
    pub background: [f64; 3],
}

/// Constants for [`Graph::density_normals`].
#[derive(Clone, Debug)]
pub struct NormalSpec {
    pub rays: usize,
    /// Ray index of every foreground ray, in the order its six probes appear.
    pub foreground: Vec<usize>,
    pub step: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Unary(Var, Unary),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    Sum(Var),
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Triplane { planes: Var, points: Var, res: usize },
    Composite { density: Var, rgb: Var, spec: CompositeSpec },
    Normals { density: Var, spec: NormalSpec },
    Pool2 { x: Var, h: usize, w: usize },
    Upsample2 { x: Var, h: usize, w: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    flops: u64,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(t.data_mut());
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating point operations counted by the instrumented kernels so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Charges work done outside this graph (e.g. on a detached side graph).
    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        let op = if grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` that is cut out of the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn g2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].grad || self.nodes[b.0].grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), out);
        self.flops += t.numel() as u64;
        let grad = self.g2(a, b);
        self.push(t, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), out);
        self.flops += t.numel() as u64;
        let grad = self.g2(a, b);
        self.push(t, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), out);
        self.flops += t.numel() as u64;
        let grad = self.g2(a, b);
        self.push(t, Op::Mul(a, b), grad)
    }

    /// `x[m,n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        assert_eq!(bv.numel(), n, "add_row: bias has {} entries, rows have {n}", bv.numel());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &c) in row.iter_mut().zip(bv.data()) {
                *o += c;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        self.flops += t.numel() as u64;
        let grad = self.g2(x, b);
        self.push(t, Op::AddRow(x, b), grad)
    }

    /// `x[m,n] * s[n]`, broadcasting `s` over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let n = xv.cols();
        assert_eq!(sv.numel(), n, "mul_row: scale has {} entries, rows have {n}", sv.numel());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &c) in row.iter_mut().zip(sv.data()) {
                *o *= c;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        self.flops += t.numel() as u64;
        let grad = self.g2(x, s);
        self.push(t, Op::MulRow(x, s), grad)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * c).collect());
        self.flops += t.numel() as u64;
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::Scale(x, c), grad)
    }

    /// `x + c` elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v + c).collect());
        self.flops += t.numel() as u64;
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::Offset(x), grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = (x.rows(), x.cols());
        let (k2, n) = (y.rows(), y.cols());
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", x.shape(), y.shape());
        let mut out = vec![0.0; m * n];
        matmul_acc(x.data(), y.data(), &mut out, m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let grad = self.g2(a, b);
        self.push(Tensor::new([m, n], out), Op::Matmul(a, b), grad)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose2();
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::Transpose(x), grad)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|&v| unary_fwd(f, v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), out);
        self.flops += 4 * t.numel() as u64;
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::Unary(x, f), grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for (row, orow) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        self.flops += 5 * t.numel() as u64;
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::LayerNorm { x, rstd }, grad)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out);
        self.flops += 5 * t.numel() as u64;
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::Softmax(x), grad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.flops += self.value(x).numel() as u64;
        let grad = self.nodes[x.0].grad;
        self.push(Tensor::scalar(s), Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::Reshape(x), grad)
    }

    /// `out.flat[i] = x.flat[idx[i]]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: impl Into<Vec<usize>>) -> Var {
        let xv = self.value(x).data();
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let t = Tensor::new(shape, out);
        let grad = self.nodes[x.0].grad;
        self.push(t, Op::Gather { x, idx }, grad)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat_rows column mismatch");
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let grad = parts.iter().any(|p| self.nodes[p.0].grad);
        self.push(Tensor::new([rows, n], out), Op::ConcatRows(parts.to_vec()), grad)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        let grad = parts.iter().any(|p| self.nodes[p.0].grad);
        self.push(Tensor::new([m, n], out), Op::ConcatCols(parts.to_vec()), grad)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let grad = self.nodes[x.0].grad;
        self.push(Tensor::new([m, len], out), Op::SliceCols { x, start }, grad)
    }

    /// Sum of bilinear lookups on three `res × res × d` planes, see [`kernels::triplane_forward`].
    pub fn triplane_sample(&mut self, planes: Var, points: Var) -> Var {
        let pv = self.value(planes);
        let shape = pv.shape().to_vec();
        assert!(shape.len() == 4 && shape[0] == 3 && shape[1] == shape[2], "planes must be [3,R,R,d]");
        let (res, d) = (shape[1], shape[3]);
        let pts = self.value(points);
        assert_eq!(pts.cols(), 3, "points must be [S,3]");
        let s = pts.rows();
        let out = kernels::triplane_forward(pv.data(), res, d, pts.data());
        self.flops += (s * 3 * 4 * 2 * d) as u64;
        let grad = self.g2(planes, points);
        self.push(Tensor::new([s, d], out), Op::Triplane { planes, points, res }, grad)
    }

    /// Alpha compositing of `density[rays·samples]` and `rgb[rays·samples,3]`.
    ///
    /// Output is `[rays, 5]`: composited rgb over the background, expected
    /// depth (0 when accumulation ≤ 0.5) and accumulated opacity.
    pub fn composite(&mut self, density: Var, rgb: Var, spec: CompositeSpec) -> Var {
        let (dv, cv) = (self.value(density), self.value(rgb));
        assert_eq!(dv.numel(), spec.rays * spec.samples);
        assert_eq!(cv.numel(), spec.rays * spec.samples * 3);
        assert_eq!(spec.t.len(), spec.samples);
        let out = kernels::composite_forward(dv.data(), cv.data(), &spec);
        self.flops += (spec.rays * spec.samples * 12) as u64;
        let grad = self.g2(density, rgb);
        self.push(Tensor::new([spec.rays, 5], out), Op::Composite { density, rgb, spec }, grad)
    }

    /// Camera-space unit normals from the negative density gradient, taken by
    /// central differences at six probes per foreground ray. Background rays get zeros.
    pub fn density_normals(&mut self, density: Var, spec: NormalSpec) -> Var {
        let dv = self.value(density);
        assert_eq!(dv.numel(), spec.foreground.len() * 6);
        let out = kernels::normals_forward(dv.data(), &spec);
        self.flops += (spec.foreground.len() * 30) as u64;
        let grad = self.nodes[density.0].grad;
        self.push(Tensor::new([spec.rays, 3], out), Op::Normals { density, spec }, grad)
    }

    /// 2×2 average pooling of an `[h, w, c]` image.
    pub fn pool2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let c = xv.numel() / (h * w);
        let out = kernels::pool2(xv.data(), h, w, c);
        let grad = self.nodes[x.0].grad;
        self.push(Tensor::new([h / 2, w / 2, c], out), Op::Pool2 { x, h, w }, grad)
    }

    /// Nearest-neighbour 2× upsampling of an `[h, w, c]` image.
    pub fn upsample2(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let c = xv.numel() / (h * w);
        let out = kernels::upsample2(xv.data(), h, w, c);
        let grad = self.nodes[x.0].grad;
        self.push(Tensor::new([h * 2, w * 2, c], out), Op::Upsample2 { x, h, w }, grad)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |d| d.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((o, x), y) in d.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((o, x), y) in d.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).numel();
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
                self.acc(grads, *b, |d| {
                    for row in g.chunks(n) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let n = sv.len();
                self.acc(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for ((o, gv), sc) in drow.iter_mut().zip(grow).zip(sv) {
                            *o += gv * sc;
                        }
                    }
                });
                self.acc(grads, *s, |d| {
                    for (xrow, grow) in xv.chunks(n).zip(g.chunks(n)) {
                        for ((o, gv), xx) in d.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xx;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v * c));
            }
            Op::Offset(x) | Op::Reshape(x) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, |d| {
                    let bt = bv.transpose2();
                    matmul_acc(g, bt.data(), d, m, n, k);
                });
                self.acc(grads, *b, |d| matmul_tn_acc(av.data(), g, d, m, k, n));
            }
            Op::Transpose(x) => {
                let t = gout.transpose2();
                self.acc(grads, *x, |d| d.iter_mut().zip(t.data()).for_each(|(o, v)| *o += v));
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                self.acc(grads, *x, |d| {
                    for (((o, gv), &xx), &yy) in d.iter_mut().zip(g).zip(xv).zip(yv) {
                        *o += gv * unary_grad(*f, xx, yy);
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (((drow, grow), yrow), &r) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).zip(rstd)
                    {
                        let mg = grow.iter().sum::<f64>() / n as f64;
                        let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += r * (gv - mg - yv * mgy);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|o| *o += s));
            }
            Op::Gather { x, idx } => {
                self.acc(grads, *x, |d| {
                    for (&i, gv) in idx.iter().zip(g) {
                        d[i] += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let seg = &g[off..off + len];
                    self.acc(grads, p, |d| d.iter_mut().zip(seg).for_each(|(o, v)| *o += v));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |d| {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(n)) {
                            for (o, v) in drow.iter_mut().zip(&grow[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(w)) {
                        for (o, v) in drow[*start..*start + w].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Triplane { planes, points, res } => {
                let pv = self.value(*planes).data();
                let pts = self.value(*points).data();
                let d = node.value.cols();
                self.acc(grads, *planes, |dp| kernels::triplane_backward_planes(pts, *res, d, g, dp));
                self.acc(grads, *points, |dx| kernels::triplane_backward_points(pv, *res, d, pts, g, dx));
            }
            Op::Composite { density, rgb, spec } => {
                let (dv, cv) = (self.value(*density).data(), self.value(*rgb).data());
                let out = node.value.data();
                let (gd, gc) = kernels::composite_backward(dv, cv, out, g, spec);
                self.acc(grads, *density, |d| d.iter_mut().zip(&gd).for_each(|(o, v)| *o += v));
                self.acc(grads, *rgb, |d| d.iter_mut().zip(&gc).for_each(|(o, v)| *o += v));
            }
            Op::Normals { density, spec } => {
                let dv = self.value(*density).data();
                self.acc(grads, *density, |d| kernels::normals_backward(dv, g, spec, d));
            }
            Op::Pool2 { x, h, w } => {
                let c = node.value.numel() / ((h / 2) * (w / 2));
                self.acc(grads, *x, |d| kernels::pool2_backward(g, *h, *w, c, d));
            }
            Op::Upsample2 { x, h, w } => {
                let c = node.value.numel() / (4 * h * w);
                self.acc(grads, *x, |d| kernels::upsample2_backward(g, *h, *w, c, d));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.nodes[v.0].grad {
            accumulate(&mut grads[v.0], self.nodes[v.0].value.shape(), f);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_fwd(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Silu => x * sigmoid(x),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
        Unary::Softplus => softplus(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
    }
}

fn unary_grad(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let th = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        }
        Unary::Softplus => sigmoid(x),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Square => 2.0 * x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_subgraphs_record_no_backward_state() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([2], vec![1.0, 2.0]));
        let b = g.constant(Tensor::new([2], vec![3.0, 4.0]));
        let c = g.mul(a, b);
        assert!(!g.requires_grad(c));
        assert_eq!(g.value(c).data(), &[3.0, 8.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::new([2], vec![1.5, -2.0]));
        let b = g.constant(Tensor::new([2], vec![3.0, 4.0]));
        let c = g.mul(a, a);
        let d = g.mul(c, b);
        let s = g.sum(d);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().data(), &[2.0 * 1.5 * 3.0, 2.0 * -2.0 * 4.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(2.0));
        let b = g.detach(a);
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert_eq!(grads.get(a).unwrap().item(), 2.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
