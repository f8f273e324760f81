//! Small building blocks checked against hand-computed values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use georefine::autograd::Graph;
use georefine::encoders::{TokenGrid, TokenKind};
use georefine::geofuser::{FusionMode, FusionNetwork};
use georefine::nn;
use georefine::params::{ParamStore, ParamVars};
use georefine::scenekit::CameraPose;
use georefine::tensor::Tensor;
use georefine::triplane::{decode_triplane, init_decoder, DecoderConfig};

fn random(r: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
    Tensor::new(shape, (0..shape[0] * shape[1]).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (n, k, m) = (x.rows(), w.rows(), w.cols());
    (0..n)
        .map(|i| (0..m).map(|j| b.data()[j] + (0..k).map(|t| x.row(i)[t] * w.row(t)[j]).sum::<f64>()).collect())
        .collect()
}

#[test]
fn attention_matches_naive_loops() {
    let (d, heads, nq, nk) = (6, 2, 3, 5);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    for p in ["q", "k", "v", "o"] {
        store.insert(format!("att.{p}.w"), random(&mut r, [d, d]));
        store.insert(format!("att.{p}.b"), Tensor::new([d], (0..d).map(|_| r.gen_range(-0.5..0.5)).collect()));
    }
    let xq = random(&mut r, [nq, d]);
    let xc = random(&mut r, [nk, d]);

    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &store, |_| false);
    let qv = g.constant(xq.clone());
    let cv = g.constant(xc.clone());
    let out = nn::attention(&mut g, &pv, "att", qv, cv, heads);
    let got = g.value(out).clone();

    let p = |n: &str| (store.get(&format!("att.{n}.w")).unwrap().clone(), store.get(&format!("att.{n}.b")).unwrap().clone());
    let ((wq, bq), (wk, bk), (wv, bv), (wo, bo)) = (p("q"), p("k"), p("v"), p("o"));
    let q = affine(&xq, &wq, &bq);
    let k = affine(&xc, &wk, &bk);
    let v = affine(&xc, &wv, &bv);
    let dh = d / heads;
    let mut mixed = vec![vec![0.0; d]; nq];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..nq {
            let scores: Vec<f64> = (0..nk)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                mixed[i][c] = (0..nk).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let mixed = Tensor::new([nq, d], mixed.concat());
    let want = affine(&mixed, &wo, &bo).concat();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn fusion_scalar_case() {
    // fc1 sums the two inputs, fc2 halves: 1 + 0.5 * silu(1 + 2)
    let mut store = ParamStore::new();
    let mut r = georefine::util::rng(0);
    let net = FusionNetwork::new(&mut store, &mut r, FusionMode::Residual, 1, 1);
    store.insert("fuser.fc1.w", Tensor::new([2, 1], vec![1.0, 1.0]));
    store.insert("fuser.fc1.b", Tensor::new([1], vec![0.0]));
    store.insert("fuser.fc2.w", Tensor::new([1, 1], vec![0.5]));
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &store, |_| false);
    let sem = TokenGrid { tokens: g.constant(Tensor::new([1, 1], vec![1.0])), view: 0, kind: TokenKind::Semantic };
    let geo = TokenGrid { tokens: g.constant(Tensor::new([1, 1], vec![2.0])), view: 0, kind: TokenKind::Geometric };
    let out = net.fuse(&mut g, &pv, sem, geo).unwrap();
    let sigmoid = 1.0 / (1.0 + (-3.0f64).exp());
    let want = 1.0 + 0.5 * 3.0 * sigmoid;
    assert!((g.value(out.tokens).item() - want).abs() < 1e-12);
}

#[test]
fn fresh_fusion_passes_semantic_tokens_through() {
    let mut store = ParamStore::new();
    let mut r = georefine::util::rng(4);
    let net = FusionNetwork::new(&mut store, &mut r, FusionMode::Residual, 8, 16);
    let mut cr = ChaCha8Rng::seed_from_u64(2);
    let s = random(&mut cr, [5, 8]);
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &store, |_| false);
    let sem = TokenGrid { tokens: g.constant(s.clone()), view: 0, kind: TokenKind::Semantic };
    let geo = TokenGrid { tokens: g.constant(random(&mut cr, [5, 8])), view: 0, kind: TokenKind::Geometric };
    let out = net.fuse(&mut g, &pv, sem, geo).unwrap();
    assert_eq!(g.value(out.tokens).data(), s.data());
}

#[test]
fn decoder_ignores_view_order() {
    let cfg = DecoderConfig { res: 3, dim: 8, depth: 1, heads: 2 };
    let mut store = ParamStore::new();
    init_decoder(&mut store, &mut georefine::util::rng(9), &cfg);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut r, [4, 8]);
    let b = random(&mut r, [4, 8]);
    let planes = |first: &Tensor, second: &Tensor| {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, &store, |_| false);
        let views = [
            TokenGrid { tokens: g.constant(first.clone()), view: 0, kind: TokenKind::Semantic },
            TokenGrid { tokens: g.constant(second.clone()), view: 1, kind: TokenKind::Semantic },
        ];
        let p = decode_triplane(&mut g, &pv, &cfg, &views).unwrap();
        g.value(p).data().to_vec()
    };
    let ab = planes(&a, &b);
    let ba = planes(&b, &a);
    assert_eq!(ab.len(), 3 * 3 * 3 * 8);
    for (x, y) in ab.iter().zip(&ba) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new([2], vec![1.5, -2.0]));
    let d = g.detach(x);
    let y = g.mul(x, d);
    let loss = g.sum(y);
    let grads = g.backward(loss);
    // d/dx sum(x * stop(x)) = stop(x)
    assert_eq!(grads.get(x).unwrap().data(), &[1.5, -2.0]);
}

#[test]
fn orbit_cameras_look_at_the_origin() {
    for (az, el) in [(0.0, 0.0), (45.0, 30.0), (300.0, -60.0)] {
        let cam = CameraPose::orbit(az, el, 2.0, 40.0).unwrap();
        assert!(cam.orthonormality_error() < 1e-12);
        assert!((cam.distance() - 2.0).abs() < 1e-12);
        let f = cam.forward();
        let to_origin = cam.position.map(|c| -c / 2.0);
        for a in 0..3 {
            assert!((f[a] - to_origin[a]).abs() < 1e-12);
        }
        // the principal ray points at the origin too
        let res = 8;
        let c = cam.ray_dir(4, 4, res);
        for a in 0..3 {
            assert!((c[a] - to_origin[a]).abs() < 1e-9);
        }
    }
}
