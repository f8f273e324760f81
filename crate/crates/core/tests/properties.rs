use proptest::prelude::*;

use georefine::autograd::CompositeSpec;
use georefine::checkpoint::{Checkpoint, Stage};
use georefine::config::RunConfig;
use georefine::kernels::composite_weights;
use georefine::metrics::{decode_normals, encode_normals, perceptual_distance, psnr, ssim, PSNR_CAP};
use georefine::model::Ablation;
use georefine::selftest::tiny_model;
use georefine::train::{cosine_lr, TrainConfig};

const RES: usize = 16;

fn image() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, RES * RES * 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psnr_of_constant_offset(img in prop::collection::vec(0.0..0.5f64, RES * RES * 3), c in 0.001..0.5f64) {
        let shifted: Vec<f64> = img.iter().map(|v| v + c).collect();
        let want = -20.0 * c.log10();
        prop_assert!((psnr(&img, &shifted).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_capped(a in image(), b in image()) {
        let ab = psnr(&a, &b).unwrap();
        prop_assert_eq!(ab, psnr(&b, &a).unwrap());
        prop_assert!(ab <= PSNR_CAP);
        prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image(), b in image()) {
        let ab = ssim(&a, &b, RES, 3).unwrap();
        prop_assert!((ab - ssim(&b, &a, RES, 3).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ssim(&a, &a, RES, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perceptual_is_a_symmetric_distance(a in image(), b in image()) {
        let ab = perceptual_distance(&a, &b, RES, 3).unwrap();
        prop_assert_eq!(ab, perceptual_distance(&b, &a, RES, 3).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(perceptual_distance(&a, &a, RES, 3).unwrap(), 0.0);
    }

    #[test]
    fn normal_encoding_round_trips(v in prop::collection::vec(-1.0..1.0f64, 3), covered in any::<bool>()) {
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        prop_assume!(len > 1e-3);
        let n: Vec<f64> = v.iter().map(|c| c / len).collect();
        let enc = encode_normals(&n, &[if covered { 1.0 } else { 0.0 }]);
        if covered {
            let back = decode_normals(&enc);
            for (x, y) in n.iter().zip(&back) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        } else {
            prop_assert_eq!(enc, vec![1.0; 3]);
        }
    }

    #[test]
    fn weights_and_transmittance_sum_to_one(dens in prop::collection::vec(0.0..50.0f64, 16), delta in 0.01..0.5f64) {
        let t: Vec<f64> = (0..16).map(|i| 1.0 + delta * (i as f64 + 0.5)).collect();
        let spec = CompositeSpec { rays: 1, samples: 16, t, delta, background: [1.0; 3] };
        let (w, residual) = composite_weights(&dens, &spec);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() + residual[0] - 1.0).abs() < 1e-12);
        let optical: f64 = dens.iter().map(|d| d * delta).sum();
        prop_assert!((residual[0] - (-optical).exp()).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_stays_in_range(base in 1e-5..1e-1f64, total in 1usize..500, step in 0usize..500) {
        let lr = cosine_lr(base, step.min(total), total);
        prop_assert!(lr >= -1e-15 && lr <= base + 1e-15);
    }

    #[test]
    fn config_overrides_round_trip(lr in 1e-5..1e-1f64, unroll in 1usize..6, samples in 8usize..64) {
        let cfg = RunConfig::default()
            .with_overrides(&[
                ("train.lr".into(), format!("{lr:e}")),
                ("train.unroll".into(), unroll.to_string()),
                ("model.samples".into(), samples.to_string()),
            ])
            .unwrap();
        prop_assert_eq!(cfg.train.lr, lr);
        prop_assert_eq!(cfg.train.unroll, unroll);
        prop_assert_eq!(cfg.model.samples, samples);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, refined in any::<bool>()) {
        let mut model = tiny_model(seed).unwrap();
        if refined {
            model.attach_refiner(Ablation::None, seed).unwrap();
        }
        let stage = if refined { Stage::Refiner } else { Stage::Baseline };
        let ck = Checkpoint::from_model(&model, stage, 7, &TrainConfig::default(), "cfg", "data", vec!["a".into()]);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        prop_assert!(back.params == ck.params);
        prop_assert!(back.header == ck.header);
        prop_assert_eq!(back.model().backbone_hash(), ck.model().backbone_hash());
    }
}
