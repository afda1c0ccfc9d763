//! Property tests for the numeric invariants of the core crate.

use proptest::prelude::*;

use pillarq_core::calib::{
    build_histogram, entropy_threshold, grid_search_scale, kl_divergence, maxmin_range, quant_sq_error, SearchConfig,
};
use pillarq_core::detector::{bev_iou, nms_bev, pillarize, Box3D, GridConfig, PointCloud};
use pillarq_core::eval::evaluate;
use pillarq_core::nn::{batchnorm_forward, conv2d_forward, fold_batchnorm};
use pillarq_core::quant::{fake_quant, scale_from_range, QuantParams, RoundingOffsets};
use pillarq_core::Tensor;

fn vec1(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::from_vec(&[n], v).unwrap()
}

fn bits() -> impl Strategy<Value = u32> {
    prop_oneof![Just(4u32), Just(8u32)]
}

fn boxes(max: usize) -> impl Strategy<Value = Vec<Box3D>> {
    prop::collection::vec((-25.0..25.0f64, -25.0..25.0f64, 0.5..5.0f64, 0.5..5.0f64, 0.0..1.0f64, 0usize..2), 0..max)
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (x, y, w, l, s, cls))| Box3D {
                    x,
                    y,
                    z: 0.0,
                    h: 1.5,
                    w,
                    l,
                    yaw: 0.0,
                    cls,
                    // distinct scores keep the ranking unambiguous
                    score: s * 0.5 + i as f64 * 1e-3,
                })
                .collect()
        })
}

proptest! {
    #[test]
    fn round_trip_within_half_step(xs in prop::collection::vec(-1.0..1.0f64, 1..64), t in 0.1..10.0f64, b in bits()) {
        let p = scale_from_range(-t, t, b).unwrap();
        let (lo, hi) = p.bounds();
        let x = vec1(xs.iter().map(|v| v * t).collect());
        let y = fake_quant(&x, &p, None).unwrap();
        for (&a, &q) in x.data().iter().zip(y.data()) {
            if a >= lo && a <= hi {
                prop_assert!((a - q).abs() <= p.scale / 2.0 + 1e-12 * t);
            }
        }
    }

    #[test]
    fn out_of_range_clips_to_bounds(v in 1.0..100.0f64, s in 0.01..1.0f64, b in bits()) {
        let p = QuantParams::symmetric(s, b).unwrap();
        let (lo, hi) = p.bounds();
        let x = vec1(vec![hi + v * s, lo - v * s]);
        let y = fake_quant(&x, &p, None).unwrap();
        prop_assert_eq!(y.data(), &[hi, lo][..]);
    }

    #[test]
    fn fake_quant_is_idempotent(xs in prop::collection::vec(-50.0..50.0f64, 1..64), s in 0.01..2.0f64, b in bits()) {
        let p = QuantParams::symmetric(s, b).unwrap();
        let once = fake_quant(&vec1(xs), &p, None).unwrap();
        let twice = fake_quant(&once, &p, None).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn zero_offsets_equal_plain_rounding(xs in prop::collection::vec(-50.0..50.0f64, 1..64), s in 0.01..2.0f64, b in bits()) {
        let p = QuantParams::symmetric(s, b).unwrap();
        let x = vec1(xs);
        let theta = RoundingOffsets::zeros(x.shape());
        prop_assert_eq!(fake_quant(&x, &p, Some(&theta)).unwrap(), fake_quant(&x, &p, None).unwrap());
    }

    #[test]
    fn fake_quant_is_monotone(a in -50.0..50.0f64, d in 0.0..10.0f64, s in 0.01..2.0f64, b in bits()) {
        let p = QuantParams::symmetric(s, b).unwrap();
        let y = fake_quant(&vec1(vec![a, a + d]), &p, None).unwrap();
        prop_assert!(y.data()[0] <= y.data()[1]);
    }

    #[test]
    fn kl_is_nonnegative(p in prop::collection::vec(0.0..1.0f64, 2..32), q in prop::collection::vec(0.01..1.0f64, 32)) {
        let q = &q[..p.len()];
        let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        prop_assume!(sp > 0.0);
        let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
        let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn maxmin_is_scale_equivariant(xs in prop::collection::vec(-10.0..10.0f64, 1..64), c in 0.1..10.0f64) {
        prop_assume!(xs.iter().any(|v| *v != 0.0));
        let (lo, hi) = maxmin_range(&xs).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|v| v * c).collect();
        let (slo, shi) = maxmin_range(&scaled).unwrap();
        prop_assert!((slo - c * lo).abs() <= 1e-12 * shi.abs());
        prop_assert!((shi - c * hi).abs() <= 1e-12 * shi.abs());
    }

    #[test]
    fn grid_search_never_worse_than_maxmin(xs in prop::collection::vec(-10.0..10.0f64, 1..200), b in bits()) {
        let (lo, hi) = maxmin_range(&xs).unwrap();
        prop_assume!(hi > 1e-6);
        let r = grid_search_scale(&xs, b, &SearchConfig::default()).unwrap();
        let mm = scale_from_range(lo, hi, b).unwrap();
        prop_assert!(r.mse <= quant_sq_error(&xs, &mm));
    }

    #[test]
    fn entropy_threshold_within_histogram(xs in prop::collection::vec(-10.0..10.0f64, 10..400)) {
        let h = build_histogram(&xs, 512).unwrap();
        let r = entropy_threshold(&h, 8).unwrap();
        let top = h.n_bins() as f64 * h.bin_width;
        prop_assert!(r.threshold > 0.0 && r.threshold <= top + h.bin_width);
    }

    #[test]
    fn folded_conv_matches_batchnorm(seed in any::<u64>()) {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let (o, i) = (3, 2);
        let w = Tensor::from_vec(&[o, i, 3, 3], (0..o * i * 9).map(|_| next()).collect()).unwrap();
        let b = Tensor::from_vec(&[o], (0..o).map(|_| next()).collect()).unwrap();
        let gamma: Vec<f64> = (0..o).map(|_| next() + 1.5).collect();
        let beta: Vec<f64> = (0..o).map(|_| next()).collect();
        let mean: Vec<f64> = (0..o).map(|_| next()).collect();
        let var: Vec<f64> = (0..o).map(|_| next().abs() + 0.1).collect();
        let x = Tensor::from_vec(&[1, i, 5, 5], (0..i * 25).map(|_| next()).collect()).unwrap();
        let (fw, fb) = fold_batchnorm(&w, &b, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        let want = batchnorm_forward(&conv2d_forward(&x, &w, b.data(), 1, 1).unwrap(), &gamma, &beta, &mean, &var, 1e-5).unwrap();
        let got = conv2d_forward(&x, &fw, fb.data(), 1, 1).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn pillarize_ignores_point_order(pts in prop::collection::vec((-30.0..30.0f32, -30.0..30.0f32, -1.0..2.0f32, 0.0..1.0f32), 1..200), rot in 0usize..200) {
        let cfg = GridConfig { voxel_size: 2.0, ..GridConfig::default() };
        let mut points: Vec<[f32; 4]> = pts.iter().map(|&(x, y, z, r)| [x, y, z, r]).collect();
        let a = pillarize(&PointCloud { points: points.clone() }, &cfg);
        let k = rot % points.len();
        points.rotate_left(k);
        points.reverse();
        let b = pillarize(&PointCloud { points }, &cfg);
        prop_assert_eq!(&a.occupancy, &b.occupancy);
        for (u, v) in a.features.data().iter().zip(b.features.data()) {
            prop_assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0));
        }
    }

    #[test]
    fn nms_output_is_sparse_subset(bs in boxes(30), thr in 0.05..0.9f64) {
        let kept = nms_bev(&bs, thr);
        for k in &kept {
            prop_assert!(bs.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            // suppression is class-agnostic
            for b in &kept[i + 1..] {
                prop_assert!(bev_iou(a, b) < thr);
            }
        }
    }

    #[test]
    fn evaluation_ignores_prediction_order(preds in boxes(20), gts in boxes(10)) {
        let gts: Vec<Box3D> = gts.into_iter().map(|b| Box3D { score: 1.0, ..b }).collect();
        let a = evaluate(std::slice::from_ref(&preds), std::slice::from_ref(&gts), 0.3, 2).unwrap();
        let mut rev = preds;
        rev.reverse();
        let b = evaluate(&[rev], &[gts], 0.3, 2).unwrap();
        prop_assert_eq!(a.range_gt.iter().sum::<usize>(), a.per_class.iter().map(|c| c.gt).sum::<usize>());
        prop_assert_eq!(a, b);
    }
}
