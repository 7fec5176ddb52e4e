use hcd_core::hcd::{
    concat_sub_logits, decompose, fuse_teacher, kl_div, mask_ground_truth, orth_loss, FusionMode,
};
use hcd_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sub_grid(l: usize, n: usize, b: usize, k: usize) -> impl Strategy<Value = Vec<Vec<Tensor>>> {
    // offsetting away from zero keeps every row norm positive
    prop::collection::vec(
        prop::collection::vec(
            matrix(b, k).prop_map(|t| {
                let d = t.data().iter().map(|v| v + 0.1f64.copysign(*v)).collect();
                Tensor::new(t.shape().to_vec(), d).unwrap()
            }),
            n,
        ),
        l,
    )
}

fn orth_value(sub: &[Vec<Tensor>], theta: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Vec<_>> = sub
        .iter()
        .map(|s| s.iter().map(|t| g.constant(t.clone())).collect())
        .collect();
    let out = orth_loss(&mut g, &vars, theta).unwrap();
    g.value(out).item()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(z in matrix(3, 7), tau in 0.2f64..8.0) {
        let mut g = Graph::new();
        let v = g.constant(z);
        let p = g.softmax_t(v, tau).unwrap();
        for r in 0..3 {
            let row = g.value(p).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(a in matrix(2, 5), b in matrix(2, 5), tau in 0.5f64..6.0) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let self_kl = kl_div(&mut g, va, va, tau).unwrap();
        let kl = kl_div(&mut g, va, vb, tau).unwrap();
        prop_assert!(g.value(self_kl).item().abs() <= 1e-12);
        prop_assert!(g.value(kl).item() >= -1e-12);
    }

    #[test]
    fn orth_is_permutation_invariant(
        sub in sub_grid(2, 4, 3, 5),
        theta in 0.0f64..1.0,
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let permuted: Vec<Vec<Tensor>> = sub
            .iter()
            .map(|s| perm.iter().map(|&j| s[j].clone()).collect())
            .collect();
        let (a, b) = (orth_value(&sub, theta), orth_value(&permuted, theta));
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn orth_is_scale_invariant(
        sub in sub_grid(1, 3, 2, 4),
        theta in 0.0f64..1.0,
        c in 0.01f64..100.0,
        which in 0usize..3,
    ) {
        let mut scaled = sub.clone();
        let t = &scaled[0][which];
        scaled[0][which] =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
        let (a, b) = (orth_value(&sub, theta), orth_value(&scaled, theta));
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn orth_is_bounded(sub in sub_grid(2, 3, 2, 4), theta in 0.0f64..1.0) {
        let v = orth_value(&sub, theta);
        prop_assert!(v >= 0.0 && v <= (1.0 - theta) * (1.0 - theta) + 1e-12);
    }

    #[test]
    fn decompose_concat_round_trip(n in 1usize..6, k in 1usize..6, b in 1usize..4, seed in any::<u64>()) {
        let data: Vec<f64> = (0..b * n * k)
            .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0 - 50.0)
            .collect();
        let z = Tensor::new(vec![b, n * k], data).unwrap();
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let parts = decompose(&mut g, v, n, k).unwrap();
        prop_assert_eq!(parts.len(), n);
        let back = concat_sub_logits(&mut g, &parts).unwrap();
        prop_assert_eq!(g.value(back).data(), z.data());
    }

    #[test]
    fn add_and_unit_weighted_fusion_agree_bitwise(z in matrix(3, 6), zt in matrix(3, 6)) {
        let mut g = Graph::new();
        let (a, b) = (g.constant(z), g.constant(zt));
        let x = fuse_teacher(&mut g, a, b, FusionMode::Add).unwrap();
        let y = fuse_teacher(&mut g, a, b, FusionMode::Weighted { l3: 1.0, l4: 1.0 }).unwrap();
        let (xd, yd) = (g.value(x).data(), g.value(y).data());
        prop_assert!(xd.iter().zip(yd).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn mask_touches_only_the_label(z in matrix(4, 5), labels in prop::collection::vec(0usize..5, 4)) {
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let m = mask_ground_truth(&mut g, v, &labels, 1e-6).unwrap();
        let out = g.value(m);
        for r in 0..4 {
            for k in 0..5 {
                let got = out.row(r)[k];
                if k == labels[r] {
                    prop_assert_eq!(got, -1e-6);
                } else {
                    prop_assert_eq!(got.to_bits(), z.row(r)[k].to_bits());
                }
            }
        }
    }
}
