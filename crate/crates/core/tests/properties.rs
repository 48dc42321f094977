use proptest::prelude::*;

use semise_core::evalkit::{f1_recall_macro, iou_dice, maee, ConfusionTally};
use semise_core::losses::{
    combined_loss, margin_contrastive_loss, nt_xent_loss, preference_loss, CombinedWeight, LabeledPairBatch,
    PreferenceBatch, ViewBatch,
};
use semise_core::ndcore::{cosine_distance, DenseArray, Rng};
use semise_core::synthdata::{augment, decode_dataset, encode_dataset, generate_dataset, AugmentSpec};

const DIM: usize = 4;

/// Rows bounded away from zero norm.
fn rows(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, DIM), n).prop_filter("nonzero rows", |r| {
        r.iter().all(|row| row.iter().map(|v| v * v).sum::<f64>() > 1e-3)
    })
}

fn arr(r: &[Vec<f64>]) -> DenseArray {
    DenseArray::from_rows(r).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn margin_loss_scale_invariant(
        (left, right, labels) in (1usize..6).prop_flat_map(|n| (rows(n), rows(n), prop::collection::vec(0u8..2, n))),
        row in 0usize..6,
        c in 0.01..100.0f64,
        margin in 0.1..2.0f64,
    ) {
        let base = LabeledPairBatch { left: arr(&left), right: arr(&right), labels, margin };
        let mut scaled = base.clone();
        let r = row % left.len();
        for v in scaled.left.row_mut(r) {
            *v *= c;
        }
        let a = margin_contrastive_loss(&base).unwrap().value;
        let b = margin_contrastive_loss(&scaled).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }

    #[test]
    fn nt_xent_pair_permutation_invariant(
        views in (1usize..6).prop_flat_map(|n| rows(2 * n)),
        seed in any::<u64>(),
        tau in 0.1..2.0f64,
    ) {
        use rand::seq::SliceRandom;
        let n = views.len() / 2;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut Rng::new(seed));
        let permuted: Vec<Vec<f64>> = order.iter().flat_map(|&k| [views[2 * k].clone(), views[2 * k + 1].clone()]).collect();
        let a = nt_xent_loss(&ViewBatch { views: arr(&views), temperature: tau }).unwrap();
        let b = nt_xent_loss(&ViewBatch { views: arr(&permuted), temperature: tau }).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0));
        // Gradients follow the rows they belong to.
        for (dst, &k) in order.iter().enumerate() {
            for v in 0..2 {
                let ga = a.grad_views.row(2 * k + v);
                let gb = b.grad_views.row(2 * dst + v);
                for (x, y) in ga.iter().zip(gb) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn preference_label_swap_symmetric(
        (nu_i, nu_j, labels) in (1usize..6).prop_flat_map(|n| (rows(n), rows(n), prop::collection::vec(0u8..2, n))),
        pi0 in rows(1),
    ) {
        let pi0 = DenseArray::vector(pi0[0].clone());
        let a = preference_loss(&PreferenceBatch {
            nu_i: arr(&nu_i), nu_j: arr(&nu_j), pi0: pi0.clone(), labels: labels.clone(),
        }).unwrap();
        let b = preference_loss(&PreferenceBatch {
            nu_i: arr(&nu_j), nu_j: arr(&nu_i), pi0, labels: labels.iter().map(|y| 1 - y).collect(),
        }).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12);
    }

    #[test]
    fn preference_decreases_with_distance_gap(
        pi0 in rows(1),
        base in rows(1),
        far in rows(1),
        t in 0.05..1.0f64,
    ) {
        // nu_i slides from `base` towards `far`; whenever that raises its
        // distance to pi0, the y = 1 loss must fall.
        let pi0v = DenseArray::vector(pi0[0].clone());
        let nu_j = arr(&base);
        let mix: Vec<f64> = base[0].iter().zip(&far[0]).map(|(b, f)| b + t * (f - b)).collect();
        prop_assume!(mix.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let d0 = cosine_distance(&base[0], &pi0[0]).unwrap();
        let d1 = cosine_distance(&mix, &pi0[0]).unwrap();
        prop_assume!((d1 - d0).abs() > 1e-9);
        let loss = |nu_i: &[f64]| preference_loss(&PreferenceBatch {
            nu_i: arr(&[nu_i.to_vec()]), nu_j: nu_j.clone(), pi0: pi0v.clone(), labels: vec![1],
        }).unwrap().value;
        let (l0, l1) = (loss(&base[0]), loss(&mix));
        if d1 > d0 {
            prop_assert!(l1 < l0, "gap up but loss {l0} -> {l1}");
        } else {
            prop_assert!(l1 > l0, "gap down but loss {l0} -> {l1}");
        }
    }

    #[test]
    fn combined_linear_in_alpha(
        views in rows(4),
        (nu_i, nu_j) in (rows(3), rows(3)),
        pi0 in rows(1),
        a1 in 0.0..=1.0f64,
        a2 in 0.0..=1.0f64,
        lambda in 0.0..=1.0f64,
    ) {
        let nt = nt_xent_loss(&ViewBatch { views: arr(&views), temperature: 0.5 }).unwrap();
        let pro = preference_loss(&PreferenceBatch {
            nu_i: arr(&nu_i), nu_j: arr(&nu_j), pi0: DenseArray::vector(pi0[0].clone()), labels: vec![1, 0, 1],
        }).unwrap();
        let at = |a: f64| combined_loss(&nt, &pro, CombinedWeight::new(a).unwrap()).value;
        let mid = lambda * a1 + (1.0 - lambda) * a2;
        let lhs = at(mid);
        let rhs = lambda * at(a1) + (1.0 - lambda) * at(a2);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn f1_recall_invariant_under_class_relabeling(
        (k, truth, pred) in (2usize..6).prop_flat_map(|k| {
            (1usize..40).prop_flat_map(move |n| (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)))
        }),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut Rng::new(seed));
        let a = f1_recall_macro(&ConfusionTally::from_predictions(k, &truth, &pred).unwrap()).unwrap();
        let pt: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let b = f1_recall_macro(&ConfusionTally::from_predictions(k, &pt, &pp).unwrap()).unwrap();
        prop_assert!((a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12);
    }

    #[test]
    fn iou_dice_symmetric_and_related(
        (h, w, p, t) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0u8..2, h * w), prop::collection::vec(0u8..2, h * w))
        }),
    ) {
        let m = |v: &[u8]| DenseArray::new(vec![h, w], v.iter().map(|&b| b as f64).collect()).unwrap();
        let (pm, tm) = (m(&p), m(&t));
        let (iou, dice) = iou_dice(&pm, &tm).unwrap();
        prop_assert_eq!(iou_dice(&tm, &pm).unwrap(), (iou, dice));
        prop_assert!(dice >= iou);
        prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
    }

    #[test]
    fn maee_translation_invariant(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40),
        offset in 0usize..5,
    ) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let shift = |v: &[usize]| v.iter().map(|x| x + offset).collect::<Vec<_>>();
        prop_assert_eq!(maee(&t, &p).unwrap(), maee(&shift(&t), &shift(&p)).unwrap());
    }

    #[test]
    fn cosine_distance_self_zero_and_symmetric(u in rows(1), v in rows(1)) {
        prop_assert!(cosine_distance(&u[0], &u[0]).unwrap().abs() <= 1e-15);
        prop_assert_eq!(cosine_distance(&u[0], &v[0]).unwrap(), cosine_distance(&v[0], &u[0]).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trips(per_class in 1usize..4, classes in 2usize..6, side in 1usize..4, seed in any::<u64>()) {
        let d = generate_dataset(per_class, classes, 8 * side, 8, seed).unwrap();
        let bytes = encode_dataset(&d).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn augmentation_stays_in_bounds(seed in any::<u64>(), draw in any::<u64>()) {
        let d = generate_dataset(1, 5, 16, 16, seed).unwrap();
        let spec = AugmentSpec::new(seed ^ 1);
        for r in &d.records {
            let img = augment(&spec, r, draw);
            prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
