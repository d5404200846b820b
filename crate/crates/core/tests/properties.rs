use dlsa::data::{decode_dataset, encode_dataset, FeatureDataset};
use dlsa::gmm::GaussianMixtureLatent;
use dlsa::losses::{balance_loss, class_weights};
use dlsa::matrix::Matrix;
use dlsa::metrics::{binned_confusion, cluster_purity, mcc, nmi, NmiNormalization};
use proptest::prelude::*;

fn prob_vector(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn labelings(max_c: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..60).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..max_c, n),
            prop::collection::vec(0..max_c, n),
        )
    })
}

fn permutation(c: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..c).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn balance_loss_stays_in_range(p in (2usize..12).prop_flat_map(prob_vector)) {
        let k = p.len() as f64;
        let l = balance_loss(&p);
        prop_assert!(l >= -k.ln() - 1e-12 && l <= 1e-12);
        let uniform = vec![1.0 / k; p.len()];
        prop_assert!((balance_loss(&uniform) + k.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_weights_decrease_with_count(mut counts in prop::collection::vec(1usize..1000, 2..10), q in 0.5f64..4.0) {
        counts.sort_unstable();
        counts.dedup();
        prop_assume!(counts.len() >= 2);
        let w = class_weights::<f64>(&counts, q).unwrap();
        for pair in w.as_slice().windows(2) {
            prop_assert!(pair[0] > pair[1]);
        }
    }

    #[test]
    fn mcc_symmetric_under_joint_relabeling((preds, labels) in labelings(5), perm in permutation(5)) {
        let a = mcc(&preds, &labels).unwrap();
        let pp: Vec<usize> = preds.iter().map(|&y| perm[y]).collect();
        let pl: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        prop_assert!((a - mcc(&pp, &pl).unwrap()).abs() < 1e-12);
        if labels.iter().any(|&y| y != labels[0]) {
            prop_assert_eq!(mcc(&labels, &labels).unwrap(), 1.0);
        }
    }

    #[test]
    fn nmi_invariant_under_relabeling((a, b) in labelings(6), pa in permutation(6), pb in permutation(6)) {
        for norm in [NmiNormalization::Geometric, NmiNormalization::Arithmetic] {
            let base = nmi(&a, &b, norm).unwrap();
            let ra: Vec<usize> = a.iter().map(|&y| pa[y]).collect();
            let rb: Vec<usize> = b.iter().map(|&y| pb[y]).collect();
            prop_assert!((base - nmi(&ra, &rb, norm).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }

    #[test]
    fn purity_never_below_majority_floor((assign, labels) in labelings(4)) {
        let p = cluster_purity(&assign, &labels).unwrap();
        let mut counts = [0usize; 4];
        for &y in &labels {
            counts[y] += 1;
        }
        let floor = *counts.iter().max().unwrap() as f64 / labels.len() as f64;
        prop_assert!(p.mean >= floor - 1e-12);
    }

    #[test]
    fn binned_confusion_mass_equals_errors((preds, labels) in labelings(8), counts in prop::collection::vec(1usize..50, 8), bins in 2usize..=8) {
        let m = binned_confusion(&preds, &labels, &counts, bins).unwrap();
        let mass: u64 = m.iter().flatten().sum();
        let errors = preds.iter().zip(&labels).filter(|(p, y)| p != y).count() as u64;
        prop_assert_eq!(mass, errors);
    }

    #[test]
    fn posterior_sums_to_one_and_is_translation_invariant(
        centers in prop::collection::vec(-3.0f64..3.0, 12),
        z in prop::collection::vec(-5.0f64..5.0, 3),
        shift in prop::collection::vec(-50.0f64..50.0, 3),
    ) {
        let m = GaussianMixtureLatent::from_centers(Matrix::from_vec(4, 3, centers.clone()).unwrap()).unwrap();
        let post = m.posterior(&z).unwrap();
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = centers.iter().enumerate().map(|(i, c)| c + shift[i % 3]).collect();
        let ms = GaussianMixtureLatent::from_centers(Matrix::from_vec(4, 3, shifted).unwrap()).unwrap();
        let zs: Vec<f64> = z.iter().zip(&shift).map(|(a, b)| a + b).collect();
        prop_assert!((m.latent_logpdf(&z).unwrap() - ms.latent_logpdf(&zs).unwrap()).abs() < 1e-12);
        for (a, b) in post.iter().zip(ms.posterior(&zs).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_files_round_trip(
        (dim, c, n) in (1usize..6, 2usize..6, 1usize..40),
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 33
        };
        let features: Vec<f32> = (0..n * dim).map(|_| (next() as f32 / 1e9) - 2.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| next() as usize % c).collect();
        let ds = FeatureDataset::new(dim, c, features, labels).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back), bytes);
    }
}

#[test]
fn latent_logpdf_finite_far_away() {
    let m = dlsa::gmm::init_centers::<f64>(8, 64, None, 1).unwrap();
    let z = vec![1e3 / 8.0; 64];
    let v = m.latent_logpdf(&z).unwrap();
    assert!(v.is_finite() && v < -1e5);
    assert!((m.posterior(&z).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
