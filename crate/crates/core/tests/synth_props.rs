use proptest::prelude::*;
use uniseg_lab::labelspace::IGNORE;
use uniseg_lab::synth::{default_fixture, generate, COARSE, FINE};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labels_are_coarsened_fine_truth(seed in any::<u64>(), h in 4usize..24, w in 4usize..24) {
        let (spec, _) = default_fixture();
        for id in [COARSE, FINE] {
            let table = spec.coarsen_table(id).unwrap();
            for s in generate(&spec, id, 2, h, w, seed).unwrap() {
                prop_assert_eq!(s.features.height, h);
                prop_assert_eq!(s.features.width, w);
                for (&y, &f) in s.labels.values.iter().zip(&s.fine_truth.values) {
                    prop_assert!(f != IGNORE);
                    prop_assert_eq!(y, table[f as usize]);
                }
            }
        }
    }
}

#[test]
fn zero_noise_gives_cluster_means() {
    let (mut spec, _) = default_fixture();
    spec.cluster_std = 0.0;
    for s in generate(&spec, FINE, 3, 12, 12, 4).unwrap() {
        for (p, &f) in s.fine_truth.values.iter().enumerate() {
            assert_eq!(s.features.pixel(p), spec.cluster_means[f as usize].as_slice());
        }
    }
}

#[test]
fn class_means_converge() {
    let (spec, _) = default_fixture();
    let samples = generate(&spec, FINE, 64, 16, 16, 0).unwrap();
    let k = spec.fine_classes.len();
    let d = spec.feature_dim;
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for s in &samples {
        for (p, &f) in s.fine_truth.values.iter().enumerate() {
            counts[f as usize] += 1;
            for (acc, x) in sums[f as usize].iter_mut().zip(s.features.pixel(p)) {
                *acc += x;
            }
        }
    }
    for c in 0..k {
        assert!(counts[c] > 500, "class {c} has {} pixels", counts[c]);
        let bound = 5.0 * spec.cluster_std / (counts[c] as f64).sqrt();
        for j in 0..d {
            let mean = sums[c][j] / counts[c] as f64;
            assert!((mean - spec.cluster_means[c][j]).abs() < bound);
        }
    }
}

#[test]
fn generation_is_seeded() {
    let (spec, _) = default_fixture();
    let a = generate(&spec, FINE, 3, 16, 16, 7).unwrap();
    let b = generate(&spec, FINE, 3, 16, 16, 7).unwrap();
    let c = generate(&spec, FINE, 3, 16, 16, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_hierarchies_are_rejected() {
    let (spec, _) = default_fixture();
    let mut bad = spec.clone();
    bad.cluster_means[1] = bad.cluster_means[0].clone();
    assert!(bad.validate().is_err());
    let mut bad = spec.clone();
    bad.datasets[0].coarsen.remove("road");
    assert!(bad.validate().is_err());
    assert!(generate(&spec, "NOPE", 1, 8, 8, 0).is_err());
}
