//! Algebraic invariants and property tests.

mod common;

use common::checks::{auc_monotone_invariance, drlm_partition, entropy_minimum, mmd_self_and_sign};
use d2am::clustering::{kmeans, nmi, KMeansConfig};
use d2am::data_synth::{generate_dataset, BackgroundFrequency, DatasetSpec, DomainStyle, LIVE, SPOOF};
use d2am::harness::{error_rates, hter, roc_and_auc};
use d2am::losses::{mmd_to_prior, KernelSpec};
use proptest::prelude::*;

#[test]
fn attention_split_partitions_features() {
    drlm_partition(200, 1);
}

#[test]
fn mmd_is_zero_on_itself_and_never_negative() {
    mmd_self_and_sign(100, 2);
}

#[test]
fn symmetric_entropy_is_minimized_at_half() {
    assert!(entropy_minimum() > 0.0);
}

#[test]
fn auc_ignores_increasing_transforms() {
    auc_monotone_invariance(50, 3);
}

fn matrix(rows: usize, dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * dim)
}

fn mmd_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<usize>)> {
    (1usize..10, 1usize..6).prop_flat_map(|(b, d)| {
        (
            Just(d),
            matrix(b, d),
            matrix(b, d),
            Just((0..b).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

fn permute_rows(x: &[f64], d: usize, order: &[usize]) -> Vec<f64> {
    order.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect()
}

fn style() -> impl Strategy<Value = DomainStyle> {
    (
        0.0f64..0.99,
        0.5f64..1.5,
        prop_oneof![Just(BackgroundFrequency::Low), Just(BackgroundFrequency::Mid), Just(BackgroundFrequency::High)],
        0.0f64..0.1,
        0.0f64..3.0,
    )
        .prop_map(|(hue_shift, brightness_gain, background_frequency, noise_sigma, medium_angle)| DomainStyle {
            hue_shift,
            brightness_gain,
            background_frequency,
            noise_sigma,
            medium_angle,
        })
}

fn small_spec() -> impl Strategy<Value = DatasetSpec> {
    (prop::collection::vec(style(), 2..4), 1usize..4, any::<u64>(), 16usize..20).prop_map(
        |(styles, half, seed, size)| DatasetSpec {
            num_latent_domains: styles.len(),
            samples_per_domain: 2 * half,
            image_size: (size, size),
            depth_size: (4, 4),
            domain_styles: styles,
            held_out_domain_styles: vec![],
            held_out_samples_per_domain: None,
            seed,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn mmd_is_symmetric_and_permutation_invariant((d, x, y, order) in mmd_case()) {
        let kernel = KernelSpec::median_heuristic(&x, &y, d);
        let xy = mmd_to_prior(&x, &y, d, &kernel).unwrap();
        let yx = mmd_to_prior(&y, &x, d, &kernel).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() < 1e-12);
        let xp = permute_rows(&x, d, &order);
        let yp = permute_rows(&y, d, &order);
        prop_assert!((mmd_to_prior(&xp, &yp, d, &kernel).unwrap() - xy).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone_and_hter_bounded(
        scores in prop::collection::vec(0.0f64..1.0, 2..80),
        labels in prop::collection::vec(0u8..2, 2..80),
        threshold in 0.0f64..1.0,
    ) {
        let n = scores.len().min(labels.len());
        let mut labels = labels[..n].to_vec();
        labels[0] = LIVE;
        labels[1] = SPOOF;
        let scores = &scores[..n];
        let roc = roc_and_auc(scores, &labels).unwrap();
        prop_assert!(roc.points.windows(2).all(|w| w[1].far >= w[0].far && w[1].tpr >= w[0].tpr));
        prop_assert!((0.0..=1.0).contains(&roc.auc));
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_and_auc(&negated, &labels).unwrap().auc - (1.0 - roc.auc)).abs() < 1e-12);
        let h = hter(scores, &labels, threshold).unwrap();
        let (far, frr) = error_rates(scores, &labels, threshold).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((h - 0.5 * (far + frr)).abs() < 1e-15);
    }

    #[test]
    fn kmeans_inertia_never_increases(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6..40),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let cfg = KMeansConfig { n_init: 3, ..KMeansConfig::default() };
        let res = kmeans(&pts, k, seed, &cfg).unwrap();
        prop_assert!(res.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        prop_assert!(res.labels.iter().all(|&l| l < k));
        prop_assert!(res.inertia >= 0.0);
    }

    #[test]
    fn nmi_is_bounded_symmetric_and_relabel_invariant(
        a in prop::collection::vec(0usize..4, 1..60),
        shift in 1usize..4,
    ) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| if i % 3 == 0 { (x + 1) % 4 } else { x }).collect();
        let ab = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - nmi(&b, &a).unwrap()).abs() < 1e-12);
        let renamed: Vec<usize> = a.iter().map(|&x| (x + shift) % 4).collect();
        prop_assert!((nmi(&a, &renamed).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn generation_is_a_pure_function_of_the_spec(spec in small_spec()) {
        prop_assume!(spec.validate().is_ok());
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        for d in 0..spec.num_latent_domains {
            let labels: Vec<u8> = a.source.iter().filter(|s| s.latent_domain == d).map(|s| s.label).collect();
            prop_assert!(labels.contains(&LIVE) && labels.contains(&SPOOF));
        }
        for s in &a.source {
            prop_assert_eq!(s.depth.iter().all(|&v| v == 0.0), s.label == SPOOF);
            prop_assert!(s.pseudo_domain.is_none());
            prop_assert!(s.image.iter().all(|v| v.is_finite()));
        }
    }
}
