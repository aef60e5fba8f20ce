//! Fixed-count property and oracle checks. Each panics on the first violation
//! and otherwise returns the worst observed deviation.

use d2am::clustering::{kmeans, kuhn_munkres, nmi, KMeansConfig};
use d2am::domain_repr::{entropy_loss_from_logit, EntropyForm};
use d2am::harness::roc_and_auc;
use d2am::losses::{mmd_to_prior, KernelSpec};
use d2am::model::{drlm_forward, DrlmParams};
use d2am::rng::{stream, Stream};
use d2am::tensor::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::reference;

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

/// Largest `|F+ + F− − F|` over random maps and gate weights.
pub fn drlm_partition(maps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..maps {
        let c = 4 * rng.random_range(1..=8usize);
        let (h, w) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
        let data: Vec<f64> = (0..c * h * w).map(|_| 5.0 * gauss(&mut rng)).collect();
        let f = FeatureMap::from_vec(c, h, w, data);
        let params = DrlmParams::init(c, 4, &mut stream(seed, Stream::Init, &[i as u64]));
        let out = drlm_forward(&f, &params).unwrap();
        assert!(out.attention.iter().all(|&a| a > 0.0 && a < 1.0));
        for ((p, m), x) in out.f_plus.data.iter().zip(&out.f_minus.data).zip(&f.data) {
            worst = worst.max((p + m - x).abs());
        }
    }
    assert!(worst <= 1e-6, "F+ + F- deviates from F by {worst}");
    worst
}

/// Returns the largest `|MMD(X, X)|` and the smallest `MMD(X, Y)`.
pub fn mmd_self_and_sign(pairs: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_self, mut min_pair) = (0.0f64, f64::INFINITY);
    for _ in 0..pairs {
        let b = rng.random_range(1..=16usize);
        let d = rng.random_range(1..=8usize);
        let shift = rng.random_range(0.0..3.0);
        let x: Vec<f64> = (0..b * d).map(|_| gauss(&mut rng)).collect();
        let y: Vec<f64> = (0..b * d).map(|_| gauss(&mut rng) + shift).collect();
        let kernel = KernelSpec::median_heuristic(&x, &y, d);
        let self_mmd = mmd_to_prior(&x, &x, d, &kernel).unwrap();
        let pair = mmd_to_prior(&x, &y, d, &kernel).unwrap();
        worst_self = worst_self.max(self_mmd.abs());
        min_pair = min_pair.min(pair);
    }
    assert!(worst_self <= 1e-10, "MMD(X, X) = {worst_self}");
    assert!(min_pair >= 0.0, "negative MMD {min_pair}");
    (worst_self, min_pair)
}

/// Symmetric entropy loss over a logit grid: minimum at `p = 0.5` with zero
/// gradient. Returns the loss gap to the nearest grid point.
pub fn entropy_minimum() -> f64 {
    let (at_half, grad) = entropy_loss_from_logit(0.0, EntropyForm::Symmetric);
    assert_eq!(grad, 0.0);
    assert!((at_half + std::f64::consts::LN_2).abs() < 1e-15);
    let mut gap = f64::INFINITY;
    for i in -2000..=2000 {
        if i == 0 {
            continue;
        }
        let z = i as f64 * 0.01;
        let (l, g) = entropy_loss_from_logit(z, EntropyForm::Symmetric);
        assert!(l > at_half, "loss at z={z} is {l} <= {at_half}");
        assert!(g.signum() == z.signum() || g == 0.0, "gradient at z={z} points away from 0.5");
        gap = gap.min(l - at_half);
    }
    gap
}

/// AUC before and after strictly increasing maps; returns the largest change.
pub fn auc_monotone_invariance(sets: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transforms: [fn(f64) -> f64; 4] = [|x| 3.0 * x - 1.0, |x| x * x * x + x, f64::exp, |x| 1.0 / (1.0 + (-4.0 * x).exp())];
    let mut worst = 0.0f64;
    for _ in 0..sets {
        let n = rng.random_range(4..200usize);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Quantized so ties are exercised too.
        let scores: Vec<f64> = labels
            .iter()
            .map(|&y| ((rng.random::<f64>() + 0.3 * y as f64) * 50.0).round() / 50.0)
            .collect();
        let base = roc_and_auc(&scores, &labels).unwrap().auc;
        for t in transforms {
            let mapped: Vec<f64> = scores.iter().map(|&s| t(s)).collect();
            let auc = roc_and_auc(&mapped, &labels).unwrap().auc;
            worst = worst.max((auc - base).abs());
        }
    }
    assert!(worst < 1e-12, "AUC changed by {worst}");
    worst
}

/// Kuhn-Munkres cost equals exhaustive search; returns the largest gap.
pub fn hungarian_vs_brute_force(n: usize, count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let perm = kuhn_munkres(&cost).unwrap();
        let mut seen = perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>(), "not a permutation");
        let got: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        let best = reference::brute_force_assignment(&cost);
        worst = worst.max((got - best).abs());
    }
    assert!(worst < 1e-9, "assignment cost off by {worst}");
    worst
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, usize) {
    let n = rng.random_range(20..=60usize);
    let d = rng.random_range(1..=8usize);
    let k = rng.random_range(2..=4usize);
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
    let pts = (0..n)
        .map(|i| centers[i % k].iter().map(|c| c + gauss(rng)).collect())
        .collect();
    (pts, k)
}

/// k-means against the best of 50 Forgy-initialized Lloyd runs; returns the
/// largest inertia gap.
pub fn kmeans_vs_lloyd(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = KMeansConfig::default();
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let (pts, k) = random_instance(&mut rng);
        let res = kmeans(&pts, k, inst as u64, &cfg).unwrap();
        let oracle = reference::lloyd_best(&pts, k, 50, &mut rng);
        assert!((reference::inertia(&pts, &res.centroids) - res.inertia).abs() < 1e-9);
        assert!(res.inertia <= oracle + 1e-9, "instance {inst}: {} vs oracle {oracle}", res.inertia);
        assert!(res.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", res.inertia_trace);
        worst = worst.max((res.inertia - oracle).abs());
    }
    assert!(worst <= 1e-9, "inertia differs from oracle by {worst}");
    worst
}

/// Library NMI against the dense-table formula; returns the largest gap.
pub fn nmi_vs_formula(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.random_range(5..300usize);
        let ka = rng.random_range(1..6usize);
        let kb = rng.random_range(1..6usize);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        // Partially dependent second labeling.
        let b: Vec<usize> = a
            .iter()
            .map(|&x| if rng.random::<f64>() < 0.6 { x % kb } else { rng.random_range(0..kb) })
            .collect();
        let got = nmi(&a, &b).unwrap();
        let want = reference::nmi(&a, &b).clamp(0.0, 1.0);
        worst = worst.max((got - want).abs());
    }
    assert!(worst < 1e-10, "NMI off by {worst}");
    worst
}
