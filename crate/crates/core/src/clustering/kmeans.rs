use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once every centroid moves less than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            n_init: 50,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// 0-based cluster per point.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[idx].clone());
        for (dd, p) in d2.iter_mut().zip(points) {
            *dd = dd.min(sq_dist(p, centroids.last().unwrap()));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansResult {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iter {
        let mut inertia = 0.0;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            labels[i] = j;
            dists[i] = d;
            inertia += d;
        }
        trace.push(inertia);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut new_centroids = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                new_centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // Empty cluster: reseed at the point farthest from its centroid.
                let far = dists
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                new_centroids[j] = points[far].clone();
                dists[far] = 0.0;
            }
        }
        let shift = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        if shift < cfg.tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, &centroids);
        labels[i] = j;
        inertia += d;
    }
    if trace.last().is_none_or(|&last| inertia < last) {
        trace.push(inertia);
    }
    KMeansResult {
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
    }
}

/// k-means++ seeded Lloyd iterations, best of `cfg.n_init` restarts.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Clustering("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Clustering(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Clustering("points must be finite with equal dimension".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for restart in 0..cfg.n_init.max(1) {
        let mut rng = stream(seed, Stream::Clustering, &[k as u64, restart as u64]);
        let init = plus_plus_init(points, k, &mut rng);
        let run = lloyd(points, init, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        let r = kmeans(&pts, 2, 1, &KMeansConfig::default()).unwrap();
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);
        let mut c = r.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!((r.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, 5, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![vec![0.0]; 2];
        assert!(kmeans(&pts, 3, 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn duplicate_points_do_not_panic() {
        let pts = vec![vec![1.0, 1.0]; 6];
        let r = kmeans(&pts, 3, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(r.inertia, 0.0);
    }
}
