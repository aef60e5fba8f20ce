//! Pseudo-domain discovery.
//!
//! Epoch 1 clusters every sample jointly on features from a frozen random
//! extractor. Later epochs cluster live and spoof samples separately on the
//! model's own domain features and align both clusterings to the previous
//! labels with a maximum-overlap assignment, so cluster ids stay stable.

mod hungarian;
mod kmeans;
mod nmi;

pub use hungarian::{assignment_cost, kuhn_munkres};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use nmi::nmi;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data_synth::{Dataset, LIVE, SPOOF};
use crate::domain_repr::{domain_feature, STATS_EPS};
use crate::error::{Error, Result};
use crate::model::{extractor_forward, ExtractorParams, ModelConfig};
use crate::rng::{derive_seed, stream, Stream};
use kmeans::sq_dist;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub epoch: usize,
    pub k: usize,
    /// Pseudo domain per sample, in `1..=k`.
    pub labels: Vec<usize>,
    pub inertia_pos: f64,
    pub inertia_neg: f64,
    /// New live cluster `i` was renamed to `match_pos[i]` (0-based).
    pub match_pos: Vec<usize>,
    pub match_neg: Vec<usize>,
    /// Set when a merged domain lacked a class and samples were moved in.
    pub fallback_fired: bool,
}

impl ClusterAssignment {
    /// Labels shifted to `0..k`.
    pub fn zero_based(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l - 1).collect()
    }

    pub fn domain_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l - 1] += 1;
        }
        sizes
    }
}

/// Frozen randomly initialized copy of the backbone used before the model
/// has learned anything.
#[derive(Debug, Clone)]
pub struct ReferenceExtractor {
    config: ModelConfig,
    params: ExtractorParams,
}

impl ReferenceExtractor {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Reference, &[]);
        let params = ExtractorParams::init(&config, &mut rng);
        Ok(ReferenceExtractor { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ExtractorParams {
        &self.params
    }

    pub fn domain_feature(&self, image: &[f32], select: bool) -> Result<Vec<f64>> {
        let trace = extractor_forward(&self.params, &self.config, image)?;
        domain_feature(&trace, STATS_EPS, select)
    }
}

/// Builds a `k × k` cost `-overlap(new cluster i, prev label j)` and returns
/// the relabeling of new clusters.
fn match_to_previous(new: &[usize], prev: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut cost = vec![vec![0.0; k]; k];
    for (&i, &j) in new.iter().zip(prev) {
        if j < k {
            cost[i][j] -= 1.0;
        }
    }
    kuhn_munkres(&cost)
}

fn centroid(points: &[&[f64]]) -> Vec<f64> {
    let dim = points[0].len();
    let mut c = vec![0.0; dim];
    for p in points {
        for (a, b) in c.iter_mut().zip(p.iter()) {
            *a += b;
        }
    }
    c.iter_mut().for_each(|v| *v /= points.len() as f64);
    c
}

/// Ensures every domain holds both classes by moving the class members of the
/// donor domain (largest holder of that class) nearest to the empty domain's
/// centroid. Returns whether anything moved.
fn repair_empty_domains(labels: &mut [usize], classes: &[u8], df: &[Vec<f64>], k: usize) -> Result<bool> {
    let mut fired = false;
    for d in 0..k {
        for class in [LIVE, SPOOF] {
            let count = |labels: &[usize], dom: usize| {
                labels
                    .iter()
                    .zip(classes)
                    .filter(|&(&l, &y)| l == dom && y == class)
                    .count()
            };
            if count(labels, d) > 0 {
                continue;
            }
            let donor = (0..k)
                .max_by_key(|&dd| (count(labels, dd), std::cmp::Reverse(dd)))
                .expect("k > 0");
            let donor_n = count(labels, donor);
            if donor_n < 2 {
                return Err(Error::Clustering(format!(
                    "too few class-{class} samples to populate {k} domains"
                )));
            }
            let donor_idx: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i] == donor && classes[i] == class)
                .collect();
            let members: Vec<&[f64]> = (0..labels.len())
                .filter(|&i| labels[i] == d)
                .map(|i| df[i].as_slice())
                .collect();
            let target = if members.is_empty() {
                // Nothing to anchor on: start from the donor's outermost sample.
                let pts: Vec<&[f64]> = donor_idx.iter().map(|&i| df[i].as_slice()).collect();
                let c = centroid(&pts);
                let far = donor_idx
                    .iter()
                    .max_by(|&&a, &&b| sq_dist(&df[a], &c).total_cmp(&sq_dist(&df[b], &c)))
                    .copied()
                    .expect("donor is non-empty");
                df[far].clone()
            } else {
                centroid(&members)
            };
            let mut ranked = donor_idx;
            ranked.sort_by(|&a, &b| sq_dist(&df[a], &target).total_cmp(&sq_dist(&df[b], &target)));
            let n_move = (donor_n / k).clamp(1, donor_n - 1);
            for &i in ranked.iter().take(n_move) {
                labels[i] = d;
            }
            warn!(
                "pseudo domain {} had no class-{class} samples; moved {n_move} from domain {}",
                d + 1,
                donor + 1
            );
            fired = true;
        }
    }
    Ok(fired)
}

/// Assigns pseudo domains from z-scored domain features.
///
/// Without `prev` all samples are clustered jointly; otherwise live and spoof
/// samples are clustered separately and each clustering is renamed to
/// maximize overlap with `prev`.
pub fn assign_pseudo_domains(
    classes: &[u8],
    df: &[Vec<f64>],
    k: usize,
    prev: Option<&ClusterAssignment>,
    epoch: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<ClusterAssignment> {
    if classes.len() != df.len() {
        return Err(Error::shape("assign_pseudo_domains", classes.len(), df.len()));
    }
    if k == 0 {
        return Err(Error::Clustering("k must be positive".into()));
    }
    let n = df.len();
    let identity: Vec<usize> = (0..k).collect();
    let Some(prev) = prev else {
        let res = kmeans(df, k, derive_seed(seed, &[epoch as u64, 2]), cfg)?;
        let mut labels = res.labels;
        let fired = if k > 1 {
            repair_empty_domains(&mut labels, classes, df, k)?
        } else {
            false
        };
        return Ok(ClusterAssignment {
            epoch,
            k,
            labels: labels.into_iter().map(|l| l + 1).collect(),
            inertia_pos: res.inertia,
            inertia_neg: res.inertia,
            match_pos: identity.clone(),
            match_neg: identity,
            fallback_fired: fired,
        });
    };
    if prev.labels.len() != n {
        return Err(Error::shape("assign_pseudo_domains prev", n, prev.labels.len()));
    }
    if prev.k != k {
        return Err(Error::Clustering(format!(
            "previous assignment has k = {}, requested {k}",
            prev.k
        )));
    }
    let prev0 = prev.zero_based();
    let mut labels = vec![0usize; n];
    let mut inertia = [0.0; 2];
    let mut perms = [identity.clone(), identity];
    for (slot, class) in [LIVE, SPOOF].into_iter().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&i| classes[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let pts: Vec<Vec<f64>> = idx.iter().map(|&i| df[i].clone()).collect();
        let res = kmeans(&pts, k, derive_seed(seed, &[epoch as u64, class as u64]), cfg)?;
        let prev_sub: Vec<usize> = idx.iter().map(|&i| prev0[i]).collect();
        let perm = match_to_previous(&res.labels, &prev_sub, k)?;
        for (&i, &l) in idx.iter().zip(&res.labels) {
            labels[i] = perm[l];
        }
        inertia[slot] = res.inertia;
        perms[slot] = perm;
    }
    let fired = repair_empty_domains(&mut labels, classes, df, k)?;
    let [match_pos, match_neg] = perms;
    Ok(ClusterAssignment {
        epoch,
        k,
        labels: labels.into_iter().map(|l| l + 1).collect(),
        inertia_pos: inertia[0],
        inertia_neg: inertia[1],
        match_pos,
        match_neg,
        fallback_fired: fired,
    })
}

/// Writes an assignment into the source samples' pseudo-domain fields.
pub fn write_pseudo_domains(dataset: &mut Dataset, assignment: &ClusterAssignment) -> Result<()> {
    if dataset.source.len() != assignment.labels.len() {
        return Err(Error::shape(
            "write_pseudo_domains",
            dataset.source.len(),
            assignment.labels.len(),
        ));
    }
    for (s, &l) in dataset.source.iter_mut().zip(&assignment.labels) {
        s.pseudo_domain = Some(l);
    }
    Ok(())
}

/// Mean silhouette coefficient. Singleton clusters contribute 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| sq_dist(a, b).sqrt()).collect())
        .collect();
    silhouette_from_distances(&dist, labels)
}

fn silhouette_from_distances(dist: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            sums[labels[j]] += dist[i][j];
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Picks the candidate `k` with the highest silhouette; ties go to the smaller.
pub fn choose_k(points: &[Vec<f64>], candidates: &[usize], seed: u64, cfg: &KMeansConfig) -> Result<usize> {
    let Some(&kmax) = candidates.iter().max() else {
        return Err(Error::Clustering("no candidate k".into()));
    };
    let kmin = *candidates.iter().min().expect("non-empty");
    if kmin == 0 {
        return Err(Error::Clustering("candidate k must be positive".into()));
    }
    if points.len() <= kmax {
        return Err(Error::Clustering(format!(
            "choose_k needs more than {kmax} points, got {}",
            points.len()
        )));
    }
    if points.iter().all(|p| p == &points[0]) {
        warn!("all domain features identical; falling back to k = {kmin}");
        return Ok(kmin);
    }
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| sq_dist(a, b).sqrt()).collect())
        .collect();
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = (kmin, f64::NEG_INFINITY);
    for k in sorted {
        let labels = if k == 1 {
            vec![0; points.len()]
        } else {
            kmeans(points, k, seed, cfg)?.labels
        };
        let s = silhouette_from_distances(&dist, &labels);
        log::debug!("choose_k: k = {k} silhouette {s:.4}");
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = stream(seed, Stream::Clustering, &[99]);
        let mut pts = Vec::new();
        let mut gt = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(
                    c.iter()
                        .map(|&v| v + spread * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect::<Vec<f64>>(),
                );
                gt.push(ci);
            }
        }
        (pts, gt)
    }

    fn three_centers() -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0, 0.0], vec![8.0, 0.0, 1.0], vec![0.0, 9.0, -2.0]]
    }

    #[test]
    fn epoch_one_recovers_separated_groups() {
        let (pts, gt) = blobs(&three_centers(), 20, 0.5, 1);
        let classes: Vec<u8> = (0..pts.len()).map(|i| (i % 2) as u8).collect();
        let a = assign_pseudo_domains(&classes, &pts, 3, None, 1, 5, &KMeansConfig::default()).unwrap();
        assert!(a.labels.iter().all(|&l| (1..=3).contains(&l)));
        assert!((nmi(&a.labels, &gt).unwrap() - 1.0).abs() < 1e-12);
        assert!(!a.fallback_fired);
    }

    #[test]
    fn later_epochs_are_a_fixed_point() {
        let (pts, _) = blobs(&three_centers(), 20, 1.5, 2);
        let classes: Vec<u8> = (0..pts.len()).map(|i| (i % 2) as u8).collect();
        let cfg = KMeansConfig::default();
        let a1 = assign_pseudo_domains(&classes, &pts, 3, None, 1, 5, &cfg).unwrap();
        let a2 = assign_pseudo_domains(&classes, &pts, 3, Some(&a1), 2, 5, &cfg).unwrap();
        let a3 = assign_pseudo_domains(&classes, &pts, 3, Some(&a2), 2, 5, &cfg).unwrap();
        assert_eq!(a2.labels, a3.labels);
    }

    #[test]
    fn matching_recovers_previous_names() {
        let (pts, _) = blobs(&three_centers(), 10, 0.3, 3);
        let classes: Vec<u8> = (0..pts.len()).map(|i| (i % 2) as u8).collect();
        let cfg = KMeansConfig::default();
        let a1 = assign_pseudo_domains(&classes, &pts, 3, None, 1, 5, &cfg).unwrap();
        // Rename prev arbitrarily; the new labels must follow the renaming.
        let mut renamed = a1.clone();
        renamed.labels = a1.labels.iter().map(|&l| [3, 1, 2][l - 1]).collect();
        let a2 = assign_pseudo_domains(&classes, &pts, 3, Some(&renamed), 2, 9, &cfg).unwrap();
        assert_eq!(a2.labels, renamed.labels);
    }

    #[test]
    fn single_domain() {
        let (pts, _) = blobs(&three_centers(), 5, 0.3, 4);
        let classes: Vec<u8> = (0..pts.len()).map(|i| (i % 2) as u8).collect();
        let a = assign_pseudo_domains(&classes, &pts, 1, None, 1, 0, &KMeansConfig::default()).unwrap();
        assert!(a.labels.iter().all(|&l| l == 1));
        let b = assign_pseudo_domains(&classes, &pts, 1, Some(&a), 2, 0, &KMeansConfig::default()).unwrap();
        assert!(b.labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn fallback_fills_class_free_domain() {
        // Live samples form three groups, spoof samples all sit in one place.
        let mut pts = Vec::new();
        let mut classes = Vec::new();
        for c in three_centers() {
            for j in 0..4 {
                pts.push(c.iter().map(|v| v + j as f64 * 0.01).collect());
                classes.push(LIVE);
            }
        }
        let mut rng = stream(0, Stream::Clustering, &[1]);
        for _ in 0..12 {
            pts.push(vec![rng.random_range(0.0..0.1), 0.0, 0.0]);
            classes.push(SPOOF);
        }
        let a = assign_pseudo_domains(&classes, &pts, 3, None, 1, 0, &KMeansConfig::default()).unwrap();
        assert!(a.fallback_fired);
        for d in 1..=3 {
            for c in [LIVE, SPOOF] {
                assert!(a.labels.iter().zip(&classes).any(|(&l, &y)| l == d && y == c));
            }
        }
    }

    #[test]
    fn choose_k_on_blobs() {
        let cfg = KMeansConfig::default();
        let (three, _) = blobs(&three_centers(), 15, 0.4, 5);
        assert_eq!(choose_k(&three, &[2, 3, 4, 5], 0, &cfg).unwrap(), 3);
        let (two, _) = blobs(&three_centers()[..2], 15, 0.4, 6);
        assert_eq!(choose_k(&two, &[2, 3, 4, 5], 0, &cfg).unwrap(), 2);
        let same = vec![vec![1.0, 2.0]; 10];
        assert_eq!(choose_k(&same, &[2, 3, 4, 5], 0, &cfg).unwrap(), 2);
        assert!(choose_k(&three[..5], &[2, 3, 4, 5], 0, &cfg).is_err());
    }
}
