//! Deliberately naive versions, written from the textbook definitions.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Hue in degrees first, as usually written, then scaled to `[0, 1)`.
pub fn hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h_deg = if c == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / c) % 6.0)
    } else if max == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    let h_deg = if h_deg < 0.0 { h_deg + 360.0 } else { h_deg };
    let s = if max == 0.0 { 0.0 } else { c / max };
    (h_deg / 360.0, s, max)
}

pub fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Lloyd's algorithm from `restarts` random Forgy initializations.
pub fn lloyd_best(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> f64 {
    let d = points[0].len();
    let mut best = f64::INFINITY;
    for _ in 0..restarts {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.shuffle(rng);
        let mut cent: Vec<Vec<f64>> = idx[..k].iter().map(|&i| points[i].clone()).collect();
        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..500 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut bj = 0;
                let mut bd = f64::INFINITY;
                for (j, c) in cent.iter().enumerate() {
                    let dist: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < bd {
                        bd = dist;
                        bj = j;
                    }
                }
                if assign[i] != bj {
                    assign[i] = bj;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (j, c) in cent.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (dd, v) in c.iter_mut().enumerate().take(d) {
                    *v = members.iter().map(|m| m[dd]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        best = best.min(inertia(points, &cent));
    }
    best
}

/// Mutual information over the arithmetic mean of the two entropies,
/// from a dense contingency table.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0 / n;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..kb).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let h = |p: &[f64]| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).ln();
            }
        }
    }
    let (ha, hb) = (h(&pa), h(&pb));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    mi / (0.5 * (ha + hb))
}

pub fn perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in perms(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    perms(cost.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}
