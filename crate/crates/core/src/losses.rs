//! Supervised objectives: binary cross-entropy, squared MMD to a standard
//! normal prior on the adaptation layer, and depth-map regression.
//!
//! Batches are flat row-major slices (`b × dim`).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::StreamRng;

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-7;

/// Bandwidth multipliers applied to the median pairwise squared distance.
pub const MEDIAN_SCALES: [f64; 3] = [0.5, 1.0, 2.0];

/// Unweighted sum of Gaussian RBF kernels `exp(−‖x−y‖² / (2σ²))`, one per
/// `σ²` in `bandwidths`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
}

impl KernelSpec {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(Error::Config(format!(
                "kernel bandwidths must be positive and finite, got {bandwidths:?}"
            )));
        }
        Ok(KernelSpec { bandwidths })
    }

    /// `{0.5, 1, 2} × median` pairwise squared distance over the merged
    /// sample. Falls back to a unit median when the sample is degenerate.
    pub fn median_heuristic(a: &[f64], b: &[f64], dim: usize) -> Self {
        let pts: Vec<&[f64]> = a.chunks_exact(dim).chain(b.chunks_exact(dim)).collect();
        let mut d2 = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                d2.push(sq_dist(pts[i], pts[j]));
            }
        }
        let median = if d2.is_empty() {
            1.0
        } else {
            d2.sort_by(|x, y| x.total_cmp(y));
            let m = d2.len() / 2;
            let med = if d2.len() % 2 == 0 {
                0.5 * (d2[m - 1] + d2[m])
            } else {
                d2[m]
            };
            if med > 1e-12 && med.is_finite() {
                med
            } else {
                1.0
            }
        };
        KernelSpec {
            bandwidths: MEDIAN_SCALES.iter().map(|s| s * median).collect(),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2 = sq_dist(x, y);
        self.bandwidths.iter().map(|s2| (-d2 / (2.0 * s2)).exp()).sum()
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Standard-normal draws for one batch, `b × dim`.
pub fn draw_prior(rng: &mut StreamRng, b: usize, dim: usize) -> Vec<f64> {
    (0..b * dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Mean binary cross-entropy `−[y ln p + (1−y) ln(1−p)]`.
pub fn bce_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape("bce_loss", p.len(), y.len()));
    }
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = clamp_p(pi);
        if !(pc > 0.0 && pc < 1.0) {
            return Err(Error::NonFinite {
                context: "bce_loss",
                detail: format!("probability {pi}"),
            });
        }
        let yi = yi as f64;
        total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
    }
    Ok(total / p.len() as f64)
}

/// Per-sample BCE and its derivative w.r.t. the logit `z`.
///
/// The derivative is `p − y` inside the clamp range and zero outside it,
/// matching the clamped loss.
pub fn bce_from_logit<T: Real>(z: T, y: u8) -> (T, T) {
    let p = z.sigmoid();
    let pv = p.value();
    let yv = y as f64;
    if pv < P_CLAMP || pv > 1.0 - P_CLAMP {
        let pc = clamp_p(pv);
        let l = -(yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln());
        return (T::cst(l), T::zero());
    }
    let l = if y == 1 {
        -p.ln()
    } else {
        -(T::cst(1.0) - p).ln()
    };
    (l, p - T::cst(yv))
}

/// Biased (V-statistic) squared MMD between `h` and `prior`, summed over the
/// kernel bandwidths.
pub fn mmd_to_prior(h: &[f64], prior: &[f64], dim: usize, kernel: &KernelSpec) -> Result<f64> {
    check_mmd_shapes(h, prior, dim)?;
    Ok(mmd_with_grad::<f64>(h, prior, dim, kernel).0)
}

fn check_mmd_shapes(h: &[f64], prior: &[f64], dim: usize) -> Result<()> {
    if dim == 0 || h.len() % dim != 0 || h.is_empty() {
        return Err(Error::shape("mmd_to_prior", format!("b x {dim}"), h.len()));
    }
    if h.len() != prior.len() {
        return Err(Error::shape("mmd_to_prior", h.len(), prior.len()));
    }
    Ok(())
}

/// Squared MMD and its gradient w.r.t. `h`. Bandwidths are constants.
pub fn mmd_with_grad<T: Real>(
    h: &[T],
    prior: &[f64],
    dim: usize,
    kernel: &KernelSpec,
) -> (T, Vec<T>) {
    let b = h.len() / dim;
    let m = prior.len() / dim;
    let inv_bb = 1.0 / (b * b) as f64;
    let inv_mm = 1.0 / (m * m) as f64;
    let inv_bm = 1.0 / (b * m) as f64;

    let mut tt = 0.0;
    for j in 0..m {
        for k in 0..m {
            tt += kernel.eval(&prior[j * dim..(j + 1) * dim], &prior[k * dim..(k + 1) * dim]);
        }
    }

    let mut grad = vec![T::zero(); h.len()];
    let mut hh = T::zero();
    let mut ht = T::zero();
    let mut diff = vec![T::zero(); dim];
    // Accumulates Σ_s k_s / σ²_s and Σ_s k_s for one pair.
    let pair = |x: &[T], y: &mut dyn Iterator<Item = T>, diff: &mut [T]| -> (T, T) {
        let mut d2 = T::zero();
        for (d, (xi, yi)) in diff.iter_mut().zip(x.iter().zip(y)) {
            *d = *xi - yi;
            d2 += *d * *d;
        }
        let mut kv = T::zero();
        let mut slope = T::zero();
        for &s2 in &kernel.bandwidths {
            let e = (d2 * T::cst(-0.5 / s2)).exp();
            kv += e;
            slope += e.scale(1.0 / s2);
        }
        (kv, slope)
    };

    for j in 0..b {
        let hj = &h[j * dim..(j + 1) * dim];
        for k in 0..b {
            let hk = &h[k * dim..(k + 1) * dim];
            let (kv, slope) = pair(hj, &mut hk.iter().copied(), &mut diff);
            hh += kv;
            if j != k {
                // d/dh_j of k(h_j,h_k) + k(h_k,h_j): −2·slope·(h_j − h_k).
                let coef = slope.scale(-2.0 * inv_bb);
                for (g, d) in grad[j * dim..(j + 1) * dim].iter_mut().zip(&diff) {
                    *g += coef * *d;
                }
            }
        }
        for k in 0..m {
            let tk = &prior[k * dim..(k + 1) * dim];
            let (kv, slope) = pair(hj, &mut tk.iter().map(|&v| T::cst(v)), &mut diff);
            ht += kv;
            let coef = slope.scale(2.0 * inv_bm);
            for (g, d) in grad[j * dim..(j + 1) * dim].iter_mut().zip(&diff) {
                *g += coef * *d;
            }
        }
    }
    let value = hh.scale(inv_bb) + T::cst(tt * inv_mm) - ht.scale(2.0 * inv_bm);
    (value, grad)
}

/// Mean over the batch of the per-map sum of squared differences.
pub fn depth_loss(pred: &[f64], target: &[f64], map_len: usize) -> Result<f64> {
    Ok(depth_loss_grad(pred, target, map_len)?.0)
}

pub fn depth_loss_grad(pred: &[f64], target: &[f64], map_len: usize) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || map_len == 0 || pred.len() % map_len != 0 || pred.is_empty() {
        return Err(Error::shape("depth_loss", target.len(), pred.len()));
    }
    let b = (pred.len() / map_len) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / b
        })
        .collect();
    Ok((loss / b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng;

    #[test]
    fn bce_reference_values() {
        assert!((bce_loss(&[0.5, 0.5], &[0, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]).unwrap() < 1e-6);
        assert!(bce_loss(&[f64::NAN], &[1]).is_err());
        assert!(bce_loss(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn bce_logit_gradient_is_p_minus_y() {
        for &(z, y) in &[(0.3, 1u8), (-1.2, 0), (2.0, 0)] {
            let (l, g) = bce_from_logit(z, y);
            let p = Real::sigmoid(z);
            assert!((g - (p - y as f64)).abs() < 1e-15);
            assert!((l - bce_loss(&[p], &[y]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn mmd_singleton_closed_form() {
        let k = KernelSpec::new(vec![0.7]).unwrap();
        let x = [0.3, -1.0, 2.0];
        let y = [1.0, 0.5, -0.5];
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let expect = 2.0 - 2.0 * (-d2 / (2.0 * 0.7)).exp();
        assert!((mmd_to_prior(&x, &y, 3, &k).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn mmd_identical_is_zero() {
        let mut rng = stream(5, Stream::Prior, &[]);
        let h: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = KernelSpec::median_heuristic(&h, &h, 4);
        assert!(mmd_to_prior(&h, &h, 4, &k).unwrap().abs() < 1e-10);
    }

    #[test]
    fn mmd_shape_errors() {
        let k = KernelSpec::new(vec![1.0]).unwrap();
        assert!(mmd_to_prior(&[0.0; 8], &[0.0; 4], 4, &k).is_err());
        assert!(mmd_to_prior(&[0.0; 7], &[0.0; 7], 4, &k).is_err());
        assert!(KernelSpec::new(vec![0.0]).is_err());
    }

    #[test]
    fn depth_reference_values() {
        let t = vec![0.25; 64];
        assert_eq!(depth_loss(&t, &t, 64).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert!((depth_loss(&p, &t, 64).unwrap() - 64.0).abs() < 1e-12);
        assert!(depth_loss(&p, &t[..32], 64).is_err());
    }

    #[test]
    fn median_heuristic_degenerate_falls_back() {
        let k = KernelSpec::median_heuristic(&[0.0; 8], &[0.0; 8], 2);
        assert_eq!(k.bandwidths, vec![0.5, 1.0, 2.0]);
    }
}
