use std::collections::HashMap;

use crate::error::{Error, Result};

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information, `I(a;b) / ((H(a) + H(b)) / 2)`.
///
/// When both labelings are a single cluster the partitions are identical and
/// the result is 1.0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Metric(format!(
            "nmi needs equal non-empty labelings, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_relabelled() {
        let a = vec![0, 0, 1, 1, 2, 2, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<usize> = a.iter().map(|&x| [7, 3, 5][x]).collect();
        assert!((nmi(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(nmi(&[1, 1, 1], &[4, 4, 4]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1], &[0, 1, 2]).unwrap(), 0.0);
        assert!(nmi(&[], &[]).is_err());
        assert!(nmi(&[1], &[1, 2]).is_err());
    }
}
