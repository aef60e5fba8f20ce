use crate::error::{Error, Result};

/// Minimum-cost perfect assignment on a square matrix (Kuhn-Munkres with
/// potentials, O(n³)). Returns `perm` with row `i` assigned to column `perm[i]`.
pub fn kuhn_munkres(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::shape(
            "kuhn_munkres",
            format!("{n}x{n}"),
            format!("{n} rows with lengths {:?}", cost.iter().map(Vec::len).collect::<Vec<_>>()),
        ));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "kuhn_munkres",
            detail: "cost matrix has non-finite entries".into(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[col_owner[j] - 1] = j - 1;
    }
    Ok(perm)
}

pub fn assignment_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_favoring() {
        let cost: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        assert_eq!(kuhn_munkres(&cost).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn swap() {
        let cost = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = kuhn_munkres(&cost).unwrap();
        assert_eq!(p, vec![1, 0]);
        assert_eq!(assignment_cost(&cost, &p), 0.0);
    }

    #[test]
    fn non_square_rejected() {
        assert!(kuhn_munkres(&[vec![1.0, 2.0]]).is_err());
        assert!(kuhn_munkres(&[vec![f64::NAN]]).is_err());
    }
}
