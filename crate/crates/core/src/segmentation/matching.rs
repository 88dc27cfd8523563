use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Minimum-cost assignment of every row of a `rows × cols` cost matrix
/// (`rows <= cols`) to a distinct column, by shortest augmenting paths with
/// dual potentials. Returns the column of each row.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > m {
        return Err(Error::invalid(format!(
            "cannot assign {n} targets to {m} proposals"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite {
            op: "matching cost".into(),
        });
    }
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &Tensor, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(r, &c)| cost.at(r, c)).sum()
}

/// Result of pairing proposals with ground-truth regions.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(proposal, target)` pairs, ordered by target.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Target matched to each proposal, `None` for no-object.
    pub fn target_of(&self, n_proposals: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_proposals];
        for &(p, t) in &self.pairs {
            out[p] = Some(t);
        }
        out
    }
}

/// Matches proposals to targets given a `proposals × targets` cost matrix.
pub fn match_proposals(cost: &Tensor) -> Result<Assignment> {
    let t = cost.transpose();
    let assign = hungarian(&t)?;
    Ok(Assignment {
        pairs: assign
            .iter()
            .enumerate()
            .map(|(target, &p)| (p, target))
            .collect(),
        total_cost: assignment_cost(&t, &assign),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngState;

    fn brute_force(cost: &Tensor) -> f64 {
        fn go(cost: &Tensor, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for c in 0..cost.cols() {
                if !used[c] {
                    used[c] = true;
                    go(cost, row + 1, used, acc + cost.at(row, c), best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
        best
    }

    #[test]
    fn two_by_two() {
        let c = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = match_proposals(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn single_target_takes_argmin() {
        let c = Tensor::from_rows(&[vec![5.0], vec![1.0], vec![7.0]]).unwrap();
        let a = match_proposals(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.target_of(3), vec![None, Some(0), None]);
    }

    #[test]
    fn infeasible() {
        let c = Tensor::zeros(&[2, 3]);
        assert!(match_proposals(&c).is_err());
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = RngState::new(11);
        for n_p in 2..=6 {
            for _ in 0..40 {
                let n_t = 1 + rng.below(n_p);
                let c = rng.uniform_tensor(&[n_p, n_t], -1.0, 3.0);
                let a = match_proposals(&c).unwrap();
                assert!((a.total_cost - brute_force(&c.transpose())).abs() < 1e-12);
                let mut used: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
                used.sort_unstable();
                used.dedup();
                assert_eq!(used.len(), n_t);
            }
        }
    }
}
