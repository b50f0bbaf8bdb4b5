//! Minimum-cost perfect matching on a square cost matrix.
//!
//! Shortest augmenting paths with row/column potentials, `O(n^3)`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `permutation[row]` is the column assigned to `row`.
    pub permutation: Vec<usize>,
    /// Sum of the selected entries, accumulated in row order.
    pub cost: f64,
}

pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let n = cost.rows();
    if cost.shape() != [n, n] {
        return Err(Error::Dimension {
            op: "hungarian",
            left: cost.shape().to_vec(),
            right: vec![],
        });
    }
    if !cost.is_finite() {
        return Err(Error::invalid("hungarian: cost matrix has non-finite entries"));
    }
    if n == 0 {
        return Ok(Assignment {
            permutation: Vec::new(),
            cost: 0.0,
        });
    }

    // 1-based bookkeeping; column 0 is a virtual source.
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
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
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

    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[col_owner[j] - 1] = j - 1;
    }
    let total = permutation
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.get(r, c))
        .sum();
    Ok(Assignment {
        permutation,
        cost: total,
    })
}
