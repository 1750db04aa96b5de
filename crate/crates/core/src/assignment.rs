//! Optimal one-to-one matching of predicted to reference boxes.
//!
//! [`hungarian_max`] maximizes total profit (IoU) over all injective
//! assignments of `min(P, R)` pairs. Internally it minimizes `1 - profit` on a
//! zero-profit padded square matrix with the O(n³) shortest-augmenting-path
//! Hungarian method, then canonicalizes among equally optimal assignments so
//! results are reproducible: predictions are visited in index order and each
//! takes the lowest reference index that some optimal assignment allows.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignmentError {
    #[error("profit matrix row {row} has {len} entries, expected {expected}")]
    Ragged {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("profit entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
}

/// Dense row-major `P × R` profit matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProfitMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(AssignmentError::Ragged {
                    row: r,
                    len: row.len(),
                    expected: cols,
                });
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(AssignmentError::NonFinite { row: r, col: c });
                }
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Builds a matrix by evaluating `f(row, col)`.
    ///
    /// # Panics
    /// If `f` returns a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                assert!(v.is_finite(), "profit entry ({r}, {c}) is not finite");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(pred_index, ref_index)` sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of profits over `pairs`, accumulated in prediction order.
    pub total_profit: f64,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_refs: Vec<usize>,
}

const TIGHT_TOL: f64 = 1e-9;

/// Maximum-profit one-to-one assignment.
pub fn hungarian_max(profit: &ProfitMatrix) -> Matching {
    let (p, r) = (profit.rows, profit.cols);
    if p == 0 || r == 0 {
        return Matching {
            pairs: Vec::new(),
            total_profit: 0.0,
            unmatched_preds: (0..p).collect(),
            unmatched_refs: (0..r).collect(),
        };
    }

    let n = p.max(r);
    let cost = |i: usize, j: usize| -> f64 {
        if i < p && j < r {
            1.0 - profit.get(i, j)
        } else {
            1.0
        }
    };

    let (mut row_to_col, u, v) = solve_min(n, &cost);
    canonicalize(
        &mut row_to_col,
        p,
        r,
        &|i, j| cost(i, j) - u[i] - v[j] <= TIGHT_TOL,
        profit,
    );

    let mut pairs = Vec::with_capacity(p.min(r));
    let mut unmatched_preds = Vec::new();
    let mut ref_taken = vec![false; r];
    for (i, &j) in row_to_col.iter().enumerate().take(p) {
        if j < r {
            pairs.push((i, j));
            ref_taken[j] = true;
        } else {
            unmatched_preds.push(i);
        }
    }
    let unmatched_refs = (0..r).filter(|&j| !ref_taken[j]).collect();
    let total_profit = pairs.iter().map(|&(i, j)| profit.get(i, j)).sum();
    Matching {
        pairs,
        total_profit,
        unmatched_preds,
        unmatched_refs,
    }
}

/// Square min-cost assignment. Returns the row→column assignment together with
/// row and column potentials `u`, `v` satisfying `cost(i,j) - u[i] - v[j] >= 0`
/// with equality on assigned cells.
fn solve_min(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Rewrites an optimal assignment into the lexicographically smallest optimal
/// one over the real rows, treating any padding column as larger than every
/// real column. Only tight edges (zero reduced cost) are ever used, so the
/// result stays optimal.
fn canonicalize(
    row_to_col: &mut [usize],
    p: usize,
    r: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    profit: &ProfitMatrix,
) {
    let n = row_to_col.len();
    let mut col_owner = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_owner[j] = i;
    }
    let real_sum = |assign: &[usize]| -> f64 {
        (0..p)
            .filter(|&i| assign[i] < r)
            .map(|i| profit.get(i, assign[i]))
            .sum()
    };

    for i in 0..p {
        let current = row_to_col[i];
        // padding columns are interchangeable, so only real columns can improve
        let limit = current.min(r);
        for j in 0..limit {
            if !tight(i, j) {
                continue;
            }
            let k = col_owner[j];
            if k < i {
                continue;
            }
            let mut visited = vec![false; n];
            visited[j] = true;
            let mut path = Vec::new();
            if !alternating_path(
                k,
                current,
                i,
                tight,
                &col_owner,
                row_to_col,
                &mut visited,
                &mut path,
            ) {
                continue;
            }
            let mut candidate = row_to_col.to_vec();
            candidate[i] = j;
            for &(row, col) in &path {
                candidate[row] = col;
            }
            if real_sum(&candidate) < real_sum(row_to_col) {
                continue;
            }
            row_to_col.copy_from_slice(&candidate);
            for (row, &col) in row_to_col.iter().enumerate() {
                col_owner[col] = row;
            }
            break;
        }
    }
}

/// Depth-first search for a reassignment of `row` (and the rows it displaces)
/// that ends on `target`, using tight edges and rows after `fixed_upto` only.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    row: usize,
    target: usize,
    fixed_upto: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_owner: &[usize],
    row_to_col: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    let n = col_owner.len();
    for c in 0..n {
        if visited[c] || c == row_to_col[row] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = col_owner[c];
        if next <= fixed_upto {
            continue;
        }
        path.push((row, c));
        if alternating_path(
            next, target, fixed_upto, tight, col_owner, row_to_col, visited, path,
        ) {
            return true;
        }
        path.pop();
    }
    false
}
