//! Pair-wise matching cost and rectangular one-to-one assignment.
//!
//! The cost of matching target point `p_i` to predicted point `p_j` with
//! confidence `c_j` is `nu * dist(p_i, p_j) - c_j`, so a confident nearby
//! prediction is cheap. The solver finds a minimum-total-cost injective
//! matching of all rows (targets) to distinct columns (proposals).
//!
//! The rectangular case is handled natively with a shortest-augmenting-path
//! formulation (Jonker-Volgenant style), O(rows^2 * cols): one Dijkstra-like
//! search over the reduced costs per row, followed by a dual update and an
//! augmentation. Proposals far outnumber targets here, so square padding
//! would waste most of the matrix.
//!
//! Negative entries are fine (the formula subtracts confidences); nothing is
//! shifted internally. Ties between equal-cost columns resolve to the lowest
//! column index, which makes the output deterministic.

use crate::geometry::{euclidean_distance, Point};
use crate::{Error, Result};

/// Dense rows x cols cost matrix with rows <= cols.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>, // row-major
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::dimension("cost matrix needs at least one row"));
        }
        if rows > cols {
            return Err(Error::dimension(format!(
                "cost matrix has {rows} rows but only {cols} columns"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::dimension(format!(
                "cost matrix data has {} entries, expected {}",
                values.len(),
                rows * cols
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("cost matrix entries must be finite"));
        }
        Ok(CostMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}

/// One-to-one matching of every row to a distinct column.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// `matches[i]` is the column assigned to row `i`; injective.
    pub matches: Vec<usize>,
    /// Sum of the matched cost entries, recomputed from the matrix.
    pub total_cost: f64,
}

impl Assignment {
    /// Column indices not matched to any row; exactly `cols - rows` of them.
    pub fn unmatched_columns(&self, cols: usize) -> Vec<usize> {
        let mut used = vec![false; cols];
        for &j in &self.matches {
            used[j] = true;
        }
        (0..cols).filter(|&j| !used[j]).collect()
    }
}

/// Builds the matching cost matrix: entry `(i, j)` is
/// `nu * dist(targets[i], predicted[j]) - confidences[j]`.
pub fn build_cost(
    targets: &[Point],
    predicted: &[Point],
    confidences: &[f64],
    nu: f64,
) -> Result<CostMatrix> {
    if predicted.len() != confidences.len() {
        return Err(Error::dimension(format!(
            "{} predicted points but {} confidences",
            predicted.len(),
            confidences.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::dimension("no target points to match"));
    }
    if targets.len() > predicted.len() {
        return Err(Error::dimension(format!(
            "{} targets exceed {} proposals",
            targets.len(),
            predicted.len()
        )));
    }
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::config(format!("matching weight nu={nu} must be positive")));
    }
    let mut values = Vec::with_capacity(targets.len() * predicted.len());
    for t in targets {
        for (p, c) in predicted.iter().zip(confidences) {
            values.push(nu * euclidean_distance(*t, *p) - c);
        }
    }
    CostMatrix::new(targets.len(), predicted.len(), values)
}

/// Minimum-cost injective matching of all rows to distinct columns.
///
/// Shortest augmenting path per row over reduced costs; the optimal total is
/// unique even when the argmin matching is not.
pub fn solve_assignment(cost: &CostMatrix) -> Assignment {
    let nr = cost.rows();
    let nc = cost.cols();

    let mut u = vec![0.0f64; nr]; // row potentials
    let mut v = vec![0.0f64; nc]; // column potentials
    let mut col_of_row = vec![usize::MAX; nr];
    let mut row_of_col = vec![usize::MAX; nc];

    let mut shortest = vec![f64::INFINITY; nc];
    let mut pred_row = vec![0usize; nc];
    let mut scanned_rows = vec![false; nr];
    let mut scanned_cols = vec![false; nc];

    for start_row in 0..nr {
        shortest.fill(f64::INFINITY);
        for f in scanned_rows.iter_mut() {
            *f = false;
        }
        for f in scanned_cols.iter_mut() {
            *f = false;
        }

        let mut dist = 0.0; // distance to the row currently being scanned
        let mut i = start_row;
        let sink = loop {
            scanned_rows[i] = true;
            let row = cost.row(i);
            let ui = u[i];
            let mut best = f64::INFINITY;
            let mut best_col = usize::MAX;
            for j in 0..nc {
                if scanned_cols[j] {
                    continue;
                }
                let reduced = dist + row[j] - ui - v[j];
                if reduced < shortest[j] {
                    shortest[j] = reduced;
                    pred_row[j] = i;
                }
                // strict '<': the lowest column index wins ties
                if shortest[j] < best {
                    best = shortest[j];
                    best_col = j;
                }
            }
            debug_assert!(best_col != usize::MAX, "finite matrix always has a next column");
            dist = best;
            scanned_cols[best_col] = true;
            if row_of_col[best_col] == usize::MAX {
                break best_col;
            }
            i = row_of_col[best_col];
        };

        u[start_row] += dist;
        for r in 0..nr {
            if scanned_rows[r] && r != start_row {
                u[r] += dist - shortest[col_of_row[r]];
            }
        }
        for (j, vj) in v.iter_mut().enumerate() {
            if scanned_cols[j] {
                *vj -= dist - shortest[j];
            }
        }

        // walk predecessors back from the sink, flipping assignments
        let mut j = sink;
        loop {
            let r = pred_row[j];
            row_of_col[j] = r;
            let next = col_of_row[r];
            col_of_row[r] = j;
            if r == start_row {
                break;
            }
            j = next;
        }
    }

    let total_cost = col_of_row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum();
    Assignment {
        matches: col_of_row,
        total_cost,
    }
}
