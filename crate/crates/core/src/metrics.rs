//! Counting and localization metrics.
//!
//! Counting uses MAE and MSE, where "MSE" follows the crowd-counting
//! convention of root-mean-square error (so MSE >= MAE always).
//!
//! Localization matches predicted points against ground truth one-to-one
//! within a radius `sigma`, maximizing match cardinality first and total
//! distance second. That lexicographic objective is realized by feeding the
//! assignment solver a large finite penalty on pairs farther than `sigma`
//! apart; the penalty dwarfs any achievable sum of real distances, so
//! matchings with more in-radius pairs always cost less.

use crate::assignment::{solve_assignment, CostMatrix};
use crate::geometry::{euclidean_distance, Point};
use crate::{Error, Result};

/// Cost assigned to pairs farther than sigma apart; large enough that one
/// extra real match always beats any redistribution of distances.
const NON_EDGE_PENALTY: f64 = 1e9;

/// Aggregate counting errors over scenes.
#[derive(Debug, Clone)]
pub struct CountReport {
    /// Mean absolute count error.
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
    /// (true count, predicted count) per scene, input order.
    pub per_scene: Vec<(usize, usize)>,
}

impl CountReport {
    /// Per-scene rows in a fixed CSV schema.
    pub fn per_scene_csv(&self) -> String {
        let mut out = String::from("scene,true_count,predicted_count,abs_error\n");
        for (i, (t, p)) in self.per_scene.iter().enumerate() {
            let err = (*t as i64 - *p as i64).abs();
            out.push_str(&format!("{i},{t},{p},{err}\n"));
        }
        out
    }
}

/// MAE and root-mean-square error over (true, predicted) count pairs.
pub fn count_metrics(pairs: &[(usize, usize)]) -> Result<CountReport> {
    if pairs.is_empty() {
        return Err(Error::dimension("count metrics need at least one pair"));
    }
    let n = pairs.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for &(t, p) in pairs {
        let d = t as f64 - p as f64;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    Ok(CountReport {
        mae: abs_sum / n,
        mse: (sq_sum / n).sqrt(),
        per_scene: pairs.to_vec(),
    })
}

/// Point-level precision/recall/F1 at match radius `sigma`.
#[derive(Debug, Clone)]
pub struct LocalizationReport {
    pub sigma: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    /// Matched (predicted index, truth index) pairs, all within sigma.
    pub matched_pairs: Vec<(usize, usize)>,
}

/// Maximum-cardinality minimum-distance one-to-one matching between
/// predictions and ground truth, restricted to pairs within `sigma`.
/// Empty inputs yield zero metrics.
pub fn localization_metrics(
    predicted: &[Point],
    truth: &[Point],
    sigma: f64,
) -> Result<LocalizationReport> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma {sigma} must be positive")));
    }
    if predicted.is_empty() || truth.is_empty() {
        return Ok(LocalizationReport {
            sigma,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            true_positives: 0,
            matched_pairs: Vec::new(),
        });
    }

    // the solver wants rows <= cols; orient accordingly
    let pred_as_rows = predicted.len() <= truth.len();
    let (rows, cols): (&[Point], &[Point]) = if pred_as_rows {
        (predicted, truth)
    } else {
        (truth, predicted)
    };
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols {
            let d = euclidean_distance(*r, *c);
            values.push(if d <= sigma { d } else { NON_EDGE_PENALTY });
        }
    }
    let cost = CostMatrix::new(rows.len(), cols.len(), values)?;
    let asg = solve_assignment(&cost);

    let mut matched_pairs = Vec::new();
    for (i, &j) in asg.matches.iter().enumerate() {
        if euclidean_distance(rows[i], cols[j]) <= sigma {
            matched_pairs.push(if pred_as_rows { (i, j) } else { (j, i) });
        }
    }
    let tp = matched_pairs.len();
    let precision = tp as f64 / predicted.len() as f64;
    let recall = tp as f64 / truth.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(LocalizationReport {
        sigma,
        precision,
        recall,
        f1,
        true_positives: tp,
        matched_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_counts() {
        let r = count_metrics(&[(10, 10), (5, 5)]).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.mse, 0.0);
    }

    #[test]
    fn symmetric_errors() {
        let r = count_metrics(&[(10, 13), (10, 7)]).unwrap();
        assert_eq!(r.mae, 3.0);
        assert_eq!(r.mse, 3.0);
    }

    #[test]
    fn rms_exceeds_mae_for_uneven_errors() {
        let r = count_metrics(&[(0, 3), (0, 4)]).unwrap();
        assert!((r.mae - 3.5).abs() < 1e-12);
        assert!((r.mse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(r.mae <= r.mse);
    }

    #[test]
    fn empty_pairs_error() {
        assert!(count_metrics(&[]).is_err());
    }

    #[test]
    fn per_scene_csv_shape() {
        let r = count_metrics(&[(4, 6)]).unwrap();
        assert_eq!(r.per_scene_csv(), "scene,true_count,predicted_count,abs_error\n0,4,6,2\n");
    }

    #[test]
    fn identical_point_sets_are_perfect() {
        let pts = vec![Point::new(1.0, 2.0), Point::new(5.0, 5.0)];
        let r = localization_metrics(&pts, &pts, 4.0).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn out_of_radius_prediction_scores_zero() {
        let pred = vec![Point::new(0.0, 0.0)];
        let truth = vec![Point::new(10.0, 0.0)];
        let r = localization_metrics(&pred, &truth, 8.0).unwrap();
        assert_eq!(r.true_positives, 0);
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn empty_sets_yield_zero_metrics() {
        let pts = vec![Point::new(0.0, 0.0)];
        let r = localization_metrics(&[], &pts, 4.0).unwrap();
        assert_eq!(r.true_positives, 0);
        let r = localization_metrics(&pts, &[], 4.0).unwrap();
        assert_eq!(r.true_positives, 0);
    }

    #[test]
    fn swapping_sides_swaps_precision_and_recall() {
        let pred = vec![Point::new(0.0, 0.0), Point::new(3.0, 0.0), Point::new(9.0, 9.0)];
        let truth = vec![Point::new(0.5, 0.0), Point::new(20.0, 20.0)];
        let a = localization_metrics(&pred, &truth, 4.0).unwrap();
        let b = localization_metrics(&truth, &pred, 4.0).unwrap();
        assert_eq!(a.true_positives, b.true_positives);
        assert_eq!(a.precision, b.recall);
        assert_eq!(a.recall, b.precision);
    }

    #[test]
    fn greedy_trap_needs_optimal_matching() {
        // a greedy nearest-first matcher pairs p0-t0 and strands p1;
        // the optimal matching pairs p0-t1, p1-t0
        let pred = vec![Point::new(1.0, 0.0), Point::new(0.4, 0.0)];
        let truth = vec![Point::new(0.6, 0.0), Point::new(3.0, 0.0)];
        let r = localization_metrics(&pred, &truth, 2.1).unwrap();
        assert_eq!(r.true_positives, 2);
    }

    #[test]
    fn enlarging_sigma_never_loses_matches() {
        let pred = vec![Point::new(0.0, 0.0), Point::new(5.0, 5.0), Point::new(9.0, 1.0)];
        let truth = vec![Point::new(1.0, 1.0), Point::new(5.5, 5.0), Point::new(20.0, 20.0)];
        let mut prev = 0;
        for sigma in [0.5, 1.5, 3.0, 8.0, 30.0] {
            let r = localization_metrics(&pred, &truth, sigma).unwrap();
            assert!(r.true_positives >= prev);
            prev = r.true_positives;
        }
    }
}
