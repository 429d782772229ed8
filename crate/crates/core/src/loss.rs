//! Loss formulas for both network stages.
//!
//! The classification losses are cross-entropies over all M proposals, where
//! matched proposals contribute `-ln(c)` and unmatched ones a down-weighted
//! `-ln(1 - c)`. The restoration stage additionally scales each matched
//! term by the confidence the first stage assigned to its pseudo point, so
//! early noisy pseudo labels pull gently. Location losses are mean squared
//! Euclidean distances over the matched pairs.
//!
//! Confidences exactly 0 or 1 are clamped to `[EPS, 1 - EPS]` for log
//! stability; the clamp count is reported so saturation is observable.
//! Closed-form gradients live next to each loss and are checked against
//! finite differences in the tests.

use crate::geometry::Point;
use crate::{Error, Result};

/// Clamp bound for confidences entering a logarithm.
pub const CONF_EPS: f64 = 1e-7;

/// Loss weights: `lambda_total` scales the restoration stage's negative
/// term, `lambda1` the location losses, `lambda2` the matching stage's
/// negative term.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_total: 0.4,
            lambda1: 0.05,
            lambda2: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_total", self.lambda_total),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} = {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// A classification loss value plus the number of confidences that hit the
/// clamp bound while evaluating it.
#[derive(Debug, Clone, Copy)]
pub struct ClsLoss {
    pub value: f64,
    pub clamped: usize,
}

#[inline]
fn clamp_conf(c: f64, clamped: &mut usize) -> f64 {
    if c < CONF_EPS {
        *clamped += 1;
        CONF_EPS
    } else if c > 1.0 - CONF_EPS {
        *clamped += 1;
        1.0 - CONF_EPS
    } else {
        c
    }
}

fn matched_flags(m: usize, matched: &[usize]) -> Result<Vec<bool>> {
    let mut flags = vec![false; m];
    for &j in matched {
        if j >= m {
            return Err(Error::dimension(format!(
                "matched proposal index {j} out of range for M={m}"
            )));
        }
        if flags[j] {
            return Err(Error::dimension(format!("proposal {j} matched twice")));
        }
        flags[j] = true;
    }
    Ok(flags)
}

/// Matching-stage classification loss:
/// `-(1/M) (sum_matched ln c + lambda2 * sum_unmatched ln(1 - c))`.
pub fn pmn_cls_loss(confidences: &[f64], matched: &[usize], lambda2: f64) -> Result<ClsLoss> {
    let m = confidences.len();
    if m == 0 || matched.is_empty() {
        return Err(Error::dimension("classification loss needs proposals and matches"));
    }
    let flags = matched_flags(m, matched)?;
    let mut clamped = 0;
    let mut acc = 0.0;
    for (j, &c) in confidences.iter().enumerate() {
        let c = clamp_conf(c, &mut clamped);
        if flags[j] {
            acc += c.ln();
        } else {
            acc += lambda2 * (1.0 - c).ln();
        }
    }
    Ok(ClsLoss {
        value: -acc / m as f64,
        clamped,
    })
}

/// Gradient of [`pmn_cls_loss`] with respect to each confidence:
/// `-1/(M c)` for matched, `lambda2 / (M (1 - c))` for unmatched.
pub fn pmn_cls_grad(confidences: &[f64], matched: &[usize], lambda2: f64) -> Result<Vec<f64>> {
    let m = confidences.len();
    let flags = matched_flags(m, matched)?;
    let mut clamped = 0;
    let grad = confidences
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let c = clamp_conf(c, &mut clamped);
            if flags[j] {
                -1.0 / (m as f64 * c)
            } else {
                lambda2 / (m as f64 * (1.0 - c))
            }
        })
        .collect();
    Ok(grad)
}

/// Mean squared Euclidean distance between paired points.
pub fn loc_loss(targets: &[Point], matched_predictions: &[Point]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::dimension("location loss needs at least one pair"));
    }
    if targets.len() != matched_predictions.len() {
        return Err(Error::dimension(format!(
            "{} targets but {} matched predictions",
            targets.len(),
            matched_predictions.len()
        )));
    }
    let sum: f64 = targets
        .iter()
        .zip(matched_predictions)
        .map(|(t, p)| {
            let dx = t.x - p.x;
            let dy = t.y - p.y;
            dx * dx + dy * dy
        })
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Gradient of [`loc_loss`] with respect to each matched prediction:
/// `2 (p - t) / n` per pair.
pub fn loc_grad(targets: &[Point], matched_predictions: &[Point]) -> Result<Vec<(f64, f64)>> {
    if targets.is_empty() || targets.len() != matched_predictions.len() {
        return Err(Error::dimension("location gradient needs equal non-empty inputs"));
    }
    let n = targets.len() as f64;
    Ok(targets
        .iter()
        .zip(matched_predictions)
        .map(|(t, p)| (2.0 * (p.x - t.x) / n, 2.0 * (p.y - t.y) / n))
        .collect())
}

/// Stage total: `cls + lambda1 * loc`.
pub fn total_loss(cls: f64, loc: f64, lambda1: f64) -> f64 {
    cls + lambda1 * loc
}

/// Restoration-stage weighted classification loss:
/// `-(1/M) (sum_matched w ln c + lambda * sum_unmatched ln(1 - c))`.
///
/// `matched` pairs a proposal index with the weight of the pseudo point it
/// was matched to. An empty `matched` is legal: before any pseudo point
/// clears the threshold only the negative term supervises the stage.
pub fn prn_weighted_cls_loss(
    confidences: &[f64],
    matched: &[(usize, f64)],
    lambda: f64,
) -> Result<ClsLoss> {
    let m = confidences.len();
    if m == 0 {
        return Err(Error::dimension("classification loss needs proposals"));
    }
    let weights = weight_table(m, matched)?;
    let mut clamped = 0;
    let mut acc = 0.0;
    for (j, &c) in confidences.iter().enumerate() {
        let c = clamp_conf(c, &mut clamped);
        match weights[j] {
            Some(w) => acc += w * c.ln(),
            None => acc += lambda * (1.0 - c).ln(),
        }
    }
    Ok(ClsLoss {
        value: -acc / m as f64,
        clamped,
    })
}

/// Gradient of [`prn_weighted_cls_loss`] with respect to each confidence.
pub fn prn_weighted_cls_grad(
    confidences: &[f64],
    matched: &[(usize, f64)],
    lambda: f64,
) -> Result<Vec<f64>> {
    let m = confidences.len();
    let weights = weight_table(m, matched)?;
    let mut clamped = 0;
    let grad = confidences
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let c = clamp_conf(c, &mut clamped);
            match weights[j] {
                Some(w) => -w / (m as f64 * c),
                None => lambda / (m as f64 * (1.0 - c)),
            }
        })
        .collect();
    Ok(grad)
}

fn weight_table(m: usize, matched: &[(usize, f64)]) -> Result<Vec<Option<f64>>> {
    let mut weights = vec![None; m];
    for &(j, w) in matched {
        if j >= m {
            return Err(Error::dimension(format!(
                "matched proposal index {j} out of range for M={m}"
            )));
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::config(format!("pseudo weight {w} outside [0, 1]")));
        }
        if weights[j].is_some() {
            return Err(Error::dimension(format!("proposal {j} matched twice")));
        }
        weights[j] = Some(w);
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn pmn_cls_perfect_prediction_is_near_zero() {
        let loss = pmn_cls_loss(&[1.0 - CONF_EPS, CONF_EPS], &[0], 0.4).unwrap();
        assert!(loss.value < 1e-6, "loss {}", loss.value);
        assert_eq!(loss.clamped, 0);
    }

    #[test]
    fn pmn_cls_hand_value() {
        // -(1/2)(ln 0.5 + 0.4 ln 0.5) = 0.7 ln 2
        let loss = pmn_cls_loss(&[0.5, 0.5], &[0], 0.4).unwrap();
        assert!((loss.value - 0.7 * LN2).abs() < 1e-15);
    }

    #[test]
    fn pmn_cls_decreases_when_matched_confidence_rises() {
        let lo = pmn_cls_loss(&[0.5, 0.5], &[0], 0.4).unwrap().value;
        let hi = pmn_cls_loss(&[0.8, 0.5], &[0], 0.4).unwrap().value;
        assert!(hi < lo);
    }

    #[test]
    fn pmn_cls_clamps_and_flags_saturated_confidences() {
        let loss = pmn_cls_loss(&[1.0, 0.0], &[0], 0.4).unwrap();
        assert!(loss.value.is_finite());
        assert_eq!(loss.clamped, 2);
    }

    #[test]
    fn pmn_cls_grad_matches_finite_differences() {
        let conf = [0.3, 0.7, 0.55, 0.21];
        let matched = [1, 2];
        let l2 = 0.4;
        let grad = pmn_cls_grad(&conf, &matched, l2).unwrap();
        let h = 1e-6;
        for j in 0..conf.len() {
            let mut up = conf;
            up[j] += h;
            let mut dn = conf;
            dn[j] -= h;
            let fd = (pmn_cls_loss(&up, &matched, l2).unwrap().value
                - pmn_cls_loss(&dn, &matched, l2).unwrap().value)
                / (2.0 * h);
            assert!((grad[j] - fd).abs() < 1e-6, "j={j}: {} vs {fd}", grad[j]);
        }
    }

    #[test]
    fn loc_loss_values() {
        let z = Point::new(1.0, 2.0);
        assert_eq!(loc_loss(&[z], &[z]).unwrap(), 0.0);
        let loss = loc_loss(&[Point::new(0.0, 0.0)], &[Point::new(3.0, 4.0)]).unwrap();
        assert_eq!(loss, 25.0);
    }

    #[test]
    fn loc_loss_is_degree_two_homogeneous() {
        let t = [Point::new(1.0, 2.0), Point::new(-0.5, 0.25)];
        let p = [Point::new(2.0, 1.0), Point::new(0.5, -0.75)];
        let t2: Vec<Point> = t.iter().map(|q| Point::new(2.0 * q.x, 2.0 * q.y)).collect();
        let p2: Vec<Point> = p.iter().map(|q| Point::new(2.0 * q.x, 2.0 * q.y)).collect();
        let base = loc_loss(&t, &p).unwrap();
        let scaled = loc_loss(&t2, &p2).unwrap();
        assert!((scaled - 4.0 * base).abs() < 1e-12);
    }

    #[test]
    fn loc_loss_rejects_empty_and_mismatched() {
        assert!(loc_loss(&[], &[]).is_err());
        assert!(loc_loss(&[Point::new(0.0, 0.0)], &[]).is_err());
    }

    #[test]
    fn total_loss_combines() {
        assert_eq!(total_loss(1.0, 0.0, 0.05), 1.0);
        assert_eq!(total_loss(0.3, 25.0, 0.0), 0.3);
        let v = total_loss(0.4852, 25.0, 0.05);
        assert!((v - 1.7352).abs() < 1e-9);
    }

    #[test]
    fn weighted_cls_with_unit_weights_reduces_to_unweighted() {
        let conf = [0.37, 0.82, 0.5, 0.11];
        let matched = [0, 2];
        let pairs: Vec<(usize, f64)> = matched.iter().map(|&j| (j, 1.0)).collect();
        let a = pmn_cls_loss(&conf, &matched, 0.4).unwrap().value;
        let b = prn_weighted_cls_loss(&conf, &pairs, 0.4).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn weighted_cls_zero_weights_leave_only_negatives() {
        let conf = [0.9, 0.5];
        let with_pos = prn_weighted_cls_loss(&conf, &[(0, 0.0)], 0.4).unwrap().value;
        // only index 1 contributes: -(1/2) * 0.4 * ln(0.5)
        assert!((with_pos - 0.2 * LN2).abs() < 1e-15);
    }

    #[test]
    fn weighted_cls_hand_value() {
        // -(1/2)(0.8 ln 0.5 + 0.4 ln 0.5) = 0.6 ln 2
        let loss = prn_weighted_cls_loss(&[0.5, 0.5], &[(0, 0.8)], 0.4).unwrap();
        assert!((loss.value - 0.6 * LN2).abs() < 1e-15);
    }

    #[test]
    fn weighted_cls_monotone_in_weight() {
        let conf = [0.6, 0.5];
        let lo = prn_weighted_cls_loss(&conf, &[(0, 0.2)], 0.4).unwrap().value;
        let hi = prn_weighted_cls_loss(&conf, &[(0, 0.9)], 0.4).unwrap().value;
        assert!(hi > lo);
    }

    #[test]
    fn weighted_cls_rejects_out_of_range_weight() {
        assert!(prn_weighted_cls_loss(&[0.5], &[(0, 1.5)], 0.4).is_err());
        assert!(prn_weighted_cls_loss(&[0.5], &[(0, -0.1)], 0.4).is_err());
    }

    #[test]
    fn weighted_cls_grad_matches_finite_differences() {
        let conf = [0.3, 0.7, 0.55];
        let matched = [(1usize, 0.6f64)];
        let grad = prn_weighted_cls_grad(&conf, &matched, 0.4).unwrap();
        let h = 1e-6;
        for j in 0..conf.len() {
            let mut up = conf;
            up[j] += h;
            let mut dn = conf;
            dn[j] -= h;
            let fd = (prn_weighted_cls_loss(&up, &matched, 0.4).unwrap().value
                - prn_weighted_cls_loss(&dn, &matched, 0.4).unwrap().value)
                / (2.0 * h);
            assert!((grad[j] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_matched_set_is_negatives_only() {
        let conf = [0.5, 0.5];
        let loss = prn_weighted_cls_loss(&conf, &[], 0.4).unwrap();
        assert!((loss.value - 0.4 * LN2).abs() < 1e-15);
    }
}
