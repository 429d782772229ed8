//! Pseudo point selection from first-stage predictions.
//!
//! Two rules convert predicted confidences into pseudo labels: a fixed hard
//! threshold (`c > tau`, strict) and progressive selection
//! (`c >= tau1 - tau2 * W_t`, non-strict), where the epoch weight `W_t`
//! rises from exactly 0 at epoch 0 to exactly 1 at epoch T along an
//! exponential curve. The threshold is non-increasing in `t`, so pseudo
//! sets over a fixed prediction are nested: easy confident points first,
//! harder ones as training matures.
//!
//! The two comparison operators differ deliberately; at the shared boundary
//! (`tau = tau1`, `t = 0`) the selections agree except for confidences that
//! exactly equal the threshold.

use crate::geometry::Point;
use crate::model::Prediction;
use crate::{Error, Result};

/// Progressive selection schedule. `shape_k` controls the sharpness of the
/// exponential weight curve.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub total_epochs: u32,
    pub shape_k: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            tau1: 0.6,
            tau2: 0.4,
            total_epochs: 60,
            shape_k: 3.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau2 && self.tau2 < self.tau1 && self.tau1 <= 1.0) {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 <= tau2 < tau1 <= 1, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be positive"));
        }
        if !(self.shape_k > 0.0) {
            return Err(Error::config(format!("shape_k {} must be positive", self.shape_k)));
        }
        Ok(())
    }

    /// Active selection threshold at epoch `t`: `tau1 - tau2 * W_t`.
    pub fn threshold_at(&self, t: u32) -> Result<f64> {
        Ok(self.tau1 - self.tau2 * schedule_weight(t, self)?)
    }
}

/// Epoch weight `W_t = (e^(k t / T) - 1) / (e^k - 1)`: strictly increasing
/// in `t`, exactly 0 at `t = 0` and exactly 1 at `t = T`.
pub fn schedule_weight(t: u32, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if t > cfg.total_epochs {
        return Err(Error::config(format!(
            "epoch {t} outside [0, {}]",
            cfg.total_epochs
        )));
    }
    let k = cfg.shape_k;
    let frac = t as f64 / cfg.total_epochs as f64;
    Ok(((k * frac).exp() - 1.0) / (k.exp() - 1.0))
}

/// Pseudo labels: selected predicted points, each carrying the confidence of
/// the proposal that produced it (the weight used by the restoration loss).
#[derive(Debug, Clone)]
pub struct PseudoSet {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    /// Index of the generating proposal per pseudo point.
    pub proposal_indices: Vec<usize>,
    pub source_epoch: u32,
    /// The threshold that was active when the set was selected.
    pub threshold: f64,
}

impl PseudoSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn select(prediction: &Prediction, keep: impl Fn(f64) -> bool, epoch: u32, threshold: f64) -> PseudoSet {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut proposal_indices = Vec::new();
    for (j, (&c, &p)) in prediction
        .confidences
        .iter()
        .zip(&prediction.points)
        .enumerate()
    {
        if keep(c) {
            points.push(p);
            weights.push(c);
            proposal_indices.push(j);
        }
    }
    PseudoSet {
        points,
        weights,
        proposal_indices,
        source_epoch: epoch,
        threshold,
    }
}

/// Fixed-threshold rule: keep proposals with confidence strictly above
/// `tau`. Selected coordinates are the regressed points, not raw anchors.
pub fn hard_threshold_select(prediction: &Prediction, tau: f64) -> Result<PseudoSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!("hard threshold {tau} outside (0, 1)")));
    }
    Ok(select(prediction, |c| c > tau, 0, tau))
}

/// Progressive rule: keep proposals with confidence at or above
/// `tau1 - tau2 * W_t`.
pub fn pps_select(prediction: &Prediction, t: u32, cfg: &ScheduleConfig) -> Result<PseudoSet> {
    let threshold = cfg.threshold_at(t)?;
    Ok(select(prediction, |c| c >= threshold, t, threshold))
}
