//! End-to-end training of both stages and inference-time counting.
//!
//! One training step, per scene of the batch: run the shared trunk and both
//! heads; Hungarian-match the matching head's predictions against the
//! annotated points and form its classification + location losses; select
//! pseudo points from those predictions; Hungarian-match the restoration
//! head's predictions against the pseudo points and form the weighted
//! classification + location losses. Both stage losses are summed
//! (unweighted), backpropagated once, and a single Adam update is applied to
//! the shared parameter vector.
//!
//! Pseudo points act as fixed targets within a step: no gradient flows back
//! into the matching head through the pseudo coordinates or weights. The
//! matching stage never sees pseudo points; the restoration stage never sees
//! the annotations directly (unless the opt-in union flag is set).
//!
//! Training is deterministic for a fixed seed: scenes are processed in
//! order, gradients accumulate sequentially, and the per-epoch shuffle is
//! seeded.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::{build_cost, solve_assignment};
use crate::geometry::{AnnotationSet, Point, Scene};
use crate::loss::{
    loc_grad, loc_loss, pmn_cls_grad, pmn_cls_loss, prn_weighted_cls_grad, prn_weighted_cls_loss,
    total_loss, LossWeights,
};
use crate::model::{backward, forward, forward_pair, Head, ModelParams, OutputGrad, ProposalGrid};
use crate::pseudo::{hard_threshold_select, pps_select, PseudoSet, ScheduleConfig};
use crate::seed::{derive, stream};
use crate::{Error, Result};

/// Adam moment decay rates and stabilizer; conventional values.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// How pseudo points are selected from the matching head's prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Progressive threshold driven by the epoch schedule.
    Progressive,
    /// Fixed threshold for the whole run.
    HardThreshold(f64),
}

/// Everything a training run needs beyond the data itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Distance weight in the matching cost.
    pub nu: f64,
    pub weights: LossWeights,
    /// Progressive-selection schedule; its `total_epochs` is the run length.
    pub schedule: ScheduleConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Confidence cutoff at inference, compared with `>=`.
    pub infer_threshold: f64,
    pub seed: u64,
    pub selection: Selection,
    /// Scale restoration positives by their pseudo weight; plain
    /// cross-entropy when off.
    pub weighted_cls: bool,
    /// The baseline variant turns the restoration stage off entirely and
    /// infers from the matching head.
    pub prn_enabled: bool,
    /// Optionally also feed the annotated points (weight 1) to the
    /// restoration stage. Off by default: pseudo points only.
    pub include_annotated_in_prn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            nu: 5e-2,
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            learning_rate: 2e-4,
            batch_size: 8,
            adam: AdamConfig::default(),
            infer_threshold: 0.5,
            seed: 0,
            selection: Selection::Progressive,
            weighted_cls: true,
            prn_enabled: true,
            include_annotated_in_prn: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) {
            return Err(Error::config(format!("nu {} must be positive", self.nu)));
        }
        self.weights.validate()?;
        self.schedule.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.infer_threshold > 0.0 && self.infer_threshold < 1.0) {
            return Err(Error::config(format!(
                "infer_threshold {} outside (0, 1)",
                self.infer_threshold
            )));
        }
        if let Selection::HardThreshold(tau) = self.selection {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::config(format!("hard threshold {tau} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn epochs(&self) -> u32 {
        self.schedule.total_epochs
    }
}

/// Loss components and pseudo statistics of one optimizer step, averaged
/// over the batch.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub pmn_cls: f64,
    pub pmn_loc: f64,
    pub prn_cls: f64,
    pub prn_loc: f64,
    pub total: f64,
    /// Mean pseudo-point count per scene.
    pub mean_pseudo: f64,
    /// Pseudo-selection threshold active this step.
    pub threshold: f64,
    /// Confidences that hit the log clamp while computing the losses.
    pub clamped: usize,
}

/// One training-log line.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub epoch: u32,
    pub step: u32,
    pub report: StepReport,
}

/// Fixed training-log schema.
pub const LOG_HEADER: &str = "epoch,step,pmn_cls,pmn_loc,prn_cls,prn_loc,total,n_pseudo,threshold";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.2},{:.4}\n",
            r.epoch,
            r.step,
            r.report.pmn_cls,
            r.report.pmn_loc,
            r.report.prn_cls,
            r.report.prn_loc,
            r.report.total,
            r.report.mean_pseudo,
            r.report.threshold
        ));
    }
    out
}

fn select_pseudo(cfg: &TrainConfig, prediction: &crate::model::Prediction, epoch: u32) -> Result<PseudoSet> {
    match cfg.selection {
        Selection::Progressive => pps_select(prediction, epoch, &cfg.schedule),
        Selection::HardThreshold(tau) => hard_threshold_select(prediction, tau),
    }
}

/// One optimizer step over a batch of annotated scenes at epoch `epoch`.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    batch: &[(&Scene, &AnnotationSet)],
    grid: &ProposalGrid,
    epoch: u32,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let m = grid.len();
    let w = &cfg.weights;
    let mut grad_sum = vec![0.0; params.len()];
    let mut report = StepReport {
        pmn_cls: 0.0,
        pmn_loc: 0.0,
        prn_cls: 0.0,
        prn_loc: 0.0,
        total: 0.0,
        mean_pseudo: 0.0,
        threshold: match cfg.selection {
            Selection::Progressive => cfg.schedule.threshold_at(epoch)?,
            Selection::HardThreshold(tau) => tau,
        },
        clamped: 0,
    };

    for (scene, annotation) in batch {
        if annotation.is_empty() {
            return Err(Error::config("annotation set is empty"));
        }
        let (pmn_pred, prn_pred) = forward_pair(params, scene, grid)?;
        let mut grads = OutputGrad::zeros(m);

        // matching stage: one-to-one assignment against the annotations
        let cost = build_cost(annotation.points(), &pmn_pred.points, &pmn_pred.confidences, cfg.nu)?;
        let asg = solve_assignment(&cost);
        let cls = pmn_cls_loss(&pmn_pred.confidences, &asg.matches, w.lambda2)?;
        let matched_points: Vec<Point> = asg.matches.iter().map(|&j| pmn_pred.points[j]).collect();
        let loc = loc_loss(annotation.points(), &matched_points)?;
        let pmn_total = total_loss(cls.value, loc, w.lambda1);

        grads.pmn_conf = pmn_cls_grad(&pmn_pred.confidences, &asg.matches, w.lambda2)?;
        for (g, &j) in loc_grad(annotation.points(), &matched_points)?
            .iter()
            .zip(&asg.matches)
        {
            grads.pmn_point[j].0 += w.lambda1 * g.0;
            grads.pmn_point[j].1 += w.lambda1 * g.1;
        }

        report.pmn_cls += cls.value;
        report.pmn_loc += loc;
        report.clamped += cls.clamped;
        let mut scene_total = pmn_total;

        // restoration stage: supervised by pseudo points, held fixed
        if cfg.prn_enabled {
            let pseudo = select_pseudo(cfg, &pmn_pred, epoch)?;
            let mut targets = pseudo.points.clone();
            let mut target_weights = pseudo.weights.clone();
            if cfg.include_annotated_in_prn {
                targets.extend_from_slice(annotation.points());
                target_weights.extend(std::iter::repeat(1.0).take(annotation.len()));
            }
            report.mean_pseudo += targets.len() as f64;

            let (prn_cls, prn_loc_val) = if targets.is_empty() {
                // nothing cleared the threshold yet: negatives only
                let cls = prn_weighted_cls_loss(&prn_pred.confidences, &[], w.lambda_total)?;
                grads.prn_conf = prn_weighted_cls_grad(&prn_pred.confidences, &[], w.lambda_total)?;
                report.clamped += cls.clamped;
                (cls.value, 0.0)
            } else {
                let cost = build_cost(&targets, &prn_pred.points, &prn_pred.confidences, cfg.nu)?;
                let asg = solve_assignment(&cost);
                let pairs: Vec<(usize, f64)> = asg
                    .matches
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| (j, if cfg.weighted_cls { target_weights[i] } else { 1.0 }))
                    .collect();
                let cls = prn_weighted_cls_loss(&prn_pred.confidences, &pairs, w.lambda_total)?;
                let matched_points: Vec<Point> =
                    asg.matches.iter().map(|&j| prn_pred.points[j]).collect();
                let loc = loc_loss(&targets, &matched_points)?;

                grads.prn_conf =
                    prn_weighted_cls_grad(&prn_pred.confidences, &pairs, w.lambda_total)?;
                for (g, &j) in loc_grad(&targets, &matched_points)?.iter().zip(&asg.matches) {
                    grads.prn_point[j].0 += w.lambda1 * g.0;
                    grads.prn_point[j].1 += w.lambda1 * g.1;
                }
                report.clamped += cls.clamped;
                (cls.value, loc)
            };
            report.prn_cls += prn_cls;
            report.prn_loc += prn_loc_val;
            scene_total += total_loss(prn_cls, prn_loc_val, w.lambda1);
        }

        report.total += scene_total;
        let g = backward(params, scene, grid, &grads)?;
        for (acc, gi) in grad_sum.iter_mut().zip(&g) {
            *acc += gi;
        }
    }

    let n = batch.len() as f64;
    report.pmn_cls /= n;
    report.pmn_loc /= n;
    report.prn_cls /= n;
    report.prn_loc /= n;
    report.total /= n;
    report.mean_pseudo /= n;
    for g in &mut grad_sum {
        *g /= n;
    }

    opt.step(params.values_mut(), &grad_sum, cfg.learning_rate, &cfg.adam);
    Ok(report)
}

/// Full training loop: `schedule.total_epochs` epochs over a seeded shuffle
/// of the training set, one log row per optimizer step.
pub fn train(
    params: &mut ModelParams,
    train_set: &[(&Scene, &AnnotationSet)],
    grid: &ProposalGrid,
    cfg: &TrainConfig,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let mut opt = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, stream::SHUFFLE, 0));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rows = Vec::new();

    for epoch in 0..cfg.epochs() {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Scene, &AnnotationSet)> =
                chunk.iter().map(|&i| train_set[i]).collect();
            let report = train_step(params, &mut opt, &batch, grid, epoch, cfg)?;
            rows.push(LogRow {
                epoch,
                step: step as u32,
                report,
            });
        }
    }
    Ok(rows)
}

/// Counts by thresholding one head's confidences at `threshold` (inclusive).
pub fn infer_with_head(
    params: &ModelParams,
    scene: &Scene,
    grid: &ProposalGrid,
    threshold: f64,
    head: Head,
) -> Result<(usize, Vec<Point>)> {
    let pred = forward(params, scene, grid, head)?;
    let points: Vec<Point> = pred
        .confidences
        .iter()
        .zip(&pred.points)
        .filter(|(c, _)| **c >= threshold)
        .map(|(_, p)| *p)
        .collect();
    Ok((points.len(), points))
}

/// Inference-time counting: the restoration head predicts the head points
/// and the count is their number.
pub fn infer_count(
    params: &ModelParams,
    scene: &Scene,
    grid: &ProposalGrid,
    cfg: &TrainConfig,
) -> Result<(usize, Vec<Point>)> {
    infer_with_head(params, scene, grid, cfg.infer_threshold, Head::Prn)
}
