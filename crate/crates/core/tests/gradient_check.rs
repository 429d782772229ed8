//! Finite-difference oracle for the reverse-mode gradients.
//!
//! Within one optimizer step the assignment and the pseudo set are fixed
//! structure: matches and pseudo targets are computed once from the current
//! parameters and then held constant, so the step loss is a smooth function
//! of the parameters. The oracle freezes that structure, evaluates the full
//! two-stage loss through the public forward path only, and compares central
//! finite differences against the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsecrowd::assignment::{build_cost, solve_assignment};
use sparsecrowd::geometry::{AnnotationSet, Point, Scene};
use sparsecrowd::loss::{
    loc_grad, loc_loss, pmn_cls_grad, pmn_cls_loss, prn_weighted_cls_grad, prn_weighted_cls_loss,
    LossWeights,
};
use sparsecrowd::model::{
    backward, forward_pair, ArchConfig, ModelParams, OutputGrad, ProposalGrid,
};
use sparsecrowd::pseudo::{pps_select, ScheduleConfig};
use sparsecrowd::synth::{generate_scene, sample_sparse, SynthConfig};

const NU: f64 = 5e-2;

/// Matching and pseudo-label structure captured at the linearization point.
struct Frozen {
    pmn_matches: Vec<usize>,
    pseudo_points: Vec<Point>,
    pseudo_weights: Vec<f64>,
    prn_matches: Vec<usize>,
}

fn freeze_structure(
    params: &ModelParams,
    scene: &Scene,
    annotation: &AnnotationSet,
    grid: &ProposalGrid,
    epoch: u32,
    schedule: &ScheduleConfig,
) -> Frozen {
    let (pmn, prn) = forward_pair(params, scene, grid).unwrap();
    let cost = build_cost(annotation.points(), &pmn.points, &pmn.confidences, NU).unwrap();
    let pmn_matches = solve_assignment(&cost).matches;

    let pseudo = pps_select(&pmn, epoch, schedule).unwrap();
    let prn_matches = if pseudo.is_empty() {
        Vec::new()
    } else {
        let cost = build_cost(&pseudo.points, &prn.points, &prn.confidences, NU).unwrap();
        solve_assignment(&cost).matches
    };
    Frozen {
        pmn_matches,
        pseudo_points: pseudo.points,
        pseudo_weights: pseudo.weights,
        prn_matches,
    }
}

/// Full two-stage loss with the structure held fixed; forward pass only.
fn frozen_loss(
    params: &ModelParams,
    scene: &Scene,
    annotation: &AnnotationSet,
    grid: &ProposalGrid,
    frozen: &Frozen,
    w: &LossWeights,
) -> f64 {
    let (pmn, prn) = forward_pair(params, scene, grid).unwrap();

    let cls = pmn_cls_loss(&pmn.confidences, &frozen.pmn_matches, w.lambda2)
        .unwrap()
        .value;
    let matched: Vec<Point> = frozen.pmn_matches.iter().map(|&j| pmn.points[j]).collect();
    let loc = loc_loss(annotation.points(), &matched).unwrap();
    let mut total = cls + w.lambda1 * loc;

    if frozen.pseudo_points.is_empty() {
        total += prn_weighted_cls_loss(&prn.confidences, &[], w.lambda_total)
            .unwrap()
            .value;
    } else {
        let pairs: Vec<(usize, f64)> = frozen
            .prn_matches
            .iter()
            .zip(&frozen.pseudo_weights)
            .map(|(&j, &wt)| (j, wt))
            .collect();
        let cls = prn_weighted_cls_loss(&prn.confidences, &pairs, w.lambda_total)
            .unwrap()
            .value;
        let matched: Vec<Point> = frozen.prn_matches.iter().map(|&j| prn.points[j]).collect();
        let loc = loc_loss(&frozen.pseudo_points, &matched).unwrap();
        total += cls + w.lambda1 * loc;
    }
    total
}

/// Analytic gradient of [`frozen_loss`]: per-output loss gradients chained
/// through the network's reverse pass.
fn analytic_grad(
    params: &ModelParams,
    scene: &Scene,
    annotation: &AnnotationSet,
    grid: &ProposalGrid,
    frozen: &Frozen,
    w: &LossWeights,
) -> Vec<f64> {
    let (pmn, prn) = forward_pair(params, scene, grid).unwrap();
    let mut og = OutputGrad::zeros(grid.len());

    og.pmn_conf = pmn_cls_grad(&pmn.confidences, &frozen.pmn_matches, w.lambda2).unwrap();
    let matched: Vec<Point> = frozen.pmn_matches.iter().map(|&j| pmn.points[j]).collect();
    for (g, &j) in loc_grad(annotation.points(), &matched)
        .unwrap()
        .iter()
        .zip(&frozen.pmn_matches)
    {
        og.pmn_point[j].0 += w.lambda1 * g.0;
        og.pmn_point[j].1 += w.lambda1 * g.1;
    }

    if frozen.pseudo_points.is_empty() {
        og.prn_conf = prn_weighted_cls_grad(&prn.confidences, &[], w.lambda_total).unwrap();
    } else {
        let pairs: Vec<(usize, f64)> = frozen
            .prn_matches
            .iter()
            .zip(&frozen.pseudo_weights)
            .map(|(&j, &wt)| (j, wt))
            .collect();
        og.prn_conf = prn_weighted_cls_grad(&prn.confidences, &pairs, w.lambda_total).unwrap();
        let matched: Vec<Point> = frozen.prn_matches.iter().map(|&j| prn.points[j]).collect();
        for (g, &j) in loc_grad(&frozen.pseudo_points, &matched)
            .unwrap()
            .iter()
            .zip(&frozen.prn_matches)
        {
            og.prn_point[j].0 += w.lambda1 * g.0;
            og.prn_point[j].1 += w.lambda1 * g.1;
        }
    }
    backward(params, scene, grid, &og).unwrap()
}

/// Max relative error between analytic and central-difference gradients.
pub fn max_rel_error(
    params: &ModelParams,
    scene: &Scene,
    annotation: &AnnotationSet,
    grid: &ProposalGrid,
    epoch: u32,
    schedule: &ScheduleConfig,
) -> f64 {
    let w = LossWeights::default();
    let frozen = freeze_structure(params, scene, annotation, grid, epoch, schedule);
    let analytic = analytic_grad(params, scene, annotation, grid, &frozen, &w);

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = frozen_loss(&probe, scene, annotation, grid, &frozen, &w);
        probe.values_mut()[i] = orig - h;
        let down = frozen_loss(&probe, scene, annotation, grid, &frozen, &w);
        probe.values_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    worst
}

fn case(arch: ArchConfig, seed: u64, epoch_frac: f64) -> f64 {
    let scene = generate_scene(&SynthConfig {
        height: arch.height,
        width: arch.width,
        expected_count: (arch.height * arch.width) as f64 / 16.0,
        cluster_spread: 1.2,
        render_sigma: 1.0,
        seed,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let ratio = 0.4 + 0.6 * rng.random::<f64>();
    let annotation = sample_sparse(&scene, ratio, seed + 1).unwrap();
    let grid = arch.proposal_grid().unwrap();
    let params = ModelParams::random(arch, seed + 2).unwrap();
    let schedule = ScheduleConfig::default();
    let epoch = (epoch_frac * schedule.total_epochs as f64) as u32;
    max_rel_error(&params, &scene, &annotation, &grid, epoch, &schedule)
}

fn arch_matrix() -> Vec<ArchConfig> {
    vec![
        ArchConfig {
            height: 8,
            width: 8,
            stage1_channels: 2,
            stage2_channels: 3,
            stage1_stride: 2,
            stage2_stride: 2,
            anchors_per_cell: 4,
        },
        ArchConfig {
            height: 8,
            width: 12,
            stage1_channels: 3,
            stage2_channels: 2,
            stage1_stride: 2,
            stage2_stride: 2,
            anchors_per_cell: 1,
        },
        ArchConfig {
            height: 12,
            width: 12,
            stage1_channels: 2,
            stage2_channels: 2,
            stage1_stride: 2,
            stage2_stride: 3,
            anchors_per_cell: 9,
        },
        ArchConfig {
            height: 16,
            width: 16,
            stage1_channels: 4,
            stage2_channels: 5,
            stage1_stride: 4,
            stage2_stride: 1,
            anchors_per_cell: 4,
        },
    ]
}

#[test]
fn gradients_match_finite_differences_across_architectures() {
    for (i, arch) in arch_matrix().into_iter().enumerate() {
        // late epoch: low threshold, pseudo set non-empty
        let err = case(arch, 100 + i as u64, 1.0);
        assert!(err < 1e-4, "arch {i}: max relative error {err}");
    }
}

#[test]
fn gradients_match_with_empty_pseudo_set() {
    // epoch 0 keeps the threshold at tau1 = 0.6; fresh confidences sit near
    // 0.5, so nothing is selected and only the negative term supervises the
    // restoration head
    let arch = arch_matrix()[0];
    let err = case(arch, 41, 0.0);
    assert!(err < 1e-4, "max relative error {err}");
}
