//! Experiment orchestration: dataset building, variant runs, results tables.
//!
//! Every experiment builds one dataset from the master seed, derives one run
//! seed per (grid point, repetition) that is shared by all variants at that
//! point, and executes the runs independently. Variants at the same grid
//! point therefore see identical scenes, annotations, weight init, and
//! shuffle order; only the training policy differs, so comparisons isolate
//! the mechanism under test. Runs may execute on a worker pool; results are
//! assembled in task order, so output bytes never depend on the worker
//! count.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use sparsecrowd::geometry::{AnnotationSet, Scene};
use sparsecrowd::metrics::{count_metrics, localization_metrics, CountReport};
use sparsecrowd::model::{Head, ModelParams, ProposalGrid};
use sparsecrowd::seed::{derive, stream};
use sparsecrowd::synth::{
    disturb_ratio, generate_scene, sample_kcap, sample_partial, sample_sparse, DisturbanceSpec,
};
use sparsecrowd::train::{infer_with_head, train, LogRow, Selection, TrainConfig};

use crate::spec::{ExperimentKind, ExperimentSpec, ProtocolSpec, VariantSpec};

/// Train/test scenes of one experiment.
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn build_dataset(spec: &ExperimentSpec) -> Result<Dataset> {
    let make = |stream_tag: u64, count: usize| -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| {
                let seed = derive(spec.seed, stream_tag, i as u64);
                generate_scene(&spec.synth_config(seed)).context("generating scene")
            })
            .collect()
    };
    Ok(Dataset {
        train: make(stream::SCENE_TRAIN, spec.dataset.train_scenes)?,
        test: make(stream::SCENE_TEST, spec.dataset.test_scenes)?,
    })
}

/// Training policy variants compared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Matching stage only; counts read from the matching head.
    Baseline,
    /// Full pipeline: progressive selection + weighted loss.
    Ppm,
    /// Restoration stage fed by a fixed hard threshold, unweighted loss.
    PpmHard,
    /// Hard threshold with the weighted loss.
    PpmHardWeighted,
    /// Progressive selection without the weighted loss.
    PpmPpsOnly,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ppm => "ppm",
            Variant::PpmHard => "hard",
            Variant::PpmHardWeighted => "hard_weighted",
            Variant::PpmPpsOnly => "pps_only",
        }
    }

    fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Variant::Baseline => {
                cfg.prn_enabled = false;
            }
            Variant::Ppm => {}
            Variant::PpmHard => {
                cfg.selection = Selection::HardThreshold(cfg.schedule.tau1);
                cfg.weighted_cls = false;
            }
            Variant::PpmHardWeighted => {
                cfg.selection = Selection::HardThreshold(cfg.schedule.tau1);
            }
            Variant::PpmPpsOnly => {
                cfg.weighted_cls = false;
            }
        }
    }

    /// The head counts are read from at inference time.
    pub fn infer_head(self) -> Head {
        match self {
            Variant::Baseline => Head::Pmn,
            _ => Head::Prn,
        }
    }
}

impl From<VariantSpec> for Variant {
    fn from(v: VariantSpec) -> Self {
        match v {
            VariantSpec::Baseline => Variant::Baseline,
            VariantSpec::Ppm => Variant::Ppm,
        }
    }
}

/// How a run annotates the training scenes.
#[derive(Debug, Clone, Copy)]
pub enum AnnotationPlan {
    Sparse { ratio: f64 },
    /// Per-scene ratio drawn from a clipped Gaussian around `base`.
    SparseDisturbed { base: f64, variance: f64 },
    Partial { ratio: f64 },
    KCap { k: usize },
}

pub fn annotate(
    scenes: &[Scene],
    plan: AnnotationPlan,
    run_seed: u64,
) -> Result<Vec<AnnotationSet>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let seed = derive(run_seed, stream::ANNOTATION, i as u64);
            let set = match plan {
                AnnotationPlan::Sparse { ratio } => sample_sparse(scene, ratio, seed)?,
                AnnotationPlan::SparseDisturbed { base, variance } => {
                    let spec = DisturbanceSpec::new(variance)?;
                    let r = disturb_ratio(base, &spec, derive(run_seed, stream::DISTURB, i as u64));
                    sample_sparse(scene, r, seed)?
                }
                AnnotationPlan::Partial { ratio } => sample_partial(scene, ratio, seed)?,
                AnnotationPlan::KCap { k } => sample_kcap(scene, k, seed)?,
            };
            Ok(set)
        })
        .collect()
}

/// One unit of work: train a variant and evaluate it on the test scenes.
pub struct RunTask {
    pub label: String,
    pub variant: Variant,
    pub plan: AnnotationPlan,
    pub run_seed: u64,
}

/// Outcome of a [`RunTask`].
pub struct RunResult {
    pub label: String,
    pub count: CountReport,
    /// (sigma, precision, recall, f1) rows, micro-averaged over scenes.
    pub localization: Vec<(f64, f64, f64, f64)>,
    pub log: Vec<LogRow>,
    pub params: ModelParams,
}

pub fn execute_run(spec: &ExperimentSpec, dataset: &Dataset, task: &RunTask) -> Result<RunResult> {
    let arch = spec.arch();
    let grid = arch.proposal_grid()?;
    let annotations = annotate(&dataset.train, task.plan, task.run_seed)?;
    let pairs: Vec<(&Scene, &AnnotationSet)> =
        dataset.train.iter().zip(annotations.iter()).collect();

    let mut cfg = spec.train_config(task.run_seed);
    task.variant.apply(&mut cfg);
    let mut params = ModelParams::random(arch, derive(task.run_seed, stream::MODEL_INIT, 0))?;
    let log = train(&mut params, &pairs, &grid, &cfg)?;

    let (count, localization) =
        evaluate(&params, &grid, &dataset.test, &cfg, task.variant, &spec.experiment.loc_sigmas)?;
    Ok(RunResult {
        label: task.label.clone(),
        count,
        localization,
        log,
        params,
    })
}

/// Counting metrics plus micro-averaged localization at each radius.
pub fn evaluate(
    params: &ModelParams,
    grid: &ProposalGrid,
    test: &[Scene],
    cfg: &TrainConfig,
    variant: Variant,
    sigmas: &[f64],
) -> Result<(CountReport, Vec<(f64, f64, f64, f64)>)> {
    let head = variant.infer_head();
    let mut pairs = Vec::with_capacity(test.len());
    let mut predictions = Vec::with_capacity(test.len());
    for scene in test {
        let (count, points) = infer_with_head(params, scene, grid, cfg.infer_threshold, head)?;
        pairs.push((scene.count(), count));
        predictions.push(points);
    }
    let count = count_metrics(&pairs)?;

    let mut localization = Vec::new();
    for &sigma in sigmas {
        let mut tp = 0usize;
        let mut total_pred = 0usize;
        let mut total_truth = 0usize;
        for (scene, points) in test.iter().zip(&predictions) {
            let r = localization_metrics(points, scene.ground_truth(), sigma)?;
            tp += r.true_positives;
            total_pred += points.len();
            total_truth += scene.count();
        }
        let precision = if total_pred > 0 { tp as f64 / total_pred as f64 } else { 0.0 };
        let recall = if total_truth > 0 { tp as f64 / total_truth as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        localization.push((sigma, precision, recall, f1));
    }
    Ok((count, localization))
}

/// A results table: fixed header, formatted rows.
pub struct ResultsTable {
    pub header: String,
    pub rows: Vec<String>,
}

impl ResultsTable {
    fn render(&self, spec_hash: &str, failure: Option<&str>) -> String {
        let mut out = format!("# spec_hash={spec_hash}\n{}\n", self.header);
        for row in &self.rows {
            out.push_str(row);
            out.push('\n');
        }
        if let Some(msg) = failure {
            out.push_str(&format!("# FAILED: {msg}\n"));
        }
        out
    }
}

fn run_tasks(
    spec: &ExperimentSpec,
    dataset: &Dataset,
    tasks: &[RunTask],
    workers: usize,
) -> Vec<Result<RunResult>> {
    if workers <= 1 {
        tasks.iter().map(|t| execute_run(spec, dataset, t)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| {
            use rayon::prelude::*;
            // collect keeps task order regardless of completion order
            tasks
                .par_iter()
                .map(|t| execute_run(spec, dataset, t))
                .collect()
        })
    }
}

fn ratio_label(ratio: f64) -> String {
    format!("{:.0}", ratio * 100.0)
}

fn kcap_k(spec: &ExperimentSpec, ratio: f64) -> usize {
    ((ratio * spec.dataset.expected_count).round() as usize).max(1)
}

/// Builds the task list and the rowderivation for one experiment kind.
/// Rows are emitted per task in order; the ablation kind aggregates
/// repetitions afterwards.
struct KindPlan {
    tasks: Vec<RunTask>,
    header: String,
}

fn plan_kind(spec: &ExperimentSpec) -> KindPlan {
    let e = &spec.experiment;
    let mut tasks = Vec::new();
    let header;
    match spec.kind {
        ExperimentKind::RatioSweep => {
            header = "ratio,variant,mae,mse".to_string();
            for (ri, &ratio) in e.ratios.iter().enumerate() {
                let run_seed = derive(spec.seed, stream::RUN, ri as u64);
                for variant in [Variant::Baseline, Variant::Ppm] {
                    tasks.push(RunTask {
                        label: format!("ratio{}_{}", ratio_label(ratio), variant.label()),
                        variant,
                        plan: AnnotationPlan::Sparse { ratio },
                        run_seed,
                    });
                }
            }
        }
        ExperimentKind::AblationPps => {
            header = "variant,weighted,mae,mse".to_string();
            let ratio = e.ablation_ratio;
            for rep in 0..e.seeds_per_variant {
                let run_seed = derive(spec.seed, stream::RUN, 1000 + rep as u64);
                for variant in [
                    Variant::Baseline,
                    Variant::PpmHard,
                    Variant::PpmHardWeighted,
                    Variant::PpmPpsOnly,
                    Variant::Ppm,
                ] {
                    tasks.push(RunTask {
                        label: format!("rep{rep}_{}", variant.label()),
                        variant,
                        plan: AnnotationPlan::Sparse { ratio },
                        run_seed,
                    });
                }
            }
        }
        ExperimentKind::Disturbance => {
            header = "variance,range_pp,mae,mse".to_string();
            for (vi, &variance) in e.variances.iter().enumerate() {
                let run_seed = derive(spec.seed, stream::RUN, 2000 + vi as u64);
                tasks.push(RunTask {
                    label: format!("var{variance}"),
                    variant: Variant::Ppm,
                    plan: AnnotationPlan::SparseDisturbed {
                        base: e.base_ratio,
                        variance,
                    },
                    run_seed,
                });
            }
        }
        ExperimentKind::ProtocolCompare => {
            header = "protocol,ratio,mae,mse".to_string();
            for (ri, &ratio) in e.protocol_ratios.iter().enumerate() {
                let run_seed = derive(spec.seed, stream::RUN, 3000 + ri as u64);
                tasks.push(RunTask {
                    label: format!("sparse{}", ratio_label(ratio)),
                    variant: Variant::Ppm,
                    plan: AnnotationPlan::Sparse { ratio },
                    run_seed,
                });
                tasks.push(RunTask {
                    label: format!("partial{}", ratio_label(ratio)),
                    variant: Variant::Ppm,
                    plan: AnnotationPlan::Partial { ratio },
                    run_seed,
                });
            }
        }
        ExperimentKind::Kcap => {
            header = "method,ratio,k,mae,mse".to_string();
            for (ri, &ratio) in e.kcap_ratios.iter().enumerate() {
                let run_seed = derive(spec.seed, stream::RUN, 4000 + ri as u64);
                let k = kcap_k(spec, ratio);
                tasks.push(RunTask {
                    label: format!("baseline_sparse{}", ratio_label(ratio)),
                    variant: Variant::Baseline,
                    plan: AnnotationPlan::Sparse { ratio },
                    run_seed,
                });
                tasks.push(RunTask {
                    label: format!("ppm_sparse{}", ratio_label(ratio)),
                    variant: Variant::Ppm,
                    plan: AnnotationPlan::Sparse { ratio },
                    run_seed,
                });
                tasks.push(RunTask {
                    label: format!("ppm_kcap{}", ratio_label(ratio)),
                    variant: Variant::Ppm,
                    plan: AnnotationPlan::KCap { k },
                    run_seed,
                });
            }
        }
        ExperimentKind::Localization => {
            header = "ratio,sigma,precision,recall,f1".to_string();
            for (ri, &ratio) in e.loc_ratios.iter().enumerate() {
                let run_seed = derive(spec.seed, stream::RUN, 5000 + ri as u64);
                tasks.push(RunTask {
                    label: format!("loc{}", ratio_label(ratio)),
                    variant: Variant::Ppm,
                    plan: AnnotationPlan::Sparse { ratio },
                    run_seed,
                });
            }
        }
    }
    KindPlan { tasks, header }
}

fn rows_for(
    spec: &ExperimentSpec,
    results: &[RunResult],
) -> Vec<String> {
    let e = &spec.experiment;
    let mut rows = Vec::new();
    match spec.kind {
        ExperimentKind::RatioSweep => {
            for (ti, r) in results.iter().enumerate() {
                let ratio = e.ratios[ti / 2];
                let variant = if ti % 2 == 0 { "baseline" } else { "ppm" };
                rows.push(format!(
                    "{:.2},{},{:.3},{:.3}",
                    ratio, variant, r.count.mae, r.count.mse
                ));
            }
        }
        ExperimentKind::AblationPps => {
            // average over repetitions, one row per variant
            let variants = [
                ("baseline", "no"),
                ("hard", "no"),
                ("hard_weighted", "yes"),
                ("pps_only", "no"),
                ("ppm", "yes"),
            ];
            let reps = e.seeds_per_variant as usize;
            for (vi, (label, weighted)) in variants.iter().enumerate() {
                let mut mae = 0.0;
                let mut mse = 0.0;
                for rep in 0..reps {
                    let r = &results[rep * variants.len() + vi];
                    mae += r.count.mae;
                    mse += r.count.mse;
                }
                rows.push(format!(
                    "{},{},{:.3},{:.3}",
                    label,
                    weighted,
                    mae / reps as f64,
                    mse / reps as f64
                ));
            }
        }
        ExperimentKind::Disturbance => {
            for (vi, r) in results.iter().enumerate() {
                let variance = e.variances[vi];
                let range = 3.0 * variance.sqrt();
                rows.push(format!(
                    "{:.1},{:.1},{:.3},{:.3}",
                    variance, range, r.count.mae, r.count.mse
                ));
            }
        }
        ExperimentKind::ProtocolCompare => {
            for (ti, r) in results.iter().enumerate() {
                let ratio = e.protocol_ratios[ti / 2];
                let protocol = if ti % 2 == 0 { "sparse" } else { "partial" };
                rows.push(format!(
                    "{},{:.2},{:.3},{:.3}",
                    protocol, ratio, r.count.mae, r.count.mse
                ));
            }
        }
        ExperimentKind::Kcap => {
            let methods = ["baseline_sparse", "ppm_sparse", "ppm_kcap"];
            for (ti, r) in results.iter().enumerate() {
                let ratio = e.kcap_ratios[ti / 3];
                let method = methods[ti % 3];
                rows.push(format!(
                    "{},{:.2},{},{:.3},{:.3}",
                    method,
                    ratio,
                    kcap_k(spec, ratio),
                    r.count.mae,
                    r.count.mse
                ));
            }
        }
        ExperimentKind::Localization => {
            for (ti, r) in results.iter().enumerate() {
                let ratio = e.loc_ratios[ti];
                for &(sigma, p, rec, f1) in &r.localization {
                    rows.push(format!(
                        "{:.2},{:.1},{:.4},{:.4},{:.4}",
                        ratio, sigma, p, rec, f1
                    ));
                }
            }
        }
    }
    rows
}

/// Output paths of a finished experiment.
pub struct ExperimentOutput {
    pub results_csv: PathBuf,
    pub manifest: PathBuf,
}

/// Runs the configured experiment end to end, writing `results.csv`, a JSON
/// manifest, and one training log per run into `out_dir`. On a mid-run
/// failure the completed rows are still flushed, marked FAILED.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<ExperimentOutput> {
    fs::create_dir_all(out_dir)?;
    let spec_hash = spec.content_hash();
    let dataset = build_dataset(spec)?;
    let plan = plan_kind(spec);

    let outcomes = run_tasks(spec, &dataset, &plan.tasks, workers);
    let results_csv = out_dir.join("results.csv");
    let manifest_path = out_dir.join("manifest.json");
    let log_dir = out_dir.join("logs");
    fs::create_dir_all(&log_dir)?;

    let mut results = Vec::new();
    let mut failure: Option<String> = None;
    for (task, outcome) in plan.tasks.iter().zip(outcomes) {
        match outcome {
            Ok(r) => {
                let log_path = log_dir.join(format!("{}.csv", r.label));
                let mut text = format!("# spec_hash={spec_hash}\n");
                text.push_str(&sparsecrowd::train::log_csv(&r.log));
                fs::write(&log_path, text)?;
                results.push(r);
            }
            Err(e) => {
                failure = Some(format!("run {}: {e:#}", task.label));
                break;
            }
        }
    }

    let table = ResultsTable {
        header: plan.header,
        rows: rows_for_partial(spec, &results, plan.tasks.len()),
    };
    fs::write(&results_csv, table.render(&spec_hash, failure.as_deref()))?;

    let status = match &failure {
        None => "ok".to_string(),
        Some(msg) => format!("failed: {msg}"),
    };
    let manifest = json!({
        "kind": spec.kind.name(),
        "seed": spec.seed,
        "spec_hash": spec_hash,
        "status": status,
        "rows_written": table.rows.len(),
        "resolved_spec": spec,
    });
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    if let Some(msg) = failure {
        fs::write(out_dir.join("FAILED"), &msg)?;
        bail!("{msg}");
    }
    Ok(ExperimentOutput {
        results_csv,
        manifest: manifest_path,
    })
}

/// Rows for however many results completed; aggregate kinds only emit rows
/// once all their inputs are present.
fn rows_for_partial(spec: &ExperimentSpec, results: &[RunResult], total_tasks: usize) -> Vec<String> {
    if results.len() == total_tasks {
        return rows_for(spec, results);
    }
    // partial flush: per-run rows with the raw label so nothing is lost
    results
        .iter()
        .map(|r| format!("{},{:.3},{:.3}", r.label, r.count.mae, r.count.mse))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum ProtocolChoice {
    Sparse,
    Partial,
    KCap,
}

/// The single-run annotation plan the `train` / `eval` verbs use.
pub fn single_run_plan(spec: &ExperimentSpec) -> AnnotationPlan {
    match spec.protocol {
        ProtocolSpec::Sparse => AnnotationPlan::Sparse { ratio: spec.ratio },
        ProtocolSpec::Partial => AnnotationPlan::Partial { ratio: spec.ratio },
        ProtocolSpec::Kcap => AnnotationPlan::KCap {
            k: kcap_k(spec, spec.ratio),
        },
    }
}
