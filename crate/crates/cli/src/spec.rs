//! Declarative experiment specs.
//!
//! A spec is one TOML file; every field has a default, and the fully
//! resolved spec (defaults made explicit) is echoed into the run manifest,
//! so no silent default can influence a result. A run is fully specified by
//! (spec file, seed) and replays byte-identically.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sparsecrowd::loss::LossWeights;
use sparsecrowd::model::ArchConfig;
use sparsecrowd::pseudo::ScheduleConfig;
use sparsecrowd::synth::SynthConfig;
use sparsecrowd::train::{Selection, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RatioSweep,
    AblationPps,
    Disturbance,
    ProtocolCompare,
    Kcap,
    Localization,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::RatioSweep => "ratio_sweep",
            ExperimentKind::AblationPps => "ablation_pps",
            ExperimentKind::Disturbance => "disturbance",
            ExperimentKind::ProtocolCompare => "protocol_compare",
            ExperimentKind::Kcap => "kcap",
            ExperimentKind::Localization => "localization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolSpec {
    Sparse,
    Partial,
    Kcap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSpec {
    /// Matching stage only; inference from the matching head.
    Baseline,
    /// Both stages, progressive selection, weighted loss.
    Ppm,
}

/// Synthetic dataset shape shared by every run of an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub expected_count: f64,
    pub cluster_spread: f64,
    pub render_sigma: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            height: 32,
            width: 32,
            expected_count: 40.0,
            cluster_spread: 1.5,
            render_sigma: 1.0,
            train_scenes: 64,
            test_scenes: 32,
        }
    }
}

/// Optimization and loss hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub nu: f64,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub shape_k: f64,
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub infer_threshold: f64,
    pub include_annotated_in_prn: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            nu: 5e-2,
            lambda: 0.4,
            lambda1: 0.05,
            lambda2: 0.4,
            tau1: 0.6,
            tau2: 0.4,
            shape_k: 3.0,
            epochs: 60,
            // the compact trunk trains from scratch, so the desk-scale
            // default runs hotter than the reference fine-tuning rate
            learning_rate: 5e-3,
            batch_size: 8,
            infer_threshold: 0.5,
            include_annotated_in_prn: false,
        }
    }
}

/// Network shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub stage1_channels: usize,
    pub stage2_channels: usize,
    pub stage1_stride: usize,
    pub stage2_stride: usize,
    pub anchors_per_cell: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            stage1_channels: 8,
            stage2_channels: 16,
            stage1_stride: 2,
            stage2_stride: 2,
            anchors_per_cell: 4,
        }
    }
}

/// Kind-specific grids. Only the knobs of the selected kind are read, but
/// all of them are echoed into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentParams {
    /// ratio_sweep: annotation ratios, one baseline + one full run each.
    pub ratios: Vec<f64>,
    /// ablation_pps: the fixed ratio all selection variants train at.
    pub ablation_ratio: f64,
    /// ablation_pps: repetitions averaged per variant.
    pub seeds_per_variant: u32,
    /// disturbance: the requested annotation ratio.
    pub base_ratio: f64,
    /// disturbance: Gaussian variances in percentage points squared.
    pub variances: Vec<f64>,
    /// protocol_compare: ratios evaluated for sparse vs partial.
    pub protocol_ratios: Vec<f64>,
    /// kcap: ratios mapped to K = round(ratio * expected_count).
    pub kcap_ratios: Vec<f64>,
    /// localization: annotation ratios trained.
    pub loc_ratios: Vec<f64>,
    /// localization: match radii.
    pub loc_sigmas: Vec<f64>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            ratios: vec![1.0, 0.8, 0.6, 0.4, 0.2],
            ablation_ratio: 0.6,
            seeds_per_variant: 3,
            base_ratio: 0.8,
            variances: vec![0.0, 3.0, 5.0, 11.0, 25.0],
            protocol_ratios: vec![0.9, 0.8, 0.5],
            kcap_ratios: vec![0.8, 0.7],
            loc_ratios: vec![0.9, 0.8],
            loc_sigmas: vec![4.0, 8.0],
        }
    }
}

/// One experiment, fully described.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Annotation ratio for the single-run `train` / `eval` verbs.
    pub ratio: f64,
    /// Annotation protocol for the single-run verbs.
    pub protocol: ProtocolSpec,
    /// Variant for the single-run verbs.
    pub variant: VariantSpec,
    pub dataset: DatasetSpec,
    pub train: TrainSpec,
    pub model: ModelSpec,
    pub experiment: ExperimentParams,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            kind: ExperimentKind::RatioSweep,
            seed: 7,
            ratio: 0.8,
            protocol: ProtocolSpec::Sparse,
            variant: VariantSpec::Ppm,
            dataset: DatasetSpec::default(),
            train: TrainSpec::default(),
            model: ModelSpec::default(),
            experiment: ExperimentParams::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading spec {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).context("parsing experiment spec")?;
        spec.validate()?;
        Ok(spec)
    }

    /// Cross-field validation with errors that name the offending field.
    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.dataset;
        if d.train_scenes == 0 || d.test_scenes == 0 {
            bail!("dataset.train_scenes and dataset.test_scenes must be positive");
        }
        if !(d.expected_count > 0.0) {
            bail!("dataset.expected_count must be positive");
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            bail!("ratio {} outside (0, 1]", self.ratio);
        }
        for r in self
            .experiment
            .ratios
            .iter()
            .chain(&self.experiment.protocol_ratios)
            .chain(&self.experiment.kcap_ratios)
            .chain(&self.experiment.loc_ratios)
            .chain([&self.experiment.ablation_ratio, &self.experiment.base_ratio])
        {
            if !(*r > 0.0 && *r <= 1.0) {
                bail!("experiment ratio {r} outside (0, 1]");
            }
        }
        if self.experiment.seeds_per_variant == 0 {
            bail!("experiment.seeds_per_variant must be positive");
        }
        for v in &self.experiment.variances {
            if !(*v >= 0.0) {
                bail!("experiment.variances entry {v} must be non-negative");
            }
        }
        for s in &self.experiment.loc_sigmas {
            if !(*s > 0.0) {
                bail!("experiment.loc_sigmas entry {s} must be positive");
            }
        }
        self.arch()
            .validate()
            .map_err(|e| anyhow::anyhow!("model section incompatible with dataset dims: {e}"))?;
        self.train_config(0)
            .validate()
            .map_err(|e| anyhow::anyhow!("train section invalid: {e}"))?;
        Ok(())
    }

    /// The resolved spec as canonical TOML, all defaults explicit.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    /// Content hash of the resolved spec; embedded in every output file.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.resolved_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn synth_config(&self, scene_seed: u64) -> SynthConfig {
        SynthConfig {
            height: self.dataset.height,
            width: self.dataset.width,
            expected_count: self.dataset.expected_count,
            cluster_spread: self.dataset.cluster_spread,
            render_sigma: self.dataset.render_sigma,
            seed: scene_seed,
        }
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            height: self.dataset.height,
            width: self.dataset.width,
            stage1_channels: self.model.stage1_channels,
            stage2_channels: self.model.stage2_channels,
            stage1_stride: self.model.stage1_stride,
            stage2_stride: self.model.stage2_stride,
            anchors_per_cell: self.model.anchors_per_cell,
        }
    }

    pub fn train_config(&self, run_seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            nu: t.nu,
            weights: LossWeights {
                lambda_total: t.lambda,
                lambda1: t.lambda1,
                lambda2: t.lambda2,
            },
            schedule: ScheduleConfig {
                tau1: t.tau1,
                tau2: t.tau2,
                total_epochs: t.epochs,
                shape_k: t.shape_k,
            },
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            adam: Default::default(),
            infer_threshold: t.infer_threshold,
            seed: run_seed,
            selection: Selection::Progressive,
            weighted_cls: true,
            prn_enabled: true,
            include_annotated_in_prn: t.include_annotated_in_prn,
        }
    }
}
