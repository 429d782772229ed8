use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use sparsecrowd::geometry::{AnnotationSet, Scene};
use sparsecrowd::model::ModelParams;
use sparsecrowd::seed::{derive, stream};
use sparsecrowd::train::{log_csv, train};

use sparsecrowd_cli::experiment::{
    annotate, build_dataset, evaluate, run_experiment, single_run_plan, Variant,
};
use sparsecrowd_cli::spec::ExperimentSpec;

/// Sparse-annotation crowd counting experiments on synthetic scenes.
#[derive(Parser)]
#[command(name = "sparsecrowd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the spec's train/test scenes as text fixtures.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the spec's single-run variant and write a checkpoint.
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the spec's test scenes.
    Eval {
        #[arg(long)]
        spec: PathBuf,
        /// Directory holding checkpoint.params (as written by `train`);
        /// outputs go here too.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a full experiment grid and write its results table.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Concurrent runs; output bytes do not depend on this.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summarize a training log CSV.
    InspectLog {
        /// Path to a log written by `train` or `experiment`.
        log: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_spec(path: &Path, seed: Option<u64>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::load(path)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => generate(&load_spec(&spec, seed)?, &out),
        Command::Train { spec, out, seed } => train_once(&load_spec(&spec, seed)?, &out),
        Command::Eval { spec, out, seed } => eval_once(&load_spec(&spec, seed)?, &out),
        Command::Experiment {
            spec,
            out,
            seed,
            workers,
        } => {
            let spec = load_spec(&spec, seed)?;
            let output = run_experiment(&spec, &out, workers.max(1))?;
            println!("results: {}", output.results_csv.display());
            println!("manifest: {}", output.manifest.display());
            Ok(())
        }
        Command::InspectLog { log } => inspect_log(&log),
    }
}

fn write_scene_files(dir: &Path, prefix: &str, scenes: &[Scene]) -> Result<()> {
    for (i, scene) in scenes.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{i:04}.scene"));
        let mut buf = Vec::new();
        scene.write_text(&mut buf)?;
        fs::write(path, buf)?;
    }
    Ok(())
}

fn generate(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let scenes_dir = out.join("scenes");
    fs::create_dir_all(&scenes_dir)?;
    let dataset = build_dataset(spec)?;
    write_scene_files(&scenes_dir, "train", &dataset.train)?;
    write_scene_files(&scenes_dir, "test", &dataset.test)?;
    let manifest = json!({
        "spec_hash": spec.content_hash(),
        "train_scenes": dataset.train.len(),
        "test_scenes": dataset.test.len(),
        "resolved_spec": spec,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} train + {} test scenes to {}",
        dataset.train.len(),
        dataset.test.len(),
        scenes_dir.display()
    );
    Ok(())
}

fn train_once(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let spec_hash = spec.content_hash();
    let dataset = build_dataset(spec)?;
    let run_seed = derive(spec.seed, stream::RUN, 0);
    let plan = single_run_plan(spec);
    let annotations = annotate(&dataset.train, plan, run_seed)?;

    // annotation fixtures for provenance
    let annot_dir = out.join("annotations");
    fs::create_dir_all(&annot_dir)?;
    for (i, set) in annotations.iter().enumerate() {
        let mut buf = Vec::new();
        set.write_text(&mut buf)?;
        fs::write(annot_dir.join(format!("train_{i:04}.annot")), buf)?;
    }

    let variant: Variant = spec.variant.into();
    let mut cfg = spec.train_config(run_seed);
    match variant {
        Variant::Baseline => cfg.prn_enabled = false,
        _ => {}
    }
    let arch = spec.arch();
    let grid = arch.proposal_grid()?;
    let mut params = ModelParams::random(arch, derive(run_seed, stream::MODEL_INIT, 0))?;
    let pairs: Vec<(&Scene, &AnnotationSet)> =
        dataset.train.iter().zip(annotations.iter()).collect();
    let log = train(&mut params, &pairs, &grid, &cfg)?;

    let mut checkpoint = Vec::new();
    params.save(&mut checkpoint)?;
    fs::write(out.join("checkpoint.params"), checkpoint)?;
    fs::write(out.join("config_echo.toml"), spec.resolved_toml())?;
    let mut log_text = format!("# spec_hash={spec_hash}\n");
    log_text.push_str(&log_csv(&log));
    fs::write(out.join("train_log.csv"), log_text)?;
    println!("checkpoint + train_log.csv written to {}", out.display());
    Ok(())
}

fn eval_once(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let spec_hash = spec.content_hash();
    let checkpoint = out.join("checkpoint.params");
    if !checkpoint.exists() {
        bail!("no checkpoint.params in {} (run `train` first)", out.display());
    }
    let bytes = fs::read(&checkpoint)?;
    let params = ModelParams::load(&mut bytes.as_slice()).context("loading checkpoint")?;
    let dataset = build_dataset(spec)?;
    let grid = params.arch().proposal_grid()?;
    let cfg = spec.train_config(0);
    let variant: Variant = spec.variant.into();
    let (count, localization) = evaluate(
        &params,
        &grid,
        &dataset.test,
        &cfg,
        variant,
        &spec.experiment.loc_sigmas,
    )?;

    let mut per_scene = format!("# spec_hash={spec_hash}\n");
    per_scene.push_str(&count.per_scene_csv());
    fs::write(out.join("eval_per_scene.csv"), per_scene)?;

    let loc_json: Vec<_> = localization
        .iter()
        .map(|(sigma, p, r, f1)| {
            json!({"sigma": sigma, "precision": p, "recall": r, "f1": f1})
        })
        .collect();
    let summary = json!({
        "spec_hash": spec_hash,
        "mae": count.mae,
        "mse": count.mse,
        "scenes": count.per_scene.len(),
        "localization": loc_json,
        "resolved_spec": spec,
    });
    fs::write(out.join("eval_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("mae {:.3}  mse {:.3}", count.mae, count.mse);
    for (sigma, p, r, f1) in &localization {
        println!("sigma {sigma}: precision {p:.4} recall {r:.4} f1 {f1:.4}");
    }
    Ok(())
}

fn inspect_log(path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().peekable();
    let mut spec_hash = None;
    while let Some(line) = lines.peek() {
        if let Some(rest) = line.strip_prefix("# spec_hash=") {
            spec_hash = Some(rest.to_string());
            lines.next();
        } else {
            break;
        }
    }
    let header = lines.next().context("log is empty")?;
    if header != sparsecrowd::train::LOG_HEADER {
        bail!("unrecognized log header: {header}");
    }
    let mut rows = 0usize;
    let mut first: Option<Vec<f64>> = None;
    let mut last: Option<Vec<f64>> = None;
    for line in lines {
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("bad log line: {line}"))?;
        if fields.len() != 9 {
            bail!("expected 9 columns, found {}: {line}", fields.len());
        }
        if first.is_none() {
            first = Some(fields.clone());
        }
        last = Some(fields);
        rows += 1;
    }
    let first = first.context("log has no rows")?;
    let last = last.unwrap();

    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    if let Some(h) = spec_hash {
        writeln!(w, "spec_hash: {h}")?;
    }
    writeln!(w, "rows: {rows}")?;
    writeln!(w, "epochs: {:.0}..{:.0}", first[0], last[0])?;
    writeln!(w, "total loss: {:.6} -> {:.6}", first[6], last[6])?;
    writeln!(w, "pseudo points per scene: {:.2} -> {:.2}", first[7], last[7])?;
    writeln!(w, "selection threshold: {:.4} -> {:.4}", first[8], last[8])?;
    Ok(())
}
