use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mmgc_core::condense::{condense_with, CondenseConfig, CondenseError, MetricsLog};
use mmgc_core::dataset::{generate_synthetic, load_dataset, save_dataset, SynthGenParams};
use mmgc_core::DatasetError;
use mmgc_core::eval::{random_coreset, run_protocol_threaded, EvalConfig, EvalError, Optimizer};
use mmgc_core::store::{load_condensed, save_condensed};
use serde_json::json;

use crate::manifest::{hash_dir, RunManifest};
use crate::{BaselineArgs, CliError, CondenseArgs, EvalArgs, GenSynthArgs, OptimizerArg, OutArgs, WallMs};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";

fn same_path(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Creates an empty output directory, refusing to touch an existing one
/// without `--force` and never replacing one of the run's inputs.
fn prepare_out(out: &OutArgs, inputs: &[&Path]) -> Result<(), CliError> {
    let dir = &out.out;
    if let Some(input) = inputs.iter().find(|i| same_path(i, dir)) {
        return Err(CliError::Usage(format!("--out {} is also an input", input.display())));
    }
    if dir.exists() {
        let empty = dir.is_dir() && fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?.next().is_none();
        if !empty && !out.force {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        if dir.is_dir() {
            fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        } else {
            fs::remove_file(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn dataset_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::InvalidParams(m) => CliError::Usage(m),
        other => CliError::Failed(other.to_string()),
    }
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::InvalidConfig(m) => CliError::Usage(m),
        EvalError::Incompatible(m) => CliError::Incompatible(m),
        EvalError::NonFinite { .. } => CliError::Numerical(e.to_string()),
        other => CliError::Failed(other.to_string()),
    }
}

fn write_metrics(dir: &Path, log: &MetricsLog, wall: WallMs) -> Result<(), CliError> {
    let path = dir.join(METRICS_FILE);
    let text = match wall {
        WallMs::Measured => log.to_jsonl(),
        WallMs::Zero => log.without_timing().to_jsonl(),
    };
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn gen_synth(a: GenSynthArgs, threads: usize) -> Result<(), CliError> {
    let params = SynthGenParams {
        num_nodes: a.nodes,
        num_classes: a.classes,
        d_text: a.d_text,
        d_image: a.d_image,
        intra_class_edge_prob: a.p_in,
        inter_class_edge_prob: a.p_out,
        conflict_rate: a.conflict,
        feature_noise_std: a.noise,
        seed: a.seed,
    };
    params.validate().map_err(dataset_error)?;
    prepare_out(&a.out, &[])?;
    let dir = &a.out.out;
    let config = serde_json::to_value(&params).expect("params serialize");
    let mut manifest = RunManifest::start("gen-synth", config, a.seed, BTreeMap::new(), threads);
    manifest.write(dir)?;
    let graph = generate_synthetic(&params).map_err(dataset_error)?;
    save_dataset(&graph, dir).map_err(dataset_error)?;
    manifest.finish(dir, "ok")?;
    println!(
        "wrote {} nodes, {} edges, planted conflict fraction {:.4} to {}",
        graph.num_nodes(),
        graph.adjacency.num_edges(),
        graph.planted_conflict_fraction().unwrap_or(0.0),
        dir.display()
    );
    Ok(())
}

pub fn condense(a: CondenseArgs, threads: usize) -> Result<(), CliError> {
    let cfg = CondenseConfig {
        lambda: a.lambda,
        ratio: a.ratio,
        lr_feat: a.lr_feat,
        lr_phi: a.lr_phi,
        lr_theta: a.lr_theta,
        outer: a.outer,
        inner: a.inner,
        mode: a.mode,
        seed: a.seed,
        threshold: a.threshold,
        hidden: a.hidden,
        generator_hidden: a.generator_hidden,
        real_batch: a.real_batch,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let graph = load_dataset(&a.data).map_err(dataset_error)?;
    let inputs = hash_dir(&a.data)?;
    prepare_out(&a.out, &[&a.data])?;
    let dir = &a.out.out;
    let config = json!({ "condense": cfg, "wall_ms": format!("{:?}", a.wall_ms).to_lowercase() });
    let mut manifest = RunManifest::start("condense", config, a.seed, inputs, threads);
    manifest.write(dir)?;

    match condense_with(&graph, &cfg, |_, _| {}) {
        Ok((syn, log)) => {
            write_metrics(dir, &log, a.wall_ms)?;
            save_condensed(&syn, dir).map_err(dataset_error)?;
            manifest.finish(dir, "ok")?;
            let last = log.steps.last();
            println!(
                "condensed to {} nodes; final loss_gm {}, r_struct {}",
                syn.num_nodes(),
                last.map_or(f64::NAN, |r| r.loss_gm),
                last.map_or(f64::NAN, |r| r.r_struct)
            );
            Ok(())
        }
        Err(CondenseError::Diverged { k, t, what, log }) => {
            write_metrics(dir, &log, a.wall_ms)?;
            manifest.finish(dir, "diverged")?;
            Err(CliError::Numerical(format!(
                "condensation diverged at outer {k}, inner {t} ({what}); metrics of {} completed steps kept in {}",
                log.steps.len(),
                dir.join(METRICS_FILE).display()
            )))
        }
        Err(CondenseError::InvalidConfig(m)) => {
            manifest.finish(dir, "invalid-config")?;
            Err(CliError::Usage(m))
        }
        Err(e) => {
            manifest.finish(dir, "failed")?;
            Err(CliError::Failed(e.to_string()))
        }
    }
}

pub fn eval(a: EvalArgs, threads: usize) -> Result<(), CliError> {
    let cfg = EvalConfig {
        arch: a.model,
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        runs: a.runs,
        seed: a.seed,
        inductive: a.inductive,
        hidden: a.hidden,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
    };
    cfg.validate().map_err(eval_error)?;
    if let Some(t) = a.threshold {
        if !(0.0..1.0).contains(&t) {
            return Err(CliError::Usage("--threshold must lie in [0, 1)".into()));
        }
    }
    let mut condensed = load_condensed(&a.condensed).map_err(dataset_error)?;
    if let Some(t) = a.threshold {
        condensed.adjacency = condensed.adjacency.sparsified(t);
    }
    let graph = load_dataset(&a.data).map_err(dataset_error)?;
    let mut inputs = hash_dir(&a.condensed)?;
    inputs.extend(hash_dir(&a.data)?);
    prepare_out(&a.out, &[&a.condensed, &a.data])?;
    let dir = &a.out.out;
    let config = json!({ "eval": cfg, "threshold": a.threshold });
    let mut manifest = RunManifest::start("eval", config, a.seed, inputs, threads);
    manifest.write(dir)?;
    let report = match run_protocol_threaded(&condensed, &graph, &cfg, threads) {
        Ok(r) => r,
        Err(e) => {
            manifest.finish(dir, "failed")?;
            return Err(eval_error(e));
        }
    };
    let path = dir.join(crate::commands::REPORT_FILE);
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    manifest.finish(dir, "ok")?;
    println!(
        "{} accuracy {:.4} ± {:.4} over {} runs",
        report.arch,
        report.mean,
        report.std,
        report.accuracies.len()
    );
    Ok(())
}

pub fn baseline_random(a: BaselineArgs, threads: usize) -> Result<(), CliError> {
    if !(a.ratio > 0.0 && a.ratio < 1.0) {
        return Err(CliError::Usage("--ratio must lie in (0, 1)".into()));
    }
    let graph = load_dataset(&a.data).map_err(dataset_error)?;
    let inputs = hash_dir(&a.data)?;
    let (coreset, selected) = random_coreset(&graph, a.ratio, a.seed).map_err(eval_error)?;
    prepare_out(&a.out, &[&a.data])?;
    let dir = &a.out.out;
    let config = json!({ "ratio": a.ratio, "seed": a.seed, "selected": selected });
    let mut manifest = RunManifest::start("baseline-random", config, a.seed, inputs, threads);
    manifest.write(dir)?;
    save_condensed(&coreset, dir).map_err(dataset_error)?;
    manifest.finish(dir, "ok")?;
    println!("sampled {} training nodes into {}", coreset.num_nodes(), dir.display());
    Ok(())
}
