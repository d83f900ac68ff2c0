//! Browser bindings for three small interactive operations: projecting a
//! pair of 2-D modality gradients, measuring conflict on a generated graph,
//! and running a short condensation whose curves the page plots.
//!
//! Each operation is a plain function returning JSON so that it can be
//! tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use mmgc_core::condense::{condense, decouple, init_synthetic, CondenseConfig, GradientField, Mode, RealGradients};
use mmgc_core::dataset::{generate_synthetic, ModalitySplit, MultimodalGraph, SynthGenParams};
use mmgc_core::eval::{run_protocol, EvalConfig};
use mmgc_core::models::{init_params, Architecture, InitDistribution};
use mmgc_core::tensor::Tensor;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest loop counts the page may request; keeps a click under a few seconds.
const MAX_OUTER: usize = 10;
const MAX_INNER: usize = 10;

fn demo_params(conflict: f64, seed: u32) -> SynthGenParams {
    SynthGenParams {
        num_nodes: 240,
        num_classes: 3,
        d_text: 4,
        d_image: 4,
        intra_class_edge_prob: 0.1,
        inter_class_edge_prob: 0.01,
        conflict_rate: conflict,
        feature_noise_std: 0.3,
        seed: u64::from(seed),
    }
}

fn demo_graph(conflict: f64, seed: u32) -> Result<MultimodalGraph, String> {
    generate_synthetic(&demo_params(conflict, seed)).map_err(|e| e.to_string())
}

/// Decouples one text/image gradient pair of equal length.
pub fn decouple_pair(text: &[f64], image: &[f64]) -> Result<Value, String> {
    if text.len() != image.len() || text.is_empty() {
        return Err(format!("slices must be non-empty and equal in length, got {} and {}", text.len(), image.len()));
    }
    let d = text.len();
    let row: Vec<f64> = text.iter().chain(image).copied().collect();
    let field = GradientField::new(Tensor::from_vec(1, 2 * d, row).map_err(|e| e.to_string())?, ModalitySplit::new(d, d))
        .map_err(|e| e.to_string())?;
    let out = decouple(&field);
    let inner: f64 = text.iter().zip(image).map(|(a, b)| a * b).sum();
    Ok(json!({
        "conflict": inner < 0.0,
        "inner_product": inner,
        "text": out.text(0),
        "image": out.image(0),
        "combined": out.text(0).iter().zip(out.image(0)).map(|(a, b)| a + b).collect::<Vec<_>>(),
    }))
}

/// Generates a small dataset and measures conflict of the synthetic-loss
/// feature gradients at initialization, before any condensation step.
pub fn conflict_probe(conflict: f64, seed: u32) -> Result<Value, String> {
    let graph = demo_graph(conflict, seed)?;
    let syn = init_synthetic(&graph, 0.2, u64::from(seed), 8).map_err(|e| e.to_string())?;
    let theta = init_params(Architecture::Gcn, graph.modality.dim(), 32, graph.num_classes, InitDistribution::new(u64::from(seed)));
    let real = RealGradients::new(&graph);
    let targets = real.compute(&theta, &real.full_batches()).map_err(|e| e.to_string())?;
    let generator = syn.generator.as_ref().ok_or("initialization has no generator")?;
    let step = mmgc_core::condense::meta_step(
        &syn.features,
        generator,
        &theta,
        &syn.labels,
        syn.num_classes,
        syn.modality,
        &targets,
        Mode::Srgm,
        0.0,
    )
    .map_err(|e| e.to_string())?;
    Ok(json!({
        "nodes": graph.num_nodes(),
        "edges": graph.adjacency.num_edges(),
        "planted_conflict": graph.planted_conflict_fraction(),
        "synthetic_nodes": syn.num_nodes(),
        "conflict_rate": step.stats.conflict_rate,
        "mean_cosine": step.stats.mean_cosine,
        "dirichlet_raw": step.stats.dirichlet_raw,
        "dirichlet_decoupled": step.stats.dirichlet_decoupled,
    }))
}

/// Runs a short condensation and returns per-step curves and a quick GCN score.
pub fn condense_curves(conflict: f64, lambda: f64, mode: &str, seed: u32, outer: usize, inner: usize) -> Result<Value, String> {
    let mode: Mode = mode.parse()?;
    if outer == 0 || outer > MAX_OUTER || inner == 0 || inner > MAX_INNER {
        return Err(format!("outer must lie in 1..={MAX_OUTER} and inner in 1..={MAX_INNER}"));
    }
    let graph = demo_graph(conflict, seed)?;
    let cfg = CondenseConfig {
        lambda,
        ratio: 0.05,
        lr_feat: 3e-3,
        outer,
        inner,
        mode,
        seed: u64::from(seed),
        hidden: 32,
        generator_hidden: 16,
        ..Default::default()
    };
    let (syn, log) = condense(&graph, &cfg).map_err(|e| e.to_string())?;
    let eval = EvalConfig { runs: 1, epochs: 150, hidden: 32, seed: u64::from(seed), ..Default::default() };
    let accuracy = run_protocol(&syn, &graph, &eval).map_err(|e| e.to_string())?.mean;
    let col = |f: fn(&mmgc_core::condense::StepMetrics) -> f64| log.steps.iter().map(f).collect::<Vec<f64>>();
    Ok(json!({
        "mode": mode.to_string(),
        "lambda": cfg.effective_lambda(),
        "loss_gm": col(|s| s.loss_gm),
        "r_struct": col(|s| s.r_struct),
        "conflict_rate": col(|s| s.conflict_rate),
        "dirichlet_decoupled": col(|s| s.dirichlet_decoupled),
        "synthetic_nodes": syn.num_nodes(),
        "edges": syn.adjacency.to_sparse().num_edges(),
        "gcn_accuracy": accuracy,
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = decouplePair)]
pub fn decouple_pair_js(text: Vec<f64>, image: Vec<f64>) -> Result<String, JsValue> {
    to_js(decouple_pair(&text, &image))
}

#[wasm_bindgen(js_name = conflictProbe)]
pub fn conflict_probe_js(conflict: f64, seed: u32) -> Result<String, JsValue> {
    to_js(conflict_probe(conflict, seed))
}

#[wasm_bindgen(js_name = condenseCurves)]
pub fn condense_curves_js(conflict: f64, lambda: f64, mode: &str, seed: u32, outer: u32, inner: u32) -> Result<String, JsValue> {
    to_js(condense_curves(conflict, lambda, mode, seed, outer as usize, inner as usize))
}
