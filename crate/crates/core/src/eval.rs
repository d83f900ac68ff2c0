//! Two-stage evaluation: train a fresh model on a condensed graph only, then
//! measure accuracy on the original graph's test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::condense::{class_members, proportional_allocation, synthetic_size, SyntheticGraph};
use crate::dataset::MultimodalGraph;
use crate::error::{AutodiffError, ModelError};
use crate::graph::DenseAdjacency;
use crate::models::{
    accuracy, forward, init_params, masked_cross_entropy, predict, Architecture, GraphOperators, InitDistribution,
    ModelParams,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub runs: usize,
    /// Run `i` uses seed `seed + i`.
    pub seed: u64,
    pub inductive: bool,
    pub hidden: usize,
    pub optimizer: Optimizer,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Gcn,
            epochs: 600,
            lr: 1e-2,
            weight_decay: 5e-4,
            runs: 5,
            seed: 0,
            inductive: false,
            hidden: 256,
            optimizer: Optimizer::Adam,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        if self.runs == 0 {
            return bad("runs must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation configuration: {0}")]
    InvalidConfig(String),
    #[error("incompatible graphs: {0}")]
    Incompatible(String),
    #[error("training loss became {loss} at epoch {epoch}")]
    NonFinite { epoch: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `accuracies`.
    pub std: f64,
    pub arch: Architecture,
    pub fingerprint: String,
    pub config: EvalConfig,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// SHA-256 over the features, labels and adjacency of a condensed graph.
pub fn fingerprint(graph: &SyntheticGraph) -> String {
    let mut h = Sha256::new();
    for v in graph.features.as_slice() {
        h.update(v.to_le_bytes());
    }
    for &l in &graph.labels {
        h.update((l as u64).to_le_bytes());
    }
    for v in graph.adjacency.weights().as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (k, (p, g)) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Trains a fresh model on the condensed graph alone with full-batch
/// cross-entropy over every synthetic node. Returns the parameters with the
/// lowest training loss seen; zero epochs is rejected by `validate`, so at
/// least one step is taken.
pub fn train_on_condensed(condensed: &SyntheticGraph, cfg: &EvalConfig) -> Result<ModelParams, EvalError> {
    cfg.validate()?;
    let ops = GraphOperators::new(&condensed.adjacency.to_sparse());
    let ops = (cfg.arch != Architecture::Mlp).then_some(&ops);
    let mut params = init_params(
        cfg.arch,
        condensed.features.cols(),
        cfg.hidden,
        condensed.num_classes,
        InitDistribution::new(cfg.seed),
    );
    let all: Vec<usize> = (0..condensed.num_nodes()).collect();
    let mut adam = Adam::new(&params);
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let p = params.record(&tape);
        let x = tape.constant(condensed.features.clone());
        let logits = forward(&p, x, ops)?;
        let loss = masked_cross_entropy(logits, &condensed.labels, &all)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(EvalError::NonFinite { epoch, loss: value });
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, params.clone()));
        }
        let grads: Vec<Tensor> = tape
            .grad(loss, &p.flat())?
            .iter()
            .zip(params.tensors())
            .map(|(g, w)| {
                let mut g = (*g.value()).clone();
                if cfg.weight_decay > 0.0 {
                    g.axpy_neg(-cfg.weight_decay, w);
                }
                g
            })
            .collect();
        match cfg.optimizer {
            Optimizer::Adam => adam.update(&mut params, &grads, cfg.lr),
            Optimizer::Sgd => {
                for (w, g) in params.tensors_mut().into_iter().zip(&grads) {
                    w.axpy_neg(cfg.lr, g);
                }
            }
        }
    }

    // The final parameters were never scored; score them once.
    let tape = Tape::new();
    let p = params.record(&tape);
    let logits = forward(&p, tape.constant(condensed.features.clone()), ops)?;
    let last = masked_cross_entropy(logits, &condensed.labels, &all)?.item();
    match best {
        Some((b, kept)) if b <= last || !last.is_finite() => Ok(kept),
        _ => Ok(params),
    }
}

/// Test-split accuracy on the original graph. Inductive evaluation propagates
/// over the subgraph induced by the test nodes only.
pub fn evaluate(params: &ModelParams, graph: &MultimodalGraph, inductive: bool) -> Result<f64, EvalError> {
    if params.in_dim() != graph.modality.dim() {
        return Err(EvalError::Incompatible(format!(
            "model expects {} features, graph has {}",
            params.in_dim(),
            graph.modality.dim()
        )));
    }
    if params.num_classes() != graph.num_classes {
        return Err(EvalError::Incompatible(format!(
            "model predicts {} classes, graph has {}",
            params.num_classes(),
            graph.num_classes
        )));
    }
    let test = &graph.splits.test;
    if inductive {
        let sub = graph.adjacency.induced(test);
        let features = graph.features.gather_rows(test);
        let labels: Vec<usize> = test.iter().map(|&i| graph.labels[i]).collect();
        let ops = GraphOperators::new(&sub);
        let logits = predict(params, &features, Some(&ops))?;
        let local: Vec<usize> = (0..test.len()).collect();
        Ok(accuracy(&logits, &labels, &local))
    } else {
        let ops = GraphOperators::new(&graph.adjacency);
        let logits = predict(params, &graph.features, Some(&ops))?;
        Ok(accuracy(&logits, &graph.labels, test))
    }
}

fn check_compatible(condensed: &SyntheticGraph, graph: &MultimodalGraph) -> Result<(), EvalError> {
    if condensed.modality != graph.modality || condensed.num_classes != graph.num_classes {
        return Err(EvalError::Incompatible(format!(
            "condensed graph has {}+{} features and {} classes, original has {}+{} and {}",
            condensed.modality.d_text,
            condensed.modality.d_image,
            condensed.num_classes,
            graph.modality.d_text,
            graph.modality.d_image,
            graph.num_classes
        )));
    }
    Ok(())
}

fn single_run(condensed: &SyntheticGraph, graph: &MultimodalGraph, cfg: &EvalConfig, run: usize) -> Result<f64, EvalError> {
    let run_cfg = EvalConfig {
        seed: cfg.seed.wrapping_add(run as u64),
        ..cfg.clone()
    };
    let params = train_on_condensed(condensed, &run_cfg)?;
    evaluate(&params, graph, cfg.inductive)
}

/// Runs seeds `seed .. seed + runs` and aggregates them.
pub fn run_protocol(condensed: &SyntheticGraph, graph: &MultimodalGraph, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    run_protocol_threaded(condensed, graph, cfg, 1)
}

/// [`run_protocol`] spreading independent runs over up to `threads` threads.
/// Results are identical for any thread count.
pub fn run_protocol_threaded(
    condensed: &SyntheticGraph,
    graph: &MultimodalGraph,
    cfg: &EvalConfig,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    check_compatible(condensed, graph)?;
    let threads = threads.clamp(1, cfg.runs);
    let accuracies: Vec<f64> = if threads == 1 {
        (0..cfg.runs)
            .map(|run| single_run(condensed, graph, cfg, run))
            .collect::<Result<_, _>>()?
    } else {
        let mut slots: Vec<Option<Result<f64, EvalError>>> = (0..cfg.runs).map(|_| None).collect();
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(cfg.runs.div_ceil(threads)).enumerate() {
                let base = w * cfg.runs.div_ceil(threads);
                s.spawn(move || {
                    for (k, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(single_run(condensed, graph, cfg, base + k));
                    }
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every run executed"))
            .collect::<Result<_, _>>()?
    };
    let (mean, std) = mean_std(&accuracies);
    Ok(EvalReport {
        accuracies,
        mean,
        std,
        arch: cfg.arch,
        fingerprint: fingerprint(condensed),
        config: cfg.clone(),
    })
}

/// Class-stratified uniform sample of real training nodes with the edges they
/// induce, in the condensed-graph shape (no edge generator).
pub fn random_coreset(graph: &MultimodalGraph, ratio: f64, seed: u64) -> Result<(SyntheticGraph, Vec<usize>), EvalError> {
    let size = synthetic_size(ratio, graph.splits.train.len());
    let members = class_members(&graph.labels, &graph.splits.train, graph.num_classes);
    let present = members.iter().filter(|m| !m.is_empty()).count();
    if size < present || size > graph.splits.train.len() {
        return Err(EvalError::InvalidConfig(format!(
            "ratio {ratio} gives {size} nodes for {present} classes and {} training nodes",
            graph.splits.train.len()
        )));
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let mut alloc = proportional_allocation(&counts, size);
    // Largest-remainder rounding can ask more of a tiny class than it has.
    let mut spill = 0;
    for (a, &c) in alloc.iter_mut().zip(&counts) {
        if *a > c {
            spill += *a - c;
            *a = c;
        }
    }
    while spill > 0 {
        let c = (0..counts.len())
            .filter(|&c| alloc[c] < counts[c])
            .max_by_key(|&c| counts[c] - alloc[c])
            .expect("size <= train size");
        alloc[c] += 1;
        spill -= 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(size);
    for (class, &k) in alloc.iter().enumerate() {
        let mut pool = members[class].clone();
        pool.shuffle(&mut rng);
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        selected.extend(picked);
    }

    let sub = graph.adjacency.induced(&selected);
    let mut weights = sub.to_dense();
    for i in 0..selected.len() {
        weights.set(i, i, 1.0);
    }
    let adjacency = DenseAdjacency::new(weights).map_err(|e| EvalError::Incompatible(e.to_string()))?;
    Ok((
        SyntheticGraph {
            features: graph.features.gather_rows(&selected),
            labels: selected.iter().map(|&i| graph.labels[i]).collect(),
            modality: graph.modality,
            num_classes: graph.num_classes,
            generator: None,
            adjacency,
        },
        selected,
    ))
}
