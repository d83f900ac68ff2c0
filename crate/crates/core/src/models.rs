//! GCN, GraphSAGE (mean aggregator) and MLP node classifiers over the tape.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::graph::SparseAdjacency;
use crate::tensor::{CsrMatrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Gcn,
    Sage,
    Mlp,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gcn => "gcn",
            Self::Sage => "sage",
            Self::Mlp => "mlp",
        })
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "sage" => Ok(Self::Sage),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown architecture `{other}` (expected gcn, sage or mlp)")),
        }
    }
}

/// Affine layer `x·weight + bias`, weight stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub hidden: usize,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn in_dim(&self) -> usize {
        match self.arch {
            Architecture::Sage => self.layers[0].in_dim() / 2,
            _ => self.layers[0].in_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    /// Weights and biases in layer order: `w0, b0, w1, b1, …`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn record<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| (tape.var(l.weight.clone()), tape.var(l.bias.clone())))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape.
#[derive(Clone)]
pub struct ParamVars<'t> {
    pub arch: Architecture,
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> ParamVars<'t> {
    pub fn flat(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// `θ₀` sampling: Glorot-uniform weights, zero biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitDistribution {
    pub seed: u64,
}

impl InitDistribution {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn glorot_layer(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Layer {
    let bound = glorot_bound(fan_in, fan_out);
    let weight = Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
    Layer {
        weight,
        bias: Tensor::zeros(1, fan_out),
    }
}

/// Two-layer GCN / MLP (`in → hidden → classes`), or SAGE with two
/// concatenating layers and a linear head (`2·in → hidden`, `2·hidden → hidden`,
/// `hidden → classes`).
pub fn init_params(
    arch: Architecture,
    in_dim: usize,
    hidden: usize,
    num_classes: usize,
    dist: InitDistribution,
) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(dist.seed);
    let shapes: Vec<(usize, usize)> = match arch {
        Architecture::Gcn | Architecture::Mlp => vec![(in_dim, hidden), (hidden, num_classes)],
        Architecture::Sage => vec![
            (2 * in_dim, hidden),
            (2 * hidden, hidden),
            (hidden, num_classes),
        ],
    };
    let layers = shapes
        .into_iter()
        .map(|(i, o)| glorot_layer(&mut rng, i, o))
        .collect();
    ModelParams { arch, hidden, layers }
}

/// A linear node-mixing operator applied on the left of a feature matrix.
#[derive(Clone)]
pub enum Propagation<'t> {
    /// Differentiable dense operator (synthetic graphs during condensation).
    Dense(Var<'t>),
    /// Constant sparse operator.
    Sparse(Rc<CsrMatrix>, Rc<CsrMatrix>),
}

impl<'t> Propagation<'t> {
    pub fn sparse(op: CsrMatrix) -> Self {
        let t = op.transpose();
        Self::Sparse(Rc::new(op), Rc::new(t))
    }

    pub fn apply(&self, x: Var<'t>) -> Var<'t> {
        match self {
            Self::Dense(a) => a.matmul(x),
            Self::Sparse(s, _) => x.spmm(Rc::clone(s)),
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            Self::Dense(a) => a.shape()[0],
            Self::Sparse(s, _) => s.rows(),
        }
    }
}

/// Precomputed constant operators of a fixed graph.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub normalized: CsrMatrix,
    pub mean: CsrMatrix,
}

impl GraphOperators {
    pub fn new(adjacency: &SparseAdjacency) -> Self {
        Self {
            normalized: adjacency.normalized(),
            mean: adjacency.mean_operator(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.normalized.rows()
    }
}

fn check_layers(p: &ParamVars<'_>, arch: Architecture) -> Result<(), ModelError> {
    if p.arch != arch {
        return Err(ModelError::Dimension(format!("expected {arch} parameters, got {}", p.arch)));
    }
    let expected = if arch == Architecture::Sage { 3 } else { 2 };
    if p.layers.len() != expected {
        return Err(ModelError::Dimension(format!(
            "{arch} needs {expected} layers, got {}",
            p.layers.len()
        )));
    }
    Ok(())
}

fn check_input(x: Var<'_>, rows: usize, cols: usize) -> Result<(), ModelError> {
    let [r, c] = x.shape();
    if r != rows || c != cols {
        return Err(ModelError::Dimension(format!("features are {r}x{c}, expected {rows}x{cols}")));
    }
    Ok(())
}

/// `Â · ReLU(Â·X·W₁ + b₁) · W₂ + b₂`.
pub fn gcn_forward<'t>(p: &ParamVars<'t>, x: Var<'t>, prop: &Propagation<'t>) -> Result<Var<'t>, ModelError> {
    check_layers(p, Architecture::Gcn)?;
    check_input(x, prop.num_nodes(), p.layers[0].0.shape()[0])?;
    Ok(gcn_from_aggregated(p, prop.apply(x), prop))
}

/// GCN forward given `Â·X` already computed (constant inputs over a fixed
/// graph are propagated once up front).
pub fn gcn_from_aggregated<'t>(p: &ParamVars<'t>, ax: Var<'t>, prop: &Propagation<'t>) -> Var<'t> {
    let (w1, b1) = p.layers[0];
    let (w2, b2) = p.layers[1];
    let h = ax.matmul(w1).add_row(b1).relu();
    prop.apply(h.matmul(w2)).add_row(b2)
}

/// Two `ReLU([H ‖ mean_N(H)]·W + b)` layers and a linear head.
pub fn sage_forward<'t>(p: &ParamVars<'t>, x: Var<'t>, mean: &Propagation<'t>) -> Result<Var<'t>, ModelError> {
    check_layers(p, Architecture::Sage)?;
    check_input(x, mean.num_nodes(), p.layers[0].0.shape()[0] / 2)?;
    let mut h = x;
    for &(w, b) in &p.layers[..2] {
        h = h.concat_cols(mean.apply(h)).matmul(w).add_row(b).relu();
    }
    let (w, b) = p.layers[2];
    Ok(h.matmul(w).add_row(b))
}

/// `ReLU(X·W₁ + b₁)·W₂ + b₂`; no graph input at all.
pub fn mlp_forward<'t>(p: &ParamVars<'t>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
    check_layers(p, Architecture::Mlp)?;
    check_input(x, x.shape()[0], p.layers[0].0.shape()[0])?;
    let (w1, b1) = p.layers[0];
    let (w2, b2) = p.layers[1];
    Ok(x.matmul(w1).add_row(b1).relu().matmul(w2).add_row(b2))
}

/// Dispatches on the architecture with constant graph operators.
pub fn forward<'t>(
    p: &ParamVars<'t>,
    x: Var<'t>,
    ops: Option<&GraphOperators>,
) -> Result<Var<'t>, ModelError> {
    let need_ops = || ops.ok_or_else(|| ModelError::Dimension(format!("{} needs a graph", p.arch)));
    match p.arch {
        Architecture::Gcn => gcn_forward(p, x, &Propagation::sparse(need_ops()?.normalized.clone())),
        Architecture::Sage => sage_forward(p, x, &Propagation::sparse(need_ops()?.mean.clone())),
        Architecture::Mlp => mlp_forward(p, x),
    }
}

/// Logits for every node, without keeping the tape.
pub fn predict(params: &ModelParams, x: &Tensor, ops: Option<&GraphOperators>) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let p = params.record(&tape);
    let xv = tape.constant(x.clone());
    Ok((*forward(&p, xv, ops)?.value()).clone())
}

/// Mean softmax cross-entropy over the rows in `index`.
pub fn masked_cross_entropy<'t>(logits: Var<'t>, labels: &[usize], index: &[usize]) -> Result<Var<'t>, ModelError> {
    if index.is_empty() {
        return Err(ModelError::EmptyIndexSet);
    }
    let [n, c] = logits.shape();
    if labels.len() != n {
        return Err(ModelError::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    let picked_mask = Tensor::from_fn(index.len(), c, |k, j| if labels[index[k]] == j { 1.0 } else { 0.0 });
    let rows = logits.gather_rows(index);
    let picked = rows.mul_const(picked_mask).sum();
    Ok(rows
        .logsumexp_rows()
        .sum()
        .sub(picked)
        .scale(1.0 / index.len() as f64))
}

pub fn accuracy(logits: &Tensor, labels: &[usize], index: &[usize]) -> f64 {
    if index.is_empty() {
        return 0.0;
    }
    let pred = logits.argmax_rows();
    let correct = index.iter().filter(|&&i| pred[i] == labels[i]).count();
    correct as f64 / index.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pipeline_on_single_node() {
        let tape = Tape::new();
        let d = 3;
        let params = ModelParams {
            arch: Architecture::Gcn,
            hidden: d,
            layers: vec![
                Layer { weight: Tensor::identity(d), bias: Tensor::zeros(1, d) },
                Layer { weight: Tensor::identity(d), bias: Tensor::zeros(1, d) },
            ],
        };
        let p = params.record(&tape);
        let x = tape.constant(Tensor::row_vector(&[0.5, 0.0, 2.0]));
        let prop = Propagation::Dense(tape.constant(Tensor::scalar(1.0)));
        let out = gcn_forward(&p, x, &prop).unwrap();
        assert_eq!(out.value().as_slice(), &[0.5, 0.0, 2.0]);
    }

    #[test]
    fn zero_features_give_bias_path() {
        let tape = Tape::new();
        let mut params = init_params(Architecture::Gcn, 2, 3, 2, InitDistribution::new(1));
        params.layers[0].bias = Tensor::row_vector(&[0.5, -1.0, 2.0]);
        params.layers[1].bias = Tensor::row_vector(&[0.1, -0.2]);
        let a = SparseAdjacency::from_edges(3, &[(0, 1)]);
        let ops = GraphOperators::new(&a);
        let out = predict(&params, &Tensor::zeros(3, 2), Some(&ops)).unwrap();
        let relu_b1 = Tensor::row_vector(&[0.5, 0.0, 2.0]);
        let hw = Tensor::from_fn(3, 3, |_, j| relu_b1.get(0, j)).matmul(&params.layers[1].weight);
        let expect = ops.normalized.matmul_dense(&hw);
        for i in 0..3 {
            for j in 0..2 {
                let e = expect.get(i, j) + params.layers[1].bias.get(0, j);
                assert!((out.get(i, j) - e).abs() < 1e-14);
            }
        }
        drop(tape);
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(5, 4));
        let loss = masked_cross_entropy(logits, &[0, 1, 2, 3, 0], &[0, 2, 4]).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::from_fn(2, 3, |i, j| if i == j { 1e3 } else { 0.0 }));
        let loss = masked_cross_entropy(logits, &[0, 1], &[0, 1]).unwrap();
        assert!(loss.item() < 1e-300);
    }

    #[test]
    fn empty_index_is_a_contract_violation() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(
            masked_cross_entropy(logits, &[0, 1], &[]),
            Err(ModelError::EmptyIndexSet)
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(Architecture::Sage, 8, 16, 3, InitDistribution::new(42));
        let b = init_params(Architecture::Sage, 8, 16, 3, InitDistribution::new(42));
        assert_eq!(a, b);
        let bound = glorot_bound(16, 16);
        assert!(a.layers[0].weight.max_abs() <= glorot_bound(16, 16));
        assert!(a.layers[1].weight.max_abs() <= glorot_bound(32, 16));
        assert!(bound > 0.0);
        assert!(a.layers.iter().all(|l| l.bias.max_abs() == 0.0));
    }

    #[test]
    fn glorot_variance() {
        let (fi, fo) = (60, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        while samples.len() < 10_000 {
            samples.extend_from_slice(glorot_layer(&mut rng, fi, fo).weight.as_slice());
        }
        samples.truncate(10_000);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        let expect = 2.0 / (fi + fo) as f64;
        assert!((var - expect).abs() / expect < 0.1, "variance {var} vs {expect}");
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let tape = Tape::new();
        let p = init_params(Architecture::Mlp, 2, 4, 2, InitDistribution::new(0)).record(&tape);
        let x = tape.constant(Tensor::zeros(3, 2));
        let prop = Propagation::Dense(tape.constant(Tensor::identity(3)));
        assert!(gcn_forward(&p, x, &prop).is_err());
        let bad = tape.constant(Tensor::zeros(3, 5));
        assert!(mlp_forward(&p, bad).is_err());
    }

    #[test]
    fn parse_architecture() {
        assert_eq!("sage".parse::<Architecture>().unwrap(), Architecture::Sage);
        assert!("gat".parse::<Architecture>().is_err());
    }
}
