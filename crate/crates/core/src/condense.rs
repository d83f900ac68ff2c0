//! Structurally regularized gradient matching.
//!
//! The synthetic graph is parameterized by its features `X_S` and an edge
//! generator `Φ`. Every inner step compares per-class parameter gradients of a
//! GCN on the real graph and on the synthetic graph, adds a Dirichlet-energy
//! penalty on the (modality-decoupled) feature-gradient field of the synthetic
//! nodes, and moves `X_S` and `Φ` down the meta-gradient of that sum. The GCN
//! parameters then take one plain step on the synthetic loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::dataset::{ModalitySplit, MultimodalGraph};
use crate::diagnostics::{self, ConflictStats};
use crate::error::{AutodiffError, ModelError, ShapeError};
use crate::graph::{dirichlet_energy, DenseAdjacency};
use crate::models::{
    gcn_forward, gcn_from_aggregated, glorot_layer, init_params, masked_cross_entropy, Architecture,
    InitDistribution, Layer, ModelParams, ParamVars, Propagation,
};
use crate::tensor::Tensor;

/// Norm below which a modality gradient is treated as absent.
pub const DEGENERATE_NORM: f64 = 1e-15;
/// Row norm below which a parameter-gradient row counts as zero in
/// [`match_distance`].
pub const ZERO_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Decoupling and damping.
    Srgm,
    /// Damping of the raw feature-gradient field.
    NoDecouple,
    /// Plain gradient matching; the energy is measured but not penalized.
    NoDecoupleNoDamp,
    /// Decoupled field treated as a constant inside the penalty, so only the
    /// adjacency receives the damping gradient.
    DampDetached,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Srgm,
        Mode::NoDecouple,
        Mode::NoDecoupleNoDamp,
        Mode::DampDetached,
    ];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Srgm => "srgm",
            Mode::NoDecouple => "no-decouple",
            Mode::NoDecoupleNoDamp => "no-decouple-no-damp",
            Mode::DampDetached => "damp-detached",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondenseConfig {
    /// Damping weight λ.
    pub lambda: f64,
    /// Synthetic nodes as a fraction of real training nodes.
    pub ratio: f64,
    /// Step size on synthetic features. Plain GD at 1e-2 blows up the
    /// features within a few outer iterations on the default dataset.
    pub lr_feat: f64,
    pub lr_phi: f64,
    pub lr_theta: f64,
    /// Outer iterations K (fresh `θ₀` each).
    pub outer: usize,
    /// Inner steps T per outer iteration.
    pub inner: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Edges of the returned graph below this weight are dropped.
    pub threshold: f64,
    /// Hidden width of the GCN backbone.
    pub hidden: usize,
    /// Hidden width of the edge generator MLP.
    pub generator_hidden: usize,
    /// Real nodes sampled per class and step; `None` uses every training node.
    pub real_batch: Option<usize>,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            lambda: 500.0,
            ratio: 0.01,
            lr_feat: 3e-3,
            lr_phi: 1e-3,
            lr_theta: 1e-2,
            outer: 20,
            inner: 10,
            mode: Mode::Srgm,
            seed: 0,
            threshold: 0.5,
            hidden: 256,
            generator_hidden: 64,
            real_batch: None,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<(), CondenseError> {
        let bad = |m: &str| Err(CondenseError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad("ratio must lie in (0, 1)");
        }
        for (name, lr) in [("lr-feat", self.lr_feat), ("lr-phi", self.lr_phi), ("lr-theta", self.lr_theta)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CondenseError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.outer == 0 {
            return bad("outer iterations must be positive");
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1)");
        }
        if self.hidden == 0 || self.generator_hidden == 0 {
            return bad("hidden widths must be positive");
        }
        if self.real_batch == Some(0) {
            return bad("real batch must be positive");
        }
        Ok(())
    }

    /// λ as it enters the objective.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::NoDecoupleNoDamp => 0.0,
            _ => self.lambda,
        }
    }
}

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("objective diverged at outer {k}, inner {t}: {what}")]
    Diverged {
        k: usize,
        t: usize,
        what: String,
        /// Metrics of every completed step before the failure.
        log: Box<MetricsLog>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// The shared MLP `Φ` scoring a concatenated node pair `[x_i; x_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGenerator {
    pub layers: Vec<Layer>,
}

impl EdgeGenerator {
    pub fn init(feature_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            layers: vec![
                glorot_layer(rng, 2 * feature_dim, hidden),
                glorot_layer(rng, hidden, 1),
            ],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].in_dim() / 2
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn record<'t>(&self, tape: &'t Tape) -> Vec<(Var<'t>, Var<'t>)> {
        self.layers
            .iter()
            .map(|l| (tape.var(l.weight.clone()), tape.var(l.bias.clone())))
            .collect()
    }
}

pub(crate) fn offdiag_mask(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
}

/// `A_ij = σ((MLP_Φ([x_i;x_j]) + MLP_Φ([x_j;x_i])) / 2)`, diagonal set to 1.
pub fn edge_weights_var<'t>(x: Var<'t>, phi: &[(Var<'t>, Var<'t>)]) -> Var<'t> {
    let tape = x.tape();
    let n = x.shape()[0];
    let left: Vec<usize> = (0..n * n).map(|p| p / n).collect();
    let right: Vec<usize> = (0..n * n).map(|p| p % n).collect();
    let mut h = x.gather_rows(&left).concat_cols(x.gather_rows(&right));
    for (k, &(w, b)) in phi.iter().enumerate() {
        h = h.matmul(w).add_row(b);
        if k + 1 < phi.len() {
            h = h.relu();
        }
    }
    let scores = h.reshape(n, n);
    scores
        .add(scores.t())
        .scale(0.5)
        .sigmoid()
        .mul_const(offdiag_mask(n))
        .add(tape.constant(Tensor::identity(n)))
}

pub fn generate_edges(x: &Tensor, phi: &EdgeGenerator) -> DenseAdjacency {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = phi.record(&tape);
    let a = (*edge_weights_var(xv, &pv).value()).clone();
    DenseAdjacency::new(a).expect("generator output is symmetric in [0, 1]")
}

/// Differentiable `D̃^{-1/2}(W + I)D̃^{-1/2}` of a dense adjacency.
pub fn normalize_dense_var<'t>(a: Var<'t>) -> Var<'t> {
    let n = a.shape()[0];
    let w = a
        .mul_const(offdiag_mask(n))
        .add(a.tape().constant(Tensor::identity(n)));
    let d = w.sum_cols().powf(-0.5);
    w.mul(d.matmul(d.t()))
}

/// Differentiable `tr(Gᵀ L G)` with `L` built from the off-diagonal of `a`.
pub fn dirichlet_energy_var<'t>(field: Var<'t>, a: Var<'t>) -> Var<'t> {
    let n = a.shape()[0];
    let w = a.mul_const(offdiag_mask(n));
    let deg = w.sum_cols();
    let sq = field.mul(field).sum_cols();
    let gram = field.matmul(field.t());
    deg.mul(sq).sum().sub(w.mul(gram).sum())
}

/// `N′×d` feature-gradient matrix with its modality split.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub values: Tensor,
    pub modality: ModalitySplit,
}

impl GradientField {
    pub fn new(values: Tensor, modality: ModalitySplit) -> Result<Self, ShapeError> {
        if values.cols() != modality.dim() {
            return Err(ShapeError::new(format!(
                "field has {} columns, modality split sums to {}",
                values.cols(),
                modality.dim()
            )));
        }
        if modality.d_text != modality.d_image {
            return Err(ShapeError::new(format!(
                "decoupling compares text and image slices directly, which needs d_text == d_image (got {} and {})",
                modality.d_text, modality.d_image
            )));
        }
        Ok(Self { values, modality })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn text(&self, i: usize) -> &[f64] {
        self.modality.text(self.values.row(i))
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.modality.image(self.values.row(i))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whether row `i` has opposing modality gradients that projection resolves.
fn in_conflict(text: &[f64], image: &[f64]) -> bool {
    let (nt, ni) = (dot(text, text), dot(image, image));
    nt.sqrt() >= DEGENERATE_NORM && ni.sqrt() >= DEGENERATE_NORM && dot(text, image) < 0.0
}

/// Projects each conflicting row's text and image gradients onto the normal
/// plane of the other. Both projections use the original gradients; rows
/// without a conflict are copied unchanged.
pub fn decouple(field: &GradientField) -> GradientField {
    let mut out = field.values.clone();
    let dt = field.modality.d_text;
    for i in 0..field.rows() {
        let (t, m) = (field.text(i), field.image(i));
        if !in_conflict(t, m) {
            continue;
        }
        let tm = dot(t, m);
        let ct = tm / dot(m, m);
        let cm = tm / dot(t, t);
        let row = out.row_mut(i);
        for k in 0..t.len() {
            row[k] = t[k] - ct * m[k];
        }
        for k in 0..m.len() {
            row[dt + k] = m[k] - cm * t[k];
        }
    }
    GradientField {
        values: out,
        modality: field.modality,
    }
}

/// [`decouple`] on the tape. The branch is chosen from values; the projection
/// coefficients are differentiated through.
pub fn decouple_var<'t>(field: Var<'t>, modality: ModalitySplit) -> Var<'t> {
    let values = field.value();
    let n = values.rows();
    let d = modality.dim();
    let mask = Tensor::from_fn(n, 1, |i, _| {
        let row = values.row(i);
        f64::from(u8::from(in_conflict(modality.text(row), modality.image(row))))
    });
    let inverse_mask = mask.map(|m| 1.0 - m);
    let tape = field.tape();

    let text = field.slice_cols(0, modality.d_text);
    let image = field.slice_cols(modality.d_text, d);
    let cross = text.mul(image).sum_cols();
    // Off-conflict rows get a unit denominator; the mask zeroes them anyway.
    let safe = |sq: Var<'t>| sq.add(tape.constant(inverse_mask.clone()));
    let coef_text = cross.div(safe(image.mul(image).sum_cols())).mul_const(mask.clone());
    let coef_image = cross.div(safe(text.mul(text).sum_cols())).mul_const(mask);
    let text_out = text.sub(coef_text.broadcast_cols(modality.d_text).mul(image));
    let image_out = image.sub(coef_image.broadcast_cols(modality.d_image).mul(text));
    text_out.pad_cols(0, d).add(image_out.pad_cols(modality.d_text, d))
}

/// Dirichlet energy of the decoupled field over `A_S`.
pub fn structural_damping(decoupled: &GradientField, adjacency: &DenseAdjacency) -> Result<f64, ShapeError> {
    dirichlet_energy(&decoupled.values, adjacency)
}

/// Per-row distance layout of one parameter tensor: weights (`in × out`) are
/// compared column by column, i.e. per output unit; a bias vector is one row.
fn as_output_rows(t: &Tensor) -> Tensor {
    if t.rows() == 1 {
        t.clone()
    } else {
        t.transpose()
    }
}

fn check_grad_shapes(gs: &[[usize; 2]], gt: &[&Tensor]) -> Result<(), ShapeError> {
    if gs.len() != gt.len() {
        return Err(ShapeError::new(format!("{} vs {} parameter tensors", gs.len(), gt.len())));
    }
    for (k, (a, b)) in gs.iter().zip(gt).enumerate() {
        if *a != b.shape() {
            return Err(ShapeError::new(format!("parameter {k}: {a:?} vs {:?}", b.shape())));
        }
    }
    Ok(())
}

/// `Σ_tensors Σ_rows (1 − cos(g_S row, g_T row))`, computed on plain values.
pub fn match_distance(gs: &[Tensor], gt: &[Tensor]) -> Result<f64, ShapeError> {
    let gt_refs: Vec<&Tensor> = gt.iter().collect();
    check_grad_shapes(&gs.iter().map(Tensor::shape).collect::<Vec<_>>(), &gt_refs)?;
    let mut total = 0.0;
    for (s, t) in gs.iter().zip(gt) {
        let (s, t) = (as_output_rows(s), as_output_rows(t));
        for i in 0..s.rows() {
            let (a, b) = (s.row(i), t.row(i));
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            total += match (na < ZERO_ROW_NORM, nb < ZERO_ROW_NORM) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                (false, false) => 1.0 - dot(a, b) / (na * nb),
            };
        }
    }
    Ok(total)
}

/// [`match_distance`] differentiable in the synthetic side.
pub fn match_distance_var<'t>(gs: &[Var<'t>], gt: &[Tensor]) -> Result<Var<'t>, ShapeError> {
    let gt_refs: Vec<&Tensor> = gt.iter().collect();
    check_grad_shapes(&gs.iter().map(Var::shape).collect::<Vec<_>>(), &gt_refs)?;
    let tape = gs.first().map(Var::tape).ok_or_else(|| ShapeError::new("no parameters"))?;
    let mut constant = 0.0;
    let mut total: Option<Var<'t>> = None;
    for (&s, t) in gs.iter().zip(gt) {
        let s = if s.shape()[0] == 1 { s } else { s.t() };
        let t = as_output_rows(t);
        let sv = s.value();
        let rows = t.rows();
        let mut mask = Tensor::zeros(rows, 1);
        let mut target_norm = Tensor::filled(rows, 1, 1.0);
        for i in 0..rows {
            let (na, nb) = (dot(sv.row(i), sv.row(i)).sqrt(), dot(t.row(i), t.row(i)).sqrt());
            match (na < ZERO_ROW_NORM, nb < ZERO_ROW_NORM) {
                (true, true) => {}
                (true, false) | (false, true) => constant += 1.0,
                (false, false) => {
                    mask.set(i, 0, 1.0);
                    target_norm.set(i, 0, nb);
                    constant += 1.0;
                }
            }
        }
        let inverse_mask = mask.map(|m| 1.0 - m);
        let cross = s.mul_const(t).sum_cols();
        let norm = s
            .mul(s)
            .sum_cols()
            .add(tape.constant(inverse_mask))
            .sqrt()
            .mul_const(target_norm);
        let cosines = cross.div(norm).mul_const(mask).sum();
        total = Some(match total {
            Some(acc) => acc.add(cosines),
            None => cosines,
        });
    }
    let cos_sum = total.expect("at least one parameter");
    Ok(tape.constant(Tensor::scalar(constant)).sub(cos_sum))
}

/// Learnable synthetic graph; `adjacency` is derived from the features and
/// generator (or, for coresets, induced from the original graph).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGraph {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub modality: ModalitySplit,
    pub num_classes: usize,
    pub generator: Option<EdgeGenerator>,
    pub adjacency: DenseAdjacency,
}

impl SyntheticGraph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Recomputes `adjacency` from the generator, if any.
    pub fn regenerate_adjacency(&mut self) {
        if let Some(g) = &self.generator {
            self.adjacency = generate_edges(&self.features, g);
        }
    }
}

/// `⌈r · n⌉`, robust to `r·n` landing a hair above an integer.
pub fn synthetic_size(ratio: f64, n_train: usize) -> usize {
    let raw = ratio * n_train as f64;
    (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize
}

/// Splits `total` across classes in proportion to `counts` by largest
/// remainder, giving every present class at least one slot.
pub fn proportional_allocation(counts: &[usize], total: usize) -> Vec<usize> {
    let present = counts.iter().filter(|&&c| c > 0).count();
    assert!(total >= present, "cannot give each of {present} classes a node with {total}");
    let sum: usize = counts.iter().sum();
    let quota: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * total as f64 / sum as f64)
        .collect();
    let mut alloc: Vec<usize> = quota
        .iter()
        .zip(counts)
        .map(|(&q, &c)| if c == 0 { 0 } else { (q.floor() as usize).max(1) })
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let assigned: usize = alloc.iter().sum();
    if assigned < total {
        order.sort_by(|&a, &b| {
            let ra = quota[a] - alloc[a] as f64;
            let rb = quota[b] - alloc[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &c in order.iter().cycle().take(total - assigned) {
            alloc[c] += 1;
        }
    } else {
        let mut excess = assigned - total;
        while excess > 0 {
            let c = (0..counts.len())
                .filter(|&c| alloc[c] > 1)
                .max_by(|&a, &b| {
                    (alloc[a] as f64 - quota[a])
                        .total_cmp(&(alloc[b] as f64 - quota[b]))
                        .then(b.cmp(&a))
                })
                .expect("some class above its floor");
            alloc[c] -= 1;
            excess -= 1;
        }
    }
    alloc
}

pub(crate) fn class_members(labels: &[usize], index: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); num_classes];
    for &i in index {
        members[labels[i]].push(i);
    }
    members
}

/// Initial synthetic graph: rows copied from real training nodes of the same
/// class, class sizes proportional to the training labels.
pub fn init_synthetic(
    graph: &MultimodalGraph,
    ratio: f64,
    seed: u64,
    generator_hidden: usize,
) -> Result<SyntheticGraph, CondenseError> {
    let n_train = graph.splits.train.len();
    let size = synthetic_size(ratio, n_train);
    let members = class_members(&graph.labels, &graph.splits.train, graph.num_classes);
    let present = members.iter().filter(|m| !m.is_empty()).count();
    if size < present || size == 0 {
        return Err(CondenseError::InvalidConfig(format!(
            "ratio {ratio} gives {size} synthetic nodes for {present} classes"
        )));
    }
    let counts: Vec<usize> = members.iter().map(Vec::len).collect();
    let alloc = proportional_allocation(&counts, size);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = graph.modality.dim();
    let mut features = Tensor::zeros(size, d);
    let mut labels = Vec::with_capacity(size);
    for (class, &k) in alloc.iter().enumerate() {
        let mut pool = members[class].clone();
        pool.shuffle(&mut rng);
        for j in 0..k {
            let src = pool[j % pool.len()];
            features.row_mut(labels.len()).copy_from_slice(graph.features.row(src));
            labels.push(class);
        }
    }
    let generator = EdgeGenerator::init(d, generator_hidden, &mut rng);
    let adjacency = generate_edges(&features, &generator);
    Ok(SyntheticGraph {
        features,
        labels,
        modality: graph.modality,
        num_classes: graph.num_classes,
        generator: Some(generator),
        adjacency,
    })
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `θ₀` for outer iteration `k` (1-based) of a run seeded with `seed`.
pub fn outer_init_distribution(seed: u64, k: usize) -> InitDistribution {
    InitDistribution::new(splitmix64(seed ^ splitmix64(k as u64)))
}

/// Per-class real gradients `∇_θ ℒ_T` over the training-induced subgraph.
pub struct RealGradients {
    aggregated: Tensor,
    propagation: crate::tensor::CsrMatrix,
    labels: Vec<usize>,
    class_members: Vec<Vec<usize>>,
}

impl RealGradients {
    pub fn new(graph: &MultimodalGraph) -> Self {
        let train = &graph.splits.train;
        let sub = graph.adjacency.induced(train);
        let propagation = sub.normalized();
        let features = graph.features.gather_rows(train);
        let aggregated = propagation.matmul_dense(&features);
        let labels: Vec<usize> = train.iter().map(|&i| graph.labels[i]).collect();
        let local: Vec<usize> = (0..train.len()).collect();
        let class_members = class_members(&labels, &local, graph.num_classes);
        Self {
            aggregated,
            propagation,
            labels,
            class_members,
        }
    }

    pub fn class_members(&self) -> &[Vec<usize>] {
        &self.class_members
    }

    /// Gradients per class, in parameter order, for the given per-class node
    /// batches (indices into the training subgraph). Empty batches give `None`.
    pub fn compute(&self, theta: &ModelParams, batches: &[Vec<usize>]) -> Result<Vec<Option<Vec<Tensor>>>, CondenseError> {
        let tape = Tape::new();
        let p = theta.record(&tape);
        let prop = Propagation::sparse(self.propagation.clone());
        let ax = tape.constant(self.aggregated.clone());
        let logits = gcn_from_aggregated(&p, ax, &prop);
        let wrt = p.flat();
        let mut out = Vec::with_capacity(batches.len());
        for batch in batches {
            if batch.is_empty() {
                out.push(None);
                continue;
            }
            let loss = masked_cross_entropy(logits, &self.labels, batch)?;
            let grads = tape.grad(loss, &wrt)?;
            out.push(Some(grads.iter().map(|g| (*g.value()).clone()).collect()));
        }
        Ok(out)
    }

    pub fn full_batches(&self) -> Vec<Vec<usize>> {
        self.class_members.clone()
    }
}

/// The synthetic half of one inner step, recorded on a tape.
pub struct SyntheticForward<'t> {
    pub features: Var<'t>,
    pub generator: Vec<(Var<'t>, Var<'t>)>,
    pub theta: ParamVars<'t>,
    pub adjacency: Var<'t>,
    pub logits: Var<'t>,
    /// Mean cross-entropy over the synthetic nodes of each class (`None` for
    /// classes without synthetic nodes).
    pub class_losses: Vec<Option<Var<'t>>>,
    /// `ℒ_S = Σ_c ℒ_S^c`, the loss whose parameter gradients are matched.
    pub loss: Var<'t>,
}

pub fn synthetic_forward<'t>(
    tape: &'t Tape,
    features: &Tensor,
    generator: &EdgeGenerator,
    theta: &ModelParams,
    labels: &[usize],
    num_classes: usize,
) -> Result<SyntheticForward<'t>, CondenseError> {
    let x = tape.var(features.clone());
    let phi = generator.record(tape);
    let p = theta.record(tape);
    let adjacency = edge_weights_var(x, &phi);
    let prop = Propagation::Dense(normalize_dense_var(adjacency));
    let logits = gcn_forward(&p, x, &prop)?;
    let all: Vec<usize> = (0..labels.len()).collect();
    let class_losses = class_members(labels, &all, num_classes)
        .iter()
        .map(|m| {
            if m.is_empty() {
                Ok(None)
            } else {
                masked_cross_entropy(logits, labels, m).map(Some)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let loss = class_losses
        .iter()
        .flatten()
        .copied()
        .reduce(|a, b| a.add(b))
        .ok_or(ModelError::EmptyIndexSet)?;
    Ok(SyntheticForward {
        features: x,
        generator: phi,
        theta: p,
        adjacency,
        logits,
        class_losses,
        loss,
    })
}

/// `Σ_c D(∇_θ ℒ_S^c, g_T^c)` over classes with both real and synthetic nodes.
pub fn matching_loss<'t>(fwd: &SyntheticForward<'t>, real: &[Option<Vec<Tensor>>]) -> Result<Var<'t>, CondenseError> {
    let tape = fwd.loss.tape();
    let wrt = fwd.theta.flat();
    let mut total: Option<Var<'t>> = None;
    for (target, loss) in real.iter().zip(&fwd.class_losses) {
        let (Some(target), Some(loss)) = (target, loss) else { continue };
        let gs = tape.grad(*loss, &wrt)?;
        let d = match_distance_var(&gs, target).map_err(AutodiffError::from)?;
        total = Some(match total {
            Some(acc) => acc.add(d),
            None => d,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub k: usize,
    pub t: usize,
    pub loss_gm: f64,
    pub r_struct: f64,
    pub loss_update: f64,
    pub conflict_rate: f64,
    pub mean_cosine: f64,
    pub dirichlet_raw: f64,
    pub dirichlet_decoupled: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterEval {
    pub k: usize,
    pub accuracy: f64,
}

/// Append-only per-step record of a condensation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<OuterEval>,
}

impl MetricsLog {
    pub fn push(&mut self, row: StepMetrics) {
        self.steps.push(row);
    }

    pub fn record_eval(&mut self, k: usize, accuracy: f64) {
        self.evals.push(OuterEval { k, accuracy });
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for row in &self.steps {
            s.push_str(&serde_json::to_string(row).expect("metrics serialize"));
            s.push('\n');
        }
        s
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for row in &mut out.steps {
            row.wall_ms = 0.0;
        }
        out
    }

    /// Rows of the last outer iteration.
    pub fn final_outer(&self) -> &[StepMetrics] {
        let Some(last) = self.steps.last().map(|r| r.k) else {
            return &[];
        };
        let start = self.steps.iter().position(|r| r.k == last).unwrap_or(0);
        &self.steps[start..]
    }
}

/// Everything a single inner step produces.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss_gm: f64,
    pub r_struct: f64,
    pub loss_update: f64,
    pub grad_features: Tensor,
    pub grad_generator: Vec<Tensor>,
    /// `∇_θ ℒ_S`, not decoupled.
    pub grad_theta: Vec<Tensor>,
    pub stats: ConflictStats,
}

/// Evaluates `ℒ_update` and its meta-gradient for the current state.
#[allow(clippy::too_many_arguments)]
pub fn meta_step(
    features: &Tensor,
    generator: &EdgeGenerator,
    theta: &ModelParams,
    labels: &[usize],
    num_classes: usize,
    modality: ModalitySplit,
    real: &[Option<Vec<Tensor>>],
    mode: Mode,
    lambda: f64,
) -> Result<StepOutcome, CondenseError> {
    let tape = Tape::new();
    let fwd = synthetic_forward(&tape, features, generator, theta, labels, num_classes)?;

    let mut wrt = fwd.theta.flat();
    wrt.push(fwd.features);
    let first = tape.grad(fwd.loss, &wrt)?;
    let (field, theta_grads) = first.split_last().expect("non-empty");
    let field = *field;

    let loss_gm = matching_loss(&fwd, real)?;

    let raw = GradientField::new((*field.value()).clone(), modality).map_err(AutodiffError::from)?;
    let adjacency_values = DenseAdjacency::new((*fwd.adjacency.value()).clone())
        .expect("generator output is a valid adjacency");
    let stats = diagnostics::snapshot(&raw, &decouple(&raw), &adjacency_values).map_err(AutodiffError::from)?;

    let (objective, r_struct) = match mode {
        Mode::NoDecoupleNoDamp => (loss_gm, stats.dirichlet_raw),
        Mode::NoDecouple => {
            let r = dirichlet_energy_var(field, fwd.adjacency);
            (loss_gm.add(r.scale(lambda)), r.item())
        }
        Mode::Srgm => {
            let r = dirichlet_energy_var(decouple_var(field, modality), fwd.adjacency);
            (loss_gm.add(r.scale(lambda)), r.item())
        }
        Mode::DampDetached => {
            let r = dirichlet_energy_var(decouple_var(field, modality).detach(), fwd.adjacency);
            (loss_gm.add(r.scale(lambda)), r.item())
        }
    };

    let mut wrt = vec![fwd.features];
    wrt.extend(fwd.generator.iter().flat_map(|&(w, b)| [w, b]));
    let grads = tape.grad(objective, &wrt)?;
    let mut grads = grads.into_iter().map(|g| (*g.value()).clone());
    let grad_features = grads.next().expect("feature gradient");
    Ok(StepOutcome {
        loss_gm: loss_gm.item(),
        r_struct,
        loss_update: objective.item(),
        grad_features,
        grad_generator: grads.collect(),
        grad_theta: theta_grads.iter().map(|g| (*g.value()).clone()).collect(),
        stats,
    })
}

struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

/// Runs the full bilevel loop and returns the condensed graph, its adjacency
/// sparsified at `cfg.threshold`.
pub fn condense(graph: &MultimodalGraph, cfg: &CondenseConfig) -> Result<(SyntheticGraph, MetricsLog), CondenseError> {
    condense_with(graph, cfg, |_, _| {})
}

/// [`condense`] calling `after_outer(k, current_graph)` after every outer
/// iteration (the graph passed has the dense, unsparsified adjacency).
pub fn condense_with(
    graph: &MultimodalGraph,
    cfg: &CondenseConfig,
    mut after_outer: impl FnMut(usize, &SyntheticGraph),
) -> Result<(SyntheticGraph, MetricsLog), CondenseError> {
    cfg.validate()?;
    graph
        .validate()
        .map_err(|e| CondenseError::InvalidConfig(e.to_string()))?;
    if graph.modality.d_text != graph.modality.d_image {
        return Err(CondenseError::InvalidConfig(format!(
            "condensation needs equal modality widths, got d_text={} and d_image={}",
            graph.modality.d_text, graph.modality.d_image
        )));
    }
    let mut syn = init_synthetic(graph, cfg.ratio, cfg.seed, cfg.generator_hidden)?;
    let real = RealGradients::new(graph);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xB47C_4E5D));
    let mut log = MetricsLog::default();
    let lambda = cfg.effective_lambda();
    let d = graph.modality.dim();

    for k in 1..=cfg.outer {
        let mut theta = init_params(
            Architecture::Gcn,
            d,
            cfg.hidden,
            graph.num_classes,
            outer_init_distribution(cfg.seed, k),
        );
        for t in 0..cfg.inner {
            let clock = Stopwatch::start();
            let batches = match cfg.real_batch {
                None => real.full_batches(),
                Some(b) => real
                    .class_members()
                    .iter()
                    .map(|m| {
                        let mut m = m.clone();
                        m.shuffle(&mut batch_rng);
                        m.truncate(b);
                        m
                    })
                    .collect(),
            };
            let targets = real.compute(&theta, &batches)?;
            let generator = syn.generator.as_ref().expect("condensation keeps a generator");
            let out = meta_step(
                &syn.features,
                generator,
                &theta,
                &syn.labels,
                syn.num_classes,
                syn.modality,
                &targets,
                cfg.mode,
                lambda,
            )?;

            let finite = out.loss_update.is_finite()
                && out.grad_features.is_finite()
                && out.grad_generator.iter().all(Tensor::is_finite);
            if !finite {
                return Err(CondenseError::Diverged {
                    k,
                    t,
                    what: format!(
                        "loss_update={} loss_gm={} r_struct={}",
                        out.loss_update, out.loss_gm, out.r_struct
                    ),
                    log: Box::new(log),
                });
            }

            syn.features.axpy_neg(cfg.lr_feat, &out.grad_features);
            let generator = syn.generator.as_mut().expect("generator");
            for (p, g) in generator.tensors_mut().into_iter().zip(&out.grad_generator) {
                p.axpy_neg(cfg.lr_phi, g);
            }
            for (p, g) in theta.tensors_mut().into_iter().zip(&out.grad_theta) {
                p.axpy_neg(cfg.lr_theta, g);
            }

            log.push(StepMetrics {
                k,
                t,
                loss_gm: out.loss_gm,
                r_struct: out.r_struct,
                loss_update: out.loss_update,
                conflict_rate: out.stats.conflict_rate,
                mean_cosine: out.stats.mean_cosine,
                dirichlet_raw: out.stats.dirichlet_raw,
                dirichlet_decoupled: out.stats.dirichlet_decoupled,
                wall_ms: clock.elapsed_ms(),
            });
        }
        syn.regenerate_adjacency();
        after_outer(k, &syn);
    }

    syn.regenerate_adjacency();
    syn.adjacency = syn.adjacency.sparsified(cfg.threshold);
    Ok((syn, log))
}
