//! Adjacency types and the graph operators built on them.
//!
//! Conventions shared by every operator here:
//! - self-loops never enter the Laplacian (`L = Deg − W`, `W` off-diagonal);
//! - the propagation operator is `D̃^{-1/2}(W + I)D̃^{-1/2}`, i.e. any stored
//!   diagonal is replaced by exactly one self-loop of weight 1;
//! - the Dirichlet energy of a node field `G` is `tr(Gᵀ L G)`, which equals
//!   `Σ_{i<j} w_ij ‖g_i − g_j‖²` over unordered pairs.

use crate::error::{GraphError, ShapeError};
use crate::tensor::{CsrMatrix, Tensor};

const SYMMETRY_TOL: f64 = 1e-12;

/// Weighted undirected graph in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    csr: CsrMatrix,
}

impl SparseAdjacency {
    pub fn new(csr: CsrMatrix) -> Result<Self, GraphError> {
        if csr.rows() != csr.cols() {
            return Err(ShapeError::new(format!("adjacency is {}x{}", csr.rows(), csr.cols())).into());
        }
        for r in 0..csr.rows() {
            for (c, w) in csr.row(r) {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(GraphError::InvalidWeight {
                        row: r,
                        col: c,
                        weight: w.to_string(),
                    });
                }
                if (csr.get(c, r) - w).abs() > SYMMETRY_TOL || !csr.row(c).any(|(cc, _)| cc == r) {
                    return Err(GraphError::Asymmetric { row: r, col: c });
                }
            }
        }
        Ok(Self { csr })
    }

    /// Undirected unit-weight graph from an edge list; duplicate and
    /// self-loop edges are dropped.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(i, j) in edges {
            if i != j {
                triplets.push((i, j, 1.0));
                triplets.push((j, i, 1.0));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        triplets.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        Self {
            csr: CsrMatrix::from_triplets(num_nodes, num_nodes, triplets),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.csr.rows()
    }

    pub fn csr(&self) -> &CsrMatrix {
        &self.csr
    }

    /// Number of undirected off-diagonal edges.
    pub fn num_edges(&self) -> usize {
        let mut n = 0;
        for r in 0..self.num_nodes() {
            n += self.csr.row(r).filter(|&(c, _)| c > r).count();
        }
        n
    }

    pub fn induced(&self, keep: &[usize]) -> Self {
        Self {
            csr: self.csr.induced(keep),
        }
    }

    /// `D̃^{-1/2}(W + I)D̃^{-1/2}`.
    pub fn normalized(&self) -> CsrMatrix {
        let n = self.num_nodes();
        let deg: Vec<f64> = (0..n)
            .map(|r| 1.0 + self.csr.row(r).filter(|&(c, _)| c != r).map(|(_, w)| w).sum::<f64>())
            .collect();
        let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut triplets = Vec::with_capacity(self.csr.nnz() + n);
        for r in 0..n {
            triplets.push((r, r, inv_sqrt[r] * inv_sqrt[r]));
            for (c, w) in self.csr.row(r) {
                if c != r {
                    triplets.push((r, c, inv_sqrt[r] * w * inv_sqrt[c]));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, triplets)
    }

    /// Off-diagonal weights divided by the weighted degree; rows without
    /// neighbours are all zero. The GraphSAGE mean aggregator.
    pub fn mean_operator(&self) -> CsrMatrix {
        mean_operator_from(&self.csr)
    }

    pub fn laplacian(&self) -> Tensor {
        let n = self.num_nodes();
        let mut l = Tensor::zeros(n, n);
        for r in 0..n {
            for (c, w) in self.csr.row(r) {
                if c != r {
                    l.set(r, c, -w);
                    l.set(r, r, l.get(r, r) + w);
                }
            }
        }
        l
    }

    pub fn to_dense(&self) -> Tensor {
        self.csr.to_dense()
    }
}

pub(crate) fn mean_operator_from(csr: &CsrMatrix) -> CsrMatrix {
    let n = csr.rows();
    let mut triplets = Vec::with_capacity(csr.nnz());
    for r in 0..n {
        let total: f64 = csr.row(r).filter(|&(c, _)| c != r).map(|(_, w)| w).sum();
        if total > 0.0 {
            for (c, w) in csr.row(r) {
                if c != r {
                    triplets.push((r, c, w / total));
                }
            }
        }
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Dense weighted graph with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdjacency {
    weights: Tensor,
}

impl DenseAdjacency {
    pub fn new(weights: Tensor) -> Result<Self, GraphError> {
        let n = weights.rows();
        if weights.cols() != n {
            return Err(ShapeError::new(format!("adjacency is {}x{}", n, weights.cols())).into());
        }
        for i in 0..n {
            for j in 0..n {
                let w = weights.get(i, j);
                if !(0.0..=1.0).contains(&w) {
                    return Err(GraphError::InvalidWeight {
                        row: i,
                        col: j,
                        weight: w.to_string(),
                    });
                }
                if (w - weights.get(j, i)).abs() > SYMMETRY_TOL {
                    return Err(GraphError::Asymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn num_nodes(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    pub fn with_unit_diagonal(mut self) -> Self {
        for i in 0..self.num_nodes() {
            self.weights.set(i, i, 1.0);
        }
        self
    }

    /// Zeroes off-diagonal entries below `threshold`; the diagonal is kept.
    pub fn sparsified(&self, threshold: f64) -> Self {
        let mut w = self.weights.clone();
        let n = self.num_nodes();
        for i in 0..n {
            for j in 0..n {
                if i != j && w.get(i, j) < threshold {
                    w.set(i, j, 0.0);
                }
            }
        }
        Self { weights: w }
    }

    /// `D̃^{-1/2}(W + I)D̃^{-1/2}` with `W` the off-diagonal part.
    pub fn normalized(&self) -> Tensor {
        let n = self.num_nodes();
        let deg: Vec<f64> = (0..n)
            .map(|i| 1.0 + (0..n).filter(|&j| j != i).map(|j| self.weights.get(i, j)).sum::<f64>())
            .collect();
        let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        Tensor::from_fn(n, n, |i, j| {
            let w = if i == j { 1.0 } else { self.weights.get(i, j) };
            inv_sqrt[i] * w * inv_sqrt[j]
        })
    }

    pub fn laplacian(&self) -> Tensor {
        let n = self.num_nodes();
        let mut l = Tensor::zeros(n, n);
        for i in 0..n {
            let mut deg = 0.0;
            for j in 0..n {
                if i != j {
                    let w = self.weights.get(i, j);
                    l.set(i, j, -w);
                    deg += w;
                }
            }
            l.set(i, i, deg);
        }
        l
    }

    /// Off-diagonal entries as a sparse matrix, diagonal omitted.
    pub fn to_sparse(&self) -> SparseAdjacency {
        let n = self.num_nodes();
        let mut triplets = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = self.weights.get(i, j);
                if i != j && w != 0.0 {
                    triplets.push((i, j, w));
                }
            }
        }
        SparseAdjacency {
            csr: CsrMatrix::from_triplets(n, n, triplets),
        }
    }
}

/// Either adjacency representation.
pub trait Adjacency {
    fn num_nodes(&self) -> usize;
    /// Calls `f(i, j, w)` for every stored off-diagonal entry, both orientations.
    fn for_each_offdiag(&self, f: &mut dyn FnMut(usize, usize, f64));
}

impl Adjacency for SparseAdjacency {
    fn num_nodes(&self) -> usize {
        SparseAdjacency::num_nodes(self)
    }

    fn for_each_offdiag(&self, f: &mut dyn FnMut(usize, usize, f64)) {
        for r in 0..self.num_nodes() {
            for (c, w) in self.csr.row(r) {
                if c != r {
                    f(r, c, w);
                }
            }
        }
    }
}

impl Adjacency for DenseAdjacency {
    fn num_nodes(&self) -> usize {
        DenseAdjacency::num_nodes(self)
    }

    fn for_each_offdiag(&self, f: &mut dyn FnMut(usize, usize, f64)) {
        let n = self.num_nodes();
        for i in 0..n {
            for j in 0..n {
                let w = self.weights.get(i, j);
                if i != j && w != 0.0 {
                    f(i, j, w);
                }
            }
        }
    }
}

/// `tr(Gᵀ L G)` for a field with one row per node, evaluated as
/// `Σ_i deg_i ‖g_i‖² − Σ_{i≠j} w_ij ⟨g_i, g_j⟩` without forming `L`.
pub fn dirichlet_energy(field: &Tensor, adjacency: &dyn Adjacency) -> Result<f64, ShapeError> {
    let n = adjacency.num_nodes();
    if field.rows() != n {
        return Err(ShapeError::new(format!(
            "field has {} rows, graph has {n} nodes",
            field.rows()
        )));
    }
    let sq: Vec<f64> = (0..n).map(|i| field.row(i).iter().map(|v| v * v).sum()).collect();
    let mut energy = 0.0;
    adjacency.for_each_offdiag(&mut |i, j, w| {
        let cross: f64 = field.row(i).iter().zip(field.row(j)).map(|(a, b)| a * b).sum();
        energy += w * (sq[i] - cross);
    });
    // Roundoff can leave a tiny negative value for near-constant fields.
    Ok(energy.max(0.0))
}
