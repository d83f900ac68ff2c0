//! Per-step measurements of modality conflict and gradient-field smoothness.

use serde::{Deserialize, Serialize};

use crate::condense::{dot, GradientField, DEGENERATE_NORM};
use crate::error::ShapeError;
use crate::graph::{dirichlet_energy, DenseAdjacency};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictRate {
    pub rate: f64,
    /// Rows that had both modality slices non-degenerate.
    pub counted: usize,
    /// Set when no row could be counted; `rate` is then 0.
    pub degenerate: bool,
}

/// Fraction of rows whose text and image slices have a negative inner
/// product. Rows with a slice norm below `1e-15` are left out entirely.
pub fn conflict_rate(field: &GradientField) -> ConflictRate {
    let mut counted = 0;
    let mut conflicts = 0;
    for i in 0..field.rows() {
        let (t, m) = (field.text(i), field.image(i));
        if dot(t, t).sqrt() < DEGENERATE_NORM || dot(m, m).sqrt() < DEGENERATE_NORM {
            continue;
        }
        counted += 1;
        if dot(t, m) < 0.0 {
            conflicts += 1;
        }
    }
    ConflictRate {
        rate: if counted == 0 { 0.0 } else { conflicts as f64 / counted as f64 },
        counted,
        degenerate: counted == 0,
    }
}

/// Mean cosine between the modality slices over the non-degenerate rows.
pub fn mean_cosine(field: &GradientField) -> f64 {
    let mut sum = 0.0;
    let mut counted = 0;
    for i in 0..field.rows() {
        let (t, m) = (field.text(i), field.image(i));
        let (nt, nm) = (dot(t, t).sqrt(), dot(m, m).sqrt());
        if nt < DEGENERATE_NORM || nm < DEGENERATE_NORM {
            continue;
        }
        sum += dot(t, m) / (nt * nm);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

/// Fraction of rows where a decoupled slice still opposes the original slice
/// of the other modality (should be zero up to rounding).
pub fn residual_conflict_rate(original: &GradientField, decoupled: &GradientField, tol: f64) -> f64 {
    let n = original.rows();
    if n == 0 {
        return 0.0;
    }
    let bad = (0..n)
        .filter(|&i| {
            dot(decoupled.text(i), original.image(i)) < -tol || dot(decoupled.image(i), original.text(i)) < -tol
        })
        .count();
    bad as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictStats {
    pub conflict_rate: f64,
    pub mean_cosine: f64,
    pub dirichlet_raw: f64,
    pub dirichlet_decoupled: f64,
}

/// All four statistics of one step. `decoupled` should be the decoupled
/// version of `raw`.
pub fn snapshot(
    raw: &GradientField,
    decoupled: &GradientField,
    adjacency: &DenseAdjacency,
) -> Result<ConflictStats, ShapeError> {
    if raw.values.shape() != decoupled.values.shape() {
        return Err(ShapeError::new(format!(
            "raw field {:?} vs decoupled {:?}",
            raw.values.shape(),
            decoupled.values.shape()
        )));
    }
    Ok(ConflictStats {
        conflict_rate: conflict_rate(raw).rate,
        mean_cosine: mean_cosine(raw),
        dirichlet_raw: dirichlet_energy(&raw.values, adjacency)?,
        dirichlet_decoupled: dirichlet_energy(&decoupled.values, adjacency)?,
    })
}
