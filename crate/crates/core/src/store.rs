//! Condensed graphs on disk, in the dataset directory layout.
//!
//! Every synthetic node is a training node; the edge list holds the nonzero
//! entries of the (sparsified) adjacency including its unit diagonal. An edge
//! generator, when present, is stored as `generator.json` (layer shapes) and
//! `generator.f64` (weights and biases in layer order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condense::{EdgeGenerator, SyntheticGraph};
use crate::dataset::{f64_bytes, load_dataset, read_f64, read_meta, write_bytes, write_graph_files, RawGraph, Splits};
use crate::error::DatasetError;
use crate::graph::DenseAdjacency;
use crate::models::Layer;
use crate::tensor::{CsrMatrix, Tensor};

pub const CONDENSED_KIND: &str = "condensed";

#[derive(Debug, Serialize, Deserialize)]
struct GeneratorShapes {
    layers: Vec<[usize; 2]>,
}

pub fn save_condensed(graph: &SyntheticGraph, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    let n = graph.num_nodes();
    let csr = CsrMatrix::from_dense(graph.adjacency.weights());
    let splits = Splits {
        train: (0..n).collect(),
        val: Vec::new(),
        test: Vec::new(),
    };
    write_graph_files(
        dir,
        &RawGraph {
            features: &graph.features,
            modality: graph.modality,
            labels: &graph.labels,
            num_classes: graph.num_classes,
            csr: &csr,
            splits: &splits,
            conflicted: None,
            kind: Some(CONDENSED_KIND),
        },
    )?;
    if let Some(g) = &graph.generator {
        let shapes = GeneratorShapes {
            layers: g.layers.iter().map(|l| [l.in_dim(), l.out_dim()]).collect(),
        };
        let json = serde_json::to_vec_pretty(&shapes).expect("shapes serialize");
        write_bytes(dir, "generator.json", &json)?;
        let flat: Vec<f64> = g
            .tensors()
            .into_iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect();
        write_bytes(dir, "generator.f64", &f64_bytes(&flat))?;
    }
    Ok(())
}

pub fn load_condensed(dir: impl AsRef<Path>) -> Result<SyntheticGraph, DatasetError> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let g = load_dataset(dir)?;
    let n = g.num_nodes();
    if meta.kind.as_deref() != Some(CONDENSED_KIND) || g.splits.train.len() != n {
        return Err(DatasetError::InvalidSplit {
            file: dir.join("meta.json"),
            detail: "not a condensed graph (every node must be a training node)".into(),
        });
    }
    let mut weights = g.adjacency.to_dense();
    for i in 0..n {
        weights.set(i, i, 1.0);
    }
    let adjacency = DenseAdjacency::new(weights).map_err(|source| DatasetError::Asymmetric {
        file: dir.join("edgeweights.f64"),
        source,
    })?;

    let generator = if dir.join("generator.json").is_file() {
        let path = dir.join("generator.json");
        let bytes = std::fs::read(&path).map_err(crate::dataset::io_err(&path))?;
        let shapes: GeneratorShapes =
            serde_json::from_slice(&bytes).map_err(|source| DatasetError::Meta { file: path.clone(), source })?;
        let total: usize = shapes.layers.iter().map(|[i, o]| i * o + o).sum();
        let (_, flat) = read_f64(dir, "generator.f64", total)?;
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let t = Tensor::from_vec(rows, cols, flat[offset..offset + rows * cols].to_vec()).expect("sized");
            offset += rows * cols;
            t
        };
        let layers = shapes
            .layers
            .iter()
            .map(|&[i, o]| Layer {
                weight: take(i, o),
                bias: take(1, o),
            })
            .collect();
        Some(EdgeGenerator { layers })
    } else {
        None
    };

    Ok(SyntheticGraph {
        features: g.features,
        labels: g.labels,
        modality: g.modality,
        num_classes: g.num_classes,
        generator,
        adjacency,
    })
}
