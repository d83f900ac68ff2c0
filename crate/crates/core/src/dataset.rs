//! Multimodal graphs: the synthetic generator and the on-disk directory format.
//!
//! A dataset directory holds `meta.json` plus raw little-endian arrays:
//!
//! | file              | type | shape                         |
//! |-------------------|------|-------------------------------|
//! | `features.f64`    | f64  | `num_nodes × (d_text+d_image)` |
//! | `labels.u32`      | u32  | `num_nodes`                   |
//! | `indptr.u64`      | u64  | `num_nodes + 1`               |
//! | `indices.u64`     | u64  | `nnz`, sorted within each row |
//! | `edgeweights.f64` | f64  | `nnz`                         |
//! | `train.u64` / `val.u64` / `test.u64` | u64 | split sizes |
//!
//! Generated datasets also carry `conflicted.u8` (one flag per node). Condensed
//! graphs add `generator.json` + `generator.f64` when an edge generator exists.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::graph::SparseAdjacency;
use crate::tensor::{CsrMatrix, Tensor};

pub const FORMAT_VERSION: u64 = 1;

/// Widths of the text and image halves of each feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySplit {
    pub d_text: usize,
    pub d_image: usize,
}

impl ModalitySplit {
    pub fn new(d_text: usize, d_image: usize) -> Self {
        Self { d_text, d_image }
    }

    pub fn dim(&self) -> usize {
        self.d_text + self.d_image
    }

    pub fn text<'a>(&self, row: &'a [f64]) -> &'a [f64] {
        &row[..self.d_text]
    }

    pub fn image<'a>(&self, row: &'a [f64]) -> &'a [f64] {
        &row[self.d_text..]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalGraph {
    pub features: Tensor,
    pub modality: ModalitySplit,
    pub adjacency: SparseAdjacency,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Splits,
    /// Nodes whose image features were drawn from another class, when known.
    pub conflicted: Option<Vec<bool>>,
}

impl MultimodalGraph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.num_nodes();
        let bad = |m: String| Err(DatasetError::Invalid(m));
        if self.modality.d_text == 0 || self.modality.d_image == 0 {
            return bad("modality widths must be positive".into());
        }
        if self.features.shape() != [n, self.modality.dim()] {
            return bad(format!(
                "features are {:?}, expected [{n}, {}]",
                self.features.shape(),
                self.modality.dim()
            ));
        }
        if self.adjacency.num_nodes() != n {
            return bad(format!("adjacency has {} nodes, expected {n}", self.adjacency.num_nodes()));
        }
        if let Some(i) = self.labels.iter().position(|&l| l >= self.num_classes) {
            return bad(format!("label {} at node {i} >= {}", self.labels[i], self.num_classes));
        }
        let mut seen = vec![false; n];
        for idx in [&self.splits.train, &self.splits.val, &self.splits.test] {
            for &i in idx.iter() {
                if i >= n || seen[i] {
                    return bad(format!("split index {i} out of range or repeated"));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }

    /// Fraction of nodes flagged as conflicted by the generator.
    pub fn planted_conflict_fraction(&self) -> Option<f64> {
        self.conflicted
            .as_ref()
            .map(|f| f.iter().filter(|&&c| c).count() as f64 / f.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGenParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub intra_class_edge_prob: f64,
    pub inter_class_edge_prob: f64,
    pub conflict_rate: f64,
    pub feature_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthGenParams {
    fn default() -> Self {
        Self {
            num_nodes: 2000,
            num_classes: 4,
            d_text: 32,
            d_image: 32,
            intra_class_edge_prob: 0.05,
            inter_class_edge_prob: 0.005,
            conflict_rate: 0.6,
            feature_noise_std: 0.3,
            seed: 0,
        }
    }
}

impl SynthGenParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidParams(m.to_string()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.num_nodes == 0 || self.num_classes == 0 {
            return bad("num_nodes and num_classes must be positive");
        }
        if self.num_classes > self.num_nodes {
            return bad("num_classes exceeds num_nodes");
        }
        if self.d_text == 0 || self.d_image == 0 {
            return bad("modality dimensions must be positive");
        }
        if !prob(self.intra_class_edge_prob) || !prob(self.inter_class_edge_prob) {
            return bad("edge probabilities must lie in [0, 1]");
        }
        if !prob(self.conflict_rate) {
            return bad("conflict_rate must lie in [0, 1]");
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return bad("feature_noise_std must be a finite non-negative number");
        }
        if self.conflict_rate > 0.0 && self.num_classes < 2 {
            return bad("conflicts need at least two classes");
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Per-class class-center draws used by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct ClassCenters {
    pub text: Vec<Vec<f64>>,
    pub image: Vec<Vec<f64>>,
}

/// Samples a stochastic-block-model graph whose image features disagree with
/// the label on a `conflict_rate` fraction of nodes.
pub fn generate_synthetic(params: &SynthGenParams) -> Result<MultimodalGraph, DatasetError> {
    generate_with_centers(params).map(|(g, _)| g)
}

pub fn generate_with_centers(params: &SynthGenParams) -> Result<(MultimodalGraph, ClassCenters), DatasetError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (n, c) = (params.num_nodes, params.num_classes);
    let modality = ModalitySplit::new(params.d_text, params.d_image);

    let centers = ClassCenters {
        text: (0..c).map(|_| unit_direction(&mut rng, params.d_text)).collect(),
        image: (0..c).map(|_| unit_direction(&mut rng, params.d_image)).collect(),
    };

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let mut features = Tensor::zeros(n, modality.dim());
    let mut conflicted = vec![false; n];
    for i in 0..n {
        let y = labels[i];
        let image_class = if rng.random::<f64>() < params.conflict_rate {
            conflicted[i] = true;
            let other = rng.random_range(0..c - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        } else {
            y
        };
        let row = features.row_mut(i);
        for (k, slot) in row.iter_mut().enumerate() {
            let center = if k < modality.d_text {
                centers.text[y][k]
            } else {
                centers.image[image_class][k - modality.d_text]
            };
            let noise: f64 = StandardNormal.sample(&mut rng);
            *slot = center + params.feature_noise_std * noise;
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] {
                params.intra_class_edge_prob
            } else {
                params.inter_class_edge_prob
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let adjacency = SparseAdjacency::from_edges(n, &edges);
    let splits = stratified_splits(&labels, c, &mut rng);

    let graph = MultimodalGraph {
        features,
        modality,
        adjacency,
        labels,
        num_classes: c,
        splits,
        conflicted: Some(conflicted),
    };
    Ok((graph, centers))
}

/// 60/10/30 per class, each part rounded to the nearest node.
fn stratified_splits(labels: &[usize], num_classes: usize, rng: &mut impl Rng) -> Splits {
    let mut splits = Splits::default();
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let m = members.len();
        let n_train = ((0.6 * m as f64) + 0.5).floor() as usize;
        let n_val = (((0.1 * m as f64) + 0.5).floor() as usize).min(m - n_train);
        splits.train.extend_from_slice(&members[..n_train]);
        splits.val.extend_from_slice(&members[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&members[n_train + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    splits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub num_nodes: usize,
    pub d_text: usize,
    pub d_image: usize,
    pub num_classes: usize,
    pub split_sizes: SplitSizes,
    pub format_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_conflict_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_file(dir: &Path, name: &str) -> Result<(PathBuf, Vec<u8>), DatasetError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok((path, bytes))
}

fn element_count(path: &Path, bytes: &[u8], width: usize, expected: usize) -> Result<(), DatasetError> {
    if bytes.len() % width != 0 || bytes.len() / width != expected {
        return Err(DatasetError::ShapeMismatch {
            file: path.to_path_buf(),
            detail: format!(
                "expected {expected} elements of {width} bytes, file holds {} bytes",
                bytes.len()
            ),
        });
    }
    Ok(())
}

pub(crate) fn read_f64(dir: &Path, name: &str, expected: usize) -> Result<(PathBuf, Vec<f64>), DatasetError> {
    let (path, bytes) = read_file(dir, name)?;
    element_count(&path, &bytes, 8, expected)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((path, values))
}

fn read_u64(dir: &Path, name: &str, expected: usize) -> Result<(PathBuf, Vec<usize>), DatasetError> {
    let (path, bytes) = read_file(dir, name)?;
    element_count(&path, &bytes, 8, expected)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    Ok((path, values))
}

pub(crate) fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), DatasetError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))
}

pub(crate) fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn u64_bytes(values: &[usize]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as u64).to_le_bytes()).collect()
}

pub fn read_meta(dir: &Path) -> Result<Meta, DatasetError> {
    let (path, bytes) = read_file(dir, "meta.json")?;
    let meta: Meta = serde_json::from_slice(&bytes).map_err(|source| DatasetError::Meta {
        file: path.clone(),
        source,
    })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(DatasetError::FormatVersion {
            file: path,
            found: meta.format_version,
        });
    }
    Ok(meta)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<MultimodalGraph, DatasetError> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let n = meta.num_nodes;
    let modality = ModalitySplit::new(meta.d_text, meta.d_image);
    if modality.d_text == 0 || modality.d_image == 0 {
        return Err(DatasetError::ShapeMismatch {
            file: dir.join("meta.json"),
            detail: "modality widths must be positive".into(),
        });
    }

    let (_, features) = read_f64(dir, "features.f64", n * modality.dim())?;
    let features = Tensor::from_vec(n, modality.dim(), features).expect("length checked");

    let (labels_path, bytes) = read_file(dir, "labels.u32")?;
    element_count(&labels_path, &bytes, 4, n)?;
    let mut labels = Vec::with_capacity(n);
    for (node, c) in bytes.chunks_exact(4).enumerate() {
        let label = u32::from_le_bytes(c.try_into().expect("4-byte chunk"));
        if label as usize >= meta.num_classes {
            return Err(DatasetError::LabelOutOfRange {
                file: labels_path,
                node,
                label,
                num_classes: meta.num_classes,
            });
        }
        labels.push(label as usize);
    }

    let (indptr_path, indptr) = read_u64(dir, "indptr.u64", n + 1)?;
    let nnz = *indptr.last().unwrap_or(&0);
    let (_, indices) = read_u64(dir, "indices.u64", nnz)?;
    let (_, weights) = read_f64(dir, "edgeweights.f64", nnz)?;
    let csr = CsrMatrix::new(n, n, indptr, indices, weights).map_err(|e| DatasetError::ShapeMismatch {
        file: indptr_path,
        detail: e.to_string(),
    })?;
    let adjacency = SparseAdjacency::new(csr).map_err(|source| DatasetError::Asymmetric {
        file: dir.join("indices.u64"),
        source,
    })?;

    let mut parts = Vec::with_capacity(3);
    for (name, expected) in [
        ("train.u64", meta.split_sizes.train),
        ("val.u64", meta.split_sizes.val),
        ("test.u64", meta.split_sizes.test),
    ] {
        let (path, idx) = read_u64(dir, name, expected)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DatasetError::InvalidSplit {
                file: path,
                detail: format!("index {bad} >= num_nodes={n}"),
            });
        }
        parts.push((path, idx));
    }
    let mut seen = vec![false; n];
    for (path, idx) in &parts {
        for &i in idx {
            if seen[i] {
                return Err(DatasetError::InvalidSplit {
                    file: path.clone(),
                    detail: format!("node {i} appears in more than one split"),
                });
            }
            seen[i] = true;
        }
    }
    let mut parts = parts.into_iter().map(|(_, v)| v);
    let splits = Splits {
        train: parts.next().expect("train"),
        val: parts.next().expect("val"),
        test: parts.next().expect("test"),
    };

    let conflicted = if dir.join("conflicted.u8").is_file() {
        let (path, bytes) = read_file(dir, "conflicted.u8")?;
        element_count(&path, &bytes, 1, n)?;
        Some(bytes.iter().map(|&b| b != 0).collect())
    } else {
        None
    };

    Ok(MultimodalGraph {
        features,
        modality,
        adjacency,
        labels,
        num_classes: meta.num_classes,
        splits,
        conflicted,
    })
}

pub(crate) struct RawGraph<'a> {
    pub features: &'a Tensor,
    pub modality: ModalitySplit,
    pub labels: &'a [usize],
    pub num_classes: usize,
    pub csr: &'a CsrMatrix,
    pub splits: &'a Splits,
    pub conflicted: Option<&'a [bool]>,
    pub kind: Option<&'a str>,
}

pub(crate) fn write_graph_files(dir: &Path, g: &RawGraph<'_>) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let planted = g
        .conflicted
        .map(|f| f.iter().filter(|&&c| c).count() as f64 / f.len().max(1) as f64);
    let meta = Meta {
        num_nodes: g.labels.len(),
        d_text: g.modality.d_text,
        d_image: g.modality.d_image,
        num_classes: g.num_classes,
        split_sizes: SplitSizes {
            train: g.splits.train.len(),
            val: g.splits.val.len(),
            test: g.splits.test.len(),
        },
        format_version: FORMAT_VERSION,
        planted_conflict_fraction: planted,
        kind: g.kind.map(str::to_string),
    };
    let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write_bytes(dir, "meta.json", &meta_json)?;
    write_bytes(dir, "features.f64", &f64_bytes(g.features.as_slice()))?;
    let labels: Vec<u8> = g.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    write_bytes(dir, "labels.u32", &labels)?;
    write_bytes(dir, "indptr.u64", &u64_bytes(g.csr.indptr()))?;
    write_bytes(dir, "indices.u64", &u64_bytes(g.csr.indices()))?;
    write_bytes(dir, "edgeweights.f64", &f64_bytes(g.csr.values()))?;
    write_bytes(dir, "train.u64", &u64_bytes(&g.splits.train))?;
    write_bytes(dir, "val.u64", &u64_bytes(&g.splits.val))?;
    write_bytes(dir, "test.u64", &u64_bytes(&g.splits.test))?;
    if let Some(flags) = g.conflicted {
        let bytes: Vec<u8> = flags.iter().map(|&c| u8::from(c)).collect();
        write_bytes(dir, "conflicted.u8", &bytes)?;
    }
    Ok(())
}

pub fn save_dataset(graph: &MultimodalGraph, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
    graph.validate()?;
    write_graph_files(
        dir.as_ref(),
        &RawGraph {
            features: &graph.features,
            modality: graph.modality,
            labels: &graph.labels,
            num_classes: graph.num_classes,
            csr: graph.adjacency.csr(),
            splits: &graph.splits,
            conflicted: graph.conflicted.as_deref(),
            kind: None,
        },
    )
}
