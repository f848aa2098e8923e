//! Label-context partitioning by spectral clustering of co-occurrence, and
//! the context classifier head.

mod eigen;
mod kmeans;

pub use eigen::symmetric_eigen;
pub use kmeans::{canonical_labels, kmeans, Clustering};

use serde::{Deserialize, Serialize};

use crate::error::{CbsaError, Result};
use crate::nn::{Init, Linear, ParamStore, Session};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const EIGEN_TOL: f64 = 1e-10;
/// Added to zero degrees before the inverse square root.
pub const ISOLATED_DEGREE: f64 = 1e-8;

/// Which images count toward the normalizer `n_k` of row `k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Images that contain label `k`.
    #[default]
    Containing,
    /// Images whose only label is `k`.
    Only,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub s: Tensor,
    pub joint: Vec<Vec<u32>>,
    pub n_count: Vec<u32>,
}

pub fn build_cooccurrence(y: &Tensor, mode: CountMode) -> Result<Cooccurrence> {
    let (m, c) = y.dims();
    if m == 0 || y.is_empty() {
        return Err(CbsaError::EmptyLabeled);
    }
    let mut joint = vec![vec![0u32; c]; c];
    let mut n_count = vec![0u32; c];
    for i in 0..m {
        let pos: Vec<usize> = (0..c).filter(|&k| y.at(i, k) > 0.5).collect();
        for &k in &pos {
            for &l in &pos {
                joint[k][l] += 1;
            }
            if mode == CountMode::Containing || pos.len() == 1 {
                n_count[k] += 1;
            }
        }
    }
    let mut s = Tensor::zeros(&[c, c]);
    for k in 0..c {
        if n_count[k] == 0 {
            continue;
        }
        for l in 0..c {
            if k != l {
                s.set(k, l, joint[k][l] as f64 / n_count[k] as f64);
            }
        }
    }
    Ok(Cooccurrence { s, joint, n_count })
}

/// `(S + S^T) / 2` with a zero diagonal.
pub fn affinity(s: &Tensor) -> Result<Tensor> {
    let (c, cols) = s.dims();
    if c != cols {
        return Err(CbsaError::dim(format!("affinity needs a square matrix, got {:?}", s.shape())));
    }
    let mut p = Tensor::zeros(&[c, c]);
    for k in 0..c {
        for l in 0..k {
            let v = 0.5 * (s.at(k, l) + s.at(l, k));
            p.set(k, l, v);
            p.set(l, k, v);
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralEmbedding {
    pub degree: Vec<f64>,
    /// `D^{-1/2} (D - P) D^{-1/2}`.
    pub laplacian: Tensor,
    /// The `K` smallest eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Matching eigenvectors as columns (`C x K`), orthonormal.
    pub eigenvectors: Tensor,
    /// `eigenvectors` with unit rows (zero rows left at zero).
    pub embedding: Tensor,
}

pub fn normalized_laplacian(p: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let c = p.rows();
    let degree: Vec<f64> = (0..c)
        .map(|k| {
            let d: f64 = p.row(k).iter().sum();
            if d > 0.0 { d } else { d + ISOLATED_DEGREE }
        })
        .collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = Tensor::zeros(&[c, c]);
    for k in 0..c {
        for j in 0..c {
            let dp = if k == j { degree[k] - p.at(k, j) } else { -p.at(k, j) };
            l.set(k, j, inv_sqrt[k] * dp * inv_sqrt[j]);
        }
    }
    Ok((degree, l))
}

pub fn spectral_embed(p: &Tensor, k: usize) -> Result<SpectralEmbedding> {
    let (c, cols) = p.dims();
    if c != cols {
        return Err(CbsaError::dim(format!("affinity must be square, got {:?}", p.shape())));
    }
    if k == 0 || k > c {
        return Err(CbsaError::Spec(format!("K={k} must lie in 1..={c}")));
    }
    let (degree, laplacian) = normalized_laplacian(p)?;
    let (values, vectors) = symmetric_eigen(&laplacian, EIGEN_TOL)?;
    let mut eigenvectors = Tensor::zeros(&[c, k]);
    for r in 0..c {
        for j in 0..k {
            eigenvectors.set(r, j, vectors.at(r, j));
        }
    }
    let mut embedding = eigenvectors.clone();
    for r in 0..c {
        let row = embedding.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(SpectralEmbedding {
        degree,
        laplacian,
        eigenvalues: values[..k].to_vec(),
        eigenvectors,
        embedding,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextPartition {
    #[serde(rename = "K")]
    pub k: usize,
    pub assignment: Vec<usize>,
    pub eigenvalues: Vec<f64>,
}

impl ContextPartition {
    /// Labels grouped by cluster, each group ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.k];
        for (label, &c) in self.assignment.iter().enumerate() {
            g[c].push(label);
        }
        g
    }
}

/// Clusters the spectral embedding of `p`.
///
/// `K = 2` uses the sweep cut: labels are ordered by the second eigenvector
/// scaled by `D^{-1/2}` and split at the prefix with the lowest normalized
/// cut. Larger `K` runs k-means on the row-normalized embedding. Clusters are
/// renamed by first appearance over labels `0..C`.
pub fn partition_from_embedding(
    p: &Tensor,
    emb: &SpectralEmbedding,
    k: usize,
    rng: &mut Rng,
) -> Result<ContextPartition> {
    let assignment = if k == 2 {
        sweep_bipartition(p, emb)
    } else {
        kmeans(&emb.embedding, k, rng)?.assignment
    };
    Ok(ContextPartition {
        k,
        assignment: canonical_labels(&assignment),
        eigenvalues: emb.eigenvalues.clone(),
    })
}

fn sweep_bipartition(p: &Tensor, emb: &SpectralEmbedding) -> Vec<usize> {
    let c = p.rows();
    let f: Vec<f64> = (0..c)
        .map(|i| emb.eigenvectors.at(i, 1) / emb.degree[i].sqrt())
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| f[a].total_cmp(&f[b]));
    let mut best = (f64::INFINITY, vec![0; c]);
    for split in 1..c {
        let mut assignment = vec![0; c];
        for &i in &order[split..] {
            assignment[i] = 1;
        }
        let value = normalized_cut(p, &assignment);
        if value < best.0 {
            best = (value, assignment);
        }
    }
    best.1
}

/// Co-occurrence, affinity, spectral embedding and k-means in one call.
pub fn partition_labels(y_labeled: &Tensor, k: usize, mode: CountMode, rng: &mut Rng) -> Result<ContextPartition> {
    let co = build_cooccurrence(y_labeled, mode)?;
    let p = affinity(&co.s)?;
    let emb = spectral_embed(&p, k)?;
    partition_from_embedding(&p, &emb, k, rng)
}

/// `sum_c cut(A_c, rest) / vol(A_c)`; empty or zero-volume clusters add nothing.
pub fn normalized_cut(p: &Tensor, assignment: &[usize]) -> f64 {
    let k = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for c in 0..k {
        let (mut cut, mut vol) = (0.0, 0.0);
        for (i, &ai) in assignment.iter().enumerate() {
            if ai != c {
                continue;
            }
            for (j, &aj) in assignment.iter().enumerate() {
                vol += p.at(i, j);
                if aj != c {
                    cut += p.at(i, j);
                }
            }
        }
        if vol > 0.0 {
            total += cut / vol;
        }
    }
    total
}

/// Majority cluster among each image's positive labels, lowest id on ties;
/// `None` for images without positives.
pub fn assign_context_labels(y: &Tensor, partition: &ContextPartition) -> Result<Vec<Option<usize>>> {
    let (m, c) = y.dims();
    if partition.assignment.len() != c {
        return Err(CbsaError::dim(format!(
            "partition covers {} labels, data has {c}",
            partition.assignment.len()
        )));
    }
    Ok((0..m)
        .map(|i| {
            let mut votes = vec![0usize; partition.k];
            for k in 0..c {
                if y.at(i, k) > 0.5 {
                    votes[partition.assignment[k]] += 1;
                }
            }
            let best = votes.iter().copied().max().unwrap_or(0);
            (best > 0).then(|| votes.iter().position(|&v| v == best).expect("max exists"))
        })
        .collect())
}

/// Linear layer on the global feature followed by a softmax.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextHead {
    pub linear: Linear,
}

impl ContextHead {
    pub fn new(store: &mut ParamStore, d: usize, k: usize, rng: &mut Rng) -> Self {
        Self {
            linear: Linear::new(store, "context_head", d, k, Init::Fan, true, rng),
        }
    }

    pub fn n_contexts(&self) -> usize {
        self.linear.d_out
    }

    pub fn forward(&self, s: &mut Session, g: Var) -> Result<Var> {
        let logits = self.linear.forward(s, g)?;
        s.tape.softmax_rows(logits, 1.0)
    }

    pub fn predict(&self, store: &ParamStore, g: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(store);
        let gv = s.constant(g.clone());
        let out = self.forward(&mut s, gv)?;
        Ok(s.value(out).clone())
    }
}

/// Rows whose maximum strictly exceeds `tau`, with their argmax (first on ties).
pub fn context_pseudo(q_a: &Tensor, tau: f64) -> Vec<(usize, usize)> {
    (0..q_a.rows())
        .filter_map(|j| {
            let row = q_a.row(j);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            (row[best] > tau).then_some((j, best))
        })
        .collect()
}
