//! Scoring features against prototype sets, ensembling the per-graph scores,
//! and turning scores into probabilities and rankings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgtm::PrototypeSet;
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    #[default]
    InnerProduct,
    Cosine,
    Pearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    /// Single graph, scores used as is.
    None,
    /// Average over graphs ("soft voting").
    Mean,
    /// Per-class maximum over graphs.
    #[default]
    Max,
}

fn centered<T: Scalar>(v: &[T]) -> Vec<T> {
    let mean = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
    v.iter().map(|&x| x - mean).collect()
}

fn cosine_parts<T: Scalar>(x: &[T], w: &[T]) -> Option<(T, T, T)> {
    let nx = dot(x, x).sqrt();
    let nw = dot(w, w).sqrt();
    if nx == T::zero() || nw == T::zero() {
        None
    } else {
        Some((dot(x, w) / (nx * nw), nx, nw))
    }
}

/// Zero vectors (cosine) and constant vectors (Pearson) score 0.
pub fn similarity<T: Scalar>(x: &[T], w: &[T], kind: SimilarityKind) -> T {
    debug_assert_eq!(x.len(), w.len());
    match kind {
        SimilarityKind::InnerProduct => dot(x, w),
        SimilarityKind::Cosine => cosine_parts(x, w).map_or(T::zero(), |(c, _, _)| c),
        SimilarityKind::Pearson => {
            cosine_parts(&centered(x), &centered(w)).map_or(T::zero(), |(c, _, _)| c)
        }
    }
}

/// True when `similarity` fell back to the zero-score convention.
pub fn is_degenerate<T: Scalar>(x: &[T], w: &[T], kind: SimilarityKind) -> bool {
    match kind {
        SimilarityKind::InnerProduct => false,
        SimilarityKind::Cosine => cosine_parts(x, w).is_none(),
        SimilarityKind::Pearson => cosine_parts(&centered(x), &centered(w)).is_none(),
    }
}

/// Gradient of `similarity(x, w)` with respect to `w`.
pub fn similarity_grad_w<T: Scalar>(x: &[T], w: &[T], kind: SimilarityKind) -> Vec<T> {
    let cos_grad = |x: &[T], w: &[T]| -> Vec<T> {
        match cosine_parts(x, w) {
            None => vec![T::zero(); w.len()],
            Some((c, nx, nw)) => x
                .iter()
                .zip(w)
                .map(|(&xi, &wi)| xi / (nx * nw) - c * wi / (nw * nw))
                .collect(),
        }
    };
    match kind {
        SimilarityKind::InnerProduct => x.to_vec(),
        SimilarityKind::Cosine => cos_grad(x, w),
        SimilarityKind::Pearson => centered(&cos_grad(&centered(x), &centered(w))),
    }
}

/// Per-class combined scores for one feature vector, plus which graph won
/// each class under max ensembling (lowest index on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleScores<T> {
    pub scores: Vec<T>,
    pub per_graph: Matrix<T>,
    pub winners: Vec<usize>,
}

fn check_prototypes<T: Scalar>(
    dim: usize,
    prototypes: &[&PrototypeSet<T>],
    ens: EnsembleKind,
) -> Result<usize> {
    let first = prototypes
        .first()
        .ok_or_else(|| Error::input("scoring needs at least one prototype set"))?;
    if ens == EnsembleKind::None && prototypes.len() != 1 {
        return Err(Error::config(format!(
            "ensemble 'none' requires exactly one graph, got {}",
            prototypes.len()
        )));
    }
    let k = first.n_classes();
    for p in prototypes {
        if p.n_classes() != k || p.dim() != dim {
            return Err(Error::input(format!(
                "prototype set is {}x{}, expected {k}x{dim}",
                p.n_classes(),
                p.dim()
            )));
        }
    }
    Ok(k)
}

pub fn score_detailed<T: Scalar>(
    x: &[T],
    prototypes: &[&PrototypeSet<T>],
    kind: SimilarityKind,
    ens: EnsembleKind,
) -> Result<EnsembleScores<T>> {
    let k = check_prototypes(x.len(), prototypes, ens)?;
    let m = prototypes.len();
    let per_graph = Matrix::from_fn(m, k, |g, c| similarity(x, prototypes[g].prototype(c), kind));
    let mut scores = Vec::with_capacity(k);
    let mut winners = vec![0; k];
    for c in 0..k {
        let col = (0..m).map(|g| per_graph[(g, c)]);
        let s = match ens {
            EnsembleKind::None => per_graph[(0, c)],
            EnsembleKind::Mean => col.sum::<T>() / T::of(m as f64),
            EnsembleKind::Max => {
                let mut best = 0;
                for g in 1..m {
                    if per_graph[(g, c)] > per_graph[(best, c)] {
                        best = g;
                    }
                }
                winners[c] = best;
                per_graph[(best, c)]
            }
        };
        scores.push(s);
    }
    Ok(EnsembleScores {
        scores,
        per_graph,
        winners,
    })
}

/// Combined class scores for one feature vector.
pub fn score<T: Scalar>(
    x: &[T],
    prototypes: &[&PrototypeSet<T>],
    kind: SimilarityKind,
    ens: EnsembleKind,
) -> Result<Vec<T>> {
    Ok(score_detailed(x, prototypes, kind, ens)?.scores)
}

/// Scores every row of `features`; returns `N × K` scores and the number of
/// (sample, class, graph) triples that hit the degenerate-similarity rule.
pub fn score_batch<T: Scalar>(
    features: &Matrix<T>,
    prototypes: &[&PrototypeSet<T>],
    kind: SimilarityKind,
    ens: EnsembleKind,
) -> Result<(Matrix<T>, usize)> {
    let k = check_prototypes(features.cols(), prototypes, ens)?;
    let mut out = Matrix::zeros(features.rows(), k);
    let mut degenerate = 0;
    for i in 0..features.rows() {
        let x = features.row(i);
        let s = score(x, prototypes, kind, ens)?;
        out.row_mut(i).copy_from_slice(&s);
        if kind != SimilarityKind::InnerProduct {
            degenerate += prototypes
                .iter()
                .flat_map(|p| (0..k).map(move |c| p.prototype(c)))
                .filter(|w| is_degenerate(x, w, kind))
                .count();
        }
    }
    Ok((out, degenerate))
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(s: &[T]) -> Vec<T> {
    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = s.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().sum::<T>();
    exps.into_iter().map(|e| e / total).collect()
}

/// Indices of the `k` largest scores, descending, ties to the lower index.
pub fn predict_topk<T: Scalar>(s: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > s.len() {
        return Err(Error::input(format!("top-k needs 1 <= k <= {}, got {k}", s.len())));
    }
    let mut top: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &v) in s.iter().enumerate() {
        // first position whose score is strictly below v keeps earlier ties ahead
        let pos = top.partition_point(|&j| s[j] >= v);
        if pos < k {
            top.insert(pos, i);
            top.truncate(k);
        }
    }
    Ok(top)
}
