//! Class-correlation graphs: distance construction from embeddings or a
//! taxonomy, the exponential nearest-neighbour transform, baselines, and the
//! descriptive statistics / Mantel analyses used to compare knowledge sources.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::scalar::Scalar;

/// Default decay for word-embedding graphs.
pub const GLOVE_DECAY: f64 = 0.4;
/// Default decay for taxonomy graphs.
pub const HIERARCHY_DECAY: f64 = 0.5;
/// Default decay for knowledge-base entity embedding graphs.
pub const WIKI_DECAY: f64 = 0.32;
pub const DEFAULT_PERMUTATIONS: usize = 999;

/// One embedding row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    values: Matrix<T>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(values: Matrix<T>) -> Result<Self> {
        if values.rows() < 2 {
            return Err(Error::input("embedding matrix needs at least 2 classes"));
        }
        if values.cols() < 1 {
            return Err(Error::input("embedding dimension must be at least 1"));
        }
        if let Some(pos) = values.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite embedding value at row {}, column {}",
                pos / values.cols(),
                pos % values.cols()
            )));
        }
        Ok(Self { values })
    }

    pub fn n_classes(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix<T> {
        &self.values
    }
}

/// Rooted tree over named nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
}

impl Taxonomy {
    /// Validates a parent array: exactly one root, no cycles.
    pub fn new(names: Vec<String>, parent: Vec<Option<usize>>) -> Result<Self> {
        let n = parent.len();
        if names.len() != n {
            return Err(Error::input("taxonomy names and parents differ in length"));
        }
        let roots = parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::input(format!(
                "taxonomy must have exactly one root, found {roots}"
            )));
        }
        if let Some(bad) = parent.iter().flatten().find(|&&p| p >= n) {
            return Err(Error::input(format!("parent index {bad} out of range")));
        }

        // depth by walking to the root; a walk longer than n revisits a node
        let mut depth = vec![usize::MAX; n];
        for start in 0..n {
            let mut chain = Vec::new();
            let mut cur = start;
            loop {
                if depth[cur] != usize::MAX {
                    break;
                }
                chain.push(cur);
                if chain.len() > n {
                    return Err(Error::input(format!(
                        "cycle in taxonomy through node {:?}",
                        names[start]
                    )));
                }
                match parent[cur] {
                    Some(p) => cur = p,
                    None => {
                        depth[cur] = 0;
                        chain.pop();
                        break;
                    }
                }
            }
            let mut d = depth[cur];
            for &node in chain.iter().rev() {
                d += 1;
                depth[node] = d;
            }
        }
        Ok(Self {
            names,
            parent,
            depth,
        })
    }

    /// Parses `<node_id>\t<parent_id|ROOT>` lines. Node order is line order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut parent_names = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(id), Some(p), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::input(format!(
                    "taxonomy line {}: expected <node>\\t<parent|ROOT>",
                    lineno + 1
                )));
            };
            names.push(id.trim().to_string());
            parent_names.push(p.trim().to_string());
        }
        let mut index = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate taxonomy node {name:?}")));
            }
        }
        let parent = parent_names
            .iter()
            .map(|p| {
                if p == "ROOT" {
                    Ok(None)
                } else {
                    index
                        .get(p)
                        .copied()
                        .map(Some)
                        .ok_or_else(|| Error::input(format!("unknown parent {p:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(names, parent)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depth[node]
    }

    /// Nodes without children, in index order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.len()];
        for p in self.parent.iter().flatten() {
            has_child[*p] = true;
        }
        (0..self.len()).filter(|&i| !has_child[i]).collect()
    }

    pub fn lowest_common_ancestor(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap();
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap();
        }
        while a != b {
            a = self.parent[a].unwrap();
            b = self.parent[b].unwrap();
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomyDistance {
    /// Edge count through the lowest common ancestor.
    PathLength,
    /// Maximum shared-ancestor count minus the pair's shared-ancestor count.
    AncestorCount,
}

/// Symmetric, non-negative, zero-diagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T> {
    d: Matrix<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn new(d: Matrix<T>) -> Result<Self> {
        if !d.is_square() {
            return Err(Error::input("distance matrix must be square"));
        }
        let n = d.rows();
        for i in 0..n {
            if d[(i, i)] != T::zero() {
                return Err(Error::input(format!("distance diagonal ({i},{i}) is nonzero")));
            }
            for j in 0..n {
                let v = d[(i, j)];
                if !v.is_finite() || v < T::zero() {
                    return Err(Error::input(format!("invalid distance at ({i},{j})")));
                }
                if v != d[(j, i)] {
                    return Err(Error::input(format!("distance not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { d })
    }

    pub fn n(&self) -> usize {
        self.d.rows()
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.d
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.d
    }
}

/// Class-by-class correlation matrix fed to a transfer module.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationGraph<T> {
    a: Matrix<T>,
    decay: Option<T>,
    symmetrized: bool,
}

impl<T: Scalar> CorrelationGraph<T> {
    /// Wraps an arbitrary square, finite matrix (e.g. loaded from disk).
    pub fn from_matrix(a: Matrix<T>) -> Result<Self> {
        if !a.is_square() || a.rows() < 2 {
            return Err(Error::input("correlation graph must be square with n >= 2"));
        }
        if !a.all_finite() {
            return Err(Error::input("correlation graph has non-finite entries"));
        }
        Ok(Self {
            a,
            decay: None,
            symmetrized: false,
        })
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn decay(&self) -> Option<T> {
        self.decay
    }

    pub fn is_symmetrized(&self) -> bool {
        self.symmetrized
    }

    /// `P·A·Pᵀ` for the class permutation `perm` (new index i ← old perm[i]).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            a: self.a.permute_symmetric(perm),
            decay: self.decay,
            symmetrized: self.symmetrized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MantelResult {
    pub r: f64,
    pub p: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Uniform,
    Random,
}

pub fn pairwise_euclidean<T: Scalar>(e: &EmbeddingMatrix<T>) -> DistanceMatrix<T> {
    let v = e.values();
    let n = v.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = v
                .row(i)
                .iter()
                .zip(v.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    DistanceMatrix { d }
}

/// Tree distances between every pair of taxonomy nodes.
pub fn taxonomy_distance<T: Scalar>(t: &Taxonomy, mode: TaxonomyDistance) -> DistanceMatrix<T> {
    taxonomy_distance_over(t, &(0..t.len()).collect::<Vec<_>>(), mode)
}

/// Tree distances restricted to `nodes` (e.g. the leaves acting as classes).
pub fn taxonomy_distance_over<T: Scalar>(
    t: &Taxonomy,
    nodes: &[usize],
    mode: TaxonomyDistance,
) -> DistanceMatrix<T> {
    let n = nodes.len();
    let mut lca_depth = Matrix::<T>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            lca_depth[(i, j)] = T::of(t.depth(t.lowest_common_ancestor(nodes[i], nodes[j])) as f64);
        }
    }
    let mut d = Matrix::zeros(n, n);
    match mode {
        TaxonomyDistance::PathLength => {
            for i in 0..n {
                for j in 0..n {
                    let di = T::of(t.depth(nodes[i]) as f64);
                    let dj = T::of(t.depth(nodes[j]) as f64);
                    d[(i, j)] = di + dj - T::of(2.0) * lca_depth[(i, j)];
                }
            }
        }
        TaxonomyDistance::AncestorCount => {
            // ancestors are counted inclusively, so a shared set is the LCA's chain to the root
            let shared = |i: usize, j: usize| lca_depth[(i, j)] + T::one();
            let mut max_shared = T::zero();
            for i in 0..n {
                for j in (i + 1)..n {
                    max_shared = max_shared.max(shared(i, j));
                }
            }
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        d[(i, j)] = max_shared - shared(i, j);
                    }
                }
            }
        }
    }
    DistanceMatrix { d }
}

/// Row-wise exponential transform: `a[i][j] = decay^(d[i][j] - min_{k≠i} d[i][k])`, `a[i][i] = 1`.
pub fn kg_transform<T: Scalar>(d: &DistanceMatrix<T>, decay: T) -> Result<CorrelationGraph<T>> {
    if !(decay > T::zero() && decay < T::one()) {
        return Err(Error::config(format!("decay must lie in (0, 1), got {decay}")));
    }
    let n = d.n();
    if n < 2 {
        return Err(Error::input("correlation graph needs at least 2 classes"));
    }
    let dm = d.as_matrix();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let row_min = (0..n)
            .filter(|&k| k != i)
            .map(|k| dm[(i, k)])
            .fold(T::infinity(), T::min);
        for j in 0..n {
            a[(i, j)] = if i == j {
                T::one()
            } else {
                let v = decay.powf(dm[(i, j)] - row_min);
                if v > T::zero() {
                    v
                } else {
                    T::min_positive_value()
                }
            };
        }
    }
    Ok(CorrelationGraph {
        a,
        decay: Some(decay),
        symmetrized: false,
    })
}

/// `a'[i][j] = a[i][j] + a[j][i]` off the diagonal, diagonal reset to 1.
pub fn symmetrize<T: Scalar>(g: &CorrelationGraph<T>) -> Result<CorrelationGraph<T>> {
    if g.symmetrized {
        return Err(Error::input("graph is already symmetrized"));
    }
    let n = g.n();
    let a = Matrix::from_fn(n, n, |i, j| {
        if i == j {
            T::one()
        } else {
            g.a[(i, j)] + g.a[(j, i)]
        }
    });
    Ok(CorrelationGraph {
        a,
        decay: g.decay,
        symmetrized: true,
    })
}

/// Min/mean/max/population-std over off-diagonal entries, or every entry
/// when `include_diagonal` is set.
pub fn matrix_stats<T: Scalar>(m: &Matrix<T>, include_diagonal: bool) -> Result<GraphStats> {
    if !m.is_square() || m.rows() < 2 {
        return Err(Error::input("statistics need a square matrix with n >= 2"));
    }
    let n = m.rows();
    let values: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| include_diagonal || i != j)
        .map(|(i, j)| m[(i, j)].as_f64())
        .collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(GraphStats {
            min,
            avg: min,
            max,
            std: 0.0,
        });
    }
    let count = values.len() as f64;
    let avg = (values.iter().sum::<f64>() / count).clamp(min, max);
    let var = values.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / count;
    Ok(GraphStats {
        min,
        avg,
        max,
        std: var.sqrt(),
    })
}

fn upper_triangle<T: Scalar>(m: &Matrix<T>, perm: Option<&[usize]>) -> Vec<f64> {
    let n = m.rows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = match perm {
                Some(p) => m[(p[i], p[j])],
                None => m[(i, j)],
            };
            out.push(v.as_f64());
        }
    }
    out
}

fn center(v: &mut [f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Permutation test of the correlation between the strict upper triangles of
/// two square matrices. One-sided (greater); labels of `d2` are permuted
/// jointly over rows and columns. Permutation `i` draws from stream `i` of the
/// seed, so the result is independent of the thread count.
pub fn mantel<T: Scalar>(
    d1: &Matrix<T>,
    d2: &Matrix<T>,
    n_perm: usize,
    seed: u64,
) -> Result<MantelResult> {
    if !d1.is_square() || !d2.is_square() {
        return Err(Error::input("mantel inputs must be square"));
    }
    if d1.rows() != d2.rows() {
        return Err(Error::input(format!(
            "mantel inputs differ in size: {} vs {}",
            d1.rows(),
            d2.rows()
        )));
    }
    if d1.rows() < 3 {
        return Err(Error::input("mantel test needs n >= 3"));
    }
    if n_perm < 1 {
        return Err(Error::config("mantel needs at least one permutation"));
    }
    let mut x = upper_triangle(d1, None);
    let x_norm = center(&mut x);
    let corr = |perm: Option<&[usize]>| -> Option<f64> {
        let mut y = upper_triangle(d2, perm);
        let y_norm = center(&mut y);
        let denom = x_norm * y_norm;
        (denom > 0.0).then(|| x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / denom)
    };
    let r = corr(None).ok_or_else(|| Error::input("mantel input has constant off-diagonal"))?;

    let n = d1.rows();
    let hits: usize = (0..n_perm)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::seeded(seed, i as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            usize::from(corr(Some(&perm)).unwrap_or(0.0) >= r)
        })
        .sum();
    Ok(MantelResult {
        r,
        p: (hits + 1) as f64 / (n_perm + 1) as f64,
        n_permutations: n_perm,
        seed,
    })
}

/// Uninformative reference graphs: constant `1/n`, or i.i.d. uniform draws.
pub fn baseline_graph<T: Scalar>(
    n: usize,
    kind: BaselineKind,
    seed: u64,
) -> Result<CorrelationGraph<T>> {
    if n < 2 {
        return Err(Error::input("baseline graph needs n >= 2"));
    }
    let a = match kind {
        BaselineKind::Uniform => Matrix::filled(n, n, T::one() / T::of(n as f64)),
        BaselineKind::Random => {
            let mut rng = rng::seeded(seed, 0);
            Matrix::from_fn(n, n, |_, _| rng::uniform01(&mut rng))
        }
    };
    Ok(CorrelationGraph {
        a,
        decay: None,
        symmetrized: false,
    })
}
