//! Top-k accuracy on novel/base/all test subsets and the repeated k-shot
//! experiment protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_topk, EnsembleKind, SimilarityKind};
use crate::data::{ksample, ClassRole, FewShotDataset};
use crate::error::{Error, Result};
use crate::graph::CorrelationGraph;
use crate::kgtm::{KgtmConfig, KgtmParams};
use crate::matrix::Matrix;
use crate::rng;
use crate::scalar::Scalar;
use crate::training::{train_stage2, KgtnModel, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Novel,
    Base,
    All,
}

impl Subset {
    pub fn admits(self, role: ClassRole) -> bool {
        match self {
            Subset::All => true,
            Subset::Novel => role == ClassRole::Novel,
            Subset::Base => role == ClassRole::Base,
        }
    }
}

/// Percentage of selected rows whose label is among the `k` best scores.
/// `rows` restricts which score rows count; the subset then filters by the
/// role of each row's true class.
pub fn topk_accuracy<T: Scalar>(
    scores: &Matrix<T>,
    labels: &[usize],
    k: usize,
    roles: &[ClassRole],
    subset: Subset,
) -> Result<f64> {
    if scores.rows() != labels.len() {
        return Err(Error::input("one label per score row required"));
    }
    if k == 0 || k > scores.cols() {
        return Err(Error::input(format!("top-k needs 1 <= k <= {}, got {k}", scores.cols())));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let role = *roles
            .get(y)
            .ok_or_else(|| Error::input(format!("label {y} has no class role")))?;
        if !subset.admits(role) {
            continue;
        }
        total += 1;
        if predict_topk(scores.row(i), k)?.contains(&y) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(Error::protocol(format!("no samples in the {subset:?} subset")));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KgtmSettings {
    pub steps: usize,
    /// Defaults to the feature dimension.
    pub hidden_dim: Option<usize>,
    pub init_scale: Option<f64>,
    pub freeze_init: bool,
}

impl Default for KgtmSettings {
    fn default() -> Self {
        Self {
            steps: crate::kgtm::DEFAULT_STEPS,
            hidden_dim: None,
            init_scale: None,
            freeze_init: false,
        }
    }
}

impl KgtmSettings {
    pub fn config(&self, n_classes: usize, feature_dim: usize, init_seed: u64) -> KgtmConfig {
        KgtmConfig {
            n_classes,
            hidden_dim: self.hidden_dim.unwrap_or(feature_dim),
            feature_dim,
            steps: self.steps,
            init_seed,
            init_scale: self.init_scale,
            freeze_init: self.freeze_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub k_shots: Vec<usize>,
    pub top_k: Vec<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    pub kgtm: KgtmSettings,
    pub similarity: SimilarityKind,
    pub ensemble: EnsembleKind,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k_shots: vec![1, 2, 5, 10],
            top_k: vec![5],
            repeats: 5,
            base_seed: 0,
            kgtm: KgtmSettings::default(),
            similarity: SimilarityKind::InnerProduct,
            ensemble: EnsembleKind::Max,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub subset: Subset,
    pub k_shot: usize,
    pub top_k: usize,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub std_kind: String,
    pub threads: usize,
    pub scalar_bits: u32,
    pub k_shots: Vec<usize>,
    pub top_k: Vec<usize>,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn entry(&self, subset: Subset, k_shot: usize, top_k: usize) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.subset == subset && e.k_shot == k_shot && e.top_k == top_k)
    }

    /// Rows: one per top-k metric. Columns: novel-k…, all-k… as `mean ± std`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tmetric");
        for subset in ["novel", "all"] {
            for k in &self.k_shots {
                out.push_str(&format!("\t{subset}-{k}"));
            }
        }
        out.push('\n');
        for &tk in &self.top_k {
            out.push_str(&format!("{}\ttop-{tk}", self.label));
            for subset in [Subset::Novel, Subset::All] {
                for &k in &self.k_shots {
                    match self.entry(subset, k, tk) {
                        Some(e) => out.push_str(&format!("\t{:.2} ± {:.2}", e.mean, e.std)),
                        None => out.push_str("\t-"),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// One trained model from the grid.
#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub repeat: usize,
    pub k_shot: usize,
    pub seed: u64,
    pub configs: Vec<KgtmConfig>,
    pub params: Vec<KgtmParams<T>>,
    pub log: TrainLog,
    /// (subset, top_k, accuracy)
    pub accuracy: Vec<(Subset, usize, f64)>,
}

const KSHOT_SALT: u64 = 1;
const INIT_SALT: u64 = 100;

/// Seeds used by repeat `r`: the k-shot draw, each module's init, and batches.
pub fn repeat_seed(base_seed: u64, repeat: usize) -> u64 {
    base_seed + repeat as u64
}

/// Trains and evaluates one grid cell: repeat `repeat` at `k_shot` shots.
pub fn run_one<T: Scalar>(
    dataset: &FewShotDataset<T>,
    graphs: &[CorrelationGraph<T>],
    cfg: &ExperimentConfig,
    repeat: usize,
    k_shot: usize,
) -> Result<RunOutcome<T>> {
    let seed = repeat_seed(cfg.base_seed, repeat);
    let ds = ksample(dataset, k_shot, rng::derive_seed(seed, KSHOT_SALT))?;
    let configs: Vec<KgtmConfig> = (0..graphs.len())
        .map(|m| {
            cfg.kgtm
                .config(ds.n_classes(), ds.dim(), rng::derive_seed(seed, INIT_SALT + m as u64))
        })
        .collect();
    let mut model = KgtnModel::new(graphs.to_vec(), configs, cfg.similarity, cfg.ensemble)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let log = train_stage2(&ds, &mut model, &train_cfg)?;

    let test = ds.test_indices(None);
    let scores = model.score_batch(&ds.features.select_rows(&test))?;
    let labels: Vec<usize> = test.iter().map(|&i| ds.labels[i]).collect();
    let mut accuracy = Vec::new();
    for subset in [Subset::Novel, Subset::All] {
        for &tk in &cfg.top_k {
            let tk_eff = tk.min(ds.n_classes());
            accuracy.push((subset, tk, topk_accuracy(&scores, &labels, tk_eff, &ds.class_role, subset)?));
        }
    }
    Ok(RunOutcome {
        repeat,
        k_shot,
        seed,
        configs: model.configs,
        params: model.params,
        log,
        accuracy,
    })
}

/// For each repeat and k-shot budget: resample novel shots, re-initialise,
/// train, and evaluate. Jobs run on the current rayon pool; results are
/// collected in grid order so the report does not depend on thread count.
pub fn run_experiment<T: Scalar>(
    dataset: &FewShotDataset<T>,
    graphs: &[CorrelationGraph<T>],
    cfg: &ExperimentConfig,
    label: &str,
) -> Result<(EvalReport, Vec<RunOutcome<T>>)> {
    if cfg.repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    if cfg.k_shots.is_empty() || cfg.top_k.is_empty() {
        return Err(Error::config("k_shots and top_k must be non-empty"));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.repeats)
        .flat_map(|r| cfg.k_shots.iter().map(move |&k| (r, k)))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(r, k)| {
            run_one(dataset, graphs, cfg, r, k).map_err(|e| match e {
                Error::Divergence { .. } | Error::Config(_) => e,
                other => Error::Protocol(format!("repeat {r}, {k}-shot: {other}")),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::new();
    for subset in [Subset::Novel, Subset::All] {
        for &k in &cfg.k_shots {
            for &tk in &cfg.top_k {
                let values: Vec<f64> = outcomes
                    .iter()
                    .filter(|o| o.k_shot == k)
                    .flat_map(|o| o.accuracy.iter().filter(|a| a.0 == subset && a.1 == tk).map(|a| a.2))
                    .collect();
                let (mean, std) = mean_std(&values);
                entries.push(EvalEntry {
                    subset,
                    k_shot: k,
                    top_k: tk,
                    mean,
                    std,
                    values,
                });
            }
        }
    }
    let report = EvalReport {
        label: label.to_string(),
        repeats: cfg.repeats,
        seeds: (0..cfg.repeats).map(|r| repeat_seed(cfg.base_seed, r)).collect(),
        std_kind: "population".into(),
        threads: rayon::current_num_threads(),
        scalar_bits: T::BITS,
        k_shots: cfg.k_shots.clone(),
        top_k: cfg.top_k.clone(),
        entries,
    };
    Ok((report, outcomes))
}
