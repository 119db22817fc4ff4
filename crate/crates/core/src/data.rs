//! Few-shot dataset model (base/novel class roles, train/test split, k-shot
//! subsampling), the synthetic Gaussian-cluster generator, and the JSON
//! manifest used to bring in externally extracted features.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{pairwise_euclidean, DistanceMatrix, EmbeddingMatrix};
use crate::kgem;
use crate::matrix::Matrix;
use crate::rng;
use crate::scalar::Scalar;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub class_role: Vec<ClassRole>,
    pub sample_split: Vec<Split>,
    /// Optional class-level cross-validation fold.
    pub fold: Option<Vec<u32>>,
    /// Novel-class budget applied by `ksample`, if any.
    pub k_shot: Option<usize>,
}

impl<T: Scalar> FewShotDataset<T> {
    pub fn new(
        features: Matrix<T>,
        labels: Vec<usize>,
        class_role: Vec<ClassRole>,
        sample_split: Vec<Split>,
    ) -> Result<Self> {
        let ds = Self {
            features,
            labels,
            class_role,
            sample_split,
            fold: None,
            k_shot: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        let k = self.class_role.len();
        if k < 2 {
            return Err(Error::input("class_role: dataset needs at least 2 classes"));
        }
        if self.labels.len() != n {
            return Err(Error::input(format!(
                "labels: {} entries for {n} feature rows",
                self.labels.len()
            )));
        }
        if self.sample_split.len() != n {
            return Err(Error::input(format!(
                "sample_split: {} entries for {n} feature rows",
                self.sample_split.len()
            )));
        }
        if let Some(bad) = self.labels.iter().position(|&y| y >= k) {
            return Err(Error::input(format!(
                "labels: sample {bad} has label {} but only {k} classes exist",
                self.labels[bad]
            )));
        }
        if let Some(f) = &self.fold {
            if f.len() != k {
                return Err(Error::input(format!("fold: {} entries for {k} classes", f.len())));
            }
        }
        if !self.features.all_finite() {
            return Err(Error::input("features: non-finite value"));
        }
        let mut test_count = vec![0usize; k];
        let mut train_count = vec![0usize; k];
        for (&y, &s) in self.labels.iter().zip(&self.sample_split) {
            match s {
                Split::Test => test_count[y] += 1,
                Split::Train => train_count[y] += 1,
            }
        }
        if let Some(c) = test_count.iter().position(|&c| c == 0) {
            return Err(Error::input(format!("sample_split: class {c} has no test sample")));
        }
        if let Some(kk) = self.k_shot {
            for c in 0..k {
                if self.class_role[c] == ClassRole::Novel && train_count[c] > kk {
                    return Err(Error::input(format!(
                        "k_shot: novel class {c} has {} train samples, budget is {kk}",
                        train_count[c]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_role.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn role_of_sample(&self, i: usize) -> ClassRole {
        self.class_role[self.labels[i]]
    }

    fn indices(&self, split: Split, role: Option<ClassRole>) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| self.sample_split[i] == split)
            .filter(|&i| role.is_none_or(|r| self.role_of_sample(i) == r))
            .collect()
    }

    pub fn base_train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train, Some(ClassRole::Base))
    }

    pub fn novel_train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train, Some(ClassRole::Novel))
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train, None)
    }

    pub fn test_indices(&self, role: Option<ClassRole>) -> Vec<usize> {
        self.indices(Split::Test, role)
    }

    fn retain(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = (0..self.n_samples()).filter(|&i| keep[i]).collect();
        Self {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_role: self.class_role.clone(),
            sample_split: idx.iter().map(|&i| self.sample_split[i]).collect(),
            fold: self.fold.clone(),
            k_shot: self.k_shot,
        }
    }
}

/// Keeps `k` uniformly chosen train samples per novel class (all of them if
/// fewer exist). Base-class and test samples are untouched.
pub fn ksample<T: Scalar>(ds: &FewShotDataset<T>, k: usize, seed: u64) -> Result<FewShotDataset<T>> {
    if k == 0 {
        return Err(Error::config("k-shot budget must be at least 1"));
    }
    let mut keep = vec![true; ds.n_samples()];
    let mut r = rng::seeded(seed, 0);
    for c in 0..ds.n_classes() {
        if ds.class_role[c] != ClassRole::Novel {
            continue;
        }
        let pool: Vec<usize> = (0..ds.n_samples())
            .filter(|&i| ds.labels[i] == c && ds.sample_split[i] == Split::Train)
            .collect();
        if pool.len() <= k {
            continue;
        }
        pool.iter().for_each(|&i| keep[i] = false);
        for j in sample(&mut r, pool.len(), k) {
            keep[pool[j]] = true;
        }
    }
    let mut out = ds.retain(&keep);
    out.k_shot = Some(ds.k_shot.map_or(k, |prev| prev.min(k)));
    Ok(out)
}

/// Parameters of the Gaussian-cluster stand-in dataset. Classes
/// `0..k_base` are base, the rest novel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k_base: usize,
    pub k_novel: usize,
    pub dim: usize,
    pub train_per_base: usize,
    /// Train pool per novel class, from which `ksample` draws.
    #[serde(default = "default_train_per_novel")]
    pub train_per_novel: usize,
    pub test_per_class: usize,
    pub cluster_std: f64,
    pub mean_scale: f64,
    pub seed: u64,
}

fn default_train_per_novel() -> usize {
    10
}

impl SyntheticSpec {
    /// 20 base + 20 novel classes in 32 dimensions.
    pub fn reference(seed: u64) -> Self {
        Self {
            k_base: 20,
            k_novel: 20,
            dim: 32,
            train_per_base: 50,
            train_per_novel: 10,
            test_per_class: 20,
            cluster_std: 1.0,
            mean_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.k_base,
            self.k_novel,
            self.dim,
            self.train_per_base,
            self.train_per_novel,
            self.test_per_class,
        ];
        if counts.contains(&0) {
            return Err(Error::config("synthetic spec counts must all be at least 1"));
        }
        if !(self.cluster_std >= 0.0 && self.mean_scale >= 0.0)
            || !self.cluster_std.is_finite()
            || !self.mean_scale.is_finite()
        {
            return Err(Error::config("synthetic spec scales must be finite and non-negative"));
        }
        Ok(())
    }
}

pub struct SyntheticData<T> {
    pub dataset: FewShotDataset<T>,
    pub class_means: Matrix<T>,
    /// Pairwise Euclidean distances between the true class means.
    pub oracle_distances: DistanceMatrix<T>,
}

pub fn synth_generate<T: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticData<T>> {
    spec.validate()?;
    let k = spec.k_base + spec.k_novel;
    let mut mean_rng = rng::seeded(spec.seed, 0);
    let mean_scale = T::of(spec.mean_scale);
    let means = Matrix::from_fn(k, spec.dim, |_, _| rng::gaussian(&mut mean_rng, mean_scale));

    let mut sample_rng = rng::seeded(spec.seed, 1);
    let std = T::of(spec.cluster_std);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for c in 0..k {
        let n_train = if c < spec.k_base {
            spec.train_per_base
        } else {
            spec.train_per_novel
        };
        for s in 0..(n_train + spec.test_per_class) {
            let row: Vec<T> = means
                .row(c)
                .iter()
                .map(|&m| m + rng::gaussian(&mut sample_rng, std))
                .collect();
            rows.push(row);
            labels.push(c);
            split.push(if s < n_train { Split::Train } else { Split::Test });
        }
    }
    let roles = (0..k)
        .map(|c| if c < spec.k_base { ClassRole::Base } else { ClassRole::Novel })
        .collect();
    let dataset = FewShotDataset::new(Matrix::from_rows(&rows)?, labels, roles, split)?;
    let oracle_distances = pairwise_euclidean(&EmbeddingMatrix::new(means.clone())?);
    Ok(SyntheticData {
        dataset,
        class_means: means,
        oracle_distances,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_file: PathBuf,
    pub labels: Vec<usize>,
    pub class_role: Vec<ClassRole>,
    pub sample_split: Vec<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_shot: Option<usize>,
}

/// Reads a manifest; `feature_file` is resolved relative to the manifest.
pub fn load_dataset<T: Scalar>(manifest_path: &Path) -> Result<FewShotDataset<T>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::load(manifest_path, e.to_string()))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(manifest_path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::load(
            manifest_path,
            format!("version: unsupported manifest version {}", m.version),
        ));
    }
    let feature_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&m.feature_file);
    let features = kgem::read(&feature_path)?;
    let ds = FewShotDataset {
        features,
        labels: m.labels,
        class_role: m.class_role,
        sample_split: m.sample_split,
        fold: m.fold,
        k_shot: m.k_shot,
    };
    ds.validate()
        .map_err(|e| Error::load(manifest_path, e.to_string()))?;
    Ok(ds)
}

/// Writes `<stem>.kgem` next to `manifest_path` and the manifest itself.
pub fn save_dataset<T: Scalar>(ds: &FewShotDataset<T>, manifest_path: &Path) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    let feature_file = PathBuf::from(format!("{stem}.features.kgem"));
    kgem::write(dir.join(&feature_file), &ds.features)?;
    let m = DatasetManifest {
        version: MANIFEST_VERSION,
        feature_file,
        labels: ds.labels.clone(),
        class_role: ds.class_role.clone(),
        sample_split: ds.sample_split.clone(),
        fold: ds.fold.clone(),
        k_shot: ds.k_shot,
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}
