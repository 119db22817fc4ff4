//! Command-line front end. Every command prints a JSON summary on stdout and
//! writes its artifacts under `--out`.
//!
//! Settings resolve in three layers: built-in defaults, then the `--config`
//! file, then explicit flags.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classifier::{EnsembleKind, SimilarityKind};
use crate::data::{load_dataset, save_dataset, synth_generate, FewShotDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{run_experiment, run_one, EvalEntry, EvalReport, ExperimentConfig, Subset, topk_accuracy};
use crate::gradcheck::{self, GradCheckReport, Preset};
use crate::graph::{
    baseline_graph, kg_transform, mantel, matrix_stats, pairwise_euclidean, symmetrize,
    taxonomy_distance_over, BaselineKind, CorrelationGraph, EmbeddingMatrix, GraphStats, MantelResult,
    Taxonomy, TaxonomyDistance, DEFAULT_PERMUTATIONS, GLOVE_DECAY, HIERARCHY_DECAY,
};
use crate::kgem;
use crate::kgtm::{load_checkpoint, save_checkpoint};
use crate::matrix::Matrix;
use crate::rng;
use crate::training::{train_stage1, KgtnModel, SgmForm, TrainLog};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GRADCHECK: i32 = 5;
pub const MODEL_FORMAT_VERSION: u32 = 1;

const NOISE_SALT: u64 = 0x401;
const RANDOM_GRAPH_SALT: u64 = 0x5EED;

#[derive(Debug, Parser)]
#[command(name = "kgtn", version, about = "Few-shot prototype classification over ensembles of class-correlation graphs")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Directory receiving all outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a correlation graph from embeddings or a taxonomy.
    BuildGraph(BuildGraphArgs),
    /// Descriptive statistics of a matrix file.
    Stats(StatsArgs),
    /// Mantel permutation test between two square matrices.
    Mantel(MantelArgs),
    /// Generate the Gaussian-cluster dataset and its oracle graph.
    Synth(SynthArgs),
    /// Train one model (one k-shot draw).
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset's test split.
    Eval(EvalArgs),
    /// Full protocol: data, graphs, repeated training and evaluation.
    Run(RunArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["embeddings", "taxonomy"])))]
pub struct BuildGraphArgs {
    /// One embedding row per class (KGEM or TSV).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,

    /// `<node>\t<parent|ROOT>` lines; classes are the leaves.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,

    /// Transform decay in (0, 1). Defaults to 0.4 for embeddings, 0.5 for taxonomies.
    #[arg(long)]
    pub decay: Option<f64>,

    #[arg(long, overrides_with = "no_symmetrize")]
    pub symmetrize: bool,

    /// Keep the row-wise (asymmetric) transform.
    #[arg(long)]
    pub no_symmetrize: bool,

    #[arg(long, value_enum, default_value = "path-length")]
    pub distance: TaxonomyDistance,

    /// Use every taxonomy node as a class, not only the leaves.
    #[arg(long)]
    pub all_nodes: bool,

    /// Output file stem.
    #[arg(long, default_value = "graph")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    pub file: PathBuf,

    #[arg(long)]
    pub include_diagonal: bool,
}

#[derive(Debug, Args)]
pub struct MantelArgs {
    pub file1: PathBuf,
    pub file2: PathBuf,

    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub k_base: Option<usize>,
    #[arg(long)]
    pub k_novel: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub train_per_base: Option<usize>,
    #[arg(long)]
    pub train_per_novel: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub cluster_std: Option<f64>,
    #[arg(long)]
    pub mean_scale: Option<f64>,

    /// Decay of the oracle graph written next to the data.
    #[arg(long, default_value_t = GLOVE_DECAY)]
    pub decay: f64,

    /// Manifest file stem.
    #[arg(long, default_value = "dataset")]
    pub name: String,
}

/// Flags shared by `train` and `run`; each overrides the config file.
#[derive(Debug, Args, Default)]
pub struct ModelOverrides {
    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    /// Graph files, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub graphs: Option<Vec<PathBuf>>,

    #[arg(long, value_enum)]
    pub ensemble: Option<EnsembleKind>,

    #[arg(long, value_enum)]
    pub similarity: Option<SimilarityKind>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub sgm_weight: Option<f64>,

    #[arg(long, value_enum)]
    pub sgm_form: Option<SgmForm>,

    #[arg(long)]
    pub proto_reg: Option<f64>,

    /// Propagation steps of each transfer module.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Keep the initial hidden states fixed.
    #[arg(long)]
    pub freeze_init: bool,

    /// Give each module its own loss; ensemble only at inference.
    #[arg(long)]
    pub independent_loss: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelOverrides,

    /// Novel shots per class. Defaults to the first configured budget.
    #[arg(long)]
    pub k_shot: Option<usize>,

    /// Train the base-class linear head with the gradient-magnitude loss instead.
    #[arg(long)]
    pub stage1: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model directory written by `train`. Defaults to `<out>/model`.
    #[arg(long)]
    pub model: Option<PathBuf>,

    /// Dataset manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    #[arg(long, value_delimiter = ',')]
    pub top_k: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelOverrides,

    #[arg(long)]
    pub repeats: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    pub k_shots: Option<Vec<usize>>,

    #[arg(long, value_delimiter = ',')]
    pub top_k: Option<Vec<usize>>,

    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Suites to run; all of them when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub preset: Vec<Preset>,

    /// Corrupt one analytic entry (exercises the failure path).
    #[arg(long, hide = true)]
    pub tamper: bool,
}

/// Where the experiment's features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Manifest(PathBuf),
}

fn default_decay() -> f64 {
    GLOVE_DECAY
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum GraphSpec {
    /// Transform of the true class-mean distances (synthetic data only).
    Oracle {
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_true")]
        symmetrize: bool,
    },
    /// As `Oracle`, with Gaussian noise of this std added to each mean first.
    NoisyOracle {
        noise: f64,
        #[serde(default = "default_decay")]
        decay: f64,
        #[serde(default = "default_true")]
        symmetrize: bool,
    },
    Random,
    Uniform,
    File {
        path: PathBuf,
    },
}

impl GraphSpec {
    fn label(&self) -> String {
        match self {
            GraphSpec::Oracle { .. } => "oracle".into(),
            GraphSpec::NoisyOracle { noise, .. } => format!("noisy_oracle({noise})"),
            GraphSpec::Random => "random".into(),
            GraphSpec::Uniform => "uniform".into(),
            GraphSpec::File { path } => path.display().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub label: String,
    /// Overrides `experiment.base_seed` when set.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub graphs: Vec<GraphSpec>,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "kgtn".into(),
            seed: None,
            out: None,
            dataset: DatasetSource::Synthetic(SyntheticSpec::reference(0)),
            graphs: vec![GraphSpec::Oracle {
                decay: GLOVE_DECAY,
                symmetrize: true,
            }],
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSource::Manifest(p) = &mut cfg.dataset {
            *p = base.join(&*p);
        }
        for g in &mut cfg.graphs {
            if let GraphSpec::File { path } = g {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.graphs.is_empty() {
            return Err(Error::config("at least one graph is required"));
        }
        if self.experiment.ensemble == EnsembleKind::None && self.graphs.len() != 1 {
            return Err(Error::config("ensemble 'none' requires exactly one graph"));
        }
        for g in &self.graphs {
            match g {
                GraphSpec::Oracle { decay, .. } | GraphSpec::NoisyOracle { decay, .. } => {
                    if !(*decay > 0.0 && *decay < 1.0) {
                        return Err(Error::config(format!("graph decay must lie in (0, 1), got {decay}")));
                    }
                    if !matches!(self.dataset, DatasetSource::Synthetic(_)) {
                        return Err(Error::config("oracle graphs need a synthetic dataset"));
                    }
                }
                GraphSpec::File { path } if !path.exists() => {
                    return Err(Error::load(path, "graph file not found"));
                }
                _ => {}
            }
            if let GraphSpec::NoisyOracle { noise, .. } = g {
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::config("noise must be finite and non-negative"));
                }
            }
        }
        if let DatasetSource::Manifest(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::load(p, "dataset manifest not found"));
            }
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.experiment.train.validate()?;
        Ok(())
    }

    fn apply(&mut self, seed: Option<u64>, o: &ModelOverrides) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.experiment.base_seed = s;
        }
        if let Some(p) = &o.dataset {
            self.dataset = DatasetSource::Manifest(p.clone());
        }
        if let Some(files) = &o.graphs {
            self.graphs = files.iter().map(|p| GraphSpec::File { path: p.clone() }).collect();
        }
        let e = &mut self.experiment;
        if let Some(v) = o.ensemble {
            e.ensemble = v;
        }
        if let Some(v) = o.similarity {
            e.similarity = v;
        }
        if let Some(v) = o.steps {
            e.kgtm.steps = v;
        }
        if o.freeze_init {
            e.kgtm.freeze_init = true;
        }
        let t = &mut e.train;
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.lr {
            t.lr0 = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.sgm_weight {
            t.sgm_weight = v;
        }
        if let Some(v) = o.sgm_form {
            t.sgm_form = v;
        }
        if let Some(v) = o.proto_reg {
            t.proto_reg = v;
        }
        if o.independent_loss {
            t.ensemble_in_loss = false;
        }
    }
}

/// Features plus, for synthetic data, the true class means.
pub struct LoadedData {
    pub dataset: FewShotDataset<f64>,
    pub class_means: Option<Matrix<f64>>,
}

pub fn load_data(source: &DatasetSource) -> Result<LoadedData> {
    match source {
        DatasetSource::Synthetic(spec) => {
            let s = synth_generate::<f64>(spec)?;
            Ok(LoadedData {
                dataset: s.dataset,
                class_means: Some(s.class_means),
            })
        }
        DatasetSource::Manifest(p) => Ok(LoadedData {
            dataset: load_dataset(p)?,
            class_means: None,
        }),
    }
}

fn read_graph(path: &Path) -> Result<CorrelationGraph<f64>> {
    CorrelationGraph::from_matrix(kgem::read(path)?)
}

fn oracle_graph(means: &Matrix<f64>, decay: f64, sym: bool) -> Result<CorrelationGraph<f64>> {
    let g = kg_transform(&pairwise_euclidean(&EmbeddingMatrix::new(means.clone())?), decay)?;
    if sym {
        symmetrize(&g)
    } else {
        Ok(g)
    }
}

/// Materialises graph `m` of a run. Random draws derive from `seed` and `m`.
pub fn build_graph(spec: &GraphSpec, data: &LoadedData, seed: u64, m: usize) -> Result<CorrelationGraph<f64>> {
    let n = data.dataset.n_classes();
    let means = || {
        data.class_means
            .as_ref()
            .ok_or_else(|| Error::config("oracle graphs need a synthetic dataset"))
    };
    let g = match spec {
        GraphSpec::Oracle { decay, symmetrize } => oracle_graph(means()?, *decay, *symmetrize)?,
        GraphSpec::NoisyOracle {
            noise,
            decay,
            symmetrize,
        } => {
            let mut r = rng::seeded(rng::derive_seed(seed, NOISE_SALT + m as u64), 0);
            let mu = means()?;
            let noisy = Matrix::from_fn(mu.rows(), mu.cols(), |i, j| mu[(i, j)] + rng::gaussian(&mut r, *noise));
            oracle_graph(&noisy, *decay, *symmetrize)?
        }
        GraphSpec::Random => baseline_graph(n, BaselineKind::Random, rng::derive_seed(seed, RANDOM_GRAPH_SALT + m as u64))?,
        GraphSpec::Uniform => baseline_graph(n, BaselineKind::Uniform, 0)?,
        GraphSpec::File { path } => read_graph(path)?,
    };
    if g.n() != n {
        return Err(Error::input(format!(
            "graph {} has {} classes, dataset has {n}",
            spec.label(),
            g.n()
        )));
    }
    Ok(g)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    similarity: SimilarityKind,
    ensemble: EnsembleKind,
    k_shot: Option<usize>,
    modules: Vec<String>,
}

/// Writes one checkpoint directory (plus its graph) per module and `model.json`.
pub fn save_model(dir: &Path, model: &KgtnModel<f64>, k_shot: Option<usize>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut modules = Vec::new();
    for (m, ((g, c), p)) in model.graphs.iter().zip(&model.configs).zip(&model.params).enumerate() {
        let name = format!("module_{m}");
        let sub = dir.join(&name);
        save_checkpoint(&sub, c, p)?;
        kgem::write(sub.join("graph.kgem"), g.matrix())?;
        modules.push(name);
    }
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        similarity: model.similarity,
        ensemble: model.ensemble,
        k_shot,
        modules,
    };
    write_json(&dir.join("model.json"), &manifest)
}

pub fn load_model(dir: &Path) -> Result<(KgtnModel<f64>, Option<usize>)> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::load(&path, e.to_string()))?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::load(&path, format!("unsupported model version {}", manifest.format_version)));
    }
    let (mut graphs, mut configs, mut params) = (Vec::new(), Vec::new(), Vec::new());
    for name in &manifest.modules {
        let sub = dir.join(name);
        let (c, p) = load_checkpoint(&sub)?;
        graphs.push(read_graph(&sub.join("graph.kgem"))?);
        configs.push(c);
        params.push(p);
    }
    let model = KgtnModel::with_params(graphs, configs, params, manifest.similarity, manifest.ensemble)?;
    Ok((model, manifest.k_shot))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn log_lines(log: &TrainLog, tag: serde_json::Value) -> Result<String> {
    let mut out = String::new();
    for rec in &log.epochs {
        let mut v = serde_json::to_value(rec)?;
        if let (Some(obj), Some(extra)) = (v.as_object_mut(), tag.as_object()) {
            for (k, x) in extra {
                obj.insert(k.clone(), x.clone());
            }
        }
        out.push_str(&serde_json::to_string(&v)?);
        out.push('\n');
    }
    Ok(out)
}

struct Ctx {
    seed: Option<u64>,
    threads: usize,
    out: PathBuf,
    config: Option<RunConfig>,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn run_config(&self, o: &ModelOverrides) -> RunConfig {
        let mut cfg = self.config.clone().unwrap_or_default();
        cfg.apply(self.seed, o);
        cfg
    }
}

#[derive(Serialize)]
struct BuildGraphReport {
    graph: PathBuf,
    distances: PathBuf,
    n: usize,
    decay: f64,
    symmetrized: bool,
    threads: usize,
    #[serde(flatten)]
    stats: GraphStats,
}

fn cmd_build_graph(ctx: &Ctx, a: &BuildGraphArgs) -> Result<()> {
    let (d, default_decay) = if let Some(p) = &a.embeddings {
        let e = EmbeddingMatrix::new(kgem::read::<f64>(p)?)?;
        (pairwise_euclidean(&e), GLOVE_DECAY)
    } else {
        let p = a.taxonomy.as_ref().expect("clap enforces one source");
        let text = fs::read_to_string(p).map_err(|e| Error::load(p, e.to_string()))?;
        let t = Taxonomy::parse(&text)?;
        let nodes: Vec<usize> = if a.all_nodes { (0..t.len()).collect() } else { t.leaves() };
        (taxonomy_distance_over(&t, &nodes, a.distance), HIERARCHY_DECAY)
    };
    let decay = a.decay.unwrap_or(default_decay);
    let mut g = kg_transform(&d, decay)?;
    if !a.no_symmetrize {
        g = symmetrize(&g)?;
    }
    let out = ctx.out_dir()?;
    let graph_path = out.join(format!("{}.kgem", a.name));
    let dist_path = out.join(format!("{}.distances.kgem", a.name));
    kgem::write(&graph_path, g.matrix())?;
    kgem::write(&dist_path, d.as_matrix())?;
    print_json(&BuildGraphReport {
        graph: graph_path,
        distances: dist_path,
        n: g.n(),
        decay,
        symmetrized: g.is_symmetrized(),
        threads: ctx.threads,
        stats: matrix_stats(g.matrix(), false)?,
    })
}

#[derive(Serialize)]
struct StatsReport {
    file: PathBuf,
    rows: usize,
    cols: usize,
    include_diagonal: bool,
    threads: usize,
    #[serde(flatten)]
    stats: GraphStats,
}

fn cmd_stats(ctx: &Ctx, a: &StatsArgs) -> Result<()> {
    let m = kgem::read::<f64>(&a.file)?;
    print_json(&StatsReport {
        file: a.file.clone(),
        rows: m.rows(),
        cols: m.cols(),
        include_diagonal: a.include_diagonal,
        threads: ctx.threads,
        stats: matrix_stats(&m, a.include_diagonal)?,
    })
}

#[derive(Serialize)]
struct MantelReport {
    #[serde(flatten)]
    result: MantelResult,
    threads: usize,
}

fn cmd_mantel(ctx: &Ctx, a: &MantelArgs) -> Result<()> {
    let m1 = kgem::read::<f64>(&a.file1)?;
    let m2 = kgem::read::<f64>(&a.file2)?;
    let result = mantel(&m1, &m2, a.permutations, ctx.seed())?;
    print_json(&MantelReport {
        result,
        threads: ctx.threads,
    })
}

#[derive(Serialize)]
struct SynthReport {
    manifest: PathBuf,
    oracle_graph: PathBuf,
    spec: SyntheticSpec,
    samples: usize,
    threads: usize,
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let mut spec = match ctx.config.as_ref().map(|c| &c.dataset) {
        Some(DatasetSource::Synthetic(s)) => s.clone(),
        _ => SyntheticSpec::reference(0),
    };
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(k_base, k_novel, dim, train_per_base, train_per_novel, test_per_class, cluster_std, mean_scale);
    spec.validate()?;
    let s = synth_generate::<f64>(&spec)?;
    let out = ctx.out_dir()?;
    let manifest = out.join(format!("{}.json", a.name));
    save_dataset(&s.dataset, &manifest)?;
    kgem::write(out.join(format!("{}.class_means.kgem", a.name)), &s.class_means)?;
    kgem::write(out.join(format!("{}.oracle_distances.kgem", a.name)), s.oracle_distances.as_matrix())?;
    let oracle_path = out.join(format!("{}.oracle_graph.kgem", a.name));
    kgem::write(&oracle_path, symmetrize(&kg_transform(&s.oracle_distances, a.decay)?)?.matrix())?;
    print_json(&SynthReport {
        manifest,
        oracle_graph: oracle_path,
        samples: s.dataset.n_samples(),
        spec,
        threads: ctx.threads,
    })
}

#[derive(Serialize)]
struct TrainReport {
    model: Option<PathBuf>,
    train_log: PathBuf,
    k_shot: Option<usize>,
    seed: u64,
    epochs: usize,
    final_loss: Option<f64>,
    graphs: Vec<String>,
    threads: usize,
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let cfg = ctx.run_config(&a.model);
    cfg.validate()?;
    let seed = cfg.experiment.base_seed;
    let data = load_data(&cfg.dataset)?;
    let out = ctx.out_dir()?.to_path_buf();
    let log_path = out.join("train_log.jsonl");

    if a.stage1 {
        let train = crate::training::TrainConfig {
            seed,
            ..cfg.experiment.train.clone()
        };
        let (head, log) = train_stage1(&data.dataset, &train)?;
        let dir = out.join("stage1_head");
        fs::create_dir_all(&dir)?;
        kgem::write(dir.join("weight.kgem"), &head.weight)?;
        kgem::write(dir.join("bias.kgem"), &head.bias)?;
        fs::write(&log_path, log.to_jsonl()?)?;
        return print_json(&TrainReport {
            model: Some(dir),
            train_log: log_path,
            k_shot: None,
            seed,
            epochs: log.epochs.len(),
            final_loss: log.epochs.last().map(|r| r.loss_total),
            graphs: Vec::new(),
            threads: ctx.threads,
        });
    }

    let k_shot = a
        .k_shot
        .or_else(|| cfg.experiment.k_shots.first().copied())
        .ok_or_else(|| Error::config("no k-shot budget given"))?;
    let graphs = cfg
        .graphs
        .iter()
        .enumerate()
        .map(|(m, g)| build_graph(g, &data, seed, m))
        .collect::<Result<Vec<_>>>()?;
    let outcome = run_one(&data.dataset, &graphs, &cfg.experiment, 0, k_shot)?;
    let model = KgtnModel::with_params(
        graphs,
        outcome.configs,
        outcome.params,
        cfg.experiment.similarity,
        cfg.experiment.ensemble,
    )?;
    let dir = out.join("model");
    save_model(&dir, &model, Some(k_shot))?;
    fs::write(&log_path, outcome.log.to_jsonl()?)?;
    print_json(&TrainReport {
        model: Some(dir),
        train_log: log_path,
        k_shot: Some(k_shot),
        seed,
        epochs: outcome.log.epochs.len(),
        final_loss: outcome.log.epochs.last().map(|r| r.loss_total),
        graphs: cfg.graphs.iter().map(GraphSpec::label).collect(),
        threads: ctx.threads,
    })
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let model_dir = a.model.clone().unwrap_or_else(|| ctx.out.join("model"));
    let (model, k_shot) = load_model(&model_dir)?;
    let manifest = match (&a.dataset, ctx.config.as_ref().map(|c| &c.dataset)) {
        (Some(p), _) => p.clone(),
        (None, Some(DatasetSource::Manifest(p))) => p.clone(),
        _ => return Err(Error::config("eval needs --dataset or a manifest in --config")),
    };
    let ds = load_dataset::<f64>(&manifest)?;
    let top_k = a.top_k.clone().unwrap_or_else(|| vec![1, 5]);
    let test = ds.test_indices(None);
    let scores = model.score_batch(&ds.features.select_rows(&test))?;
    let labels: Vec<usize> = test.iter().map(|&i| ds.labels[i]).collect();
    let k = k_shot.or(ds.k_shot).unwrap_or(0);
    let mut entries = Vec::new();
    for subset in [Subset::Novel, Subset::All] {
        for &tk in &top_k {
            let acc = topk_accuracy(&scores, &labels, tk.min(ds.n_classes()), &ds.class_role, subset)?;
            entries.push(EvalEntry {
                subset,
                k_shot: k,
                top_k: tk,
                mean: acc,
                std: 0.0,
                values: vec![acc],
            });
        }
    }
    let report = EvalReport {
        label: model_dir.display().to_string(),
        repeats: 1,
        seeds: vec![ctx.seed()],
        std_kind: "population".into(),
        threads: ctx.threads,
        scalar_bits: 64,
        k_shots: vec![k],
        top_k,
        entries,
    };
    let out = ctx.out_dir()?;
    write_json(&out.join("eval_report.json"), &report)?;
    fs::write(out.join("eval_report.tsv"), report.to_tsv())?;
    print_json(&report)
}

fn cmd_run(ctx: &Ctx, a: &RunArgs) -> Result<()> {
    let mut cfg = ctx.run_config(&a.model);
    if let Some(v) = a.repeats {
        cfg.experiment.repeats = v;
    }
    if let Some(v) = &a.k_shots {
        cfg.experiment.k_shots = v.clone();
    }
    if let Some(v) = &a.top_k {
        cfg.experiment.top_k = v.clone();
    }
    if let Some(v) = &a.label {
        cfg.label = v.clone();
    }
    cfg.validate()?;
    let seed = cfg.experiment.base_seed;
    let data = load_data(&cfg.dataset)?;
    let graphs = cfg
        .graphs
        .iter()
        .enumerate()
        .map(|(m, g)| build_graph(g, &data, seed, m))
        .collect::<Result<Vec<_>>>()?;

    let out = ctx.out_dir()?.to_path_buf();
    write_json(&out.join("run_config.json"), &cfg)?;
    let (report, outcomes) = run_experiment(&data.dataset, &graphs, &cfg.experiment, &cfg.label)?;

    let mut log = String::new();
    for o in &outcomes {
        log.push_str(&log_lines(
            &o.log,
            serde_json::json!({ "repeat": o.repeat, "k_shot": o.k_shot, "seed": o.seed }),
        )?);
        let model = KgtnModel::with_params(
            graphs.clone(),
            o.configs.clone(),
            o.params.clone(),
            cfg.experiment.similarity,
            cfg.experiment.ensemble,
        )?;
        save_model(
            &out.join("checkpoints").join(format!("r{}_k{}", o.repeat, o.k_shot)),
            &model,
            Some(o.k_shot),
        )?;
    }
    fs::write(out.join("train_log.jsonl"), log)?;
    write_json(&out.join("eval_report.json"), &report)?;
    fs::write(out.join("eval_report.tsv"), report.to_tsv())?;
    print_json(&report)
}

#[derive(Serialize)]
struct GradcheckSummary {
    reports: Vec<GradCheckReport>,
    max_rel_error: f64,
    passed: bool,
    threads: usize,
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<bool> {
    let presets = if a.preset.is_empty() {
        vec![Preset::Kgtm, Preset::Stage1, Preset::Stage2]
    } else {
        a.preset.clone()
    };
    let reports = presets
        .iter()
        .map(|&p| gradcheck::run(p, ctx.seed(), a.tamper))
        .collect::<Result<Vec<_>>>()?;
    let summary = GradcheckSummary {
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        passed: reports.iter().all(|r| r.passed),
        reports,
        threads: ctx.threads,
    };
    print_json(&summary)?;
    for r in summary.reports.iter().filter(|r| !r.passed) {
        for t in r.tensors.iter().filter(|t| t.max_rel_error > r.tolerance) {
            eprintln!(
                "gradcheck {}: tensor {} index {:?}: analytic {:e}, numeric {:e}, relative error {:e}",
                format!("{:?}", r.preset).to_lowercase(),
                t.name, t.worst_index, t.analytic, t.numeric, t.max_rel_error
            );
        }
    }
    Ok(summary.passed)
}

fn dispatch(ctx: &Ctx, command: &Command) -> Result<i32> {
    match command {
        Command::BuildGraph(a) => cmd_build_graph(ctx, a)?,
        Command::Stats(a) => cmd_stats(ctx, a)?,
        Command::Mantel(a) => cmd_mantel(ctx, a)?,
        Command::Synth(a) => cmd_synth(ctx, a)?,
        Command::Train(a) => cmd_train(ctx, a)?,
        Command::Eval(a) => cmd_eval(ctx, a)?,
        Command::Run(a) => cmd_run(ctx, a)?,
        Command::Gradcheck(a) => {
            return Ok(if cmd_gradcheck(ctx, a)? { EXIT_OK } else { EXIT_GRADCHECK });
        }
    }
    Ok(EXIT_OK)
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = (|| {
        if cli.threads == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        let config = cli.config.as_deref().map(RunConfig::load).transpose()?;
        let out = cli
            .out
            .clone()
            .or_else(|| config.as_ref().and_then(|c| c.out.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        let ctx = Ctx {
            seed: cli.seed,
            threads: cli.threads,
            out,
            config,
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(&ctx, &cli.command))
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("kgtn: {e}");
            e.exit_code()
        }
    }
}
