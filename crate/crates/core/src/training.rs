//! Losses, gradients, and the SGD loop for both training stages.
//!
//! Stage 1 fits a linear head on base-class features with cross-entropy plus
//! a squared-gradient-magnitude penalty. Stage 2 trains every transfer
//! module jointly on balanced base/novel batches with cross-entropy over the
//! ensembled scores plus a prototype-norm penalty.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{score_detailed, similarity_grad_w, softmax, EnsembleKind, SimilarityKind};
use crate::data::{ClassRole, FewShotDataset};
use crate::error::{Error, Result};
use crate::graph::CorrelationGraph;
use crate::kgtm::{backward, forward, init_params, KgtmConfig, KgtmParams, PrototypeSet};
use crate::matrix::{dot, Matrix};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SgmForm {
    /// `‖x‖² Σ_k (p_k − 1[k=y])²`
    #[default]
    Squared,
    /// `‖x‖² Σ_k (p_k − 1[k=y])`, identically zero on the probability simplex.
    #[serde(rename = "paper_literal")]
    #[value(name = "paper-literal")]
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    /// Weight of the squared-gradient-magnitude term (stage 1).
    pub sgm_weight: f64,
    /// Weight of the prototype-norm term (stage 2).
    pub proto_reg: f64,
    pub sgm_form: SgmForm,
    /// Train on ensembled scores; otherwise each module gets its own loss
    /// and ensembling happens only at inference.
    pub ensemble_in_loss: bool,
    /// Defaults to `ceil(train samples / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 256,
            epochs: 90,
            lr_decay_factor: 30.0,
            lr_decay_interval: 30,
            sgm_weight: 1.0,
            proto_reg: 0.001,
            sgm_form: SgmForm::Squared,
            ensemble_in_loss: true,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("lr0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::config("balanced batches need an even batch_size >= 2"));
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_interval == 0 {
            return Err(Error::config("learning-rate schedule needs factor > 0 and interval >= 1"));
        }
        if !(self.sgm_weight >= 0.0 && self.proto_reg >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be at least 1"));
        }
        Ok(())
    }
}

/// Step schedule: `lr0 / factor^⌊epoch / interval⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 / cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_interval) as i32)
}

/// `−log p_y` with `p_y` floored at the smallest positive normal value.
pub fn cross_entropy<T: Scalar>(p: &[T], y: usize) -> Result<T> {
    let py = p
        .get(y)
        .ok_or_else(|| Error::input(format!("label {y} out of range for {} classes", p.len())))?;
    Ok(-py.max(T::min_positive_value()).ln())
}

pub fn sgm_loss<T: Scalar>(p: &[T], y: usize, x: &[T], form: SgmForm) -> T {
    let norm_sq = dot(x, x);
    let indicator = |k: usize| if k == y { T::one() } else { T::zero() };
    match form {
        SgmForm::Squared => {
            norm_sq
                * p.iter()
                    .enumerate()
                    .map(|(k, &pk)| (pk - indicator(k)) * (pk - indicator(k)))
                    .sum::<T>()
        }
        // Σ_k (p_k − 1[k=y]) = Σ_k p_k − 1, which vanishes for every probability vector.
        SgmForm::Literal => norm_sq * T::zero(),
    }
}

/// Gradient of `sgm_loss` with respect to the logits that produced `p`.
fn sgm_logit_grad<T: Scalar>(p: &[T], y: usize, norm_sq: T, form: SgmForm) -> Vec<T> {
    match form {
        SgmForm::Literal => vec![T::zero(); p.len()],
        SgmForm::Squared => {
            let two = T::of(2.0);
            let g: Vec<T> = p
                .iter()
                .enumerate()
                .map(|(k, &pk)| two * norm_sq * (pk - if k == y { T::one() } else { T::zero() }))
                .collect();
            let gp = dot(&g, p);
            p.iter().zip(&g).map(|(&pj, &gj)| pj * (gj - gp)).collect()
        }
    }
}

/// Parameter containers the optimiser can walk.
pub trait Parameters<T> {
    fn tensors(&self) -> Vec<&Matrix<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>>;
}

impl<T: Scalar> Parameters<T> for KgtmParams<T> {
    fn tensors(&self) -> Vec<&Matrix<T>> {
        KgtmParams::tensors(self).to_vec()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        KgtmParams::tensors_mut(self).into_iter().collect()
    }
}

/// Linear classifier over base classes: `s = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn init(n_classes: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed, 0);
        let scale = T::of(1.0 / (dim as f64).sqrt());
        Self {
            weight: Matrix::from_fn(n_classes, dim, |_, _| rng::gaussian(&mut r, scale)),
            bias: Matrix::zeros(1, n_classes),
        }
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        (0..self.weight.rows())
            .map(|k| dot(self.weight.row(k), x) + self.bias[(0, k)])
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for LinearHead<T> {
    fn tensors(&self) -> Vec<&Matrix<T>> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub ce: f64,
    pub sgm: f64,
    pub total: f64,
}

/// Maps global class ids to head outputs (base classes in index order).
pub fn base_class_index(roles: &[ClassRole]) -> Vec<Option<usize>> {
    let mut next = 0;
    roles
        .iter()
        .map(|r| {
            (*r == ClassRole::Base).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// `L₁ = mean CE + λ · mean SGM` over the batch, with head gradients.
pub fn loss_stage1<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    roles: &[ClassRole],
    head: &LinearHead<T>,
    sgm_weight: T,
    form: SgmForm,
) -> Result<(Stage1Loss, LinearHead<T>)> {
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::input("stage-1 batch needs one label per feature row"));
    }
    let base_index = base_class_index(roles);
    let n = T::of(labels.len() as f64);
    let mut grads = LinearHead {
        weight: Matrix::zeros(head.weight.rows(), head.weight.cols()),
        bias: Matrix::zeros(1, head.weight.rows()),
    };
    let (mut ce, mut sgm) = (T::zero(), T::zero());
    for (i, &label) in labels.iter().enumerate() {
        let y = base_index
            .get(label)
            .copied()
            .flatten()
            .ok_or_else(|| Error::protocol(format!("stage-1 batch contains non-base label {label}")))?;
        if y >= head.weight.rows() {
            return Err(Error::input("head has fewer outputs than base classes"));
        }
        let x = features.row(i);
        let p = softmax(&head.logits(x));
        ce = ce + cross_entropy(&p, y)?;
        sgm = sgm + sgm_loss(&p, y, x, form);
        let sg = sgm_logit_grad(&p, y, dot(x, x), form);
        for k in 0..p.len() {
            let ind = if k == y { T::one() } else { T::zero() };
            let ds = ((p[k] - ind) + sgm_weight * sg[k]) / n;
            grads.bias[(0, k)] = grads.bias[(0, k)] + ds;
            for (gw, &xv) in grads.weight.row_mut(k).iter_mut().zip(x) {
                *gw = *gw + ds * xv;
            }
        }
    }
    let ce = (ce / n).as_f64();
    let sgm = (sgm / n).as_f64();
    let total = ce + sgm_weight.as_f64() * sgm;
    if !total.is_finite() {
        return Err(Error::numeric("stage-1 loss", "non-finite value"));
    }
    Ok((Stage1Loss { ce, sgm, total }, grads))
}

/// Transfer modules (one per graph) plus the scoring rule.
#[derive(Debug, Clone)]
pub struct KgtnModel<T> {
    pub graphs: Vec<CorrelationGraph<T>>,
    pub configs: Vec<KgtmConfig>,
    pub params: Vec<KgtmParams<T>>,
    pub similarity: SimilarityKind,
    pub ensemble: EnsembleKind,
}

impl<T: Scalar> KgtnModel<T> {
    /// Initialises every module from its config's seed.
    pub fn new(
        graphs: Vec<CorrelationGraph<T>>,
        configs: Vec<KgtmConfig>,
        similarity: SimilarityKind,
        ensemble: EnsembleKind,
    ) -> Result<Self> {
        let params = configs.iter().map(init_params).collect::<Result<Vec<_>>>()?;
        Self::with_params(graphs, configs, params, similarity, ensemble)
    }

    pub fn with_params(
        graphs: Vec<CorrelationGraph<T>>,
        configs: Vec<KgtmConfig>,
        params: Vec<KgtmParams<T>>,
        similarity: SimilarityKind,
        ensemble: EnsembleKind,
    ) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::config("at least one graph is required"));
        }
        if graphs.len() != configs.len() || graphs.len() != params.len() {
            return Err(Error::config("graphs, configs and params differ in count"));
        }
        if ensemble == EnsembleKind::None && graphs.len() != 1 {
            return Err(Error::config("ensemble 'none' requires exactly one graph"));
        }
        let k = configs[0].n_classes;
        let f = configs[0].feature_dim;
        for (g, (c, p)) in graphs.iter().zip(configs.iter().zip(&params)) {
            c.validate()?;
            if c.n_classes != k || c.feature_dim != f {
                return Err(Error::config("all modules must share class count and feature size"));
            }
            if g.n() != k {
                return Err(Error::input(format!("graph has {} classes, expected {k}", g.n())));
            }
            p.check_shapes(c)?;
        }
        Ok(Self {
            graphs,
            configs,
            params,
            similarity,
            ensemble,
        })
    }

    pub fn n_graphs(&self) -> usize {
        self.graphs.len()
    }

    pub fn n_classes(&self) -> usize {
        self.configs[0].n_classes
    }

    pub fn prototypes(&self) -> Result<Vec<PrototypeSet<T>>> {
        self.graphs
            .iter()
            .zip(self.configs.iter().zip(&self.params))
            .map(|(g, (c, p))| forward(c, p, g).map(|(w, _)| w))
            .collect()
    }

    /// `N × K` ensembled scores.
    pub fn score_batch(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        let protos = self.prototypes()?;
        let refs: Vec<&PrototypeSet<T>> = protos.iter().collect();
        Ok(crate::classifier::score_batch(features, &refs, self.similarity, self.ensemble)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
}

/// Cross-entropy over ensembled scores plus `η · mean_m Σ_k ‖w*_{k,m}‖²`,
/// with gradients for every module's parameters.
pub fn loss_stage2<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    model: &KgtnModel<T>,
    proto_reg: T,
    ensemble_in_loss: bool,
) -> Result<(Stage2Loss, Vec<KgtmParams<T>>)> {
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::input("stage-2 batch needs one label per feature row"));
    }
    let m = model.n_graphs();
    let k = model.n_classes();
    let mut protos = Vec::with_capacity(m);
    let mut trajs = Vec::with_capacity(m);
    for (g, (c, p)) in model.graphs.iter().zip(model.configs.iter().zip(&model.params)) {
        let (w, t) = forward(c, p, g)?;
        protos.push(w);
        trajs.push(t);
    }
    let refs: Vec<&PrototypeSet<T>> = protos.iter().collect();
    let mut d_proto: Vec<Matrix<T>> = (0..m).map(|_| Matrix::zeros(k, features.cols())).collect();
    let n = T::of(labels.len() as f64);
    let m_t = T::of(m as f64);
    let mut ce = T::zero();

    let mut accumulate = |graph: usize, class: usize, coeff: T, x: &[T]| {
        if coeff == T::zero() {
            return;
        }
        let g = similarity_grad_w(x, refs[graph].prototype(class), model.similarity);
        for (d, gv) in d_proto[graph].row_mut(class).iter_mut().zip(g) {
            *d = *d + coeff * gv;
        }
    };

    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::input(format!("label {y} out of range for {k} classes")));
        }
        let x = features.row(i);
        if ensemble_in_loss || m == 1 {
            let s = score_detailed(x, &refs, model.similarity, model.ensemble)?;
            let p = softmax(&s.scores);
            ce = ce + cross_entropy(&p, y)?;
            for c in 0..k {
                let ds = (p[c] - if c == y { T::one() } else { T::zero() }) / n;
                match model.ensemble {
                    EnsembleKind::None => accumulate(0, c, ds, x),
                    EnsembleKind::Mean => (0..m).for_each(|g| accumulate(g, c, ds / m_t, x)),
                    EnsembleKind::Max => accumulate(s.winners[c], c, ds, x),
                }
            }
        } else {
            for (g, proto) in refs.iter().enumerate() {
                let s = crate::classifier::score(x, &[*proto], model.similarity, EnsembleKind::None)?;
                let p = softmax(&s);
                ce = ce + cross_entropy(&p, y)? / m_t;
                for c in 0..k {
                    let ds = (p[c] - if c == y { T::one() } else { T::zero() }) / (n * m_t);
                    accumulate(g, c, ds, x);
                }
            }
        }
    }
    let ce = ce / n;

    let mut reg = T::zero();
    for (g, w) in protos.iter().enumerate() {
        reg = reg + w.matrix().frobenius_sq();
        let scale = T::of(2.0) * proto_reg / m_t;
        d_proto[g].add_assign(&w.matrix().scale(scale));
    }
    let reg = proto_reg * reg / m_t;
    let total = ce + reg;
    if !total.is_finite() {
        return Err(Error::numeric("stage-2 loss", "non-finite value"));
    }

    let grads = (0..m)
        .map(|g| {
            backward(
                &model.configs[g],
                &model.params[g],
                &model.graphs[g],
                &trajs[g],
                &d_proto[g],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Stage2Loss {
            ce: ce.as_f64(),
            reg: reg.as_f64(),
            total: total.as_f64(),
        },
        grads,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

/// `g' = g + wd·θ; v ← μv + g'; θ ← θ − lr·v` on every tensor.
pub fn sgd_step<T: Scalar, P: Parameters<T>>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    hyper: SgdHyper<T>,
) {
    for ((theta, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        assert_eq!(theta.shape(), g.shape(), "gradient shape mismatch");
        for ((t, &gv), vv) in theta
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            let g_eff = gv + hyper.weight_decay * *t;
            *vv = hyper.momentum * *vv + g_eff;
            *t = *t - hyper.lr * *vv;
        }
    }
}

/// Per-group momentum buffers plus progress counters.
#[derive(Debug, Clone)]
pub struct OptimizerState<P> {
    pub velocity: Vec<P>,
    pub step: usize,
    pub epoch: usize,
}

impl<T: Scalar> OptimizerState<KgtmParams<T>> {
    pub fn for_params(params: &[KgtmParams<T>]) -> Self {
        Self {
            velocity: params.iter().map(KgtmParams::zeros_like).collect(),
            step: 0,
            epoch: 0,
        }
    }
}

/// `batch_size/2` base-class train indices followed by `batch_size/2`
/// novel-class train indices. A pool smaller than its half is sampled with
/// replacement, otherwise without. Depends only on `(seed, counter)`.
pub fn balanced_batch<T: Scalar>(
    ds: &FewShotDataset<T>,
    batch_size: usize,
    seed: u64,
    counter: u64,
) -> Result<Vec<usize>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::config("balanced batches need an even batch_size >= 2"));
    }
    let half = batch_size / 2;
    let mut r = rng::seeded(seed, counter);
    let mut out = Vec::with_capacity(batch_size);
    for (name, pool) in [("base", ds.base_train_indices()), ("novel", ds.novel_train_indices())] {
        if pool.is_empty() {
            return Err(Error::protocol(format!("{name} train pool is empty")));
        }
        if pool.len() >= half {
            out.extend(sample(&mut r, pool.len(), half).into_iter().map(|j| pool[j]));
        } else {
            out.extend((0..half).map(|_| pool[r.random_range(0..pool.len())]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss_ce: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

const BATCH_STREAM_SALT: u64 = 0xBA7C;

/// Owns the optimiser state for one stage-2 run; `step` advances one batch.
pub struct Stage2Trainer<'a, T: Scalar> {
    pub model: &'a mut KgtnModel<T>,
    dataset: &'a FewShotDataset<T>,
    cfg: TrainConfig,
    state: OptimizerState<KgtmParams<T>>,
    batch_seed: u64,
}

impl<'a, T: Scalar> Stage2Trainer<'a, T> {
    pub fn new(model: &'a mut KgtnModel<T>, dataset: &'a FewShotDataset<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.n_classes() != model.n_classes() || dataset.dim() != model.configs[0].feature_dim {
            return Err(Error::input(format!(
                "dataset is {} classes x {} features, model expects {} x {}",
                dataset.n_classes(),
                dataset.dim(),
                model.n_classes(),
                model.configs[0].feature_dim
            )));
        }
        Ok(Self {
            state: OptimizerState::for_params(&model.params),
            model,
            dataset,
            batch_seed: rng::derive_seed(cfg.seed, BATCH_STREAM_SALT),
            cfg: cfg.clone(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.dataset.train_indices().len().div_ceil(self.cfg.batch_size))
            .max(1)
    }

    pub fn state(&self) -> &OptimizerState<KgtmParams<T>> {
        &self.state
    }

    /// One balanced batch, loss, and SGD update at the learning rate of `epoch`.
    pub fn step(&mut self, epoch: usize) -> Result<Stage2Loss> {
        let idx = balanced_batch(self.dataset, self.cfg.batch_size, self.batch_seed, self.state.step as u64)?;
        let x = self.dataset.features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        let (loss, grads) = loss_stage2(&x, &y, self.model, T::of(self.cfg.proto_reg), self.cfg.ensemble_in_loss)
            .map_err(|e| match e {
                Error::Numeric { .. } => Error::Divergence {
                    epoch,
                    step: self.state.step,
                    loss: f64::NAN,
                },
                other => other,
            })?;
        let hyper = SgdHyper {
            lr: T::of(lr_at(epoch, &self.cfg)),
            momentum: T::of(self.cfg.momentum),
            weight_decay: T::of(self.cfg.weight_decay),
        };
        for ((p, g), v) in self
            .model
            .params
            .iter_mut()
            .zip(&grads)
            .zip(self.state.velocity.iter_mut())
        {
            let frozen = self.model.configs[0].freeze_init.then(|| p.hinit.clone());
            sgd_step(p, g, v, hyper);
            if let Some(h) = frozen {
                p.hinit = h;
            }
        }
        self.state.step += 1;
        self.state.epoch = epoch;
        Ok(loss)
    }

    pub fn run(mut self) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let steps = self.steps_per_epoch();
        for epoch in 0..self.cfg.epochs {
            let start = Instant::now();
            let (mut ce, mut reg, mut total) = (0.0, 0.0, 0.0);
            for _ in 0..steps {
                let l = self.step(epoch)?;
                ce += l.ce;
                reg += l.reg;
                total += l.total;
            }
            let s = steps as f64;
            log.epochs.push(EpochRecord {
                epoch,
                steps,
                loss_ce: ce / s,
                loss_reg: reg / s,
                loss_total: total / s,
                lr: lr_at(epoch, &self.cfg),
                wall_time_s: start.elapsed().as_secs_f64(),
            });
        }
        Ok(log)
    }
}

/// Runs `cfg.epochs` of balanced-batch SGD over all modules jointly.
pub fn train_stage2<T: Scalar>(
    dataset: &FewShotDataset<T>,
    model: &mut KgtnModel<T>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if model.configs.iter().any(|c| c.freeze_init != model.configs[0].freeze_init) {
        return Err(Error::config("freeze_init must agree across modules"));
    }
    Stage2Trainer::new(model, dataset, cfg)?.run()
}

/// Minibatch SGD of a linear head on base-class train samples.
pub fn train_stage1<T: Scalar>(
    dataset: &FewShotDataset<T>,
    cfg: &TrainConfig,
) -> Result<(LinearHead<T>, TrainLog)> {
    cfg.validate()?;
    let pool = dataset.base_train_indices();
    if pool.is_empty() {
        return Err(Error::protocol("base train pool is empty"));
    }
    let n_base = dataset.class_role.iter().filter(|&&r| r == ClassRole::Base).count();
    let mut head = LinearHead::init(n_base, dataset.dim(), rng::derive_seed(cfg.seed, 1));
    let mut velocity = LinearHead {
        weight: Matrix::zeros(n_base, dataset.dim()),
        bias: Matrix::zeros(1, n_base),
    };
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| pool.len().div_ceil(cfg.batch_size))
        .max(1);
    let batch = cfg.batch_size.min(pool.len());
    let batch_seed = rng::derive_seed(cfg.seed, BATCH_STREAM_SALT);
    let mut log = TrainLog::default();
    let mut counter = 0u64;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut ce, mut sg, mut total) = (0.0, 0.0, 0.0);
        let hyper = SgdHyper {
            lr: T::of(lr_at(epoch, cfg)),
            momentum: T::of(cfg.momentum),
            weight_decay: T::of(cfg.weight_decay),
        };
        for _ in 0..steps {
            let mut r = rng::seeded(batch_seed, counter);
            counter += 1;
            let idx: Vec<usize> = sample(&mut r, pool.len(), batch).into_iter().map(|j| pool[j]).collect();
            let x = dataset.features.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
            let (loss, grads) = loss_stage1(&x, &y, &dataset.class_role, &head, T::of(cfg.sgm_weight), cfg.sgm_form)
                .map_err(|_| Error::Divergence {
                    epoch,
                    step: counter as usize - 1,
                    loss: f64::NAN,
                })?;
            sgd_step(&mut head, &grads, &mut velocity, hyper);
            ce += loss.ce;
            sg += loss.sgm;
            total += loss.total;
        }
        let s = steps as f64;
        log.epochs.push(EpochRecord {
            epoch,
            steps,
            loss_ce: ce / s,
            loss_reg: sg / s,
            loss_total: total / s,
            lr: lr_at(epoch, cfg),
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok((head, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticSpec};
    use crate::graph::{baseline_graph, BaselineKind};
    use proptest::prelude::*;

    #[test]
    fn cross_entropy_cases() {
        let k = 6;
        let uniform = vec![1.0 / k as f64; k];
        assert!((cross_entropy(&uniform, 2).unwrap() - (k as f64).ln()).abs() < 1e-12);
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        let p = [0.1, 0.2, 0.05, 0.3, 0.25, 0.1];
        assert!((cross_entropy(&p, 3).unwrap() + 0.3f64.ln()).abs() < 1e-15);
        // floor keeps log finite
        assert!(cross_entropy(&[1.0f64, 0.0], 1).unwrap().is_finite());
    }

    #[test]
    fn sgm_cases() {
        let x = [2.0, 0.0];
        assert_eq!(sgm_loss(&[0.5, 0.5], 0, &x, SgmForm::Squared), 2.0);
        assert_eq!(sgm_loss(&[1.0, 0.0], 0, &x, SgmForm::Squared), 0.0);
        assert_eq!(sgm_loss(&[1.0, 0.0], 0, &x, SgmForm::Literal), 0.0);
        assert_eq!(sgm_loss(&[0.3, 0.7], 0, &x, SgmForm::Literal), 0.0);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.1);
        assert_eq!(lr_at(29, &cfg), 0.1);
        assert!((lr_at(30, &cfg) - 0.1 / 30.0).abs() < 1e-15);
        assert!((lr_at(60, &cfg) - 0.1 / 900.0).abs() < 1e-15);
    }

    fn scalar_head(v: f64) -> LinearHead<f64> {
        LinearHead {
            weight: Matrix::filled(1, 1, v),
            bias: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn sgd_plain_and_fixed_point() {
        let hyper = SgdHyper {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = scalar_head(1.0);
        let mut v = scalar_head(0.0);
        sgd_step(&mut p, &scalar_head(0.2), &mut v, hyper);
        assert_eq!(p.weight[(0, 0)], 0.9);
        let mut q = scalar_head(1.0);
        sgd_step(&mut q, &scalar_head(0.0), &mut scalar_head(0.0), hyper);
        assert_eq!(q.weight[(0, 0)], 1.0);
    }

    #[test]
    fn sgd_lr_zero_is_identity() {
        let mut p = scalar_head(3.0);
        let mut v = scalar_head(0.7);
        let hyper = SgdHyper {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 0.1,
        };
        sgd_step(&mut p, &scalar_head(5.0), &mut v, hyper);
        assert_eq!(p.weight[(0, 0)], 3.0);
    }

    fn tiny_dataset() -> FewShotDataset<f64> {
        let spec = SyntheticSpec {
            k_base: 3,
            k_novel: 3,
            dim: 4,
            train_per_base: 8,
            train_per_novel: 4,
            test_per_class: 2,
            cluster_std: 0.3,
            mean_scale: 1.0,
            seed: 1,
        };
        synth_generate(&spec).unwrap().dataset
    }

    #[test]
    fn balanced_batch_halves() {
        let ds = tiny_dataset();
        let b = balanced_batch(&ds, 256, 3, 0).unwrap();
        assert_eq!(b.len(), 256);
        assert!(b[..128].iter().all(|&i| ds.role_of_sample(i) == ClassRole::Base));
        assert!(b[128..].iter().all(|&i| ds.role_of_sample(i) == ClassRole::Novel));
        assert_eq!(b, balanced_batch(&ds, 256, 3, 0).unwrap());
        assert_ne!(b, balanced_batch(&ds, 256, 3, 1).unwrap());
        assert!(matches!(balanced_batch(&ds, 5, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn balanced_batch_repeats_single_novel_sample() {
        let ds = crate::data::ksample(&tiny_dataset(), 1, 0).unwrap();
        let mut one_class = ds.clone();
        // leave exactly one novel train sample
        let novel = ds.novel_train_indices();
        let keep: Vec<usize> = (0..ds.n_samples()).filter(|i| !novel[1..].contains(i)).collect();
        one_class.features = ds.features.select_rows(&keep);
        one_class.labels = keep.iter().map(|&i| ds.labels[i]).collect();
        one_class.sample_split = keep.iter().map(|&i| ds.sample_split[i]).collect();
        let b = balanced_batch(&one_class, 4, 0, 0).unwrap();
        assert_eq!(b[2], b[3]);
        assert_eq!(one_class.role_of_sample(b[2]), ClassRole::Novel);
    }

    #[test]
    fn balanced_batch_empty_pool() {
        let mut ds = tiny_dataset();
        ds.class_role = vec![ClassRole::Base; 6];
        assert!(matches!(balanced_batch(&ds, 4, 0, 0), Err(Error::Protocol(_))));
    }

    #[test]
    fn stage1_rejects_novel_labels_and_ablates() {
        let ds = tiny_dataset();
        let head = LinearHead::<f64>::init(3, 4, 0);
        let base = ds.base_train_indices();
        let x = ds.features.select_rows(&base[..6]);
        let y: Vec<usize> = base[..6].iter().map(|&i| ds.labels[i]).collect();
        let (l0, _) = loss_stage1(&x, &y, &ds.class_role, &head, 0.0, SgmForm::Squared).unwrap();
        assert_eq!(l0.total, l0.ce);
        let (l1, _) = loss_stage1(&x, &y, &ds.class_role, &head, 1.5, SgmForm::Squared).unwrap();
        let (l2, _) = loss_stage1(&x, &y, &ds.class_role, &head, 3.0, SgmForm::Squared).unwrap();
        assert!(((l2.total - l2.ce) - 2.0 * (l1.total - l1.ce)).abs() < 1e-12);
        let novel = ds.novel_train_indices()[0];
        let err = loss_stage1(
            &ds.features.select_rows(&[novel]),
            &[ds.labels[novel]],
            &ds.class_role,
            &head,
            1.0,
            SgmForm::Squared,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    fn tiny_model(ens: EnsembleKind, m: usize) -> KgtnModel<f64> {
        let graphs = (0..m)
            .map(|g| baseline_graph(6, BaselineKind::Random, g as u64).unwrap())
            .collect();
        let configs = (0..m).map(|g| KgtmConfig::new(6, 4, 10 + g as u64)).collect();
        KgtnModel::new(graphs, configs, SimilarityKind::InnerProduct, ens).unwrap()
    }

    #[test]
    fn stage2_eta_zero_is_cross_entropy() {
        let ds = tiny_dataset();
        let model = tiny_model(EnsembleKind::Max, 2);
        let idx = ds.train_indices();
        let x = ds.features.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let (loss, _) = loss_stage2(&x, &y, &model, 0.0, true).unwrap();
        let scores = model.score_batch(&x).unwrap();
        let ce: f64 = (0..x.rows())
            .map(|i| cross_entropy(&softmax(scores.row(i)), y[i]).unwrap())
            .sum::<f64>()
            / x.rows() as f64;
        assert!((loss.total - ce).abs() < 1e-12);
        assert_eq!(loss.reg, 0.0);
    }

    #[test]
    fn zero_epochs_leave_params() {
        let ds = tiny_dataset();
        let mut model = tiny_model(EnsembleKind::None, 1);
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let log = train_stage2(&ds, &mut model, &cfg).unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn single_graph_none_scores_are_inner_products() {
        let model = tiny_model(EnsembleKind::None, 1);
        let ds = tiny_dataset();
        let scores = model.score_batch(&ds.features).unwrap();
        let w = model.prototypes().unwrap().pop().unwrap();
        let expect = ds.features.matmul_t(w.matrix());
        assert!(scores.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr0: 0.05,
            ..TrainConfig::default()
        };
        let mut a = tiny_model(EnsembleKind::Mean, 2);
        let mut b = tiny_model(EnsembleKind::Mean, 2);
        let la = train_stage2(&ds, &mut a, &cfg).unwrap();
        let lb = train_stage2(&ds, &mut b, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let strip = |l: &TrainLog| l.epochs.iter().map(|r| r.loss_total).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = tiny_dataset();
        let mut model = tiny_model(EnsembleKind::None, 1);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr0: 1e6,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        match train_stage2(&ds, &mut model, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn frozen_init_stays_put() {
        let ds = tiny_dataset();
        let graphs = vec![baseline_graph(6, BaselineKind::Uniform, 0).unwrap()];
        let configs = vec![KgtmConfig {
            freeze_init: true,
            ..KgtmConfig::new(6, 4, 1)
        }];
        let mut model = KgtnModel::new(graphs, configs, SimilarityKind::InnerProduct, EnsembleKind::None).unwrap();
        let h0 = model.params[0].hinit.clone();
        let w0 = model.params[0].wz.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        train_stage2(&ds, &mut model, &cfg).unwrap();
        assert_eq!(model.params[0].hinit, h0);
        assert_ne!(model.params[0].wz, w0);
    }

    #[test]
    fn stage1_training_reduces_loss() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr0: 0.05,
            sgm_weight: 0.1,
            ..TrainConfig::default()
        };
        let (_, log) = train_stage1(&ds, &cfg).unwrap();
        assert!(log.epochs.last().unwrap().loss_total < log.epochs[0].loss_total);
    }

    proptest! {
        #[test]
        fn literal_sgm_is_identically_zero(raw in proptest::collection::vec(0.001f64..1.0, 2..10), y in 0usize..10) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let y = y % p.len();
            prop_assert_eq!(sgm_loss(&p, y, &[1.5, -2.0], SgmForm::Literal), 0.0);
            prop_assert!(sgm_loss(&p, y, &[1.5, -2.0], SgmForm::Squared) > 0.0);
        }

        #[test]
        fn losses_are_non_negative(seed in 0u64..50, eta in 0.0f64..0.5) {
            let ds = tiny_dataset();
            let mut model = tiny_model(EnsembleKind::Mean, 2);
            for (i, c) in model.configs.iter_mut().enumerate() {
                c.init_seed = seed * 7 + i as u64;
            }
            let params = model.configs.iter().map(|c| init_params(c).unwrap()).collect();
            model.params = params;
            let idx = ds.train_indices();
            let x = ds.features.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            let (l2, _) = loss_stage2(&x, &y, &model, eta, true).unwrap();
            prop_assert!(l2.total >= 0.0);
            let base = ds.base_train_indices();
            let xb = ds.features.select_rows(&base);
            let yb: Vec<usize> = base.iter().map(|&i| ds.labels[i]).collect();
            let head = LinearHead::init(3, 4, seed);
            let (l1, _) = loss_stage1(&xb, &yb, &ds.class_role, &head, 1.0 + eta, SgmForm::Squared).unwrap();
            prop_assert!(l1.total >= 0.0);
        }
    }
}
