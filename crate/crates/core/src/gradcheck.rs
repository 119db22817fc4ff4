//! Central finite-difference checks of every analytic gradient in the crate.

use serde::{Deserialize, Serialize};

use crate::classifier::{EnsembleKind, SimilarityKind};
use crate::data::ClassRole;
use crate::error::Result;
use crate::graph::{baseline_graph, BaselineKind, CorrelationGraph};
use crate::kgtm::{backward, forward, init_params, KgtmConfig, KgtmParams, TENSOR_NAMES};
use crate::matrix::Matrix;
use crate::rng;
use crate::training::{loss_stage1, loss_stage2, KgtnModel, LinearHead, SgmForm};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Kgtm,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub preset: Preset,
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn check_tensor<P: Clone>(
    name: String,
    base: &P,
    analytic: &Matrix<f64>,
    slot: impl Fn(&mut P) -> &mut Matrix<f64>,
    f: impl Fn(&P) -> Result<f64>,
) -> Result<TensorCheck> {
    let mut worst = TensorCheck {
        name,
        entries: analytic.rows() * analytic.cols(),
        max_rel_error: 0.0,
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = base.clone();
    for i in 0..analytic.rows() {
        for j in 0..analytic.cols() {
            let orig = slot(&mut probe)[(i, j)];
            slot(&mut probe)[(i, j)] = orig + FD_STEP;
            let up = f(&probe)?;
            slot(&mut probe)[(i, j)] = orig - FD_STEP;
            let down = f(&probe)?;
            slot(&mut probe)[(i, j)] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[(i, j)];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || (i, j) == (0, 0) {
                worst.max_rel_error = err;
                worst.worst_index = (i, j);
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
    }
    Ok(worst)
}

fn tamper_first(grads: &mut [(String, Matrix<f64>)]) {
    if let Some((_, g)) = grads.first_mut() {
        g[(0, 0)] += 1e-2;
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64, std: f64) -> Matrix<f64> {
    let mut r = rng::seeded(seed, 0);
    Matrix::from_fn(rows, cols, |_, _| rng::gaussian(&mut r, std))
}

fn finish(preset: Preset, tensors: Vec<TensorCheck>) -> GradCheckReport {
    let max = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        preset,
        step: FD_STEP,
        tolerance: TOLERANCE,
        tensors,
        max_rel_error: max,
        passed: max <= TOLERANCE,
    }
}

/// Transfer module alone: `L = Σ G ⊙ w*` for a fixed random `G`.
/// K=5, d=3, T=2.
fn check_kgtm(seed: u64, tamper: bool) -> Result<GradCheckReport> {
    let cfg = KgtmConfig {
        init_scale: Some(0.7),
        ..KgtmConfig::new(5, 3, seed)
    };
    let params = init_params::<f64>(&cfg)?;
    let graph = baseline_graph::<f64>(5, BaselineKind::Random, seed + 1)?;
    let upstream = random_matrix(5, 3, seed + 2, 1.0);
    let loss = |p: &KgtmParams<f64>| -> Result<f64> {
        let (w, _) = forward(&cfg, p, &graph)?;
        Ok(crate::matrix::dot(w.matrix().as_slice(), upstream.as_slice()))
    };
    let (_, traj) = forward(&cfg, &params, &graph)?;
    let g = backward(&cfg, &params, &graph, &traj, &upstream)?;
    let mut grads: Vec<(String, Matrix<f64>)> = TENSOR_NAMES
        .iter()
        .zip(g.tensors())
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    if tamper {
        tamper_first(&mut grads);
    }
    let tensors = grads
        .into_iter()
        .enumerate()
        .map(|(t, (name, analytic))| {
            check_tensor(name, &params, &analytic, |p| p.tensors_mut()[t], &loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(Preset::Kgtm, tensors))
}

/// Linear head with cross-entropy plus squared SGM. 8 samples, K=5, D=4.
fn check_stage1(seed: u64, tamper: bool) -> Result<GradCheckReport> {
    let roles = vec![ClassRole::Base; 5];
    let x = random_matrix(8, 4, seed, 1.0);
    let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
    let head = LinearHead::<f64>::init(5, 4, seed + 1);
    let loss = |h: &LinearHead<f64>| -> Result<f64> {
        Ok(loss_stage1(&x, &labels, &roles, h, 0.7, SgmForm::Squared)?.0.total)
    };
    let (_, g) = loss_stage1(&x, &labels, &roles, &head, 0.7, SgmForm::Squared)?;
    let mut grads = vec![("weight".to_string(), g.weight), ("bias".to_string(), g.bias)];
    if tamper {
        tamper_first(&mut grads);
    }
    let tensors = grads
        .into_iter()
        .enumerate()
        .map(|(t, (name, analytic))| {
            check_tensor(
                name,
                &head,
                &analytic,
                |h: &mut LinearHead<f64>| if t == 0 { &mut h.weight } else { &mut h.bias },
                &loss,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(Preset::Stage1, tensors))
}

/// Full stage-2 path for two graphs, K=6, d=3, T=2, 4 samples, under several
/// similarity/ensemble combinations.
fn check_stage2(seed: u64, tamper: bool) -> Result<GradCheckReport> {
    let k = 6;
    let d = 3;
    let x = random_matrix(4, d, seed, 1.0);
    let labels = vec![0, 2, 3, 5];
    let combos = [
        (SimilarityKind::InnerProduct, EnsembleKind::Mean, true),
        (SimilarityKind::InnerProduct, EnsembleKind::Max, true),
        (SimilarityKind::Cosine, EnsembleKind::Max, true),
        (SimilarityKind::Pearson, EnsembleKind::Mean, true),
        (SimilarityKind::InnerProduct, EnsembleKind::Max, false),
    ];
    let mut tensors = Vec::new();
    for (ci, (sim, ens, joint)) in combos.into_iter().enumerate() {
        let graphs: Vec<CorrelationGraph<f64>> = (0..2)
            .map(|g| baseline_graph(k, BaselineKind::Random, seed + 10 + g))
            .collect::<Result<_>>()?;
        let configs: Vec<KgtmConfig> = (0..2)
            .map(|g| KgtmConfig {
                init_scale: Some(0.7),
                ..KgtmConfig::new(k, d, seed + 20 + g)
            })
            .collect();
        let model = KgtnModel::new(graphs, configs, sim, ens)?;
        let loss = |m: &KgtnModel<f64>| -> Result<f64> {
            Ok(loss_stage2(&x, &labels, m, 0.05, joint)?.0.total)
        };
        let (_, g) = loss_stage2(&x, &labels, &model, 0.05, joint)?;
        let tag = format!(
            "{}-{}{}",
            serde_json::to_value(sim)?.as_str().unwrap_or("?"),
            serde_json::to_value(ens)?.as_str().unwrap_or("?"),
            if joint { "" } else { "-independent" }
        );
        let mut grads: Vec<(usize, usize, String, Matrix<f64>)> = Vec::new();
        for (gi, gp) in g.iter().enumerate() {
            for (ti, (name, t)) in gp.named().enumerate() {
                grads.push((gi, ti, format!("{tag}/graph{gi}.{name}"), t.clone()));
            }
        }
        if tamper && ci == 0 {
            grads[0].3[(0, 0)] += 1e-2;
        }
        for (gi, ti, name, analytic) in grads {
            tensors.push(check_tensor(
                name,
                &model,
                &analytic,
                |m: &mut KgtnModel<f64>| m.params[gi].tensors_mut()[ti],
                &loss,
            )?);
        }
    }
    Ok(finish(Preset::Stage2, tensors))
}

/// Runs one preset. `tamper` corrupts one analytic entry to exercise the
/// failure path.
pub fn run(preset: Preset, seed: u64, tamper: bool) -> Result<GradCheckReport> {
    match preset {
        Preset::Kgtm => check_kgtm(seed, tamper),
        Preset::Stage1 => check_stage1(seed, tamper),
        Preset::Stage2 => check_stage2(seed, tamper),
    }
}
