//! Knowledge graph transfer module: gated-graph propagation of per-class
//! hidden states over one correlation graph, followed by an affine output
//! layer producing one prototype per class.
//!
//! For `t = 1..=T`:
//!
//! ```text
//! a_k   = [ Σ_k' A[k][k'] h_k' , Σ_k' A[k'][k] h_k' ]
//! z     = σ(Wz a + Uz h)
//! r     = σ(Wr a + Ur h)
//! h̃     = tanh(W a + U (r ⊙ h))
//! h'    = (1 - z) ⊙ h + z ⊙ h̃
//! ```
//!
//! and finally `w*_k = O [h_k^T, h_k^0] + b`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CorrelationGraph;
use crate::kgem;
use crate::matrix::Matrix;
use crate::rng;
use crate::scalar::{sigmoid, Scalar};

pub const DEFAULT_STEPS: usize = 2;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgtmConfig {
    pub n_classes: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub init_seed: u64,
    /// Standard deviation of the initial weights; `None` means `1/√hidden_dim`.
    #[serde(default)]
    pub init_scale: Option<f64>,
    /// Keep `hinit` at its random initial value during training.
    #[serde(default)]
    pub freeze_init: bool,
}

impl KgtmConfig {
    /// Defaults: hidden size equal to the feature size, two propagation steps.
    pub fn new(n_classes: usize, feature_dim: usize, init_seed: u64) -> Self {
        Self {
            n_classes,
            hidden_dim: feature_dim,
            feature_dim,
            steps: DEFAULT_STEPS,
            init_seed,
            init_scale: None,
            freeze_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("KGTM needs at least 2 classes"));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(Error::config("KGTM dimensions must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("KGTM needs at least one propagation step"));
        }
        if let Some(s) = self.init_scale {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::config("init_scale must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn effective_init_scale(&self) -> f64 {
        self.init_scale
            .unwrap_or(1.0 / (self.hidden_dim as f64).sqrt())
    }
}

pub const TENSOR_NAMES: [&str; 9] = ["wz", "uz", "wr", "ur", "w", "u", "o", "bias", "hinit"];

/// Trainable tensors of one module. `bias` is stored as a `1 × feature_dim` row.
#[derive(Debug, Clone, PartialEq)]
pub struct KgtmParams<T> {
    pub wz: Matrix<T>,
    pub uz: Matrix<T>,
    pub wr: Matrix<T>,
    pub ur: Matrix<T>,
    pub w: Matrix<T>,
    pub u: Matrix<T>,
    pub o: Matrix<T>,
    pub bias: Matrix<T>,
    pub hinit: Matrix<T>,
}

impl<T: Scalar> KgtmParams<T> {
    pub fn zeros(cfg: &KgtmConfig) -> Self {
        let (k, d, f) = (cfg.n_classes, cfg.hidden_dim, cfg.feature_dim);
        Self {
            wz: Matrix::zeros(d, 2 * d),
            uz: Matrix::zeros(d, d),
            wr: Matrix::zeros(d, 2 * d),
            ur: Matrix::zeros(d, d),
            w: Matrix::zeros(d, 2 * d),
            u: Matrix::zeros(d, d),
            o: Matrix::zeros(f, 2 * d),
            bias: Matrix::zeros(1, f),
            hinit: Matrix::zeros(k, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    /// Tensors in `TENSOR_NAMES` order.
    pub fn tensors(&self) -> [&Matrix<T>; 9] {
        [
            &self.wz, &self.uz, &self.wr, &self.ur, &self.w, &self.u, &self.o, &self.bias,
            &self.hinit,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix<T>; 9] {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.wr,
            &mut self.ur,
            &mut self.w,
            &mut self.u,
            &mut self.o,
            &mut self.bias,
            &mut self.hinit,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Matrix<T>)> {
        TENSOR_NAMES.into_iter().zip(self.tensors())
    }

    pub fn check_shapes(&self, cfg: &KgtmConfig) -> Result<()> {
        let want = KgtmParams::<T>::zeros(cfg);
        for ((name, have), want) in self.named().zip(want.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::input(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
            if !have.all_finite() {
                return Err(Error::input(format!("tensor {name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Class permutation of `hinit` (new row i ← old row perm[i]).
    pub fn permuted_classes(&self, perm: &[usize]) -> Self {
        let mut p = self.clone();
        p.hinit = self.hinit.select_rows(perm);
        p
    }
}

/// Gaussian(0, scale²) draws for every gate, output, and initial-state
/// tensor; output bias starts at zero.
pub fn init_params<T: Scalar>(cfg: &KgtmConfig) -> Result<KgtmParams<T>> {
    cfg.validate()?;
    let scale = T::of(cfg.effective_init_scale());
    let mut params = KgtmParams::zeros(cfg);
    let mut r = rng::seeded(cfg.init_seed, 0);
    for (name, t) in TENSOR_NAMES.into_iter().zip(params.tensors_mut()) {
        if name == "bias" {
            continue;
        }
        for v in t.as_mut_slice() {
            *v = rng::gaussian(&mut r, scale);
        }
    }
    Ok(params)
}

/// Learned class prototypes, `K × feature_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    w: Matrix<T>,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn new(w: Matrix<T>) -> Self {
        Self { w }
    }

    pub fn n_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn prototype(&self, k: usize) -> &[T] {
        self.w.row(k)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.w
    }
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    h_prev: Matrix<T>,
    agg: Matrix<T>,
    z: Matrix<T>,
    r: Matrix<T>,
    h_tilde: Matrix<T>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    steps: Vec<StepCache<T>>,
    h_final: Matrix<T>,
    fingerprint: u64,
}

impl<T: Scalar> Trajectory<T> {
    /// Hidden states `h^0 ..= h^T`.
    pub fn hidden_states(&self) -> Vec<&Matrix<T>> {
        let mut out: Vec<&Matrix<T>> = self.steps.iter().map(|s| &s.h_prev).collect();
        out.push(&self.h_final);
        out
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }
}

fn fingerprint<T: Scalar>(p: &KgtmParams<T>, a: &Matrix<T>) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in p.tensors().into_iter().chain(std::iter::once(a)) {
        for v in t.as_slice() {
            h = (h ^ v.as_f64().to_bits()).wrapping_mul(PRIME);
        }
        h = (h ^ t.rows() as u64).wrapping_mul(PRIME);
    }
    h
}

/// Row k of the result is `[Σ_k' A[k][k'] h_k', Σ_k' A[k'][k] h_k']`.
pub fn aggregate<T: Scalar>(a: &Matrix<T>, h: &Matrix<T>) -> Result<Matrix<T>> {
    if !a.is_square() || a.rows() != h.rows() {
        return Err(Error::input(format!(
            "adjacency {:?} does not match {} hidden states",
            a.shape(),
            h.rows()
        )));
    }
    let outgoing = a.matmul(h);
    let incoming = a.t_matmul(h);
    Ok(outgoing.hcat(&incoming))
}

struct GateOutputs<T> {
    z: Matrix<T>,
    r: Matrix<T>,
    h_tilde: Matrix<T>,
    h: Matrix<T>,
}

fn gru_parts<T: Scalar>(p: &KgtmParams<T>, agg: &Matrix<T>, h_prev: &Matrix<T>) -> GateOutputs<T> {
    let z_pre = {
        let mut m = agg.matmul_t(&p.wz);
        m.add_assign(&h_prev.matmul_t(&p.uz));
        m
    };
    let r_pre = {
        let mut m = agg.matmul_t(&p.wr);
        m.add_assign(&h_prev.matmul_t(&p.ur));
        m
    };
    let z = z_pre.map(sigmoid);
    let r = r_pre.map(sigmoid);
    let rh = r.zip_map(h_prev, |a, b| a * b);
    let mut cand = agg.matmul_t(&p.w);
    cand.add_assign(&rh.matmul_t(&p.u));
    let h_tilde = cand.map(T::tanh);
    let h = Matrix::from_fn(h_prev.rows(), h_prev.cols(), |i, j| {
        let zij = z[(i, j)];
        (T::one() - zij) * h_prev[(i, j)] + zij * h_tilde[(i, j)]
    });
    GateOutputs { z, r, h_tilde, h }
}

/// One gated update of every node's hidden state.
pub fn gru_step<T: Scalar>(p: &KgtmParams<T>, agg: &Matrix<T>, h_prev: &Matrix<T>) -> Result<Matrix<T>> {
    let d = p.uz.rows();
    if h_prev.cols() != d || agg.cols() != 2 * d || agg.rows() != h_prev.rows() {
        return Err(Error::input(format!(
            "gru_step shapes: aggregate {:?}, hidden {:?}, hidden_dim {d}",
            agg.shape(),
            h_prev.shape()
        )));
    }
    Ok(gru_parts(p, agg, h_prev).h)
}

fn check_graph<T: Scalar>(cfg: &KgtmConfig, graph: &CorrelationGraph<T>) -> Result<()> {
    if graph.n() != cfg.n_classes {
        return Err(Error::input(format!(
            "graph has {} classes, KGTM expects {}",
            graph.n(),
            cfg.n_classes
        )));
    }
    Ok(())
}

/// Propagates for `cfg.steps` steps and applies the output layer.
pub fn forward<T: Scalar>(
    cfg: &KgtmConfig,
    p: &KgtmParams<T>,
    graph: &CorrelationGraph<T>,
) -> Result<(PrototypeSet<T>, Trajectory<T>)> {
    cfg.validate()?;
    check_graph(cfg, graph)?;
    p.check_shapes(cfg)?;
    let a = graph.matrix();
    let mut h = p.hinit.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let agg = aggregate(a, &h)?;
        let g = gru_parts(p, &agg, &h);
        if !g.h.all_finite() {
            return Err(Error::numeric(format!("propagation step {t}"), "non-finite hidden state"));
        }
        steps.push(StepCache {
            h_prev: std::mem::replace(&mut h, g.h),
            agg,
            z: g.z,
            r: g.r,
            h_tilde: g.h_tilde,
        });
    }
    let mut w = h.hcat(&p.hinit).matmul_t(&p.o);
    for i in 0..w.rows() {
        for (v, &b) in w.row_mut(i).iter_mut().zip(p.bias.row(0)) {
            *v = *v + b;
        }
    }
    if !w.all_finite() {
        return Err(Error::numeric("output layer", "non-finite prototype"));
    }
    Ok((
        PrototypeSet::new(w),
        Trajectory {
            steps,
            h_final: h,
            fingerprint: fingerprint(p, a),
        },
    ))
}

/// Reverse-mode gradients of all parameters given `dL/dw*`. The graph is a
/// constant.
pub fn backward<T: Scalar>(
    cfg: &KgtmConfig,
    p: &KgtmParams<T>,
    graph: &CorrelationGraph<T>,
    traj: &Trajectory<T>,
    d_proto: &Matrix<T>,
) -> Result<KgtmParams<T>> {
    check_graph(cfg, graph)?;
    let a = graph.matrix();
    if traj.steps.len() != cfg.steps || traj.fingerprint != fingerprint(p, a) {
        return Err(Error::Contract(
            "trajectory was not produced by forward with these parameters and graph".into(),
        ));
    }
    if d_proto.shape() != (cfg.n_classes, cfg.feature_dim) {
        return Err(Error::input(format!(
            "prototype gradient has shape {:?}, expected {:?}",
            d_proto.shape(),
            (cfg.n_classes, cfg.feature_dim)
        )));
    }
    let d = cfg.hidden_dim;
    let mut g = p.zeros_like();

    // output layer
    let cat = traj.h_final.hcat(&p.hinit);
    g.o = d_proto.t_matmul(&cat);
    for i in 0..d_proto.rows() {
        for (b, &v) in g.bias.row_mut(0).iter_mut().zip(d_proto.row(i)) {
            *b = *b + v;
        }
    }
    let (mut dh, dh0_direct) = d_proto.matmul(&p.o).hsplit(d);

    for step in traj.steps.iter().rev() {
        let StepCache {
            h_prev,
            agg,
            z,
            r,
            h_tilde,
        } = step;
        let one = T::one();
        let mut dh_prev = dh.zip_map(z, |g, z| g * (one - z));
        let d_cand = Matrix::from_fn(dh.rows(), d, |i, j| {
            let ht = h_tilde[(i, j)];
            dh[(i, j)] * z[(i, j)] * (one - ht * ht)
        });
        let d_zpre = Matrix::from_fn(dh.rows(), d, |i, j| {
            let zz = z[(i, j)];
            dh[(i, j)] * (h_tilde[(i, j)] - h_prev[(i, j)]) * zz * (one - zz)
        });

        let rh = r.zip_map(h_prev, |a, b| a * b);
        g.w.add_assign(&d_cand.t_matmul(agg));
        g.u.add_assign(&d_cand.t_matmul(&rh));
        let mut d_agg = d_cand.matmul(&p.w);
        let d_rh = d_cand.matmul(&p.u);
        dh_prev.add_assign(&d_rh.zip_map(r, |a, b| a * b));
        let d_rpre = Matrix::from_fn(dh.rows(), d, |i, j| {
            let rr = r[(i, j)];
            d_rh[(i, j)] * h_prev[(i, j)] * rr * (one - rr)
        });

        g.wz.add_assign(&d_zpre.t_matmul(agg));
        g.uz.add_assign(&d_zpre.t_matmul(h_prev));
        d_agg.add_assign(&d_zpre.matmul(&p.wz));
        dh_prev.add_assign(&d_zpre.matmul(&p.uz));

        g.wr.add_assign(&d_rpre.t_matmul(agg));
        g.ur.add_assign(&d_rpre.t_matmul(h_prev));
        d_agg.add_assign(&d_rpre.matmul(&p.wr));
        dh_prev.add_assign(&d_rpre.matmul(&p.ur));

        // aggregate = [A h, Aᵀ h]
        let (d_out, d_in) = d_agg.hsplit(d);
        dh_prev.add_assign(&a.t_matmul(&d_out));
        dh_prev.add_assign(&a.matmul(&d_in));
        dh = dh_prev;
    }
    dh.add_assign(&dh0_direct);
    g.hinit = dh;
    Ok(g)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: KgtmConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes one `KGEM` file per tensor plus `manifest.json` into `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, cfg: &KgtmConfig, p: &KgtmParams<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in p.named() {
        let file = format!("{name}.kgem");
        kgem::write(dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            rows: t.rows(),
            cols: t.cols(),
        });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: cfg.clone(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(KgtmConfig, KgtmParams<T>)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::load(
            &manifest_path,
            format!("unsupported checkpoint version {}", manifest.format_version),
        ));
    }
    let cfg = manifest.config;
    cfg.validate()?;
    let mut p = KgtmParams::zeros(&cfg);
    for (name, slot) in TENSOR_NAMES.into_iter().zip(p.tensors_mut()) {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::load(&manifest_path, format!("missing tensor {name}")))?;
        let t: Matrix<T> = kgem::read(dir.join(&entry.file))?;
        if t.shape() != slot.shape() || t.shape() != (entry.rows, entry.cols) {
            return Err(Error::load(
                dir.join(&entry.file),
                format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    Ok((cfg, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{baseline_graph, BaselineKind};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut r = rng::seeded(seed, 0);
        Matrix::from_fn(rows, cols, |_, _| rng::gaussian(&mut r, 1.0))
    }

    fn small_cfg(k: usize, d: usize, steps: usize) -> KgtmConfig {
        KgtmConfig {
            steps,
            ..KgtmConfig::new(k, d, 42)
        }
    }

    #[test]
    fn init_is_deterministic_and_scalable() {
        let cfg = small_cfg(5, 3, 2);
        assert_eq!(init_params::<f64>(&cfg).unwrap(), init_params::<f64>(&cfg).unwrap());
        let zero = KgtmConfig {
            init_scale: Some(0.0),
            ..cfg
        };
        let p = init_params::<f64>(&zero).unwrap();
        assert!(p.tensors().iter().all(|t| t.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_std_follows_scale() {
        let cfg = KgtmConfig::new(300, 4, 1);
        let p = init_params::<f64>(&cfg).unwrap();
        let vals = p.hinit.as_slice();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.5).abs() < 0.15, "std = {std}");
        assert!(p.bias.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_identity_and_empty() {
        let h = random_matrix(4, 3, 0);
        let a = aggregate(&Matrix::identity(4), &h).unwrap();
        assert_eq!(a, h.hcat(&h));
        let z = aggregate(&Matrix::zeros(4, 4), &h).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        assert!(aggregate(&Matrix::identity(3), &h).is_err());
    }

    #[test]
    fn aggregate_matches_double_loop() {
        let a = random_matrix(5, 5, 1);
        let h = random_matrix(5, 3, 2);
        let agg = aggregate(&a, &h).unwrap();
        for k in 0..5 {
            for j in 0..3 {
                let mut out = 0.0;
                let mut inc = 0.0;
                for kp in 0..5 {
                    out += a[(k, kp)] * h[(kp, j)];
                    inc += a[(kp, k)] * h[(kp, j)];
                }
                assert!((agg[(k, j)] - out).abs() < 1e-12);
                assert!((agg[(k, j + 3)] - inc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gates_halve_state() {
        let cfg = small_cfg(3, 2, 1);
        let p = KgtmParams::<f64>::zeros(&cfg);
        let h = random_matrix(3, 2, 3);
        let agg = random_matrix(3, 4, 4);
        let out = gru_step(&p, &agg, &h).unwrap();
        assert_eq!(out, h.scale(0.5));
        let zero = gru_step(&init_params::<f64>(&cfg).unwrap(), &Matrix::zeros(3, 4), &Matrix::zeros(3, 2)).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_step_matches_scalar_loop() {
        let cfg = small_cfg(3, 2, 1);
        let p = init_params::<f64>(&KgtmConfig {
            init_scale: Some(0.8),
            ..cfg
        })
        .unwrap();
        let h = random_matrix(3, 2, 5);
        let agg = random_matrix(3, 4, 6);
        let out = gru_step(&p, &agg, &h).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for k in 0..3 {
            let mut z = [0.0; 2];
            let mut r = [0.0; 2];
            for i in 0..2 {
                let mut sz = 0.0;
                let mut sr = 0.0;
                for j in 0..4 {
                    sz += p.wz[(i, j)] * agg[(k, j)];
                    sr += p.wr[(i, j)] * agg[(k, j)];
                }
                for j in 0..2 {
                    sz += p.uz[(i, j)] * h[(k, j)];
                    sr += p.ur[(i, j)] * h[(k, j)];
                }
                z[i] = sig(sz);
                r[i] = sig(sr);
            }
            for i in 0..2 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += p.w[(i, j)] * agg[(k, j)];
                }
                for j in 0..2 {
                    s += p.u[(i, j)] * r[j] * h[(k, j)];
                }
                let expect = (1.0 - z[i]) * h[(k, i)] + z[i] * s.tanh();
                assert!((out[(k, i)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_step_forward_unrolls() {
        let cfg = small_cfg(4, 3, 1);
        let p = init_params::<f64>(&cfg).unwrap();
        let g = baseline_graph::<f64>(4, BaselineKind::Random, 3).unwrap();
        let (proto, traj) = forward(&cfg, &p, &g).unwrap();
        let agg = aggregate(g.matrix(), &p.hinit).unwrap();
        let h1 = gru_step(&p, &agg, &p.hinit).unwrap();
        let manual = Matrix::from_fn(4, 3, |k, f| {
            let cat: Vec<f64> = h1.row(k).iter().chain(p.hinit.row(k)).copied().collect();
            crate::matrix::dot(p.o.row(f), &cat) + p.bias[(0, f)]
        });
        assert!(proto.matrix().max_abs_diff(&manual) < 1e-12);
        assert_eq!(traj.hidden_states().len(), 2);
    }

    #[test]
    fn zero_output_layer_gives_zero_prototypes() {
        let cfg = small_cfg(4, 3, 2);
        let mut p = init_params::<f64>(&cfg).unwrap();
        p.o = Matrix::zeros(3, 6);
        let g = baseline_graph::<f64>(4, BaselineKind::Random, 0).unwrap();
        let (proto, _) = forward(&cfg, &p, &g).unwrap();
        assert!(proto.matrix().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_graph_stays_finite() {
        let cfg = small_cfg(5, 3, 6);
        let p = init_params::<f64>(&cfg).unwrap();
        let g = CorrelationGraph::from_matrix(Matrix::zeros(5, 5)).unwrap();
        let (proto, _) = forward(&cfg, &p, &g).unwrap();
        assert!(proto.matrix().all_finite());
    }

    #[test]
    fn backward_zero_upstream() {
        let cfg = small_cfg(5, 3, 2);
        let p = init_params::<f64>(&cfg).unwrap();
        let g = baseline_graph::<f64>(5, BaselineKind::Random, 0).unwrap();
        let (_, traj) = forward(&cfg, &p, &g).unwrap();
        let grads = backward(&cfg, &p, &g, &traj, &Matrix::zeros(5, 3)).unwrap();
        assert!(grads.tensors().iter().all(|t| t.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_rejects_stale_trajectory() {
        let cfg = small_cfg(5, 3, 2);
        let mut p = init_params::<f64>(&cfg).unwrap();
        let g = baseline_graph::<f64>(5, BaselineKind::Random, 0).unwrap();
        let (_, traj) = forward(&cfg, &p, &g).unwrap();
        p.wz[(0, 0)] += 1.0;
        let err = backward(&cfg, &p, &g, &traj, &Matrix::zeros(5, 3)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn hinit_gradient_reaches_through_skip_block() {
        let cfg = small_cfg(4, 3, 2);
        let mut p = init_params::<f64>(&cfg).unwrap();
        // kill the propagation path; only the h⁰ block of O remains
        for i in 0..3 {
            for j in 0..3 {
                p.o[(i, j)] = 0.0;
            }
        }
        let g = baseline_graph::<f64>(4, BaselineKind::Random, 0).unwrap();
        let (_, traj) = forward(&cfg, &p, &g).unwrap();
        let grads = backward(&cfg, &p, &g, &traj, &Matrix::filled(4, 3, 1.0)).unwrap();
        assert!(grads.hinit.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(4, 3, 2);
        let p = init_params::<f64>(&cfg).unwrap();
        save_checkpoint(dir.path(), &cfg, &p).unwrap();
        let (cfg2, p2) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        // binary32 storage
        for (a, b) in p.tensors().iter().zip(p2.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }
}
