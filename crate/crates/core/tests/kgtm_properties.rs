use kgtn::graph::{baseline_graph, BaselineKind, CorrelationGraph};
use kgtn::kgtm::{aggregate, backward, forward, init_params, load_checkpoint, save_checkpoint, KgtmConfig, TENSOR_NAMES};
use kgtn::{rng, Error, KgtmParams64, Matrix64};
use rand::seq::SliceRandom;

fn config(k: usize, d: usize, steps: usize, seed: u64) -> KgtmConfig {
    KgtmConfig {
        steps,
        init_scale: Some(0.6),
        ..KgtmConfig::new(k, d, seed)
    }
}

fn random_graph(k: usize, seed: u64) -> CorrelationGraph<f64> {
    baseline_graph(k, BaselineKind::Random, seed).unwrap()
}

fn weighted_sum(cfg: &KgtmConfig, p: &KgtmParams64, g: &CorrelationGraph<f64>, weights: &Matrix64) -> f64 {
    let (w, _) = forward(cfg, p, g).unwrap();
    w.matrix()
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

#[test]
fn backward_matches_central_differences() {
    for (k, d, steps, seed) in [(5, 3, 2, 1), (6, 4, 3, 2), (4, 2, 1, 3)] {
        let cfg = config(k, d, steps, seed);
        let p: KgtmParams64 = init_params(&cfg).unwrap();
        let g = random_graph(k, seed + 10);
        let mut r = rng::seeded(seed, 99);
        let weights = Matrix64::from_fn(k, d, |_, _| rng::gaussian(&mut r, 1.0));
        let (_, traj) = forward(&cfg, &p, &g).unwrap();
        let grads = backward(&cfg, &p, &g, &traj, &weights).unwrap();

        let h = 1e-5;
        for t in 0..TENSOR_NAMES.len() {
            let analytic = grads.tensors()[t];
            for idx in 0..analytic.as_slice().len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t].as_mut_slice()[idx] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t].as_mut_slice()[idx] -= h;
                let numeric =
                    (weighted_sum(&cfg, &plus, &g, &weights) - weighted_sum(&cfg, &minus, &g, &weights)) / (2.0 * h);
                let a = analytic.as_slice()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-6, "{} [{idx}]: analytic {a}, numeric {numeric}", TENSOR_NAMES[t]);
            }
        }
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    let k = 6;
    let cfg = config(k, 4, 2, 5);
    let p: KgtmParams64 = init_params(&cfg).unwrap();
    let g = random_graph(k, 6);
    let (w, _) = forward(&cfg, &p, &g).unwrap();
    let mut r = rng::seeded(7, 0);
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut r);
        let (wp, _) = forward(&cfg, &p.permuted_classes(&perm), &g.permuted(&perm)).unwrap();
        let expected = w.matrix().select_rows(&perm);
        assert!(wp.matrix().max_abs_diff(&expected) <= 1e-10);
    }
}

#[test]
fn aggregate_matches_loops() {
    let k = 5;
    let g = random_graph(k, 1);
    let mut r = rng::seeded(2, 0);
    let h = Matrix64::from_fn(k, 3, |_, _| rng::gaussian(&mut r, 1.0));
    let agg = aggregate(g.matrix(), &h).unwrap();
    let a = g.matrix();
    for i in 0..k {
        for c in 0..3 {
            let out: f64 = (0..k).map(|j| a[(i, j)] * h[(j, c)]).sum();
            let inc: f64 = (0..k).map(|j| a[(j, i)] * h[(j, c)]).sum();
            assert!((agg[(i, c)] - out).abs() < 1e-12);
            assert!((agg[(i, 3 + c)] - inc).abs() < 1e-12);
        }
    }
}

#[test]
fn stale_trajectory_is_rejected() {
    let cfg = config(4, 3, 2, 1);
    let p: KgtmParams64 = init_params(&cfg).unwrap();
    let g = random_graph(4, 2);
    let (_, traj) = forward(&cfg, &p, &g).unwrap();
    let mut moved = p.clone();
    moved.o[(0, 0)] += 0.5;
    let err = backward(&cfg, &moved, &g, &traj, &Matrix64::zeros(4, 3)).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    let other = random_graph(4, 3);
    assert!(matches!(
        backward(&cfg, &p, &other, &traj, &Matrix64::zeros(4, 3)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = config(5, 3, 2, 8);
    let p: KgtmParams64 = init_params(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &p).unwrap();
    let (cfg2, p2): (KgtmConfig, KgtmParams64) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg, cfg2);
    for (a, b) in p.tensors().into_iter().zip(p2.tensors()) {
        // stored as binary32
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    std::fs::remove_file(dir.path().join("wz.kgem")).unwrap();
    assert!(load_checkpoint::<f64>(dir.path()).is_err());
}

#[test]
fn forward_rejects_mismatched_graph() {
    let cfg = config(5, 3, 2, 1);
    let p: KgtmParams64 = init_params(&cfg).unwrap();
    assert!(forward(&cfg, &p, &random_graph(4, 1)).is_err());
}
