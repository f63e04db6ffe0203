use invdes::baselines::bo::{minimize, BoConfig};
use invdes::baselines::gp::{expected_improvement, kernel, GaussianProcess, GpHyper};
use invdes::baselines::{DirectMdn, PcaMdn, PcaModel};
use invdes::mdn::{head_size, MdnConfig};
use invdes::micro::Microstructure;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| gaussian(rng)).collect()
}

fn recon_error(p: &PcaModel, data: &[f64], d: usize) -> f64 {
    data.chunks(d)
        .map(|x| {
            let r = p.inverse(&p.transform(x).unwrap()).unwrap();
            x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum()
}

fn centered(data: &[f64], n: usize, d: usize) -> DMatrix<f64> {
    let x = DMatrix::from_row_slice(n, d, data);
    let mean = x.row_mean();
    DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c])
}

#[test]
fn affine_subspace_reconstructs_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d, m) = (40, 16, 3);
    let basis = random_data(&mut rng, m, d);
    let offset = random_data(&mut rng, 1, d);
    let data: Vec<f64> = (0..n)
        .flat_map(|_| {
            let w: Vec<f64> = (0..m).map(|_| gaussian(&mut rng)).collect();
            let basis = &basis;
            offset.iter().enumerate().map(move |(j, o)| o + (0..m).map(|i| w[i] * basis[i * d + j]).sum::<f64>())
        })
        .collect();
    let p = PcaModel::fit(&data, n, d, m).unwrap();
    for x in data.chunks(d) {
        let r = p.inverse(&p.transform(x).unwrap()).unwrap();
        let err: f64 = x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-8, "{err}");
    }
    assert!(PcaModel::fit(&data, n, d, m + 1).is_err());
}

#[test]
fn components_orthonormal_and_variances_sorted() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(n, d) in &[(30, 10), (10, 30)] {
        let data = random_data(&mut rng, n, d);
        let p = PcaModel::fit(&data, n, d, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..d).map(|k| p.components[i * d + k] * p.components[j * d + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
        }
        assert!(p.variances.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn error_equals_trailing_eigenvalue_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Both the covariance and the Gram route.
    for &(n, d) in &[(60, 16), (12, 64)] {
        let data = random_data(&mut rng, n, d);
        let x = centered(&data, n, d);
        let mut eig: Vec<f64> = SymmetricEigen::new(x.transpose() * &x).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let mut prev = f64::INFINITY;
        for m in 1..(n.min(d) - 1) {
            let p = PcaModel::fit(&data, n, d, m).unwrap();
            let err = recon_error(&p, &data, d);
            let trailing: f64 = eig[m..].iter().sum();
            assert!((err - trailing).abs() < 1e-8 * trailing.max(1.0), "m={m}: {err} vs {trailing}");
            assert!(err <= prev + 1e-9);
            prev = err;
        }
    }
}

#[test]
fn pca_beats_random_subspaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d, m) = (25, 6, 2);
    let data = random_data(&mut rng, n, d);
    let p = PcaModel::fit(&data, n, d, m).unwrap();
    let best = recon_error(&p, &data, d);
    let x = centered(&data, n, d);
    for _ in 0..500 {
        let q = DMatrix::from_fn(d, m, |_, _| gaussian(&mut rng)).qr().q();
        let r = &x * &q * q.transpose();
        assert!(best <= (&x - r).norm_squared() + 1e-9);
    }
}

#[test]
fn subspace_iteration_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d, m) = (600, 520, 4);
    // Strongly decaying spectrum so the top directions are well separated.
    let scales: Vec<f64> = (0..d).map(|j| 0.5f64.powi(j.min(12) as i32) * 10.0 + 0.01).collect();
    let data: Vec<f64> = (0..n * d).map(|i| gaussian(&mut rng) * scales[i % d]).collect();
    let p = PcaModel::fit(&data, n, d, m).unwrap();
    let x = centered(&data, n, d);
    let eig = SymmetricEigen::new(x.transpose() * &x);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (c, &i) in order[..m].iter().enumerate() {
        let want = eig.eigenvalues[i] / (n - 1) as f64;
        assert!((p.variances[c] - want).abs() < 1e-8 * want, "{} vs {want}", p.variances[c]);
        let dot: f64 = (0..d).map(|k| p.components[c * d + k] * eig.eigenvectors[(k, i)]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn pca_checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = random_data(&mut rng, 20, 9);
    let p = PcaModel::fit(&data, 20, 9, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pca.mfck");
    p.save(&path).unwrap();
    let q = PcaModel::load(&path).unwrap();
    let a = q.transform(&data[..9]).unwrap();
    let b = p.transform(&data[..9]).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    assert!(q.transform(&data[..8]).is_err());
}

fn hyper(length: f64, jitter: f64) -> GpHyper {
    GpHyper {
        mean: 0.3,
        signal_var: 1.7,
        length_scale: length,
        jitter,
    }
}

#[test]
fn gp_interpolates_training_points() {
    let x: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 1.0]];
    let y = [1.0, -2.0, 0.5];
    let gp = GaussianProcess::fit_with(&x, &y, hyper(0.7, 1e-12)).unwrap();
    for (xi, yi) in x.iter().zip(&y) {
        let (m, v) = gp.predict(xi);
        assert!((m - yi).abs() < 1e-8 && v < 1e-8);
    }
}

#[test]
fn gp_reverts_to_prior_far_away() {
    let x: Vec<Vec<f64>> = vec![vec![0.0], vec![0.4]];
    let gp = GaussianProcess::fit_with(&x, &[2.0, -1.0], hyper(0.3, 1e-6)).unwrap();
    let (m, v) = gp.predict(&[50.0]);
    assert!((m - 0.3).abs() < 1e-12 && (v - 1.7).abs() < 1e-12);
}

#[test]
fn gp_matches_dense_solve() {
    let xs = [-1.0, -0.3, 0.2, 0.9, 1.4];
    let ys = [0.4, -0.1, 0.8, 1.1, -0.6];
    let h = hyper(0.6, 1e-6);
    let x: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
    let gp = GaussianProcess::fit_with(&x, &ys, h).unwrap();
    let k = DMatrix::from_fn(5, 5, |i, j| kernel(&h, &x[i], &x[j]) + if i == j { h.jitter * h.signal_var } else { 0.0 });
    let kinv = k.try_inverse().unwrap();
    let r = DVector::from_iterator(5, ys.iter().map(|y| y - h.mean));
    for q in [-1.2, 0.0, 0.55, 2.0] {
        let ks = DVector::from_iterator(5, x.iter().map(|xi| kernel(&h, xi, &[q])));
        let mean = h.mean + (ks.transpose() * &kinv * &r)[0];
        let var = h.signal_var - (ks.transpose() * &kinv * &ks)[0];
        let (m, v) = gp.predict(&[q]);
        assert!((m - mean).abs() < 1e-8 && (v - var.max(0.0)).abs() < 1e-8, "{q}");
    }
}

#[test]
fn singular_kernel_needs_jitter() {
    // Duplicate inputs make the bare kernel singular.
    let x = vec![vec![0.1], vec![0.1], vec![0.1]];
    assert!(GaussianProcess::fit_with(&x, &[1.0, 1.0, 1.0], hyper(1.0, 0.0)).is_err());
    let gp = GaussianProcess::fit(&x, &[1.0, 2.0, 3.0]).unwrap();
    assert!(gp.predict(&[0.1]).1 >= 0.0);
}

#[test]
fn ei_deterministic_cases() {
    assert_eq!(expected_improvement(1.0, 0.0, 0.5), 0.0);
    assert!((expected_improvement(0.3, 0.0, 0.5) - 0.2).abs() < 1e-15);
}

#[test]
fn ei_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mean, var, best): (f64, f64, f64) = (0.2, 0.09, 0.1);
    let n = 1_000_000;
    let draws: Vec<f64> = (0..n).map(|_| (best - (mean + var.sqrt() * gaussian(&mut rng))).max(0.0)).collect();
    let mc = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|d| (d - mc).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let ei = expected_improvement(mean, var, best);
    assert!((ei - mc).abs() < 3.0 * sd / (n as f64).sqrt(), "{ei} vs {mc}");
}

proptest! {
    #[test]
    fn ei_nonnegative_and_grows_with_variance(mean in -2.0f64..2.0, best in -2.0f64..2.0, v in 0.0f64..4.0, dv in 0.01f64..1.0) {
        let a = expected_improvement(mean, v, best);
        prop_assert!(a >= 0.0);
        if mean > best {
            prop_assert!(expected_improvement(mean, v + dv, best) > a || a > 1.0);
        }
    }
}

#[test]
fn bo_finds_quadratic_minimum() {
    let target = [0.35, -0.6];
    let cfg = BoConfig {
        init: 20,
        iterations: 50,
        seed: 3,
        ..BoConfig::default()
    };
    let f = |z: &[f64]| z.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let res = minimize(2, &cfg, |z| Ok(f(z))).unwrap();
    // Grid oracle for the minimizer over the box.
    let mut grid_best = (f64::INFINITY, [0.0, 0.0]);
    for i in 0..=200 {
        for j in 0..=200 {
            let z = [-1.0 + i as f64 / 100.0, -1.0 + j as f64 / 100.0];
            if f(&z) < grid_best.0 {
                grid_best = (f(&z), z);
            }
        }
    }
    let dist = res.best_x.iter().zip(&grid_best.1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(dist < 0.1, "{dist}");
    assert_eq!(res.trace.len(), 70);
    assert!(res.trace.windows(2).all(|w| w[1].incumbent <= w[0].incumbent));
}

#[test]
fn bo_without_iterations_keeps_best_initial() {
    let cfg = BoConfig {
        init: 12,
        iterations: 0,
        ..BoConfig::default()
    };
    let res = minimize(3, &cfg, |z| Ok(z.iter().sum())).unwrap();
    let best = res.trace.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
    assert_eq!(res.trace.len(), 12);
    assert_eq!(res.best_value, best);
}

#[test]
fn bo_tolerates_constant_objective() {
    let cfg = BoConfig {
        init: 5,
        iterations: 5,
        ..BoConfig::default()
    };
    let res = minimize(2, &cfg, |_| Ok(1.0)).unwrap();
    assert_eq!(res.best_value, 1.0);
}

fn stripes(n: usize, side: usize, rng: &mut ChaCha8Rng) -> (Vec<Microstructure>, Vec<f64>) {
    let mut imgs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let cut = rng.random_range(1..side);
        let px = (0..side * side).map(|i| if i % side < cut { 1.0 } else { -1.0 }).collect();
        imgs.push(Microstructure::new(side, px).unwrap());
        ys.push(cut as f64 / side as f64);
    }
    (imgs, ys)
}

fn small_mdn(m: usize) -> MdnConfig {
    MdnConfig {
        output_dim: m,
        batch: 32,
        max_epochs: 15,
        patience: 5,
        seed: 1,
        ..MdnConfig::default()
    }
}

#[test]
fn pca_mdn_trains_and_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (imgs, ys) = stripes(300, 8, &mut rng);
    let (model, hist) = PcaMdn::train(&imgs, &ys, &small_mdn(4)).unwrap();
    assert!(hist.best_val_nll < hist.initial_val_nll);
    let out = model.sample(0.5, 5, &mut rng).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|m| m.side() == 8 && m.pixels().iter().all(|p| p.abs() == 1.0)));
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = PcaMdn::load(dir.path(), small_mdn(4)).unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(model.sample(0.3, 3, &mut r1).unwrap(), back.sample(0.3, 3, &mut r2).unwrap());
}

#[test]
fn direct_mdn_head_and_guard() {
    let cfg = DirectMdn::config_for(8, &MdnConfig::default(), 4096).unwrap();
    assert_eq!(cfg.head_size(), 5160);
    assert_eq!(DirectMdn::config_for(64, &MdnConfig::default(), 4096).unwrap().head_size(), 327_720);
    assert_eq!(head_size(40, 64 * 64), 327_720);
    assert!(DirectMdn::config_for(65, &MdnConfig::default(), 4096).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (imgs, ys) = stripes(200, 8, &mut rng);
    let (model, _) = DirectMdn::train(&imgs, &ys, &small_mdn(1), 4096).unwrap();
    let out = model.sample(0.4, 4, &mut rng).unwrap();
    assert!(out.iter().all(|m| m.side() == 8 && m.pixels().iter().all(|p| p.abs() == 1.0)));
}
