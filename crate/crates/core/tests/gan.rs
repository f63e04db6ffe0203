use invdes::gan::{
    adversarial_losses, collapse_loss, gram, style_loss, Discriminator, GanConfig, GanTrainer, Generator, LatentVec,
};
use invdes::grf::{synthesize, GrfParams};
use invdes::micro::Microstructure;
use invdes::seed::rng_for;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|i| {
            w[i] = x[i] + h;
            let p = f(&w);
            w[i] = x[i] - h;
            let q = f(&w);
            w[i] = x[i];
            (p - q) / (2.0 * h)
        })
        .collect()
}

fn rel(a: &[f32], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    d / n
}

#[test]
fn shape_chain() {
    let mut rng = rng_for(1, 0);
    for (latent, side) in [(2, 64), (3, 96)] {
        let g = Generator::new(latent, &mut rng).unwrap();
        assert_eq!(g.image_side(), side);
        let zs: Vec<LatentVec> = (0..2).map(|_| LatentVec::sample_prior(latent, &mut rng)).collect();
        let imgs = g.generate_batch(&zs).unwrap();
        assert!(imgs.iter().all(|m| m.side() == side));
        let d = Discriminator::new(side, &mut rng).unwrap();
        let scores = d.score(&imgs).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));
    }
    assert!(Discriminator::new(40, &mut rng).is_err());
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let real: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..0.95)).collect();
        let fake: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let l = adversarial_losses(&f32s(&real), &f32s(&fake)).unwrap();
        let mean_ln = |v: &[f64], g: &dyn Fn(f64) -> f64| v.iter().map(|&s| g(s).ln()).sum::<f64>() / v.len() as f64;
        let ld_real = |r: &[f64]| -(mean_ln(r, &|s| s) + mean_ln(&fake, &|s| 1.0 - s));
        let ld_fake = |f: &[f64]| -(mean_ln(&real, &|s| s) + mean_ln(f, &|s| 1.0 - s));
        let lg_fake = |f: &[f64]| -mean_ln(f, &|s| s);
        assert!(rel(&l.d_loss_d_real, &fd(&ld_real, &real, 1e-6)) < 1e-3);
        assert!(rel(&l.d_loss_d_fake, &fd(&ld_fake, &fake, 1e-6)) < 1e-3);
        assert!(rel(&l.g_loss_d_fake, &fd(&lg_fake, &fake, 1e-6)) < 1e-3);
    }
}

#[test]
fn collapse_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, dx) = (3, 5);
        // Nearly identical images keep every pair inside the hinge.
        let base: Vec<f64> = (0..dx).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..b * dx).map(|i| base[i % dx] + rng.random_range(-0.02..0.02)).collect();
        let z: Vec<f32> = (0..b * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let (_, g) = collapse_loss(&xf, &z, b, 0.5).unwrap();
        let f = |x: &[f64]| {
            let mut total = 0.0;
            for i in 0..b {
                for j in i + 1..b {
                    let xd: f64 = (0..dx).map(|p| (x[i * dx + p] - x[j * dx + p]).abs()).sum::<f64>() / dx as f64;
                    let zd: f64 = (0..2).map(|p| (z[i * 2 + p] - z[j * 2 + p]).abs() as f64).sum::<f64>() / 2.0;
                    total += (0.5 - xd / zd).max(0.0);
                }
            }
            total / 3.0
        };
        assert!(rel(&g, &fd(&f, &x, 1e-7)) < 1e-3, "seed {seed}");
    }
}

#[test]
fn style_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c, hw) = (2, 3, 4);
        let feats: Vec<f64> = (0..b * c * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let real: Vec<f32> = (0..b * c * hw).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let rg = gram(&real, b, c);
        let ff: Vec<f32> = feats.iter().map(|&v| v as f32).collect();
        let (_, g) = style_loss(&ff, b, &rg, c);
        // Gram and loss written out directly in f64.
        let f = |x: &[f64]| {
            let mut total = 0.0;
            for a in 0..c {
                for d in 0..c {
                    let mut s = 0.0;
                    for n in 0..b {
                        for p in 0..hw {
                            s += x[(n * c + a) * hw + p] * x[(n * c + d) * hw + p];
                        }
                    }
                    total += (s / (b * hw) as f64 - rg[a * c + d]).powi(2);
                }
            }
            total / (c * c) as f64
        };
        assert!(rel(&g, &fd(&f, &feats, 1e-6)) < 1e-3, "seed {seed}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_for(4, 0);
    let g = Generator::new(2, &mut rng).unwrap();
    let path = dir.path().join("g.mfck");
    g.save(&path).unwrap();
    let back = Generator::load(&path, 2).unwrap();
    let z = LatentVec::sample_prior(2, &mut rng);
    assert_eq!(g.generate(&z).unwrap(), back.generate(&z).unwrap());
    let d = Discriminator::new(64, &mut rng).unwrap();
    d.save(&dir.path().join("d.mfck")).unwrap();
    let img = g.generate(&z).unwrap();
    let d2 = Discriminator::load(&dir.path().join("d.mfck"), 64).unwrap();
    assert_eq!(d.score(std::slice::from_ref(&img)).unwrap(), d2.score(&[img]).unwrap());
}

fn blob(side: usize, seed: u64) -> Microstructure {
    synthesize(&GrfParams {
        side,
        correlation_length: 3.0,
        volume_fraction: 0.5,
        seed,
    })
    .unwrap()
}

fn small_config(steps: usize) -> GanConfig {
    GanConfig {
        latent_side: 1,
        steps,
        batch: 4,
        learning_rate: 1e-3,
        beta1: 0.5,
        seed: 9,
        ..GanConfig::default()
    }
}

#[test]
fn zero_steps_leaves_networks_unchanged() {
    let data = vec![blob(32, 1), blob(32, 2)];
    let fresh = GanTrainer::new(small_config(0)).unwrap();
    let mut t = GanTrainer::new(small_config(0)).unwrap();
    t.train(&data, |_, _, _| Ok(())).unwrap();
    assert!(t.history.is_empty());
    let z = LatentVec::sample_prior(1, &mut rng_for(1, 1));
    assert_eq!(t.generator.generate(&z).unwrap(), fresh.generator.generate(&z).unwrap());
}

#[test]
fn same_seed_same_history() {
    let data = vec![blob(32, 1), blob(32, 2), blob(32, 3)];
    let run = || {
        let mut t = GanTrainer::new(small_config(5)).unwrap();
        let mut calls = 0;
        t.train(&data, |_, _, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 1);
        t.history
    };
    let a = run();
    assert_eq!(a.len(), 5);
    assert_eq!(a, run());
    assert!(a.iter().all(|h| h.loss_d.is_finite() && h.loss_g.is_finite()));
}

#[test]
fn single_image_overfit() {
    let target = blob(32, 3);
    let data = vec![target.clone()];
    let mut t = GanTrainer::new(GanConfig {
        batch: 8,
        steps: 2000,
        ..small_config(2000)
    })
    .unwrap();
    let mut rng = rng_for(5, 5);
    let mut best = f64::INFINITY;
    for s in 1..=2000 {
        let h = t.step(&data).unwrap();
        assert!(h.loss_d.is_finite() && h.loss_g.is_finite());
        if s % 50 == 0 {
            let zs: Vec<LatentVec> = (0..16).map(|_| LatentVec::sample_prior(1, &mut rng)).collect();
            for img in t.generator.generate_batch(&zs).unwrap() {
                let mse = img
                    .pixels()
                    .iter()
                    .zip(target.pixels())
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / 1024.0;
                best = best.min(mse);
            }
            if best < 0.05 {
                break;
            }
        }
    }
    assert!(best < 0.05, "best MSE {best}");
}
