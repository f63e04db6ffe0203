use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use invdes::baselines::bo::BoTraceRow;
use invdes::error::Result;
use invdes::eval::{evaluate_method, evaluate_method_observed, export_best_grid, export_report, rep, EvalEvent, RepRecord};
use invdes::methods::{InverseMethod, MethodRegistry, Proposal};
use invdes::micro::{read_pgm_raw, Microstructure};
use invdes::property::{absorption, PropertySimulator};
use proptest::prelude::*;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

#[test]
fn rep_unit_values() {
    assert_eq!(rep(0.60, 0.60).unwrap(), 0.0);
    assert!((rep(0.66, 0.60).unwrap() - 10.0).abs() < 1e-12);
    assert!((rep(0.594, 0.60).unwrap() - 1.0).abs() < 1e-12);
    assert!(rep(0.5, 0.0).is_err());
}

proptest! {
    #[test]
    fn rep_is_scale_free(y_hat in 0.0f64..2.0, y in 0.01f64..2.0, c in 0.01f64..100.0) {
        let a = rep(y_hat, y).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((rep(c * y_hat, c * y).unwrap() - a).abs() < 1e-9 * a.max(1.0));
    }
}

/// Images with a random number of positive pixels, side 8.
struct RandomFill {
    id: &'static str,
    single: bool,
}

impl InverseMethod for RandomFill {
    fn id(&self) -> &str {
        self.id
    }

    fn single_candidate(&self) -> bool {
        self.single
    }

    fn propose(&mut self, _target: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Proposal> {
        let count = if self.single { 1 } else { n };
        let images = (0..count)
            .map(|_| {
                let px = (0..64).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 }).collect();
                Microstructure::new(8, px).unwrap()
            })
            .collect();
        Ok(Proposal {
            images,
            trace: if self.single {
                vec![BoTraceRow {
                    evaluation: 1,
                    point: vec![0.0],
                    objective: 0.0,
                    incumbent: 0.0,
                }]
            } else {
                Vec::new()
            },
            ..Proposal::default()
        })
    }
}

struct Slow {
    calls: Arc<AtomicUsize>,
}

impl PropertySimulator for Slow {
    fn simulate(&self, m: &Microstructure) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        std::thread::sleep(Duration::from_millis(20));
        absorption(m)
    }
}

fn method() -> RandomFill {
    RandomFill {
        id: "fill",
        single: false,
    }
}

#[test]
fn five_targets_thirty_samples() {
    let calls = Arc::new(AtomicUsize::new(0));
    let sim = Slow { calls: calls.clone() };
    let targets = [0.55, 0.60, 0.65, 0.70, 0.75];
    let mut events = Vec::new();
    let recs = evaluate_method_observed(&mut method(), "toy", &targets, 30, &sim, 7, &mut |e| events.push(e)).unwrap();
    assert_eq!(recs.len(), 5);
    assert_eq!(calls.load(Ordering::Relaxed), 150);
    for (r, &t) in recs.iter().zip(&targets) {
        assert_eq!(r.n, 30);
        // Independent single-pass statistics.
        let (mut s, mut s2, mut lo) = (0.0, 0.0, f64::INFINITY);
        for &y in &r.properties {
            let e = (y - t).abs() / t * 100.0;
            s += e;
            s2 += e * e;
            lo = lo.min(e);
        }
        let mean = s / 30.0;
        let std = (s2 / 30.0 - mean * mean).max(0.0).sqrt();
        assert!((r.min_rep - lo).abs() < 1e-9);
        assert!((r.avg_rep.unwrap() - mean).abs() < 1e-9);
        assert!((r.std_rep.unwrap() - std).abs() < 1e-9);
        assert!(r.min_rep <= r.avg_rep.unwrap());
        // Thirty simulations at 20 ms each would show up if they were timed.
        assert!(r.runtime_s < 0.3, "{}", r.runtime_s);
    }
    // Proposal timing closes before any simulation starts.
    for chunk in events.chunks(3) {
        assert!(matches!(chunk[0], EvalEvent::ProposeStart { .. }));
        assert!(matches!(chunk[1], EvalEvent::ProposeEnd { .. }));
        assert!(matches!(chunk[2], EvalEvent::Simulate { candidates: 30, .. }));
    }
}

struct Fast;

impl PropertySimulator for Fast {
    fn simulate(&self, m: &Microstructure) -> f64 {
        absorption(m)
    }
}

#[test]
fn single_sample_and_single_candidate_fields() {
    let r = evaluate_method(&mut method(), "toy", &[0.6], 1, &Fast, 1).unwrap();
    assert_eq!(r[0].avg_rep, Some(r[0].min_rep));
    assert_eq!(r[0].std_rep, None);
    let mut bo = RandomFill { id: "bo", single: true };
    let r = evaluate_method(&mut bo, "toy", &[0.6, 0.7], 30, &Fast, 1).unwrap();
    assert!(r.iter().all(|r| r.n == 1 && r.avg_rep.is_none() && r.std_rep.is_none()));
}

#[test]
fn replay_is_identical() {
    let a = evaluate_method(&mut method(), "toy", &[0.55, 0.7], 30, &Fast, 3).unwrap();
    let b = evaluate_method(&mut method(), "toy", &[0.55, 0.7], 30, &Fast, 3).unwrap();
    let strip = |v: &[RepRecord]| v.iter().map(|r| (r.min_rep, r.avg_rep, r.std_rep)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn report_rows_and_grid() {
    let mut reg = MethodRegistry::new();
    for id in ["a", "b", "c"] {
        reg.register(Box::new(RandomFill { id, single: false })).unwrap();
    }
    reg.register(Box::new(RandomFill { id: "bo", single: true })).unwrap();
    assert!(reg.register(Box::new(method())).is_ok());
    assert!(reg.register(Box::new(method())).is_err());
    assert!(reg.get_mut("missing").is_err());
    let targets = [0.55, 0.60, 0.65, 0.70, 0.75];
    let mut all = Vec::new();
    for id in ["a", "b", "c", "bo"] {
        all.extend(evaluate_method(reg.get_mut(id).unwrap(), "toy", &targets, 30, &Fast, 2).unwrap());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    export_report(&path, &all, false).unwrap();
    let mut r = csv::Reader::from_path(&path).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["method", "dataset", "target", "n", "min_rep_pct", "avg_rep_pct", "std_rep_pct", "runtime_s"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 20);
    for row in &rows {
        assert_eq!(&row[7], "NA");
        if &row[0] == "bo" {
            assert_eq!((&row[5], &row[6]), ("NA", "NA"));
        } else {
            assert!(row[5].parse::<f64>().is_ok());
        }
    }
    let grid = dir.path().join("grid.pgm");
    export_best_grid(&grid, &all[..5]).unwrap();
    let (w, h, _) = read_pgm_raw(&grid).unwrap();
    assert_eq!((w, h), (5 * 8 + 4 * 2, 8));
}
