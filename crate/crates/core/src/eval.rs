//! Per-target candidate generation, REP statistics and reports.

use std::path::Path;
use std::time::Instant;

use crate::error::{CoreError, Result};
use crate::gan::LatentVec;
use crate::methods::InverseMethod;
use crate::micro::{write_grid, Microstructure};
use crate::property::PropertySimulator;
use crate::seed::rng_for;
use crate::baselines::bo::BoTraceRow;

pub const DEFAULT_TARGETS: [f64; 5] = [0.55, 0.60, 0.65, 0.70, 0.75];
pub const REPORT_HEADER: [&str; 8] = [
    "method",
    "dataset",
    "target",
    "n",
    "min_rep_pct",
    "avg_rep_pct",
    "std_rep_pct",
    "runtime_s",
];
const GRID_GUTTER: usize = 2;

/// Residual error percentage `|ŷ − y| / y · 100`.
pub fn rep(y_hat: f64, y: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(CoreError::invalid(format!("REP needs a positive target, got {y}")));
    }
    Ok((y_hat - y).abs() / y * 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepRecord {
    pub method: String,
    pub dataset: String,
    pub target: f64,
    pub n: usize,
    pub min_rep: f64,
    pub avg_rep: Option<f64>,
    pub std_rep: Option<f64>,
    /// Seconds spent proposing candidates, simulator excluded.
    pub runtime_s: f64,
    pub properties: Vec<f64>,
    pub reps: Vec<f64>,
    pub best: Microstructure,
    pub best_latent: Option<LatentVec>,
    pub trace: Vec<BoTraceRow>,
}

/// Evaluation phase boundaries, reported to an observer in order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalEvent {
    ProposeStart { target: f64 },
    ProposeEnd { target: f64, seconds: f64 },
    Simulate { target: f64, candidates: usize },
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate_method(
    method: &mut dyn InverseMethod,
    dataset: &str,
    targets: &[f64],
    n_samples: usize,
    sim: &dyn PropertySimulator,
    seed: u64,
) -> Result<Vec<RepRecord>> {
    evaluate_method_observed(method, dataset, targets, n_samples, sim, seed, &mut |_| {})
}

pub fn evaluate_method_observed(
    method: &mut dyn InverseMethod,
    dataset: &str,
    targets: &[f64],
    n_samples: usize,
    sim: &dyn PropertySimulator,
    seed: u64,
    observer: &mut dyn FnMut(EvalEvent),
) -> Result<Vec<RepRecord>> {
    if n_samples == 0 {
        return Err(CoreError::invalid("at least one candidate per target is required"));
    }
    let mut records = Vec::with_capacity(targets.len());
    for (i, &target) in targets.iter().enumerate() {
        rep(target, target)?;
        let mut rng = rng_for(seed, i as u64);
        observer(EvalEvent::ProposeStart { target });
        let start = Instant::now();
        let proposal = method.propose(target, n_samples, &mut rng)?;
        let seconds = start.elapsed().as_secs_f64();
        observer(EvalEvent::ProposeEnd { target, seconds });
        if proposal.images.is_empty() {
            return Err(CoreError::numerical(format!(
                "method `{}` produced no candidate for target {target}",
                method.id()
            )));
        }
        observer(EvalEvent::Simulate {
            target,
            candidates: proposal.images.len(),
        });
        let properties: Vec<f64> = proposal.images.iter().map(|m| sim.simulate(m)).collect();
        let reps = properties.iter().map(|&y| rep(y, target)).collect::<Result<Vec<_>>>()?;
        let (best_i, &min_rep) = reps
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty");
        let (avg, std) = mean_std(&reps);
        let single = method.single_candidate();
        records.push(RepRecord {
            method: method.id().to_string(),
            dataset: dataset.to_string(),
            target,
            n: reps.len(),
            min_rep,
            avg_rep: (!single).then_some(avg),
            std_rep: (!single && reps.len() > 1).then_some(std),
            runtime_s: seconds,
            best: proposal.images[best_i].clone(),
            best_latent: proposal.latents.get(best_i).cloned(),
            properties,
            reps,
            trace: proposal.trace,
        });
    }
    Ok(records)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Writes the report CSV. With `include_runtime` false the runtime column
/// holds `NA`, which keeps reruns byte-identical.
pub fn export_report(path: &Path, records: &[RepRecord], include_runtime: bool) -> Result<()> {
    if records.is_empty() {
        return Err(CoreError::invalid("no records to report"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.dataset.clone(),
            format!("{:.2}", r.target),
            r.n.to_string(),
            format!("{:.6}", r.min_rep),
            fmt_opt(r.avg_rep),
            fmt_opt(r.std_rep),
            fmt_opt(include_runtime.then_some(r.runtime_s)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `method, target, runtime_s` for every record.
pub fn export_timings(path: &Path, records: &[RepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "target", "runtime_s"])?;
    for r in records {
        w.write_record([r.method.clone(), format!("{:.2}", r.target), format!("{:.6}", r.runtime_s)])?;
    }
    w.flush()?;
    Ok(())
}

/// One row holding the min-REP candidate of each record.
pub fn export_best_grid(path: &Path, records: &[RepRecord]) -> Result<()> {
    let images: Vec<Microstructure> = records.iter().map(|r| r.best.clone()).collect();
    write_grid(path, &images, GRID_GUTTER)
}
