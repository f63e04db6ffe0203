//! Bayesian optimization over a box with a GP surrogate and expected improvement.

use rand::RngExt;

use super::gp::{expected_improvement, GaussianProcess};
use crate::error::{CoreError, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct BoConfig {
    pub init: usize,
    pub iterations: usize,
    pub candidates: usize,
    pub lower: f64,
    pub upper: f64,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            init: 10,
            iterations: 40,
            candidates: 1024,
            lower: -1.0,
            upper: 1.0,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init == 0 || self.candidates == 0 {
            return Err(CoreError::invalid("BO needs at least one initial point and one candidate"));
        }
        if !(self.lower < self.upper) {
            return Err(CoreError::invalid("BO bounds must satisfy lower < upper"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoTraceRow {
    pub evaluation: usize,
    pub point: Vec<f64>,
    pub objective: f64,
    pub incumbent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoResult {
    pub best_x: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<BoTraceRow>,
}

/// Minimizes `objective` over `[lower, upper]^dim`.
pub fn minimize(dim: usize, config: &BoConfig, mut objective: impl FnMut(&[f64]) -> Result<f64>) -> Result<BoResult> {
    config.validate()?;
    if dim == 0 {
        return Err(CoreError::invalid("BO dimension must be positive"));
    }
    let mut init_rng = rng_for(config.seed, 0);
    let mut cand_rng = rng_for(config.seed, 1);
    let (lo, hi) = (config.lower, config.upper);
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut trace = Vec::new();
    let mut record = |x: Vec<f64>, points: &mut Vec<Vec<f64>>, values: &mut Vec<f64>| -> Result<()> {
        let v = objective(&x)?;
        if !v.is_finite() {
            return Err(CoreError::numerical("BO objective returned a non-finite value"));
        }
        let incumbent = values.iter().copied().fold(v, f64::min);
        trace.push(BoTraceRow {
            evaluation: values.len() + 1,
            point: x.clone(),
            objective: v,
            incumbent,
        });
        points.push(x);
        values.push(v);
        Ok(())
    };
    for _ in 0..config.init {
        let x = (0..dim).map(|_| init_rng.random_range(lo..hi)).collect();
        record(x, &mut points, &mut values)?;
    }
    for _ in 0..config.iterations {
        let gp = GaussianProcess::fit(&points, &values)?;
        let best = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut chosen: Option<(f64, Vec<f64>)> = None;
        for _ in 0..config.candidates {
            let c: Vec<f64> = (0..dim).map(|_| cand_rng.random_range(lo..hi)).collect();
            let (m, v) = gp.predict(&c);
            let ei = expected_improvement(m, v, best);
            if chosen.as_ref().is_none_or(|(e, _)| ei > *e) {
                chosen = Some((ei, c));
            }
        }
        let (_, x) = chosen.expect("at least one candidate");
        record(x, &mut points, &mut values)?;
    }
    let (best_i, &best_value) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    Ok(BoResult {
        best_x: points[best_i].clone(),
        best_value,
        trace,
    })
}

/// Writes `evaluation, z_0..z_{d-1}, objective, incumbent`.
pub fn write_trace(path: &std::path::Path, trace: &[BoTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = trace.first().map_or(0, |r| r.point.len());
    let mut header = vec!["evaluation".to_string()];
    header.extend((0..dim).map(|i| format!("z_{i}")));
    header.extend(["objective".to_string(), "incumbent".to_string()]);
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![r.evaluation.to_string()];
        row.extend(r.point.iter().map(|v| v.to_string()));
        row.extend([r.objective.to_string(), r.incumbent.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
