//! Surrogate optical-absorption simulator. Two sign-binarized features,
//! volume fraction and interface density, feed a fixed quadratic-plus-linear
//! map onto `[0.5, 0.8]`.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::grf::read_manifest;
use crate::micro::Microstructure;

pub const OFFSET: f64 = 0.5;
pub const SCALE: f64 = 0.3;
pub const VF_WEIGHT: f64 = 0.6;
pub const INTERFACE_WEIGHT: f64 = 0.4;

/// Share of pixels in phase B.
pub fn volume_fraction(m: &Microstructure) -> f64 {
    m.phases().filter(|&b| b).count() as f64 / (m.side() * m.side()) as f64
}

/// Share of horizontally or vertically adjacent pixel pairs whose phases
/// differ, out of the `2·s·(s−1)` such pairs (no wrap-around).
pub fn interface_density(m: &Microstructure) -> f64 {
    let s = m.side();
    if s < 2 {
        return 0.0;
    }
    let mut cut = 0usize;
    for r in 0..s {
        for c in 0..s {
            let p = m.phase(r, c);
            if c + 1 < s && p != m.phase(r, c + 1) {
                cut += 1;
            }
            if r + 1 < s && p != m.phase(r + 1, c) {
                cut += 1;
            }
        }
    }
    cut as f64 / (2 * s * (s - 1)) as f64
}

/// `0.5 + 0.3·(0.6·4·vf·(1−vf) + 0.4·interface_density)`
pub fn absorption_from_features(vf: f64, interface: f64) -> f64 {
    OFFSET + SCALE * (VF_WEIGHT * 4.0 * vf * (1.0 - vf) + INTERFACE_WEIGHT * interface)
}

pub fn absorption(m: &Microstructure) -> f64 {
    absorption_from_features(volume_fraction(m), interface_density(m))
}

/// Forward simulator seen by the inversion methods and the evaluator.
pub trait PropertySimulator: Send + Sync {
    fn simulate(&self, m: &Microstructure) -> f64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SurrogateAbsorption;

impl PropertySimulator for SurrogateAbsorption {
    fn simulate(&self, m: &Microstructure) -> f64 {
        absorption(m)
    }
}

/// Reads a dataset manifest and writes it back to `out` with a `y` column.
pub fn simulate_manifest(dataset_dir: &Path, out: &Path, sim: &dyn PropertySimulator) -> Result<Vec<f64>> {
    let entries = read_manifest(dataset_dir)?;
    let mut r = csv::Reader::from_path(dataset_dir.join(crate::grf::MANIFEST))?;
    let mut header = r.headers()?.clone();
    header.push_field("y");
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(&header)?;
    let mut ys = Vec::with_capacity(entries.len());
    for (rec, e) in r.records().zip(&entries) {
        let mut rec = rec?;
        let y = sim.simulate(&Microstructure::read_pgm(&e.file)?);
        if !y.is_finite() {
            return Err(CoreError::numerical(format!("simulator returned {y} for {}", e.file.display())));
        }
        rec.push_field(&y.to_string());
        w.write_record(&rec)?;
        ys.push(y);
    }
    w.flush()?;
    Ok(ys)
}
