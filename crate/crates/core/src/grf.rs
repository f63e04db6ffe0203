//! Thresholded Gaussian random fields. White noise is filtered in the
//! frequency domain by a periodic isotropic Gaussian kernel, standardized,
//! and cut at the empirical quantile that gives an exact phase-B count.

use std::path::{Path, PathBuf};

use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{CoreError, Result};
use crate::micro::Microstructure;
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrfParams {
    pub side: usize,
    pub correlation_length: f64,
    pub volume_fraction: f64,
    pub seed: u64,
}

impl GrfParams {
    pub fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(CoreError::invalid(format!("image side {} is below 4", self.side)));
        }
        if !(self.volume_fraction > 0.0 && self.volume_fraction < 1.0) {
            return Err(CoreError::invalid(format!(
                "volume fraction {} outside (0, 1)",
                self.volume_fraction
            )));
        }
        let half = self.side as f64 / 2.0;
        if !(self.correlation_length > 0.0 && self.correlation_length <= half) {
            return Err(CoreError::invalid(format!(
                "correlation length {} outside (0, {half}]",
                self.correlation_length
            )));
        }
        Ok(())
    }
}

/// Periodic Gaussian kernel `exp(−d²/2ℓ²)` with wrap-around distances.
pub fn gaussian_kernel(side: usize, length: f64) -> Vec<f64> {
    let wrap = |i: usize| i.min(side - i) as f64;
    let mut k = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let d2 = wrap(r).powi(2) + wrap(c).powi(2);
            k[r * side + c] = (-d2 / (2.0 * length * length)).exp();
        }
    }
    k
}

/// White noise for `params.seed`, in row-major order.
pub fn white_noise(side: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, 0);
    (0..side * side).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn fft2(data: &mut [Complex64], side: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(side)
    } else {
        planner.plan_fft_forward(side)
    };
    fft.process(data);
    let mut col = vec![Complex64::default(); side];
    for c in 0..side {
        for r in 0..side {
            col[r] = data[r * side + c];
        }
        fft.process(&mut col);
        for r in 0..side {
            data[r * side + c] = col[r];
        }
    }
}

/// Circular convolution of two square arrays through the 2-D FFT.
pub fn circular_convolve(a: &[f64], b: &[f64], side: usize) -> Vec<f64> {
    let to_c = |v: &[f64]| v.iter().map(|&x| Complex64::new(x, 0.0)).collect::<Vec<_>>();
    let (mut fa, mut fb) = (to_c(a), to_c(b));
    fft2(&mut fa, side, false);
    fft2(&mut fb, side, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    fft2(&mut fa, side, true);
    let scale = 1.0 / (side * side) as f64;
    fa.iter().map(|z| z.re * scale).collect()
}

/// Shifts and scales to zero sample mean and unit (population) std.
pub fn standardize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    for x in field.iter_mut() {
        *x = (*x - mean) * inv;
    }
}

/// Standardized correlated field of `side×side` values.
pub fn sample_field(params: &GrfParams) -> Result<Vec<f64>> {
    params.validate()?;
    let noise = white_noise(params.side, params.seed);
    let kernel = gaussian_kernel(params.side, params.correlation_length);
    let mut field = circular_convolve(&noise, &kernel, params.side);
    standardize(&mut field);
    Ok(field)
}

/// Number of phase-B pixels for a target fraction over `n` pixels.
pub fn positive_count(vf: f64, n: usize) -> usize {
    ((vf * n as f64).round() as usize).min(n)
}

/// Marks the `round(vf·n)` largest values as phase B. Equal values are
/// ordered by pixel index, so the later index wins a tie. Returns the image
/// and the threshold, i.e. the smallest phase-B value (or +∞ if none).
pub fn threshold(field: &[f64], side: usize, vf: f64) -> Result<(Microstructure, f64)> {
    if field.len() != side * side {
        return Err(CoreError::invalid("field length does not match side²"));
    }
    if field.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::numerical("field contains non-finite values"));
    }
    if !(0.0..=1.0).contains(&vf) {
        return Err(CoreError::invalid(format!("volume fraction {vf} outside [0, 1]")));
    }
    let n = field.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let k = positive_count(vf, n);
    let mut phases = vec![false; n];
    for &i in &order[n - k..] {
        phases[i] = true;
    }
    let cut = if k == 0 { f64::INFINITY } else { field[order[n - k]] };
    Ok((Microstructure::from_phases(side, &phases)?, cut))
}

pub fn synthesize(params: &GrfParams) -> Result<Microstructure> {
    let field = sample_field(params)?;
    Ok(threshold(&field, params.side, params.volume_fraction)?.0)
}

/// Ranges the dataset parameters are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct GrfDistribution {
    pub side: usize,
    pub vf_min: f64,
    pub vf_max: f64,
    pub correlation_lengths: Vec<f64>,
}

impl GrfDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.correlation_lengths.is_empty() {
            return Err(CoreError::invalid("no correlation lengths configured"));
        }
        if !(self.vf_min < self.vf_max && self.vf_min > 0.0 && self.vf_max < 1.0) {
            return Err(CoreError::invalid(format!(
                "volume fraction range [{}, {}] is empty or leaves (0, 1)",
                self.vf_min, self.vf_max
            )));
        }
        for &l in &self.correlation_lengths {
            GrfParams {
                side: self.side,
                correlation_length: l,
                volume_fraction: 0.5,
                seed: 0,
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, seed: u64) -> GrfParams {
        let vf = rng.random_range(self.vf_min..self.vf_max);
        let l = self.correlation_lengths[rng.random_range(0..self.correlation_lengths.len())];
        GrfParams {
            side: self.side,
            correlation_length: l,
            volume_fraction: vf,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrfSample {
    pub id: usize,
    pub params: GrfParams,
    pub image: Microstructure,
}

/// Sample `i` uses the seed derived from `(master, i)` for both its
/// parameter draw and its noise, so any subset can be regenerated alone.
pub fn generate_dataset(n: usize, dist: &GrfDistribution, master_seed: u64) -> Result<Vec<GrfSample>> {
    if n == 0 {
        return Err(CoreError::invalid("dataset size must be at least 1"));
    }
    dist.validate()?;
    (0..n)
        .map(|id| {
            let seed = derive_seed(master_seed, id as u64);
            let mut rng = rng_for(seed, 1);
            let params = dist.draw(&mut rng, seed);
            Ok(GrfSample {
                id,
                params,
                image: synthesize(&params)?,
            })
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.csv";

fn image_name(id: usize) -> String {
    format!("images/{id:05}.pgm")
}

/// Writes `images/NNNNN.pgm` and `manifest.csv` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[GrfSample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    w.write_record(["id", "seed", "vf", "correlation_length", "file"])?;
    for s in samples {
        let file = image_name(s.id);
        s.image.write_pgm(&dir.join(&file))?;
        w.write_record([
            s.id.to_string(),
            s.params.seed.to_string(),
            s.params.volume_fraction.to_string(),
            s.params.correlation_length.to_string(),
            file,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Manifest row plus the resolved image path.
#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub id: usize,
    pub seed: u64,
    pub vf: f64,
    pub correlation_length: f64,
    pub file: PathBuf,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path)?;
    let bad = |reason: String| CoreError::Format {
        path: path.clone(),
        reason,
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 5 {
            return Err(bad(format!("row has {} fields, expected 5", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("field {i}: {e}")));
        out.push(ManifestEntry {
            id: rec[0].parse().map_err(|e| bad(format!("id: {e}")))?,
            seed: rec[1].parse().map_err(|e| bad(format!("seed: {e}")))?,
            vf: num(2)?,
            correlation_length: num(3)?,
            file: dir.join(&rec[4]),
        });
    }
    Ok(out)
}

pub fn load_images(dir: &Path) -> Result<Vec<Microstructure>> {
    read_manifest(dir)?
        .iter()
        .map(|e| Microstructure::read_pgm(&e.file))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(side: usize, l: f64, vf: f64, seed: u64) -> GrfParams {
        GrfParams {
            side,
            correlation_length: l,
            volume_fraction: vf,
            seed,
        }
    }

    #[test]
    fn standardized_moments() {
        let f = sample_field(&params(64, 4.0, 0.5, 7)).unwrap();
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let std = (f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05 && (std - 1.0).abs() < 0.05);
    }

    #[test]
    fn same_seed_same_field() {
        let a = sample_field(&params(32, 2.0, 0.5, 3)).unwrap();
        let b = sample_field(&params(32, 2.0, 0.5, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(sample_field(&params(3, 1.0, 0.5, 0)).is_err());
        assert!(sample_field(&params(16, 9.0, 0.5, 0)).is_err());
        assert!(sample_field(&params(16, 0.0, 0.5, 0)).is_err());
        assert!(sample_field(&params(16, 2.0, 1.0, 0)).is_err());
        assert!(sample_field(&params(16, 2.0, 0.0, 0)).is_err());
    }

    #[test]
    fn threshold_counts() {
        let f = sample_field(&params(16, 2.0, 0.5, 1)).unwrap();
        let (m, _) = threshold(&f, 16, 0.5).unwrap();
        assert_eq!(m.phases().filter(|&b| b).count(), 128);
        let f4: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64).collect();
        let (m, _) = threshold(&f4, 4, 0.25).unwrap();
        assert_eq!(m.phases().filter(|&b| b).count(), 4);
    }

    #[test]
    fn ties_go_to_later_index() {
        let (m, cut) = threshold(&[0.0; 16], 4, 0.25).unwrap();
        let on: Vec<usize> = m.phases().enumerate().filter(|p| p.1).map(|p| p.0).collect();
        assert_eq!(on, vec![12, 13, 14, 15]);
        assert_eq!(cut, 0.0);
    }

    #[test]
    fn empty_distribution_rejected() {
        let d = GrfDistribution {
            side: 16,
            vf_min: 0.3,
            vf_max: 0.7,
            correlation_lengths: vec![],
        };
        assert!(generate_dataset(1, &d, 0).is_err());
        let d = GrfDistribution {
            correlation_lengths: vec![2.0],
            vf_min: 0.5,
            vf_max: 0.5,
            ..d
        };
        assert!(generate_dataset(1, &d, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = GrfDistribution {
            side: 8,
            vf_min: 0.3,
            vf_max: 0.7,
            correlation_lengths: vec![1.0, 2.0],
        };
        let set = generate_dataset(3, &d, 5).unwrap();
        write_dataset(dir.path(), &set).unwrap();
        let entries = read_manifest(dir.path()).unwrap();
        assert_eq!(entries.len(), 3);
        for (e, s) in entries.iter().zip(&set) {
            assert_eq!(e.seed, s.params.seed);
            assert_eq!(e.vf, s.params.volume_fraction);
        }
        assert_eq!(load_images(dir.path()).unwrap()[2], set[2].image);
    }
}
