//! Mixture density network from a scalar property to a diagonal Gaussian
//! mixture over an `M`-dimensional target. The trunk is four dense layers
//! where every layer (and the head) reads the input concatenated with all
//! earlier layer outputs.

use std::f64::consts::PI;
use std::path::Path;

use invdes_tensor::nn::{BatchNorm, Dense, ELU_ALPHA};
use invdes_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Track, Var};
use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::gan::BnRun;
use crate::seed::rng_for;

/// Lower bound added to every standard deviation.
pub const SIGMA_EPS: f64 = 1e-6;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct MdnConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub components: usize,
    pub output_dim: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub patience: usize,
    pub val_fraction: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            hidden_layers: 4,
            hidden_width: 16,
            components: 40,
            output_dim: 4,
            batch: 128,
            learning_rate: 1e-3,
            patience: 50,
            val_fraction: 0.1,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl MdnConfig {
    /// `K·(1 + 2M)`: one mixing logit plus a mean and a std per dimension.
    pub fn head_size(&self) -> usize {
        head_size(self.components, self.output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.output_dim == 0 || self.input_dim == 0 {
            return Err(CoreError::invalid("MDN needs K ≥ 1, M ≥ 1 and a non-empty input"));
        }
        if self.batch < 2 {
            return Err(CoreError::invalid("MDN batch must be at least 2"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CoreError::invalid("validation fraction must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

pub fn head_size(k: usize, m: usize) -> usize {
    k * (1 + 2 * m)
}

/// Mixture for one input: `π` (K), `μ` and `σ` (K×M, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub k: usize,
    pub m: usize,
    pub pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        ELU_ALPHA as f64 * x.exp_m1()
    }
}

/// Head layout: `[K logits | K·M means | K·M std pre-activations]`.
fn split_head(row: &[f32], k: usize, m: usize) -> (&[f32], &[f32], &[f32]) {
    let (logits, rest) = row.split_at(k);
    let (mu, s) = rest.split_at(k * m);
    (logits, mu, s)
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let lse = max + logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l as f64 - lse).collect()
}

impl MixtureParams {
    pub fn new(pi: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        let k = pi.len();
        if k == 0 || !mu.len().is_multiple_of(k) || mu.len() != sigma.len() || mu.is_empty() {
            return Err(CoreError::invalid("mixture parameter lengths are inconsistent"));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::invalid("mixture standard deviations must be positive"));
        }
        if pi.iter().any(|&p| !(p >= 0.0)) {
            return Err(CoreError::invalid("mixing weights must be non-negative"));
        }
        Ok(Self {
            k,
            m: mu.len() / k,
            pi,
            mu,
            sigma,
        })
    }

    /// Decodes one head row: softmax weights, linear means, `ELU + 1 + ε` stds.
    pub fn from_head(row: &[f32], k: usize, m: usize) -> Self {
        let (logits, mu, s) = split_head(row, k, m);
        Self {
            k,
            m,
            pi: log_softmax(logits).into_iter().map(f64::exp).collect(),
            mu: mu.iter().map(|&v| v as f64).collect(),
            sigma: s.iter().map(|&v| elu(v as f64) + 1.0 + SIGMA_EPS).collect(),
        }
    }

    fn component_log_density(&self, c: usize, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.m {
            let (mu, sd) = (self.mu[c * self.m + d], self.sigma[c * self.m + d]);
            let u = (z[d] - mu) / sd;
            acc -= 0.5 * u * u + sd.ln() + HALF_LOG_2PI;
        }
        acc
    }

    /// `log Σ_k π_k Π_m N(z_m; μ_km, σ_km)` via log-sum-exp.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.m {
            return Err(CoreError::invalid(format!("point has {} dims, mixture has {}", z.len(), self.m)));
        }
        let terms: Vec<f64> = (0..self.k)
            .map(|c| self.pi[c].ln() + self.component_log_density(c, z))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(CoreError::numerical("mixture density underflows to zero"));
        }
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }

    pub fn density(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_density(z)?.exp())
    }

    /// Picks a component by `π`, then draws each coordinate from its Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = self.k - 1;
        for (i, &p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                c = i;
                break;
            }
        }
        (0..self.m)
            .map(|d| {
                let e: f64 = StandardNormal.sample(rng);
                self.mu[c * self.m + d] + self.sigma[c * self.m + d] * e
            })
            .collect()
    }
}

/// Mean negative log-likelihood of `z` (N×M) under the mixtures encoded in
/// `head` (N×K(1+2M)), together with its gradient w.r.t. `head`.
pub fn mixture_nll(head: &[f32], z: &[f32], n: usize, k: usize, m: usize) -> Result<(f64, Vec<f32>)> {
    let width = head_size(k, m);
    if n == 0 || head.len() != n * width || z.len() != n * m {
        return Err(CoreError::invalid("mixture NLL inputs do not match N, K and M"));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0f32; head.len()];
    let mut log_terms = vec![0.0f64; k];
    let mut sigma = vec![0.0f64; k * m];
    for i in 0..n {
        let row = &head[i * width..(i + 1) * width];
        let zi = &z[i * m..(i + 1) * m];
        let (logits, mu, s) = split_head(row, k, m);
        let log_pi = log_softmax(logits);
        for (sd, &a) in sigma.iter_mut().zip(s) {
            *sd = elu(a as f64) + 1.0 + SIGMA_EPS;
        }
        for c in 0..k {
            let mut acc = log_pi[c];
            for d in 0..m {
                let j = c * m + d;
                let u = (zi[d] as f64 - mu[j] as f64) / sigma[j];
                acc -= 0.5 * u * u + sigma[j].ln() + HALF_LOG_2PI;
            }
            log_terms[c] = acc;
        }
        let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(CoreError::numerical(format!("mixture density underflows for sample {i}")));
        }
        let lse = max + log_terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        total -= lse;
        let g = &mut grad[i * width..(i + 1) * width];
        let (g_logit, rest) = g.split_at_mut(k);
        let (g_mu, g_s) = rest.split_at_mut(k * m);
        for c in 0..k {
            let r = (log_terms[c] - lse).exp();
            g_logit[c] = ((log_pi[c].exp() - r) * inv_n) as f32;
            for d in 0..m {
                let j = c * m + d;
                let diff = zi[d] as f64 - mu[j] as f64;
                let sd = sigma[j];
                g_mu[j] = (-r * diff / (sd * sd) * inv_n) as f32;
                let d_sigma = -r * (diff * diff / (sd * sd * sd) - 1.0 / sd);
                let a = s[j] as f64;
                let d_pre = if a > 0.0 { 1.0 } else { ELU_ALPHA as f64 * a.exp() };
                g_s[j] = (d_sigma * d_pre * inv_n) as f32;
            }
        }
    }
    if !total.is_finite() {
        return Err(CoreError::numerical("mixture NLL is not finite"));
    }
    Ok((total * inv_n, grad))
}

#[derive(Clone, Debug)]
pub struct MdnNet {
    pub store: ParamStore,
    pub config: MdnConfig,
    trunk: Vec<(Dense, BatchNorm)>,
    head: Dense,
}

impl MdnNet {
    pub fn new<R: Rng + ?Sized>(config: MdnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut trunk = Vec::new();
        let mut width = config.input_dim;
        for i in 0..config.hidden_layers {
            let dense = Dense::new(&mut store, &format!("dense{i}"), width, config.hidden_width, rng);
            let bn = BatchNorm::new(&mut store, &format!("dense{i}.bn"), config.hidden_width);
            trunk.push((dense, bn));
            width += config.hidden_width;
        }
        let head = Dense::new(&mut store, "head", width, config.head_size(), rng);
        Ok(Self {
            store,
            config,
            trunk,
            head,
        })
    }

    /// Width of the vector the head consumes.
    pub fn head_inputs(&self) -> usize {
        self.head.inputs
    }

    /// `y` is `N×input_dim`; returns the raw `N×K(1+2M)` head outputs.
    pub fn forward(&mut self, tape: &mut Tape, y: Var, run: BnRun, track: Track) -> Result<Var> {
        let mut features = y;
        for (dense, bn) in &self.trunk {
            let h = dense.forward(tape, &self.store, features, track)?;
            let h = match run {
                BnRun::Train => bn.forward(tape, &mut self.store, h, true, track)?,
                BnRun::BatchStats => bn.forward_batch_stats(tape, &self.store, h, track)?,
                BnRun::Eval => bn.forward_eval(tape, &self.store, h, track)?,
            };
            let h = tape.relu(h)?;
            features = tape.concat_cols(&[features, h])?;
        }
        Ok(self.head.forward(tape, &self.store, features, track)?)
    }

    fn inputs_tensor(&self, ys: &[f64]) -> Result<Tensor> {
        let d = self.config.input_dim;
        if ys.is_empty() || !ys.len().is_multiple_of(d) {
            return Err(CoreError::invalid("input batch does not match input_dim"));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(CoreError::numerical("MDN input is not finite"));
        }
        Ok(Tensor::new(&[ys.len() / d, d], ys.iter().map(|&y| y as f32).collect())?)
    }

    /// Raw head outputs in inference mode.
    pub fn head_outputs(&self, ys: &[f64]) -> Result<Vec<f32>> {
        let t = self.inputs_tensor(ys)?;
        let mut tape = Tape::new();
        let mut net = self.clone();
        let y = tape.input(&t)?;
        let out = net.forward(&mut tape, y, BnRun::Eval, Track::Frozen)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn predict(&self, ys: &[f64]) -> Result<Vec<MixtureParams>> {
        let (k, m) = (self.config.components, self.config.output_dim);
        Ok(self
            .head_outputs(ys)?
            .chunks(head_size(k, m))
            .map(|row| MixtureParams::from_head(row, k, m))
            .collect())
    }

    /// `n` draws from the mixture predicted for the scalar input `y`.
    pub fn sample<R: Rng + ?Sized>(&self, y: f64, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let mix = self.predict(&[y])?.remove(0);
        Ok((0..n).map(|_| mix.sample(rng)).collect())
    }

    /// Mean NLL of `(ys, zs)` in inference mode.
    pub fn nll(&self, ys: &[f64], zs: &[f32]) -> Result<f64> {
        let head = self.head_outputs(ys)?;
        let n = ys.len() / self.config.input_dim;
        Ok(mixture_nll(&head, zs, n, self.config.components, self.config.output_dim)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.store.save(path)?)
    }

    pub fn load(path: &Path, config: MdnConfig) -> Result<Self> {
        let mut net = Self::new(config, &mut rng_for(0, 0))?;
        net.store.load_values(path)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdnHistory {
    /// Validation NLL of the untrained network.
    pub initial_val_nll: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stopped_early: bool,
}

impl MdnHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_nll", "val_nll"])?;
        w.write_record(["0", "", &self.initial_val_nll.to_string()])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_nll.to_string(), e.val_nll.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains on `(ys[i], zs[i·M..(i+1)·M])` pairs with Adam, a held-out
/// validation split and early stopping; returns the best-validation weights.
pub fn train_mdn(ys: &[f64], zs: &[f32], config: &MdnConfig) -> Result<(MdnNet, MdnHistory)> {
    train_mdn_with(ys, zs, config, |_, _| Ok(()))
}

/// As [`train_mdn`], calling `on_epoch` after every epoch with the current
/// (not necessarily best) network.
pub fn train_mdn_with(
    ys: &[f64],
    zs: &[f32],
    config: &MdnConfig,
    mut on_epoch: impl FnMut(usize, &MdnNet) -> Result<()>,
) -> Result<(MdnNet, MdnHistory)> {
    config.validate()?;
    let (d, m) = (config.input_dim, config.output_dim);
    let n = ys.len() / d;
    if ys.len() != n * d || zs.len() != n * m {
        return Err(CoreError::invalid("property and target arrays disagree in length"));
    }
    if n < 2 * config.batch {
        return Err(CoreError::DatasetTooSmall(format!(
            "{n} pairs; MDN training needs at least {} (twice the batch)",
            2 * config.batch
        )));
    }
    let mut rng = rng_for(config.seed, 0);
    let mut net = MdnNet::new(config.clone(), &mut rng)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<f32>) {
        let mut y = Vec::with_capacity(idx.len() * d);
        let mut z = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            y.extend_from_slice(&ys[i * d..(i + 1) * d]);
            z.extend_from_slice(&zs[i * m..(i + 1) * m]);
        }
        (y, z)
    };
    let (val_y, val_z) = gather(val_idx);
    let mut train_idx = train_idx.to_vec();

    let mut opt = Adam::new(&net.store, AdamConfig::with_lr(config.learning_rate));
    let initial = net.nll(&val_y, &val_z)?;
    let mut history = MdnHistory {
        initial_val_nll: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_nll: initial,
        stopped_early: false,
    };
    let mut best = net.store.clone();
    let mut wait = 0usize;
    let mut tape = Tape::new();
    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in train_idx.chunks(config.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let (by, bz) = gather(chunk);
            tape.reset();
            let y = tape.input(&Tensor::new(&[chunk.len(), d], by.iter().map(|&v| v as f32).collect())?)?;
            let head = net.forward(&mut tape, y, BnRun::Train, Track::Params)?;
            let (loss, grad) = mixture_nll(tape.value(head), &bz, chunk.len(), config.components, m)?;
            let l = tape.fused_scalar(&[head], loss, vec![grad])?;
            let grads = tape.backward(l)?;
            net.store.accumulate(&grads);
            opt.step(&mut net.store)?;
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let val = net.nll(&val_y, &val_z)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_nll: sum / count as f64,
            val_nll: val,
        });
        on_epoch(epoch, &net)?;
        if val < history.best_val_nll {
            history.best_val_nll = val;
            history.best_epoch = epoch;
            best.copy_values_from(&net.store)?;
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    net.store.copy_values_from(&best)?;
    Ok((net, history))
}

/// Density of one diagonal Gaussian, straight from the formula.
pub fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}
