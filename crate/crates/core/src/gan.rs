//! Fully convolutional DCGAN. The generator turns a 1-channel `s×s` latent
//! map into a `32s×32s` image through five stride-2 transposed convolutions;
//! the discriminator mirrors it with four stride-2 convolutions and a final
//! convolution spanning the remaining `2s×2s` feature map.

use std::path::Path;

use invdes_tensor::nn::{BatchNorm, Conv2d, Deconv2d, LEAKY_SLOPE};
use invdes_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Track, Var};
use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::micro::Microstructure;
use crate::property::PropertySimulator;
use crate::seed::rng_for;

pub const GEN_FILTERS: [usize; 5] = [128, 64, 32, 16, 1];
pub const DISC_FILTERS: [usize; 5] = [16, 32, 64, 128, 1];
pub const UPSCALE: usize = 32;
/// Clamp applied to discriminator scores before taking logs.
pub const SCORE_EPS: f64 = 1e-7;
/// Discriminator layer (1-based) whose features feed the style loss.
pub const STYLE_LAYER: usize = 2;

/// A point in the generator's latent space: an `s×s` map, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVec {
    side: usize,
    values: Vec<f32>,
}

impl LatentVec {
    pub fn new(side: usize, values: Vec<f32>) -> Result<Self> {
        if side == 0 || values.len() != side * side {
            return Err(CoreError::invalid(format!(
                "latent side {side} needs {} values, got {}",
                side * side,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numerical("latent vector is not finite"));
        }
        Ok(Self { side, values })
    }

    /// Each entry uniform on `[-1, 1]`.
    pub fn sample_prior<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Self {
        let values = (0..side * side).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        Self { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// How batch normalization layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnRun {
    /// Batch statistics, running averages updated.
    Train,
    /// Batch statistics, running averages untouched.
    BatchStats,
    /// Running averages.
    Eval,
}

fn run_bn(bn: &BatchNorm, tape: &mut Tape, store: &mut ParamStore, x: Var, run: BnRun, track: Track) -> Result<Var> {
    Ok(match run {
        BnRun::Train => bn.forward(tape, store, x, true, track)?,
        BnRun::BatchStats => bn.forward_batch_stats(tape, store, x, track)?,
        BnRun::Eval => bn.forward_eval(tape, store, x, track)?,
    })
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub store: ParamStore,
    latent_side: usize,
    layers: Vec<Deconv2d>,
    norms: Vec<BatchNorm>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(latent_side: usize, rng: &mut R) -> Result<Self> {
        if latent_side == 0 {
            return Err(CoreError::invalid("latent side must be positive"));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for (i, &cout) in GEN_FILTERS.iter().enumerate() {
            let last = i + 1 == GEN_FILTERS.len();
            layers.push(Deconv2d::new(&mut store, &format!("g{i}"), cin, cout, 4, 2, 1, last, rng));
            if !last {
                norms.push(BatchNorm::new(&mut store, &format!("g{i}.bn"), cout));
            }
            cin = cout;
        }
        Ok(Self {
            store,
            latent_side,
            layers,
            norms,
        })
    }

    pub fn latent_side(&self) -> usize {
        self.latent_side
    }

    pub fn image_side(&self) -> usize {
        self.latent_side * UPSCALE
    }

    /// `z` is `N×1×s×s`; the result is `N×1×32s×32s` in `(-1, 1)`.
    pub fn forward(&mut self, tape: &mut Tape, z: Var, run: BnRun, track: Track) -> Result<Var> {
        let mut h = z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.store, h, track)?;
            if let Some(bn) = self.norms.get(i) {
                h = run_bn(bn, tape, &mut self.store, h, run, track)?;
                h = tape.relu(h)?;
            }
        }
        Ok(tape.tanh(h)?)
    }

    fn latent_tensor(&self, zs: &[LatentVec]) -> Result<Tensor> {
        let s = self.latent_side;
        let mut data = Vec::with_capacity(zs.len() * s * s);
        for z in zs {
            if z.side() != s {
                return Err(CoreError::invalid(format!(
                    "latent side {} does not match generator side {s}",
                    z.side()
                )));
            }
            data.extend_from_slice(z.values());
        }
        Ok(Tensor::new(&[zs.len(), 1, s, s], data)?)
    }

    /// Inference-mode images for a batch of latents.
    pub fn generate_batch(&self, zs: &[LatentVec]) -> Result<Vec<Microstructure>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.latent_tensor(zs)?;
        let mut tape = Tape::new();
        let mut g = self.clone();
        let z = tape.input(&t)?;
        let out = g.forward(&mut tape, z, BnRun::Eval, Track::Frozen)?;
        let side = self.image_side();
        tape.value(out)
            .chunks(side * side)
            .map(|px| Microstructure::new(side, px.to_vec()))
            .collect()
    }

    pub fn generate(&self, z: &LatentVec) -> Result<Microstructure> {
        Ok(self.generate_batch(std::slice::from_ref(z))?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.store.save(path)?)
    }

    /// Builds a generator of the given side and loads weights from `path`.
    pub fn load(path: &Path, latent_side: usize) -> Result<Self> {
        let mut g = Self::new(latent_side, &mut rng_for(0, 0))?;
        g.store.load_values(path)?;
        Ok(g)
    }
}

/// Discriminator scores plus the features used by the style loss.
pub struct DiscOutput {
    pub scores: Var,
    pub style_features: Var,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    image_side: usize,
    layers: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(image_side: usize, rng: &mut R) -> Result<Self> {
        if image_side == 0 || !image_side.is_multiple_of(16) {
            return Err(CoreError::invalid(format!(
                "discriminator input side {image_side} is not a positive multiple of 16"
            )));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 1;
        for (i, &cout) in DISC_FILTERS.iter().enumerate() {
            if i + 1 == DISC_FILTERS.len() {
                let k = image_side / 16;
                layers.push(Conv2d::new(&mut store, &format!("d{i}"), cin, cout, k, 1, 0, true, rng));
            } else {
                layers.push(Conv2d::new(&mut store, &format!("d{i}"), cin, cout, 4, 2, 1, false, rng));
                norms.push(BatchNorm::new(&mut store, &format!("d{i}.bn"), cout));
            }
            cin = cout;
        }
        Ok(Self {
            store,
            image_side,
            layers,
            norms,
        })
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    /// `x` is `N×1×S×S`; scores come back as a length-`N` vector in `(0, 1)`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, run: BnRun, track: Track) -> Result<DiscOutput> {
        let n = tape.shape(x)[0];
        let mut h = x;
        let mut style = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.store, h, track)?;
            if let Some(bn) = self.norms.get(i) {
                h = run_bn(bn, tape, &mut self.store, h, run, track)?;
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
                if i + 1 == STYLE_LAYER {
                    style = Some(h);
                }
            }
        }
        let logits = tape.reshape(h, &[n])?;
        Ok(DiscOutput {
            scores: tape.sigmoid(logits)?,
            style_features: style.expect("style layer exists"),
        })
    }

    pub fn score(&self, images: &[Microstructure]) -> Result<Vec<f32>> {
        let t = images_tensor(images)?;
        let mut tape = Tape::new();
        let mut d = self.clone();
        let x = tape.input(&t)?;
        let out = d.forward(&mut tape, x, BnRun::Eval, Track::Frozen)?;
        Ok(tape.value(out.scores).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.store.save(path)?)
    }

    pub fn load(path: &Path, image_side: usize) -> Result<Self> {
        let mut d = Self::new(image_side, &mut rng_for(0, 0))?;
        d.store.load_values(path)?;
        Ok(d)
    }
}

/// Stacks images into an `N×1×S×S` tensor.
pub fn images_tensor(images: &[Microstructure]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(CoreError::invalid("empty image batch"));
    };
    let s = first.side();
    let mut data = Vec::with_capacity(images.len() * s * s);
    for m in images {
        if m.side() != s {
            return Err(CoreError::invalid("images in a batch must share a side"));
        }
        data.extend_from_slice(m.pixels());
    }
    Ok(Tensor::new(&[images.len(), 1, s, s], data)?)
}

/// Adversarial losses and their gradients w.r.t. the scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLosses {
    /// `−[mean log D(x) + mean log(1 − D(G(z)))]`
    pub loss_d: f64,
    /// Non-saturating `−mean log D(G(z))`.
    pub loss_g: f64,
    /// Minimax value `mean log D(x) + mean log(1 − D(G(z)))`.
    pub value: f64,
    pub d_loss_d_real: Vec<f32>,
    pub d_loss_d_fake: Vec<f32>,
    pub g_loss_d_fake: Vec<f32>,
}

pub fn adversarial_losses(d_real: &[f32], d_fake: &[f32]) -> Result<AdversarialLosses> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(CoreError::invalid("adversarial losses need at least one score per side"));
    }
    if let Some(s) = d_real.iter().chain(d_fake).find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(CoreError::invalid(format!("discriminator score {s} outside (0, 1)")));
    }
    let clamp = |s: f32| (s as f64).clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let inside = |s: f32| (SCORE_EPS..=1.0 - SCORE_EPS).contains(&(s as f64));
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let log_real = d_real.iter().map(|&s| clamp(s).ln()).sum::<f64>() / nr;
    let log_not_fake = d_fake.iter().map(|&s| (1.0 - clamp(s)).ln()).sum::<f64>() / nf;
    let log_fake = d_fake.iter().map(|&s| clamp(s).ln()).sum::<f64>() / nf;
    let grad = |s: f32, g: f64| if inside(s) { g as f32 } else { 0.0 };
    Ok(AdversarialLosses {
        loss_d: -(log_real + log_not_fake),
        loss_g: -log_fake,
        value: log_real + log_not_fake,
        d_loss_d_real: d_real.iter().map(|&s| grad(s, -1.0 / (nr * clamp(s)))).collect(),
        d_loss_d_fake: d_fake.iter().map(|&s| grad(s, 1.0 / (nf * (1.0 - clamp(s))))).collect(),
        g_loss_d_fake: d_fake.iter().map(|&s| grad(s, -1.0 / (nf * clamp(s)))).collect(),
    })
}

/// Collapse penalty `mean_{i<j} relu(τ − r_ij)` with
/// `r_ij = mean|x_i − x_j| / mean|z_i − z_j|`, and its gradient w.r.t. the
/// flattened images. Pairs with identical latents are skipped.
pub fn collapse_loss(images: &[f32], latents: &[f32], batch: usize, tau: f64) -> Result<(f64, Vec<f32>)> {
    if batch < 2 {
        return Err(CoreError::invalid("collapse loss needs a batch of at least 2"));
    }
    let dx = images.len() / batch;
    let dz = latents.len() / batch;
    let mut grad = vec![0.0f64; images.len()];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..batch {
        for j in i + 1..batch {
            let zi = &latents[i * dz..(i + 1) * dz];
            let zj = &latents[j * dz..(j + 1) * dz];
            let zd = zi.iter().zip(zj).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / dz as f64;
            if zd == 0.0 {
                continue;
            }
            pairs += 1;
            let xi = &images[i * dx..(i + 1) * dx];
            let xj = &images[j * dx..(j + 1) * dx];
            let xd = xi.iter().zip(xj).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / dx as f64;
            let gap = tau - xd / zd;
            if gap > 0.0 {
                total += gap;
                let scale = -1.0 / (dx as f64 * zd);
                for p in 0..dx {
                    let s = (xi[p] - xj[p]).signum() as f64 * (xi[p] != xj[p]) as u8 as f64;
                    grad[i * dx + p] += scale * s;
                    grad[j * dx + p] -= scale * s;
                }
            }
        }
    }
    if pairs == 0 {
        return Ok((0.0, vec![0.0; images.len()]));
    }
    let inv = 1.0 / pairs as f64;
    Ok((total * inv, grad.iter().map(|g| (g * inv) as f32).collect()))
}

/// Batch-mean Gram matrix `(1/(N·HW)) Σ_n F_n F_nᵀ` of `N×C×H×W` features.
pub fn gram(features: &[f32], batch: usize, channels: usize) -> Vec<f64> {
    let hw = features.len() / (batch * channels);
    let mut g = vec![0.0f64; channels * channels];
    for n in 0..batch {
        let f = &features[n * channels * hw..(n + 1) * channels * hw];
        for a in 0..channels {
            for b in a..channels {
                let s: f64 = (0..hw).map(|p| f[a * hw + p] as f64 * f[b * hw + p] as f64).sum();
                g[a * channels + b] += s;
            }
        }
    }
    let norm = 1.0 / (batch * hw) as f64;
    for a in 0..channels {
        for b in a..channels {
            g[a * channels + b] *= norm;
            g[b * channels + a] = g[a * channels + b];
        }
    }
    g
}

/// Style penalty: mean squared difference between the Gram matrices of
/// fake and real features, with its gradient w.r.t. the fake features.
pub fn style_loss(fake: &[f32], fake_batch: usize, real_gram: &[f64], channels: usize) -> (f64, Vec<f32>) {
    let gf = gram(fake, fake_batch, channels);
    let c2 = (channels * channels) as f64;
    let diff: Vec<f64> = gf.iter().zip(real_gram).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / c2;
    let hw = fake.len() / (fake_batch * channels);
    let norm = 1.0 / (fake_batch * hw) as f64;
    let mut grad = vec![0.0f32; fake.len()];
    // dL/dF[n,a,p] = norm · Σ_b (dL/dG[a,b] + dL/dG[b,a]) · F[n,b,p], and dL/dG is symmetric.
    for n in 0..fake_batch {
        let base = n * channels * hw;
        for a in 0..channels {
            for p in 0..hw {
                let s: f64 = (0..channels)
                    .map(|b| 4.0 * diff[a * channels + b] / c2 * fake[base + b * hw + p] as f64)
                    .sum();
                grad[base + a * hw + p] = (s * norm) as f32;
            }
        }
    }
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub latent_side: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub collapse_weight: f64,
    pub style_weight: f64,
    pub collapse_tau: f64,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_side: 2,
            steps: 2000,
            batch: 64,
            learning_rate: 2e-4,
            beta1: 0.9,
            collapse_weight: 0.1,
            style_weight: 0.1,
            collapse_tau: 0.1,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_side == 0 {
            return Err(CoreError::invalid("latent side must be positive"));
        }
        if self.batch < 2 {
            return Err(CoreError::invalid("GAN batch must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || self.collapse_weight < 0.0 || self.style_weight < 0.0 {
            return Err(CoreError::invalid("learning rate must be positive and loss weights non-negative"));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct GanStep {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub value: f64,
    pub collapse: f64,
    pub style: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

pub struct GanTrainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub config: GanConfig,
    pub history: Vec<GanStep>,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

impl GanTrainer {
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, 0);
        let generator = Generator::new(config.latent_side, &mut rng)?;
        let discriminator = Discriminator::new(generator.image_side(), &mut rng)?;
        let adam = AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            ..AdamConfig::default()
        };
        Ok(Self {
            opt_g: Adam::new(&generator.store, adam),
            opt_d: Adam::new(&discriminator.store, adam),
            generator,
            discriminator,
            history: Vec::new(),
            rng: rng_for(config.seed, 1),
            config,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.history.len()
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, data: &[Microstructure]) -> Result<GanStep> {
        let side = self.generator.image_side();
        if data.is_empty() {
            return Err(CoreError::DatasetTooSmall("GAN training set is empty".into()));
        }
        if data.iter().any(|m| m.side() != side) {
            return Err(CoreError::invalid(format!("training images must be {side}×{side}")));
        }
        let b = self.config.batch;
        let real: Vec<Microstructure> = (0..b).map(|_| data[self.rng.random_range(0..data.len())].clone()).collect();
        let zs: Vec<LatentVec> = (0..b)
            .map(|_| LatentVec::sample_prior(self.config.latent_side, &mut self.rng))
            .collect();
        let real_t = images_tensor(&real)?;
        let z_t = self.generator.latent_tensor(&zs)?;

        // Real and fake images go through the discriminator as one batch so
        // that its batch normalization sees both; normalizing them apart would
        // hide any global contrast or offset difference between the two.
        let mut tape = Tape::new();
        let z = tape.input(&z_t)?;
        let fake = self.generator.forward(&mut tape, z, BnRun::Train, Track::Frozen)?;
        let fake_t = tape.to_tensor(fake);
        let xr = tape.input(&real_t)?;
        let xf = tape.input(&fake_t)?;
        let x = tape.concat_rows(&[xr, xf])?;
        let out = self.discriminator.forward(&mut tape, x, BnRun::Train, Track::Params)?;
        let scores = tape.value(out.scores).to_vec();
        let (sr, sf) = scores.split_at(b);
        let (sr, sf) = (sr.to_vec(), sf.to_vec());
        let feats = tape.value(out.style_features);
        let channels = tape.shape(out.style_features)[1];
        let real_feats = feats[..feats.len() / 2].to_vec();
        let adv = adversarial_losses(&sr, &sf)?;
        let loss = tape.fused_scalar(&[out.scores], adv.loss_d, vec![[adv.d_loss_d_real.clone(), adv.d_loss_d_fake.clone()].concat()])?;
        let grads = tape.backward(loss)?;
        self.discriminator.store.accumulate(&grads);
        self.opt_d.step(&mut self.discriminator.store)?;

        // Generator update through the refreshed discriminator.
        tape.reset();
        let z = tape.input(&z_t)?;
        let fake = self.generator.forward(&mut tape, z, BnRun::BatchStats, Track::Params)?;
        let xr = tape.input(&real_t)?;
        let x = tape.concat_rows(&[xr, fake])?;
        let out = self.discriminator.forward(&mut tape, x, BnRun::BatchStats, Track::Frozen)?;
        let sf2 = tape.value(out.scores)[b..].to_vec();
        let adv_g = adversarial_losses(&sr, &sf2)?;
        let g_scores = [vec![0.0; b], adv_g.g_loss_d_fake.clone()].concat();
        let mut terms = vec![tape.fused_scalar(&[out.scores], adv_g.loss_g, vec![g_scores])?];
        let mut collapse = 0.0;
        if self.config.collapse_weight > 0.0 {
            let zflat: Vec<f32> = zs.iter().flat_map(|z| z.values().iter().copied()).collect();
            let (c, g) = collapse_loss(tape.value(fake), &zflat, b, self.config.collapse_tau)?;
            collapse = c;
            let w = self.config.collapse_weight;
            let g = g.iter().map(|v| v * w as f32).collect();
            terms.push(tape.fused_scalar(&[fake], c * w, vec![g])?);
        }
        let mut style = 0.0;
        if self.config.style_weight > 0.0 {
            let real_gram = gram(&real_feats, b, channels);
            let feats = tape.value(out.style_features);
            let half = feats.len() / 2;
            let (s, g) = style_loss(&feats[half..], b, &real_gram, channels);
            style = s;
            let w = self.config.style_weight;
            let g = [vec![0.0; half], g.iter().map(|v| v * w as f32).collect()].concat();
            terms.push(tape.fused_scalar(&[out.style_features], s * w, vec![g])?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        let grads = tape.backward(total)?;
        self.generator.store.accumulate(&grads);
        self.opt_g.step(&mut self.generator.store)?;

        let rec = GanStep {
            step: self.history.len() + 1,
            loss_d: adv.loss_d,
            loss_g: adv_g.loss_g,
            value: adv.value,
            collapse,
            style,
            d_real: mean(&sr),
            d_fake: mean(&sf),
        };
        if [rec.loss_d, rec.loss_g, rec.collapse, rec.style].iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numerical(format!("non-finite GAN loss at step {}: {rec:?}", rec.step)));
        }
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs the configured number of steps. `on_checkpoint` is called with the
    /// step number every `checkpoint_every` steps and after the last one.
    pub fn train(
        &mut self,
        data: &[Microstructure],
        mut on_checkpoint: impl FnMut(usize, &Generator, &Discriminator) -> Result<()>,
    ) -> Result<()> {
        let every = self.config.checkpoint_every;
        for s in 1..=self.config.steps {
            self.step(data).map_err(|e| match e {
                CoreError::Tensor(t) => CoreError::numerical(format!("GAN step {s}: {t}")),
                other => other,
            })?;
            if (every > 0 && s % every == 0) || s == self.config.steps {
                on_checkpoint(s, &self.generator, &self.discriminator)?;
            }
        }
        Ok(())
    }
}

pub fn write_history(path: &Path, history: &[GanStep]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss_d", "loss_g", "minimax_value", "collapse", "style", "d_real", "d_fake"])?;
    for h in history {
        w.write_record([
            h.step.to_string(),
            h.loss_d.to_string(),
            h.loss_g.to_string(),
            h.value.to_string(),
            h.collapse.to_string(),
            h.style.to_string(),
            h.d_real.to_string(),
            h.d_fake.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the MDN training set: latent, rendered image, simulated property.
#[derive(Clone, Debug)]
pub struct Pair {
    pub z: LatentVec,
    pub image: Microstructure,
    pub y: f64,
}

/// Draws `n` latents from the prior, renders them and simulates each image.
pub fn build_pair_dataset<R: Rng + ?Sized>(
    g: &Generator,
    n: usize,
    rng: &mut R,
    sim: &dyn PropertySimulator,
) -> Result<Vec<Pair>> {
    if n == 0 {
        return Err(CoreError::invalid("pair dataset size must be at least 1"));
    }
    let zs: Vec<LatentVec> = (0..n).map(|_| LatentVec::sample_prior(g.latent_side(), rng)).collect();
    let mut out = Vec::with_capacity(n);
    for chunk in zs.chunks(256) {
        for (z, image) in chunk.iter().zip(g.generate_batch(chunk)?) {
            let y = sim.simulate(&image);
            out.push(Pair { z: z.clone(), image, y });
        }
    }
    Ok(out)
}
