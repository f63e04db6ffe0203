//! Pipeline configuration: built-in profiles overridden by a `key = value` file.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baselines::bo::BoConfig;
use crate::error::{CoreError, Result};
use crate::gan::{GanConfig, UPSCALE};
use crate::grf::GrfDistribution;
use crate::mdn::MdnConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(CoreError::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

impl Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: PathBuf,
    pub image_side: usize,
    pub latent_side: usize,
    pub grf_count: usize,
    pub grf_vf_min: f64,
    pub grf_vf_max: f64,
    pub grf_lengths: Vec<f64>,
    pub gan_steps: usize,
    pub gan_batch: usize,
    pub gan_lr: f32,
    pub gan_beta1: f32,
    pub gan_collapse_weight: f64,
    pub gan_style_weight: f64,
    pub gan_collapse_tau: f64,
    pub gan_checkpoint_every: usize,
    pub pairs_count: usize,
    pub mdn_components: usize,
    pub mdn_hidden_layers: usize,
    pub mdn_hidden_width: usize,
    pub mdn_batch: usize,
    pub mdn_lr: f32,
    pub mdn_patience: usize,
    pub mdn_max_epochs: usize,
    pub mdn_val_fraction: f64,
    pub direct_max_epochs: usize,
    pub direct_max_pixels: usize,
    pub bo_init: usize,
    pub bo_iters: usize,
    pub bo_candidates: usize,
    pub targets: Vec<f64>,
    pub eval_samples: usize,
    /// Whether the report CSV carries measured runtimes or `NA`.
    pub report_runtime: bool,
}

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        let desk = Self {
            profile,
            seed: 42,
            out: PathBuf::from("runs/desk"),
            image_side: 64,
            latent_side: 2,
            grf_count: 2000,
            grf_vf_min: 0.05,
            grf_vf_max: 0.95,
            grf_lengths: vec![0.5, 1.0, 2.0, 4.0],
            gan_steps: 400,
            gan_batch: 16,
            gan_lr: 1e-3,
            gan_beta1: 0.5,
            gan_collapse_weight: 0.1,
            gan_style_weight: 0.1,
            gan_collapse_tau: 0.1,
            gan_checkpoint_every: 0,
            pairs_count: 5000,
            mdn_components: 40,
            mdn_hidden_layers: 4,
            mdn_hidden_width: 16,
            mdn_batch: 128,
            mdn_lr: 1e-3,
            mdn_patience: 50,
            mdn_max_epochs: 300,
            mdn_val_fraction: 0.1,
            direct_max_epochs: 2,
            direct_max_pixels: 4096,
            bo_init: 50,
            bo_iters: 100,
            bo_candidates: 1024,
            targets: crate::eval::DEFAULT_TARGETS.to_vec(),
            eval_samples: 30,
            report_runtime: false,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => {
                let gan = GanConfig::default();
                Self {
                    out: PathBuf::from("runs/paper"),
                    grf_vf_min: 0.3,
                    grf_vf_max: 0.7,
                    grf_lengths: vec![2.0, 4.0, 8.0],
                    gan_steps: gan.steps,
                    gan_batch: gan.batch,
                    gan_lr: gan.learning_rate,
                    gan_beta1: gan.beta1,
                    mdn_max_epochs: 1000,
                    direct_max_epochs: 1000,
                    bo_init: 250,
                    bo_iters: 400,
                    report_runtime: true,
                    ..desk
                }
            }
        }
    }

    /// Resolved `(key, value)` pairs in file syntax, `out` excluded.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn list(v: &[f64]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        vec![
            ("profile", self.profile.to_string()),
            ("seed", self.seed.to_string()),
            ("image_side", self.image_side.to_string()),
            ("latent_side", self.latent_side.to_string()),
            ("grf_count", self.grf_count.to_string()),
            ("grf_vf_min", self.grf_vf_min.to_string()),
            ("grf_vf_max", self.grf_vf_max.to_string()),
            ("grf_lengths", list(&self.grf_lengths)),
            ("gan_steps", self.gan_steps.to_string()),
            ("gan_batch", self.gan_batch.to_string()),
            ("gan_lr", self.gan_lr.to_string()),
            ("gan_beta1", self.gan_beta1.to_string()),
            ("gan_collapse_weight", self.gan_collapse_weight.to_string()),
            ("gan_style_weight", self.gan_style_weight.to_string()),
            ("gan_collapse_tau", self.gan_collapse_tau.to_string()),
            ("gan_checkpoint_every", self.gan_checkpoint_every.to_string()),
            ("pairs_count", self.pairs_count.to_string()),
            ("mdn_components", self.mdn_components.to_string()),
            ("mdn_hidden_layers", self.mdn_hidden_layers.to_string()),
            ("mdn_hidden_width", self.mdn_hidden_width.to_string()),
            ("mdn_batch", self.mdn_batch.to_string()),
            ("mdn_lr", self.mdn_lr.to_string()),
            ("mdn_patience", self.mdn_patience.to_string()),
            ("mdn_max_epochs", self.mdn_max_epochs.to_string()),
            ("mdn_val_fraction", self.mdn_val_fraction.to_string()),
            ("direct_max_epochs", self.direct_max_epochs.to_string()),
            ("direct_max_pixels", self.direct_max_pixels.to_string()),
            ("bo_init", self.bo_init.to_string()),
            ("bo_iters", self.bo_iters.to_string()),
            ("bo_candidates", self.bo_candidates.to_string()),
            ("targets", list(&self.targets)),
            ("eval_samples", self.eval_samples.to_string()),
            ("report_runtime", if self.report_runtime { "measured" } else { "omitted" }.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| CoreError::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        match key {
            "profile" => self.profile = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "image_side" => self.image_side = num(key, value)?,
            "latent_side" => self.latent_side = num(key, value)?,
            "grf_count" => self.grf_count = num(key, value)?,
            "grf_vf_min" => self.grf_vf_min = num(key, value)?,
            "grf_vf_max" => self.grf_vf_max = num(key, value)?,
            "grf_lengths" => self.grf_lengths = list(key, value)?,
            "gan_steps" => self.gan_steps = num(key, value)?,
            "gan_batch" => self.gan_batch = num(key, value)?,
            "gan_lr" => self.gan_lr = num(key, value)?,
            "gan_beta1" => self.gan_beta1 = num(key, value)?,
            "gan_collapse_weight" => self.gan_collapse_weight = num(key, value)?,
            "gan_style_weight" => self.gan_style_weight = num(key, value)?,
            "gan_collapse_tau" => self.gan_collapse_tau = num(key, value)?,
            "gan_checkpoint_every" => self.gan_checkpoint_every = num(key, value)?,
            "pairs_count" => self.pairs_count = num(key, value)?,
            "mdn_components" => self.mdn_components = num(key, value)?,
            "mdn_hidden_layers" => self.mdn_hidden_layers = num(key, value)?,
            "mdn_hidden_width" => self.mdn_hidden_width = num(key, value)?,
            "mdn_batch" => self.mdn_batch = num(key, value)?,
            "mdn_lr" => self.mdn_lr = num(key, value)?,
            "mdn_patience" => self.mdn_patience = num(key, value)?,
            "mdn_max_epochs" => self.mdn_max_epochs = num(key, value)?,
            "mdn_val_fraction" => self.mdn_val_fraction = num(key, value)?,
            "direct_max_epochs" => self.direct_max_epochs = num(key, value)?,
            "direct_max_pixels" => self.direct_max_pixels = num(key, value)?,
            "bo_init" => self.bo_init = num(key, value)?,
            "bo_iters" => self.bo_iters = num(key, value)?,
            "bo_candidates" => self.bo_candidates = num(key, value)?,
            "targets" => self.targets = list(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            "report_runtime" => {
                self.report_runtime = match value {
                    "measured" => true,
                    "omitted" => false,
                    v => return Err(CoreError::Config(format!("`report_runtime` must be measured or omitted, got `{v}`"))),
                }
            }
            other => return Err(CoreError::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `profile` line
    /// selects the base defaults (or `profile` when given) before other keys apply.
    pub fn parse(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let file_profile = pairs.iter().find(|(k, _)| k == "profile").map(|(_, v)| v.parse()).transpose()?;
        let mut cfg = Self::profile(profile.or(file_profile).unwrap_or(Profile::Desk));
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, profile)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("out = {}\n", self.out.display());
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Hex SHA-256 of the resolved settings (output directory excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(format!("{k}={v}\n"));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoreError::Config(m));
        if self.latent_side == 0 || self.latent_side * UPSCALE != self.image_side {
            return err(format!(
                "image side {} must equal latent side {} × {UPSCALE}",
                self.image_side, self.latent_side
            ));
        }
        if self.targets.is_empty() || self.targets.iter().any(|t| !(*t > 0.0)) {
            return err("targets must be a nonempty list of positive values".into());
        }
        if self.eval_samples == 0 {
            return err("eval_samples must be at least 1".into());
        }
        let wrap = |r: Result<()>| r.map_err(|e| CoreError::Config(e.to_string()));
        wrap(self.grf_distribution().validate())?;
        wrap(self.gan_config().validate())?;
        wrap(self.mdn_config().validate())?;
        wrap(self.bo_config().validate())?;
        Ok(())
    }

    pub fn grf_distribution(&self) -> GrfDistribution {
        GrfDistribution {
            side: self.image_side,
            vf_min: self.grf_vf_min,
            vf_max: self.grf_vf_max,
            correlation_lengths: self.grf_lengths.clone(),
        }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            latent_side: self.latent_side,
            steps: self.gan_steps,
            batch: self.gan_batch,
            learning_rate: self.gan_lr,
            beta1: self.gan_beta1,
            collapse_weight: self.gan_collapse_weight,
            style_weight: self.gan_style_weight,
            collapse_tau: self.gan_collapse_tau,
            checkpoint_every: self.gan_checkpoint_every,
            seed: crate::seed::Stream::Gan.seed(self.seed),
        }
    }

    /// Shared by the latent MDN and PCA-MDN; output size is the latent dimension.
    pub fn mdn_config(&self) -> MdnConfig {
        MdnConfig {
            input_dim: 1,
            hidden_layers: self.mdn_hidden_layers,
            hidden_width: self.mdn_hidden_width,
            components: self.mdn_components,
            output_dim: self.latent_side * self.latent_side,
            batch: self.mdn_batch,
            learning_rate: self.mdn_lr,
            patience: self.mdn_patience,
            val_fraction: self.mdn_val_fraction,
            max_epochs: self.mdn_max_epochs,
            seed: crate::seed::Stream::Mdn.seed(self.seed),
        }
    }

    pub fn bo_config(&self) -> BoConfig {
        BoConfig {
            init: self.bo_init,
            iterations: self.bo_iters,
            candidates: self.bo_candidates,
            lower: -1.0,
            upper: 1.0,
            seed: crate::seed::Stream::Bo.seed(self.seed),
        }
    }

    pub fn dataset_name(&self) -> String {
        format!("grf{}", self.image_side)
    }
}
