//! Inverse-design methods behind one trait, looked up by id.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::bo::{self, BoConfig, BoTraceRow};
use crate::baselines::{DirectMdn, PcaMdn};
use crate::error::{CoreError, Result};
use crate::gan::{Generator, LatentVec};
use crate::mdn::MdnNet;
use crate::micro::Microstructure;
use crate::property::PropertySimulator;

pub const GAN_MDN: &str = "gan-mdn";
pub const PCA_MDN: &str = "pca-mdn";
pub const DIRECT_MDN: &str = "direct-mdn";
pub const BO: &str = "bo";
pub const METHOD_IDS: [&str; 4] = [GAN_MDN, PCA_MDN, DIRECT_MDN, BO];

/// Candidates for one target, with optional per-method extras.
#[derive(Clone, Debug, Default)]
pub struct Proposal {
    pub images: Vec<Microstructure>,
    pub latents: Vec<LatentVec>,
    pub trace: Vec<BoTraceRow>,
}

pub trait InverseMethod {
    fn id(&self) -> &str;

    /// True when the method returns one optimized design instead of `n` samples.
    fn single_candidate(&self) -> bool {
        false
    }

    fn propose(&mut self, target: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Proposal>;
}

/// MDN over the generator's latent space, rendered by the generator.
pub struct GanMdn {
    pub generator: Generator,
    pub mdn: MdnNet,
}

impl GanMdn {
    pub fn new(generator: Generator, mdn: MdnNet) -> Result<Self> {
        let dim = generator.latent_side().pow(2);
        if mdn.config.output_dim != dim {
            return Err(CoreError::invalid(format!(
                "MDN outputs {} values but the generator expects {dim}",
                mdn.config.output_dim
            )));
        }
        Ok(Self { generator, mdn })
    }

    pub fn sample_latents<R: Rng + ?Sized>(&self, target: f64, n: usize, rng: &mut R) -> Result<Vec<LatentVec>> {
        let side = self.generator.latent_side();
        self.mdn
            .sample(target, n, rng)?
            .into_iter()
            .map(|z| LatentVec::new(side, z.iter().map(|&v| v as f32).collect()))
            .collect()
    }
}

impl InverseMethod for GanMdn {
    fn id(&self) -> &str {
        GAN_MDN
    }

    fn propose(&mut self, target: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Proposal> {
        let latents = self.sample_latents(target, n, rng)?;
        Ok(Proposal {
            images: self.generator.generate_batch(&latents)?,
            latents,
            trace: Vec::new(),
        })
    }
}

impl InverseMethod for PcaMdn {
    fn id(&self) -> &str {
        PCA_MDN
    }

    fn propose(&mut self, target: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Proposal> {
        Ok(Proposal {
            images: self.sample(target, n, rng)?,
            ..Proposal::default()
        })
    }
}

impl InverseMethod for DirectMdn {
    fn id(&self) -> &str {
        DIRECT_MDN
    }

    fn propose(&mut self, target: f64, n: usize, rng: &mut ChaCha8Rng) -> Result<Proposal> {
        Ok(Proposal {
            images: self.sample(target, n, rng)?,
            ..Proposal::default()
        })
    }
}

/// Minimizes `|y(G(z)) − target|` over the latent box for every target.
pub struct BoSearch {
    pub generator: Generator,
    pub simulator: Arc<dyn PropertySimulator>,
    pub config: BoConfig,
}

impl InverseMethod for BoSearch {
    fn id(&self) -> &str {
        BO
    }

    fn single_candidate(&self) -> bool {
        true
    }

    fn propose(&mut self, target: f64, _n: usize, rng: &mut ChaCha8Rng) -> Result<Proposal> {
        let side = self.generator.latent_side();
        let config = BoConfig {
            seed: rng.next_u64(),
            ..self.config.clone()
        };
        let (g, sim) = (&self.generator, &self.simulator);
        let result = bo::minimize(side * side, &config, |z| {
            let z = LatentVec::new(side, z.iter().map(|&v| v as f32).collect())?;
            Ok((sim.simulate(&g.generate(&z)?) - target).abs())
        })?;
        let z = LatentVec::new(side, result.best_x.iter().map(|&v| v as f32).collect())?;
        Ok(Proposal {
            images: vec![g.generate(&z)?],
            latents: vec![z],
            trace: result.trace,
        })
    }
}

#[derive(Default)]
pub struct MethodRegistry {
    methods: Vec<Box<dyn InverseMethod>>,
}

impl MethodRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, method: Box<dyn InverseMethod>) -> Result<()> {
        if self.methods.iter().any(|m| m.id() == method.id()) {
            return Err(CoreError::Config(format!("method `{}` registered twice", method.id())));
        }
        self.methods.push(method);
        Ok(())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.methods.iter().map(|m| m.id()).collect()
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut (dyn InverseMethod + 'static)> {
        self.methods
            .iter_mut()
            .find(|m| m.id() == id)
            .map(|m| m.as_mut())
            .ok_or_else(|| CoreError::UnknownMethod(id.to_string()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Box<dyn InverseMethod>> {
        self.methods.iter_mut()
    }
}
