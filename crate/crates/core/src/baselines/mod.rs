//! Comparison methods: PCA in place of the generator, an MDN straight to
//! pixels, and Bayesian optimization over the generator's latent space.

pub mod bo;
pub mod gp;
pub mod pca;

use std::path::Path;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::mdn::{train_mdn, MdnConfig, MdnHistory, MdnNet};
use crate::micro::Microstructure;
pub use pca::PcaModel;

pub const PCA_FILE: &str = "pca.mfck";
pub const MDN_FILE: &str = "mdn.mfck";

fn flatten(images: &[Microstructure]) -> Result<(usize, Vec<f64>)> {
    let side = images
        .first()
        .ok_or_else(|| CoreError::invalid("no training images"))?
        .side();
    if images.iter().any(|m| m.side() != side) {
        return Err(CoreError::invalid("training images differ in size"));
    }
    Ok((side, images.iter().flat_map(|m| m.pixels().iter().map(|&p| p as f64)).collect()))
}

fn sign_image(side: usize, values: &[f64]) -> Result<Microstructure> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numerical("sampled pixel values are not finite"));
    }
    Microstructure::new(side, values.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect())
}

/// PCA coefficients, whitened by `1/√λ`, modelled by an MDN conditioned on y.
pub struct PcaMdn {
    pub pca: PcaModel,
    pub net: MdnNet,
    side: usize,
}

impl PcaMdn {
    pub fn train(images: &[Microstructure], ys: &[f64], config: &MdnConfig) -> Result<(Self, MdnHistory)> {
        if images.len() != ys.len() {
            return Err(CoreError::invalid("images and properties differ in count"));
        }
        let (side, data) = flatten(images)?;
        let d = side * side;
        let m = config.output_dim;
        let pca = PcaModel::fit(&data, images.len(), d, m)?;
        let mut zs = Vec::with_capacity(images.len() * m);
        for row in data.chunks(d) {
            let c = pca.transform(row)?;
            zs.extend(c.iter().zip(&pca.variances).map(|(c, v)| (c / v.sqrt()) as f32));
        }
        let (net, history) = train_mdn(ys, &zs, config)?;
        Ok((Self { pca, net, side }, history))
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn sample<R: Rng + ?Sized>(&self, target: f64, n: usize, rng: &mut R) -> Result<Vec<Microstructure>> {
        self.net
            .sample(target, n, rng)?
            .iter()
            .map(|w| {
                let c: Vec<f64> = w.iter().zip(&self.pca.variances).map(|(w, v)| w * v.sqrt()).collect();
                sign_image(self.side, &self.pca.inverse(&c)?)
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.pca.save(&dir.join(PCA_FILE))?;
        self.net.save(&dir.join(MDN_FILE))
    }

    pub fn load(dir: &Path, config: MdnConfig) -> Result<Self> {
        let pca = PcaModel::load(&dir.join(PCA_FILE))?;
        let side = (pca.dim() as f64).sqrt().round() as usize;
        if side * side != pca.dim() || pca.n_components() != config.output_dim {
            return Err(CoreError::Format {
                path: dir.join(PCA_FILE),
                reason: "PCA model does not match the configured image and latent sizes".into(),
            });
        }
        let net = MdnNet::load(&dir.join(MDN_FILE), config)?;
        Ok(Self { pca, net, side })
    }
}

/// An MDN whose output space is the pixel grid itself.
pub struct DirectMdn {
    pub net: MdnNet,
    side: usize,
}

impl DirectMdn {
    /// Fails before allocating when `side²` exceeds `max_pixels`.
    pub fn config_for(side: usize, base: &MdnConfig, max_pixels: usize) -> Result<MdnConfig> {
        let pixels = side * side;
        if pixels > max_pixels {
            return Err(CoreError::invalid(format!(
                "direct MDN over {pixels} pixels exceeds the cap of {max_pixels}"
            )));
        }
        Ok(MdnConfig {
            output_dim: pixels,
            ..base.clone()
        })
    }

    pub fn train(
        images: &[Microstructure],
        ys: &[f64],
        base: &MdnConfig,
        max_pixels: usize,
    ) -> Result<(Self, MdnHistory)> {
        if images.len() != ys.len() {
            return Err(CoreError::invalid("images and properties differ in count"));
        }
        let side = images.first().ok_or_else(|| CoreError::invalid("no training images"))?.side();
        let config = Self::config_for(side, base, max_pixels)?;
        if images.iter().any(|m| m.side() != side) {
            return Err(CoreError::invalid("training images differ in size"));
        }
        let zs: Vec<f32> = images.iter().flat_map(|m| m.pixels().iter().copied()).collect();
        let (net, history) = train_mdn(ys, &zs, &config)?;
        Ok((Self { net, side }, history))
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn sample<R: Rng + ?Sized>(&self, target: f64, n: usize, rng: &mut R) -> Result<Vec<Microstructure>> {
        self.net
            .sample(target, n, rng)?
            .iter()
            .map(|v| sign_image(self.side, v))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(&dir.join(MDN_FILE))
    }

    pub fn load(dir: &Path, side: usize, base: &MdnConfig, max_pixels: usize) -> Result<Self> {
        let config = Self::config_for(side, base, max_pixels)?;
        Ok(Self {
            net: MdnNet::load(&dir.join(MDN_FILE), config)?,
            side,
        })
    }
}
