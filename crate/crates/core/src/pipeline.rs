//! Stage runner. Every stage owns one directory under the output root, reads
//! only the directories of its declared inputs, and finishes by writing a
//! `stamp.txt` carrying the configuration hash and master seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::baselines::{bo, DirectMdn, PcaMdn};
use crate::error::{CoreError, Result};
use crate::eval::{self, rep, RepRecord};
use crate::gan::{self, GanTrainer, Generator, LatentVec};
use crate::grf;
use crate::mdn::{train_mdn, MdnConfig, MdnNet};
use crate::methods::{self, BoSearch, GanMdn, InverseMethod, MethodRegistry};
use crate::micro::{write_grid, Microstructure};
use crate::property::{self, PropertySimulator};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::config::PipelineConfig;

pub const STAMP: &str = "stamp.txt";
pub const PROPERTIES: &str = "properties.csv";
pub const GENERATOR: &str = "generator.mfck";
pub const DISCRIMINATOR: &str = "discriminator.mfck";
pub const PAIRS: &str = "pairs.csv";
pub const MDN: &str = "mdn.mfck";
pub const HISTORY: &str = "history.csv";
pub const REPORT: &str = "report.csv";
pub const TIMINGS: &str = "timings.csv";
const PREVIEW_COUNT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenGrf,
    TrainGan,
    BuildPairs,
    TrainMdn,
    Invert,
    BaselinePca,
    BaselineDirect,
    BaselineBo,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenGrf => "gen-grf",
            Stage::TrainGan => "train-gan",
            Stage::BuildPairs => "build-pairs",
            Stage::TrainMdn => "train-mdn",
            Stage::Invert => "invert",
            Stage::BaselinePca => "baseline-pca",
            Stage::BaselineDirect => "baseline-direct",
            Stage::BaselineBo => "baseline-bo",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::GenGrf => "grf",
            Stage::TrainGan => "gan",
            Stage::BuildPairs => "pairs",
            Stage::TrainMdn => "mdn",
            Stage::Invert => "invert",
            Stage::BaselinePca => "pca-mdn",
            Stage::BaselineDirect => "direct-mdn",
            Stage::BaselineBo => "bo",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::GenGrf => &[],
            Stage::TrainGan => &[Stage::GenGrf],
            Stage::BuildPairs => &[Stage::TrainGan],
            Stage::TrainMdn => &[Stage::BuildPairs],
            Stage::Invert => &[Stage::TrainGan, Stage::TrainMdn],
            Stage::BaselinePca | Stage::BaselineDirect => &[Stage::GenGrf],
            Stage::BaselineBo => &[Stage::TrainGan],
            Stage::Evaluate => &[Stage::TrainGan, Stage::TrainMdn, Stage::BaselinePca, Stage::BaselineDirect],
        }
    }
}

/// Stages run by [`Pipeline::run_all`], in order.
pub const FULL_RUN: [Stage; 7] = [
    Stage::GenGrf,
    Stage::TrainGan,
    Stage::BuildPairs,
    Stage::TrainMdn,
    Stage::BaselinePca,
    Stage::BaselineDirect,
    Stage::Evaluate,
];

/// Summary of one `invert` call.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub dir: PathBuf,
    pub latents: Vec<LatentVec>,
    pub images: Vec<Microstructure>,
    pub properties: Vec<f64>,
    pub reps: Vec<f64>,
    pub runtime_s: f64,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub simulator: Arc<dyn PropertySimulator>,
    pub log: Box<dyn FnMut(&str)>,
    hash: String,
}

fn format_err(path: &Path, reason: impl Into<String>) -> CoreError {
    CoreError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, simulator: Arc<dyn PropertySimulator>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            hash: config.hash(),
            config,
            simulator,
            log: Box::new(|_| {}),
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.config.out.join(stage.dir_name())
    }

    fn stamp_text(&self, stage: Stage) -> String {
        format!("stage = {}\nconfig_hash = {}\nseed = {}\n", stage.name(), self.hash, self.config.seed)
    }

    /// Fails unless `stage` finished under the current configuration.
    pub fn require(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        let stamp = dir.join(STAMP);
        match fs::read_to_string(&stamp) {
            Ok(text) if text == self.stamp_text(stage) => Ok(dir),
            _ => Err(CoreError::MissingPrerequisite {
                stage: stage.name().to_string(),
                path: stamp,
            }),
        }
    }

    fn begin(&mut self, stage: Stage) -> Result<PathBuf> {
        for &input in stage.inputs() {
            self.require(input)?;
        }
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        (self.log)(&format!("[{}] start", stage.name()));
        Ok(dir)
    }

    fn finish(&mut self, stage: Stage, dir: &Path) -> Result<()> {
        fs::write(dir.join(STAMP), self.stamp_text(stage))?;
        (self.log)(&format!("[{}] done -> {}", stage.name(), dir.display()));
        Ok(())
    }

    pub fn run(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::GenGrf => self.gen_grf(),
            Stage::TrainGan => self.train_gan(),
            Stage::BuildPairs => self.build_pairs(),
            Stage::TrainMdn => self.train_mdn(),
            Stage::Invert => {
                let (t, n) = (self.config.targets[0], self.config.eval_samples);
                self.invert(t, n).map(|_| ())
            }
            Stage::BaselinePca => self.baseline_pca(),
            Stage::BaselineDirect => self.baseline_direct(),
            Stage::BaselineBo => self.baseline_bo().map(|_| ()),
            Stage::Evaluate => self.evaluate().map(|_| ()),
        }
    }

    pub fn run_all(&mut self) -> Result<Vec<RepRecord>> {
        for stage in &FULL_RUN[..FULL_RUN.len() - 1] {
            self.run(*stage)?;
        }
        self.evaluate()
    }

    pub fn gen_grf(&mut self) -> Result<()> {
        let dir = self.begin(Stage::GenGrf)?;
        let samples = grf::generate_dataset(
            self.config.grf_count,
            &self.config.grf_distribution(),
            Stream::Grf.seed(self.config.seed),
        )?;
        grf::write_dataset(&dir, &samples)?;
        property::simulate_manifest(&dir, &dir.join(PROPERTIES), self.simulator.as_ref())?;
        self.finish(Stage::GenGrf, &dir)
    }

    /// Images and simulated properties of the GRF dataset.
    pub fn load_grf(&self) -> Result<(Vec<Microstructure>, Vec<f64>)> {
        let dir = self.require(Stage::GenGrf)?;
        let images = grf::load_images(&dir)?;
        let path = dir.join(PROPERTIES);
        let mut r = csv::Reader::from_path(&path)?;
        let col = r
            .headers()?
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| format_err(&path, "no `y` column"))?;
        let ys = r
            .records()
            .map(|rec| {
                let rec = rec?;
                rec[col].parse::<f64>().map_err(|e| format_err(&path, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if ys.len() != images.len() {
            return Err(format_err(&path, "property count differs from image count"));
        }
        Ok((images, ys))
    }

    pub fn train_gan(&mut self) -> Result<()> {
        let (images, _) = self.load_grf()?;
        let dir = self.begin(Stage::TrainGan)?;
        let mut trainer = GanTrainer::new(self.config.gan_config())?;
        let ckpt_dir = dir.join("checkpoints");
        let total = self.config.gan_steps;
        let log = &mut self.log;
        let start = Instant::now();
        trainer.train(&images, |step, g, d| {
            if step < total {
                fs::create_dir_all(&ckpt_dir)?;
                g.save(&ckpt_dir.join(format!("generator_{step:06}.mfck")))?;
                d.save(&ckpt_dir.join(format!("discriminator_{step:06}.mfck")))?;
            }
            log(&format!("[train-gan] step {step}/{total} ({:.1}s)", start.elapsed().as_secs_f64()));
            Ok(())
        })?;
        trainer.generator.save(&dir.join(GENERATOR))?;
        trainer.discriminator.save(&dir.join(DISCRIMINATOR))?;
        gan::write_history(&dir.join(HISTORY), &trainer.history)?;
        let mut rng = rng_for(Stream::Gan.seed(self.config.seed), 2);
        let zs: Vec<LatentVec> = (0..PREVIEW_COUNT)
            .map(|_| LatentVec::sample_prior(self.config.latent_side, &mut rng))
            .collect();
        write_grid(&dir.join("samples.pgm"), &trainer.generator.generate_batch(&zs)?, 2)?;
        self.finish(Stage::TrainGan, &dir)
    }

    pub fn load_generator(&self) -> Result<Generator> {
        let dir = self.require(Stage::TrainGan)?;
        Generator::load(&dir.join(GENERATOR), self.config.latent_side)
    }

    pub fn build_pairs(&mut self) -> Result<()> {
        let g = self.load_generator()?;
        let dir = self.begin(Stage::BuildPairs)?;
        let mut rng = rng_for(Stream::Pairs.seed(self.config.seed), 0);
        let pairs = gan::build_pair_dataset(&g, self.config.pairs_count, &mut rng, self.simulator.as_ref())?;
        let mut w = csv::Writer::from_path(dir.join(PAIRS))?;
        let m = g.latent_side() * g.latent_side();
        let mut header = vec!["id".to_string()];
        header.extend((0..m).map(|i| format!("z_{i}")));
        header.push("y".into());
        w.write_record(&header)?;
        for (i, p) in pairs.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(p.z.values().iter().map(|v| v.to_string()));
            row.push(p.y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        self.finish(Stage::BuildPairs, &dir)
    }

    /// `(ys, zs)` with `zs` flattened row-major.
    pub fn load_pairs(&self) -> Result<(Vec<f64>, Vec<f32>)> {
        let path = self.require(Stage::BuildPairs)?.join(PAIRS);
        let m = self.config.latent_side * self.config.latent_side;
        let mut r = csv::Reader::from_path(&path)?;
        let (mut ys, mut zs) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != m + 2 {
                return Err(format_err(&path, format!("expected {} fields, found {}", m + 2, rec.len())));
            }
            for i in 0..m {
                zs.push(rec[1 + i].parse::<f32>().map_err(|e| format_err(&path, e.to_string()))?);
            }
            ys.push(rec[m + 1].parse::<f64>().map_err(|e| format_err(&path, e.to_string()))?);
        }
        Ok((ys, zs))
    }

    pub fn train_mdn(&mut self) -> Result<()> {
        let (ys, zs) = self.load_pairs()?;
        let dir = self.begin(Stage::TrainMdn)?;
        let (net, history) = train_mdn(&ys, &zs, &self.config.mdn_config())?;
        net.save(&dir.join(MDN))?;
        history.write_csv(&dir.join(HISTORY))?;
        (self.log)(&format!(
            "[train-mdn] {} epochs, best val NLL {:.4} (initial {:.4})",
            history.epochs.len(),
            history.best_val_nll,
            history.initial_val_nll
        ));
        self.finish(Stage::TrainMdn, &dir)
    }

    pub fn load_gan_mdn(&self) -> Result<GanMdn> {
        let g = self.load_generator()?;
        let dir = self.require(Stage::TrainMdn)?;
        GanMdn::new(g, MdnNet::load(&dir.join(MDN), self.config.mdn_config())?)
    }

    /// Draws `n` candidates for `target` into `invert/target_<t>/`.
    pub fn invert(&mut self, target: f64, n: usize) -> Result<Inversion> {
        rep(target, target)?;
        if n == 0 {
            return Err(CoreError::Config("--n must be at least 1".into()));
        }
        let method = self.load_gan_mdn()?;
        let dir = self.stage_dir(Stage::Invert).join(format!("target_{target:.4}"));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let mut rng = rng_for(Stream::Invert.seed(self.config.seed), target.to_bits());
        let start = Instant::now();
        let latents = method.sample_latents(target, n, &mut rng)?;
        let images = method.generator.generate_batch(&latents)?;
        let runtime_s = start.elapsed().as_secs_f64();
        let properties: Vec<f64> = images.iter().map(|m| self.simulator.simulate(m)).collect();
        let reps = properties.iter().map(|&y| rep(y, target)).collect::<Result<Vec<_>>>()?;
        let mut w = csv::Writer::from_path(dir.join("candidates.csv"))?;
        let m = self.config.latent_side * self.config.latent_side;
        let mut header = vec!["candidate".to_string(), "file".to_string()];
        header.extend((0..m).map(|i| format!("z_{i}")));
        header.extend(["y".to_string(), "rep_pct".to_string()]);
        w.write_record(&header)?;
        for (i, (z, img)) in latents.iter().zip(&images).enumerate() {
            let file = format!("candidate_{i:03}.pgm");
            img.write_pgm(&dir.join(&file))?;
            let mut row = vec![i.to_string(), file];
            row.extend(z.values().iter().map(|v| v.to_string()));
            row.extend([format!("{:.6}", properties[i]), format!("{:.6}", reps[i])]);
            w.write_record(&row)?;
        }
        w.flush()?;
        fs::write(dir.join(STAMP), self.stamp_text(Stage::Invert))?;
        (self.log)(&format!(
            "[invert] target {target}: {n} candidates in {runtime_s:.3}s, min REP {:.3}%",
            reps.iter().copied().fold(f64::INFINITY, f64::min)
        ));
        Ok(Inversion {
            dir,
            latents,
            images,
            properties,
            reps,
            runtime_s,
        })
    }

    pub fn baseline_pca(&mut self) -> Result<()> {
        let (images, ys) = self.load_grf()?;
        let dir = self.begin(Stage::BaselinePca)?;
        let (model, history) = PcaMdn::train(&images, &ys, &self.pca_mdn_config())?;
        model.save(&dir)?;
        history.write_csv(&dir.join(HISTORY))?;
        self.finish(Stage::BaselinePca, &dir)
    }

    fn pca_mdn_config(&self) -> MdnConfig {
        MdnConfig {
            seed: Stream::PcaMdn.seed(self.config.seed),
            ..self.config.mdn_config()
        }
    }

    fn direct_base_config(&self) -> MdnConfig {
        MdnConfig {
            seed: Stream::DirectMdn.seed(self.config.seed),
            max_epochs: self.config.direct_max_epochs,
            ..self.config.mdn_config()
        }
    }

    pub fn baseline_direct(&mut self) -> Result<()> {
        let (images, ys) = self.load_grf()?;
        let dir = self.begin(Stage::BaselineDirect)?;
        let (model, history) = DirectMdn::train(&images, &ys, &self.direct_base_config(), self.config.direct_max_pixels)?;
        model.save(&dir)?;
        history.write_csv(&dir.join(HISTORY))?;
        self.finish(Stage::BaselineDirect, &dir)
    }

    fn bo_method(&self) -> Result<BoSearch> {
        Ok(BoSearch {
            generator: self.load_generator()?,
            simulator: Arc::clone(&self.simulator),
            config: self.config.bo_config(),
        })
    }

    fn method_seed(&self, id: &str) -> u64 {
        let index = methods::METHOD_IDS.iter().position(|m| *m == id).unwrap_or(methods::METHOD_IDS.len());
        derive_seed(Stream::Evaluate.seed(self.config.seed), index as u64)
    }

    fn write_traces(dir: &Path, records: &[RepRecord]) -> Result<()> {
        for r in records.iter().filter(|r| !r.trace.is_empty()) {
            bo::write_trace(&dir.join(format!("trace_{:.2}.csv", r.target)), &r.trace)?;
        }
        Ok(())
    }

    /// Runs BO alone for every configured target.
    pub fn baseline_bo(&mut self) -> Result<Vec<RepRecord>> {
        let mut method = self.bo_method()?;
        let dir = self.begin(Stage::BaselineBo)?;
        let records = eval::evaluate_method(
            &mut method,
            &self.config.dataset_name(),
            &self.config.targets,
            1,
            self.simulator.as_ref(),
            self.method_seed(methods::BO),
        )?;
        Self::write_traces(&dir, &records)?;
        eval::export_report(&dir.join(REPORT), &records, self.config.report_runtime)?;
        eval::export_timings(&dir.join(TIMINGS), &records)?;
        self.finish(Stage::BaselineBo, &dir)?;
        Ok(records)
    }

    pub fn registry(&self) -> Result<MethodRegistry> {
        let mut reg = MethodRegistry::new();
        reg.register(Box::new(self.load_gan_mdn()?))?;
        let pca_dir = self.require(Stage::BaselinePca)?;
        reg.register(Box::new(PcaMdn::load(&pca_dir, self.pca_mdn_config())?))?;
        let direct_dir = self.require(Stage::BaselineDirect)?;
        reg.register(Box::new(DirectMdn::load(
            &direct_dir,
            self.config.image_side,
            &self.direct_base_config(),
            self.config.direct_max_pixels,
        )?))?;
        reg.register(Box::new(self.bo_method()?))?;
        Ok(reg)
    }

    /// All methods on all targets; writes the report, timings, best-candidate
    /// grids and BO traces.
    pub fn evaluate(&mut self) -> Result<Vec<RepRecord>> {
        let mut registry = self.registry()?;
        let dir = self.begin(Stage::Evaluate)?;
        let mut records = Vec::new();
        let dataset = self.config.dataset_name();
        for method in registry.iter_mut() {
            let method: &mut dyn InverseMethod = method.as_mut();
            let id = method.id().to_string();
            let recs = eval::evaluate_method(
                method,
                &dataset,
                &self.config.targets,
                self.config.eval_samples,
                self.simulator.as_ref(),
                self.method_seed(&id),
            )?;
            let worst = recs.iter().map(|r| r.min_rep).fold(0.0, f64::max);
            (self.log)(&format!("[evaluate] {id}: worst per-target min REP {worst:.3}%"));
            eval::export_best_grid(&dir.join(format!("best_{id}.pgm")), &recs)?;
            records.extend(recs);
        }
        Self::write_traces(&dir, &records)?;
        eval::export_report(&dir.join(REPORT), &records, self.config.report_runtime)?;
        eval::export_timings(&dir.join(TIMINGS), &records)?;
        self.finish(Stage::Evaluate, &dir)?;
        Ok(records)
    }
}
