use std::fs;
use std::path::Path;
use std::sync::Arc;

use invdes::config::{PipelineConfig, Profile};
use invdes::error::CoreError;
use invdes::pipeline::{Pipeline, Stage, REPORT, STAMP};
use invdes::property::SurrogateAbsorption;

fn tiny(out: &Path) -> PipelineConfig {
    let text = format!(
        "out = {}
seed = 5
image_side = 32
latent_side = 1
grf_count = 40
gan_steps = 3
gan_batch = 4
pairs_count = 60
mdn_components = 3
mdn_hidden_layers = 1
mdn_hidden_width = 8
mdn_batch = 16
mdn_patience = 2
mdn_max_epochs = 3
direct_max_epochs = 1
bo_init = 3
bo_iters = 2
bo_candidates = 32
targets = 0.6, 0.7
eval_samples = 4
",
        out.display()
    );
    PipelineConfig::parse(&text, None).unwrap()
}

fn pipeline(cfg: PipelineConfig) -> Pipeline {
    Pipeline::new(cfg, Arc::new(SurrogateAbsorption)).unwrap()
}

#[test]
fn parse_round_trip_and_errors() {
    let cfg = PipelineConfig::parse("seed = 7 # comment\n\ntargets = 0.5,0.6\n", None).unwrap();
    assert_eq!(cfg.profile, Profile::Desk);
    assert_eq!((cfg.seed, cfg.targets.clone()), (7, vec![0.5, 0.6]));
    let back = PipelineConfig::parse(&cfg.to_file_string(), None).unwrap();
    assert_eq!(back.hash(), cfg.hash());
    assert!(matches!(PipelineConfig::parse("bogus = 1", None), Err(CoreError::Config(_))));
    assert!(matches!(PipelineConfig::parse("seed = x", None), Err(CoreError::Config(_))));
    assert!(matches!(PipelineConfig::parse("no equals sign", None), Err(CoreError::Config(_))));
    assert!(PipelineConfig::parse("image_side = 48", None).is_err());
    assert!(PipelineConfig::parse("image_side = 96\nlatent_side = 3", None).is_ok());
    assert!(PipelineConfig::parse("targets = 0.5,-1", None).is_err());
    let paper = PipelineConfig::parse("", Some(Profile::Paper)).unwrap();
    assert_eq!(paper.profile, Profile::Paper);
    assert_ne!(paper.hash(), PipelineConfig::profile(Profile::Desk).hash());
}

#[test]
fn hash_tracks_every_field_but_out() {
    let base = PipelineConfig::profile(Profile::Desk);
    let mut moved = base.clone();
    moved.out = "elsewhere".into();
    assert_eq!(moved.hash(), base.hash());
    for (k, v) in base.entries() {
        if k == "profile" {
            continue;
        }
        let mut c = base.clone();
        let changed = match k {
            "grf_lengths" | "targets" => format!("{v},9"),
            "report_runtime" => "measured".to_string(),
            "image_side" => "96".into(),
            "latent_side" => "3".into(),
            _ => {
                let x: f64 = v.parse().unwrap();
                if x.fract() == 0.0 { format!("{}", x as u64 + 1) } else { format!("{}", x * 0.5) }
            }
        };
        c.set(k, &changed).unwrap();
        assert_ne!(c.hash(), base.hash(), "{k}");
    }
}

#[test]
fn missing_prerequisites_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = pipeline(tiny(dir.path()));
    for stage in [Stage::TrainGan, Stage::BuildPairs, Stage::TrainMdn, Stage::BaselinePca, Stage::Evaluate] {
        assert!(matches!(p.run(stage), Err(CoreError::MissingPrerequisite { .. })), "{}", stage.name());
    }
    assert!(!p.stage_dir(Stage::TrainGan).exists());
}

#[test]
fn stages_run_in_isolation_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut p = pipeline(cfg.clone());
    let recs = p.run_all().unwrap();
    assert_eq!(recs.len(), 4 * 2);
    let report = fs::read(p.stage_dir(Stage::Evaluate).join(REPORT)).unwrap();
    let stamp = fs::read_to_string(p.stage_dir(Stage::GenGrf).join(STAMP)).unwrap();
    assert!(stamp.contains(&cfg.hash()) && stamp.contains("seed = 5"));

    // A fresh process picks up earlier stages from disk.
    let mut q = pipeline(cfg.clone());
    let inv = q.invert(0.65, 3).unwrap();
    assert_eq!(inv.images.len(), 3);
    assert!(inv.dir.join(STAMP).exists());
    q.run(Stage::Evaluate).unwrap();
    assert_eq!(fs::read(q.stage_dir(Stage::Evaluate).join(REPORT)).unwrap(), report);

    // Changing a setting invalidates every stamp.
    let mut changed = cfg.clone();
    changed.gan_steps = 4;
    let mut r = pipeline(changed);
    assert!(matches!(r.run(Stage::BuildPairs), Err(CoreError::MissingPrerequisite { .. })));

    // The same settings in another directory reproduce the report.
    let other = tempfile::tempdir().unwrap();
    let mut again = cfg;
    again.out = other.path().to_path_buf();
    let mut s = pipeline(again);
    s.run_all().unwrap();
    assert_eq!(fs::read(s.stage_dir(Stage::Evaluate).join(REPORT)).unwrap(), report);
}
