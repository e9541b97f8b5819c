//! Run configuration: profile defaults, optional TOML config file, command
//! line overrides. Resolution order is fixed: the profile supplies every
//! default, the config file overrides the profile, flags override the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use tilegen_core::cascade::Sampler;
use tilegen_core::denoiser::{ModelConfig, TrainScope};
use tilegen_core::diffusion::NoiseSchedule;
use tilegen_core::tile::TileCoord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// CPU-scale: small denoiser, 50-step schedule, full-model training.
    Desk,
    /// Training-scale shapes: wide denoiser, 1000-step schedule, adapters
    /// and attention projections only.
    Paper,
}

impl Profile {
    fn parse(s: &str) -> anyhow::Result<Profile> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => bail!("unknown profile {other:?} (expected \"desk\" or \"paper\")"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

/// Optional config file contents; every field may be omitted.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub tile_px: Option<usize>,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub store: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub seed_level: Option<u8>,
    pub step: Option<u8>,
    pub stages: Option<u8>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub sampler: Option<String>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub lr_floor: Option<f64>,
    pub hold_steps: Option<usize>,
    pub weight_decay: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<FileConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag-level overrides shared by every command.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed every random stream is derived from.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hyperparameter profile.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    /// Worker threads for tile generation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory for generated artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub threads: usize,
    pub tile_px: usize,
    pub store: PathBuf,
    pub manifest: PathBuf,
    pub checkpoints: PathBuf,
    pub out_dir: PathBuf,
    pub seed_level: u8,
    pub plan_step: u8,
    pub plan_stages: u8,
    pub sampler: SamplerKind,
    pub sample_steps: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub hold_steps: usize,
    pub weight_decay: f64,
}

impl RunConfig {
    pub fn resolve(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
        let file = match &global.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let profile = match (global.profile, &file.profile) {
            (Some(p), _) => p,
            (None, Some(s)) => Profile::parse(s)?,
            (None, None) => Profile::Desk,
        };
        let (sample_steps, train_steps, batch, lr) = match profile {
            Profile::Desk => (10, 2000, 16, 6e-3),
            Profile::Paper => (50, 200_000, 20, 5e-5),
        };
        let lr = file.train.lr.unwrap_or(lr);
        let train_steps = file.train.steps.unwrap_or(train_steps);
        let sampler = match file.sampling.sampler.as_deref() {
            None | Some("ddim") => SamplerKind::Ddim,
            Some("ddpm") => SamplerKind::Ddpm,
            Some(other) => bail!("unknown sampler {other:?} (expected \"ddim\" or \"ddpm\")"),
        };
        let store = file.paths.store.unwrap_or_else(|| PathBuf::from("store"));
        Ok(RunConfig {
            profile,
            seed: global.seed.or(file.seed).unwrap_or(0),
            threads: global.threads.or(file.threads).unwrap_or(1),
            tile_px: file.tile_px.unwrap_or(256),
            manifest: file.paths.manifest.unwrap_or_else(|| store.join("manifest.tsv")),
            checkpoints: file.paths.checkpoints.unwrap_or_else(|| PathBuf::from("checkpoints")),
            out_dir: global
                .out
                .clone()
                .or(file.paths.out_dir)
                .unwrap_or_else(|| PathBuf::from("out")),
            store,
            seed_level: file.plan.seed_level.unwrap_or(14),
            plan_step: file.plan.step.unwrap_or(1),
            plan_stages: file.plan.stages.unwrap_or(4),
            sampler,
            sample_steps: file.sampling.steps.unwrap_or(sample_steps),
            train_steps,
            batch: file.train.batch.unwrap_or(batch),
            lr,
            lr_floor: file.train.lr_floor.unwrap_or(lr / 10.0),
            hold_steps: file.train.hold_steps.unwrap_or(train_steps / 2),
            weight_decay: file.train.weight_decay.unwrap_or(0.0),
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        match self.profile {
            Profile::Desk => ModelConfig::desk(4),
            Profile::Paper => ModelConfig::full(),
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        match self.profile {
            Profile::Desk => NoiseSchedule::desk(),
            Profile::Paper => NoiseSchedule::full(),
        }
    }

    pub fn train_scope(&self) -> TrainScope {
        match self.profile {
            Profile::Desk => TrainScope::All,
            Profile::Paper => TrainScope::AdaptersOnly,
        }
    }

    pub fn sampler(&self, schedule: &NoiseSchedule) -> Sampler {
        match self.sampler {
            SamplerKind::Ddim => Sampler::Ddim { steps: self.sample_steps.min(schedule.steps()) },
            SamplerKind::Ddpm => Sampler::Ddpm,
        }
    }
}

/// Parses a `z/x/y` tile coordinate.
pub fn parse_coord(s: &str) -> anyhow::Result<TileCoord> {
    let parts: Vec<&str> = s.split('/').collect();
    if parts.len() != 3 {
        bail!("expected z/x/y, got {s:?}");
    }
    let level: u8 = parts[0].parse().with_context(|| format!("level in {s:?}"))?;
    let col: u64 = parts[1].parse().with_context(|| format!("column in {s:?}"))?;
    let row: u64 = parts[2].parse().with_context(|| format!("row in {s:?}"))?;
    Ok(TileCoord::new(level, col, row)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    // ── Precedence ──────────────────────────────────────────────────

    #[test]
    fn defaults_resolve_without_any_input() {
        let cfg = RunConfig::resolve(&GlobalArgs::default()).unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.threads, 1);
        assert_eq!(cfg.store, PathBuf::from("store"));
        assert_eq!(cfg.manifest, PathBuf::from("store/manifest.tsv"));
        assert_eq!(cfg.train_steps, 2000);
        assert_eq!(cfg.batch, 16);
    }

    #[test]
    fn file_overrides_profile_defaults_and_flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\nthreads = 4\n[paths]\nout_dir = \"from-file\"\n[train]\nsteps = 7\n",
        )
        .unwrap();
        let global = GlobalArgs {
            config: Some(path),
            seed: Some(11),
            out: Some(PathBuf::from("from-flag")),
            ..GlobalArgs::default()
        };
        let cfg = RunConfig::resolve(&global).unwrap();
        assert_eq!(cfg.seed, 11, "flag beats file");
        assert_eq!(cfg.threads, 4, "file beats default");
        assert_eq!(cfg.out_dir, PathBuf::from("from-flag"));
        assert_eq!(cfg.train_steps, 7);
    }

    #[test]
    fn paper_profile_houses_reference_hyperparameters() {
        let global = GlobalArgs { profile: Some(Profile::Paper), ..GlobalArgs::default() };
        let cfg = RunConfig::resolve(&global).unwrap();
        assert_eq!(cfg.batch, 20);
        assert!((cfg.lr - 5e-5).abs() < 1e-12);
        assert_eq!(cfg.train_scope(), TrainScope::AdaptersOnly);
        assert_eq!(cfg.schedule().steps(), 1000);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sede = 9\n").unwrap();
        let global = GlobalArgs { config: Some(path), ..GlobalArgs::default() };
        assert!(RunConfig::resolve(&global).is_err());
    }

    // ── Coordinate parsing ──────────────────────────────────────────

    #[test]
    fn coords_parse_and_reject_malformed_input() {
        let c = parse_coord("14/3/5").unwrap();
        assert_eq!((c.level, c.col, c.row), (14, 3, 5));
        assert!(parse_coord("14/3").is_err());
        assert!(parse_coord("a/b/c").is_err());
        assert!(parse_coord("14/99999999/0").is_err(), "column outside level extent");
    }
}
