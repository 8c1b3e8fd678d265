//! Run configuration: one TOML file, overridden by command-line flags.
//!
//! ```toml
//! seed = 7
//! out_dir = "out"
//! noise_sigma = 0.0
//! camera_profile = "default"
//! catalog_seed = 0
//!
//! [paths]            # optional, relative to this file
//! tree = "tree.json"
//! scene = "scene.json"
//! catalogs = "catalogs.json"
//! camera = "camera.json"
//!
//! [pipeline]
//! sequences = 100
//! gen_workers = 4
//! fit_workers = 4
//!
//! [thresholds]
//! min_mean_speed = 0.005
//!
//! [fit]
//! lambda_smooth = 0.1
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use synthpose_core::analyser::Thresholds;
use synthpose_core::body::{KinematicTree, TreeFile};
use synthpose_core::camera::{CameraDistribution, DistributionFile};
use synthpose_core::fit::FitConfig;
use synthpose_core::io::read_json;
use synthpose_core::scene::SceneFile;
use synthpose_core::synth::{Catalogs, World};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub tree: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub catalogs: Option<PathBuf>,
    pub camera: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub sequences: usize,
    pub gen_workers: usize,
    pub fit_workers: usize,
    pub max_attempts: u32,
    pub lease_ms: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { sequences: 10, gen_workers: 1, fit_workers: 1, max_attempts: 3, lease_ms: 600_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub noise_sigma: f64,
    pub camera_profile: String,
    /// Seed of the built-in catalogs, used when `paths.catalogs` is unset.
    pub catalog_seed: u64,
    pub paths: Paths,
    pub pipeline: PipelineSection,
    pub thresholds: Thresholds,
    pub fit: FitConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            noise_sigma: 0.0,
            camera_profile: "default".into(),
            catalog_seed: 0,
            paths: Paths::default(),
            pipeline: PipelineSection::default(),
            thresholds: Thresholds::default(),
            fit: FitConfig::default(),
        }
    }
}

impl Config {
    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.tree, &mut cfg.paths.scene, &mut cfg.paths.catalogs, &mut cfg.paths.camera].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.is_file() {
                bail!("config {}: referenced file {} does not exist", path.display(), p.display());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.fit.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bail!("noise_sigma must be a nonnegative number");
        }
        Ok(())
    }

    pub fn tree(&self) -> Result<KinematicTree> {
        match &self.paths.tree {
            Some(p) => Ok(KinematicTree::from_file(&read_json::<TreeFile>(p)?)?),
            None => Ok(KinematicTree::smpl_like()),
        }
    }

    pub fn world(&self) -> Result<World> {
        let mut world = World::standard();
        world.tree = self.tree()?;
        if let Some(p) = &self.paths.scene {
            world.scene = read_json::<SceneFile>(p)?.into_primitives()?;
        }
        if let Some(p) = &self.paths.camera {
            world.camera = CameraDistribution::from_file(&read_json::<DistributionFile>(p)?)?;
        }
        Ok(world)
    }

    pub fn catalogs(&self) -> Result<Catalogs> {
        let cat = match &self.paths.catalogs {
            Some(p) => read_json::<Catalogs>(p)?,
            None => Catalogs::standard(self.catalog_seed),
        };
        cat.validate()?;
        Ok(cat)
    }
}
