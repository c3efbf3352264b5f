//! Project configuration: one TOML file per run.
//!
//! Relative paths are resolved against the directory holding the config file.
//! Loss weights default to the preset of the chosen condition.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldInit;
use crate::fit::FitConfig;
use crate::loss::{LossWeights, SsimCompensation};
use crate::priors::DEFAULT_BCP_PATCH;
use crate::radiative::Condition;
use crate::sampler::SamplerConfig;
use crate::synth::OracleScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub condition: Condition,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub fields: FieldInit,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Overrides the condition preset when present.
    #[serde(default)]
    pub loss: Option<LossWeights>,
    #[serde(default)]
    pub ssim: SsimCompensation,
    #[serde(default)]
    pub fit: ScheduleConfig,
    #[serde(default)]
    pub bcp: BcpConfig,
    #[serde(default)]
    pub apps: AppsConfig,
    /// Ground-truth scene for `synth`.
    #[serde(default)]
    pub scene: Option<OracleScene>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory: `images/`, `poses.txt`, `intrinsics.json`.
    pub data: PathBuf,
    /// Directory of `<view>.pfm` (or .png) relative depth maps, if any.
    pub depth_priors: Option<PathBuf>,
    pub output: PathBuf,
    /// Checkpoint read by `render` and `apps`; defaults to the fit output.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("data"),
            depth_priors: None,
            output: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub batch_rays: usize,
    pub learn_phi: bool,
    pub grid_lr_scale: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let p = FitConfig::preset(Condition::Underwater);
        ScheduleConfig {
            steps: p.steps,
            lr_init: p.lr_init,
            lr_final: p.lr_final,
            batch_rays: p.batch_rays,
            learn_phi: p.learn_phi,
            grid_lr_scale: p.grid_lr_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcpConfig {
    pub patch_size: usize,
}

impl Default for BcpConfig {
    fn default() -> Self {
        BcpConfig {
            patch_size: DEFAULT_BCP_PATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppsConfig {
    /// Real-world width covered by an orthographic view, in metres.
    pub width_real: f64,
    /// Metres per scene unit, used to convert rendered depths.
    pub metres_per_unit: f64,
    /// Downwelling-depth factors for re-synthesis.
    pub depth_scales: Vec<f64>,
}

impl Default for AppsConfig {
    fn default() -> Self {
        AppsConfig {
            width_real: 1.0,
            metres_per_unit: 1.0,
            depth_scales: vec![1.0 / 3.0, 3.0],
        }
    }
}

impl ProjectConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ProjectConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; a missing or unreadable file is a
    /// configuration error.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Ok((Self::from_toml(&text, base)?, text))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.data);
        fix(&mut self.paths.output);
        if let Some(p) = &mut self.paths.depth_priors {
            fix(p);
        }
        if let Some(p) = &mut self.paths.checkpoint {
            fix(p);
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss.unwrap_or_else(|| LossWeights::preset(self.condition))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            steps: self.fit.steps,
            lr_init: self.fit.lr_init,
            lr_final: self.fit.lr_final,
            batch_rays: self.fit.batch_rays,
            condition: self.condition,
            seed: self.seed,
            learn_phi: self.fit.learn_phi,
            grid_lr_scale: self.fit.grid_lr_scale,
            weights: self.loss_weights(),
            comp: self.ssim,
            sampler: self.sampler,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output.join("fit").join("checkpoint.json"))
    }

    pub fn validate(&self) -> Result<()> {
        self.fit_config().validate()?;
        if self.fields.object_resolution < 2 || self.fields.media_resolution < 2 {
            return Err(Error::Config("grid resolutions must be >= 2".into()));
        }
        if self.bcp.patch_size == 0 || self.bcp.patch_size % 2 == 0 {
            return Err(Error::Config("bcp.patch_size must be odd".into()));
        }
        if !(self.apps.width_real > 0.0 && self.apps.metres_per_unit > 0.0) {
            return Err(Error::Config("apps.width_real and apps.metres_per_unit must be > 0".into()));
        }
        if self.apps.depth_scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("apps.depth_scales must be finite and >= 0".into()));
        }
        if let Some(scene) = &self.scene {
            if scene.condition != self.condition {
                return Err(Error::Config("scene.condition differs from the project condition".into()));
            }
            scene.validate()?;
        }
        Ok(())
    }
}
