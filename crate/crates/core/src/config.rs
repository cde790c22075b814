//! TOML run configuration. Unknown keys are rejected.
//!
//! ```toml
//! [sampler]
//! kind = "ddim"        # or "rf"
//! steps = 15
//! seed = 7
//!
//! [fusion]
//! mode = "inversion"   # or "inversion_free"
//! alpha_mix = 0.5
//! gamma = 100.0
//! lambda = 0.08
//! block_size = 4
//! alpha_init = 0.7
//!
//! [scenario]
//! kind = "generated"
//! mask = [4, 4, 12, 12]
//!
//! [output]
//! directory = "out"
//! export_maps = true
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Component, ConditionId, MixtureDenoiser};
use crate::error::{io_err, Error, Result};
use crate::grid::{Seed, Shape};
use crate::io::read_latent;
use crate::metrics::{Rect, SpatialMask};
use crate::pipeline::{EditMode, FusionConfig};
use crate::scenario::{generate_scenario, Scenario, ScenarioSpec};
use crate::schedule::Sampler;
use crate::similarity::SharpenParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_sampler")]
    pub kind: Sampler,
    /// Defaults to 15 for DDIM and 8 for RF.
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_sampler() -> Sampler {
    Sampler::Ddim
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: Sampler::Ddim,
            steps: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub mode: EditMode,
    pub alpha_mix: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub block_size: usize,
    pub alpha_init: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let d = FusionConfig::new(Sampler::Ddim, EditMode::Inversion);
        Self {
            mode: d.mode,
            alpha_mix: d.alpha_mix,
            gamma: d.sharpen.gamma,
            lambda: d.sharpen.lambda,
            block_size: d.block_size,
            alpha_init: d.alpha_init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScenarioSection {
    /// Procedurally generated localized-edit fixture.
    Generated(GeneratedScenario),
    /// Mixture components and source latent loaded from `.lted` files.
    Files(FileScenario),
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection::Generated(GeneratedScenario::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratedScenario {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[row0, col0, row1, col1]`, half-open.
    pub mask: [usize; 4],
    pub components: usize,
    pub variance: f64,
    pub background_amplitude: f64,
    pub edit_amplitude: f64,
    pub seed: u64,
}

impl Default for GeneratedScenario {
    fn default() -> Self {
        let d = ScenarioSpec::default();
        Self {
            channels: d.shape.channels,
            height: d.shape.height,
            width: d.shape.width,
            mask: [d.mask.row0, d.mask.col0, d.mask.row1, d.mask.col1],
            components: d.components,
            variance: d.variance,
            background_amplitude: d.background_amplitude,
            edit_amplitude: d.edit_amplitude,
            seed: d.seed.0,
        }
    }
}

impl GeneratedScenario {
    pub fn spec(&self) -> Result<ScenarioSpec> {
        let [row0, col0, row1, col1] = self.mask;
        Ok(ScenarioSpec {
            shape: Shape::new(self.channels, self.height, self.width)?,
            mask: Rect {
                row0,
                col0,
                row1,
                col1,
            },
            components: self.components,
            variance: self.variance,
            background_amplitude: self.background_amplitude,
            edit_amplitude: self.edit_amplitude,
            seed: Seed(self.seed),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileScenario {
    pub source_latent: PathBuf,
    #[serde(default = "source_label")]
    pub source_condition: String,
    #[serde(default = "target_label")]
    pub target_condition: String,
    pub mask: Option<[usize; 4]>,
    #[serde(rename = "condition")]
    pub conditions: Vec<ConditionSpec>,
}

fn source_label() -> String {
    "source".into()
}

fn target_label() -> String {
    "target".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    #[serde(rename = "component")]
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub variance: f64,
    /// Path to the mean latent, relative to the config file.
    pub mean: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Write every per-step similarity map as PGM.
    pub export_maps: bool,
    /// Write the edited latent's first channel as PGM.
    pub export_pgm: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            export_maps: false,
            export_pgm: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path`; relative paths inside are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn fusion_config(&self) -> Result<FusionConfig> {
        let sampler = self.sampler.kind;
        let cfg = FusionConfig {
            alpha_mix: self.fusion.alpha_mix,
            sharpen: SharpenParams {
                gamma: self.fusion.gamma,
                lambda: self.fusion.lambda,
            },
            block_size: self.fusion.block_size,
            alpha_init: self.fusion.alpha_init,
            sampler,
            steps: self.sampler.steps.unwrap_or(sampler.default_steps()),
            seed: Seed(self.sampler.seed),
            mode: self.fusion.mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_scenario(&self, base_dir: &Path) -> Result<Scenario> {
        match &self.scenario {
            ScenarioSection::Generated(g) => generate_scenario(&g.spec()?),
            ScenarioSection::Files(f) => f.build(base_dir),
        }
    }
}

impl FileScenario {
    fn build(&self, base_dir: &Path) -> Result<Scenario> {
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };
        let z0_source = read_latent(resolve(&self.source_latent))?;
        let shape = z0_source.shape();
        let mut model = MixtureDenoiser::new(shape);
        for cond in &self.conditions {
            let components = cond
                .components
                .iter()
                .map(|c| {
                    Ok(Component {
                        weight: c.weight,
                        variance: c.variance,
                        mean: read_latent(resolve(&c.mean))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            model = model.with_condition(ConditionId::new(&cond.name), components)?;
        }
        let source_cond = ConditionId::new(&self.source_condition);
        let target_cond = ConditionId::new(&self.target_condition);
        model.components(&source_cond)?;
        model.components(&target_cond)?;
        let edit_mask = self
            .mask
            .map(|[row0, col0, row1, col1]| {
                SpatialMask::from_rect(
                    shape.height,
                    shape.width,
                    Rect {
                        row0,
                        col0,
                        row1,
                        col1,
                    },
                )
            })
            .transpose()?;
        Ok(Scenario {
            z0_source,
            model,
            source_cond,
            target_cond,
            edit_mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        let f = cfg.fusion_config().unwrap();
        assert_eq!(f.steps, 15);
        assert_eq!(f.block_size, 4);
        assert_eq!(f.sharpen.gamma, 100.0);
        assert_eq!(f.sharpen.lambda, 0.08);
        assert_eq!(f.alpha_mix, 0.5);
        assert_eq!(f.alpha_init, 0.7);
        assert_eq!(f.mode, EditMode::Inversion);
    }

    #[test]
    fn rf_defaults_to_eight_steps() {
        let cfg = RunConfig::from_toml_str("[sampler]\nkind = \"rf\"\n").unwrap();
        assert_eq!(cfg.fusion_config().unwrap().steps, 8);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in [
            "[fusion]\ngama = 3.0\n",
            "[sampler]\nkind = \"ddim\"\nstep = 3\n",
            "[bogus]\n",
            "[scenario]\nkind = \"generated\"\nmasks = [0, 0, 1, 1]\n",
            "[output]\ndir = \"x\"\n",
        ] {
            let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
            assert!(err.contains("unknown"), "{err}");
        }
        let err = RunConfig::from_toml_str("[fusion]\ngama = 3.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("gama"), "{err}");
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
            [sampler]
            kind = "rf"
            steps = 12
            seed = 9

            [fusion]
            mode = "inversion_free"
            alpha_mix = 0.3
            gamma = 50.0
            lambda = 0.1
            block_size = 2
            alpha_init = 0.6

            [scenario]
            kind = "generated"
            channels = 2
            height = 12
            width = 12
            mask = [0, 0, 6, 6]
            components = 2
            variance = 0.1
            background_amplitude = 1.0
            edit_amplitude = 1.5
            seed = 4

            [output]
            directory = "runs/a"
            export_maps = true
            export_pgm = true
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        let f = cfg.fusion_config().unwrap();
        assert_eq!(f.sampler, Sampler::Rf);
        assert_eq!(f.mode, EditMode::InversionFree);
        assert_eq!(f.steps, 12);
        assert_eq!(f.seed, Seed(9));
        let s = cfg.build_scenario(Path::new(".")).unwrap();
        assert_eq!(s.z0_source.shape(), Shape::new(2, 12, 12).unwrap());
        assert_eq!(s.edit_mask.unwrap().count(), 36);
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = RunConfig::from_toml_str("[fusion]\nalpha_mix = 2.0\n").unwrap();
        assert!(cfg.fusion_config().is_err());
        assert!(RunConfig::from_toml_str("[sampler]\nkind = \"euler\"\n").is_err());
    }
}
