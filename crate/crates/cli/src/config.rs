use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use convlora_core::data::DomainSpec;
use convlora_core::pipeline::{AdaptSpec, PretrainSpec};
use convlora_core::unet::UNetConfig;

/// Effective run configuration. Every section is optional in the file;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: TrainSection,
    pub esh: TrainSection,
    pub adapt: AdaptSection,
    pub eval: EvalSection,
    /// Custom domain list for `gen-data`; the first entry is the source.
    pub domains: Vec<DomainSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: TrainSection::pretrain(),
            esh: TrainSection::esh(),
            adapt: AdaptSection::default(),
            eval: EvalSection::default(),
            domains: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub depth: usize,
    pub base_channels: usize,
    pub convs_per_block: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        UNetConfig::desk().into()
    }
}

impl From<UNetConfig> for ModelSection {
    fn from(c: UNetConfig) -> Self {
        Self {
            depth: c.depth,
            base_channels: c.base_channels,
            convs_per_block: c.convs_per_block,
            num_classes: c.num_classes,
            input_channels: c.input_channels,
        }
    }
}

impl ModelSection {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            convs_per_block: self.convs_per_block,
            num_classes: self.num_classes,
            input_channels: self.input_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 80,
            n_test: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl TrainSection {
    fn pretrain() -> Self {
        let d = PretrainSpec::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }

    fn esh() -> Self {
        let d = PretrainSpec::esh_default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }

    pub fn spec(&self, seed: u64) -> PretrainSpec {
        PretrainSpec {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub epochs: usize,
    pub lr: f64,
    pub rank: usize,
    pub target_samples: usize,
    pub blocks: String,
    pub adabn: bool,
    pub momentum: f64,
    pub full_pass: bool,
    pub batch_size: usize,
    pub seeds: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let d = AdaptSpec::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            rank: d.rank,
            target_samples: d.target_samples,
            blocks: d.selector,
            adabn: d.adabn,
            momentum: d.momentum,
            full_pass: d.full_pass,
            batch_size: d.batch_size,
            seeds: 3,
        }
    }
}

impl AdaptSection {
    pub fn spec(&self, seed: u64) -> AdaptSpec {
        AdaptSpec {
            epochs: self.epochs,
            lr: self.lr,
            rank: self.rank,
            target_samples: self.target_samples,
            selector: self.blocks.clone(),
            adabn: self.adabn,
            momentum: self.momentum,
            full_pass: self.full_pass,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub tolerance: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { tolerance: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub id: String,
    pub gamma: f64,
    pub intensity_scale: f64,
    pub noise_std: f64,
    pub bias_field_strength: f64,
    pub blur_sigma: f64,
}

impl DomainSection {
    pub fn spec(&self) -> DomainSpec {
        DomainSpec::new(
            &self.id,
            self.gamma,
            self.intensity_scale,
            self.noise_std,
            self.bias_field_strength,
            self.blur_sigma,
        )
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.unet().validate()?;
        self.pretrain.spec(self.seed).validate()?;
        self.esh.spec(self.seed).validate()?;
        self.adapt.spec(self.seed).validate()?;
        if self.adapt.seeds == 0 {
            bail!("adapt.seeds must be >= 1");
        }
        if !(self.eval.tolerance >= 0.0) {
            bail!("eval.tolerance must be >= 0");
        }
        for d in &self.domains {
            d.spec().validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        if self.domains.is_empty() {
            DomainSpec::suite()
        } else {
            self.domains.iter().map(DomainSection::spec).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("colour = 1").is_err());
        assert!(RunConfig::parse("[model]\nwidth = 3").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.model.depth = 3;
        c.adapt.blocks = "1-2".into();
        c.domains.push(DomainSection {
            id: "x".into(),
            gamma: 2.0,
            intensity_scale: 1.0,
            noise_std: 0.0,
            bias_field_strength: 0.0,
            blur_sigma: 0.0,
        });
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[model]\ndepth = 1").is_err());
        assert!(RunConfig::parse("[adapt]\nmomentum = 0.0").is_err());
    }
}
