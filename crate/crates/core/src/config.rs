//! Experiment configuration: one JSON file drives data generation,
//! training, and evaluation. Unknown keys are rejected; every run writes
//! back the fully resolved form as `config.resolved.json`.

use crate::adapters::AdapterSite;
use crate::data::DomainSpec;
use crate::encoder::{EncoderConfig, Slot};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::selector::{ScheduleConfig, ScheduleFamily};
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 256.0,
        }
    }
}

/// Schedule shape; the layer count comes from the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub family: ScheduleFamily,
    pub a: f64,
    pub b: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            family: ScheduleFamily::Cosinoidal,
            a: 0.5,
            b: 0.1,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self, blocks: usize) -> Result<ScheduleConfig> {
        ScheduleConfig::new(self.family, self.a, self.b, blocks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnseenSpec {
    pub spec: DomainSpec,
    /// Names of two generated domains whose transforms are blended.
    pub blend_of: Option<[String; 2]>,
    pub blend_gamma: f64,
}

impl Default for UnseenSpec {
    fn default() -> Self {
        Self {
            spec: DomainSpec {
                name: "unseen".into(),
                ..DomainSpec::default()
            },
            blend_of: None,
            blend_gamma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Domain 0: pretraining corpus, never part of the lifelong sequence.
    pub base: DomainSpec,
    pub domains: Vec<DomainSpec>,
    pub unseen: Option<UnseenSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let mk = |name: &str| DomainSpec {
            name: name.into(),
            gap_seed: 0,
            ..DomainSpec::default()
        };
        Self {
            base: mk("base"),
            domains: vec![mk("d1"), mk("d2"), mk("d3"), mk("d4")],
            unseen: Some(UnseenSpec {
                spec: mk("unseen"),
                blend_of: Some(["d1".into(), "d2".into()]),
                blend_gamma: 0.5,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub schedule: ScheduleSpec,
    pub training: TrainConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            adapter: AdapterConfig::default(),
            schedule: ScheduleSpec::default(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Fill in derived values: a `gap_seed` of 0 is a placeholder meaning
    /// "derive from the experiment seed and the domain's position", and
    /// every domain's feature width is forced to the encoder's sample
    /// width. Then validate everything.
    pub fn resolved(mut self) -> Result<Self> {
        let dim = self.encoder.sample_dim();
        let seed = self.seed;
        let fix = |spec: &mut DomainSpec, idx: u64| {
            if spec.gap_seed == 0 {
                spec.gap_seed = derive_seed(seed, &[0xda7a, idx]);
            }
            spec.feature_dim = dim;
        };
        fix(&mut self.data.base, 0);
        for (i, d) in self.data.domains.iter_mut().enumerate() {
            fix(d, 1 + i as u64);
        }
        if let Some(u) = &mut self.data.unseen {
            fix(&mut u.spec, 1000);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.training.validate()?;
        self.schedule.build(self.encoder.blocks)?;
        if self.adapter.rank == 0 || self.adapter.alpha <= 0.0 {
            return Err(Error::Config("adapter rank and alpha must be positive".into()));
        }
        let max_rank = self.max_adapter_rank();
        if self.adapter.rank > max_rank {
            return Err(Error::Config(format!(
                "adapter rank {} exceeds the smallest adapted dimension {max_rank}",
                self.adapter.rank
            )));
        }

        if self.data.domains.is_empty() {
            return Err(Error::Config("need at least one lifelong domain".into()));
        }
        let mut names = vec![self.data.base.name.clone()];
        self.data.base.validate()?;
        for d in &self.data.domains {
            d.validate()?;
            names.push(d.name.clone());
        }
        if let Some(u) = &self.data.unseen {
            u.spec.validate()?;
            names.push(u.spec.name.clone());
            if !(0.0..=1.0).contains(&u.blend_gamma) {
                return Err(Error::Config(format!(
                    "blend_gamma {} outside [0,1]",
                    u.blend_gamma
                )));
            }
            if let Some([a, b]) = &u.blend_of {
                for parent in [a, b] {
                    if !self.data.domains.iter().any(|d| &d.name == parent) {
                        return Err(Error::Config(format!(
                            "unseen blend parent '{parent}' is not a generated domain"
                        )));
                    }
                }
            }
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Config("domain names must be unique".into()));
        }

        let dim = self.encoder.sample_dim();
        for d in std::iter::once(&self.data.base)
            .chain(&self.data.domains)
            .chain(self.data.unseen.iter().map(|u| &u.spec))
        {
            if d.feature_dim != dim {
                return Err(Error::Config(format!(
                    "domain '{}' feature_dim {} != encoder sample width {dim}",
                    d.name, d.feature_dim
                )));
            }
            let min_per_id = d.samples_per_identity;
            if min_per_id < self.training.k_instances {
                return Err(Error::Config(format!(
                    "domain '{}' has {min_per_id} samples per identity, fewer than k_instances {}",
                    d.name, self.training.k_instances
                )));
            }
        }
        Ok(())
    }

    /// Smallest in/out dimension over the enabled adapter sites.
    fn max_adapter_rank(&self) -> usize {
        let mut m = usize::MAX;
        for slot in Slot::ALL {
            let site = match slot {
                Slot::Ffn1 | Slot::Ffn2 => AdapterSite::Ffn,
                Slot::Query => AdapterSite::Q,
                Slot::Key => AdapterSite::K,
                Slot::Value => AdapterSite::V,
                Slot::Proj => AdapterSite::Proj,
            };
            if self.encoder.sites.contains(&site) {
                m = m.min(self.encoder.d_model.min(match slot {
                    Slot::Ffn1 | Slot::Ffn2 => self.encoder.ffn_dim,
                    _ => self.encoder.d_model,
                }));
            }
        }
        m
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(dir.join("config.resolved.json"), json)?;
        Ok(())
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig> {
        self.schedule.build(self.encoder.blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_resolves() {
        let cfg = ExperimentConfig::default().resolved().unwrap();
        assert_eq!(cfg.adapter.rank, 64);
        assert_eq!(cfg.adapter.alpha, 256.0);
        assert_eq!(cfg.schedule.a, 0.5);
        assert_eq!(cfg.schedule.b, 0.1);
        assert!(matches!(cfg.schedule.family, ScheduleFamily::Cosinoidal));
        // placeholder gap seeds were replaced and dims forced
        assert_ne!(cfg.data.domains[0].gap_seed, 0);
        assert_eq!(cfg.data.base.feature_dim, cfg.encoder.sample_dim());
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{ "seed": 1, "bogus": true }"#;
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn duplicate_domain_names_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.domains[1].name = cfg.data.domains[0].name.clone();
        assert!(matches!(cfg.resolved(), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_rank_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.adapter.rank = cfg.encoder.d_model + 1;
        assert!(matches!(cfg.resolved(), Err(Error::Config(_))));
    }

    #[test]
    fn blend_parent_must_exist() {
        let mut cfg = ExperimentConfig::default();
        if let Some(u) = &mut cfg.data.unseen {
            u.blend_of = Some(["nope".into(), "d2".into()]);
        }
        assert!(matches!(cfg.resolved(), Err(Error::Config(_))));
    }

    #[test]
    fn roundtrips_through_json() {
        let cfg = ExperimentConfig::default().resolved().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
