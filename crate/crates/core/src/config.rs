//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DgtError, Result};
use crate::lifelong::{FisherConfig, LifelongConfig, TrainConfig, Video};
use crate::metrics::CfMode;
use crate::micronet::NetConfig;
use crate::taskgen::{self, DomainSpec};
use crate::tree::TreeConfig;

/// What a domain's videos are used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Pretraining, base building, and the datasets of a sequential run.
    #[default]
    Train,
    /// Added to a built tree one video at a time.
    Grow,
    /// Only evaluated.
    Test,
}

/// One dataset: a named preset, an inline spec, or a folder on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub spec: Option<DomainSpec>,
    #[serde(default)]
    pub folder: Option<PathBuf>,
    /// Replaces the spec name, which prefixes every video id.
    #[serde(default)]
    pub name: Option<String>,
    /// Videos to generate (4 when unset) or to load (all when unset).
    #[serde(default)]
    pub videos: Option<usize>,
    #[serde(default)]
    pub role: Role,
    /// Added to the experiment seed for this domain only.
    #[serde(default)]
    pub seed_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// A child must score strictly higher than its parent to be entered.
    #[default]
    Parent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSection {
    pub max_depth: Option<usize>,
    pub tie_break: TieBreak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Boundary tolerance for reported metrics; `0.008 * diagonal` when unset.
    pub tolerance_px: Option<usize>,
    pub cf_mode: CfMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds network initialisation, video generation and training.
    pub seed: u64,
    /// Worker threads; all cores when unset.
    pub threads: Option<usize>,
    /// Labelled frames per video when growing.
    pub shots: Option<usize>,
    pub network: NetConfig,
    pub train: TrainConfig,
    pub tree: TreeSection,
    pub fisher: FisherConfig,
    pub domains: Vec<DomainEntry>,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DgtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // folders are relative to the config file
        if let Some(dir) = path.parent() {
            for d in &mut cfg.domains {
                if let Some(f) = &mut d.folder {
                    if f.is_relative() {
                        *f = dir.join(&*f);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.lifelong().validate()?;
        if let Some(d) = self.tree.max_depth {
            if d >= self.network.num_blocks() {
                return Err(DgtError::Config(format!(
                    "tree.max_depth {d} exceeds L - 1 = {}",
                    self.network.num_blocks() - 1
                )));
            }
        }
        if self.threads == Some(0) || self.shots == Some(0) {
            return Err(DgtError::Config("threads and shots must be positive".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            let sources = d.preset.is_some() as u8 + d.spec.is_some() as u8 + d.folder.is_some() as u8;
            if sources != 1 {
                return Err(DgtError::Config(format!(
                    "domains[{i}] needs exactly one of preset, spec or folder"
                )));
            }
            if d.videos == Some(0) {
                return Err(DgtError::Config(format!("domains[{i}].videos must be positive")));
            }
            if d.folder.is_none() {
                self.domain_spec(d)?.validate()?;
            }
        }
        Ok(())
    }

    pub fn lifelong(&self) -> LifelongConfig {
        LifelongConfig {
            train: TrainConfig {
                seed: self.seed,
                ..self.train.clone()
            },
            fisher: self.fisher,
        }
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            max_depth: self.tree.max_depth,
        }
    }

    /// Spec of a generated domain at the network resolution.
    pub fn domain_spec(&self, entry: &DomainEntry) -> Result<DomainSpec> {
        let mut spec = match (&entry.preset, &entry.spec) {
            (Some(p), _) => DomainSpec::preset(p)?,
            (_, Some(s)) => s.clone(),
            _ => return Err(DgtError::Config("folder domains have no spec".into())),
        };
        let res = (self.network.width, self.network.height);
        if entry.preset.is_some() {
            spec.resolution = res;
        } else if spec.resolution != res {
            return Err(DgtError::Config(format!(
                "domain `{}` resolution {:?} differs from the network's {res:?}",
                spec.name, spec.resolution
            )));
        }
        if let Some(n) = &entry.name {
            spec.name = n.clone();
        }
        Ok(spec)
    }

    /// Generates or loads the videos of one domain entry.
    pub fn domain_videos(&self, index: usize) -> Result<Vec<Video>> {
        let entry = &self.domains[index];
        if let Some(dir) = &entry.folder {
            let videos = taskgen::load_folder_dataset(dir, Some((self.network.width, self.network.height)))?;
            return Ok(videos.into_iter().take(entry.videos.unwrap_or(usize::MAX)).collect());
        }
        let spec = self.domain_spec(entry)?;
        let seed = self.seed.wrapping_mul(31).wrapping_add(index as u64).wrapping_add(entry.seed_offset);
        Ok(taskgen::generate_domain(&spec, entry.videos.unwrap_or(4), seed)?
            .into_iter()
            .map(|g| g.video)
            .collect())
    }

    /// Datasets of one role, in configuration order.
    pub fn datasets(&self, role: Role) -> Result<Vec<Vec<Video>>> {
        (0..self.domains.len())
            .filter(|&i| self.domains[i].role == role)
            .map(|i| self.domain_videos(i))
            .collect()
    }
}
