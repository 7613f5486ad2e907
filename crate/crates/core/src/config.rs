//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::VanillaConfig;
use crate::data::DatasetManifest;
use crate::error::{KiopError, Result};
use crate::geometry::{PromptInit, RingPartition};
use crate::pretrain::PretrainConfig;
use crate::seed::{self, stream};
use crate::storing::{Regime, StoringConfig};
use crate::synthesis::SynthesisConfig;

/// Where a model's weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum ModelSource {
    /// A saved model manifest (JSON).
    Manifest(PathBuf),
    /// The built-in toy CNN, pre-trained on the entry's dataset at startup.
    Toy(ToyModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModel {
    pub init_seed: u64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

/// A frozen model and the dataset it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub source: ModelSource,
    pub dataset: DatasetManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSettings {
    pub sides: Vec<usize>,
    #[serde(default)]
    pub init: PromptInit,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self { sides: RingPartition::default_two_model().sides().to_vec(), init: PromptInit::Zeros }
    }
}

/// Per-purpose seeds; unset ones derive from `global`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub global: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storing: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<u64>,
}

impl Seeds {
    /// Fills every unset seed from `global`.
    pub fn resolved(&self) -> Seeds {
        let d = |s: Option<u64>, tag: u64| Some(s.unwrap_or_else(|| seed::derive(self.global, &[tag])));
        Seeds {
            global: self.global,
            mapping: d(self.mapping, stream::MAPPING),
            synthesis: d(self.synthesis, stream::GENERATOR),
            storing: d(self.storing, stream::STORING),
            prompt: d(self.prompt, stream::INIT),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub batch_size: usize,
    /// Evaluate on at most this many test samples per dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_samples: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { batch_size: 250, max_samples: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub prompt: PromptSettings,
    /// Model A, whose knowledge the prompt core preserves.
    pub source: ModelEntry,
    /// Receivers in depth order: receiver `i` reads rings `1..=i+1`.
    pub receivers: Vec<ModelEntry>,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub storing: StoringConfig,
    #[serde(default)]
    pub vanilla: VanillaConfig,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| KiopError::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KiopError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            KiopError::Config(m) => KiopError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative model and dataset paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                let joined = base.join(&*p);
                *p = std::path::absolute(&joined).unwrap_or(joined);
            }
        };
        for entry in std::iter::once(&mut self.source).chain(self.receivers.iter_mut()) {
            if let ModelSource::Manifest(p) = &mut entry.source {
                fix(p);
            }
            fix(&mut entry.dataset.path);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Partition actually trained: single-model transfer collapses to one ring.
    pub fn partition(&self) -> Result<RingPartition> {
        let sides = &self.prompt.sides;
        match self.regime {
            Regime::KiopT if sides.len() > 2 => RingPartition::new(&[sides[0], sides[sides.len() - 1]], 3),
            _ => RingPartition::new(sides, 3),
        }
    }

    /// Storing settings after regime rules: single-model transfer has no side A.
    pub fn storing_for_regime(&self) -> StoringConfig {
        let mut s = self.storing.clone();
        if self.regime == Regime::KiopT {
            s.alpha = 0.0;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let partition = self.partition()?;
        self.synthesis.validate()?;
        self.storing.validate()?;
        if self.receivers.is_empty() {
            return Err(KiopError::Config("at least one receiver is required".into()));
        }
        let m = self.receivers.len();
        match self.regime {
            Regime::Multi => {
                if partition.rings() != m + 1 {
                    return Err(KiopError::InvalidPartition(format!(
                        "{m} receivers need {} rings, partition has {}",
                        m + 1,
                        partition.rings()
                    )));
                }
            }
            Regime::KiopT | Regime::KiopB | Regime::KiopBF | Regime::Vanilla => {
                if m != 1 {
                    return Err(KiopError::Config(format!("regime {} takes exactly one receiver, got {m}", self.regime)));
                }
                if matches!(self.regime, Regime::KiopB | Regime::KiopBF) && partition.rings() > 2 {
                    return Err(KiopError::InvalidPartition(format!(
                        "regime {} takes a core and a periphery, partition has {} rings",
                        self.regime,
                        partition.rings()
                    )));
                }
            }
        }
        if !self.storing.receiver_weights.is_empty() && self.storing.receiver_weights.len() != m {
            return Err(KiopError::Config(format!("{} receiver weights for {m} receivers", self.storing.receiver_weights.len())));
        }
        if self.eval.batch_size == 0 {
            return Err(KiopError::Config("eval batch_size must be >= 1".into()));
        }
        let mut ids: Vec<&str> = std::iter::once(&self.source).chain(&self.receivers).map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(KiopError::Config("model ids must be unique".into()));
        }
        Ok(())
    }

    /// Receiver `i` reads rings `1..=depth(i)`; an undivided prompt is
    /// shared whole.
    pub fn depth(&self, i: usize) -> usize {
        let rings = self.partition().map_or(1, |p| p.rings());
        (i + 2).min(rings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
regime = "kiop-bf"

[seeds]
global = 3

[prompt]
sides = [32, 36, 128]

[source]
id = "toy-a-cnn"
source = { toy = { init_seed = 11 } }
dataset = { id = "toy-a", format = "toy", mean = [0.5, 0.5, 0.5], std = [0.25, 0.25, 0.25], toy = { seed = 1 } }

[[receivers]]
id = "toy-b-cnn"
source = { toy = { init_seed = 12 } }
dataset = { id = "toy-b", format = "toy", mean = [0.5, 0.5, 0.5], std = [0.25, 0.25, 0.25], toy = { seed = 2 } }

[synthesis]
steps = 3

[storing]
iterations = 7
"#;

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.storing.iterations, 7);
        assert_eq!(cfg.synthesis.steps, 3);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = TOY.replace("steps = 3", "steps = 3\nstepz = 4");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().is_config());
        let bad = TOY.replace("regime = \"kiop-bf\"", "regime = \"kiop-bf\"\nfoo = 1");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().is_config());
    }

    #[test]
    fn regime_shape_rules() {
        let multi = TOY.replace("regime = \"kiop-bf\"", "regime = \"multi\"");
        assert!(ExperimentConfig::from_toml(&multi).is_ok());
        let bad = multi.replace("[32, 36, 128]", "[32, 36, 128, 224]");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(KiopError::InvalidPartition(_))));
        let t = ExperimentConfig::from_toml(&TOY.replace("kiop-bf", "kiop-t")).unwrap();
        assert_eq!(t.partition().unwrap().sides(), &[32, 128]);
        assert_eq!(t.storing_for_regime().alpha, 0.0);
        assert_eq!(t.depth(0), 1);
    }

    #[test]
    fn seeds_resolve_deterministically() {
        let s = Seeds { global: 5, mapping: Some(1), ..Seeds::default() }.resolved();
        assert_eq!(s.mapping, Some(1));
        assert_eq!(s, Seeds { global: 5, mapping: Some(1), ..Seeds::default() }.resolved());
        assert!(s.synthesis.is_some() && s.storing.is_some());
    }
}
