//! Pipeline configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Relative paths resolve against the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::{default_spatial_relations, SplitRatios};
use crate::distractor::DEFAULT_PER_TYPE;
use crate::expression::{GenerationConfig, DEFAULT_COMPOSE_PROBABILITY, DEFAULT_MAX_PER_REGION, DEFAULT_SYNONYM_PROBABILITY};
use crate::mining::{DEFAULT_MARGIN, DEFAULT_REFRESH_INTERVAL};
use crate::reasoning::LogicForm;
use crate::scene_graph::{TargetFilter, DEFAULT_BLACKLIST, DEFAULT_MIN_AREA_RATIO};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    /// Builtin templates when absent.
    pub templates: Option<PathBuf>,
    /// Builtin attribute lexicon when absent.
    pub lexicon: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub forms: Vec<LogicForm>,
    pub min_area_ratio: f64,
    pub blacklist: BTreeSet<String>,
    pub max_per_region: usize,
    pub synonym_probability: f64,
    pub compose_probability: f64,
    /// Sample relations with inverse-frequency weights.
    pub balance_relations: bool,
    /// Drop expressions whose relations are all spatial.
    pub filter_spatial: bool,
    pub spatial_relations: BTreeSet<String>,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            forms: LogicForm::ALL.to_vec(),
            min_area_ratio: DEFAULT_MIN_AREA_RATIO,
            blacklist: DEFAULT_BLACKLIST.iter().map(|s| s.to_string()).collect(),
            max_per_region: DEFAULT_MAX_PER_REGION,
            synonym_probability: DEFAULT_SYNONYM_PROBABILITY,
            compose_probability: DEFAULT_COMPOSE_PROBABILITY,
            balance_relations: true,
            filter_spatial: true,
            spatial_relations: default_spatial_relations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractorSection {
    pub per_type: usize,
}

impl Default for DistractorSection {
    fn default() -> Self {
        Self {
            per_type: DEFAULT_PER_TYPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    pub margin: f64,
    pub refresh_interval: u64,
}

impl Default for MiningSection {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub top_k: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self { top_k: 20 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the thread pool decide.
    pub workers: usize,
    pub paths: Paths,
    pub generation: GenerationSection,
    pub distractor: DistractorSection,
    pub split: SplitRatios,
    pub mining: MiningSection,
    pub stats: StatsSection,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        config.validate()?;
        if let Some(base) = path.parent() {
            config.paths.resolve_against(base);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.generation;
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("generation.min_area_ratio", g.min_area_ratio)?;
        unit("generation.synonym_probability", g.synonym_probability)?;
        unit("generation.compose_probability", g.compose_probability)?;
        if g.forms.is_empty() {
            return Err(ConfigError::Invalid("generation.forms is empty".into()));
        }
        if g.max_per_region == 0 {
            return Err(ConfigError::Invalid("generation.max_per_region must be at least 1".into()));
        }
        if self.distractor.per_type == 0 {
            return Err(ConfigError::Invalid("distractor.per_type must be at least 1".into()));
        }
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|r| r.is_nan() || *r <= 0.0)
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
        {
            return Err(ConfigError::Invalid("split ratios must be positive and sum to 1".into()));
        }
        if self.mining.margin.is_nan() || self.mining.margin < 0.0 {
            return Err(ConfigError::Invalid("mining.margin must be non-negative".into()));
        }
        if self.mining.refresh_interval == 0 {
            return Err(ConfigError::Invalid("mining.refresh_interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn target_filter(&self) -> TargetFilter {
        TargetFilter {
            min_area_ratio: self.generation.min_area_ratio,
            blacklist: self.generation.blacklist.clone(),
        }
    }

    pub fn generation_config(&self) -> GenerationConfig {
        let g = &self.generation;
        GenerationConfig {
            forms: g.forms.clone(),
            max_per_region: g.max_per_region,
            synonym_probability: g.synonym_probability,
            compose_probability: g.compose_probability,
            spatial_relations: g.filter_spatial.then(|| g.spatial_relations.clone()),
        }
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.synonyms,
            &mut self.templates,
            &mut self.lexicon,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
