//! End-to-end stages used by the command-line tool.
//!
//! Each stage is parallel over its natural key (image, expression) and
//! collects results in key order, so output bytes do not depend on the
//! worker count.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::relation_weights;
use crate::config::PipelineConfig;
use crate::distractor::{find_distractors_explained, Shortage, TaskInstance};
use crate::expression::{generate_with_tally, ExpressionRecord, GenerationTally, Generator, TemplateSet};
use crate::ids::stable_seed;
use crate::reasoning::{AttributeLexicon, LogicForm, ParseContext};
use crate::scene_graph::{load_corpus, Corpus, SceneGraph, SynonymTable, TargetRejection};

/// Version tag carried by every summary and documented with the schemas.
pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {detail}")]
    Resource { path: String, detail: String },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Everything loaded from disk that the stages share.
#[derive(Debug, Clone)]
pub struct Resources {
    pub synonyms: SynonymTable,
    pub lexicon: AttributeLexicon,
    pub templates: TemplateSet,
}

impl Default for Resources {
    fn default() -> Self {
        Self {
            synonyms: SynonymTable::default(),
            lexicon: AttributeLexicon::builtin(),
            templates: TemplateSet::builtin(),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(|e| PipelineError::Resource {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn resource_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Resource {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

impl Resources {
    /// Reads the configured files; missing entries fall back to builtins.
    pub fn load(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let mut r = Self::default();
        if let Some(p) = &config.paths.synonyms {
            r.synonyms = SynonymTable::from_json_reader(open(p)?).map_err(|e| resource_err(p, e))?;
        }
        if let Some(p) = &config.paths.lexicon {
            r.lexicon = AttributeLexicon::from_json_reader(open(p)?).map_err(|e| resource_err(p, e))?;
        }
        if let Some(p) = &config.paths.templates {
            let text = std::fs::read_to_string(p).map_err(|e| resource_err(p, e))?;
            r.templates = TemplateSet::from_toml(&text).map_err(|e| resource_err(p, e))?;
        }
        Ok(r)
    }
}

pub fn load_corpus_file(path: &Path, synonyms: &SynonymTable) -> Result<Corpus, crate::scene_graph::LoadError> {
    let file = File::open(path).map_err(crate::scene_graph::LoadError::from)?;
    load_corpus(BufReader::new(file), synonyms)
}

/// Runs `f` on a pool of `workers` threads (0: pool default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Counts behind every generated or discarded candidate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub schema_version: String,
    pub images: u64,
    pub objects: u64,
    pub targets: u64,
    pub rejected_area: u64,
    pub rejected_blacklist: u64,
    pub records: u64,
    pub generated: BTreeMap<LogicForm, u64>,
    /// Per form, targets for which no unambiguous tree was found.
    pub ambiguous: BTreeMap<LogicForm, u64>,
    pub spatial_only: u64,
    pub no_template: u64,
    pub over_quota: u64,
    pub relation_weights: Option<BTreeMap<String, f64>>,
}

impl GenerationLog {
    fn absorb(&mut self, t: &GenerationTally) {
        for (f, n) in &t.generated {
            *self.generated.entry(*f).or_default() += n;
        }
        for (f, n) in &t.ambiguous {
            *self.ambiguous.entry(*f).or_default() += n;
        }
        self.spatial_only += t.spatial_only;
        self.no_template += t.no_template;
        self.over_quota += t.over_quota;
    }
}

struct ImageOutcome {
    records: Vec<ExpressionRecord>,
    tally: GenerationTally,
    targets: u64,
    area: u64,
    blacklist: u64,
}

fn generate_image(graph: &SceneGraph, generator: &Generator<'_>, config: &PipelineConfig) -> ImageOutcome {
    let filter = config.target_filter();
    let mut out = ImageOutcome {
        records: Vec::new(),
        tally: GenerationTally::default(),
        targets: 0,
        area: 0,
        blacklist: 0,
    };
    for node in graph.nodes() {
        match filter.check(graph, node) {
            Err(TargetRejection::Area) => out.area += 1,
            Err(TargetRejection::Blacklist) => out.blacklist += 1,
            Ok(()) => {
                out.targets += 1;
                let seed = stable_seed(config.seed, &[graph.image_id().as_str(), node.id.as_str()]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (records, tally) = generate_with_tally(graph, &node.id, generator, &mut rng);
                out.records.extend(records);
                out.tally.merge(&tally);
            }
        }
    }
    out
}

/// Expressions for every eligible target of every image, in image then
/// object id order.
pub fn generate_corpus(
    corpus: &Corpus,
    resources: &Resources,
    config: &PipelineConfig,
) -> (Vec<ExpressionRecord>, GenerationLog) {
    let weights = if config.generation.balance_relations {
        relation_weights(corpus).ok()
    } else {
        None
    };
    let mut parse = ParseContext::new(&resources.lexicon);
    if let Some(w) = &weights {
        parse = parse.with_weights(w);
    }
    let generation = config.generation_config();
    let generator = Generator {
        parse,
        templates: &resources.templates,
        synonyms: &resources.synonyms,
        config: &generation,
    };
    let graphs: Vec<&SceneGraph> = corpus.graphs().values().collect();
    let outcomes: Vec<ImageOutcome> = graphs
        .par_iter()
        .map(|g| generate_image(g, &generator, config))
        .collect();

    let mut log = GenerationLog {
        schema_version: SCHEMA_VERSION.to_string(),
        images: corpus.len() as u64,
        objects: corpus.graphs().values().map(|g| g.nodes().len() as u64).sum(),
        relation_weights: weights.map(|w| w.weights),
        ..GenerationLog::default()
    };
    let mut records = Vec::new();
    for o in outcomes {
        log.targets += o.targets;
        log.rejected_area += o.area;
        log.rejected_blacklist += o.blacklist;
        log.absorb(&o.tally);
        records.extend(o.records);
    }
    log.records = records.len() as u64;
    (records, log)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistractLog {
    pub schema_version: String,
    pub expressions: u64,
    pub instances: u64,
    pub discarded: u64,
    pub shortages: Vec<Shortage>,
}

/// Task instances for `records`, in input order; expressions without a
/// full distractor set are discarded and listed in the log.
pub fn distract_all(
    corpus: &Corpus,
    records: &[ExpressionRecord],
    per_type: usize,
    lexicon: &AttributeLexicon,
) -> (Vec<TaskInstance>, DistractLog) {
    let results: Vec<Result<TaskInstance, Shortage>> = records
        .par_iter()
        .map(|r| find_distractors_explained(corpus, r, per_type, lexicon))
        .collect();
    let mut log = DistractLog {
        schema_version: SCHEMA_VERSION.to_string(),
        expressions: records.len() as u64,
        ..DistractLog::default()
    };
    let mut instances = Vec::new();
    for r in results {
        match r {
            Ok(i) => instances.push(i),
            Err(s) => {
                log::info!("discarding {}: short of {:?}", s.expression_id, s.missing);
                log.shortages.push(s);
            }
        }
    }
    log.instances = instances.len() as u64;
    log.discarded = log.shortages.len() as u64;
    (instances, log)
}
