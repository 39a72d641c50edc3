//! Relation balancing, spatial-only filtering, image-level splits and
//! dataset statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distractor::TaskInstance;
use crate::expression::ExpressionRecord;
use crate::ids::{ImageId, ObjectId};
use crate::reasoning::{LogicForm, ReasoningTree};
use crate::scene_graph::Corpus;

/// Relations treated as purely spatial when filtering.
pub const DEFAULT_SPATIAL_RELATIONS: &[&str] = &[
    "to the left of",
    "to the right of",
    "above",
    "below",
    "behind",
    "in front of",
    "near",
];

pub fn default_spatial_relations() -> BTreeSet<String> {
    DEFAULT_SPATIAL_RELATIONS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("corpus has no relation edges")]
    EmptyCorpus,
    #[error("no input to aggregate")]
    EmptyInput,
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
}

/// Sampling weights proportional to the reciprocal of predicate frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationWeights {
    pub frequencies: BTreeMap<String, u64>,
    pub weights: BTreeMap<String, f64>,
    /// The constant K in `weight = K / frequency`, chosen so weights sum to 1.
    pub constant: f64,
}

impl RelationWeights {
    pub fn from_frequencies(frequencies: BTreeMap<String, u64>) -> Result<Self, BalanceError> {
        let frequencies: BTreeMap<String, u64> =
            frequencies.into_iter().filter(|(_, f)| *f > 0).collect();
        if frequencies.is_empty() {
            return Err(BalanceError::EmptyCorpus);
        }
        let inverse_sum: f64 = frequencies.values().map(|&f| 1.0 / f as f64).sum();
        let constant = 1.0 / inverse_sum;
        let weights = frequencies
            .iter()
            .map(|(p, &f)| (p.clone(), constant / f as f64))
            .collect();
        Ok(Self {
            frequencies,
            weights,
            constant,
        })
    }

    /// Weight of `predicate`; unseen predicates count as frequency 1.
    pub fn weight(&self, predicate: &str) -> f64 {
        self.weights.get(predicate).copied().unwrap_or(self.constant)
    }

    /// Draws an index into `candidates` with probability proportional to
    /// each predicate's weight, i.e. normalized over the candidate set.
    pub fn sample<R: Rng + ?Sized>(&self, candidates: &[&str], rng: &mut R) -> Option<usize> {
        let weights: Vec<f64> = candidates.iter().map(|p| self.weight(p)).collect();
        WeightedIndex::new(&weights).ok().map(|d| d.sample(rng))
    }
}

/// Counts every edge predicate in the corpus.
pub fn relation_weights(corpus: &Corpus) -> Result<RelationWeights, BalanceError> {
    let mut frequencies: BTreeMap<String, u64> = BTreeMap::new();
    for graph in corpus.graphs().values() {
        for edge in graph.edges() {
            *frequencies.entry(edge.predicate.clone()).or_default() += 1;
        }
    }
    RelationWeights::from_frequencies(frequencies)
}

/// True when every relation in a chain/and/or tree is in `spatial`.
/// Order, same and not trees carry non-relational evidence and never are.
pub fn is_spatial_only(tree: &ReasoningTree, spatial: &BTreeSet<String>) -> bool {
    match tree.form {
        LogicForm::Same | LogicForm::Not | LogicForm::Order => false,
        LogicForm::Chain | LogicForm::And | LogicForm::Or => {
            tree.predicates().iter().all(|p| spatial.contains(*p))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.11,
            test: 0.09,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<(), BalanceError> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| r.is_nan() || *r <= 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(BalanceError::InvalidRatios((self.train, self.val, self.test)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Partitions items by image so no image lands in two partitions. Images
/// are shuffled with `seed`; item order inside a partition follows input.
pub fn split_by_image<T>(
    items: Vec<T>,
    image_of: impl Fn(&T) -> &ImageId,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Splits<T>, BalanceError> {
    ratios.validate()?;
    let mut images: Vec<ImageId> = items
        .iter()
        .map(|t| image_of(t).clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    images.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = images.len();
    let n_train = (n as f64 * ratios.train).round() as usize;
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let partition: HashMap<ImageId, u8> = images
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (img, part)
        })
        .collect();
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        match partition[image_of(&item)] {
            0 => splits.train.push(item),
            1 => splits.val.push(item),
            _ => splits.test.push(item),
        }
    }
    Ok(splits)
}

pub fn split(
    instances: Vec<TaskInstance>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Splits<TaskInstance>, BalanceError> {
    split_by_image(instances, |i| &i.target_image, ratios, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCount {
    pub term: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub expression_count: u64,
    pub region_count: u64,
    pub image_count: u64,
    pub avg_expression_length: Option<f64>,
    pub vocab_size: u64,
    pub category_count: u64,
    pub attribute_count: u64,
    pub relation_count: u64,
    pub top_names: Vec<TermCount>,
    pub top_attributes: Vec<TermCount>,
    pub top_relations: Vec<TermCount>,
    pub avg_candidates: Option<f64>,
    pub avg_same_category_candidates: Option<f64>,
}

/// Exact integer accumulation; averages are taken once at the end so the
/// result does not depend on input order.
#[derive(Default)]
struct Accumulator {
    expressions: u64,
    words: u64,
    vocab: BTreeSet<String>,
    names: BTreeMap<String, u64>,
    attributes: BTreeMap<String, u64>,
    relations: BTreeMap<String, u64>,
    regions: BTreeSet<(ImageId, ObjectId)>,
    images: BTreeSet<ImageId>,
    instances: u64,
    candidates: u64,
    same_category: u64,
}

impl Accumulator {
    fn add_record(&mut self, record: &ExpressionRecord) {
        self.expressions += 1;
        self.words += record.word_count() as u64;
        for t in &record.tokens {
            self.vocab.insert(t.text.to_lowercase());
        }
        for node in record.tree.nodes() {
            *self.names.entry(node.category.clone()).or_default() += 1;
            for a in node.attributes.iter().chain(node.negated_attributes.iter()) {
                *self.attributes.entry(a.clone()).or_default() += 1;
            }
        }
        for p in record.tree.predicates() {
            *self.relations.entry(p.to_string()).or_default() += 1;
        }
        self.regions
            .insert((record.image_id.clone(), record.target_id.clone()));
        self.images.insert(record.image_id.clone());
    }

    fn add_instance(&mut self, instance: &TaskInstance) {
        self.add_record(&instance.expression);
        self.instances += 1;
        let category = &instance.expression.tree.root.category;
        for (image, regions) in &instance.candidate_regions {
            self.images.insert(image.clone());
            for r in regions {
                self.regions.insert((image.clone(), r.object_id.clone()));
                self.candidates += 1;
                if &r.category == category {
                    self.same_category += 1;
                }
            }
        }
    }

    fn finish(self, top_k: usize) -> DatasetStats {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        DatasetStats {
            expression_count: self.expressions,
            region_count: self.regions.len() as u64,
            image_count: self.images.len() as u64,
            avg_expression_length: ratio(self.words, self.expressions),
            vocab_size: self.vocab.len() as u64,
            category_count: self.names.len() as u64,
            attribute_count: self.attributes.len() as u64,
            relation_count: self.relations.len() as u64,
            top_names: top(&self.names, top_k),
            top_attributes: top(&self.attributes, top_k),
            top_relations: top(&self.relations, top_k),
            avg_candidates: ratio(self.candidates, self.instances),
            avg_same_category_candidates: ratio(self.same_category, self.instances),
        }
    }
}

/// Most frequent terms, descending by count then ascending by term.
fn top(counts: &BTreeMap<String, u64>, k: usize) -> Vec<TermCount> {
    let mut all: Vec<TermCount> = counts
        .iter()
        .map(|(term, &count)| TermCount {
            term: term.clone(),
            count,
        })
        .collect();
    all.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.term.cmp(&b.term)));
    all.truncate(k);
    all
}

pub fn stats_from_instances(instances: &[TaskInstance], top_k: usize) -> Result<DatasetStats, BalanceError> {
    if instances.is_empty() {
        return Err(BalanceError::EmptyInput);
    }
    let mut acc = Accumulator::default();
    instances.iter().for_each(|i| acc.add_instance(i));
    Ok(acc.finish(top_k))
}

pub fn stats_from_records(records: &[ExpressionRecord], top_k: usize) -> Result<DatasetStats, BalanceError> {
    if records.is_empty() {
        return Err(BalanceError::EmptyInput);
    }
    let mut acc = Accumulator::default();
    records.iter().for_each(|r| acc.add_record(r));
    Ok(acc.finish(top_k))
}

/// Category, attribute and relation inventory of a raw corpus.
pub fn stats_from_corpus(corpus: &Corpus, top_k: usize) -> Result<DatasetStats, BalanceError> {
    if corpus.is_empty() {
        return Err(BalanceError::EmptyInput);
    }
    let mut acc = Accumulator::default();
    for (image, graph) in corpus.graphs() {
        acc.images.insert(image.clone());
        for node in graph.nodes() {
            acc.regions.insert((image.clone(), node.id.clone()));
            *acc.names.entry(node.category.clone()).or_default() += 1;
            for a in &node.attributes {
                *acc.attributes.entry(a.clone()).or_default() += 1;
            }
        }
        for edge in graph.edges() {
            *acc.relations.entry(edge.predicate.clone()).or_default() += 1;
        }
    }
    Ok(acc.finish(top_k))
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        writeln!(f, "{:<32}{:>12}", "expressions", self.expression_count)?;
        writeln!(f, "{:<32}{:>12}", "regions", self.region_count)?;
        writeln!(f, "{:<32}{:>12}", "images", self.image_count)?;
        writeln!(f, "{:<32}{:>12}", "avg expression length", opt(self.avg_expression_length))?;
        writeln!(f, "{:<32}{:>12}", "vocabulary", self.vocab_size)?;
        writeln!(f, "{:<32}{:>12}", "object categories", self.category_count)?;
        writeln!(f, "{:<32}{:>12}", "attributes", self.attribute_count)?;
        writeln!(f, "{:<32}{:>12}", "relations", self.relation_count)?;
        writeln!(f, "{:<32}{:>12}", "avg candidates", opt(self.avg_candidates))?;
        writeln!(
            f,
            "{:<32}{:>12}",
            "avg same-category candidates",
            opt(self.avg_same_category_candidates)
        )?;
        for (title, list) in [
            ("names", &self.top_names),
            ("attributes", &self.top_attributes),
            ("relations", &self.top_relations),
        ] {
            writeln!(f, "\ntop {title}:")?;
            for tc in list {
                writeln!(f, "  {:<30}{:>10}", tc.term, tc.count)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoning::{TreeEdge, TreeNode};

    #[test]
    fn reciprocal_weights() {
        let mut freq = BTreeMap::new();
        freq.insert("left".to_string(), 100);
        freq.insert("holding".to_string(), 10);
        let w = RelationWeights::from_frequencies(freq).unwrap();
        assert!((w.weight("holding") / w.weight("left") - 10.0).abs() < 1e-12);
        assert!((w.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut uniform = BTreeMap::new();
        uniform.insert("a".to_string(), 7);
        uniform.insert("b".to_string(), 7);
        let u = RelationWeights::from_frequencies(uniform).unwrap();
        assert_eq!(u.weight("a"), u.weight("b"));
        assert_eq!(RelationWeights::from_frequencies(BTreeMap::new()), Err(BalanceError::EmptyCorpus));
    }

    fn chain(predicate: &str) -> ReasoningTree {
        ReasoningTree::new(
            LogicForm::Chain,
            TreeNode::new("man"),
            vec![TreeEdge::relation(predicate, TreeNode::new("car"))],
        )
    }

    #[test]
    fn spatial_only_examples() {
        let spatial = default_spatial_relations();
        assert!(is_spatial_only(&chain("to the left of"), &spatial));
        assert!(!is_spatial_only(&chain("holding"), &spatial));
        let not = ReasoningTree::new(LogicForm::Not, TreeNode::new("apple").with_negated(["red"]), vec![]);
        assert!(!is_spatial_only(&not, &spatial));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let bad = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        let items: Vec<ImageId> = vec!["1".into()];
        assert!(split_by_image(items, |i| i, bad, 0).is_err());
    }

    #[test]
    fn split_sizes_track_ratios() {
        let items: Vec<ImageId> = (0..1000).map(|i| ImageId(i.to_string())).collect();
        let s = split_by_image(items, |i| i, SplitRatios::default(), 5).unwrap();
        assert!((s.train.len() as i64 - 800).abs() <= 1);
        assert!((s.val.len() as i64 - 110).abs() <= 1);
        assert!((s.test.len() as i64 - 90).abs() <= 1);
    }

    #[test]
    fn top_lists_sort_by_count_then_term() {
        let mut counts = BTreeMap::new();
        counts.insert("b".to_string(), 2);
        counts.insert("a".to_string(), 2);
        counts.insert("c".to_string(), 5);
        let t = top(&counts, 2);
        assert_eq!(t[0].term, "c");
        assert_eq!(t[1].term, "a");
    }
}
