//! Distractor images and task-instance assembly.
//!
//! Every distractor image must match nothing under the expression's tree;
//! the four types then differ in how much of the expression they share with
//! the target image.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::expression::ExpressionRecord;
use crate::ids::{ImageId, ObjectId};
use crate::reasoning::{match_tree, AttributeLexicon};
use crate::scene_graph::{BoundingBox, Corpus, SceneGraph};

pub const DEFAULT_PER_TYPE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistractorType {
    DiffCat,
    Cat,
    CatAttr,
    CatCat,
}

impl DistractorType {
    pub const ALL: [DistractorType; 4] = [
        DistractorType::DiffCat,
        DistractorType::Cat,
        DistractorType::CatAttr,
        DistractorType::CatCat,
    ];

    /// Fill order: the most constrained type claims images first.
    pub const PRIORITY: [DistractorType; 4] = [
        DistractorType::CatCat,
        DistractorType::CatAttr,
        DistractorType::Cat,
        DistractorType::DiffCat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistractorType::DiffCat => "DiffCat",
            DistractorType::Cat => "Cat",
            DistractorType::CatAttr => "CatAttr",
            DistractorType::CatCat => "CatCat",
        }
    }
}

impl fmt::Display for DistractorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A candidate region; ground-truth boxes serve as proposals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub object_id: ObjectId,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub expression: ExpressionRecord,
    pub target_image: ImageId,
    pub distractors: BTreeMap<DistractorType, Vec<ImageId>>,
    /// Regions of the target image and of every distractor image.
    pub candidate_regions: BTreeMap<ImageId, Vec<Region>>,
}

impl TaskInstance {
    pub fn distractor_images(&self) -> impl Iterator<Item = &ImageId> {
        self.distractors.values().flatten()
    }

    pub fn region_count(&self) -> usize {
        self.candidate_regions.values().map(Vec::len).sum()
    }
}

pub fn regions_of(graph: &SceneGraph) -> Vec<Region> {
    graph
        .nodes()
        .iter()
        .map(|n| Region {
            object_id: n.id.clone(),
            category: n.category.clone(),
            bbox: n.bbox,
        })
        .collect()
}

/// Whether `graph` qualifies as a distractor of `kind` for `expr`.
///
/// CatCat asks for every category named in the tree; combined with the
/// empty-match requirement this means the objects are present but not in
/// the described configuration.
pub fn type_predicate(
    kind: DistractorType,
    graph: &SceneGraph,
    expr: &ExpressionRecord,
    lexicon: &AttributeLexicon,
) -> bool {
    if graph.image_id() == &expr.image_id {
        return false;
    }
    let root = &expr.tree.root;
    let shape_ok = match kind {
        DistractorType::DiffCat => !graph.has_category(&root.category),
        DistractorType::Cat => graph.has_category(&root.category),
        DistractorType::CatAttr => graph.nodes().iter().any(|n| {
            n.category == root.category && root.attributes.iter().all(|a| n.has_attribute(a))
        }),
        DistractorType::CatCat => expr
            .tree
            .categories()
            .iter()
            .all(|c| graph.has_category(c)),
    };
    shape_ok && match_tree(&expr.tree, graph, lexicon).is_empty()
}

/// Why [`find_distractors_explained`] produced no instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortage {
    pub expression_id: String,
    /// Types that came up short, with the number of images found.
    pub missing: BTreeMap<DistractorType, usize>,
}

/// Assembles the task instance for `expr`, or explains the shortage.
///
/// Types are filled in [`DistractorType::PRIORITY`] order, each taking the
/// smallest qualifying image ids not yet claimed, so the result is a pure
/// function of corpus and expression.
pub fn find_distractors_explained(
    corpus: &Corpus,
    expr: &ExpressionRecord,
    per_type: usize,
    lexicon: &AttributeLexicon,
) -> Result<TaskInstance, Shortage> {
    let mut used: BTreeSet<&ImageId> = BTreeSet::new();
    used.insert(&expr.image_id);
    let mut distractors: BTreeMap<DistractorType, Vec<ImageId>> = BTreeMap::new();
    let mut missing = BTreeMap::new();

    for kind in DistractorType::PRIORITY {
        let candidates: Box<dyn Iterator<Item = &ImageId>> = match kind {
            // The category index narrows every type except DiffCat.
            DistractorType::DiffCat => Box::new(corpus.graphs().keys()),
            _ => Box::new(
                corpus
                    .images_with_category(&expr.tree.root.category)
                    .into_iter(),
            ),
        };
        let mut chosen = Vec::with_capacity(per_type);
        for image in candidates {
            if chosen.len() == per_type {
                break;
            }
            if used.contains(image) {
                continue;
            }
            let graph = &corpus.graphs()[image];
            if type_predicate(kind, graph, expr, lexicon) {
                chosen.push(image.clone());
                used.insert(image);
            }
        }
        if chosen.len() < per_type {
            missing.insert(kind, chosen.len());
        }
        distractors.insert(kind, chosen);
    }

    if !missing.is_empty() {
        return Err(Shortage {
            expression_id: expr.id.clone(),
            missing,
        });
    }
    let mut candidate_regions = BTreeMap::new();
    for image in used {
        if let Some(graph) = corpus.graph(image) {
            candidate_regions.insert(image.clone(), regions_of(graph));
        }
    }
    Ok(TaskInstance {
        expression: expr.clone(),
        target_image: expr.image_id.clone(),
        distractors,
        candidate_regions,
    })
}

pub fn find_distractors(
    corpus: &Corpus,
    expr: &ExpressionRecord,
    per_type: usize,
    lexicon: &AttributeLexicon,
) -> Option<TaskInstance> {
    find_distractors_explained(corpus, expr, per_type, lexicon).ok()
}
