//! Seeded synthetic scene graphs for fixtures, tests and benchmarks.
//!
//! The vocabulary is small on purpose: with few categories most images
//! share objects with many others, so every distractor type has candidates.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene_graph::{BoundingBox, Corpus, ObjectNode, RelationEdge, SceneGraph};

pub const CATEGORIES: &[&str] = &["cat", "dog", "man", "woman", "table", "chair", "cup", "bag"];

pub const ATTRIBUTES: &[&str] = &[
    "white", "black", "red", "blue", "brown", "wooden", "metal", "striped", "round", "small", "sleeping",
];

pub const RELATIONS: &[&str] = &[
    "holding",
    "on",
    "near",
    "behind",
    "next to",
    "to the left of",
    "under",
    "looking at",
    "sitting on",
];

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;

/// `images` graphs of `objects` objects each; ids count up from 1.
pub fn synthetic_corpus(images: usize, objects: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = (1..=images).map(|i| synthetic_graph(&i.to_string(), objects, &mut rng));
    Corpus::from_graphs(graphs.collect::<Vec<_>>())
}

fn synthetic_graph(image: &str, objects: usize, rng: &mut ChaCha8Rng) -> SceneGraph {
    let nodes: Vec<ObjectNode> = (1..=objects)
        .map(|k| {
            let w = rng.random_range(50..200);
            let h = rng.random_range(50..200);
            let attr_count = rng.random_range(0..=2);
            let attributes: BTreeSet<String> = ATTRIBUTES
                .choose_multiple(rng, attr_count)
                .map(|s| s.to_string())
                .collect();
            ObjectNode {
                id: k.to_string().into(),
                category: CATEGORIES.choose(rng).expect("non-empty").to_string(),
                attributes,
                bbox: BoundingBox::new(rng.random_range(0..WIDTH - w), rng.random_range(0..HEIGHT - h), w, h),
            }
        })
        .collect();
    let mut edges = BTreeSet::new();
    if objects > 1 {
        for s in 1..=objects {
            for _ in 0..rng.random_range(1..=2) {
                let mut o = rng.random_range(1..objects);
                if o >= s {
                    o += 1;
                }
                let p = RELATIONS.choose(rng).expect("non-empty");
                edges.insert((s, p.to_string(), o));
            }
        }
    }
    let edges = edges
        .into_iter()
        .map(|(s, predicate, o)| RelationEdge {
            subject: s.to_string().into(),
            predicate,
            object: o.to_string().into(),
        })
        .collect();
    SceneGraph::new(image.into(), WIDTH, HEIGHT, nodes, edges).expect("synthetic graph is valid")
}
