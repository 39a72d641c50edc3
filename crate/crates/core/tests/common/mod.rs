//! Fixtures and independent oracles shared by the integration tests.
//!
//! The oracles here deliberately avoid the crate's matcher: they enumerate
//! object tuples and compute ordinals by counting.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use refgen::config::PipelineConfig;
use refgen::distractor::{DistractorType, TaskInstance};
use refgen::expression::{render_text, ExpressionRecord, Token, TokenRole};
use refgen::pipeline::{distract_all, generate_corpus, Resources};
use refgen::reasoning::{AttributeLexicon, Direction, EdgeKind, LogicForm, ReasoningTree, TreeNode};
use refgen::scene_graph::{load_corpus, Corpus, ObjectNode, SceneGraph, SynonymTable};
use refgen::ObjectId;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn load_fixture(name: &str) -> Corpus {
    let file = std::fs::File::open(fixture_path(name)).expect("fixture exists");
    load_corpus(std::io::BufReader::new(file), &SynonymTable::default()).expect("fixture loads")
}

/// Generated instances for a fixture under the default configuration.
pub fn fixture_instances(name: &str) -> (Corpus, Vec<TaskInstance>) {
    let corpus = load_fixture(name);
    let resources = Resources::default();
    let (records, _) = generate_corpus(&corpus, &resources, &PipelineConfig::default());
    let (instances, _) = distract_all(&corpus, &records, 3, &resources.lexicon);
    (corpus, instances)
}

/// `base` with its text replaced by `words` (a list of lowercase words).
pub fn with_words(base: &ExpressionRecord, id: &str, words: &[&str]) -> ExpressionRecord {
    let mut r = base.clone();
    r.id = id.to_string();
    r.tokens = words
        .iter()
        .map(|w| Token {
            text: w.to_string(),
            role: TokenRole::FunctionWord,
        })
        .collect();
    r.text = render_text(&r.tokens);
    r
}

fn node_holds(spec: &TreeNode, obj: &ObjectNode) -> bool {
    obj.category == spec.category
        && spec.attributes.iter().all(|a| obj.attributes.contains(a))
        && spec.negated_attributes.iter().all(|a| !obj.attributes.contains(a))
}

fn has_edge(graph: &SceneGraph, s: &ObjectNode, p: &str, o: &ObjectNode) -> bool {
    graph
        .edges()
        .iter()
        .any(|e| e.subject == s.id && e.predicate == p && e.object == o.id)
}

/// 1-based rank of `x` among its category counted from the left: objects
/// with a smaller doubled centre, or an equal centre and smaller id, come
/// first.
fn rank_from_left(graph: &SceneGraph, x: &ObjectNode) -> usize {
    let key = |o: &ObjectNode| (2 * u64::from(o.bbox.x) + u64::from(o.bbox.w), o.id.clone());
    1 + graph
        .nodes()
        .iter()
        .filter(|o| o.category == x.category && key(o) < key(x))
        .count()
}

fn category_size(graph: &SceneGraph, category: &str) -> usize {
    graph.nodes().iter().filter(|o| o.category == category).count()
}

/// True when `x` and `y` share a value of the attribute category that no
/// other object of either's category carries.
fn same_holds(
    graph: &SceneGraph,
    lexicon: &AttributeLexicon,
    x: &ObjectNode,
    y: &ObjectNode,
    category: refgen::reasoning::AttributeCategory,
) -> bool {
    x.attributes.iter().any(|v| {
        lexicon.category(v) == Some(category)
            && y.attributes.contains(v)
            && graph
                .nodes()
                .iter()
                .filter(|o| (o.category == x.category || o.category == y.category) && o.attributes.contains(v))
                .count()
                == 2
    })
}

/// Brute-force semantic matcher: tests every object as the root and every
/// tuple of objects as witnesses.
pub fn oracle_match(tree: &ReasoningTree, graph: &SceneGraph, lexicon: &AttributeLexicon) -> BTreeSet<ObjectId> {
    let nodes = graph.nodes();
    let mut out = BTreeSet::new();
    for x in nodes {
        if !node_holds(&tree.root, x) {
            continue;
        }
        if let Some(order) = tree.root.order {
            let left = rank_from_left(graph, x);
            let rank = match order.direction {
                Direction::Left => left,
                Direction::Right => category_size(graph, &x.category) + 1 - left,
            };
            if rank != order.index as usize {
                continue;
            }
        }
        let edge_holds = |k: usize| -> bool {
            let edge = &tree.edges[k];
            nodes.iter().any(|y| {
                if !node_holds(&edge.child, y) {
                    return false;
                }
                let direct = match &edge.kind {
                    EdgeKind::Relation { predicate } => has_edge(graph, x, predicate, y),
                    EdgeKind::SameAttribute { category } => y.id != x.id && same_holds(graph, lexicon, x, y, *category),
                };
                if !direct {
                    return false;
                }
                match (&tree.chain_extension, k) {
                    (Some(ext), 0) => nodes.iter().any(|z| {
                        let EdgeKind::Relation { predicate } = &ext.kind else {
                            return false;
                        };
                        node_holds(&ext.child, z) && has_edge(graph, y, predicate, z)
                    }),
                    _ => true,
                }
            })
        };
        let ok = if tree.form == LogicForm::Or {
            (0..tree.edges.len()).any(edge_holds)
        } else {
            (0..tree.edges.len()).all(edge_holds)
        };
        if ok {
            out.insert(x.id.clone());
        }
    }
    out
}

/// Independent restatement of the four distractor predicates, including
/// the no-match requirement checked region by region.
pub fn oracle_type_holds(
    kind: DistractorType,
    graph: &SceneGraph,
    expr: &ExpressionRecord,
    lexicon: &AttributeLexicon,
) -> bool {
    if graph.image_id() == &expr.image_id {
        return false;
    }
    let root = &expr.tree.root;
    let same_cat: Vec<&ObjectNode> = graph.nodes().iter().filter(|o| o.category == root.category).collect();
    let shape = match kind {
        DistractorType::DiffCat => same_cat.is_empty(),
        DistractorType::Cat => !same_cat.is_empty(),
        DistractorType::CatAttr => same_cat
            .iter()
            .any(|o| root.attributes.iter().all(|a| o.attributes.contains(a))),
        DistractorType::CatCat => {
            let present: BTreeSet<&str> = graph.nodes().iter().map(|o| o.category.as_str()).collect();
            expr.tree.nodes().iter().all(|n| present.contains(n.category.as_str()))
        }
    };
    shape && oracle_match(&expr.tree, graph, lexicon).is_empty()
}

/// Reference renderings: template name, tree, expected text.
pub fn exemplar_rows() -> Vec<(&'static str, ReasoningTree, &'static str)> {
    use refgen::reasoning::{AttributeCategory, TreeEdge};
    let n = TreeNode::new;
    vec![
        (
            "basic-chain",
            ReasoningTree::new(
                LogicForm::Chain,
                n("girl").with_attributes(["young"]),
                vec![TreeEdge::relation("touching", n("donut").with_attributes(["glazed"]))],
            )
            .with_extension(TreeEdge::relation("on", n("table").with_attributes(["round"]))),
            "The young girl that is touching the glazed donut that is on the round table.",
        ),
        (
            "basic-and",
            ReasoningTree::new(
                LogicForm::And,
                n("fence").with_attributes(["white"]),
                vec![
                    TreeEdge::relation("near", n("building")),
                    TreeEdge::relation("behind", n("woman").with_attributes(["walking"])),
                ],
            ),
            "The white fence near the building and behind the walking woman.",
        ),
        (
            "basic-or",
            ReasoningTree::new(
                LogicForm::Or,
                n("suitcase").with_attributes(["green"]),
                vec![
                    TreeEdge::relation("behind", n("suitcase").with_attributes(["black"])),
                    TreeEdge::relation("near", n("suitcase").with_attributes(["yellow"])),
                ],
            ),
            "The green suitcase behind the black suitcase or near the yellow suitcase.",
        ),
        (
            "basic-order",
            ReasoningTree::new(
                LogicForm::Order,
                n("glass").with_order(1, Direction::Left).with_attributes(["red"]),
                vec![],
            ),
            "The first glass from the left that is red.",
        ),
        (
            "basic-same",
            ReasoningTree::new(
                LogicForm::Same,
                n("bag"),
                vec![TreeEdge::same(AttributeCategory::Color, n("sweater"))],
            ),
            "The bag that has the same color as the sweater.",
        ),
        (
            "basic-not",
            ReasoningTree::new(LogicForm::Not, n("apple").with_negated(["red"]), vec![]),
            "The apple that is not red.",
        ),
        (
            "order-side",
            ReasoningTree::new(
                LogicForm::Order,
                n("cat").with_order(1, Direction::Left).with_attributes(["sleeping"]),
                vec![TreeEdge::relation("resting on", n("towel").with_attributes(["white"]))],
            ),
            "The cat on the left that is sleeping and resting on the white towel.",
        ),
    ]
}
