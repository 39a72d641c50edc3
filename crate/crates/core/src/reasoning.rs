//! Logic forms, reasoning trees, the semantic matcher and the per-form tree
//! parsers.
//!
//! The matcher is the single source of truth for what an expression refers
//! to. Every parser verifies its output against it, and distractor mining
//! uses it to prove that no region of a distractor image fits the tree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Read;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::RelationWeights;
use crate::ids::ObjectId;
use crate::scene_graph::SceneGraph;

/// Default number of samples a parser draws before giving up.
pub const DEFAULT_RETRY_BUDGET: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogicForm {
    Chain,
    And,
    Or,
    Order,
    Same,
    Not,
}

impl LogicForm {
    pub const ALL: [LogicForm; 6] = [
        LogicForm::Chain,
        LogicForm::And,
        LogicForm::Or,
        LogicForm::Order,
        LogicForm::Same,
        LogicForm::Not,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LogicForm::Chain => "chain",
            LogicForm::And => "and",
            LogicForm::Or => "or",
            LogicForm::Order => "order",
            LogicForm::Same => "same",
            LogicForm::Not => "not",
        }
    }
}

impl fmt::Display for LogicForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LogicForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LogicForm::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown logic form `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }
}

/// 1-based position among same-category objects, counted from `direction`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrderSpec {
    pub index: u32,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeCategory {
    #[serde(alias = "colour")]
    Color,
    Shape,
    Material,
    Gender,
    Pattern,
}

impl AttributeCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributeCategory::Color => "color",
            AttributeCategory::Shape => "shape",
            AttributeCategory::Material => "material",
            AttributeCategory::Gender => "gender",
            AttributeCategory::Pattern => "pattern",
        }
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("malformed lexicon: {0}")]
    Malformed(String),
    #[error("attribute `{value}` listed under both {first} and {second}")]
    Conflict {
        value: String,
        first: &'static str,
        second: &'static str,
    },
}

/// Attribute value → attribute category, used by the `same` form.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttributeLexicon {
    map: BTreeMap<String, AttributeCategory>,
}

impl AttributeLexicon {
    pub fn new(
        groups: BTreeMap<AttributeCategory, Vec<String>>,
    ) -> Result<Self, LexiconError> {
        let mut map = BTreeMap::new();
        for (category, values) in groups {
            for value in values {
                if let Some(prev) = map.insert(value.clone(), category) {
                    if prev != category {
                        return Err(LexiconError::Conflict {
                            value,
                            first: prev.as_str(),
                            second: category.as_str(),
                        });
                    }
                }
            }
        }
        Ok(Self { map })
    }

    /// Reads `{"color": ["red", ...], "material": [...], ...}`.
    pub fn from_json_reader(reader: impl Read) -> Result<Self, LexiconError> {
        let groups: BTreeMap<AttributeCategory, Vec<String>> =
            serde_json::from_reader(reader).map_err(|e| LexiconError::Malformed(e.to_string()))?;
        Self::new(groups)
    }

    /// The lexicon bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_json_reader(include_str!("../data/attribute_lexicon.json").as_bytes())
            .expect("bundled lexicon is valid")
    }

    pub fn category(&self, value: &str) -> Option<AttributeCategory> {
        self.map.get(value).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeNode {
    pub category: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<OrderSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negated_attributes: Vec<String>,
}

impl TreeNode {
    pub fn new(category: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            attributes: Vec::new(),
            order: None,
            negated_attributes: Vec::new(),
        }
    }

    pub fn with_attributes<I, S>(mut self, attributes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.attributes = attributes.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_order(mut self, index: u32, direction: Direction) -> Self {
        self.order = Some(OrderSpec { index, direction });
        self
    }

    pub fn with_negated<I, S>(mut self, attributes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.negated_attributes = attributes.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeKind {
    Relation { predicate: String },
    SameAttribute { category: AttributeCategory },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreeEdge {
    #[serde(flatten)]
    pub kind: EdgeKind,
    pub child: TreeNode,
}

impl TreeEdge {
    pub fn relation(predicate: impl Into<String>, child: TreeNode) -> Self {
        Self {
            kind: EdgeKind::Relation {
                predicate: predicate.into(),
            },
            child,
        }
    }

    pub fn same(category: AttributeCategory, child: TreeNode) -> Self {
        Self {
            kind: EdgeKind::SameAttribute { category },
            child,
        }
    }

    pub fn predicate(&self) -> Option<&str> {
        match &self.kind {
            EdgeKind::Relation { predicate } => Some(predicate),
            EdgeKind::SameAttribute { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Junction {
    And,
    Or,
    None,
}

/// Typed logic skeleton of one expression. `root` is the target object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasoningTree {
    pub form: LogicForm,
    pub root: TreeNode,
    #[serde(default)]
    pub edges: Vec<TreeEdge>,
    /// Second hop of a chain, hanging off `edges[0].child`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_extension: Option<TreeEdge>,
    pub junction: Junction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("ill-formed {form} tree: {detail}")]
pub struct TreeError {
    pub form: LogicForm,
    pub detail: String,
}

impl ReasoningTree {
    pub fn new(form: LogicForm, root: TreeNode, edges: Vec<TreeEdge>) -> Self {
        let junction = match form {
            LogicForm::And => Junction::And,
            LogicForm::Or => Junction::Or,
            _ => Junction::None,
        };
        Self {
            form,
            root,
            edges,
            chain_extension: None,
            junction,
        }
    }

    pub fn with_extension(mut self, extension: TreeEdge) -> Self {
        self.chain_extension = Some(extension);
        self
    }

    /// Checks the structural invariants of each form.
    pub fn validate(&self) -> Result<(), TreeError> {
        let fail = |detail: &str| {
            Err(TreeError {
                form: self.form,
                detail: detail.to_string(),
            })
        };
        let relations_only = self
            .edges
            .iter()
            .chain(self.chain_extension.iter())
            .all(|e| matches!(e.kind, EdgeKind::Relation { .. }));
        let expected_junction = match self.form {
            LogicForm::And => Junction::And,
            LogicForm::Or => Junction::Or,
            _ => Junction::None,
        };
        if self.junction != expected_junction {
            return fail("junction does not match form");
        }
        if self.chain_extension.is_some() && self.form != LogicForm::Chain {
            return fail("only chains take a second hop");
        }
        let children_plain = self
            .edges
            .iter()
            .chain(self.chain_extension.iter())
            .all(|e| e.child.order.is_none() && e.child.negated_attributes.is_empty());
        if !children_plain {
            return fail("order and negation belong to the root only");
        }
        if self.root.order.is_some() != (self.form == LogicForm::Order) {
            return fail("order spec present iff form is order");
        }
        if !self.root.negated_attributes.is_empty() != (self.form == LogicForm::Not) {
            return fail("negated attributes present iff form is not");
        }
        if self.root.order.is_some_and(|o| o.index == 0) {
            return fail("ordinal is 1-based");
        }
        match self.form {
            LogicForm::Chain if self.edges.len() != 1 || !relations_only => {
                fail("chain needs exactly one relation edge from the root")
            }
            LogicForm::And | LogicForm::Or if self.edges.len() != 2 || !relations_only => {
                fail("and/or need exactly two relation edges")
            }
            LogicForm::Order | LogicForm::Not if self.edges.len() > 1 || !relations_only => {
                fail("order/not take at most one relation edge")
            }
            LogicForm::Same
                if self.edges.len() != 1
                    || !matches!(self.edges[0].kind, EdgeKind::SameAttribute { .. }) =>
            {
                fail("same needs exactly one same-attribute edge")
            }
            _ => Ok(()),
        }
    }

    /// Every object category mentioned, root first.
    pub fn categories(&self) -> Vec<&str> {
        let mut out = vec![self.root.category.as_str()];
        for e in self.edges.iter().chain(self.chain_extension.iter()) {
            out.push(e.child.category.as_str());
        }
        out
    }

    /// Relation predicates of all edges, including the chain extension.
    pub fn predicates(&self) -> Vec<&str> {
        self.edges
            .iter()
            .chain(self.chain_extension.iter())
            .filter_map(TreeEdge::predicate)
            .collect()
    }

    pub fn nodes(&self) -> Vec<&TreeNode> {
        let mut out = vec![&self.root];
        for e in self.edges.iter().chain(self.chain_extension.iter()) {
            out.push(&e.child);
        }
        out
    }
}

fn fmt_node(node: &TreeNode, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    f.write_str(&node.category)?;
    let mut parts: Vec<String> = Vec::new();
    if let Some(o) = node.order {
        parts.push(ordinal_word(o.index));
        parts.push(o.direction.as_str().to_string());
    }
    parts.extend(node.attributes.iter().cloned());
    parts.extend(node.negated_attributes.iter().map(|a| format!("not {a}")));
    if !parts.is_empty() {
        write!(f, " ({})", parts.join(", "))?;
    }
    Ok(())
}

fn fmt_edge(edge: &TreeEdge, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match &edge.kind {
        EdgeKind::Relation { predicate } => write!(f, " -[{predicate}]-> ")?,
        EdgeKind::SameAttribute { category } => write!(f, " -[same {}]-> ", category.as_str())?,
    }
    fmt_node(&edge.child, f)
}

/// Compact arrow notation, e.g. `cat (first, left, sleeping) -[resting on]-> towel (white)`.
impl fmt::Display for ReasoningTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_node(&self.root, f)?;
        let sep = match self.junction {
            Junction::Or => " |",
            _ => " &",
        };
        for (i, edge) in self.edges.iter().enumerate() {
            if i > 0 {
                f.write_str(sep)?;
            }
            fmt_edge(edge, f)?;
            if i == 0 {
                if let Some(ext) = &self.chain_extension {
                    fmt_edge(ext, f)?;
                }
            }
        }
        Ok(())
    }
}

pub fn ordinal_word(index: u32) -> String {
    const WORDS: [&str; 10] = [
        "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth",
        "tenth",
    ];
    match index {
        1..=10 => WORDS[index as usize - 1].to_string(),
        n => {
            let suffix = match (n % 10, n % 100) {
                (_, 11..=13) => "th",
                (1, _) => "st",
                (2, _) => "nd",
                (3, _) => "rd",
                _ => "th",
            };
            format!("{n}{suffix}")
        }
    }
}

/// Evaluates trees against one graph.
struct Evaluator<'a> {
    graph: &'a SceneGraph,
    lexicon: &'a AttributeLexicon,
}

impl Evaluator<'_> {
    fn node_ok(&self, spec: &TreeNode, i: usize) -> bool {
        let node = &self.graph.nodes()[i];
        node.category == spec.category
            && spec.attributes.iter().all(|a| node.has_attribute(a))
            && !spec.negated_attributes.iter().any(|a| node.has_attribute(a))
    }

    fn edge_ok(&self, i: usize, edge: &TreeEdge, extension: Option<&TreeEdge>) -> bool {
        match &edge.kind {
            EdgeKind::Relation { predicate } => self.graph.outgoing(i).any(|(p, o)| {
                p == predicate
                    && self.node_ok(&edge.child, o)
                    && extension.is_none_or(|ext| self.edge_ok(o, ext, None))
            }),
            EdgeKind::SameAttribute { category } => {
                !self.same_witnesses(i, &edge.child, *category).is_empty()
            }
        }
    }

    /// Objects matching `child` that share a `category` value with node `i`
    /// which no third object of either category carries.
    fn same_witnesses(&self, i: usize, child: &TreeNode, category: AttributeCategory) -> Vec<usize> {
        let nodes = self.graph.nodes();
        let me = &nodes[i];
        (0..nodes.len())
            .filter(|&j| j != i && self.node_ok(child, j))
            .filter(|&j| {
                let other = &nodes[j];
                me.attributes
                    .iter()
                    .filter(|v| self.lexicon.category(v) == Some(category))
                    .filter(|v| other.has_attribute(v))
                    .any(|v| {
                        !nodes.iter().enumerate().any(|(k, third)| {
                            k != i
                                && k != j
                                && (third.category == me.category
                                    || third.category == other.category)
                                && third.has_attribute(v)
                        })
                    })
            })
            .collect()
    }

    fn matches(&self, tree: &ReasoningTree) -> BTreeSet<ObjectId> {
        let nodes = self.graph.nodes();
        let ordering = tree
            .root
            .order
            .map(|spec| (spec, self.graph.left_to_right(&tree.root.category)));
        let order_ok = |i: usize| match &ordering {
            None => true,
            Some((spec, peers)) => {
                let k = spec.index as usize;
                if k == 0 || k > peers.len() {
                    return false;
                }
                let at = match spec.direction {
                    Direction::Left => peers[k - 1],
                    Direction::Right => peers[peers.len() - k],
                };
                at == i
            }
        };
        (0..nodes.len())
            .filter(|&i| self.node_ok(&tree.root, i) && order_ok(i))
            .filter(|&i| {
                let mut results = tree.edges.iter().enumerate().map(|(k, e)| {
                    let ext = if k == 0 { tree.chain_extension.as_ref() } else { None };
                    self.edge_ok(i, e, ext)
                });
                if tree.form == LogicForm::Or {
                    results.any(|ok| ok)
                } else {
                    results.all(|ok| ok)
                }
            })
            .map(|i| nodes[i].id.clone())
            .collect()
    }
}

/// Ids of every object in `graph` satisfying `tree`.
pub fn match_tree(
    tree: &ReasoningTree,
    graph: &SceneGraph,
    lexicon: &AttributeLexicon,
) -> BTreeSet<ObjectId> {
    Evaluator { graph, lexicon }.matches(tree)
}

/// True iff `tree` picks out exactly `target` in `graph`.
pub fn is_unambiguous(
    tree: &ReasoningTree,
    graph: &SceneGraph,
    lexicon: &AttributeLexicon,
    target: &ObjectId,
) -> bool {
    let m = match_tree(tree, graph, lexicon);
    m.len() == 1 && m.contains(target)
}

/// Shared inputs of all parsers.
#[derive(Debug, Clone, Copy)]
pub struct ParseContext<'a> {
    pub lexicon: &'a AttributeLexicon,
    /// Inverse-frequency relation weights; uniform when absent.
    pub weights: Option<&'a RelationWeights>,
    pub retry_budget: usize,
}

impl<'a> ParseContext<'a> {
    pub fn new(lexicon: &'a AttributeLexicon) -> Self {
        Self {
            lexicon,
            weights: None,
            retry_budget: DEFAULT_RETRY_BUDGET,
        }
    }

    pub fn with_weights(mut self, weights: &'a RelationWeights) -> Self {
        self.weights = Some(weights);
        self
    }

    fn sound(&self, tree: &ReasoningTree, graph: &SceneGraph, target: usize) -> bool {
        debug_assert!(tree.validate().is_ok(), "{:?}", tree.validate());
        is_unambiguous(tree, graph, self.lexicon, &graph.nodes()[target].id)
    }

    /// Picks one outgoing edge of `from`, weighted by inverse predicate
    /// frequency, among those whose object passes `keep`.
    fn pick_relation<R: Rng + ?Sized>(
        &self,
        graph: &SceneGraph,
        from: usize,
        keep: impl Fn(usize) -> bool,
        rng: &mut R,
    ) -> Option<(String, usize)> {
        let candidates: Vec<(&str, usize)> =
            graph.outgoing(from).filter(|&(_, o)| keep(o)).collect();
        if candidates.is_empty() {
            return None;
        }
        let pick = match self.weights {
            Some(w) => {
                let weights: Vec<f64> = candidates.iter().map(|(p, _)| w.weight(p)).collect();
                WeightedIndex::new(&weights).ok()?.sample(rng)
            }
            None => rng.random_range(0..candidates.len()),
        };
        let (p, o) = candidates[pick];
        Some((p.to_string(), o))
    }
}

/// Draws 0–2 attributes uniformly from `pool`, returned in pool order.
fn sample_attributes<R: Rng + ?Sized>(pool: &[&str], rng: &mut R) -> Vec<String> {
    let k = rng.random_range(0..=pool.len().min(2));
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].to_string()).collect()
}

fn attribute_pool(graph: &SceneGraph, i: usize) -> Vec<&str> {
    graph.nodes()[i].attributes.iter().map(String::as_str).collect()
}

fn sampled_node<R: Rng + ?Sized>(graph: &SceneGraph, i: usize, rng: &mut R) -> TreeNode {
    let pool = attribute_pool(graph, i);
    TreeNode::new(graph.nodes()[i].category.clone()).with_attributes(sample_attributes(&pool, rng))
}

/// A chain of `depth` (1 or 2) relation hops rooted at `target`.
pub fn parse_chain<R: Rng + ?Sized>(
    graph: &SceneGraph,
    target: &ObjectId,
    depth: u8,
    ctx: &ParseContext<'_>,
    rng: &mut R,
) -> Option<ReasoningTree> {
    let t = graph.node_index(target)?;
    if !(1..=2).contains(&depth) {
        return None;
    }
    for _ in 0..ctx.retry_budget {
        let (p0, o1) = ctx.pick_relation(graph, t, |o| o != t, rng)?;
        let root = sampled_node(graph, t, rng);
        let child = sampled_node(graph, o1, rng);
        let mut tree = ReasoningTree::new(LogicForm::Chain, root, vec![TreeEdge::relation(p0, child)]);
        if depth == 2 {
            let Some((p1, o2)) = ctx.pick_relation(graph, o1, |o| o != t && o != o1, rng) else {
                continue;
            };
            tree = tree.with_extension(TreeEdge::relation(p1, sampled_node(graph, o2, rng)));
        }
        if ctx.sound(&tree, graph, t) {
            return Some(tree);
        }
    }
    None
}

/// Two relation branches to two distinct related objects, joined by `junction`.
pub fn parse_and_or<R: Rng + ?Sized>(
    graph: &SceneGraph,
    target: &ObjectId,
    junction: Junction,
    ctx: &ParseContext<'_>,
    rng: &mut R,
) -> Option<ReasoningTree> {
    let t = graph.node_index(target)?;
    let form = match junction {
        Junction::And => LogicForm::And,
        Junction::Or => LogicForm::Or,
        Junction::None => return None,
    };
    let related: BTreeSet<usize> = graph.outgoing(t).map(|(_, o)| o).filter(|&o| o != t).collect();
    if related.len() < 2 {
        return None;
    }
    for _ in 0..ctx.retry_budget {
        let (p0, o1) = ctx.pick_relation(graph, t, |o| o != t, rng)?;
        let (p1, o2) = ctx.pick_relation(graph, t, |o| o != t && o != o1, rng)?;
        let root = sampled_node(graph, t, rng);
        let first = sampled_node(graph, o1, rng);
        let second = sampled_node(graph, o2, rng);
        let tree = ReasoningTree::new(
            form,
            root,
            vec![TreeEdge::relation(p0, first), TreeEdge::relation(p1, second)],
        );
        if ctx.sound(&tree, graph, t) {
            return Some(tree);
        }
    }
    None
}

/// Ordinal of `target` among same-category objects by box centre, with
/// sampled attributes and, when none were drawn, possibly one relation.
pub fn parse_order<R: Rng + ?Sized>(
    graph: &SceneGraph,
    target: &ObjectId,
    ctx: &ParseContext<'_>,
    rng: &mut R,
) -> Option<ReasoningTree> {
    let t = graph.node_index(target)?;
    let peers = graph.left_to_right(&graph.nodes()[t].category);
    let pos = peers.iter().position(|&i| i == t)?;
    for _ in 0..ctx.retry_budget {
        let direction = if rng.random_bool(0.5) {
            Direction::Left
        } else {
            Direction::Right
        };
        let index = match direction {
            Direction::Left => pos + 1,
            Direction::Right => peers.len() - pos,
        };
        let root = sampled_node(graph, t, rng).with_order(index as u32, direction);
        let mut edges = Vec::new();
        if root.attributes.is_empty() && rng.random_bool(0.5) {
            if let Some((p, o)) = ctx.pick_relation(graph, t, |o| o != t, rng) {
                edges.push(TreeEdge::relation(p, sampled_node(graph, o, rng)));
            }
        }
        let tree = ReasoningTree::new(LogicForm::Order, root, edges);
        if ctx.sound(&tree, graph, t) {
            return Some(tree);
        }
    }
    None
}

/// Values of `category` carried by exactly two objects in the graph, one of
/// them node `t`: (value, category, other node).
fn exclusive_shared_values(
    graph: &SceneGraph,
    lexicon: &AttributeLexicon,
    t: usize,
) -> Vec<(String, AttributeCategory, usize)> {
    let nodes = graph.nodes();
    let mut out = Vec::new();
    for value in &nodes[t].attributes {
        let Some(category) = lexicon.category(value) else {
            continue;
        };
        let holders: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes[i].has_attribute(value))
            .collect();
        if holders.len() == 2 {
            let other = if holders[0] == t { holders[1] } else { holders[0] };
            out.push((value.clone(), category, other));
        }
    }
    out
}

/// Links `target` to the only other object sharing one of its attribute
/// values, naming the attribute category as the relation.
pub fn parse_same<R: Rng + ?Sized>(
    graph: &SceneGraph,
    target: &ObjectId,
    ctx: &ParseContext<'_>,
    rng: &mut R,
) -> Option<ReasoningTree> {
    let t = graph.node_index(target)?;
    let candidates = exclusive_shared_values(graph, ctx.lexicon, t);
    if candidates.is_empty() {
        return None;
    }
    for _ in 0..ctx.retry_budget {
        let (_, category, other) = candidates.choose(rng)?;
        let mut not_in_category = |pool: Vec<&str>| -> Vec<String> {
            let pool: Vec<&str> = pool
                .into_iter()
                .filter(|a| ctx.lexicon.category(a) != Some(*category))
                .collect();
            sample_attributes(&pool, rng)
        };
        let root_attrs = not_in_category(attribute_pool(graph, t));
        let child_attrs = not_in_category(attribute_pool(graph, *other));
        let root = TreeNode::new(graph.nodes()[t].category.clone()).with_attributes(root_attrs);
        let child = TreeNode::new(graph.nodes()[*other].category.clone()).with_attributes(child_attrs);
        let tree = ReasoningTree::new(LogicForm::Same, root, vec![TreeEdge::same(*category, child)]);
        if ctx.sound(&tree, graph, t) {
            return Some(tree);
        }
    }
    None
}

/// Attributes carried by every other object of the target's category but
/// not by the target.
pub fn negatable_attributes(graph: &SceneGraph, t: usize) -> Vec<&str> {
    let nodes = graph.nodes();
    let me = &nodes[t];
    let peers: Vec<usize> = (0..nodes.len())
        .filter(|&i| i != t && nodes[i].category == me.category)
        .collect();
    let Some(&first) = peers.first() else {
        return Vec::new();
    };
    nodes[first]
        .attributes
        .iter()
        .filter(|a| !me.has_attribute(a))
        .filter(|a| peers.iter().all(|&p| nodes[p].has_attribute(a)))
        .map(String::as_str)
        .collect()
}

/// Negates an attribute every same-category peer has and the target lacks.
pub fn parse_not<R: Rng + ?Sized>(
    graph: &SceneGraph,
    target: &ObjectId,
    ctx: &ParseContext<'_>,
    rng: &mut R,
) -> Option<ReasoningTree> {
    let t = graph.node_index(target)?;
    let negatable = negatable_attributes(graph, t);
    if negatable.is_empty() {
        return None;
    }
    for _ in 0..ctx.retry_budget {
        let negated = negatable.choose(rng)?.to_string();
        let root = sampled_node(graph, t, rng).with_negated([negated]);
        let tree = ReasoningTree::new(LogicForm::Not, root, Vec::new());
        if ctx.sound(&tree, graph, t) {
            return Some(tree);
        }
    }
    None
}

enum Extension {
    RootAttribute(String),
    RootEdge,
    ChainHop,
    ChildAttribute(usize),
}

/// Objects realizing root edge `k` of `tree` for node `t`.
fn edge_witnesses(
    graph: &SceneGraph,
    lexicon: &AttributeLexicon,
    tree: &ReasoningTree,
    t: usize,
    k: usize,
) -> Vec<usize> {
    let ev = Evaluator { graph, lexicon };
    let edge = &tree.edges[k];
    let extension = if k == 0 { tree.chain_extension.as_ref() } else { None };
    match &edge.kind {
        EdgeKind::Relation { predicate } => graph
            .outgoing(t)
            .filter(|(p, o)| {
                p == predicate
                    && ev.node_ok(&edge.child, *o)
                    && extension.is_none_or(|ext| ev.edge_ok(*o, ext, None))
            })
            .map(|(_, o)| o)
            .collect(),
        EdgeKind::SameAttribute { category } => ev.same_witnesses(t, &edge.child, *category),
    }
}

fn same_category(tree: &ReasoningTree) -> Option<AttributeCategory> {
    tree.edges.iter().find_map(|e| match e.kind {
        EdgeKind::SameAttribute { category } => Some(category),
        EdgeKind::Relation { .. } => None,
    })
}

/// Adds one constraint that holds for `target` to `base`: a root attribute,
/// a relation edge (order/not), a second chain hop, or an attribute on a
/// related object. Returns `None` when nothing can be added.
pub fn compose<R: Rng + ?Sized>(
    base: &ReasoningTree,
    graph: &SceneGraph,
    target: &ObjectId,
    ctx: &ParseContext<'_>,
    rng: &mut R,
) -> Option<ReasoningTree> {
    let t = graph.node_index(target)?;
    let same_cat = same_category(base);
    let usable = |a: &str| same_cat.is_none_or(|c| ctx.lexicon.category(a) != Some(c));

    let mut options = Vec::new();
    for a in &graph.nodes()[t].attributes {
        if !base.root.attributes.contains(a) && usable(a) {
            options.push(Extension::RootAttribute(a.clone()));
        }
    }
    if matches!(base.form, LogicForm::Order | LogicForm::Not)
        && base.edges.is_empty()
        && graph.outgoing(t).any(|(_, o)| o != t)
    {
        options.push(Extension::RootEdge);
    }
    if base.form == LogicForm::Chain && base.chain_extension.is_none() {
        let hop_possible = edge_witnesses(graph, ctx.lexicon, base, t, 0)
            .into_iter()
            .any(|o1| graph.outgoing(o1).any(|(_, o2)| o2 != t && o2 != o1));
        if hop_possible {
            options.push(Extension::ChainHop);
        }
    }
    for k in 0..base.edges.len() {
        let child = &base.edges[k].child;
        let extendable = edge_witnesses(graph, ctx.lexicon, base, t, k)
            .into_iter()
            .any(|o| {
                graph.nodes()[o]
                    .attributes
                    .iter()
                    .any(|a| !child.attributes.contains(a) && usable(a))
            });
        if extendable {
            options.push(Extension::ChildAttribute(k));
        }
    }

    for _ in 0..ctx.retry_budget {
        let option = options.choose(rng)?;
        let mut tree = base.clone();
        match option {
            Extension::RootAttribute(a) => {
                tree.root.attributes.push(a.clone());
                tree.root.attributes.sort();
            }
            Extension::RootEdge => {
                let (p, o) = ctx.pick_relation(graph, t, |o| o != t, rng)?;
                tree.edges.push(TreeEdge::relation(p, sampled_node(graph, o, rng)));
            }
            Extension::ChainHop => {
                let hops: Vec<usize> = edge_witnesses(graph, ctx.lexicon, base, t, 0)
                    .into_iter()
                    .filter(|&o1| graph.outgoing(o1).any(|(_, o2)| o2 != t && o2 != o1))
                    .collect();
                let o1 = *hops.choose(rng)?;
                let (p, o2) = ctx.pick_relation(graph, o1, |o| o != t && o != o1, rng)?;
                tree.chain_extension = Some(TreeEdge::relation(p, sampled_node(graph, o2, rng)));
            }
            Extension::ChildAttribute(k) => {
                let child = &base.edges[*k].child;
                let mut pool: Vec<&str> = edge_witnesses(graph, ctx.lexicon, base, t, *k)
                    .into_iter()
                    .flat_map(|o| graph.nodes()[o].attributes.iter())
                    .map(String::as_str)
                    .filter(|a| !child.attributes.iter().any(|c| c == a) && usable(a))
                    .collect();
                pool.sort_unstable();
                pool.dedup();
                let a = pool.choose(rng)?.to_string();
                let attrs = &mut tree.edges[*k].child.attributes;
                attrs.push(a);
                attrs.sort();
            }
        }
        if ctx.sound(&tree, graph, t) {
            return Some(tree);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_graph::{BoundingBox, ObjectNode, RelationEdge};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(id: &str, category: &str, attrs: &[&str], x: u32) -> ObjectNode {
        ObjectNode {
            id: id.into(),
            category: category.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            bbox: BoundingBox::new(x, 10, 20, 20),
        }
    }

    fn edge(s: &str, p: &str, o: &str) -> RelationEdge {
        RelationEdge {
            subject: s.into(),
            predicate: p.into(),
            object: o.into(),
        }
    }

    fn graph(nodes: Vec<ObjectNode>, edges: Vec<RelationEdge>) -> SceneGraph {
        SceneGraph::new("g".into(), 400, 100, nodes, edges).unwrap()
    }

    fn ids(items: &[&str]) -> BTreeSet<ObjectId> {
        items.iter().map(|s| ObjectId::from(*s)).collect()
    }

    #[test]
    fn not_tree_on_single_green_apple() {
        let g = graph(vec![node("1", "apple", &["green"], 0)], vec![]);
        let tree = ReasoningTree::new(
            LogicForm::Not,
            TreeNode::new("apple").with_negated(["red"]),
            vec![],
        );
        assert_eq!(match_tree(&tree, &g, &AttributeLexicon::builtin()), ids(&["1"]));
    }

    #[test]
    fn order_tree_selects_leftmost_red_glass() {
        let g = graph(
            vec![
                node("1", "glass", &["red"], 0),
                node("2", "glass", &["clear"], 100),
                node("3", "glass", &["red"], 200),
            ],
            vec![],
        );
        let tree = ReasoningTree::new(
            LogicForm::Order,
            TreeNode::new("glass")
                .with_attributes(["red"])
                .with_order(1, Direction::Left),
            vec![],
        );
        assert_eq!(match_tree(&tree, &g, &AttributeLexicon::builtin()), ids(&["1"]));
        assert_eq!(tree.to_string(), "glass (first, left, red)");
    }

    #[test]
    fn same_requires_pair_exclusive_value() {
        let lex = AttributeLexicon::builtin();
        let tree = ReasoningTree::new(
            LogicForm::Same,
            TreeNode::new("bag"),
            vec![TreeEdge::same(AttributeCategory::Color, TreeNode::new("sweater"))],
        );
        let g = graph(
            vec![node("1", "bag", &["red"], 0), node("2", "sweater", &["red"], 50)],
            vec![],
        );
        assert_eq!(match_tree(&tree, &g, &lex), ids(&["1"]));
        let crowded = graph(
            vec![
                node("1", "bag", &["red"], 0),
                node("2", "sweater", &["red"], 50),
                node("3", "bag", &["red"], 90),
            ],
            vec![],
        );
        assert!(match_tree(&tree, &crowded, &lex).is_empty());
    }

    #[test]
    fn validate_rejects_misshapen_trees() {
        let bad = ReasoningTree::new(LogicForm::And, TreeNode::new("a"), vec![]);
        assert!(bad.validate().is_err());
        let order_without_spec = ReasoningTree::new(LogicForm::Order, TreeNode::new("a"), vec![]);
        assert!(order_without_spec.validate().is_err());
        let ok = ReasoningTree::new(
            LogicForm::Chain,
            TreeNode::new("a"),
            vec![TreeEdge::relation("near", TreeNode::new("b"))],
        );
        assert!(ok.validate().is_ok());
    }

    fn girl_donut_table_graph() -> SceneGraph {
        graph(
            vec![
                node("1", "girl", &["young"], 0),
                node("2", "donut", &["glazed"], 50),
                node("3", "table", &["round"], 100),
                node("4", "girl", &["old"], 150),
            ],
            vec![edge("1", "touching", "2"), edge("2", "on", "3"), edge("4", "near", "3")],
        )
    }

    #[test]
    fn chain_parse_is_sound_and_deterministic() {
        let g = girl_donut_table_graph();
        let lex = AttributeLexicon::builtin();
        let ctx = ParseContext::new(&lex);
        let a = parse_chain(&g, &"1".into(), 2, &ctx, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = parse_chain(&g, &"1".into(), 2, &ctx, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(match_tree(&a, &g, &lex), ids(&["1"]));
        assert_eq!(a.predicates(), ["touching", "on"]);
        assert!(parse_chain(&g, &"3".into(), 1, &ctx, &mut ChaCha8Rng::seed_from_u64(3)).is_none());
    }

    #[test]
    fn and_needs_two_related_objects() {
        let g = girl_donut_table_graph();
        let lex = AttributeLexicon::builtin();
        let ctx = ParseContext::new(&lex);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(parse_and_or(&g, &"1".into(), Junction::And, &ctx, &mut rng).is_none());
    }

    #[test]
    fn order_singleton_is_first_both_ways() {
        let g = graph(vec![node("1", "cat", &[], 0), node("2", "dog", &[], 60)], vec![]);
        let lex = AttributeLexicon::builtin();
        let ctx = ParseContext::new(&lex);
        for seed in 0..8 {
            let tree = parse_order(&g, &"1".into(), &ctx, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(tree.root.order.unwrap().index, 1);
        }
    }

    #[test]
    fn not_needs_peers() {
        let g = graph(vec![node("1", "apple", &["green"], 0)], vec![]);
        let lex = AttributeLexicon::builtin();
        let ctx = ParseContext::new(&lex);
        assert!(parse_not(&g, &"1".into(), &ctx, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
        let g = graph(
            vec![
                node("1", "apple", &["green"], 0),
                node("2", "apple", &["red", "round"], 50),
                node("3", "apple", &["red"], 100),
            ],
            vec![],
        );
        let tree = parse_not(&g, &"1".into(), &ctx, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tree.root.negated_attributes, ["red"]);
    }

    #[test]
    fn ordinals() {
        assert_eq!(ordinal_word(1), "first");
        assert_eq!(ordinal_word(10), "tenth");
        assert_eq!(ordinal_word(11), "11th");
        assert_eq!(ordinal_word(22), "22nd");
        assert_eq!(ordinal_word(113), "113th");
    }

    #[test]
    fn tree_json_round_trips() {
        let tree = ReasoningTree::new(
            LogicForm::Same,
            TreeNode::new("bag"),
            vec![TreeEdge::same(AttributeCategory::Color, TreeNode::new("sweater"))],
        );
        let json = serde_json::to_string(&tree).unwrap();
        assert_eq!(serde_json::from_str::<ReasoningTree>(&json).unwrap(), tree);
    }
}
