//! Scene-graph corpora: loading, validation, canonicalization and the
//! target-region filter.
//!
//! The on-disk format is the GQA scene-graph export: a JSON object keyed by
//! image id, each image carrying `width`, `height` and an `objects` map whose
//! entries hold a name, a box, attributes and outgoing relations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ImageId, ObjectId};

/// Default minimum box area as a fraction of the image area.
pub const DEFAULT_MIN_AREA_RATIO: f64 = 0.01;

/// Categories that cannot be bounded by a rectangle.
pub const DEFAULT_BLACKLIST: &[&str] = &["sky", "cloud"];

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema violation in image {image}: {detail}")]
    SchemaViolation { image: String, detail: String },
    #[error("dangling edge in image {image}: {subject} -[{predicate}]-> {object}")]
    DanglingEdge {
        image: String,
        subject: String,
        predicate: String,
        object: String,
    },
    #[error("synonym `{synonym}` maps to both `{first}` and `{second}`")]
    SynonymConflict {
        synonym: String,
        first: String,
        second: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    /// Twice the horizontal centre, kept integral so orderings never depend
    /// on float rounding.
    pub fn center_x2(&self) -> u64 {
        2 * u64::from(self.x) + u64::from(self.w)
    }

    pub fn center_x(&self) -> f64 {
        self.center_x2() as f64 / 2.0
    }

    fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: ObjectId,
    pub category: String,
    pub attributes: BTreeSet<String>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl ObjectNode {
    pub fn has_attribute(&self, attribute: &str) -> bool {
        self.attributes.contains(attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationEdge {
    pub subject: ObjectId,
    pub predicate: String,
    pub object: ObjectId,
}

/// One image's objects and directed relations.
///
/// Nodes are kept sorted by id and edges sorted by (subject, predicate,
/// object); both are immutable after construction.
#[derive(Debug, Clone)]
pub struct SceneGraph {
    image_id: ImageId,
    width: u32,
    height: u32,
    nodes: Vec<ObjectNode>,
    edges: Vec<RelationEdge>,
    index: HashMap<ObjectId, usize>,
    // (edge index, object node index) per subject node index
    outgoing: Vec<Vec<(usize, usize)>>,
}

impl PartialEq for SceneGraph {
    fn eq(&self, other: &Self) -> bool {
        self.image_id == other.image_id
            && self.width == other.width
            && self.height == other.height
            && self.nodes == other.nodes
            && self.edges == other.edges
    }
}

impl Eq for SceneGraph {}

impl SceneGraph {
    /// Validates and builds a graph. Duplicate identical edges are dropped
    /// with a warning.
    pub fn new(
        image_id: ImageId,
        width: u32,
        height: u32,
        mut nodes: Vec<ObjectNode>,
        mut edges: Vec<RelationEdge>,
    ) -> Result<Self, LoadError> {
        let violation = |detail: String| LoadError::SchemaViolation {
            image: image_id.to_string(),
            detail,
        };
        if width == 0 || height == 0 {
            return Err(violation(format!("image size {width}x{height} is empty")));
        }
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.category.is_empty() {
                return Err(violation(format!("object {} has an empty name", node.id)));
            }
            if !node.bbox.fits(width, height) {
                return Err(violation(format!(
                    "object {} box {:?} is empty or outside the {width}x{height} image",
                    node.id, node.bbox
                )));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(violation(format!("duplicate object id {}", node.id)));
            }
        }

        edges.sort_by(|a, b| {
            a.subject
                .cmp(&b.subject)
                .then_with(|| a.predicate.cmp(&b.predicate))
                .then_with(|| a.object.cmp(&b.object))
        });
        let before = edges.len();
        edges.dedup();
        if edges.len() != before {
            log::warn!(
                "image {image_id}: dropped {} duplicate relation edge(s)",
                before - edges.len()
            );
        }

        let mut outgoing = vec![Vec::new(); nodes.len()];
        for (e, edge) in edges.iter().enumerate() {
            let dangling = || LoadError::DanglingEdge {
                image: image_id.to_string(),
                subject: edge.subject.to_string(),
                predicate: edge.predicate.clone(),
                object: edge.object.to_string(),
            };
            let s = *index.get(&edge.subject).ok_or_else(dangling)?;
            let o = *index.get(&edge.object).ok_or_else(dangling)?;
            if s == o {
                return Err(violation(format!(
                    "self relation `{}` on object {}",
                    edge.predicate, edge.subject
                )));
            }
            if edge.predicate.is_empty() {
                return Err(violation(format!("empty relation name on object {}", edge.subject)));
            }
            outgoing[s].push((e, o));
        }

        Ok(Self {
            image_id,
            width,
            height,
            nodes,
            edges,
            index,
            outgoing,
        })
    }

    pub fn image_id(&self) -> &ImageId {
        &self.image_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn nodes(&self) -> &[ObjectNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[RelationEdge] {
        &self.edges
    }

    pub fn node_index(&self, id: &ObjectId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &ObjectId) -> Option<&ObjectNode> {
        self.node_index(id).map(|i| &self.nodes[i])
    }

    /// Outgoing edges of node `i` as (predicate, object node index).
    pub fn outgoing(&self, i: usize) -> impl Iterator<Item = (&str, usize)> + '_ {
        self.outgoing[i]
            .iter()
            .map(move |&(e, o)| (self.edges[e].predicate.as_str(), o))
    }

    pub fn has_category(&self, category: &str) -> bool {
        self.nodes.iter().any(|n| n.category == category)
    }

    /// Node indices of `category`, sorted left to right by box centre with
    /// ties broken by ascending id.
    pub fn left_to_right(&self, category: &str) -> Vec<usize> {
        let mut peers: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].category == category)
            .collect();
        // nodes are id-sorted, so a stable sort on the centre keeps id order on ties
        peers.sort_by_key(|&i| self.nodes[i].bbox.center_x2());
        peers
    }

    pub fn image_area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

/// Canonical term → surface synonyms, the canonical term always first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    entries: BTreeMap<String, Vec<String>>,
    reverse: HashMap<String, String>,
}

impl SynonymTable {
    pub fn new(raw: BTreeMap<String, Vec<String>>) -> Result<Self, LoadError> {
        let mut entries = BTreeMap::new();
        let mut reverse: HashMap<String, String> = HashMap::new();
        for (canonical, synonyms) in raw {
            let canonical = normalize(&canonical);
            let mut list = vec![canonical.clone()];
            for s in synonyms {
                let s = normalize(&s);
                if !s.is_empty() && !list.contains(&s) {
                    list.push(s);
                }
            }
            for s in &list {
                if let Some(prev) = reverse.get(s) {
                    if *prev != canonical {
                        return Err(LoadError::SynonymConflict {
                            synonym: s.clone(),
                            first: prev.clone(),
                            second: canonical,
                        });
                    }
                }
                reverse.insert(s.clone(), canonical.clone());
            }
            entries.insert(canonical, list);
        }
        Ok(Self { entries, reverse })
    }

    pub fn from_json_reader(reader: impl Read) -> Result<Self, LoadError> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_reader(reader)
            .map_err(|e| LoadError::MalformedDocument(e.to_string()))?;
        Self::new(raw)
    }

    /// Maps a surface term to its canonical form. Unknown terms are their own
    /// canonical form.
    pub fn canonicalize(&self, term: &str) -> String {
        let term = normalize(term);
        match self.reverse.get(&term) {
            Some(c) => c.clone(),
            None => term,
        }
    }

    /// Surface forms of a canonical term; entry 0 is the term itself.
    pub fn surfaces<'a>(&'a self, canonical: &'a str) -> SurfaceForms<'a> {
        match self.entries.get(canonical) {
            Some(list) => SurfaceForms::Table(list),
            None => SurfaceForms::Verbatim(canonical),
        }
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<String>> {
        &self.entries
    }

    pub fn contains_surface(&self, surface: &str) -> bool {
        self.reverse.contains_key(surface)
    }
}

pub enum SurfaceForms<'a> {
    Table(&'a [String]),
    Verbatim(&'a str),
}

impl<'a> SurfaceForms<'a> {
    pub fn canonical(&self) -> &'a str {
        match self {
            SurfaceForms::Table(list) => &list[0],
            SurfaceForms::Verbatim(s) => s,
        }
    }

    /// Synonyms other than the canonical form.
    pub fn alternatives(&self) -> &'a [String] {
        match self {
            SurfaceForms::Table(list) => &list[1..],
            SurfaceForms::Verbatim(_) => &[],
        }
    }
}

fn normalize(term: &str) -> String {
    term.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Validated scene graphs plus an index from category to its objects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    graphs: BTreeMap<ImageId, SceneGraph>,
    category_index: BTreeMap<String, Vec<(ImageId, ObjectId)>>,
}

impl Corpus {
    pub fn from_graphs(graphs: impl IntoIterator<Item = SceneGraph>) -> Self {
        let graphs: BTreeMap<ImageId, SceneGraph> = graphs
            .into_iter()
            .map(|g| (g.image_id.clone(), g))
            .collect();
        let mut category_index: BTreeMap<String, Vec<(ImageId, ObjectId)>> = BTreeMap::new();
        for (image_id, graph) in &graphs {
            for node in &graph.nodes {
                category_index
                    .entry(node.category.clone())
                    .or_default()
                    .push((image_id.clone(), node.id.clone()));
            }
        }
        let corpus = Self {
            graphs,
            category_index,
        };
        debug_assert!(corpus.index_is_consistent());
        corpus
    }

    /// Checks that the category index is exactly the inverse of node
    /// categories.
    pub fn index_is_consistent(&self) -> bool {
        let indexed: usize = self.category_index.values().map(Vec::len).sum();
        let total: usize = self.graphs.values().map(|g| g.nodes.len()).sum();
        indexed == total
            && self.category_index.iter().all(|(category, entries)| {
                entries.iter().all(|(image, object)| {
                    self.graphs
                        .get(image)
                        .and_then(|g| g.node(object))
                        .is_some_and(|n| &n.category == category)
                })
            })
    }

    pub fn graphs(&self) -> &BTreeMap<ImageId, SceneGraph> {
        &self.graphs
    }

    pub fn graph(&self, image_id: &ImageId) -> Option<&SceneGraph> {
        self.graphs.get(image_id)
    }

    pub fn category_index(&self) -> &BTreeMap<String, Vec<(ImageId, ObjectId)>> {
        &self.category_index
    }

    /// Ascending image ids containing at least one object of `category`.
    pub fn images_with_category(&self, category: &str) -> Vec<&ImageId> {
        let mut images: Vec<&ImageId> = self
            .category_index
            .get(category)
            .map(|entries| entries.iter().map(|(i, _)| i).collect())
            .unwrap_or_default();
        images.sort();
        images.dedup();
        images
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.graphs.values().map(|g| g.edges.len()).sum()
    }

    /// Serializes back to the GQA-compatible document.
    pub fn to_gqa(&self) -> BTreeMap<String, RawImage> {
        self.graphs
            .values()
            .map(|g| {
                let objects = g
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| {
                        let relations = g.outgoing[i]
                            .iter()
                            .map(|&(e, o)| RawRelation {
                                name: g.edges[e].predicate.clone(),
                                object: g.nodes[o].id.to_string(),
                            })
                            .collect();
                        let raw = RawObject {
                            name: n.category.clone(),
                            x: i64::from(n.bbox.x),
                            y: i64::from(n.bbox.y),
                            w: i64::from(n.bbox.w),
                            h: i64::from(n.bbox.h),
                            attributes: n.attributes.iter().cloned().collect(),
                            relations,
                        };
                        (n.id.to_string(), raw)
                    })
                    .collect();
                let raw = RawImage {
                    width: i64::from(g.width),
                    height: i64::from(g.height),
                    objects,
                };
                (g.image_id.to_string(), raw)
            })
            .collect()
    }

    pub fn to_gqa_json(&self) -> String {
        serde_json::to_string(&self.to_gqa()).expect("corpus serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawImage {
    pub width: i64,
    pub height: i64,
    pub objects: BTreeMap<String, RawObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawObject {
    pub name: String,
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub relations: Vec<RawRelation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRelation {
    pub name: String,
    pub object: String,
}

/// Reads a GQA-style scene-graph document, canonicalizing every category,
/// attribute and relation name through `synonyms`.
pub fn load_corpus(source: impl Read, synonyms: &SynonymTable) -> Result<Corpus, LoadError> {
    let value: serde_json::Value =
        serde_json::from_reader(source).map_err(|e| LoadError::MalformedDocument(e.to_string()))?;
    let serde_json::Value::Object(images) = value else {
        return Err(LoadError::SchemaViolation {
            image: String::new(),
            detail: "top level must be a map of image id to scene graph".into(),
        });
    };
    let mut graphs = Vec::with_capacity(images.len());
    for (image_id, raw) in images {
        let raw: RawImage = serde_json::from_value(raw).map_err(|e| LoadError::SchemaViolation {
            image: image_id.clone(),
            detail: e.to_string(),
        })?;
        graphs.push(graph_from_raw(ImageId(image_id), raw, synonyms)?);
    }
    Ok(Corpus::from_graphs(graphs))
}

fn pixels(image: &ImageId, what: &str, v: i64) -> Result<u32, LoadError> {
    u32::try_from(v).map_err(|_| LoadError::SchemaViolation {
        image: image.to_string(),
        detail: format!("{what} = {v} is not a valid pixel count"),
    })
}

fn graph_from_raw(
    image_id: ImageId,
    raw: RawImage,
    synonyms: &SynonymTable,
) -> Result<SceneGraph, LoadError> {
    let width = pixels(&image_id, "width", raw.width)?;
    let height = pixels(&image_id, "height", raw.height)?;
    let mut nodes = Vec::with_capacity(raw.objects.len());
    let mut edges = Vec::new();
    for (id, obj) in raw.objects {
        let bbox = BoundingBox {
            x: pixels(&image_id, "x", obj.x)?,
            y: pixels(&image_id, "y", obj.y)?,
            w: pixels(&image_id, "w", obj.w)?,
            h: pixels(&image_id, "h", obj.h)?,
        };
        let id = ObjectId(id);
        for rel in obj.relations {
            edges.push(RelationEdge {
                subject: id.clone(),
                predicate: synonyms.canonicalize(&rel.name),
                object: ObjectId(rel.object),
            });
        }
        nodes.push(ObjectNode {
            id,
            category: synonyms.canonicalize(&obj.name),
            attributes: obj
                .attributes
                .iter()
                .map(|a| synonyms.canonicalize(a))
                .filter(|a| !a.is_empty())
                .collect(),
            bbox,
        });
    }
    SceneGraph::new(image_id, width, height, nodes, edges)
}

/// Area threshold and category blacklist applied before generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFilter {
    pub min_area_ratio: f64,
    pub blacklist: BTreeSet<String>,
}

impl Default for TargetFilter {
    fn default() -> Self {
        Self {
            min_area_ratio: DEFAULT_MIN_AREA_RATIO,
            blacklist: DEFAULT_BLACKLIST.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetRejection {
    Area,
    Blacklist,
}

impl TargetFilter {
    pub fn check(&self, graph: &SceneGraph, node: &ObjectNode) -> Result<(), TargetRejection> {
        if self.blacklist.contains(&node.category) {
            return Err(TargetRejection::Blacklist);
        }
        let ratio = node.bbox.area() as f64 / graph.image_area() as f64;
        if ratio < self.min_area_ratio {
            return Err(TargetRejection::Area);
        }
        Ok(())
    }
}

/// Ids of objects large enough and not blacklisted, ascending.
pub fn eligible_targets(
    graph: &SceneGraph,
    min_area_ratio: f64,
    blacklist: &BTreeSet<String>,
) -> Vec<ObjectId> {
    let area = graph.image_area() as f64;
    graph
        .nodes()
        .iter()
        .filter(|n| !blacklist.contains(&n.category))
        .filter(|n| n.bbox.area() as f64 / area >= min_area_ratio)
        .map(|n| n.id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn load(doc: &str) -> Result<Corpus, LoadError> {
        load_corpus(doc.as_bytes(), &SynonymTable::default())
    }

    #[test]
    fn minimal_document_loads() {
        let corpus = load(
            r#"{"1": {"width": 100, "height": 100, "objects": {
                "5": {"name": "cat", "x": 10, "y": 10, "w": 20, "h": 20, "attributes": [], "relations": []}}}}"#,
        )
        .unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.category_index().len(), 1);
        assert_eq!(corpus.category_index()["cat"].len(), 1);
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let err = load(
            r#"{"1": {"width": 100, "height": 100, "objects": {
                "5": {"name": "cat", "x": 0, "y": 0, "w": 5, "h": 5,
                      "relations": [{"name": "near", "object": "9"}]}}}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, LoadError::DanglingEdge { .. }), "{err}");
    }

    #[test]
    fn syntax_and_schema_errors_are_distinct() {
        assert!(matches!(load("{\"1\": "), Err(LoadError::MalformedDocument(_))));
        let missing = r#"{"1": {"width": 10, "objects": {}}}"#;
        assert!(matches!(load(missing), Err(LoadError::SchemaViolation { .. })));
        let outside = r#"{"1": {"width": 10, "height": 10, "objects": {
            "1": {"name": "cat", "x": 5, "y": 0, "w": 6, "h": 2}}}}"#;
        assert!(matches!(load(outside), Err(LoadError::SchemaViolation { .. })));
        let negative = r#"{"1": {"width": 10, "height": 10, "objects": {
            "1": {"name": "cat", "x": -1, "y": 0, "w": 6, "h": 2}}}}"#;
        assert!(matches!(load(negative), Err(LoadError::SchemaViolation { .. })));
        let zero = r#"{"1": {"width": 10, "height": 10, "objects": {
            "1": {"name": "cat", "x": 0, "y": 0, "w": 0, "h": 2}}}}"#;
        assert!(matches!(load(zero), Err(LoadError::SchemaViolation { .. })));
    }

    #[test]
    fn duplicate_edges_are_deduplicated() {
        let corpus = load(
            r#"{"1": {"width": 100, "height": 100, "objects": {
                "1": {"name": "cat", "x": 0, "y": 0, "w": 5, "h": 5,
                      "relations": [{"name": "near", "object": "2"}, {"name": "near", "object": "2"}]},
                "2": {"name": "dog", "x": 0, "y": 0, "w": 5, "h": 5}}}}"#,
        )
        .unwrap();
        assert_eq!(corpus.edge_count(), 1);
    }

    #[test]
    fn synonyms_canonicalize_terms() {
        let mut raw = BTreeMap::new();
        raw.insert("cat".to_string(), vec!["kitty".to_string(), "feline".to_string()]);
        let table = SynonymTable::new(raw).unwrap();
        let corpus = load_corpus(
            r#"{"1": {"width": 10, "height": 10, "objects": {
                "1": {"name": "kitty", "x": 0, "y": 0, "w": 5, "h": 5}}}}"#
                .as_bytes(),
            &table,
        )
        .unwrap();
        assert!(corpus.category_index().contains_key("cat"));
        assert_eq!(table.surfaces("cat").alternatives(), ["kitty", "feline"]);
        assert_eq!(table.canonicalize("unknown term"), "unknown term");
    }

    #[test]
    fn conflicting_synonyms_are_rejected() {
        let mut raw = BTreeMap::new();
        raw.insert("cat".to_string(), vec!["kitty".to_string()]);
        raw.insert("kitten".to_string(), vec!["kitty".to_string()]);
        assert!(matches!(
            SynonymTable::new(raw),
            Err(LoadError::SynonymConflict { .. })
        ));
    }

    fn graph_with_boxes(boxes: &[(&str, BoundingBox)]) -> SceneGraph {
        let nodes = boxes
            .iter()
            .enumerate()
            .map(|(i, (cat, b))| ObjectNode {
                id: ObjectId(i.to_string()),
                category: cat.to_string(),
                attributes: BTreeSet::new(),
                bbox: *b,
            })
            .collect();
        SceneGraph::new("img".into(), 100, 100, nodes, vec![]).unwrap()
    }

    #[test]
    fn eligibility_examples() {
        let g = graph_with_boxes(&[
            ("cup", BoundingBox::new(0, 0, 5, 10)),   // 0.5%
            ("sky", BoundingBox::new(0, 0, 100, 50)),  // blacklisted
            ("wall", BoundingBox::new(0, 0, 100, 100)), // full image
        ]);
        let filter = TargetFilter::default();
        let ids = eligible_targets(&g, filter.min_area_ratio, &filter.blacklist);
        assert_eq!(ids, vec![ObjectId::from("2")]);
        let all = eligible_targets(&g, 0.0, &BTreeSet::new());
        assert_eq!(all.len(), 3);
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(term in "[a-c ]{0,6}") {
            let mut raw = BTreeMap::new();
            raw.insert("a".to_string(), vec!["b".to_string(), "a b".to_string()]);
            raw.insert("c".to_string(), vec!["cc".to_string()]);
            let table = SynonymTable::new(raw).unwrap();
            let once = table.canonicalize(&term);
            prop_assert_eq!(table.canonicalize(&once), once);
        }

        #[test]
        fn eligibility_is_monotone_in_ratio(
            boxes in proptest::collection::vec((0u32..50, 0u32..50, 1u32..50, 1u32..50), 1..10),
            lo in 0.0f64..1.0,
            hi in 0.0f64..1.0,
        ) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let boxes: Vec<(&str, BoundingBox)> = boxes
                .into_iter()
                .map(|(x, y, w, h)| ("thing", BoundingBox::new(x, y, w, h)))
                .collect();
            let g = graph_with_boxes(&boxes);
            let loose = eligible_targets(&g, lo, &BTreeSet::new());
            let strict = eligible_targets(&g, hi, &BTreeSet::new());
            prop_assert!(strict.iter().all(|id| loose.contains(id)));
        }
    }
}
