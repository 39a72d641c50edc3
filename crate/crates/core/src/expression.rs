//! Surface realization: template parsing and filling, synonym substitution,
//! per-region generation and the word-order / content-word probes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::is_spatial_only;
use crate::ids::{ImageId, ObjectId};
use crate::reasoning::{
    compose, ordinal_word, parse_and_or, parse_chain, parse_not, parse_order, parse_same,
    EdgeKind, Junction, LogicForm, ParseContext, ReasoningTree, TreeNode,
};
use crate::scene_graph::{BoundingBox, SceneGraph, SynonymTable};

pub const DEFAULT_SYNONYM_PROBABILITY: f64 = 0.3;
pub const DEFAULT_MAX_PER_REGION: usize = 2;
pub const DEFAULT_COMPOSE_PROBABILITY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template `{pattern}`: {detail}")]
    Invalid { pattern: String, detail: String },
    #[error("malformed template file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FillError {
    #[error("template is for {template} but tree is {tree}")]
    FormMismatch { template: LogicForm, tree: LogicForm },
    #[error("tree has no value for slot <{0}>")]
    SlotMismatch(String),
    #[error("template leaves {0} of the tree unexpressed")]
    Uncovered(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Joiner {
    Space,
    And,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Obj(u8),
    Att(u8, Joiner),
    Rel(u8),
    Idx,
    Dir,
    Side,
    Cat,
    NegAtt,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        let (base, joiner) = match name.split_once('|') {
            Some((b, "and")) => (b, Joiner::And),
            Some(_) => return None,
            None => (name, Joiner::Space),
        };
        let indexed = |prefix: &str, max: u8| -> Option<u8> {
            base.strip_prefix(prefix)
                .and_then(|n| n.parse::<u8>().ok())
                .filter(|&n| n <= max)
        };
        let slot = match base {
            "idx" => Slot::Idx,
            "dir" => Slot::Dir,
            "side" => Slot::Side,
            "cat" => Slot::Cat,
            "natt0" => Slot::NegAtt,
            _ => {
                if let Some(n) = indexed("obj", 2) {
                    Slot::Obj(n)
                } else if let Some(n) = indexed("att", 2) {
                    Slot::Att(n, joiner)
                } else {
                    Slot::Rel(indexed("rel", 1)?)
                }
            }
        };
        if joiner == Joiner::And && !matches!(slot, Slot::Att(..)) {
            return None;
        }
        Some(slot)
    }

    fn is_attribute(self) -> bool {
        matches!(self, Slot::Att(..))
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Obj(n) => write!(f, "obj{n}"),
            Slot::Att(n, Joiner::Space) => write!(f, "att{n}"),
            Slot::Att(n, Joiner::And) => write!(f, "att{n}|and"),
            Slot::Rel(n) => write!(f, "rel{n}"),
            Slot::Idx => f.write_str("idx"),
            Slot::Dir => f.write_str("dir"),
            Slot::Side => f.write_str("side"),
            Slot::Cat => f.write_str("cat"),
            Slot::NegAtt => f.write_str("natt0"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(Slot),
    Group(Vec<Piece>),
}

/// A surface pattern for one logic form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: Option<String>,
    pub form: LogicForm,
    pub pattern: String,
    pieces: Vec<Piece>,
    slot_list: Vec<Slot>,
}

fn parse_pieces(pattern: &str) -> Result<Vec<Piece>, String> {
    let body = pattern.trim_end();
    let body = body.strip_suffix('.').unwrap_or(body);
    let mut stack: Vec<Vec<Piece>> = vec![Vec::new()];
    let mut word = String::new();
    let mut chars = body.chars();
    fn flush(word: &mut String, stack: &mut [Vec<Piece>]) {
        if !word.is_empty() {
            let w = std::mem::take(word).to_lowercase();
            stack.last_mut().unwrap().push(Piece::Word(w));
        }
    }
    while let Some(c) = chars.next() {
        match c {
            '[' => {
                flush(&mut word, &mut stack);
                stack.push(Vec::new());
            }
            ']' => {
                flush(&mut word, &mut stack);
                if stack.len() < 2 {
                    return Err("unbalanced `]`".into());
                }
                let group = stack.pop().unwrap();
                stack.last_mut().unwrap().push(Piece::Group(group));
            }
            '<' => {
                flush(&mut word, &mut stack);
                let name: String = chars.by_ref().take_while(|&c| c != '>').collect();
                let slot = Slot::parse(&name).ok_or_else(|| format!("unknown slot <{name}>"))?;
                stack.last_mut().unwrap().push(Piece::Slot(slot));
            }
            c if c.is_whitespace() => flush(&mut word, &mut stack),
            c => word.push(c),
        }
    }
    flush(&mut word, &mut stack);
    if stack.len() != 1 {
        return Err("unbalanced `[`".into());
    }
    Ok(stack.pop().unwrap())
}

fn collect_slots(pieces: &[Piece], top_level: bool, out: &mut Vec<(Slot, bool)>) {
    for p in pieces {
        match p {
            Piece::Word(_) => {}
            Piece::Slot(s) => out.push((*s, top_level)),
            Piece::Group(inner) => collect_slots(inner, false, out),
        }
    }
}

fn required_slots(form: LogicForm) -> &'static [Slot] {
    match form {
        LogicForm::Chain => &[Slot::Obj(0), Slot::Rel(0), Slot::Obj(1)],
        LogicForm::And | LogicForm::Or => &[
            Slot::Obj(0),
            Slot::Rel(0),
            Slot::Obj(1),
            Slot::Rel(1),
            Slot::Obj(2),
        ],
        LogicForm::Order => &[Slot::Obj(0)],
        LogicForm::Same => &[Slot::Obj(0), Slot::Cat, Slot::Obj(1)],
        LogicForm::Not => &[Slot::Obj(0), Slot::NegAtt],
    }
}

fn slot_allowed(form: LogicForm, slot: Slot) -> bool {
    match slot {
        Slot::Obj(0) | Slot::Att(0, _) => true,
        Slot::Obj(1) | Slot::Att(1, _) | Slot::Rel(0) => form != LogicForm::Same || slot != Slot::Rel(0),
        Slot::Obj(2) | Slot::Att(2, _) | Slot::Rel(1) => {
            matches!(form, LogicForm::Chain | LogicForm::And | LogicForm::Or)
        }
        Slot::Idx | Slot::Dir | Slot::Side => form == LogicForm::Order,
        Slot::Cat => form == LogicForm::Same,
        Slot::NegAtt => form == LogicForm::Not,
        _ => false,
    }
}

impl Template {
    pub fn new(name: Option<String>, form: LogicForm, pattern: &str) -> Result<Self, TemplateError> {
        let invalid = |detail: String| TemplateError::Invalid {
            pattern: pattern.to_string(),
            detail,
        };
        let pieces = parse_pieces(pattern).map_err(invalid)?;
        let mut slots = Vec::new();
        collect_slots(&pieces, true, &mut slots);
        for (slot, _) in &slots {
            if !slot_allowed(form, *slot) {
                return Err(invalid(format!("slot <{slot}> is not valid for {form}")));
            }
        }
        let top: BTreeSet<String> = slots
            .iter()
            .filter(|(_, top)| *top)
            .map(|(s, _)| s.to_string())
            .collect();
        for req in required_slots(form) {
            if !top.contains(&req.to_string()) {
                return Err(invalid(format!("{form} requires <{req}> outside optional groups")));
            }
        }
        if form == LogicForm::Order {
            let has = |s: &str| top.contains(s);
            if !(has("side") || (has("idx") && has("dir"))) {
                return Err(invalid("order requires <idx> and <dir>, or <side>".into()));
            }
        }
        Ok(Self {
            name,
            form,
            pattern: pattern.to_string(),
            pieces,
            slot_list: slots.into_iter().map(|(s, _)| s).collect(),
        })
    }

    pub fn slot_list(&self) -> &[Slot] {
        &self.slot_list
    }

    /// Lowercased literal words of the pattern.
    pub fn literal_words(&self) -> BTreeSet<String> {
        fn walk(pieces: &[Piece], out: &mut BTreeSet<String>) {
            for p in pieces {
                match p {
                    Piece::Word(w) => {
                        out.insert(w.clone());
                    }
                    Piece::Group(inner) => walk(inner, out),
                    Piece::Slot(_) => {}
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.pieces, &mut out);
        out
    }

    /// Whether this template can express every constraint of `tree`.
    pub fn applies_to(&self, tree: &ReasoningTree) -> bool {
        let bindings = Bindings::new(tree, &mut |s: &str| s.to_string());
        self.form == tree.form && self.render(&bindings).is_ok()
    }

    fn render(&self, b: &Bindings) -> Result<Vec<Token>, FillError> {
        let mut out = Vec::new();
        let mut used = BTreeSet::new();
        render_pieces(&self.pieces, b, true, &mut out, &mut used)?;
        if let Some(missing) = b.facts.iter().find(|f| !used.contains(*f)) {
            return Err(FillError::Uncovered(missing.to_string()));
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    template: Vec<TemplateEntry>,
}

#[derive(Debug, Deserialize)]
struct TemplateEntry {
    name: Option<String>,
    form: LogicForm,
    pattern: String,
}

/// All templates, grouped by form in file order.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    by_form: BTreeMap<LogicForm, Vec<Template>>,
}

impl TemplateSet {
    pub fn from_toml(text: &str) -> Result<Self, TemplateError> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| TemplateError::Malformed(e.to_string()))?;
        let mut by_form: BTreeMap<LogicForm, Vec<Template>> = BTreeMap::new();
        for entry in file.template {
            let t = Template::new(entry.name, entry.form, &entry.pattern)?;
            by_form.entry(t.form).or_default().push(t);
        }
        Ok(Self { by_form })
    }

    pub fn builtin() -> Self {
        Self::from_toml(include_str!("../data/templates.toml")).expect("bundled templates are valid")
    }

    pub fn for_form(&self, form: LogicForm) -> &[Template] {
        self.by_form.get(&form).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn by_name(&self, name: &str) -> Option<&Template> {
        self.by_form
            .values()
            .flatten()
            .find(|t| t.name.as_deref() == Some(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Template> {
        self.by_form.values().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenRole {
    ObjectNoun,
    Attribute,
    Relation,
    Ordinal,
    Direction,
    FunctionWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub role: TokenRole,
}

/// Constraints of a tree that a rendering must mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Fact {
    Obj(u8),
    Att(u8),
    Rel(u8),
    Idx,
    Dir,
    Cat,
    NegAtt,
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fact::Obj(n) => write!(f, "object {n}"),
            Fact::Att(n) => write!(f, "attributes of object {n}"),
            Fact::Rel(n) => write!(f, "relation {n}"),
            Fact::Idx => f.write_str("the ordinal"),
            Fact::Dir => f.write_str("the direction"),
            Fact::Cat => f.write_str("the attribute category"),
            Fact::NegAtt => f.write_str("the negated attribute"),
        }
    }
}

/// Surface words bound to each slot of one tree.
struct Bindings {
    objs: [Option<String>; 3],
    atts: [Option<Vec<String>>; 3],
    rels: [Option<String>; 2],
    idx: Option<(String, bool)>,
    dir: Option<String>,
    cat: Option<String>,
    natt: Option<Vec<String>>,
    facts: Vec<Fact>,
}

impl Bindings {
    fn new(tree: &ReasoningTree, surface: &mut dyn FnMut(&str) -> String) -> Self {
        let mut b = Bindings {
            objs: Default::default(),
            atts: Default::default(),
            rels: Default::default(),
            idx: None,
            dir: None,
            cat: None,
            natt: None,
            facts: Vec::new(),
        };
        fn bind_node(
            b: &mut Bindings,
            n: usize,
            node: &TreeNode,
            surface: &mut dyn FnMut(&str) -> String,
        ) {
            b.objs[n] = Some(surface(&node.category));
            b.facts.push(Fact::Obj(n as u8));
            b.atts[n] = Some(node.attributes.iter().map(|a| surface(a)).collect());
            if !node.attributes.is_empty() {
                b.facts.push(Fact::Att(n as u8));
            }
        }
        bind_node(&mut b, 0, &tree.root, surface);
        let hops: Vec<_> = match tree.form {
            LogicForm::Chain => tree.edges.iter().chain(tree.chain_extension.iter()).collect(),
            _ => tree.edges.iter().collect(),
        };
        for (k, edge) in hops.into_iter().enumerate().take(2) {
            bind_node(&mut b, k + 1, &edge.child, surface);
            match &edge.kind {
                EdgeKind::Relation { predicate } => {
                    b.rels[k] = Some(surface(predicate));
                    b.facts.push(Fact::Rel(k as u8));
                }
                EdgeKind::SameAttribute { category } => {
                    b.cat = Some(category.as_str().to_string());
                    b.facts.push(Fact::Cat);
                }
            }
        }
        if let Some(order) = tree.root.order {
            b.idx = Some((ordinal_word(order.index), order.index == 1));
            b.dir = Some(order.direction.as_str().to_string());
            b.facts.push(Fact::Idx);
            b.facts.push(Fact::Dir);
        }
        if !tree.root.negated_attributes.is_empty() {
            b.natt = Some(tree.root.negated_attributes.iter().map(|a| surface(a)).collect());
            b.facts.push(Fact::NegAtt);
        }
        b
    }

    /// Bound with at least one word.
    fn filled(&self, slot: Slot) -> bool {
        match slot {
            Slot::Obj(n) => self.objs[n as usize].is_some(),
            Slot::Att(n, _) => self.atts[n as usize].as_ref().is_some_and(|a| !a.is_empty()),
            Slot::Rel(n) => self.rels[n as usize].is_some(),
            Slot::Idx => self.idx.is_some(),
            Slot::Dir => self.dir.is_some(),
            Slot::Side => self.idx.as_ref().is_some_and(|(_, first)| *first),
            Slot::Cat => self.cat.is_some(),
            Slot::NegAtt => self.natt.is_some(),
        }
    }

    fn emit(&self, slot: Slot, out: &mut Vec<Token>, used: &mut BTreeSet<Fact>) -> Result<(), FillError> {
        let push_words = |out: &mut Vec<Token>, phrase: &str, role: TokenRole| {
            out.extend(phrase.split_whitespace().map(|w| Token {
                text: w.to_string(),
                role,
            }));
        };
        let missing = || FillError::SlotMismatch(slot.to_string());
        match slot {
            Slot::Obj(n) => {
                let w = self.objs[n as usize].as_ref().ok_or_else(missing)?;
                push_words(out, w, TokenRole::ObjectNoun);
                used.insert(Fact::Obj(n));
            }
            Slot::Att(n, joiner) => {
                // a missing node is an error; an existing node without attributes collapses
                let atts = self.atts[n as usize].as_ref().ok_or_else(missing)?;
                for (i, a) in atts.iter().enumerate() {
                    if i > 0 && joiner == Joiner::And {
                        push_words(out, "and", TokenRole::FunctionWord);
                    }
                    push_words(out, a, TokenRole::Attribute);
                }
                if !atts.is_empty() {
                    used.insert(Fact::Att(n));
                }
            }
            Slot::Rel(n) => {
                let w = self.rels[n as usize].as_ref().ok_or_else(missing)?;
                push_words(out, w, TokenRole::Relation);
                used.insert(Fact::Rel(n));
            }
            Slot::Idx => {
                let (w, _) = self.idx.as_ref().ok_or_else(missing)?;
                push_words(out, w, TokenRole::Ordinal);
                used.insert(Fact::Idx);
            }
            Slot::Dir => {
                let w = self.dir.as_ref().ok_or_else(missing)?;
                push_words(out, w, TokenRole::Direction);
                used.insert(Fact::Dir);
            }
            Slot::Side => {
                if !self.filled(Slot::Side) {
                    return Err(missing());
                }
                push_words(out, self.dir.as_ref().unwrap(), TokenRole::Direction);
                used.insert(Fact::Idx);
                used.insert(Fact::Dir);
            }
            Slot::Cat => {
                let w = self.cat.as_ref().ok_or_else(missing)?;
                push_words(out, w, TokenRole::Relation);
                used.insert(Fact::Cat);
            }
            Slot::NegAtt => {
                let atts = self.natt.as_ref().ok_or_else(missing)?;
                for (i, a) in atts.iter().enumerate() {
                    if i > 0 {
                        push_words(out, "or", TokenRole::FunctionWord);
                    }
                    push_words(out, a, TokenRole::Attribute);
                }
                used.insert(Fact::NegAtt);
            }
        }
        Ok(())
    }
}

fn render_pieces(
    pieces: &[Piece],
    b: &Bindings,
    top_level: bool,
    out: &mut Vec<Token>,
    used: &mut BTreeSet<Fact>,
) -> Result<(), FillError> {
    for piece in pieces {
        match piece {
            Piece::Word(w) => out.push(Token {
                text: w.clone(),
                role: TokenRole::FunctionWord,
            }),
            Piece::Slot(slot) => {
                if !top_level || slot.is_attribute() || b.filled(*slot) {
                    b.emit(*slot, out, used)?;
                } else {
                    return Err(FillError::SlotMismatch(slot.to_string()));
                }
            }
            Piece::Group(inner) => {
                let complete = inner.iter().all(|p| match p {
                    Piece::Slot(s) => b.filled(*s),
                    _ => true,
                });
                if complete {
                    render_pieces(inner, b, false, out, used)?;
                }
            }
        }
    }
    Ok(())
}

/// Joins tokens with single spaces, capitalizes the first letter and adds
/// the terminal period.
pub fn render_text(tokens: &[Token]) -> String {
    let mut text = tokens
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    if let Some(first) = text.chars().next() {
        let upper: String = first.to_uppercase().collect();
        text.replace_range(..first.len_utf8(), &upper);
    }
    text.push('.');
    text
}

/// Text plus role-tagged tokens produced by [`fill`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendering {
    pub text: String,
    pub tokens: Vec<Token>,
}

/// Binds `tree` into `template`. Each content word is swapped for a random
/// synonym with probability `synonym_probability`.
pub fn fill<R: Rng + ?Sized>(
    template: &Template,
    tree: &ReasoningTree,
    synonyms: &SynonymTable,
    synonym_probability: f64,
    rng: &mut R,
) -> Result<Rendering, FillError> {
    if template.form != tree.form {
        return Err(FillError::FormMismatch {
            template: template.form,
            tree: tree.form,
        });
    }
    let mut surface = |canonical: &str| -> String {
        let forms = synonyms.surfaces(canonical);
        let alternatives = forms.alternatives();
        if synonym_probability > 0.0 && !alternatives.is_empty() && rng.random_bool(synonym_probability) {
            alternatives.choose(rng).cloned().unwrap_or_else(|| canonical.to_string())
        } else {
            canonical.to_string()
        }
    };
    let bindings = Bindings::new(tree, &mut surface);
    let tokens = template.render(&bindings)?;
    Ok(Rendering {
        text: render_text(&tokens),
        tokens,
    })
}

/// One generated expression with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub form: LogicForm,
    pub tree: ReasoningTree,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    pub image_id: ImageId,
    pub target_id: ObjectId,
    pub target_box: BoundingBox,
}

impl ExpressionRecord {
    /// Number of words, not counting the terminal period.
    pub fn word_count(&self) -> usize {
        self.text.trim_end_matches('.').split_whitespace().count()
    }

    /// Whether `text` is exactly the rendering of `tokens`.
    pub fn is_consistent(&self) -> bool {
        render_text(&self.tokens) == self.text
    }

    fn with_tokens(&self, tokens: Vec<Token>) -> Self {
        Self {
            text: render_text(&tokens),
            tokens,
            ..self.clone()
        }
    }
}

/// Uniformly permutes the words; roles travel with their words.
pub fn shuffle_words<R: Rng + ?Sized>(record: &ExpressionRecord, rng: &mut R) -> ExpressionRecord {
    let mut tokens = record.tokens.clone();
    tokens.shuffle(rng);
    record.with_tokens(tokens)
}

/// Keeps only object nouns and attributes, in order.
pub fn keep_nouns_adjectives(record: &ExpressionRecord) -> ExpressionRecord {
    let tokens = record
        .tokens
        .iter()
        .filter(|t| matches!(t.role, TokenRole::ObjectNoun | TokenRole::Attribute))
        .cloned()
        .collect();
    record.with_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub forms: Vec<LogicForm>,
    pub max_per_region: usize,
    pub synonym_probability: f64,
    pub compose_probability: f64,
    /// Trees whose relations all come from this list are discarded.
    pub spatial_relations: Option<BTreeSet<String>>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            forms: LogicForm::ALL.to_vec(),
            max_per_region: DEFAULT_MAX_PER_REGION,
            synonym_probability: DEFAULT_SYNONYM_PROBABILITY,
            compose_probability: DEFAULT_COMPOSE_PROBABILITY,
            spatial_relations: None,
        }
    }
}

/// Per-form outcome counts of generation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTally {
    pub generated: BTreeMap<LogicForm, u64>,
    pub ambiguous: BTreeMap<LogicForm, u64>,
    pub spatial_only: u64,
    pub no_template: u64,
    pub over_quota: u64,
}

impl GenerationTally {
    pub fn merge(&mut self, other: &GenerationTally) {
        for (f, n) in &other.generated {
            *self.generated.entry(*f).or_default() += n;
        }
        for (f, n) in &other.ambiguous {
            *self.ambiguous.entry(*f).or_default() += n;
        }
        self.spatial_only += other.spatial_only;
        self.no_template += other.no_template;
        self.over_quota += other.over_quota;
    }
}

/// Resources shared by every call to [`generate`].
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub parse: ParseContext<'a>,
    pub templates: &'a TemplateSet,
    pub synonyms: &'a SynonymTable,
    pub config: &'a GenerationConfig,
}

fn parse_form<R: Rng + ?Sized>(
    form: LogicForm,
    graph: &SceneGraph,
    target: &ObjectId,
    ctx: &ParseContext<'_>,
    rng: &mut R,
) -> Option<ReasoningTree> {
    match form {
        LogicForm::Chain => {
            let depth = if rng.random_bool(0.5) { 2 } else { 1 };
            parse_chain(graph, target, depth, ctx, rng)
                .or_else(|| parse_chain(graph, target, 3 - depth, ctx, rng))
        }
        LogicForm::And => parse_and_or(graph, target, Junction::And, ctx, rng),
        LogicForm::Or => parse_and_or(graph, target, Junction::Or, ctx, rng),
        LogicForm::Order => parse_order(graph, target, ctx, rng),
        LogicForm::Same => parse_same(graph, target, ctx, rng),
        LogicForm::Not => parse_not(graph, target, ctx, rng),
    }
}

/// Expressions for one target region, at most `max_per_region`, each
/// matching only the target within `graph`.
pub fn generate<R: Rng + ?Sized>(
    graph: &SceneGraph,
    target: &ObjectId,
    generator: &Generator<'_>,
    rng: &mut R,
) -> Vec<ExpressionRecord> {
    generate_with_tally(graph, target, generator, rng).0
}

pub fn generate_with_tally<R: Rng + ?Sized>(
    graph: &SceneGraph,
    target: &ObjectId,
    generator: &Generator<'_>,
    rng: &mut R,
) -> (Vec<ExpressionRecord>, GenerationTally) {
    let mut tally = GenerationTally::default();
    let Some(node) = graph.node(target) else {
        return (Vec::new(), tally);
    };
    let config = generator.config;
    let ctx = &generator.parse;
    let mut made = Vec::new();
    for &form in &config.forms {
        let Some(mut tree) = parse_form(form, graph, target, ctx, rng) else {
            *tally.ambiguous.entry(form).or_default() += 1;
            continue;
        };
        if rng.random_bool(config.compose_probability) {
            if let Some(bigger) = compose(&tree, graph, target, ctx, rng) {
                tree = bigger;
            }
        }
        if let Some(spatial) = &config.spatial_relations {
            if is_spatial_only(&tree, spatial) {
                tally.spatial_only += 1;
                continue;
            }
        }
        let usable: Vec<&Template> = generator
            .templates
            .for_form(form)
            .iter()
            .filter(|t| t.applies_to(&tree))
            .collect();
        let Some(template) = usable.choose(rng) else {
            tally.no_template += 1;
            continue;
        };
        let rendering = fill(template, &tree, generator.synonyms, config.synonym_probability, rng)
            .expect("applicable template fills");
        made.push((template.name.clone(), tree, rendering));
    }
    if made.len() > config.max_per_region {
        tally.over_quota += (made.len() - config.max_per_region) as u64;
        let mut keep = rand::seq::index::sample(rng, made.len(), config.max_per_region).into_vec();
        keep.sort_unstable();
        let mut slots: Vec<Option<_>> = made.into_iter().map(Some).collect();
        made = keep.into_iter().map(|i| slots[i].take().unwrap()).collect();
    }
    let records = made
        .into_iter()
        .enumerate()
        .map(|(k, (template, tree, rendering))| {
            *tally.generated.entry(tree.form).or_default() += 1;
            ExpressionRecord {
                id: format!("{}-{}-{}", graph.image_id(), target, k),
                text: rendering.text,
                tokens: rendering.tokens,
                form: tree.form,
                tree,
                template,
                image_id: graph.image_id().clone(),
                target_id: target.clone(),
                target_box: node.bbox,
            }
        })
        .collect();
    (records, tally)
}
