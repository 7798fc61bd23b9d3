//! Set algebra over knowledge-graph triples.
//!
//! A world state is a set of `⟨subject, relation, object⟩` triples. Between two
//! consecutive states the graph changes by a set of additions and a set of
//! deletions; this module computes those differences, applies them, and infers
//! the deletions implied by a set of additions from three structural rules:
//!
//! 1. map edges (compass relations between rooms) never change;
//! 2. an entity is in exactly one place, and being held counts as a place;
//! 3. an entity cannot carry two contradicting attributes at once.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KgError {
    #[error("triple component `{0}` is empty after normalization")]
    EmptyComponent(&'static str),
    #[error("triple needs exactly 3 components, got {0}")]
    Arity(usize),
    #[error(
        "inconsistent diff: {} deletion(s) absent from graph [{}], {} addition(s) already present [{}]",
        .missing_deletions.len(),
        join_triples(.missing_deletions),
        .present_additions.len(),
        join_triples(.present_additions)
    )]
    InconsistentDiff {
        missing_deletions: Vec<Triple>,
        present_additions: Vec<Triple>,
    },
    #[error("additions and deletions overlap on {0}")]
    OverlappingDiff(Triple),
    #[error("attribute `{0}` cannot contradict itself")]
    ReflexiveContradiction(String),
}

fn join_triples(ts: &[Triple]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("; ")
}

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize_component(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A normalized `⟨subject, relation, object⟩` triple.
///
/// Components are stored normalized, so derived equality is the
/// case-insensitive, whitespace-insensitive comparison. Ordering follows the
/// canonical string form `"subject | relation | object"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Triple {
    subject: String,
    relation: String,
    object: String,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self, KgError> {
        let subject = normalize_component(subject);
        let relation = normalize_component(relation);
        let object = normalize_component(object);
        if subject.is_empty() {
            return Err(KgError::EmptyComponent("subject"));
        }
        if relation.is_empty() {
            return Err(KgError::EmptyComponent("relation"));
        }
        if object.is_empty() {
            return Err(KgError::EmptyComponent("object"));
        }
        Ok(Self {
            subject,
            relation,
            object,
        })
    }

    /// Builds a triple from a slice of exactly three components.
    pub fn from_parts<S: AsRef<str>>(parts: &[S]) -> Result<Self, KgError> {
        match parts {
            [s, r, o] => Self::new(s.as_ref(), r.as_ref(), o.as_ref()),
            _ => Err(KgError::Arity(parts.len())),
        }
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    pub fn components(&self) -> [&str; 3] {
        [&self.subject, &self.relation, &self.object]
    }

    pub fn canonical(&self) -> String {
        format!("{} | {} | {}", self.subject, self.relation, self.object)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {} | {}", self.subject, self.relation, self.object)
    }
}

impl Ord for Triple {
    fn cmp(&self, other: &Self) -> Ordering {
        // Compare the canonical strings without allocating them.
        let sep = " | ";
        let a = [
            self.subject.as_str(),
            sep,
            self.relation.as_str(),
            sep,
            self.object.as_str(),
        ];
        let b = [
            other.subject.as_str(),
            sep,
            other.relation.as_str(),
            sep,
            other.object.as_str(),
        ];
        a.iter()
            .flat_map(|s| s.bytes())
            .cmp(b.iter().flat_map(|s| s.bytes()))
            .then_with(|| {
                (&self.subject, &self.relation, &self.object).cmp(&(
                    &other.subject,
                    &other.relation,
                    &other.object,
                ))
            })
    }
}

impl PartialOrd for Triple {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl TryFrom<Vec<String>> for Triple {
    type Error = KgError;

    fn try_from(parts: Vec<String>) -> Result<Self, Self::Error> {
        Triple::from_parts(&parts)
    }
}

impl From<Triple> for Vec<String> {
    fn from(t: Triple) -> Self {
        vec![t.subject, t.relation, t.object]
    }
}

/// A set of triples with canonical iteration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a triple; returns false when it was already present.
    pub fn insert(&mut self, t: Triple) -> bool {
        self.triples.insert(t)
    }

    pub fn remove(&mut self, t: &Triple) -> bool {
        self.triples.remove(t)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn into_triples(self) -> BTreeSet<Triple> {
        self.triples
    }
}

impl FromIterator<Triple> for KnowledgeGraph {
    fn from_iter<I: IntoIterator<Item = Triple>>(iter: I) -> Self {
        Self {
            triples: iter.into_iter().collect(),
        }
    }
}

impl From<BTreeSet<Triple>> for KnowledgeGraph {
    fn from(triples: BTreeSet<Triple>) -> Self {
        Self { triples }
    }
}

impl<'a> IntoIterator for &'a KnowledgeGraph {
    type Item = &'a Triple;
    type IntoIter = std::collections::btree_set::Iter<'a, Triple>;

    fn into_iter(self) -> Self::IntoIter {
        self.triples.iter()
    }
}

/// Additions and deletions that turn one graph into the next.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDiff {
    additions: BTreeSet<Triple>,
    deletions: BTreeSet<Triple>,
}

impl GraphDiff {
    pub fn new(additions: BTreeSet<Triple>, deletions: BTreeSet<Triple>) -> Result<Self, KgError> {
        if let Some(t) = additions.intersection(&deletions).next() {
            return Err(KgError::OverlappingDiff(t.clone()));
        }
        Ok(Self {
            additions,
            deletions,
        })
    }

    pub fn additions(&self) -> &BTreeSet<Triple> {
        &self.additions
    }

    pub fn deletions(&self) -> &BTreeSet<Triple> {
        &self.deletions
    }

    pub fn is_empty(&self) -> bool {
        self.additions.is_empty() && self.deletions.is_empty()
    }
}

/// Computes `(next − prev, prev − next)`.
pub fn diff(prev: &KnowledgeGraph, next: &KnowledgeGraph) -> GraphDiff {
    GraphDiff {
        additions: next.triples.difference(&prev.triples).cloned().collect(),
        deletions: prev.triples.difference(&next.triples).cloned().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApplyMode {
    /// Deletions must be present and additions absent.
    Strict,
    /// Absent deletions and already-present additions are ignored.
    Lenient,
}

/// Returns `(g − deletions) ∪ additions`.
pub fn apply_diff(g: &KnowledgeGraph, d: &GraphDiff, mode: ApplyMode) -> Result<KnowledgeGraph, KgError> {
    if mode == ApplyMode::Strict {
        let missing_deletions: Vec<Triple> =
            d.deletions.iter().filter(|t| !g.contains(t)).cloned().collect();
        let present_additions: Vec<Triple> =
            d.additions.iter().filter(|t| g.contains(t)).cloned().collect();
        if !missing_deletions.is_empty() || !present_additions.is_empty() {
            return Err(KgError::InconsistentDiff {
                missing_deletions,
                present_additions,
            });
        }
    }
    let mut out = g.clone();
    for t in &d.deletions {
        out.remove(t);
    }
    for t in &d.additions {
        out.insert(t.clone());
    }
    Ok(out)
}

/// Canonical (sorted) listing of a graph.
pub fn canonicalize(g: &KnowledgeGraph) -> Vec<Triple> {
    g.iter().cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationClass {
    LocationOfEntity,
    Possession,
    Attribute,
    MapEdge,
    Other,
}

pub const COMPASS_DIRECTIONS: [&str; 10] = [
    "north",
    "south",
    "east",
    "west",
    "northeast",
    "northwest",
    "southeast",
    "southwest",
    "up",
    "down",
];

/// Relation-string → class lookup. Unmapped relations are `Other`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMap {
    classes: HashMap<String, RelationClass>,
}

impl Default for RelationMap {
    fn default() -> Self {
        let mut classes = HashMap::new();
        classes.insert("in".to_string(), RelationClass::LocationOfEntity);
        classes.insert("have".to_string(), RelationClass::Possession);
        classes.insert("is".to_string(), RelationClass::Attribute);
        for dir in COMPASS_DIRECTIONS {
            classes.insert(dir.to_string(), RelationClass::MapEdge);
        }
        Self { classes }
    }
}

impl RelationMap {
    pub fn empty() -> Self {
        Self {
            classes: HashMap::new(),
        }
    }

    pub fn insert(&mut self, relation: &str, class: RelationClass) {
        self.classes.insert(normalize_component(relation), class);
    }

    pub fn class_of(&self, relation: &str) -> RelationClass {
        self.classes
            .get(relation)
            .copied()
            .unwrap_or(RelationClass::Other)
    }

    pub fn classify(&self, t: &Triple) -> RelationClass {
        self.class_of(t.relation())
    }
}

/// Relation class of `t` under the default table.
pub fn classify_relation(t: &Triple) -> RelationClass {
    RelationMap::default().classify(t)
}

pub const DEFAULT_CONTRADICTIONS: [(&str, &str); 5] = [
    ("open", "closed"),
    ("on", "off"),
    ("locked", "unlocked"),
    ("lit", "unlit"),
    ("worn", "removed"),
];

/// Symmetric, irreflexive table of mutually exclusive attribute values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContradictionLexicon {
    opposites: BTreeMap<String, BTreeSet<String>>,
}

impl Default for ContradictionLexicon {
    fn default() -> Self {
        let mut lex = Self::empty();
        for (a, b) in DEFAULT_CONTRADICTIONS {
            lex.add_pair(a, b).expect("default lexicon is irreflexive");
        }
        lex
    }
}

impl ContradictionLexicon {
    pub fn empty() -> Self {
        Self {
            opposites: BTreeMap::new(),
        }
    }

    pub fn add_pair(&mut self, a: &str, b: &str) -> Result<(), KgError> {
        let a = normalize_component(a);
        let b = normalize_component(b);
        if a == b {
            return Err(KgError::ReflexiveContradiction(a));
        }
        self.opposites.entry(a.clone()).or_default().insert(b.clone());
        self.opposites.entry(b).or_default().insert(a);
        Ok(())
    }

    pub fn contradicts(&self, a: &str, b: &str) -> bool {
        self.opposites.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn opposites_of(&self, a: &str) -> impl Iterator<Item = &str> {
        self.opposites
            .get(a)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.opposites
            .iter()
            .flat_map(|(a, bs)| bs.iter().map(move |b| (a.as_str(), b.as_str())))
            .filter(|(a, b)| a < b)
    }
}

/// Relation table plus contradiction lexicon driving deletion inference.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionRules {
    pub relations: RelationMap,
    pub lexicon: ContradictionLexicon,
}

impl DeletionRules {
    /// The entity whose place a location or possession triple records:
    /// the subject of `⟨e, in, place⟩`, the object of `⟨holder, have, e⟩`.
    fn located_entity<'a>(&self, t: &'a Triple) -> Option<&'a str> {
        match self.relations.classify(t) {
            RelationClass::LocationOfEntity => Some(t.subject()),
            RelationClass::Possession => Some(t.object()),
            _ => None,
        }
    }

    /// Triples of `prev` that `additions` contradict. Always a subset of
    /// `prev`, never containing a map edge or an added triple.
    pub fn infer_deletions(
        &self,
        prev: &KnowledgeGraph,
        additions: &BTreeSet<Triple>,
    ) -> BTreeSet<Triple> {
        if additions.is_empty() {
            return BTreeSet::new();
        }
        let mut placed: BTreeSet<&str> = BTreeSet::new();
        let mut attrs: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for t in additions {
            match self.relations.classify(t) {
                RelationClass::LocationOfEntity | RelationClass::Possession => {
                    if let Some(e) = self.located_entity(t) {
                        placed.insert(e);
                    }
                }
                RelationClass::Attribute => {
                    attrs.entry(t.subject()).or_default().insert(t.object());
                }
                RelationClass::MapEdge | RelationClass::Other => {}
            }
        }

        prev.iter()
            .filter(|t| !additions.contains(*t))
            .filter(|t| match self.relations.classify(t) {
                RelationClass::LocationOfEntity | RelationClass::Possession => self
                    .located_entity(t)
                    .is_some_and(|e| placed.contains(e)),
                RelationClass::Attribute => attrs.get(t.subject()).is_some_and(|added| {
                    added
                        .iter()
                        .any(|a| self.lexicon.contradicts(a, t.object()))
                }),
                RelationClass::MapEdge | RelationClass::Other => false,
            })
            .cloned()
            .collect()
    }

    /// Full diff implied by `additions` alone.
    pub fn complete_diff(&self, prev: &KnowledgeGraph, additions: &BTreeSet<Triple>) -> GraphDiff {
        let additions: BTreeSet<Triple> = additions
            .iter()
            .filter(|t| !prev.contains(t))
            .cloned()
            .collect();
        let deletions = self.infer_deletions(prev, &additions);
        GraphDiff {
            additions,
            deletions,
        }
    }
}

/// Deletion inference with the default relation table.
pub fn infer_deletions(
    prev: &KnowledgeGraph,
    additions: &BTreeSet<Triple>,
    lexicon: &ContradictionLexicon,
) -> BTreeSet<Triple> {
    DeletionRules {
        relations: RelationMap::default(),
        lexicon: lexicon.clone(),
    }
    .infer_deletions(prev, additions)
}

/// Worked example graphs shared by tests and the verification battery.
pub mod fixtures {
    use super::*;

    pub fn t(s: &str, r: &str, o: &str) -> Triple {
        Triple::new(s, r, o).unwrap()
    }

    pub fn graph(ts: &[(&str, &str, &str)]) -> KnowledgeGraph {
        ts.iter().map(|(s, r, o)| t(s, r, o)).collect()
    }

    /// ludicorp, "take wire": graph before the action.
    pub fn ludicorp_before() -> KnowledgeGraph {
        graph(&[
            ("Coil of wire", "in", "Meeting Area"),
            ("you", "have", "Plant Pots"),
            ("Water Cooler", "in", "Meeting Area"),
            ("you", "have", "Dragon Statue"),
            ("you", "have", "Long Ladder"),
            ("you", "in", "Meeting Area"),
            ("you", "have", "Gun"),
        ])
    }

    pub fn ludicorp_after() -> KnowledgeGraph {
        graph(&[
            ("you", "have", "Coil of wire"),
            ("you", "have", "Plant Pots"),
            ("Water Cooler", "in", "Meeting Area"),
            ("you", "have", "Dragon Statue"),
            ("you", "have", "Long Ladder"),
            ("you", "in", "Meeting Area"),
            ("you", "have", "Gun"),
        ])
    }
}
