//! Triple store, entity–relation paths and triple reconstruction.
//!
//! A [`Graph`] is immutable once loaded. Paths are sequences of [`Triple`]s
//! written in travel direction: a step that walks a stored edge backwards is
//! kept as the flipped triple with `inverted = true`, so the stored edge can
//! always be recovered with [`Triple::canonical`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefix marking an inverted relation in text renderings.
pub const INVERSE_PREFIX: char = '~';

/// Separator between steps in the text form of a path.
pub const STEP_SEPARATOR: &str = ";";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default)]
    pub inverted: bool,
}

impl Triple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            inverted: false,
        }
    }

    /// The stored edge this triple denotes. Inverted triples are flipped back.
    pub fn canonical(&self) -> Triple {
        if self.inverted {
            Triple::new(&self.tail, &self.relation, &self.head)
        } else {
            self.clone()
        }
    }

    /// Relation as written in text, with the inverse marker when flipped.
    pub fn relation_label(&self) -> String {
        if self.inverted {
            format!("{INVERSE_PREFIX}{}", self.relation)
        } else {
            self.relation.clone()
        }
    }

    /// Parses a relation label, splitting off the inverse marker.
    pub fn from_labels(head: &str, relation_label: &str, tail: &str) -> Triple {
        match relation_label.strip_prefix(INVERSE_PREFIX) {
            Some(rel) => Triple {
                head: head.to_string(),
                relation: rel.to_string(),
                tail: tail.to_string(),
                inverted: true,
            },
            None => Triple::new(head, relation_label, tail),
        }
    }

    /// Text embedded by the retrieval index: `head | relation | tail`.
    ///
    /// Inverted triples are rendered in stored order, keeping the `~` marker.
    pub fn embedding_text(&self) -> String {
        let c = self.canonical();
        format!("{} | {} | {}", c.head, self.relation_label(), c.tail)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.head.is_empty() || self.relation.is_empty() || self.tail.is_empty() {
            return Err("triple fields must be non-empty".into());
        }
        Ok(())
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.head, self.relation_label(), self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for TripleFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::Contract(format!("unknown triple format '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

#[derive(Deserialize)]
struct JsonTriple {
    head: String,
    relation: String,
    tail: String,
}

/// Immutable triple store with head and tail adjacency indices.
///
/// Serializes as its triple list; indices are rebuilt on load.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<Triple>", into = "Vec<Triple>")]
pub struct Graph {
    triples: Vec<Triple>,
    by_head: HashMap<String, Vec<usize>>,
    by_tail: HashMap<String, Vec<usize>>,
    lookup: HashMap<Triple, usize>,
    entities: Vec<String>,
    relations: Vec<String>,
    entity_set: HashSet<String>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.triples == other.triples
    }
}

impl From<Vec<Triple>> for Graph {
    fn from(triples: Vec<Triple>) -> Self {
        Graph::from_triples(triples)
    }
}

impl From<Graph> for Vec<Triple> {
    fn from(g: Graph) -> Self {
        g.triples
    }
}

impl Graph {
    /// Builds a graph from triples in load order, dropping duplicates.
    pub fn from_triples<I: IntoIterator<Item = Triple>>(triples: I) -> Graph {
        let mut graph = Graph::default();
        let mut relation_set = HashSet::new();
        for t in triples {
            let t = t.canonical();
            if graph.lookup.contains_key(&t) {
                continue;
            }
            let idx = graph.triples.len();
            graph.by_head.entry(t.head.clone()).or_default().push(idx);
            graph.by_tail.entry(t.tail.clone()).or_default().push(idx);
            for e in [&t.head, &t.tail] {
                if graph.entity_set.insert(e.clone()) {
                    graph.entities.push(e.clone());
                }
            }
            if relation_set.insert(t.relation.clone()) {
                graph.relations.push(t.relation.clone());
            }
            graph.lookup.insert(t.clone(), idx);
            graph.triples.push(t);
        }
        graph
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Entities in first-seen order.
    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    /// Relations in first-seen order.
    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn has_entity(&self, entity: &str) -> bool {
        self.entity_set.contains(entity)
    }

    /// Whether the stored edge behind `triple` (un-inverted) exists.
    pub fn contains(&self, triple: &Triple) -> bool {
        self.lookup.contains_key(&triple.canonical())
    }

    pub fn index_of(&self, triple: &Triple) -> Option<usize> {
        self.lookup.get(&triple.canonical()).copied()
    }

    pub fn head_postings(&self, entity: &str) -> &[usize] {
        self.by_head.get(entity).map_or(&[], Vec::as_slice)
    }

    pub fn tail_postings(&self, entity: &str) -> &[usize] {
        self.by_tail.get(entity).map_or(&[], Vec::as_slice)
    }

    /// Total postings over both indices.
    pub fn posting_count(&self) -> usize {
        self.by_head.values().map(Vec::len).sum::<usize>()
            + self.by_tail.values().map(Vec::len).sum::<usize>()
    }

    /// Triples incident to `entity` in the requested direction, in load order.
    pub fn neighbors(&self, entity: &str, direction: Direction) -> Vec<&Triple> {
        let indices: Vec<usize> = match direction {
            Direction::Out => self.head_postings(entity).to_vec(),
            Direction::In => self.tail_postings(entity).to_vec(),
            Direction::Both => {
                let mut all: Vec<usize> = self
                    .head_postings(entity)
                    .iter()
                    .chain(self.tail_postings(entity))
                    .copied()
                    .collect();
                all.sort_unstable();
                all.dedup();
                all
            }
        };
        indices.into_iter().map(|i| &self.triples[i]).collect()
    }
}

/// Reads a triple file. Duplicate rows are dropped; blank lines are skipped.
pub fn load_triples<R: BufRead>(source: R, format: TripleFormat) -> Result<Graph> {
    let mut triples = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let triple = match format {
            TripleFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 3 tab-separated columns, found {}", cols.len()),
                    });
                }
                Triple::new(cols[0], cols[1], cols[2])
            }
            TripleFormat::Jsonl => {
                let row: JsonTriple = serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                Triple::new(row.head, row.relation, row.tail)
            }
        };
        triple.check().map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        triples.push(triple);
    }
    if triples.is_empty() {
        return Err(Error::EmptyGraph);
    }
    Ok(Graph::from_triples(triples))
}

/// Flips `triple` so that its head lies in `sources`.
///
/// Unchanged when the head already qualifies; swapped (toggling `inverted`)
/// when only the tail does.
pub fn reconstruct_triple(triple: &Triple, sources: &HashSet<String>) -> Result<Triple> {
    if sources.is_empty() {
        return Err(Error::Contract(
            "reconstruction needs at least one source entity".into(),
        ));
    }
    if sources.contains(&triple.head) {
        return Ok(triple.clone());
    }
    if sources.contains(&triple.tail) {
        return Ok(Triple {
            head: triple.tail.clone(),
            relation: triple.relation.clone(),
            tail: triple.head.clone(),
            inverted: !triple.inverted,
        });
    }
    Err(Error::NotReconstructible {
        head: triple.head.clone(),
        relation: triple.relation.clone(),
        tail: triple.tail.clone(),
    })
}

/// Non-empty chain of triples in travel direction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Triple>", into = "Vec<Triple>")]
pub struct KgPath {
    steps: Vec<Triple>,
}

impl TryFrom<Vec<Triple>> for KgPath {
    type Error = Error;

    fn try_from(steps: Vec<Triple>) -> Result<Self> {
        KgPath::new(steps)
    }
}

impl From<KgPath> for Vec<Triple> {
    fn from(p: KgPath) -> Self {
        p.steps
    }
}

impl KgPath {
    pub fn new(steps: Vec<Triple>) -> Result<KgPath> {
        if steps.is_empty() {
            return Err(Error::Contract("a path needs at least one step".into()));
        }
        Ok(KgPath { steps })
    }

    pub fn steps(&self) -> &[Triple] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn source(&self) -> &str {
        &self.steps[0].head
    }

    pub fn terminal(&self) -> &str {
        &self.steps[self.steps.len() - 1].tail
    }

    pub fn push(&mut self, step: Triple) {
        self.steps.push(step);
    }

    pub fn is_connected(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].tail == w[1].head)
    }

    /// Text form: steps rendered `head relation tail`, joined by ` ; `.
    pub fn to_text(&self) -> String {
        step_texts(&self.steps).join(&format!(" {STEP_SEPARATOR} "))
    }

    /// Parses the text form produced by [`KgPath::to_text`].
    pub fn parse_text(text: &str) -> Result<KgPath> {
        let mut steps = Vec::new();
        for (i, chunk) in text.split(STEP_SEPARATOR).enumerate() {
            let words: Vec<&str> = chunk.split_whitespace().collect();
            if words.len() != 3 {
                return Err(Error::Extraction {
                    step: i,
                    message: format!("expected `head relation tail`, got '{}'", chunk.trim()),
                });
            }
            steps.push(Triple::from_labels(words[0], words[1], words[2]));
        }
        KgPath::new(steps)
    }
}

/// Per-step text renderings of a path, one `head relation tail` string each.
pub fn step_texts(steps: &[Triple]) -> Vec<String> {
    steps.iter().map(Triple::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathReport {
    pub connected: bool,
    pub grounded: bool,
    /// Smallest step index that is ungrounded or does not start where the
    /// previous step ended.
    pub first_break: Option<usize>,
}

pub fn validate_path(graph: &Graph, path: &KgPath) -> PathReport {
    let mut connected = true;
    let mut grounded = true;
    let mut first_break = None;
    for (i, step) in path.steps().iter().enumerate() {
        let linked = i == 0 || path.steps()[i - 1].tail == step.head;
        let exists = graph.contains(step);
        connected &= linked;
        grounded &= exists;
        if first_break.is_none() && !(linked && exists) {
            first_break = Some(i);
        }
    }
    PathReport {
        connected,
        grounded,
        first_break,
    }
}
