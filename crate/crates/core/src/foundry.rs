//! Preference-pair generation for both modalities.
//!
//! True samples are shortest graph paths from question entities to answers
//! (rendered as CoTs for the text modality). Each false sample carries
//! exactly one corruption. Conversions between modalities feed the
//! co-training phases.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cot::{self, Cot};
use crate::error::{Error, Result};
use crate::kg::{Graph, KgPath, Triple, INVERSE_PREFIX, STEP_SEPARATOR};
use crate::lm::END_TOKEN;
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Kg,
    Cot,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Kg => Modality::Cot,
            Modality::Cot => Modality::Kg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Factual,
    Logical,
    Break,
    Skip,
    Redundant,
}

impl Corruption {
    pub const KG_KINDS: [Corruption; 3] =
        [Corruption::Factual, Corruption::Logical, Corruption::Break];
    pub const COT_KINDS: [Corruption; 3] =
        [Corruption::Factual, Corruption::Skip, Corruption::Redundant];

    pub fn valid_for(self, modality: Modality) -> bool {
        match modality {
            Modality::Kg => Self::KG_KINDS.contains(&self),
            Modality::Cot => Self::COT_KINDS.contains(&self),
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Corruption::Factual => "factual",
            Corruption::Logical => "logical",
            Corruption::Break => "break",
            Corruption::Skip => "skip",
            Corruption::Redundant => "redundant",
        };
        f.write_str(s)
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Contract(format!("unknown corruption kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Native,
    Converted,
}

/// One outcome-level preference: `chosen` is the true sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct PreferencePair {
    pub id: String,
    pub question: String,
    pub chosen: String,
    pub rejected: String,
    pub modality: Modality,
    pub corruption: Corruption,
    pub origin: Origin,
}

#[derive(Deserialize)]
struct RawPair {
    id: String,
    question: String,
    chosen: String,
    rejected: String,
    modality: Modality,
    corruption: Corruption,
    origin: Origin,
}

impl TryFrom<RawPair> for PreferencePair {
    type Error = Error;

    fn try_from(r: RawPair) -> Result<Self> {
        PreferencePair::new(
            r.id,
            r.question,
            r.chosen,
            r.rejected,
            r.modality,
            r.corruption,
            r.origin,
        )
    }
}

impl PreferencePair {
    pub fn new(
        id: String,
        question: String,
        chosen: String,
        rejected: String,
        modality: Modality,
        corruption: Corruption,
        origin: Origin,
    ) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::Contract(format!(
                "pair {id}: chosen and rejected are identical"
            )));
        }
        // a converted pair keeps the corruption of the modality it came from
        let source = match origin {
            Origin::Native => modality,
            Origin::Converted => modality.other(),
        };
        if !corruption.valid_for(source) {
            return Err(Error::Contract(format!(
                "pair {id}: corruption '{corruption}' is not valid for {source:?} data"
            )));
        }
        Ok(Self {
            id,
            question,
            chosen,
            rejected,
            modality,
            corruption,
            origin,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub question_entities: Vec<String>,
    pub answers: Vec<String>,
}

impl QaExample {
    pub fn validate(&self) -> Result<()> {
        if self.question_entities.is_empty() {
            return Err(Error::Contract(format!(
                "example {} has no question entity",
                self.id
            )));
        }
        if self.answers.is_empty() {
            return Err(Error::Contract(format!(
                "example {} has no answer",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn read_qa<R: BufRead>(reader: R) -> Result<Vec<QaExample>> {
    read_jsonl(reader, |qa: &QaExample| qa.validate())
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<PreferencePair>> {
    read_jsonl(reader, |_: &PreferencePair| Ok(()))
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, rows: &[T]) -> Result<()> {
    for row in rows {
        serde_json::to_writer(&mut writer, row)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(
    reader: R,
    check: impl Fn(&T) -> Result<()>,
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        check(&row).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Shortest question-to-answer paths, breadth first over outgoing edges.
///
/// Ties are broken by question-entity order, then load order of edges.
/// Paths never revisit an entity.
pub fn mine_true_paths(
    graph: &Graph,
    qa: &QaExample,
    max_hops: usize,
    max_paths: usize,
) -> Vec<KgPath> {
    const FRONTIER_LIMIT: usize = 200_000;
    if max_hops == 0 || max_paths == 0 {
        return Vec::new();
    }
    let answers: HashSet<&str> = qa.answers.iter().map(String::as_str).collect();
    let mut frontier: Vec<(Vec<usize>, Vec<&str>)> = qa
        .question_entities
        .iter()
        .filter(|e| graph.has_entity(e))
        .map(|e| (Vec::new(), vec![e.as_str()]))
        .collect();
    for _ in 0..max_hops {
        let mut found = Vec::new();
        let mut next = Vec::new();
        for (steps, visited) in &frontier {
            let here = *visited.last().expect("non-empty");
            for &idx in graph.head_postings(here) {
                let t = &graph.triples()[idx];
                if visited.contains(&t.tail.as_str()) {
                    continue;
                }
                let mut s = steps.clone();
                s.push(idx);
                if answers.contains(t.tail.as_str()) {
                    found.push(s.clone());
                }
                if next.len() < FRONTIER_LIMIT {
                    let mut v = visited.clone();
                    v.push(t.tail.as_str());
                    next.push((s, v));
                }
            }
        }
        if !found.is_empty() {
            return found
                .into_iter()
                .take(max_paths)
                .map(|s| {
                    KgPath::new(s.into_iter().map(|i| graph.triples()[i].clone()).collect())
                        .expect("non-empty")
                })
                .collect();
        }
        frontier = next;
    }
    Vec::new()
}

fn require_variety(graph: &Graph) -> Result<()> {
    if graph.entities().len() < 2 || graph.relations().len() < 2 {
        return Err(Error::Contract(
            "corruption needs at least two entities and two relations".into(),
        ));
    }
    Ok(())
}

/// Applies one corruption of `kind` to a true path.
///
/// `factual` replaces an entity after the source (in both triples that
/// mention it) so that some triple leaves the graph; `logical` swaps one
/// relation for one that makes the triple ungrounded; `break` replaces a
/// non-initial step with a graph triple that does not start where the
/// previous step ended.
pub fn corrupt_kg_path(
    path: &KgPath,
    graph: &Graph,
    kind: Corruption,
    seed: u64,
) -> Result<KgPath> {
    require_variety(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = path.steps();
    let n = steps.len();
    match kind {
        Corruption::Factual => {
            let mut positions: Vec<usize> = (1..=n).collect();
            positions.shuffle(&mut rng);
            for j in positions {
                let old = &steps[j - 1].tail;
                let replaced = |c: &str| {
                    let mut s = steps.to_vec();
                    s[j - 1].tail = c.to_string();
                    if j < n {
                        s[j].head = c.to_string();
                    }
                    s
                };
                let candidates: Vec<&String> = graph
                    .entities()
                    .iter()
                    .filter(|c| *c != old)
                    .filter(|c| {
                        let s = replaced(c);
                        !graph.contains(&s[j - 1]) || (j < n && !graph.contains(&s[j]))
                    })
                    .collect();
                if let Some(c) = pick(&candidates, &mut rng) {
                    return KgPath::new(replaced(c));
                }
            }
            Err(Error::NotApplicable(
                "no entity replacement leaves the graph".into(),
            ))
        }
        Corruption::Logical => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for i in order {
                let candidates: Vec<&String> = graph
                    .relations()
                    .iter()
                    .filter(|r| **r != steps[i].relation)
                    .filter(|r| {
                        let mut t = steps[i].clone();
                        t.relation = (*r).clone();
                        !graph.contains(&t)
                    })
                    .collect();
                if let Some(r) = pick(&candidates, &mut rng) {
                    let mut s = steps.to_vec();
                    s[i].relation = r.clone();
                    return KgPath::new(s);
                }
            }
            Err(Error::NotApplicable(
                "no relation replacement leaves the graph".into(),
            ))
        }
        Corruption::Break => {
            if n < 2 {
                return Err(Error::NotApplicable(
                    "a one-step path cannot be broken".into(),
                ));
            }
            let mut order: Vec<usize> = (1..n).collect();
            order.shuffle(&mut rng);
            for i in order {
                let prev_tail = &steps[i - 1].tail;
                let candidates: Vec<&Triple> = graph
                    .triples()
                    .iter()
                    .filter(|t| &t.head != prev_tail)
                    .collect();
                if let Some(t) = pick(&candidates, &mut rng) {
                    let mut s = steps.to_vec();
                    s[i] = (*t).clone();
                    return KgPath::new(s);
                }
            }
            Err(Error::NotApplicable(
                "every graph triple starts at the break point".into(),
            ))
        }
        other => Err(Error::Contract(format!("'{other}' is not a KG corruption"))),
    }
}

fn pick<'a, T>(items: &[&'a T], rng: &mut ChaCha8Rng) -> Option<&'a T>
where
    T: ?Sized,
{
    if items.is_empty() {
        None
    } else {
        Some(items[rng.random_range(0..items.len())])
    }
}

/// Applies one corruption of `kind` to a true CoT.
///
/// `factual` swaps the tail entity of one step (and any answer naming it)
/// for an entity that makes the stated fact false in `graph`; `skip` deletes
/// a non-final step; `redundant` inserts a pool step before some existing
/// step.
pub fn corrupt_cot(
    cot: &Cot,
    graph: &Graph,
    distractor_pool: &[String],
    kind: Corruption,
    seed: u64,
) -> Result<Cot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cot.len();
    if n == 0 {
        return Err(Error::Contract("empty CoT".into()));
    }
    match kind {
        Corruption::Factual => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for i in order {
                let Ok(parsed) = cot::parse_step(&cot.steps()[i], i) else {
                    continue;
                };
                let old = parsed.triple.tail.clone();
                let candidates: Vec<&String> = graph
                    .entities()
                    .iter()
                    .filter(|c| **c != old)
                    .filter(|c| {
                        let mut t = parsed.triple.clone();
                        t.tail = (*c).clone();
                        !graph.contains(&t)
                    })
                    .collect();
                if let Some(c) = pick(&candidates, &mut rng) {
                    let mut t = parsed.triple.clone();
                    t.tail = c.clone();
                    let mut content = cot::triple_sentence(&t);
                    if let Some(a) = parsed.answer {
                        let a = if a == old { c.clone() } else { a };
                        content = format!("{content} {}", cot::answer_sentence(&a));
                    }
                    let mut out = cot.clone();
                    out.set(i, content);
                    return Ok(out);
                }
            }
            Err(Error::NotApplicable(
                "no step admits a false entity swap".into(),
            ))
        }
        Corruption::Skip => {
            if n < 2 {
                return Err(Error::NotApplicable(
                    "a one-step CoT has nothing to skip".into(),
                ));
            }
            let mut out = cot.clone();
            out.remove(rng.random_range(0..n - 1));
            Ok(out)
        }
        Corruption::Redundant => {
            if distractor_pool.is_empty() {
                return Err(Error::Contract(
                    "redundant corruption needs a distractor pool".into(),
                ));
            }
            let d = distractor_pool[rng.random_range(0..distractor_pool.len())].clone();
            let mut out = cot.clone();
            out.insert(rng.random_range(0..n), d);
            Ok(out)
        }
        other => Err(Error::Contract(format!(
            "'{other}' is not a CoT corruption"
        ))),
    }
}

/// One `head relation tail.` step per triple.
pub fn kg_path_to_cot(path: &KgPath) -> Cot {
    Cot::new(path.steps().iter().map(cot::triple_sentence).collect())
}

/// One triple per step under the toy step grammar.
pub fn cot_to_kg_path(cot: &Cot) -> Result<KgPath> {
    if cot.is_empty() {
        return Err(Error::Contract(
            "cannot extract a path from an empty CoT".into(),
        ));
    }
    let steps = cot
        .steps()
        .iter()
        .enumerate()
        .map(|(i, s)| cot::parse_step(s, i).map(|p| p.triple))
        .collect::<Result<Vec<_>>>()?;
    KgPath::new(steps)
}

/// A true CoT for a mined path: the path's steps, with the final step
/// stating the answer.
pub fn true_cot(path: &KgPath) -> Cot {
    let mut c = kg_path_to_cot(path);
    let last = c.len() - 1;
    let content = format!(
        "{} {}",
        c.steps()[last],
        cot::answer_sentence(path.terminal())
    );
    c.set(last, content);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoundryConfig {
    pub max_hops: usize,
    pub max_paths: usize,
    pub kg_kinds: Vec<Corruption>,
    pub cot_kinds: Vec<Corruption>,
    /// False samples per true sample.
    pub pairs_per_path: usize,
    pub distractors: usize,
}

impl Default for FoundryConfig {
    fn default() -> Self {
        Self {
            max_hops: 4,
            max_paths: 4,
            kg_kinds: Corruption::KG_KINDS.to_vec(),
            cot_kinds: Corruption::COT_KINDS.to_vec(),
            pairs_per_path: 3,
            distractors: 8,
        }
    }
}

/// Emits corruption kinds in a fixed rotation; inapplicable kinds fall
/// through to the next one.
struct KindRotation<'a> {
    kinds: &'a [Corruption],
    next: usize,
}

impl<'a> KindRotation<'a> {
    fn attempt<T>(
        &mut self,
        mut f: impl FnMut(Corruption) -> Result<T>,
    ) -> Option<(Corruption, T)> {
        let start = self.next;
        self.next += 1;
        for k in 0..self.kinds.len() {
            let kind = self.kinds[(start + k) % self.kinds.len()];
            match f(kind) {
                Ok(v) => return Some((kind, v)),
                Err(Error::NotApplicable(_)) => continue,
                Err(e) => {
                    log::warn!("corruption {kind} failed: {e}");
                    continue;
                }
            }
        }
        None
    }
}

pub fn distractor_pool(graph: &Graph, avoid: &KgPath, count: usize, seed: u64) -> Vec<String> {
    let on_path: HashSet<&str> = avoid
        .steps()
        .iter()
        .flat_map(|t| [t.head.as_str(), t.tail.as_str()])
        .collect();
    let mut pool: Vec<&Triple> = graph
        .triples()
        .iter()
        .filter(|t| !on_path.contains(t.head.as_str()) && !on_path.contains(t.tail.as_str()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.into_iter()
        .take(count)
        .map(cot::triple_sentence)
        .collect()
}

/// Native pairs of one modality for every example.
pub fn generate_pairs(
    graph: &Graph,
    examples: &[QaExample],
    modality: Modality,
    config: &FoundryConfig,
    seed: u64,
) -> Vec<PreferencePair> {
    let kinds = match modality {
        Modality::Kg => &config.kg_kinds,
        Modality::Cot => &config.cot_kinds,
    };
    let mut rotation = KindRotation { kinds, next: 0 };
    let mut pairs = Vec::new();
    let tag = match modality {
        Modality::Kg => "kg",
        Modality::Cot => "cot",
    };
    for qa in examples {
        for (pi, path) in mine_true_paths(graph, qa, config.max_hops, config.max_paths)
            .iter()
            .enumerate()
        {
            for k in 0..config.pairs_per_path {
                let base = format!("{}-{tag}-{pi}-{k}", qa.id);
                let s = derive_seed(seed, &base);
                let made = match modality {
                    Modality::Kg => rotation.attempt(|kind| {
                        corrupt_kg_path(path, graph, kind, s)
                            .map(|bad| (path.to_text(), bad.to_text()))
                    }),
                    Modality::Cot => {
                        let good = true_cot(path);
                        let pool = distractor_pool(graph, path, config.distractors, s);
                        rotation.attempt(|kind| {
                            corrupt_cot(&good, graph, &pool, kind, s)
                                .map(|bad| (good.render(), bad.render()))
                        })
                    }
                };
                let Some((kind, (chosen, rejected))) = made else {
                    continue;
                };
                match PreferencePair::new(
                    format!("{base}-{kind}"),
                    qa.question.clone(),
                    chosen,
                    rejected,
                    modality,
                    kind,
                    Origin::Native,
                ) {
                    Ok(p) => pairs.push(p),
                    Err(e) => log::warn!("dropping pair: {e}"),
                }
            }
        }
    }
    pairs
}

/// Converts native pairs into the other modality using the toy templates.
/// Pairs whose text cannot be converted are dropped.
pub fn convert_pairs(pairs: &[PreferencePair]) -> Vec<PreferencePair> {
    pairs
        .iter()
        .filter(|p| p.origin == Origin::Native)
        .filter_map(|p| {
            let convert = |text: &str| -> Result<String> {
                match p.modality {
                    Modality::Kg => Ok(kg_path_to_cot(&KgPath::parse_text(text)?).render()),
                    Modality::Cot => Ok(cot_to_kg_path(&Cot::parse(text))?.to_text()),
                }
            };
            let converted = convert(&p.chosen).and_then(|c| Ok((c, convert(&p.rejected)?)));
            match converted {
                Ok((chosen, rejected)) => PreferencePair::new(
                    format!(
                        "{}~{}",
                        p.id,
                        if p.modality == Modality::Kg {
                            "cot"
                        } else {
                            "kg"
                        }
                    ),
                    p.question.clone(),
                    chosen,
                    rejected,
                    p.modality.other(),
                    p.corruption,
                    Origin::Converted,
                )
                .ok(),
                Err(e) => {
                    log::warn!("cannot convert pair {}: {e}", p.id);
                    None
                }
            }
        })
        .collect()
}

/// Vocabulary covering KG path text for `graph`.
pub fn kg_vocabulary(graph: &Graph) -> Vec<String> {
    let mut v: Vec<String> = graph.entities().to_vec();
    v.extend(graph.relations().iter().cloned());
    v.extend(
        graph
            .relations()
            .iter()
            .map(|r| format!("{INVERSE_PREFIX}{r}")),
    );
    v.push(STEP_SEPARATOR.to_string());
    v.push(END_TOKEN.to_string());
    dedup_keep_order(v)
}

/// Vocabulary covering toy CoT text with up to `max_steps` steps.
pub fn cot_vocabulary(graph: &Graph, max_steps: usize) -> Vec<String> {
    let mut v: Vec<String> = graph.entities().to_vec();
    v.extend(graph.relations().iter().cloned());
    v.extend(
        graph
            .relations()
            .iter()
            .map(|r| format!("{INVERSE_PREFIX}{r}")),
    );
    v.push("Step".into());
    v.extend((1..=max_steps).map(|k| format!("{k}:")));
    v.extend(cot::ANSWER_PREFIX.split_whitespace().map(String::from));
    v.push(".".into());
    v.push(END_TOKEN.to_string());
    dedup_keep_order(v)
}

fn dedup_keep_order(v: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    v.into_iter().filter(|x| seen.insert(x.clone())).collect()
}
