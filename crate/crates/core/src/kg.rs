//! Knowledge graph storage: name dictionaries, triple splits, directed
//! queries and the index of known answers used for filtered evaluation.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// Which slot of a triple a query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// `<anchor, relation, ?>`
    TailQuery,
    /// `<?, relation, anchor>`
    HeadQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Query {
    pub direction: Direction,
    pub anchor: EntityId,
    pub relation: RelationId,
}

impl Query {
    pub fn tail(head: EntityId, relation: RelationId) -> Self {
        Self {
            direction: Direction::TailQuery,
            anchor: head,
            relation,
        }
    }

    pub fn head(tail: EntityId, relation: RelationId) -> Self {
        Self {
            direction: Direction::HeadQuery,
            anchor: tail,
            relation,
        }
    }

    /// The triple obtained by filling the open slot with `entity`.
    #[inline]
    pub fn materialize(&self, entity: EntityId) -> Triple {
        match self.direction {
            Direction::TailQuery => Triple::new(self.anchor, self.relation, entity),
            Direction::HeadQuery => Triple::new(entity, self.relation, self.anchor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryExample {
    pub query: Query,
    pub answer: EntityId,
}

impl QueryExample {
    pub fn triple(&self) -> Triple {
        self.query.materialize(self.answer)
    }
}

/// Bidirectional name <-> dense id mapping, ids assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if ids.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate name {name:?}")));
            }
        }
        Ok(Self { names, ids })
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Entity and relation vocabularies shared by all splits of a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dictionary {
    pub entities: Vocab,
    pub relations: Vocab,
}

#[derive(Serialize, Deserialize)]
struct DictionaryDump {
    entities: Vec<String>,
    relations: Vec<String>,
}

impl Dictionary {
    pub fn to_json(&self) -> String {
        let dump = DictionaryDump {
            entities: self.entities.names().to_vec(),
            relations: self.relations.names().to_vec(),
        };
        serde_json::to_string(&dump).expect("string arrays always serialize")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let dump: DictionaryDump = serde_json::from_str(json)?;
        Self::from_names(dump.entities, dump.relations)
    }

    pub fn from_names(entities: Vec<String>, relations: Vec<String>) -> Result<Self> {
        Ok(Self {
            entities: Vocab::from_names(entities)?,
            relations: Vocab::from_names(relations)?,
        })
    }
}

/// Parses `head<TAB>relation<TAB>tail` lines, interning unseen names into
/// `dict` after the ones it already holds.
///
/// Blank lines are skipped; a line with any other field count is an error.
pub fn parse_triples_str(text: &str, source: &Path, dict: &mut Dictionary) -> Result<Vec<Triple>> {
    let mut triples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                path: source.to_path_buf(),
                line: lineno + 1,
                found: fields.len(),
            });
        }
        let head = dict.entities.intern(fields[0]);
        let relation = dict.relations.intern(fields[1]);
        let tail = dict.entities.intern(fields[2]);
        triples.push(Triple::new(head, relation, tail));
    }
    if triples.is_empty() {
        return Err(Error::EmptyFile(source.to_path_buf()));
    }
    Ok(triples)
}

pub fn parse_triples(path: &Path, dict: &mut Dictionary) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path)?;
    parse_triples_str(&text, path, dict)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub dict: Dictionary,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Builds a graph and checks that ids are in range and the splits are
    /// pairwise disjoint.
    pub fn new(
        dict: Dictionary,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let kg = Self {
            dict,
            train,
            valid,
            test,
        };
        kg.validate()?;
        Ok(kg)
    }

    /// Loads the three splits; the training file fixes the first ids.
    pub fn load(train: &Path, valid: &Path, test: &Path) -> Result<Self> {
        let mut dict = Dictionary::default();
        let train = parse_triples(train, &mut dict)?;
        let valid = parse_triples(valid, &mut dict)?;
        let test = parse_triples(test, &mut dict)?;
        Self::new(dict, train, valid, test)
    }

    pub fn num_entities(&self) -> usize {
        self.dict.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.dict.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Entities occurring in at least one training triple.
    pub fn train_entity_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_entities()];
        for t in &self.train {
            mask[t.head] = true;
            mask[t.tail] = true;
        }
        mask
    }

    fn validate(&self) -> Result<()> {
        let (ne, nr) = (self.num_entities(), self.num_relations());
        let mut seen: HashMap<Triple, Split> = HashMap::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            let mut own = HashSet::new();
            for t in self.split(split) {
                if t.head >= ne || t.tail >= ne || t.relation >= nr {
                    return Err(Error::InvalidGraph(format!(
                        "{split:?} triple {t:?} out of range (|E|={ne}, |R|={nr})"
                    )));
                }
                if own.insert(*t) {
                    if let Some(other) = seen.insert(*t, split) {
                        return Err(Error::InvalidGraph(format!(
                            "triple {t:?} appears in both {other:?} and {split:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Expands each triple into its tail query followed by its head query.
pub fn make_query_examples(triples: &[Triple]) -> Vec<QueryExample> {
    let mut out = Vec::with_capacity(2 * triples.len());
    for t in triples {
        out.push(QueryExample {
            query: Query::tail(t.head, t.relation),
            answer: t.tail,
        });
        out.push(QueryExample {
            query: Query::head(t.tail, t.relation),
            answer: t.head,
        });
    }
    out
}

/// Known true answers per query, gathered from a chosen set of splits.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    answers: HashMap<Query, Vec<EntityId>>,
}

impl FilterIndex {
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut answers: HashMap<Query, Vec<EntityId>> = HashMap::new();
        for ex in triples
            .into_iter()
            .flat_map(|t| make_query_examples(std::slice::from_ref(t)))
        {
            answers.entry(ex.query).or_default().push(ex.answer);
        }
        for list in answers.values_mut() {
            list.sort_unstable();
            list.dedup();
        }
        Self { answers }
    }

    /// Sorted known answers of `query`; empty when the query never occurs.
    pub fn known(&self, query: &Query) -> &[EntityId] {
        self.answers.get(query).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Candidate mask over all entities: known answers are removed except
    /// for `keep`, the example's own answer.
    pub fn candidate_mask(&self, query: &Query, num_entities: usize, keep: Option<EntityId>) -> Vec<bool> {
        let mut mask = vec![true; num_entities];
        for &e in self.known(query) {
            if Some(e) != keep {
                mask[e] = false;
            }
        }
        mask
    }

    pub fn num_queries(&self) -> usize {
        self.answers.len()
    }
}

pub fn build_filter_index(kg: &KnowledgeGraph, splits: &[Split]) -> Result<FilterIndex> {
    if splits.is_empty() {
        return Err(Error::InvalidArgument("filter index needs at least one split".into()));
    }
    let mut chosen: Vec<Split> = splits.to_vec();
    chosen.sort_unstable();
    chosen.dedup();
    Ok(FilterIndex::from_triples(
        chosen.into_iter().flat_map(|s| kg.split(s).iter()),
    ))
}

/// Candidate mask for an evaluation example, or all-true when unfiltered.
pub fn candidates_for(filter: Option<&FilterIndex>, ex: &QueryExample, num_entities: usize) -> Vec<bool> {
    match filter {
        Some(f) => f.candidate_mask(&ex.query, num_entities, Some(ex.answer)),
        None => vec![true; num_entities],
    }
}
