//! Typed knowledge graph of items, categories, brands, shops and concepts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::ConceptSchema;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Item,
    Category,
    Brand,
    Shop,
    Concept,
}

impl EntityKind {
    pub const ALL: [EntityKind; 5] = [
        EntityKind::Item,
        EntityKind::Category,
        EntityKind::Brand,
        EntityKind::Shop,
        EntityKind::Concept,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: u32,
}

impl EntityId {
    pub fn new(kind: EntityKind, index: u32) -> Self {
        Self { kind, index }
    }

    pub fn item(index: u32) -> Self {
        Self::new(EntityKind::Item, index)
    }

    pub fn category(index: u32) -> Self {
        Self::new(EntityKind::Category, index)
    }

    pub fn brand(index: u32) -> Self {
        Self::new(EntityKind::Brand, index)
    }

    pub fn shop(index: u32) -> Self {
        Self::new(EntityKind::Shop, index)
    }

    pub fn concept(index: u32) -> Self {
        Self::new(EntityKind::Concept, index)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}#{}", self.kind, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    ItemInConcept,
    ItemInCategory,
    ItemOfBrand,
    ItemInShop,
    CategoryInConcept,
    BrandInConcept,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::ItemInConcept,
        Relation::ItemInCategory,
        Relation::ItemOfBrand,
        Relation::ItemInShop,
        Relation::CategoryInConcept,
        Relation::BrandInConcept,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn head_kind(self) -> EntityKind {
        match self {
            Relation::ItemInConcept | Relation::ItemInCategory | Relation::ItemOfBrand | Relation::ItemInShop => {
                EntityKind::Item
            }
            Relation::CategoryInConcept => EntityKind::Category,
            Relation::BrandInConcept => EntityKind::Brand,
        }
    }

    pub fn tail_kind(self) -> EntityKind {
        match self {
            Relation::ItemInCategory => EntityKind::Category,
            Relation::ItemOfBrand => EntityKind::Brand,
            Relation::ItemInShop => EntityKind::Shop,
            _ => EntityKind::Concept,
        }
    }

    /// Concept-membership relations are tf-idf scored; the rest score 1.
    pub fn is_tfidf(self) -> bool {
        self.tail_kind() == EntityKind::Concept
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// head → tails
    Forward,
    /// tail → heads
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub head: EntityId,
    pub relation: Relation,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: Relation, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

/// The term domains concept phrases are composed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Time,
    Location,
    Object,
    Function,
    Incident,
    CateBrand,
    Style,
    Ip,
}

/// A vocabulary term. The optional parent is kept for completeness; nothing
/// downstream reads it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub index: u32,
    pub name: String,
    pub vocabulary: BTreeMap<Domain, Term>,
    #[serde(default)]
    pub schema: ConceptSchema,
}

impl Concept {
    pub fn id(&self) -> EntityId {
        EntityId::concept(self.index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    pub kind: EntityKind,
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// One line of `conceptnet.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRecord {
    Entity(EntityRecord),
    Concept(Concept),
    Triple(Triple),
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("triple {head} {relation:?} {tail} does not match the relation's kinds", head = .0.head, relation = .0.relation, tail = .0.tail)]
    KindMismatch(Triple),
    #[error("triple references unregistered entity {0}")]
    Dangling(EntityId),
    #[error("entity {0} registered twice with different data")]
    Conflict(EntityId),
    #[error("concepts must be registered with a concept record, not an entity record ({0})")]
    ConceptAsEntity(EntityId),
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("{entity} cannot be the {side} of {relation:?}")]
    WrongSide {
        entity: EntityId,
        relation: Relation,
        side: &'static str,
    },
    #[error("no edge {head} {relation:?} {tail}")]
    MissingEdge {
        head: EntityId,
        relation: Relation,
        tail: EntityId,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A consistency problem found by [`ConceptNet::validate`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Violation {
    IndexMismatch { relation: Relation, detail: String },
    DfMismatch { entity: EntityId, stored: u32, actual: u32 },
    OrphanConcept(u32),
    EmptyVocabulary(u32),
    NonFunctional { item: u32, relation: Relation, count: usize },
}

/// Collects entities, concepts and triples in any order, then builds a net.
#[derive(Clone, Debug, Default)]
pub struct NetBuilder {
    entities: BTreeMap<EntityId, Option<String>>,
    concepts: BTreeMap<u32, Concept>,
    triples: BTreeSet<Triple>,
}

impl NetBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, kind: EntityKind, index: u32, name: Option<String>) -> Result<(), NetError> {
        let id = EntityId::new(kind, index);
        if kind == EntityKind::Concept {
            return Err(NetError::ConceptAsEntity(id));
        }
        match self.entities.get(&id) {
            Some(existing) if *existing != name => Err(NetError::Conflict(id)),
            _ => {
                self.entities.insert(id, name);
                Ok(())
            }
        }
    }

    pub fn add_concept(&mut self, concept: Concept) -> Result<(), NetError> {
        match self.concepts.get(&concept.index) {
            Some(existing) if *existing != concept => Err(NetError::Conflict(concept.id())),
            _ => {
                self.concepts.insert(concept.index, concept);
                Ok(())
            }
        }
    }

    pub fn add_triple(&mut self, triple: Triple) {
        self.triples.insert(triple);
    }

    pub fn add_record(&mut self, record: NetRecord) -> Result<(), NetError> {
        match record {
            NetRecord::Entity(e) => self.add_entity(e.kind, e.index, e.name),
            NetRecord::Concept(c) => self.add_concept(c),
            NetRecord::Triple(t) => {
                self.add_triple(t);
                Ok(())
            }
        }
    }

    pub fn build(self) -> Result<ConceptNet, NetError> {
        let mut registered: [Vec<bool>; 5] = Default::default();
        let mark = |registered: &mut [Vec<bool>; 5], id: EntityId| {
            let reg = &mut registered[id.kind.slot()];
            let i = id.index as usize;
            if reg.len() <= i {
                reg.resize(i + 1, false);
            }
            reg[i] = true;
        };
        for &id in self.entities.keys() {
            mark(&mut registered, id);
        }
        let mut concepts: Vec<Option<Concept>> = Vec::new();
        for (index, concept) in self.concepts {
            mark(&mut registered, EntityId::concept(index));
            let i = index as usize;
            if concepts.len() <= i {
                concepts.resize(i + 1, None);
            }
            concepts[i] = Some(concept);
        }
        let is_reg = |id: EntityId| registered[id.kind.slot()].get(id.index as usize).copied().unwrap_or(false);

        for t in &self.triples {
            if t.head.kind != t.relation.head_kind() || t.tail.kind != t.relation.tail_kind() {
                return Err(NetError::KindMismatch(*t));
            }
            for id in [t.head, t.tail] {
                if !is_reg(id) {
                    return Err(NetError::Dangling(id));
                }
            }
        }

        let size = |kind: EntityKind| registered[kind.slot()].len();
        let mut forward: Vec<Vec<Vec<u32>>> = Relation::ALL.iter().map(|r| vec![Vec::new(); size(r.head_kind())]).collect();
        let mut inverse: Vec<Vec<Vec<u32>>> = Relation::ALL.iter().map(|r| vec![Vec::new(); size(r.tail_kind())]).collect();
        // Set iteration is sorted by (head, relation, tail), so both index
        // directions come out in ascending order without a sort.
        for t in &self.triples {
            let r = t.relation.slot();
            forward[r][t.head.index as usize].push(t.tail.index);
            inverse[r][t.tail.index as usize].push(t.head.index);
        }

        let names = self
            .entities
            .into_iter()
            .filter_map(|(id, name)| name.map(|n| (id, n)))
            .collect();
        let mut net = ConceptNet {
            registered,
            names,
            concepts,
            triples: self.triples.into_iter().collect(),
            forward,
            inverse,
            df: Default::default(),
            max_tfidf: [0.0; 6],
        };
        for (slot, relation) in [
            (0, Relation::ItemInConcept),
            (1, Relation::CategoryInConcept),
            (2, Relation::BrandInConcept),
        ] {
            net.df[slot] = net.forward[relation.slot()].iter().map(|t| t.len() as u32).collect();
        }
        for t in &net.triples {
            if t.relation.is_tfidf() {
                let s = net.tfidf(t.head.index, t.relation, t.tail.index);
                let m = &mut net.max_tfidf[t.relation.slot()];
                *m = m.max(s);
            }
        }
        Ok(net)
    }
}

/// Immutable, fully indexed concept net.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptNet {
    registered: [Vec<bool>; 5],
    names: BTreeMap<EntityId, String>,
    concepts: Vec<Option<Concept>>,
    triples: Vec<Triple>,
    forward: Vec<Vec<Vec<u32>>>,
    inverse: Vec<Vec<Vec<u32>>>,
    /// Concepts containing each item, category and brand.
    df: [Vec<u32>; 3],
    max_tfidf: [f64; 6],
}

fn df_slot(kind: EntityKind) -> Option<usize> {
    match kind {
        EntityKind::Item => Some(0),
        EntityKind::Category => Some(1),
        EntityKind::Brand => Some(2),
        _ => None,
    }
}

impl ConceptNet {
    /// Builds a net from unordered parts; duplicates collapse.
    pub fn build(
        entities: impl IntoIterator<Item = EntityRecord>,
        concepts: impl IntoIterator<Item = Concept>,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self, NetError> {
        let mut b = NetBuilder::new();
        for e in entities {
            b.add_entity(e.kind, e.index, e.name)?;
        }
        for c in concepts {
            b.add_concept(c)?;
        }
        for t in triples {
            b.add_triple(t);
        }
        b.build()
    }

    pub fn is_registered(&self, id: EntityId) -> bool {
        self.registered[id.kind.slot()]
            .get(id.index as usize)
            .copied()
            .unwrap_or(false)
    }

    /// Number of registered entities of `kind`.
    pub fn count(&self, kind: EntityKind) -> usize {
        self.registered[kind.slot()].iter().filter(|&&r| r).count()
    }

    /// Size of the index space of `kind` (largest index + 1).
    pub fn index_space(&self, kind: EntityKind) -> usize {
        self.registered[kind.slot()].len()
    }

    pub fn name(&self, id: EntityId) -> Option<&str> {
        match id.kind {
            EntityKind::Concept => self.concept(id.index).map(|c| c.name.as_str()),
            _ => self.names.get(&id).map(String::as_str),
        }
    }

    pub fn concept(&self, index: u32) -> Option<&Concept> {
        self.concepts.get(index as usize).and_then(Option::as_ref)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().flatten()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Registered entities of `kind` in ascending index order.
    pub fn entities(&self, kind: EntityKind) -> impl Iterator<Item = EntityId> + '_ {
        self.registered[kind.slot()]
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(move |(i, _)| EntityId::new(kind, i as u32))
    }

    fn check_side(&self, entity: EntityId, relation: Relation, direction: Direction) -> Result<(), NetError> {
        if !self.is_registered(entity) {
            return Err(NetError::UnknownEntity(entity));
        }
        let (want, side) = match direction {
            Direction::Forward => (relation.head_kind(), "head"),
            Direction::Inverse => (relation.tail_kind(), "tail"),
        };
        if entity.kind != want {
            return Err(NetError::WrongSide { entity, relation, side });
        }
        Ok(())
    }

    /// Neighbor indices in ascending order, without validation; unknown
    /// entities have no neighbors.
    pub fn adjacent(&self, entity: EntityId, relation: Relation, direction: Direction) -> &[u32] {
        let table = match direction {
            Direction::Forward => &self.forward[relation.slot()],
            Direction::Inverse => &self.inverse[relation.slot()],
        };
        table.get(entity.index as usize).map_or(&[], Vec::as_slice)
    }

    /// Neighbors of `entity` along `relation`, in ascending index order.
    pub fn neighbors(&self, entity: EntityId, relation: Relation, direction: Direction) -> Result<Vec<EntityId>, NetError> {
        self.check_side(entity, relation, direction)?;
        let kind = match direction {
            Direction::Forward => relation.tail_kind(),
            Direction::Inverse => relation.head_kind(),
        };
        Ok(self
            .adjacent(entity, relation, direction)
            .iter()
            .map(|&i| EntityId::new(kind, i))
            .collect())
    }

    pub fn has_edge(&self, head: EntityId, relation: Relation, tail: EntityId) -> bool {
        head.kind == relation.head_kind()
            && tail.kind == relation.tail_kind()
            && self
                .adjacent(head, relation, Direction::Forward)
                .binary_search(&tail.index)
                .is_ok()
    }

    /// The single category of an item, if it has one.
    pub fn item_category(&self, item: u32) -> Option<u32> {
        self.adjacent(EntityId::item(item), Relation::ItemInCategory, Direction::Forward)
            .first()
            .copied()
    }

    pub fn item_brand(&self, item: u32) -> Option<u32> {
        self.adjacent(EntityId::item(item), Relation::ItemOfBrand, Direction::Forward)
            .first()
            .copied()
    }

    pub fn item_shop(&self, item: u32) -> Option<u32> {
        self.adjacent(EntityId::item(item), Relation::ItemInShop, Direction::Forward)
            .first()
            .copied()
    }

    /// Number of concepts containing an item, category or brand.
    pub fn df(&self, entity: EntityId) -> u32 {
        df_slot(entity.kind)
            .and_then(|s| self.df[s].get(entity.index as usize).copied())
            .unwrap_or(0)
    }

    /// Smoothed inverse document frequency `ln((1+|C|)/(1+df)) + 1`.
    pub fn idf(&self, entity: EntityId) -> f64 {
        let concepts = self.count(EntityKind::Concept) as f64;
        ((1.0 + concepts) / (1.0 + self.df(entity) as f64)).ln() + 1.0
    }

    fn tfidf(&self, head: u32, relation: Relation, tail: u32) -> f64 {
        let members = self.inverse[relation.slot()][tail as usize].len() as f64;
        let head = EntityId::new(relation.head_kind(), head);
        self.idf(head) / members
    }

    /// Priority of an existing edge, in (0, 1].
    pub fn edge_score(&self, head: EntityId, relation: Relation, tail: EntityId) -> Result<f64, NetError> {
        if !self.has_edge(head, relation, tail) {
            return Err(NetError::MissingEdge { head, relation, tail });
        }
        if !relation.is_tfidf() {
            return Ok(1.0);
        }
        Ok(self.tfidf(head.index, relation, tail.index) / self.max_tfidf[relation.slot()])
    }

    /// Lists every consistency problem; empty for a healthy net.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for relation in Relation::ALL {
            let r = relation.slot();
            let triples: Vec<&Triple> = self.triples.iter().filter(|t| t.relation == relation).collect();
            let fwd: usize = self.forward[r].iter().map(Vec::len).sum();
            let inv: usize = self.inverse[r].iter().map(Vec::len).sum();
            if fwd != triples.len() || inv != triples.len() {
                out.push(Violation::IndexMismatch {
                    relation,
                    detail: format!("{} triples, {fwd} forward and {inv} inverse entries", triples.len()),
                });
                continue;
            }
            if let Some(t) = triples.iter().find(|t| {
                !self.has_edge(t.head, relation, t.tail)
                    || self
                        .adjacent(t.tail, relation, Direction::Inverse)
                        .binary_search(&t.head.index)
                        .is_err()
            }) {
                out.push(Violation::IndexMismatch {
                    relation,
                    detail: format!("triple {} -> {} missing from an index", t.head, t.tail),
                });
            }
        }
        for (kind, relation) in [
            (EntityKind::Item, Relation::ItemInConcept),
            (EntityKind::Category, Relation::CategoryInConcept),
            (EntityKind::Brand, Relation::BrandInConcept),
        ] {
            let stored = &self.df[df_slot(kind).expect("df kind")];
            for (i, tails) in self.forward[relation.slot()].iter().enumerate() {
                let actual = tails.len() as u32;
                let s = stored.get(i).copied().unwrap_or(0);
                if s != actual {
                    out.push(Violation::DfMismatch {
                        entity: EntityId::new(kind, i as u32),
                        stored: s,
                        actual,
                    });
                }
            }
        }
        for c in self.concepts() {
            if self.adjacent(c.id(), Relation::ItemInConcept, Direction::Inverse).is_empty() {
                out.push(Violation::OrphanConcept(c.index));
            }
            if c.vocabulary.is_empty() {
                out.push(Violation::EmptyVocabulary(c.index));
            }
        }
        for item in self.entities(EntityKind::Item) {
            for (relation, min) in [
                (Relation::ItemInCategory, 1),
                (Relation::ItemOfBrand, 0),
                (Relation::ItemInShop, 1),
            ] {
                let count = self.adjacent(item, relation, Direction::Forward).len();
                if count > 1 || count < min {
                    out.push(Violation::NonFunctional {
                        item: item.index,
                        relation,
                        count,
                    });
                }
            }
        }
        out
    }

    /// Test hook for corrupting the df tables.
    #[doc(hidden)]
    pub fn df_table_mut(&mut self, kind: EntityKind) -> &mut Vec<u32> {
        &mut self.df[df_slot(kind).expect("item, category or brand")]
    }

    /// Every line of the JSONL form, in a canonical order.
    pub fn records(&self) -> Vec<NetRecord> {
        let mut out = Vec::new();
        for kind in [EntityKind::Item, EntityKind::Category, EntityKind::Brand, EntityKind::Shop] {
            for id in self.entities(kind) {
                out.push(NetRecord::Entity(EntityRecord {
                    kind,
                    index: id.index,
                    name: self.names.get(&id).cloned(),
                }));
            }
        }
        out.extend(self.concepts().cloned().map(NetRecord::Concept));
        out.extend(self.triples.iter().copied().map(NetRecord::Triple));
        out
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Streams records from JSON lines; blank lines are skipped.
    pub fn read_jsonl(r: impl BufRead) -> Result<Self, NetError> {
        let mut b = NetBuilder::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|source| NetError::Io {
                path: "<reader>".into(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: NetRecord = serde_json::from_str(&line).map_err(|e| NetError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            b.add_record(record)?;
        }
        b.build()
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let file = std::fs::File::open(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let io = |source| NetError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.write_jsonl(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}
