//! Toy nets and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ecn_core::concept_net::{Concept, ConceptNet, Domain, EntityId, EntityKind, EntityRecord, Relation, Term, Triple};
use ecn_core::paths::{MetaPath, UserContext};
use ecn_core::records::{Behavior, BehaviorType, ConceptSchema, Weighted, SECONDS_PER_DAY};
use rand::Rng;

pub const NOW: i64 = 1_600_000_000;

pub fn concept(index: u32) -> Concept {
    let mut vocabulary = BTreeMap::new();
    vocabulary.insert(
        Domain::Object,
        Term {
            text: format!("thing{index}"),
            parent: None,
        },
    );
    Concept {
        index,
        name: format!("concept {index}"),
        vocabulary,
        schema: ConceptSchema::default(),
    }
}

pub fn entities(kind: EntityKind, n: u32) -> Vec<EntityRecord> {
    (0..n).map(|index| EntityRecord { kind, index, name: None }).collect()
}

#[derive(Clone, Debug)]
pub struct Toy {
    pub entities: Vec<EntityRecord>,
    pub concepts: Vec<Concept>,
    pub triples: Vec<Triple>,
    pub items: u32,
    pub categories: u32,
    pub brands: u32,
}

impl Toy {
    pub fn build(&self) -> ConceptNet {
        ConceptNet::build(self.entities.clone(), self.concepts.clone(), self.triples.clone()).expect("toy net builds")
    }
}

/// A random net with at most ~140 edges: every item has a category and a
/// shop and usually a brand; concept links are Bernoulli.
pub fn toy_net(rng: &mut impl Rng) -> Toy {
    let items = rng.random_range(1..=12u32);
    let categories = rng.random_range(1..=4u32);
    let brands = rng.random_range(1..=4u32);
    let shops = rng.random_range(1..=2u32);
    let n_concepts = rng.random_range(1..=5u32);
    let p = rng.random_range(0.15..0.5);
    let mut triples = Vec::new();
    for i in 0..items {
        let item = EntityId::item(i);
        triples.push(Triple::new(item, Relation::ItemInCategory, EntityId::category(rng.random_range(0..categories))));
        if rng.random_bool(0.8) {
            triples.push(Triple::new(item, Relation::ItemOfBrand, EntityId::brand(rng.random_range(0..brands))));
        }
        triples.push(Triple::new(item, Relation::ItemInShop, EntityId::shop(rng.random_range(0..shops))));
    }
    for c in 0..n_concepts {
        let cid = EntityId::concept(c);
        for i in 0..items {
            if rng.random_bool(p) {
                triples.push(Triple::new(EntityId::item(i), Relation::ItemInConcept, cid));
            }
        }
        for k in 0..categories {
            if rng.random_bool(p) {
                triples.push(Triple::new(EntityId::category(k), Relation::CategoryInConcept, cid));
            }
        }
        for b in 0..brands {
            if rng.random_bool(p) {
                triples.push(Triple::new(EntityId::brand(b), Relation::BrandInConcept, cid));
            }
        }
    }
    // Occasional duplicates exercise set semantics.
    if !triples.is_empty() && rng.random_bool(0.3) {
        let t = triples[rng.random_range(0..triples.len())];
        triples.push(t);
    }
    let mut entities = entities(EntityKind::Item, items);
    entities.extend(self::entities(EntityKind::Category, categories));
    entities.extend(self::entities(EntityKind::Brand, brands));
    entities.extend(self::entities(EntityKind::Shop, shops));
    Toy {
        entities,
        concepts: (0..n_concepts).map(concept).collect(),
        triples,
        items,
        categories,
        brands,
    }
}

pub fn toy_context(rng: &mut impl Rng, toy: &Toy) -> UserContext {
    let types = [BehaviorType::Click, BehaviorType::Bookmark, BehaviorType::AddToCart, BehaviorType::Purchase];
    let n = rng.random_range(0..=8);
    let mut behaviors: Vec<Behavior> = (0..n)
        .map(|_| Behavior {
            user: 0,
            item: rng.random_range(0..toy.items),
            kind: types[rng.random_range(0..4)],
            time: NOW - rng.random_range(0..20 * SECONDS_PER_DAY),
        })
        .collect();
    behaviors.sort_by_key(|b| b.time);
    let prefs = |rng: &mut dyn rand::RngCore, bound: u32| -> Vec<Weighted> {
        let n = rng.random_range(0..=3);
        (0..n)
            .map(|_| Weighted {
                index: rng.random_range(0..bound),
                weight: rng.random_range(0.01..=1.0),
            })
            .collect()
    };
    UserContext {
        now: NOW,
        behaviors,
        preferred_categories: prefs(rng, toy.categories),
        preferred_brands: prefs(rng, toy.brands),
    }
}

/// Edge score straight from the tf-idf definition, recomputed from the raw
/// triple list.
pub fn oracle_edge_score(triples: &[Triple], n_concepts: usize, t: &Triple) -> f64 {
    let set: BTreeSet<Triple> = triples.iter().copied().collect();
    if !matches!(
        t.relation,
        Relation::ItemInConcept | Relation::CategoryInConcept | Relation::BrandInConcept
    ) {
        return 1.0;
    }
    let tfidf = |x: &Triple| {
        let members = set.iter().filter(|y| y.relation == x.relation && y.tail == x.tail).count() as f64;
        let df = set.iter().filter(|y| y.relation == x.relation && y.head == x.head).count() as f64;
        let idf = ((1.0 + n_concepts as f64) / (1.0 + df)).ln() + 1.0;
        (1.0 / members) * idf
    };
    let max = set
        .iter()
        .filter(|y| y.relation == t.relation)
        .map(tfidf)
        .fold(f64::NEG_INFINITY, f64::max);
    tfidf(t) / max
}

#[derive(Clone, Debug, PartialEq)]
pub struct OraclePath {
    pub nodes: Vec<EntityId>,
    pub scores: Vec<f64>,
    pub priority: f64,
}

/// Exhaustive depth-first walk over the raw triples along the meta-path's
/// node kinds, then a full sort and truncation to `k`.
pub fn oracle_paths(toy: &Toy, ctx: &UserContext, target: u32, mp: MetaPath, k: usize) -> Vec<OraclePath> {
    let set: BTreeSet<Triple> = toy.triples.iter().copied().collect();
    let n_concepts = toy.concepts.len();
    let kinds = mp.node_kinds();
    // Root scores, merged by max.
    let mut roots: BTreeMap<EntityId, f64> = BTreeMap::new();
    let mut root = |id: EntityId, s: f64| {
        let e = roots.entry(id).or_insert(s);
        if s > *e {
            *e = s;
        }
    };
    match kinds[0] {
        EntityKind::Item => {
            for b in &ctx.behaviors {
                let w = match b.kind {
                    BehaviorType::Purchase => 1.0,
                    BehaviorType::AddToCart => 0.75,
                    BehaviorType::Bookmark => 0.5,
                    BehaviorType::Click => 0.25,
                };
                let days = (ctx.now - b.time).max(0) as f64 / 86_400.0;
                root(EntityId::item(b.item), w * (-days / 7.0).exp());
            }
        }
        EntityKind::Category => {
            for p in &ctx.preferred_categories {
                root(EntityId::category(p.index), p.weight);
            }
        }
        EntityKind::Brand => {
            for p in &ctx.preferred_brands {
                root(EntityId::brand(p.index), p.weight);
            }
        }
        _ => unreachable!(),
    }
    let mut out = Vec::new();
    fn dfs(
        set: &BTreeSet<Triple>,
        n_concepts: usize,
        kinds: &[EntityKind],
        target: EntityId,
        nodes: &mut Vec<EntityId>,
        scores: &mut Vec<f64>,
        out: &mut Vec<OraclePath>,
    ) {
        let depth = nodes.len();
        let here = *nodes.last().unwrap();
        if depth == kinds.len() {
            if here == target {
                out.push(OraclePath {
                    nodes: nodes.clone(),
                    scores: scores.clone(),
                    priority: scores.iter().product(),
                });
            }
            return;
        }
        let triples: Vec<Triple> = set.iter().copied().collect();
        for t in set.iter().filter(|t| t.head == here && t.tail.kind == kinds[depth]) {
            nodes.push(t.tail);
            scores.push(oracle_edge_score(&triples, n_concepts, t));
            dfs(set, n_concepts, kinds, target, nodes, scores, out);
            nodes.pop();
            scores.pop();
        }
    }
    for (&r, &s) in &roots {
        let mut nodes = vec![r];
        let mut scores = vec![s];
        dfs(&set, n_concepts, kinds, EntityId::concept(target), &mut nodes, &mut scores, &mut out);
    }
    // Priorities that agree to 1e-12 count as ties, decided by node order.
    out.sort_by(|a, b| {
        if (a.priority - b.priority).abs() <= 1e-12 {
            a.nodes.cmp(&b.nodes)
        } else {
            b.priority.total_cmp(&a.priority)
        }
    });
    out.truncate(k);
    out
}
