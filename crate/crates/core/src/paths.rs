//! Meta-path instance enumeration and top-k sampling.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_net::{ConceptNet, Direction, EntityId, EntityKind, Relation};
use crate::records::{Behavior, Weighted, SECONDS_PER_DAY};

/// Recency half-life style scale of the user→item edge, in days.
pub const RECENCY_DAYS: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetaPath {
    #[serde(rename = "UIC")]
    Uic,
    #[serde(rename = "UITC")]
    Uitc,
    #[serde(rename = "UIBC")]
    Uibc,
    #[serde(rename = "UTC")]
    Utc,
    #[serde(rename = "UBC")]
    Ubc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Behavior,
    Preference,
}

impl MetaPath {
    pub const ALL: [MetaPath; 5] = [MetaPath::Uic, MetaPath::Uitc, MetaPath::Uibc, MetaPath::Utc, MetaPath::Ubc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MetaPath::Uic => "UIC",
            MetaPath::Uitc => "UITC",
            MetaPath::Uibc => "UIBC",
            MetaPath::Utc => "UTC",
            MetaPath::Ubc => "UBC",
        }
    }

    pub fn kind(self) -> PathKind {
        match self {
            MetaPath::Uic | MetaPath::Uitc | MetaPath::Uibc => PathKind::Behavior,
            MetaPath::Utc | MetaPath::Ubc => PathKind::Preference,
        }
    }

    /// Node kinds after the leading user position.
    pub fn node_kinds(self) -> &'static [EntityKind] {
        use EntityKind::*;
        match self {
            MetaPath::Uic => &[Item, Concept],
            MetaPath::Uitc => &[Item, Category, Concept],
            MetaPath::Uibc => &[Item, Brand, Concept],
            MetaPath::Utc => &[Category, Concept],
            MetaPath::Ubc => &[Brand, Concept],
        }
    }

    /// Path length counting the user node.
    pub fn len(self) -> usize {
        self.node_kinds().len() + 1
    }
}

impl fmt::Display for MetaPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaPath {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetaPath::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PathError::UnknownMetaPath(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("unknown meta-path `{0}` (expected UIC, UITC, UIBC, UTC or UBC)")]
    UnknownMetaPath(String),
    #[error("concept {0} is not registered")]
    UnknownConcept(u32),
}

/// What the sampler knows about a user at one moment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserContext {
    pub now: i64,
    /// Ascending by time.
    pub behaviors: Vec<Behavior>,
    pub preferred_categories: Vec<Weighted>,
    pub preferred_brands: Vec<Weighted>,
}

/// Score of the user→item edge: type weight times `exp(-Δdays / 7)`.
/// Behaviors stamped after `now` count as Δ = 0.
pub fn behavior_edge_score(b: &Behavior, now: i64) -> f64 {
    let days = (now - b.time).max(0) as f64 / SECONDS_PER_DAY as f64;
    b.kind.weight() * (-days / RECENCY_DAYS).exp()
}

/// A concrete path from the user to a concept. `nodes` omits the user.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathInstance {
    pub meta_path: MetaPath,
    pub nodes: Vec<EntityId>,
    pub edge_scores: Vec<f64>,
    pub priority: f64,
}

impl PathInstance {
    fn new(meta_path: MetaPath, nodes: Vec<EntityId>, edge_scores: Vec<f64>) -> Self {
        let priority = edge_scores.iter().product();
        Self {
            meta_path,
            nodes,
            edge_scores,
            priority,
        }
    }
}

/// Highest first-edge score per root.
fn roots_by_max<I: Iterator<Item = (u32, f64)>>(it: I) -> BTreeMap<u32, f64> {
    let mut out = BTreeMap::new();
    for (index, score) in it {
        let e = out.entry(index).or_insert(score);
        if score > *e {
            *e = score;
        }
    }
    out
}

/// Every instance of `mp` from the user to `concept`. Instances sharing a
/// node sequence are merged, keeping the highest first-edge score.
pub fn enumerate(net: &ConceptNet, ctx: &UserContext, concept: u32, mp: MetaPath) -> Result<Vec<PathInstance>, PathError> {
    let c = EntityId::concept(concept);
    if !net.is_registered(c) {
        return Err(PathError::UnknownConcept(concept));
    }
    let score = |h: EntityId, r: Relation, t: EntityId| net.edge_score(h, r, t).expect("edge checked by caller");
    let mut out = Vec::new();
    match mp.kind() {
        PathKind::Behavior => {
            let roots = roots_by_max(ctx.behaviors.iter().map(|b| (b.item, behavior_edge_score(b, ctx.now))));
            for (item, s0) in roots {
                let item = EntityId::item(item);
                match mp {
                    MetaPath::Uic => {
                        if net.has_edge(item, Relation::ItemInConcept, c) {
                            let s = score(item, Relation::ItemInConcept, c);
                            out.push(PathInstance::new(mp, vec![item, c], vec![s0, s]));
                        }
                    }
                    _ => {
                        let (member, to_concept, kind) = if mp == MetaPath::Uitc {
                            (Relation::ItemInCategory, Relation::CategoryInConcept, EntityKind::Category)
                        } else {
                            (Relation::ItemOfBrand, Relation::BrandInConcept, EntityKind::Brand)
                        };
                        for &mid in net.adjacent(item, member, Direction::Forward) {
                            let mid = EntityId::new(kind, mid);
                            if net.has_edge(mid, to_concept, c) {
                                let s1 = score(item, member, mid);
                                let s2 = score(mid, to_concept, c);
                                out.push(PathInstance::new(mp, vec![item, mid, c], vec![s0, s1, s2]));
                            }
                        }
                    }
                }
            }
        }
        PathKind::Preference => {
            let (prefs, kind, relation) = if mp == MetaPath::Utc {
                (&ctx.preferred_categories, EntityKind::Category, Relation::CategoryInConcept)
            } else {
                (&ctx.preferred_brands, EntityKind::Brand, Relation::BrandInConcept)
            };
            for (index, w) in roots_by_max(prefs.iter().map(|p| (p.index, p.weight))) {
                let root = EntityId::new(kind, index);
                if net.has_edge(root, relation, c) {
                    let s = score(root, relation, c);
                    out.push(PathInstance::new(mp, vec![root, c], vec![w, s]));
                }
            }
        }
    }
    Ok(out)
}

/// Priority descending, then node sequence ascending.
pub fn priority_order(a: &PathInstance, b: &PathInstance) -> Ordering {
    b.priority.total_cmp(&a.priority).then_with(|| a.nodes.cmp(&b.nodes))
}

/// The `k` best instances in [`priority_order`].
pub fn sample_top_k(mut instances: Vec<PathInstance>, k: usize) -> Vec<PathInstance> {
    if instances.len() > k {
        instances.select_nth_unstable_by(k, priority_order);
        instances.truncate(k);
    }
    instances.sort_by(priority_order);
    instances
}

/// [`enumerate`] followed by [`sample_top_k`].
pub fn sample(net: &ConceptNet, ctx: &UserContext, concept: u32, mp: MetaPath, k: usize) -> Result<Vec<PathInstance>, PathError> {
    Ok(sample_top_k(enumerate(net, ctx, concept, mp)?, k))
}
