//! Turning raw records into the index vectors the model consumes.

use serde::{Deserialize, Serialize};

use crate::concept_net::{ConceptNet, EntityId, EntityKind};
use crate::dataset::DataError;
use crate::paths::{self, MetaPath, PathInstance, UserContext};
use crate::records::{Behavior, UserProfile, SECONDS_PER_DAY};

pub const BEHAVIOR_TYPES: usize = 4;
/// Day gaps 0..=29 plus one bucket for anything older.
pub const DAY_GAP_BUCKETS: usize = 31;

/// Index-space sizes taken from a concept net. For categories, brands and
/// shops the value itself is the UNK index, so tables need one extra row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub categories: usize,
    pub brands: usize,
    pub shops: usize,
    pub concepts: usize,
}

impl Vocab {
    pub fn of(net: &ConceptNet) -> Self {
        Self {
            categories: net.index_space(EntityKind::Category),
            brands: net.index_space(EntityKind::Brand),
            shops: net.index_space(EntityKind::Shop),
            concepts: net.index_space(EntityKind::Concept),
        }
    }
}

/// Category, brand, shop, behavior type and day-gap bucket of one behavior.
pub type BehaviorRow = [usize; 5];

/// `min(⌊(now − time) / 1 day⌋, 30)`.
pub fn day_gap_bucket(time: i64, now: i64) -> usize {
    (((now - time) / SECONDS_PER_DAY) as usize).min(DAY_GAP_BUCKETS - 1)
}

/// Category, brand and shop indices of an item, with UNK for anything missing.
pub fn item_description(net: &ConceptNet, item: u32) -> [usize; 3] {
    let v = Vocab::of(net);
    if !net.is_registered(EntityId::item(item)) {
        return [v.categories, v.brands, v.shops];
    }
    [
        net.item_category(item).map_or(v.categories, |c| c as usize),
        net.item_brand(item).map_or(v.brands, |b| b as usize),
        net.item_shop(item).map_or(v.shops, |s| s as usize),
    ]
}

pub fn featurize_behavior(b: &Behavior, net: &ConceptNet, now: i64) -> Result<BehaviorRow, DataError> {
    if b.time > now {
        return Err(DataError::FutureBehavior { time: b.time, now });
    }
    let [c, br, s] = item_description(net, b.item);
    Ok([c, br, s, b.kind.index(), day_gap_bucket(b.time, now)])
}

/// A path node as the model sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathNode {
    User,
    Item { category: usize, brand: usize, shop: usize },
    Category(usize),
    Brand(usize),
    Concept(usize),
}

impl PathNode {
    pub fn kind(&self) -> Option<EntityKind> {
        match self {
            PathNode::User => None,
            PathNode::Item { .. } => Some(EntityKind::Item),
            PathNode::Category(_) => Some(EntityKind::Category),
            PathNode::Brand(_) => Some(EntityKind::Brand),
            PathNode::Concept(_) => Some(EntityKind::Concept),
        }
    }
}

/// Featurized path instance, user node first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFeature {
    pub nodes: Vec<PathNode>,
}

pub fn featurize_path(net: &ConceptNet, inst: &PathInstance) -> PathFeature {
    let mut nodes = Vec::with_capacity(inst.nodes.len() + 1);
    nodes.push(PathNode::User);
    for id in &inst.nodes {
        let i = id.index as usize;
        nodes.push(match id.kind {
            EntityKind::Item => {
                let [category, brand, shop] = item_description(net, id.index);
                PathNode::Item { category, brand, shop }
            }
            EntityKind::Category => PathNode::Category(i),
            EntityKind::Brand => PathNode::Brand(i),
            EntityKind::Concept => PathNode::Concept(i),
            EntityKind::Shop => unreachable!("no meta-path passes through shops"),
        });
    }
    PathFeature { nodes }
}

/// Everything the model needs for one (user, concept) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    /// At most `seq_len` rows, oldest first.
    pub behaviors: Vec<BehaviorRow>,
    /// Positional index of each behavior row.
    pub positions: Vec<usize>,
    pub profile: [usize; 4],
    pub concept: usize,
    pub schema: [usize; 3],
    /// Indexed by [`MetaPath::index`], highest priority first.
    pub paths: [Vec<PathFeature>; 5],
}

impl ModelInput {
    /// Validity mask of the behavior block padded to `seq_len`.
    pub fn behavior_mask(&self, seq_len: usize) -> Vec<bool> {
        (0..seq_len).map(|i| i < self.behaviors.len()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seq_len: usize,
    pub k_paths: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { seq_len: 15, k_paths: 50 }
    }
}

/// The latest `seq_len` behaviors with `time <= now`, oldest first.
/// `behaviors` must be sorted by time.
pub fn recent_behaviors(behaviors: &[Behavior], now: i64, seq_len: usize) -> &[Behavior] {
    let end = behaviors.partition_point(|b| b.time <= now);
    &behaviors[end.saturating_sub(seq_len)..end]
}

pub fn user_context(profile: &UserProfile, behaviors: &[Behavior], now: i64, seq_len: usize) -> UserContext {
    UserContext {
        now,
        behaviors: recent_behaviors(behaviors, now, seq_len).to_vec(),
        preferred_categories: profile.preferred_categories.clone(),
        preferred_brands: profile.preferred_brands.clone(),
    }
}

/// Sampled instances per meta-path, in [`MetaPath::ALL`] order.
pub fn sample_paths(
    net: &ConceptNet,
    ctx: &UserContext,
    concept: u32,
    k_paths: usize,
) -> Result<[Vec<PathInstance>; 5], DataError> {
    let mut out: [Vec<PathInstance>; 5] = Default::default();
    for mp in MetaPath::ALL {
        out[mp.index()] = paths::sample(net, ctx, concept, mp, k_paths)?;
    }
    Ok(out)
}

/// Builds the model input and returns the sampled path instances alongside.
/// `behaviors` must be sorted by time.
pub fn build_model_input_traced(
    profile: &UserProfile,
    behaviors: &[Behavior],
    concept: u32,
    net: &ConceptNet,
    now: i64,
    cfg: SamplerConfig,
) -> Result<(ModelInput, [Vec<PathInstance>; 5]), DataError> {
    let c = net.concept(concept).ok_or(DataError::UnknownConcept(concept))?;
    let ctx = user_context(profile, behaviors, now, cfg.seq_len);
    let rows = ctx
        .behaviors
        .iter()
        .map(|b| featurize_behavior(b, net, now))
        .collect::<Result<Vec<_>, _>>()?;
    let instances = sample_paths(net, &ctx, concept, cfg.k_paths)?;
    let paths = std::array::from_fn(|m| instances[m].iter().map(|i| featurize_path(net, i)).collect());
    let input = ModelInput {
        positions: (0..rows.len()).collect(),
        behaviors: rows,
        profile: profile.slots(),
        concept: concept as usize,
        schema: c.schema.slots(),
        paths,
    };
    Ok((input, instances))
}

pub fn build_model_input(
    profile: &UserProfile,
    behaviors: &[Behavior],
    concept: u32,
    net: &ConceptNet,
    now: i64,
    cfg: SamplerConfig,
) -> Result<ModelInput, DataError> {
    build_model_input_traced(profile, behaviors, concept, net, now, cfg).map(|(i, _)| i)
}
