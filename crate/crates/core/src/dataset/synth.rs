//! Synthetic corpora with a planted need signal.
//!
//! Every concept owns a few categories and a pool of their items. Every user
//! has one to three latent needs among the schema-compatible concepts.
//! Behaviors mostly come from need pools; concept cards are exposed by
//! popularity, and a need concept is likely to be clicked while it is
//! "active" (one of its items is among the user's recent behaviors). A
//! positive is a card click followed by at least two related-item clicks;
//! negatives are drawn from exposures that got no click.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::concept_net::{Concept, ConceptNet, Domain, EntityKind, NetBuilder, Relation, Term, Triple, EntityId};
use crate::dataset::{features::recent_behaviors, write_json, Corpus, DataError, Manifest, MANIFEST_FILE};
use crate::records::{AgeLevel, Aspect, Behavior, BehaviorType, ConceptSchema, Gender, LifeStage, Sample, UserProfile, Weighted, SECONDS_PER_DAY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub concepts: usize,
    pub categories: usize,
    pub brands: usize,
    pub shops: usize,
    pub items: usize,
    pub brands_per_category: usize,
    pub no_brand_fraction: f64,
    pub categories_per_concept: usize,
    /// Chance that an item of a concept's category joins the concept.
    pub concept_item_fraction: f64,
    pub brands_per_concept: usize,
    /// Zipf exponent of concept popularity.
    pub popularity_exponent: f64,
    pub needs_min: usize,
    pub needs_max: usize,
    /// Chance that a behavior comes from a need's item pool.
    pub mixing_rate: f64,
    pub history_days: usize,
    pub sample_days: usize,
    pub behaviors_per_day: f64,
    pub exposures_per_day: usize,
    /// Window that decides whether a need is active, in behaviors.
    pub seq_len: usize,
    pub click_active_need: f64,
    pub click_inactive_need: f64,
    /// Card-click chance for a compatible concept that is not a need.
    pub label_noise: f64,
    pub related_click_trials: u64,
    pub related_click_prob: f64,
    pub min_related_clicks: u64,
    /// Chance that a need contributes a preferred category, and separately a brand.
    pub preference_from_need: f64,
    pub neg_ratio: f64,
    pub start_time: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            concepts: 50,
            categories: 200,
            brands: 500,
            shops: 300,
            items: 20000,
            brands_per_category: 5,
            no_brand_fraction: 0.1,
            categories_per_concept: 6,
            concept_item_fraction: 0.6,
            brands_per_concept: 4,
            popularity_exponent: 1.0,
            needs_min: 1,
            needs_max: 3,
            mixing_rate: 0.7,
            history_days: 30,
            sample_days: 4,
            behaviors_per_day: 1.2,
            exposures_per_day: 16,
            seq_len: 15,
            click_active_need: 0.6,
            click_inactive_need: 0.15,
            label_noise: 0.01,
            related_click_trials: 6,
            related_click_prob: 0.4,
            min_related_clicks: 2,
            preference_from_need: 0.5,
            neg_ratio: 5.0,
            start_time: 1_547_164_800,
        }
    }
}

impl SynthConfig {
    /// Closer to the production log: about 37 negatives per positive, with
    /// more exposures per user-day so enough unclicked cards exist.
    pub fn paper() -> Self {
        Self {
            neg_ratio: 37.0,
            exposures_per_day: 48,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |field: &'static str, reason: &str| {
            Err(DataError::InvalidConfig {
                field,
                reason: reason.to_string(),
            })
        };
        for (field, v) in [
            ("users", self.users),
            ("concepts", self.concepts),
            ("categories", self.categories),
            ("brands", self.brands),
            ("shops", self.shops),
            ("items", self.items),
            ("categories_per_concept", self.categories_per_concept),
            ("needs_min", self.needs_min),
            ("sample_days", self.sample_days),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        for (field, v) in [
            ("no_brand_fraction", self.no_brand_fraction),
            ("concept_item_fraction", self.concept_item_fraction),
            ("mixing_rate", self.mixing_rate),
            ("click_active_need", self.click_active_need),
            ("click_inactive_need", self.click_inactive_need),
            ("label_noise", self.label_noise),
            ("related_click_prob", self.related_click_prob),
            ("preference_from_need", self.preference_from_need),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, "must be a probability in [0, 1]");
            }
        }
        if self.brands_per_category > self.brands {
            return bad("brands_per_category", "exceeds the number of brands");
        }
        if self.categories_per_concept > self.categories {
            return bad("categories_per_concept", "exceeds the number of categories");
        }
        if self.needs_max < self.needs_min {
            return bad("needs_max", "must be at least needs_min");
        }
        if self.exposures_per_day == 0 || self.exposures_per_day > self.concepts {
            return bad("exposures_per_day", "must be between 1 and the number of concepts");
        }
        if !(self.neg_ratio >= 1.0 && self.neg_ratio.is_finite()) {
            return bad("neg_ratio", "must be at least 1");
        }
        if !(self.behaviors_per_day > 0.0 && self.behaviors_per_day.is_finite()) {
            return bad("behaviors_per_day", "must be positive");
        }
        if !(self.popularity_exponent >= 0.0 && self.popularity_exponent.is_finite()) {
            return bad("popularity_exponent", "must be non-negative");
        }
        Ok(())
    }
}

/// A generated corpus plus the hidden ground truth.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub corpus: Corpus,
    /// Latent need concepts per user.
    pub needs: BTreeMap<u32, Vec<u32>>,
}

impl SynthOutput {
    /// Writes the corpus files and `manifest.json`.
    pub fn save(&self, dir: &Path, seed: u64, config: &SynthConfig) -> Result<Manifest, DataError> {
        let counts = self.corpus.save(dir)?;
        let manifest = Manifest {
            seed,
            config: config.clone(),
            counts,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

const WORDS: &[(Domain, &[&str])] = &[
    (Domain::Time, &["spring", "summer", "autumn", "winter", "weekend", "holiday", "night"]),
    (Domain::Location, &["outdoor", "kitchen", "office", "beach", "garden", "campus", "gym"]),
    (Domain::Function, &["warm", "waterproof", "lightweight", "portable", "anti-slip", "cooling"]),
    (Domain::Incident, &["birthday", "wedding", "travel", "moving", "exam", "party"]),
    (Domain::Style, &["vintage", "minimal", "sporty", "cute", "classic"]),
    (Domain::Ip, &["cartoon", "anime", "movie"]),
];
const OBJECTS: &[&str] = &["barbecue", "picnic", "tea", "camera", "stroller", "desk", "tent", "yoga", "coffee", "bike", "baking", "fishing"];

fn vocabulary(rng: &mut ChaCha8Rng) -> (String, BTreeMap<Domain, Term>) {
    let mut vocab = BTreeMap::new();
    let extra = rng.random_range(1..=2);
    for i in sample_indices(rng, WORDS.len(), extra) {
        let (domain, words) = WORDS[i];
        let text = words[rng.random_range(0..words.len())].to_string();
        vocab.insert(domain, Term { text, parent: None });
    }
    let object = OBJECTS[rng.random_range(0..OBJECTS.len())].to_string();
    vocab.insert(Domain::Object, Term { text: object, parent: None });
    let name = vocab.values().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
    (name, vocab)
}

fn pick<A: Aspect>(rng: &mut ChaCha8Rng, set_prob: f64) -> Option<A> {
    rng.random_bool(set_prob).then(|| A::ALL[rng.random_range(0..A::COUNT)])
}

/// `k` distinct indices drawn without replacement with probability
/// proportional to `weights` (Efraimidis–Spirakis keys).
fn weighted_sample(rng: &mut ChaCha8Rng, candidates: &[u32], weights: &[f64], k: usize) -> Vec<u32> {
    let mut keyed: Vec<(f64, u32)> = candidates
        .iter()
        .map(|&c| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / weights[c as usize], c)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, c)| c).collect()
}

fn behavior_type(rng: &mut ChaCha8Rng) -> BehaviorType {
    match rng.random::<f64>() {
        x if x < 0.70 => BehaviorType::Click,
        x if x < 0.80 => BehaviorType::Bookmark,
        x if x < 0.92 => BehaviorType::AddToCart,
        _ => BehaviorType::Purchase,
    }
}

fn add_pref(list: &mut Vec<Weighted>, index: u32, weight: f64) {
    match list.iter_mut().find(|w| w.index == index) {
        Some(w) => w.weight = w.weight.max(weight),
        None => list.push(Weighted { index, weight }),
    }
}

pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NetBuilder::new();
    for (kind, n) in [
        (EntityKind::Category, cfg.categories),
        (EntityKind::Brand, cfg.brands),
        (EntityKind::Shop, cfg.shops),
    ] {
        for i in 0..n {
            net.add_entity(kind, i as u32, None)?;
        }
    }

    // Catalogue: each category stocks a handful of brands.
    let category_brands: Vec<Vec<u32>> = (0..cfg.categories)
        .map(|_| {
            let mut b: Vec<u32> = sample_indices(&mut rng, cfg.brands, cfg.brands_per_category)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            b.sort_unstable();
            b
        })
        .collect();
    let mut items_by_category: Vec<Vec<u32>> = vec![Vec::new(); cfg.categories];
    let mut item_brand: Vec<Option<u32>> = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items as u32 {
        let category = rng.random_range(0..cfg.categories);
        let brands = &category_brands[category];
        let brand = (!brands.is_empty() && !rng.random_bool(cfg.no_brand_fraction))
            .then(|| brands[rng.random_range(0..brands.len())]);
        let shop = rng.random_range(0..cfg.shops) as u32;
        net.add_entity(EntityKind::Item, i, None)?;
        let item = EntityId::item(i);
        net.add_triple(Triple::new(item, Relation::ItemInCategory, EntityId::category(category as u32)));
        if let Some(b) = brand {
            net.add_triple(Triple::new(item, Relation::ItemOfBrand, EntityId::brand(b)));
        }
        net.add_triple(Triple::new(item, Relation::ItemInShop, EntityId::shop(shop)));
        items_by_category[category].push(i);
        item_brand.push(brand);
    }

    // Concepts: a few categories each, a share of their items, and the
    // brands most common among those items.
    let mut pools: Vec<Vec<u32>> = Vec::with_capacity(cfg.concepts);
    let mut schemas = Vec::with_capacity(cfg.concepts);
    let mut concept_categories = Vec::with_capacity(cfg.concepts);
    let mut concept_brands = Vec::with_capacity(cfg.concepts);
    for k in 0..cfg.concepts as u32 {
        let mut cats: Vec<u32> = sample_indices(&mut rng, cfg.categories, cfg.categories_per_concept)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        cats.sort_unstable();
        let mut pool = Vec::new();
        for &c in &cats {
            for &i in &items_by_category[c as usize] {
                if rng.random_bool(cfg.concept_item_fraction) {
                    pool.push(i);
                }
            }
        }
        if pool.is_empty() {
            if let Some(&i) = cats.iter().flat_map(|&c| &items_by_category[c as usize]).next() {
                pool.push(i);
            }
        }
        pool.sort_unstable();
        let mut brand_counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in &pool {
            if let Some(b) = item_brand[i as usize] {
                *brand_counts.entry(b).or_default() += 1;
            }
        }
        let mut ranked: Vec<(usize, u32)> = brand_counts.into_iter().map(|(b, n)| (n, b)).collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut brands: Vec<u32> = ranked.into_iter().take(cfg.brands_per_concept).map(|(_, b)| b).collect();
        brands.sort_unstable();

        let schema = ConceptSchema {
            gender: pick::<Gender>(&mut rng, 0.45),
            life_stage: pick::<LifeStage>(&mut rng, 0.35),
            age_level: pick::<AgeLevel>(&mut rng, 0.15),
        };
        let (name, vocabulary) = vocabulary(&mut rng);
        net.add_concept(Concept {
            index: k,
            name,
            vocabulary,
            schema,
        })?;
        let c = EntityId::concept(k);
        for &i in &pool {
            net.add_triple(Triple::new(EntityId::item(i), Relation::ItemInConcept, c));
        }
        for &cat in &cats {
            net.add_triple(Triple::new(EntityId::category(cat), Relation::CategoryInConcept, c));
        }
        for &b in &brands {
            net.add_triple(Triple::new(EntityId::brand(b), Relation::BrandInConcept, c));
        }
        pools.push(pool);
        schemas.push(schema);
        concept_categories.push(cats);
        concept_brands.push(brands);
    }
    let net: ConceptNet = net.build()?;

    let mut popularity = vec![0.0; cfg.concepts];
    for (rank, i) in sample_indices(&mut rng, cfg.concepts, cfg.concepts).into_iter().enumerate() {
        popularity[i] = 1.0 / ((rank + 1) as f64).powf(cfg.popularity_exponent);
    }
    let all_concepts: Vec<u32> = (0..cfg.concepts as u32).collect();

    // Users, their latent needs and preferences.
    let mut profiles = Vec::with_capacity(cfg.users);
    let mut needs: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut intensities: Vec<Vec<f64>> = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users as u32 {
        let mut p = UserProfile::new(u);
        p.gender = pick(&mut rng, 0.9);
        p.age_level = pick(&mut rng, 0.9);
        if rng.random_bool(0.6) {
            p.kid_gender = pick(&mut rng, 0.9);
            p.kid_life_stage = pick(&mut rng, 1.0);
        }
        let compatible: Vec<u32> = all_concepts
            .iter()
            .copied()
            .filter(|&k| schemas[k as usize].compatible_with(&p))
            .collect();
        let n_needs = rng.random_range(cfg.needs_min..=cfg.needs_max);
        if n_needs > compatible.len() {
            return Err(DataError::Infeasible(format!(
                "user {u} needs {n_needs} latent concepts but only {} are schema-compatible",
                compatible.len()
            )));
        }
        let mut user_needs = weighted_sample(&mut rng, &compatible, &popularity, n_needs);
        user_needs.sort_unstable();
        for &k in &user_needs {
            let k = k as usize;
            if rng.random_bool(cfg.preference_from_need) {
                let cats = &concept_categories[k];
                add_pref(&mut p.preferred_categories, cats[rng.random_range(0..cats.len())], rng.random_range(0.5..=1.0));
            }
            if rng.random_bool(cfg.preference_from_need) && !concept_brands[k].is_empty() {
                let brands = &concept_brands[k];
                add_pref(&mut p.preferred_brands, brands[rng.random_range(0..brands.len())], rng.random_range(0.5..=1.0));
            }
        }
        add_pref(&mut p.preferred_categories, rng.random_range(0..cfg.categories) as u32, rng.random_range(0.1..=0.6));
        if rng.random_bool(0.5) {
            add_pref(&mut p.preferred_brands, rng.random_range(0..cfg.brands) as u32, rng.random_range(0.1..=0.6));
        }
        p.preferred_categories.sort_by_key(|w| w.index);
        p.preferred_brands.sort_by_key(|w| w.index);
        intensities.push(user_needs.iter().map(|_| rng.random_range(0.2..=1.0)).collect());
        needs.insert(u, user_needs);
        profiles.push(p);
    }

    // Behavior streams over the history and the sample days.
    let total_days = cfg.history_days + cfg.sample_days;
    let poisson = Poisson::new(cfg.behaviors_per_day).expect("validated rate");
    let mut behaviors: Vec<Vec<Behavior>> = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users as u32 {
        let user_needs = &needs[&u];
        let weights = &intensities[u as usize];
        let total_w: f64 = weights.iter().sum();
        let mut list = Vec::new();
        for day in 0..total_days {
            let n = poisson.sample(&mut rng) as usize;
            for _ in 0..n {
                let time = cfg.start_time + day as i64 * SECONDS_PER_DAY + rng.random_range(0..SECONDS_PER_DAY);
                let item = if rng.random_bool(cfg.mixing_rate) {
                    let mut x = rng.random::<f64>() * total_w;
                    let mut chosen = user_needs.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        if x < *w {
                            chosen = i;
                            break;
                        }
                        x -= w;
                    }
                    let pool = &pools[user_needs[chosen] as usize];
                    pool[rng.random_range(0..pool.len())]
                } else {
                    rng.random_range(0..cfg.items) as u32
                };
                list.push(Behavior {
                    user: u,
                    item,
                    kind: behavior_type(&mut rng),
                    time,
                });
            }
        }
        list.sort_by_key(|b| (b.time, b.item, b.kind));
        behaviors.push(list);
    }

    // Exposure sessions and labels, one snapshot per user-day.
    let related = Binomial::new(cfg.related_click_trials, cfg.related_click_prob).expect("validated probability");
    let mut samples = Vec::new();
    for s in 0..cfg.sample_days {
        let day_start = cfg.start_time + (cfg.history_days + s) as i64 * SECONDS_PER_DAY;
        let mut positives = Vec::new();
        let mut unclicked = Vec::new();
        for u in 0..cfg.users as u32 {
            let now = day_start + rng.random_range(10 * 3600..22 * 3600);
            let recent = recent_behaviors(&behaviors[u as usize], now, cfg.seq_len);
            let profile = &profiles[u as usize];
            let user_needs = &needs[&u];
            let exposed = weighted_sample(&mut rng, &all_concepts, &popularity, cfg.exposures_per_day);
            let mut exposed_sorted = exposed.clone();
            exposed_sorted.sort_unstable();
            for k in exposed_sorted {
                let p_click = if user_needs.contains(&k) {
                    let active = recent
                        .iter()
                        .any(|b| pools[k as usize].binary_search(&b.item).is_ok());
                    if active {
                        cfg.click_active_need
                    } else {
                        cfg.click_inactive_need
                    }
                } else if schemas[k as usize].compatible_with(profile) {
                    cfg.label_noise
                } else {
                    0.0
                };
                let sample = Sample {
                    user: u,
                    concept: k,
                    label: 0,
                    time: now,
                };
                if rng.random_bool(p_click) {
                    if related.sample(&mut rng) >= cfg.min_related_clicks {
                        positives.push(Sample { label: 1, ..sample });
                    }
                } else {
                    unclicked.push(sample);
                }
            }
        }
        let want = (cfg.neg_ratio * positives.len() as f64).round() as usize;
        if want > unclicked.len() {
            return Err(DataError::Infeasible(format!(
                "day {s}: {want} negatives requested but only {} unclicked exposures exist; \
                 raise exposures_per_day or lower neg_ratio",
                unclicked.len()
            )));
        }
        let mut day: Vec<Sample> = positives;
        let mut chosen: Vec<usize> = sample_indices(&mut rng, unclicked.len(), want).into_vec();
        chosen.sort_unstable();
        day.extend(chosen.into_iter().map(|i| unclicked[i]));
        day.sort_by_key(|x| (x.user, x.concept));
        samples.extend(day);
    }

    let corpus = Corpus::new(net, profiles, behaviors.into_iter().flatten().collect(), samples)?;
    Ok(SynthOutput { corpus, needs })
}
