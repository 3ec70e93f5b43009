mod common;

use std::str::FromStr;

use common::{concept, entities, oracle_edge_score, oracle_paths, toy_context, toy_net, Toy, NOW};
use ecn_core::concept_net::{ConceptNet, EntityId, EntityKind, Relation, Triple};
use ecn_core::paths::{enumerate, sample, sample_top_k, MetaPath, PathError, PathInstance, PathKind, UserContext};
use ecn_core::records::{Behavior, BehaviorType, Weighted, SECONDS_PER_DAY};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ctx(behaviors: Vec<Behavior>) -> UserContext {
    UserContext {
        now: NOW,
        behaviors,
        preferred_categories: vec![],
        preferred_brands: vec![],
    }
}

fn behavior(item: u32, kind: BehaviorType, days_ago: i64) -> Behavior {
    Behavior {
        user: 0,
        item,
        kind,
        time: NOW - days_ago * SECONDS_PER_DAY,
    }
}

/// 4 items, 2 categories, 1 brand, 3 concepts.
fn hand_toy() -> Toy {
    let mut ents = entities(EntityKind::Item, 4);
    ents.extend(entities(EntityKind::Category, 2));
    ents.extend(entities(EntityKind::Brand, 1));
    ents.extend(entities(EntityKind::Shop, 1));
    let (i, k, b, s, c) = (EntityId::item, EntityId::category, EntityId::brand, EntityId::shop, EntityId::concept);
    use Relation::*;
    let triples = vec![
        Triple::new(i(0), ItemInCategory, k(0)),
        Triple::new(i(1), ItemInCategory, k(0)),
        Triple::new(i(2), ItemInCategory, k(1)),
        Triple::new(i(3), ItemInCategory, k(1)),
        Triple::new(i(0), ItemOfBrand, b(0)),
        Triple::new(i(2), ItemOfBrand, b(0)),
        Triple::new(i(0), ItemInShop, s(0)),
        Triple::new(i(1), ItemInShop, s(0)),
        Triple::new(i(2), ItemInShop, s(0)),
        Triple::new(i(3), ItemInShop, s(0)),
        Triple::new(i(0), ItemInConcept, c(0)),
        Triple::new(i(0), ItemInConcept, c(1)),
        Triple::new(i(1), ItemInConcept, c(0)),
        Triple::new(i(2), ItemInConcept, c(2)),
        Triple::new(i(3), ItemInConcept, c(2)),
        Triple::new(k(0), CategoryInConcept, c(0)),
        Triple::new(k(1), CategoryInConcept, c(0)),
        Triple::new(k(1), CategoryInConcept, c(2)),
        Triple::new(b(0), BrandInConcept, c(1)),
    ];
    Toy {
        entities: ents,
        concepts: (0..3).map(concept).collect(),
        triples,
        items: 4,
        categories: 2,
        brands: 1,
    }
}

fn assert_matches_oracle(toy: &Toy, net: &ConceptNet, ctx: &UserContext, k: usize) {
    for c in 0..toy.concepts.len() as u32 {
        for mp in MetaPath::ALL {
            let got = sample(net, ctx, c, mp, k).unwrap();
            let want = oracle_paths(toy, ctx, c, mp, k);
            let got_nodes: Vec<_> = got.iter().map(|p| p.nodes.clone()).collect();
            let want_nodes: Vec<_> = want.iter().map(|p| p.nodes.clone()).collect();
            assert_eq!(got_nodes, want_nodes, "{mp} to concept {c}");
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.meta_path, mp);
                for (a, b) in g.edge_scores.iter().zip(&w.scores) {
                    assert!((a - b).abs() <= 1e-12, "edge score {a} vs {b}");
                }
                assert!((g.priority - w.priority).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn no_behaviors_no_behavior_paths() {
    let toy = hand_toy();
    let net = toy.build();
    for mp in [MetaPath::Uic, MetaPath::Uitc, MetaPath::Uibc] {
        assert!(enumerate(&net, &ctx(vec![]), 0, mp).unwrap().is_empty());
    }
}

#[test]
fn single_behaved_item_gives_one_uic_instance() {
    let toy = hand_toy();
    let net = toy.build();
    let c = ctx(vec![behavior(0, BehaviorType::Purchase, 0)]);
    let got = enumerate(&net, &c, 0, MetaPath::Uic).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].nodes, vec![EntityId::item(0), EntityId::concept(0)]);
    assert_eq!(got[0].edge_scores[0], 1.0);
}

#[test]
fn hand_net_equals_dfs_oracle() {
    let toy = hand_toy();
    let net = toy.build();
    let mut c = ctx(vec![
        behavior(0, BehaviorType::Click, 3),
        behavior(2, BehaviorType::Purchase, 1),
        behavior(0, BehaviorType::AddToCart, 10),
        behavior(3, BehaviorType::Bookmark, 0),
    ]);
    c.preferred_categories = vec![Weighted { index: 1, weight: 0.4 }, Weighted { index: 0, weight: 0.9 }];
    c.preferred_brands = vec![Weighted { index: 0, weight: 0.7 }];
    assert_matches_oracle(&toy, &net, &c, 50);
    assert_matches_oracle(&toy, &net, &c, 1);
}

#[test]
fn duplicate_roots_keep_the_max_score() {
    let toy = hand_toy();
    let net = toy.build();
    let c = ctx(vec![behavior(1, BehaviorType::Click, 0), behavior(1, BehaviorType::Purchase, 7)]);
    let got = enumerate(&net, &c, 0, MetaPath::Uic).unwrap();
    assert_eq!(got.len(), 1);
    assert!((got[0].edge_scores[0] - (-1f64).exp()).abs() < 1e-15);
}

#[test]
fn unknown_names_and_concepts() {
    assert!(MetaPath::from_str("UXC").is_err());
    assert_eq!(MetaPath::from_str("uitc").unwrap(), MetaPath::Uitc);
    let net = hand_toy().build();
    assert!(matches!(
        enumerate(&net, &ctx(vec![]), 9, MetaPath::Uic),
        Err(PathError::UnknownConcept(9))
    ));
}

#[test]
fn meta_path_templates() {
    for mp in MetaPath::ALL {
        assert_eq!(*mp.node_kinds().last().unwrap(), EntityKind::Concept);
        let behavior = matches!(mp, MetaPath::Uic | MetaPath::Uitc | MetaPath::Uibc);
        assert_eq!(mp.kind() == PathKind::Behavior, behavior);
    }
}

fn instance(nodes: Vec<u32>, priority: f64) -> PathInstance {
    PathInstance {
        meta_path: MetaPath::Uic,
        nodes: nodes.into_iter().map(EntityId::item).collect(),
        edge_scores: vec![priority],
        priority,
    }
}

#[test]
fn top_k_ties_and_undersupply() {
    let pool = vec![instance(vec![3], 0.5), instance(vec![1], 0.5), instance(vec![2], 0.9)];
    let got: Vec<_> = sample_top_k(pool.clone(), 10).into_iter().map(|p| p.nodes[0].index).collect();
    assert_eq!(got, vec![2, 1, 3]);
    let got: Vec<_> = sample_top_k(pool, 2).into_iter().map(|p| p.nodes[0].index).collect();
    assert_eq!(got, vec![2, 1]);
}

#[test]
fn top_k_equals_sort_then_truncate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let pool: Vec<PathInstance> = (0..500)
            .map(|_| {
                // Coarse priorities force many ties.
                let p = rng.random_range(1..=20) as f64 / 20.0;
                instance(vec![rng.random_range(0..1000), rng.random_range(0..1000)], p)
            })
            .collect();
        let mut sorted = pool.clone();
        sorted.sort_by(|a, b| b.priority.partial_cmp(&a.priority).unwrap().then(a.nodes.cmp(&b.nodes)));
        sorted.truncate(50);
        assert_eq!(sample_top_k(pool, 50), sorted);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_nets_match_dfs_oracle(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = toy_net(&mut rng);
        let net = toy.build();
        let c = toy_context(&mut rng, &toy);
        assert_matches_oracle(&toy, &net, &c, k);
        assert_matches_oracle(&toy, &net, &c, 50);
    }

    #[test]
    fn instances_rewalk_and_priorities_shrink(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = toy_net(&mut rng);
        let net = toy.build();
        let c = toy_context(&mut rng, &toy);
        for concept in 0..toy.concepts.len() as u32 {
            for mp in MetaPath::ALL {
                let a = enumerate(&net, &c, concept, mp).unwrap();
                prop_assert_eq!(&a, &enumerate(&net, &c, concept, mp).unwrap());
                for inst in a {
                    prop_assert!(inst.priority > 0.0 && inst.priority <= 1.0);
                    let kinds: Vec<_> = inst.nodes.iter().map(|n| n.kind).collect();
                    prop_assert_eq!(kinds.as_slice(), mp.node_kinds());
                    let mut prefix = inst.edge_scores[0];
                    for (w, s) in inst.nodes.windows(2).zip(&inst.edge_scores[1..]) {
                        let t = toy.triples.iter().find(|t| t.head == w[0] && t.tail == w[1]);
                        prop_assert!(t.is_some(), "edge {} -> {} missing", w[0], w[1]);
                        prop_assert!((oracle_edge_score(&toy.triples, toy.concepts.len(), t.unwrap()) - s).abs() < 1e-12);
                        let next = prefix * s;
                        prop_assert!(next <= prefix);
                        prefix = next;
                    }
                }
            }
        }
    }
}
