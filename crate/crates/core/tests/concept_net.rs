mod common;

use common::{concept, entities, toy_net};
use ecn_core::concept_net::{
    ConceptNet, Direction, EntityId, EntityKind, NetError, Relation, Triple, Violation,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn iic(i: u32, c: u32) -> Triple {
    Triple::new(EntityId::item(i), Relation::ItemInConcept, EntityId::concept(c))
}

/// Items 0..4 each with a category and shop; concepts 0..n.
fn small(n_concepts: u32, links: &[(u32, u32)]) -> ConceptNet {
    let mut ents = entities(EntityKind::Item, 4);
    ents.extend(entities(EntityKind::Category, 2));
    ents.extend(entities(EntityKind::Shop, 1));
    let mut triples = Vec::new();
    for i in 0..4 {
        triples.push(Triple::new(EntityId::item(i), Relation::ItemInCategory, EntityId::category(i % 2)));
        triples.push(Triple::new(EntityId::item(i), Relation::ItemInShop, EntityId::shop(0)));
    }
    triples.extend(links.iter().map(|&(i, c)| iic(i, c)));
    ConceptNet::build(ents, (0..n_concepts).map(concept), triples).unwrap()
}

#[test]
fn empty_net_is_valid_with_zero_df() {
    let net = ConceptNet::build(entities(EntityKind::Item, 3), vec![], vec![]).unwrap();
    assert!(net.triples().is_empty());
    for i in 0..3 {
        assert_eq!(net.df(EntityId::item(i)), 0);
    }
    // Items without category/shop break functionality, nothing else.
    assert!(net
        .validate()
        .iter()
        .all(|v| matches!(v, Violation::NonFunctional { .. })));
}

#[test]
fn duplicate_triples_collapse() {
    let net = small(1, &[(0, 0), (0, 0), (1, 0)]);
    let n = net.triples().iter().filter(|t| t.relation == Relation::ItemInConcept).count();
    assert_eq!(n, 2);
}

#[test]
fn df_counts_containing_concepts() {
    let net = small(3, &[(0, 0), (0, 1), (1, 2)]);
    assert_eq!(net.df(EntityId::item(0)), 2);
    assert_eq!(net.df(EntityId::item(1)), 1);
    assert_eq!(net.df(EntityId::item(3)), 0);
}

#[test]
fn neighbors_queries() {
    let net = small(2, &[(2, 0), (0, 0), (3, 1)]);
    assert!(net
        .neighbors(EntityId::item(1), Relation::ItemInConcept, Direction::Forward)
        .unwrap()
        .is_empty());
    assert_eq!(
        net.neighbors(EntityId::concept(0), Relation::ItemInConcept, Direction::Inverse).unwrap(),
        vec![EntityId::item(0), EntityId::item(2)]
    );
    assert!(matches!(
        net.neighbors(EntityId::item(9), Relation::ItemInConcept, Direction::Forward),
        Err(NetError::UnknownEntity(_))
    ));
}

#[test]
fn idf_hand_values() {
    // |C| = 3; item 0 in one concept, item 1 in all three.
    let net = small(3, &[(0, 0), (1, 0), (1, 1), (1, 2), (2, 1), (3, 2)]);
    assert!((net.idf(EntityId::item(0)) - (2f64.ln() + 1.0)).abs() < 1e-12);
    assert!((net.idf(EntityId::item(0)) - 1.6931).abs() < 1e-4);
    assert!((net.idf(EntityId::item(1)) - 1.0).abs() < 1e-12);
}

#[test]
fn edge_scores() {
    let net = small(3, &[(0, 0), (1, 0), (1, 1), (1, 2), (2, 1), (3, 2)]);
    let cat = net.edge_score(EntityId::item(0), Relation::ItemInCategory, EntityId::category(0)).unwrap();
    assert_eq!(cat, 1.0);
    let scores: Vec<f64> = net
        .triples()
        .iter()
        .filter(|t| t.relation == Relation::ItemInConcept)
        .map(|t| net.edge_score(t.head, t.relation, t.tail).unwrap())
        .collect();
    assert!(scores.iter().all(|&s| s > 0.0 && s <= 1.0));
    assert_eq!(scores.iter().cloned().fold(0.0, f64::max), 1.0);
    assert!(matches!(
        net.edge_score(EntityId::item(3), Relation::ItemInConcept, EntityId::concept(0)),
        Err(NetError::MissingEdge { .. })
    ));
}

#[test]
fn build_rejects_bad_triples() {
    let bad_kind = Triple::new(EntityId::category(0), Relation::ItemInConcept, EntityId::concept(0));
    let r = ConceptNet::build(entities(EntityKind::Category, 1), vec![concept(0)], vec![bad_kind]);
    assert!(matches!(r, Err(NetError::KindMismatch(_))));
    let r = ConceptNet::build(entities(EntityKind::Item, 1), vec![concept(0)], vec![iic(5, 0)]);
    assert!(matches!(r, Err(NetError::Dangling(id)) if id == EntityId::item(5)));
}

#[test]
fn validate_reports() {
    let net = small(2, &[(0, 0), (1, 0)]);
    assert_eq!(net.validate(), vec![Violation::OrphanConcept(1)]);

    let mut net = small(1, &[(0, 0), (1, 0)]);
    assert!(net.validate().is_empty());
    net.df_table_mut(EntityKind::Item)[1] = 7;
    assert_eq!(
        net.validate(),
        vec![Violation::DfMismatch {
            entity: EntityId::item(1),
            stored: 7,
            actual: 1
        }]
    );
}

#[test]
fn jsonl_round_trip_any_line_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = toy_net(&mut rng).build();
    let mut buf = Vec::new();
    net.write_jsonl(&mut buf).unwrap();
    let mut lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
    lines.shuffle(&mut rng);
    let back = ConceptNet::read_jsonl(lines.join("\n").as_bytes()).unwrap();
    assert_eq!(back, net);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("conceptnet.jsonl");
    net.save(&path).unwrap();
    assert_eq!(ConceptNet::load(&path).unwrap(), net);
}

#[test]
fn malformed_line_names_its_number() {
    let text = "{\"entity\":{\"kind\":\"item\",\"index\":0}}\n{\"triple\": 5}\n";
    match ConceptNet::read_jsonl(text.as_bytes()) {
        Err(NetError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn build_is_order_insensitive(seed in any::<u64>(), shuffle in any::<u64>()) {
        let toy = toy_net(&mut ChaCha8Rng::seed_from_u64(seed));
        let net = toy.build();
        let mut t = toy.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        t.triples.shuffle(&mut rng);
        t.entities.shuffle(&mut rng);
        t.concepts.shuffle(&mut rng);
        prop_assert_eq!(t.build(), net);
    }

    #[test]
    fn indices_mirror_triples_and_scores_are_bounded(seed in any::<u64>()) {
        let net = toy_net(&mut ChaCha8Rng::seed_from_u64(seed)).build();
        prop_assert!(net.validate().iter().all(|v| matches!(v, Violation::OrphanConcept(_))));
        for r in Relation::ALL {
            let n = net.triples().iter().filter(|t| t.relation == r).count();
            let fwd: usize = net.entities(r.head_kind()).map(|e| net.adjacent(e, r, Direction::Forward).len()).sum();
            let inv: usize = net.entities(r.tail_kind()).map(|e| net.adjacent(e, r, Direction::Inverse).len()).sum();
            prop_assert_eq!(fwd, n);
            prop_assert_eq!(inv, n);
        }
        for t in net.triples() {
            let s = net.edge_score(t.head, t.relation, t.tail).unwrap();
            prop_assert!(s > 0.0 && s <= 1.0);
        }
    }

    #[test]
    fn idf_is_antitone_in_df(seed in any::<u64>()) {
        let net = toy_net(&mut ChaCha8Rng::seed_from_u64(seed)).build();
        for kind in [EntityKind::Item, EntityKind::Category, EntityKind::Brand] {
            let ids: Vec<EntityId> = net.entities(kind).collect();
            for &a in &ids {
                for &b in &ids {
                    if net.df(a) < net.df(b) {
                        prop_assert!(net.idf(a) > net.idf(b));
                    }
                }
            }
        }
    }
}
