use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::Path;

use proptest::prelude::*;

use rkdea::kgdata::{
    generate_synthetic, generate_synthetic_detailed, load_dataset, read_alignments, read_triples, split_seeds,
    write_alignments, write_dataset, write_triples, AlignmentSeeds, KnowledgeGraph, SplitSpec, SyntheticConfig, Triple,
};
use rkdea::Error;

fn small(rng_seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_entities: 40,
        n_relations: 4,
        n_triples: 90,
        feature_dim: 8,
        rng_seed,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn triples_survive_a_text_round_trip(raw in prop::collection::vec((0usize..30, 0usize..5, 0usize..30), 0..60)) {
        let kg = KnowledgeGraph::new(30, 5, raw.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect()).unwrap();
        let mut buf = Vec::new();
        write_triples(&kg, &mut buf).unwrap();
        let back = read_triples(Cursor::new(buf), Path::new("mem"), 30, 5).unwrap();
        prop_assert_eq!(back, kg);
    }

    #[test]
    fn alignments_survive_a_text_round_trip(perm in Just((0..25usize).collect::<Vec<_>>()).prop_shuffle(), take in 0usize..25) {
        let seeds = AlignmentSeeds::new(perm.iter().take(take).enumerate().map(|(i, &j)| (i, j)).collect()).unwrap();
        let mut buf = Vec::new();
        write_alignments(&seeds, &mut buf).unwrap();
        prop_assert_eq!(read_alignments(Cursor::new(buf), Path::new("mem")).unwrap(), seeds);
    }

    #[test]
    fn split_partitions_the_seeds(n in 1usize..200, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let seeds = AlignmentSeeds::new((0..n).map(|i| (i, i)).collect()).unwrap();
        let (train, test) = split_seeds(&seeds, frac, seed).unwrap();
        prop_assert_eq!(train.len(), (n as f64 * frac + 1e-9).floor() as usize);
        let mut all: Vec<_> = train.pairs().iter().chain(test.pairs()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, seeds.pairs().to_vec());
    }
}

#[test]
fn parse_errors_name_file_and_line() {
    let text = "0\t0\t1\n# comment\n\n2\tx\t1\n";
    match read_triples(Cursor::new(text), Path::new("triples_1"), 5, 5) {
        Err(Error::Parse { path, line, .. }) => assert_eq!((path.to_str().unwrap(), line), ("triples_1", 4)),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(read_triples(Cursor::new("0\t0\n"), Path::new("t"), 5, 5), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(read_triples(Cursor::new("0\t9\t1\n"), Path::new("t"), 5, 5), Err(Error::Parse { .. })));
    assert!(matches!(read_alignments(Cursor::new("0\t1\n0\t2\n"), Path::new("a")), Err(Error::Integrity(_))));
}

#[test]
fn split_example_counts() {
    let seeds = AlignmentSeeds::new((0..10).map(|i| (i, i)).collect()).unwrap();
    let (train, test) = split_seeds(&seeds, 0.3, 0).unwrap();
    assert_eq!((train.len(), test.len()), (3, 7));
    assert!(split_seeds(&seeds, 1.0, 0).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic(&small(3)).unwrap();
    write_dataset(&bundle, dir.path()).unwrap();
    let back = load_dataset(dir.path(), SplitSpec::default()).unwrap();
    assert_eq!(back.kg1.triples, bundle.kg1.triples);
    assert_eq!(back.kg2.triples, bundle.kg2.triples);
    assert_eq!(back.train_seeds, bundle.train_seeds);
    assert_eq!(back.test_seeds, bundle.test_seeds);
    // Features are stored at 32-bit precision and generated at it too.
    assert_eq!(back.features, bundle.features);
}

#[test]
fn missing_supervision_file_falls_back_to_split() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&generate_synthetic(&small(4)).unwrap(), dir.path()).unwrap();
    fs::remove_file(dir.path().join("sup_ent_ids")).unwrap();
    fs::remove_file(dir.path().join("features.f32")).unwrap();
    let split = SplitSpec {
        train_fraction: 0.5,
        rng_seed: 9,
    };
    let b = load_dataset(dir.path(), split).unwrap();
    assert_eq!(b.train_seeds.len(), 20);
    assert!(b.features.is_none());
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(generate_synthetic(&small(5)).unwrap(), generate_synthetic(&small(5)).unwrap());
    assert_ne!(generate_synthetic(&small(5)).unwrap(), generate_synthetic(&small(6)).unwrap());
}

#[test]
fn graphs_are_isomorphic_without_dropout() {
    for seed in 0..5 {
        let d = generate_synthetic_detailed(&SyntheticConfig {
            confusable_pairs: 4,
            ..small(seed)
        })
        .unwrap();
        let b = &d.bundle;
        assert_eq!(b.kg1.degree_multiset(), b.kg2.degree_multiset());
        assert_eq!(b.kg1.triples.len(), b.kg2.triples.len());
        let mapped: BTreeSet<Triple> = b
            .kg1
            .triples
            .iter()
            .map(|t| Triple::new(d.permutation[t.head], t.relation, d.permutation[t.tail]))
            .collect();
        let kg2: BTreeSet<Triple> = b.kg2.triples.iter().copied().collect();
        assert_eq!(mapped, kg2);
    }
}

#[test]
fn dropout_only_removes_edges() {
    let cfg = SyntheticConfig {
        edge_dropout: 0.2,
        ..small(8)
    };
    let d = generate_synthetic_detailed(&cfg).unwrap();
    let b = &d.bundle;
    assert!(b.kg2.triples.len() < b.kg1.triples.len());
    let kg1: BTreeSet<Triple> = b
        .kg1
        .triples
        .iter()
        .map(|t| Triple::new(d.permutation[t.head], t.relation, d.permutation[t.tail]))
        .collect();
    assert!(b.kg2.triples.iter().all(|t| kg1.contains(t)));
}

#[test]
fn twins_share_neighbors_under_other_labels() {
    let d = generate_synthetic_detailed(&SyntheticConfig {
        confusable_pairs: 5,
        ..small(12)
    })
    .unwrap();
    let kg1 = &d.bundle.kg1;
    assert_eq!(d.confusable.len(), 5);
    let edges_of = |e: usize| -> BTreeMap<(bool, usize), BTreeSet<usize>> {
        let mut m: BTreeMap<(bool, usize), BTreeSet<usize>> = BTreeMap::new();
        for t in &kg1.triples {
            if t.head == e {
                m.entry((true, t.tail)).or_default().insert(t.relation);
            } else if t.tail == e {
                m.entry((false, t.head)).or_default().insert(t.relation);
            }
        }
        m
    };
    for &(orig, twin) in &d.confusable {
        let (a, b) = (edges_of(orig), edges_of(twin));
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>(), "same neighbors");
        for (k, rels) in &a {
            assert!(rels.is_disjoint(&b[k]), "relation labels differ");
        }
        let f = d.bundle.features.as_ref().unwrap();
        // Same base vector; only the per-entity noise (0.05 per coordinate) differs.
        let gap: f64 = f.row(orig).iter().zip(f.row(twin)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 0.5, "twin features differ by {gap}");
    }
}

#[test]
fn invalid_generator_settings_are_rejected() {
    for cfg in [
        SyntheticConfig { n_entities: 1, ..small(0) },
        SyntheticConfig { n_relations: 0, ..small(0) },
        SyntheticConfig { train_fraction: 1.0, ..small(0) },
        SyntheticConfig { seed_fraction: 0.0, ..small(0) },
        SyntheticConfig { n_triples: 5, ..small(0) },
        SyntheticConfig { confusable_pairs: 30, ..small(0) },
    ] {
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InvalidInput(_))), "{cfg:?}");
    }
}
