use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rkdea::eval::{evaluate, hits_at_k, mrr, rank_alignments, CandidatePool, Direction};
use rkdea::kgdata::{AlignmentSeeds, GlobalIndex, KnowledgeGraph, Side, Triple};
use rkdea::numkit::DenseMatrix;
use rkdea::sampling::{mine_alignment_negatives, nearest, sample_triple_negatives};

fn index(n1: usize, n2: usize) -> GlobalIndex {
    GlobalIndex::new(&KnowledgeGraph::empty(n1, 2), &KnowledgeGraph::empty(n2, 2))
}

fn d2(emb: &DenseMatrix<f64>, a: usize, b: usize) -> f64 {
    emb.row(a).iter().zip(emb.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Full sort by `(distance, id)`.
fn brute_nearest(emb: &DenseMatrix<f64>, q: usize, cands: impl Iterator<Item = usize>, exclude: usize) -> Vec<usize> {
    let mut v: Vec<(f64, usize)> = cands.filter(|&c| c != exclude).map(|c| (d2(emb, q, c), c)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|x| x.1).collect()
}

/// Coarse coordinates so distance ties actually occur.
fn lattice(rng: &mut impl Rng, n: usize, d: usize) -> DenseMatrix<f64> {
    DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(0..4) as f64).collect()).unwrap()
}

proptest! {
    #[test]
    fn nearest_matches_full_sort(seed in any::<u64>(), n in 2usize..40, m in 0usize..45) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = lattice(&mut rng, n, 3);
        let q = rng.random_range(0..n);
        let mut want = brute_nearest(&emb, q, 0..n, q);
        want.truncate(m);
        prop_assert_eq!(nearest(&emb, emb.row(q), 0..n, q, m), want);
    }
}

#[test]
fn alignment_negatives_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (n1, n2) = (rng.random_range(3..15), rng.random_range(3..15));
        let idx = index(n1, n2);
        let emb = lattice(&mut rng, n1 + n2, 2);
        let pairs: Vec<(usize, usize)> = (0..n1.min(n2)).map(|i| (i, n2 - 1 - i)).collect();
        let seeds = AlignmentSeeds::new(pairs).unwrap();
        let k2 = rng.random_range(1..6);
        let got = mine_alignment_negatives(&emb, &seeds, &idx, k2).unwrap();
        for (negs, &p) in got.iter().zip(seeds.pairs()) {
            let (a, b) = idx.global_pair(p);
            let mut want: Vec<(usize, usize)> =
                brute_nearest(&emb, a, idx.range(Side::Kg2), b).into_iter().take(k2).map(|x| (a, x)).collect();
            want.extend(brute_nearest(&emb, b, idx.range(Side::Kg1), a).into_iter().take(k2).map(|y| (y, b)));
            assert_eq!(negs, &want);
        }
    }
}

#[test]
fn triple_negatives_follow_neighbor_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for round in 0..20 {
        let (n1, n2) = (12, 9);
        let idx = index(n1, n2);
        let emb = DenseMatrix::<f64>::random_normal(n1 + n2, 3, 1.0, &mut rng);
        let mut triples: Vec<Triple> = (0..15)
            .map(|_| {
                let side = if rng.random_bool(0.5) { Side::Kg1 } else { Side::Kg2 };
                let r = idx.range(side);
                Triple::new(rng.random_range(r.clone()), rng.random_range(0..2), rng.random_range(r))
            })
            .filter(|t| t.head != t.tail)
            .collect();
        triples.dedup();
        let truth: HashSet<Triple> = triples.iter().copied().collect();
        let k1 = 1 + round % 7;
        let negs = sample_triple_negatives(Some(&emb), &triples, &idx, k1, round as u64).unwrap();
        assert_eq!(negs.len(), triples.len());
        for (t, list) in triples.iter().zip(&negs) {
            assert_eq!(list.len(), k1, "enough candidates exist");
            let range = idx.range(idx.locate(t.head).0);
            let mut heads = Vec::new();
            let mut tails = Vec::new();
            for n in list {
                assert!(!truth.contains(n));
                assert_eq!(n.relation, t.relation);
                assert!(range.contains(&n.head) && range.contains(&n.tail));
                if n.tail == t.tail && n.head != t.head {
                    heads.push(n.head);
                } else {
                    assert_eq!(n.head, t.head);
                    tails.push(n.tail);
                }
            }
            // Each side emits a prefix of its nearest-neighbor order, minus true triples.
            let ordered = |orig: usize, make: &dyn Fn(usize) -> Triple| -> Vec<usize> {
                brute_nearest(&emb, orig, range.clone(), orig).into_iter().filter(|&e| !truth.contains(&make(e))).collect()
            };
            let head_order = ordered(t.head, &|e| Triple::new(e, t.relation, t.tail));
            let tail_order = ordered(t.tail, &|e| Triple::new(t.head, t.relation, e));
            assert_eq!(heads, head_order[..heads.len()]);
            assert_eq!(tails, tail_order[..tails.len()]);
        }
    }
}

#[test]
fn uniform_negatives_avoid_true_triples() {
    let idx = index(6, 6);
    let triples: Vec<Triple> = (0..5).map(|i| Triple::new(i, 0, i + 1)).collect();
    let negs = sample_triple_negatives::<f64>(None, &triples, &idx, 8, 3).unwrap();
    for (t, list) in triples.iter().zip(&negs) {
        assert!(!list.is_empty());
        for n in list {
            assert!(!triples.contains(n));
            assert!(n.head == t.head || n.tail == t.tail);
            assert!(n.head < 6 && n.tail < 6);
        }
    }
    assert_eq!(negs, sample_triple_negatives::<f64>(None, &triples, &idx, 8, 3).unwrap());
}

/// Ranks from an explicit distance matrix between queries and candidates.
fn oracle_ranks(emb: &DenseMatrix<f64>, queries: &[(usize, usize)], candidates: &[usize]) -> Vec<usize> {
    queries
        .iter()
        .map(|&(q, target)| {
            let row: Vec<(f64, usize)> = candidates.iter().map(|&c| (d2(emb, q, c), c)).collect();
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            1 + sorted.iter().position(|&(_, c)| c == target).unwrap()
        })
        .collect()
}

#[test]
fn metrics_match_distance_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = 60;
        let idx = index(n, n);
        let emb = lattice(&mut rng, 2 * n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let seeds = AlignmentSeeds::new((0..50).map(|i| (i, perm[i])).collect()).unwrap();
        for dir in [Direction::Kg1ToKg2, Direction::Kg2ToKg1] {
            let queries: Vec<(usize, usize)> = seeds
                .pairs()
                .iter()
                .map(|&p| {
                    let (a, b) = idx.global_pair(p);
                    if dir == Direction::Kg1ToKg2 { (a, b) } else { (b, a) }
                })
                .collect();
            let test_pool: Vec<usize> = queries.iter().map(|q| q.1).collect();
            let side = if dir == Direction::Kg1ToKg2 { Side::Kg2 } else { Side::Kg1 };
            let all_pool: Vec<usize> = idx.range(side).collect();
            for (pool, cands) in [(CandidatePool::TestSet, &test_pool), (CandidatePool::AllEntities, &all_pool)] {
                let want = oracle_ranks(&emb, &queries, cands);
                assert_eq!(rank_alignments(&emb, &seeds, &idx, dir, pool).unwrap(), want);
                let m = evaluate(&emb, &seeds, &idx, dir, pool, &[1, 5, 10]).unwrap();
                for k in [1, 5, 10] {
                    let hits = want.iter().filter(|&&r| r <= k).count() as f64 / 50.0;
                    assert_eq!(m.hits_at(k), Some(hits));
                }
                assert_eq!(m.mrr, want.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / 50.0);
            }
        }
    }
}

#[test]
fn metric_edge_cases() {
    assert_eq!(hits_at_k(&[1, 3, 12], 10).unwrap(), 2.0 / 3.0);
    assert_eq!(mrr(&[1, 2, 4]).unwrap(), (1.0 + 0.5 + 0.25) / 3.0);
    assert!(hits_at_k(&[1], 0).is_err());
    assert!(mrr(&[0]).is_err());
}
