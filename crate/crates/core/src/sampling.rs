//! Negative examples for both objectives.
//!
//! Teacher negatives corrupt the head or tail of a triple with an entity
//! that sits close to the original in the current embedding space. Student
//! negatives pair each seed entity with the nearest non-counterpart entities
//! of the other graph. Nearest-neighbor search is exact, with ties broken by
//! ascending entity id.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kgdata::{AlignmentSeeds, GlobalIndex, Side, Triple};
use crate::numkit::{DenseMatrix, Scalar};

/// Negatives for every positive, in positive order.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeCache<N> {
    pub lists: Vec<Vec<N>>,
    /// Epoch at which the cache was built.
    pub refreshed_at: usize,
}

impl<N> NegativeCache<N> {
    pub fn total(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

/// Initial sampling happens at epoch 0, then every `interval` epochs.
pub fn refresh_due(epoch: usize, interval: usize) -> bool {
    epoch % interval.max(1) == 0
}

/// Euclidean distance accumulated in f64, in coordinate order.
pub(crate) fn distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// The `m` rows of `candidates` nearest to `query`, skipping `exclude`,
/// ordered by `(distance, id)`.
pub fn nearest<T: Scalar>(
    emb: &DenseMatrix<T>,
    query: &[T],
    candidates: Range<usize>,
    exclude: usize,
    m: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .filter(|&c| c != exclude)
        .map(|c| (distance(query, emb.row(c)), c))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if m < scored.len() {
        scored.select_nth_unstable_by(m, cmp);
        scored.truncate(m);
    }
    scored.sort_unstable_by(cmp);
    scored.into_iter().map(|(_, c)| c).collect()
}

fn side_of(index: &GlobalIndex, triple: &Triple) -> Result<Side> {
    let (side, _) = index.locate(triple.head);
    if index.locate(triple.tail).0 != side || triple.tail >= index.num_entities() {
        return Err(Error::InvalidInput(format!("triple {triple:?} does not lie within one graph")));
    }
    Ok(side)
}

/// Lazily extended nearest-neighbor list for one entity.
struct Ranked {
    order: Vec<usize>,
    complete: bool,
}

/// Teacher negatives: `k1` corruptions per triple (fewer if the graph runs
/// out of candidates). Each copy corrupts the head or the tail with equal
/// probability. With embeddings, replacements walk the original entity's
/// nearest same-graph neighbors in order, skipping corruptions that are
/// true triples; without embeddings they are uniform over the graph.
pub fn sample_triple_negatives<T: Scalar>(
    emb: Option<&DenseMatrix<T>>,
    triples: &[Triple],
    index: &GlobalIndex,
    k1: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<Triple>>> {
    if k1 == 0 {
        return Err(Error::InvalidInput("k1 must be at least 1".into()));
    }
    for side in [Side::Kg1, Side::Kg2] {
        let size = index.range(side).len();
        if size < 2 && triples.iter().any(|t| index.locate(t.head).0 == side) {
            return Err(Error::InvalidInput(format!("{side:?} has {size} entities; corruption needs at least 2")));
        }
    }
    let sides: Vec<Side> = triples.iter().map(|t| side_of(index, t)).collect::<Result<_>>()?;
    if let Some(e) = emb {
        if e.rows() != index.num_entities() {
            return Err(Error::shape("sample_triple_negatives", e.shape(), (index.num_entities(), e.cols())));
        }
    }

    let truth: HashSet<Triple> = triples.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

    let Some(emb) = emb else {
        const ATTEMPTS: usize = 64;
        let mut out = Vec::with_capacity(triples.len());
        for (t, &side) in triples.iter().zip(&sides) {
            let range = index.range(side);
            let mut negs = Vec::with_capacity(k1);
            for _ in 0..k1 {
                let corrupt_head = rng.random_bool(0.5);
                for _ in 0..ATTEMPTS {
                    let e = rng.random_range(range.clone());
                    let original = if corrupt_head { t.head } else { t.tail };
                    if e == original {
                        continue;
                    }
                    let c = if corrupt_head { Triple::new(e, t.relation, t.tail) } else { Triple::new(t.head, t.relation, e) };
                    if !truth.contains(&c) {
                        negs.push(c);
                        break;
                    }
                }
            }
            out.push(negs);
        }
        return Ok(out);
    };

    // Seed every endpoint's neighbor list with a little headroom, in parallel.
    let mut endpoints: Vec<usize> = triples.iter().flat_map(|t| [t.head, t.tail]).collect();
    endpoints.sort_unstable();
    endpoints.dedup();
    let headroom = 2 * k1;
    let mut ranked: HashMap<usize, Ranked> = endpoints
        .par_iter()
        .map(|&e| {
            let range = index.range(index.locate(e).0);
            let available = range.len() - 1;
            let order = nearest(emb, emb.row(e), range, e, headroom);
            let complete = order.len() == available;
            (e, Ranked { order, complete })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let mut out = Vec::with_capacity(triples.len());
    for (t, &side) in triples.iter().zip(&sides) {
        let mut cursor = [0usize; 2];
        let mut exhausted = [false; 2];
        let mut negs = Vec::with_capacity(k1);
        for _ in 0..k1 {
            let first = usize::from(!rng.random_bool(0.5));
            let mut emitted = false;
            for s in [first, 1 - first] {
                if exhausted[s] {
                    continue;
                }
                let original = if s == 0 { t.head } else { t.tail };
                loop {
                    let list = ranked.get_mut(&original).expect("endpoint ranked");
                    if cursor[s] == list.order.len() {
                        if list.complete {
                            exhausted[s] = true;
                            break;
                        }
                        let want = 2 * list.order.len().max(1);
                        list.order = nearest(emb, emb.row(original), index.range(side), original, want);
                        list.complete = list.order.len() < want;
                        continue;
                    }
                    let e = list.order[cursor[s]];
                    cursor[s] += 1;
                    let c = if s == 0 { Triple::new(e, t.relation, t.tail) } else { Triple::new(t.head, t.relation, e) };
                    if !truth.contains(&c) {
                        negs.push(c);
                        emitted = true;
                        break;
                    }
                }
                if emitted {
                    break;
                }
            }
            if !emitted {
                break;
            }
        }
        out.push(negs);
    }
    Ok(out)
}

/// Student negatives for each training seed `(a, b)` (local ids): `(a, x)`
/// for the `k2` KG2 entities `x` nearest to `a`, then `(y, b)` for the `k2`
/// KG1 entities `y` nearest to `b`, never using the counterpart. Pairs are
/// returned in global ids.
pub fn mine_alignment_negatives<T: Scalar>(
    emb: &DenseMatrix<T>,
    seeds: &AlignmentSeeds,
    index: &GlobalIndex,
    k2: usize,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if k2 == 0 {
        return Err(Error::InvalidInput("k2 must be at least 1".into()));
    }
    if index.num_entities1 <= 1 || index.num_entities2 <= 1 {
        return Err(Error::InvalidInput(format!(
            "alignment mining needs at least 2 entities per graph, got {} and {}",
            index.num_entities1, index.num_entities2
        )));
    }
    if emb.rows() != index.num_entities() {
        return Err(Error::shape("mine_alignment_negatives", emb.shape(), (index.num_entities(), emb.cols())));
    }
    Ok(seeds
        .pairs()
        .par_iter()
        .map(|&pair| {
            let (a, b) = index.global_pair(pair);
            let mut negs: Vec<(usize, usize)> = nearest(emb, emb.row(a), index.range(Side::Kg2), b, k2)
                .into_iter()
                .map(|x| (a, x))
                .collect();
            negs.extend(
                nearest(emb, emb.row(b), index.range(Side::Kg1), a, k2)
                    .into_iter()
                    .map(|y| (y, b)),
            );
            negs
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::KnowledgeGraph;

    fn toy_index(n1: usize, n2: usize) -> GlobalIndex {
        GlobalIndex::new(&KnowledgeGraph::empty(n1, 1), &KnowledgeGraph::empty(n2, 1))
    }

    #[test]
    fn refresh_schedule() {
        assert!(refresh_due(0, 50));
        assert!(refresh_due(50, 50));
        assert!(!refresh_due(49, 50));
    }

    #[test]
    fn nearest_breaks_ties_by_id() {
        let emb = DenseMatrix::<f64>::from_rows(&[&[0.0], &[1.0], &[-1.0], &[1.0]]);
        assert_eq!(nearest(&emb, emb.row(0), 0..4, 0, 3), vec![1, 2, 3]);
        assert_eq!(nearest(&emb, emb.row(0), 0..4, 0, 1), vec![1]);
    }

    #[test]
    fn teacher_uses_nearest_head() {
        // KG1 has 3 entities; entity 2 is closest to entity 0.
        let index = toy_index(3, 2);
        let emb = DenseMatrix::<f64>::from_rows(&[&[0.0], &[5.0], &[0.5], &[9.0], &[9.0]]);
        let triples = [Triple::new(0, 0, 1)];
        let negs = sample_triple_negatives(Some(&emb), &triples, &index, 10, 0).unwrap();
        let head_corruptions: Vec<_> = negs[0].iter().filter(|n| n.tail == 1).collect();
        assert_eq!(head_corruptions.first().map(|n| n.head), Some(2));
        // head side offers {2, 1}, tail side offers {2, 0}: four in total
        assert_eq!(negs[0].len(), 4);
    }

    #[test]
    fn teacher_skips_true_triples() {
        let index = toy_index(3, 2);
        let emb = DenseMatrix::<f64>::from_rows(&[&[0.0], &[5.0], &[0.5], &[9.0], &[9.0]]);
        let triples = [Triple::new(0, 0, 1), Triple::new(2, 0, 1)];
        let negs = sample_triple_negatives(Some(&emb), &triples, &index, 10, 1).unwrap();
        for list in &negs {
            for n in list {
                assert!(!triples.contains(n));
            }
        }
    }

    #[test]
    fn uniform_fallback_is_deterministic() {
        let index = toy_index(6, 6);
        let triples = [Triple::new(0, 0, 1), Triple::new(7, 1, 8)];
        let a = sample_triple_negatives::<f64>(None, &triples, &index, 5, 9).unwrap();
        let b = sample_triple_negatives::<f64>(None, &triples, &index, 5, 9).unwrap();
        assert_eq!(a, b);
        assert!(a[1].iter().all(|t| (6..12).contains(&t.head) && (6..12).contains(&t.tail)));
    }

    #[test]
    fn alignment_mining_excludes_counterpart() {
        let index = toy_index(3, 3);
        let emb = DenseMatrix::<f64>::from_rows(&[&[0.0], &[1.0], &[2.0], &[0.0], &[0.1], &[3.0]]);
        let seeds = AlignmentSeeds::new(vec![(0, 0)]).unwrap();
        let negs = mine_alignment_negatives(&emb, &seeds, &index, 1).unwrap();
        assert_eq!(negs[0], vec![(0, 4), (1, 3)]);
    }

    #[test]
    fn tiny_graphs_rejected() {
        let index = toy_index(1, 3);
        let emb = DenseMatrix::<f64>::zeros(4, 1);
        let seeds = AlignmentSeeds::new(vec![(0, 0)]).unwrap();
        assert!(mine_alignment_negatives(&emb, &seeds, &index, 2).is_err());
    }
}
