use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

use super::{split_seeds, AlignmentSeeds, DatasetBundle, KnowledgeGraph, Triple};

/// Parameters of an alignable synthetic graph pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Entities per graph, including confusable twins.
    pub n_entities: usize,
    pub n_relations: usize,
    /// Triples of the base graph; twin triples come on top.
    pub n_triples: usize,
    /// Fraction of true pairs published as seeds.
    pub seed_fraction: f64,
    /// Fraction of published seeds used for training.
    pub train_fraction: f64,
    /// Fraction of KG2 triples removed (backbone and twin edges are kept).
    pub edge_dropout: f64,
    pub feature_noise: f64,
    pub feature_dim: usize,
    /// Number of twin entities. A twin copies every edge of an original
    /// entity with a different relation label and shares its base feature
    /// vector, so the pair is separable only through relation labels.
    pub confusable_pairs: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_entities: 200,
            n_relations: 10,
            n_triples: 600,
            seed_fraction: 1.0,
            train_fraction: 0.3,
            edge_dropout: 0.0,
            feature_noise: 0.05,
            feature_dim: 300,
            confusable_pairs: 0,
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let base = self.n_entities.saturating_sub(self.confusable_pairs);
        if self.n_entities < 2 {
            return bad(format!("need at least 2 entities, got {}", self.n_entities));
        }
        if self.n_relations == 0 {
            return bad("need at least one relation".into());
        }
        if base < 2 || base < self.confusable_pairs {
            return bad(format!(
                "{} confusable twins need at least as many base entities ({base} available)",
                self.confusable_pairs
            ));
        }
        if self.confusable_pairs > 0 && self.n_relations < 2 {
            return bad("confusable twins need at least 2 relations".into());
        }
        if self.n_triples + 1 < base {
            return bad(format!("{} triples cannot connect {base} entities", self.n_triples));
        }
        let capacity = base * (base - 1) * self.n_relations;
        if self.n_triples * 2 > capacity {
            return bad(format!("{} triples exceed half of the {capacity} possible", self.n_triples));
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction <= 1.0) {
            return bad(format!("seed fraction {} not in (0, 1]", self.seed_fraction));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction {} not in (0, 1)", self.train_fraction));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return bad(format!("edge dropout {} not in [0, 1)", self.edge_dropout));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!("feature noise {} must be finite and non-negative", self.feature_noise));
        }
        if self.feature_dim == 0 {
            return bad("feature dimension must be at least 1".into());
        }
        Ok(())
    }
}

/// A generated bundle plus the ground truth behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub bundle: DatasetBundle,
    /// KG1 id `i` is KG2 id `permutation[i]`.
    pub permutation: Vec<usize>,
    /// `(original, twin)` KG1 ids.
    pub confusable: Vec<(usize, usize)>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<DatasetBundle> {
    generate_synthetic_detailed(cfg).map(|d| d.bundle)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn generate_synthetic_detailed(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n = cfg.n_entities;
    let base = n - cfg.confusable_pairs;
    let r_count = cfg.n_relations;

    let mut triples: Vec<Triple> = Vec::with_capacity(cfg.n_triples);
    let mut seen: HashSet<Triple> = HashSet::new();
    let mut protected = 0usize;

    // Random spanning tree over the base entities.
    let mut order: Vec<usize> = (0..base).collect();
    order.shuffle(&mut rng);
    for i in 1..base {
        let child = order[i];
        let parent = order[rng.random_range(0..i)];
        let relation = rng.random_range(0..r_count);
        let t = if rng.random_bool(0.5) {
            Triple::new(parent, relation, child)
        } else {
            Triple::new(child, relation, parent)
        };
        seen.insert(t);
        triples.push(t);
        protected += 1;
    }
    while triples.len() < cfg.n_triples {
        let head = rng.random_range(0..base);
        let tail = rng.random_range(0..base);
        if head == tail {
            continue;
        }
        let t = Triple::new(head, rng.random_range(0..r_count), tail);
        if seen.insert(t) {
            triples.push(t);
        }
    }
    let droppable_end = triples.len();

    // Originals are pairwise non-adjacent, so no twin lands in another
    // original's neighborhood and each twin sees exactly its original's
    // neighbors.
    let mut candidates: Vec<usize> = (0..base).collect();
    candidates.shuffle(&mut rng);
    let mut blocked = vec![false; base];
    let mut originals = Vec::with_capacity(cfg.confusable_pairs);
    for c in candidates {
        if originals.len() == cfg.confusable_pairs {
            break;
        }
        if blocked[c] {
            continue;
        }
        originals.push(c);
        for t in &triples {
            if t.head == c {
                blocked[t.tail] = true;
            } else if t.tail == c {
                blocked[t.head] = true;
            }
        }
    }
    if originals.len() < cfg.confusable_pairs {
        return Err(Error::InvalidInput(format!(
            "only {} pairwise non-adjacent entities available for {} twins",
            originals.len(),
            cfg.confusable_pairs
        )));
    }
    let mut confusable = Vec::with_capacity(originals.len());
    for (k, &orig) in originals.iter().enumerate() {
        let twin = base + k;
        confusable.push((orig, twin));
        let touching: Vec<Triple> = triples[..droppable_end]
            .iter()
            .filter(|t| t.head == orig || t.tail == orig)
            .copied()
            .collect();
        for t in &touching {
            // Avoid every label the original uses toward this neighbor, so
            // the two are told apart on each shared edge.
            let other = if t.head == orig { (true, t.tail) } else { (false, t.head) };
            let used: HashSet<usize> = touching
                .iter()
                .filter(|u| if u.head == orig { (true, u.tail) == other } else { (false, u.head) == other })
                .map(|u| u.relation)
                .collect();
            let free: Vec<usize> = (0..r_count).filter(|r| !used.contains(r)).collect();
            let relation = if free.is_empty() {
                (t.relation + 1 + rng.random_range(0..r_count - 1)) % r_count
            } else {
                free[rng.random_range(0..free.len())]
            };
            let swap = |e: usize| if e == orig { twin } else { e };
            let copy = Triple::new(swap(t.head), relation, swap(t.tail));
            if seen.insert(copy) {
                triples.push(copy);
            }
        }
    }

    let mut base_features = vec![0.0f64; n * cfg.feature_dim];
    for v in base_features[..base * cfg.feature_dim].iter_mut() {
        *v = gaussian(&mut rng);
    }
    for &(orig, twin) in &confusable {
        let d = cfg.feature_dim;
        base_features.copy_within(orig * d..(orig + 1) * d, twin * d);
    }

    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut rng);

    let mut kg2_triples: Vec<Triple> = triples
        .iter()
        .map(|t| Triple::new(permutation[t.head], t.relation, permutation[t.tail]))
        .collect();
    let n_drop = (cfg.edge_dropout * triples.len() as f64).floor() as usize;
    let droppable = droppable_end - protected;
    let n_drop = n_drop.min(droppable);
    let dropped: HashSet<usize> = index::sample(&mut rng, droppable, n_drop)
        .into_iter()
        .map(|i| protected + i)
        .collect();
    kg2_triples = kg2_triples
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, t)| t)
        .collect();
    triples.sort_unstable();
    kg2_triples.sort_unstable();

    let d = cfg.feature_dim;
    let mut features = DenseMatrix::<f64>::zeros(2 * n, d);
    for i in 0..n {
        for c in 0..d {
            let v = base_features[i * d + c] + cfg.feature_noise * gaussian(&mut rng);
            features.set(i, c, v as f32 as f64);
        }
    }
    for i in 0..n {
        for c in 0..d {
            let v = base_features[i * d + c] + cfg.feature_noise * gaussian(&mut rng);
            features.set(n + permutation[i], c, v as f32 as f64);
        }
    }

    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, permutation[i])).collect();
    pairs.shuffle(&mut rng);
    let published = ((n as f64) * cfg.seed_fraction + 1e-9).floor().max(1.0) as usize;
    pairs.truncate(published);
    let split_rng = rng.next_u64();
    let (train_seeds, test_seeds) = split_seeds(&AlignmentSeeds::new(pairs)?, cfg.train_fraction, split_rng)?;

    let bundle = DatasetBundle {
        kg1: KnowledgeGraph::new(n, r_count, triples)?,
        kg2: KnowledgeGraph::new(n, r_count, kg2_triples)?,
        train_seeds,
        test_seeds,
        features: Some(features),
    };
    bundle.validate()?;
    Ok(SyntheticDataset {
        bundle,
        permutation,
        confusable,
    })
}
