//! Knowledge graphs, seed alignments, dataset directories and the joint
//! normalized adjacency fed to the encoder.
//!
//! A dataset directory holds:
//!
//! | file | content |
//! | ---- | ------- |
//! | `triples_1`, `triples_2` | `head<TAB>relation<TAB>tail`, local integer ids |
//! | `ref_ent_ids` | `kg1_id<TAB>kg2_id`, every published seed pair |
//! | `sup_ent_ids` | optional; the training subset of `ref_ent_ids` |
//! | `ent_ids_1`, `ent_ids_2` | optional `id<TAB>name` |
//! | `features.f32` | optional tensor file with one `features` tensor |
//!
//! Without `sup_ent_ids`, seeds are split at load time with [`split_seeds`].

mod synthetic;

pub use synthetic::{generate_synthetic, generate_synthetic_detailed, SyntheticConfig, SyntheticDataset};

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Tensor, TensorFile};
use crate::error::{Error, Result};
use crate::numkit::{DenseMatrix, Scalar, SparseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple { head, relation, tail }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    pub num_entities: usize,
    pub num_relations: usize,
    pub triples: Vec<Triple>,
    pub entity_names: Option<Vec<String>>,
}

impl KnowledgeGraph {
    /// Validates id ranges and drops exact duplicate triples, keeping the
    /// first occurrence.
    pub fn new(num_entities: usize, num_relations: usize, triples: Vec<Triple>) -> Result<Self> {
        for t in &triples {
            if t.head >= num_entities || t.tail >= num_entities || t.relation >= num_relations {
                return Err(Error::InvalidInput(format!(
                    "triple {t:?} outside {num_entities} entities / {num_relations} relations"
                )));
            }
        }
        Ok(KnowledgeGraph {
            num_entities,
            num_relations,
            triples: dedup_preserving_order(triples),
            entity_names: None,
        })
    }

    pub fn empty(num_entities: usize, num_relations: usize) -> Self {
        KnowledgeGraph {
            num_entities,
            num_relations,
            triples: Vec::new(),
            entity_names: None,
        }
    }

    /// Sorted degree of every entity in the undirected, label-free view.
    pub fn degree_multiset(&self) -> Vec<usize> {
        let mut neighbors = vec![BTreeSet::new(); self.num_entities];
        for t in &self.triples {
            if t.head != t.tail {
                neighbors[t.head].insert(t.tail);
                neighbors[t.tail].insert(t.head);
            }
        }
        let mut degrees: Vec<usize> = neighbors.iter().map(BTreeSet::len).collect();
        degrees.sort_unstable();
        degrees
    }
}

fn dedup_preserving_order<T: Copy + Eq + std::hash::Hash>(items: Vec<T>) -> Vec<T> {
    let mut seen = HashSet::with_capacity(items.len());
    items.into_iter().filter(|x| seen.insert(*x)).collect()
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Yields `(1-based line number, tab-separated fields)` for every line that
/// is neither blank nor a `#` comment.
fn data_lines<'a, R: BufRead + 'a>(reader: R, path: &'a Path) -> impl Iterator<Item = Result<(usize, Vec<String>)>> + 'a {
    reader.lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(parse_error(path, i + 1, e.to_string()))),
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            return None;
        }
        Some(Ok((i + 1, line.split('\t').map(str::to_owned).collect())))
    })
}

fn parse_id(field: &str, path: &Path, line: usize, what: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_error(path, line, format!("{what} {field:?} is not a non-negative integer")))
}

fn read_raw_triples<R: BufRead>(reader: R, path: &Path) -> Result<Vec<(usize, Triple)>> {
    let mut out = Vec::new();
    for item in data_lines(reader, path) {
        let (line, fields) = item?;
        if fields.len() != 3 {
            return Err(parse_error(path, line, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let head = parse_id(&fields[0], path, line, "head")?;
        let relation = parse_id(&fields[1], path, line, "relation")?;
        let tail = parse_id(&fields[2], path, line, "tail")?;
        out.push((line, Triple { head, relation, tail }));
    }
    Ok(out)
}

/// Reads `head<TAB>relation<TAB>tail` lines from `reader`. `path` is only
/// used in error messages.
pub fn read_triples<R: BufRead>(
    reader: R,
    path: &Path,
    num_entities: usize,
    num_relations: usize,
) -> Result<KnowledgeGraph> {
    let raw = read_raw_triples(reader, path)?;
    let mut triples = Vec::with_capacity(raw.len());
    for (line, t) in raw {
        if t.head >= num_entities || t.tail >= num_entities {
            return Err(parse_error(
                path,
                line,
                format!("entity id out of range (declared {num_entities} entities)"),
            ));
        }
        if t.relation >= num_relations {
            return Err(parse_error(
                path,
                line,
                format!("relation id {} out of range (declared {num_relations})", t.relation),
            ));
        }
        triples.push(t);
    }
    KnowledgeGraph::new(num_entities, num_relations, triples)
}

pub fn parse_triples(path: &Path, num_entities: usize, num_relations: usize) -> Result<KnowledgeGraph> {
    let file = fs::File::open(path)?;
    read_triples(BufReader::new(file), path, num_entities, num_relations)
}

pub fn write_triples<W: Write>(kg: &KnowledgeGraph, mut out: W) -> Result<()> {
    for t in &kg.triples {
        writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
    }
    Ok(())
}

/// Ordered seed pairs `(kg1 entity, kg2 entity)`. No entity occurs in two
/// pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentSeeds {
    pairs: Vec<(usize, usize)>,
}

impl AlignmentSeeds {
    /// Drops exact duplicate pairs; an entity shared by two distinct pairs is
    /// an integrity error.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let pairs = dedup_preserving_order(pairs);
        let mut left = HashSet::new();
        let mut right = HashSet::new();
        for &(a, b) in &pairs {
            if !left.insert(a) {
                return Err(Error::Integrity(format!("KG1 entity {a} appears in more than one seed pair")));
            }
            if !right.insert(b) {
                return Err(Error::Integrity(format!("KG2 entity {b} appears in more than one seed pair")));
            }
        }
        Ok(AlignmentSeeds { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn read_alignments<R: BufRead>(reader: R, path: &Path) -> Result<AlignmentSeeds> {
    let mut pairs = Vec::new();
    for item in data_lines(reader, path) {
        let (line, fields) = item?;
        if fields.len() != 2 {
            return Err(parse_error(path, line, format!("expected 2 tab-separated fields, got {}", fields.len())));
        }
        let a = parse_id(&fields[0], path, line, "KG1 id")?;
        let b = parse_id(&fields[1], path, line, "KG2 id")?;
        pairs.push((a, b));
    }
    AlignmentSeeds::new(pairs)
}

pub fn parse_alignments(path: &Path) -> Result<AlignmentSeeds> {
    let file = fs::File::open(path)?;
    read_alignments(BufReader::new(file), path)
}

pub fn write_alignments<W: Write>(seeds: &AlignmentSeeds, mut out: W) -> Result<()> {
    for (a, b) in seeds.pairs() {
        writeln!(out, "{a}\t{b}")?;
    }
    Ok(())
}

/// Shuffles deterministically and puts the first `⌊n·train_fraction⌋` pairs
/// in the training set.
pub fn split_seeds(seeds: &AlignmentSeeds, train_fraction: f64, rng_seed: u64) -> Result<(AlignmentSeeds, AlignmentSeeds)> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty seed list".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut pairs = seeds.pairs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    pairs.shuffle(&mut rng);
    // The epsilon keeps products like 0.3 * 10 = 3.0000000000000004 and
    // 0.29 * 100 = 28.999999999999996 on the intended side of the floor.
    let n_train = ((pairs.len() as f64) * train_fraction + 1e-9).floor() as usize;
    let test = pairs.split_off(n_train);
    Ok((AlignmentSeeds { pairs }, AlignmentSeeds { pairs: test }))
}

/// Maps both graphs' local ids onto one joint index: KG1 entity `i` is row
/// `i`, KG2 entity `j` is row `|E1| + j`. Relations are offset the same way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalIndex {
    pub num_entities1: usize,
    pub num_entities2: usize,
    pub num_relations1: usize,
    pub num_relations2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Kg1,
    Kg2,
}

impl GlobalIndex {
    pub fn new(kg1: &KnowledgeGraph, kg2: &KnowledgeGraph) -> Self {
        GlobalIndex {
            num_entities1: kg1.num_entities,
            num_entities2: kg2.num_entities,
            num_relations1: kg1.num_relations,
            num_relations2: kg2.num_relations,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities1 + self.num_entities2
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations1 + self.num_relations2
    }

    pub fn kg1(&self, local: usize) -> usize {
        local
    }

    pub fn kg2(&self, local: usize) -> usize {
        self.num_entities1 + local
    }

    pub fn entity(&self, side: Side, local: usize) -> usize {
        match side {
            Side::Kg1 => self.kg1(local),
            Side::Kg2 => self.kg2(local),
        }
    }

    pub fn relation(&self, side: Side, local: usize) -> usize {
        match side {
            Side::Kg1 => local,
            Side::Kg2 => self.num_relations1 + local,
        }
    }

    /// Which graph a global entity row belongs to, and its local id.
    pub fn locate(&self, global: usize) -> (Side, usize) {
        if global < self.num_entities1 {
            (Side::Kg1, global)
        } else {
            (Side::Kg2, global - self.num_entities1)
        }
    }

    /// Global row range of one graph's entities.
    pub fn range(&self, side: Side) -> std::ops::Range<usize> {
        match side {
            Side::Kg1 => 0..self.num_entities1,
            Side::Kg2 => self.num_entities1..self.num_entities(),
        }
    }

    pub fn global_pair(&self, pair: (usize, usize)) -> (usize, usize) {
        (self.kg1(pair.0), self.kg2(pair.1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub kg1: KnowledgeGraph,
    pub kg2: KnowledgeGraph,
    pub train_seeds: AlignmentSeeds,
    pub test_seeds: AlignmentSeeds,
    /// `(|E1| + |E2|) × d`, KG1 rows first.
    pub features: Option<DenseMatrix<f64>>,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        for seeds in [&self.train_seeds, &self.test_seeds] {
            for &(a, b) in seeds.pairs() {
                if a >= self.kg1.num_entities || b >= self.kg2.num_entities {
                    return Err(Error::InvalidInput(format!("seed pair ({a}, {b}) outside the graphs")));
                }
            }
        }
        let mut all = self.train_seeds.pairs().to_vec();
        all.extend_from_slice(self.test_seeds.pairs());
        AlignmentSeeds::new(all.clone())?;
        let distinct: HashSet<_> = all.iter().collect();
        if distinct.len() != all.len() {
            return Err(Error::Integrity("train and test seeds overlap".into()));
        }
        if let Some(f) = &self.features {
            let n = self.kg1.num_entities + self.kg2.num_entities;
            if f.rows() != n {
                return Err(Error::InvalidInput(format!("feature matrix has {} rows, graphs have {n} entities", f.rows())));
            }
        }
        Ok(())
    }

    pub fn index(&self) -> GlobalIndex {
        GlobalIndex::new(&self.kg1, &self.kg2)
    }

    /// `T1 ∪ T2` in global entity and relation ids.
    pub fn global_triples(&self) -> Vec<Triple> {
        let index = self.index();
        let map = |side: Side, t: &Triple| Triple {
            head: index.entity(side, t.head),
            relation: index.relation(side, t.relation),
            tail: index.entity(side, t.tail),
        };
        self.kg1
            .triples
            .iter()
            .map(|t| map(Side::Kg1, t))
            .chain(self.kg2.triples.iter().map(|t| map(Side::Kg2, t)))
            .collect()
    }

    /// All seed pairs, training first.
    pub fn all_seeds(&self) -> AlignmentSeeds {
        let mut pairs = self.train_seeds.pairs().to_vec();
        pairs.extend_from_slice(self.test_seeds.pairs());
        AlignmentSeeds { pairs }
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` over the block-diagonal union of both graphs.
/// Edges are undirected and unlabeled; repeated edges and self-loop triples
/// collapse into the single unit self-connection.
pub fn build_joint_adjacency<T: Scalar>(kg1: &KnowledgeGraph, kg2: &KnowledgeGraph) -> SparseMatrix<T> {
    let n1 = kg1.num_entities;
    let n = n1 + kg2.num_entities;
    let mut edges: BTreeSet<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for (offset, kg) in [(0, kg1), (n1, kg2)] {
        for t in &kg.triples {
            let (h, tl) = (offset + t.head, offset + t.tail);
            edges.insert((h, tl));
            edges.insert((tl, h));
        }
    }
    let mut degree = vec![0usize; n];
    for &(r, _) in &edges {
        degree[r] += 1;
    }
    // One rounding per entry: 1/sqrt(d_r·d_c) is exact for equal degrees.
    let entries = edges
        .into_iter()
        .map(|(r, c)| (r, c, T::of(1.0 / ((degree[r] * degree[c]) as f64).sqrt())))
        .collect();
    SparseMatrix::from_triplets(n, n, entries).expect("edges are unique and in range")
}

/// How to split `ref_ent_ids` when a directory has no `sup_ent_ids`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.3,
            rng_seed: 0,
        }
    }
}

pub const DATASET_FILES: &[&str] = &[
    "triples_1",
    "triples_2",
    "ref_ent_ids",
    "sup_ent_ids",
    "ent_ids_1",
    "ent_ids_2",
    "features.f32",
];

fn read_names(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for item in data_lines(reader, path) {
        let (line, fields) = item?;
        if fields.len() < 2 {
            return Err(parse_error(path, line, "expected id<TAB>name"));
        }
        let id = parse_id(&fields[0], path, line, "entity id")?;
        out.push((id, fields[1..].join("\t")));
    }
    Ok(out)
}

fn load_graph(dir: &Path, k: usize, seed_ids: impl Iterator<Item = usize>) -> Result<KnowledgeGraph> {
    let triples_path = dir.join(format!("triples_{k}"));
    let raw = read_raw_triples(BufReader::new(fs::File::open(&triples_path)?), &triples_path)?;
    let names_path = dir.join(format!("ent_ids_{k}"));
    let names = if names_path.exists() { Some(read_names(&names_path)?) } else { None };

    let max_seen = raw
        .iter()
        .flat_map(|(_, t)| [t.head, t.tail])
        .chain(seed_ids)
        .max();
    let num_entities = match &names {
        Some(names) => {
            let n = names.iter().map(|(id, _)| id + 1).max().unwrap_or(0);
            if let Some(m) = max_seen.filter(|&m| m >= n) {
                return Err(Error::InvalidInput(format!(
                    "entity id {m} used in graph {k} but {} declares only {n} entities",
                    names_path.display()
                )));
            }
            n
        }
        None => max_seen.map_or(0, |m| m + 1),
    };
    let num_relations = raw.iter().map(|(_, t)| t.relation + 1).max().unwrap_or(0);
    let mut kg = KnowledgeGraph::new(num_entities, num_relations, raw.into_iter().map(|(_, t)| t).collect())?;
    if let Some(names) = names {
        let mut table = vec![String::new(); num_entities];
        for (id, name) in names {
            table[id] = name;
        }
        kg.entity_names = Some(table);
    }
    Ok(kg)
}

/// Loads a dataset directory. Entity counts come from `ent_ids_k` when
/// present, otherwise from the largest id seen.
pub fn load_dataset(dir: &Path, split: SplitSpec) -> Result<DatasetBundle> {
    let reference = parse_alignments(&dir.join("ref_ent_ids"))?;
    let kg1 = load_graph(dir, 1, reference.pairs().iter().map(|p| p.0))?;
    let kg2 = load_graph(dir, 2, reference.pairs().iter().map(|p| p.1))?;

    let sup_path = dir.join("sup_ent_ids");
    let (train_seeds, test_seeds) = if sup_path.exists() {
        let train = parse_alignments(&sup_path)?;
        let in_train: HashSet<_> = train.pairs().iter().copied().collect();
        let test = reference.pairs().iter().copied().filter(|p| !in_train.contains(p)).collect();
        (train, AlignmentSeeds::new(test)?)
    } else {
        split_seeds(&reference, split.train_fraction, split.rng_seed)?
    };

    let features_path = dir.join("features.f32");
    let features = if features_path.exists() {
        let file = TensorFile::load(&features_path)?;
        let t = file
            .get("features")
            .ok_or_else(|| Error::InvalidInput(format!("{} has no `features` tensor", features_path.display())))?;
        Some(t.to_matrix::<f64>())
    } else {
        None
    };

    let bundle = DatasetBundle {
        kg1,
        kg2,
        train_seeds,
        test_seeds,
        features,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` in the directory layout above. Names default to
/// `kg{k}_e{id}` and features are stored at 32-bit precision.
pub fn write_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut create = |name: &str| -> Result<std::io::BufWriter<fs::File>> {
        let p = dir.join(name);
        written.push(p.clone());
        Ok(std::io::BufWriter::new(fs::File::create(p)?))
    };

    for (k, kg) in [(1, &bundle.kg1), (2, &bundle.kg2)] {
        let mut w = create(&format!("triples_{k}"))?;
        write_triples(kg, &mut w)?;
        w.flush()?;
        let mut w = create(&format!("ent_ids_{k}"))?;
        for id in 0..kg.num_entities {
            match &kg.entity_names {
                Some(names) => writeln!(w, "{id}\t{}", names[id])?,
                None => writeln!(w, "{id}\tkg{k}_e{id}")?,
            }
        }
        w.flush()?;
    }
    let mut w = create("ref_ent_ids")?;
    write_alignments(&bundle.all_seeds(), &mut w)?;
    w.flush()?;
    let mut w = create("sup_ent_ids")?;
    write_alignments(&bundle.train_seeds, &mut w)?;
    w.flush()?;

    if let Some(f) = &bundle.features {
        let path = dir.join("features.f32");
        TensorFile {
            tensors: vec![Tensor::from_matrix("features", &f.cast::<f32>())],
            meta: serde_json::json!({"kind": "features"}),
        }
        .save(&path)?;
        written.push(path);
    }
    Ok(written)
}
