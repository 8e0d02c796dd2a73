//! Alignment ranking and Hits@k / MRR.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kgdata::{AlignmentSeeds, GlobalIndex, Side};
use crate::numkit::{DenseMatrix, Scalar};
use crate::sampling::distance;

pub const DEFAULT_KS: &[usize] = &[1, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Kg1ToKg2,
    Kg2ToKg1,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Kg1ToKg2 => "kg1->kg2",
            Direction::Kg2ToKg1 => "kg2->kg1",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kg1->kg2" | "forward" | "12" => Ok(Direction::Kg1ToKg2),
            "kg2->kg1" | "backward" | "21" => Ok(Direction::Kg2ToKg1),
            _ => Err(Error::Config(format!("unknown direction `{s}`"))),
        }
    }
}

/// Which entities compete with the true counterpart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CandidatePool {
    /// Counterparts of the evaluated pairs only.
    #[default]
    TestSet,
    /// Every entity of the counterpart graph.
    AllEntities,
}

/// 1-based rank of each pair's true counterpart under ascending L2 distance,
/// ties going to the lower entity id.
pub fn rank_alignments<T: Scalar>(
    emb: &DenseMatrix<T>,
    seeds: &AlignmentSeeds,
    index: &GlobalIndex,
    direction: Direction,
    pool: CandidatePool,
) -> Result<Vec<usize>> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("cannot rank an empty test set".into()));
    }
    if emb.rows() != index.num_entities() {
        return Err(Error::shape("rank_alignments", emb.shape(), (index.num_entities(), emb.cols())));
    }
    let oriented: Vec<(usize, usize)> = seeds
        .pairs()
        .iter()
        .map(|&p| {
            let (a, b) = index.global_pair(p);
            match direction {
                Direction::Kg1ToKg2 => (a, b),
                Direction::Kg2ToKg1 => (b, a),
            }
        })
        .collect();
    let candidates: Vec<usize> = match pool {
        CandidatePool::TestSet => oriented.iter().map(|&(_, t)| t).collect(),
        CandidatePool::AllEntities => {
            let side = match direction {
                Direction::Kg1ToKg2 => Side::Kg2,
                Direction::Kg2ToKg1 => Side::Kg1,
            };
            index.range(side).collect()
        }
    };
    Ok(oriented
        .par_iter()
        .map(|&(query, target)| {
            let q = emb.row(query);
            let d_true = distance(q, emb.row(target));
            1 + candidates
                .iter()
                .filter(|&&c| c != target)
                .filter(|&&c| {
                    let d = distance(q, emb.row(c));
                    d < d_true || (d == d_true && c < target)
                })
                .count()
        })
        .collect())
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::InvalidInput("rank list is empty".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidInput("ranks are 1-based".into()));
    }
    Ok(())
}

pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingMetrics {
    pub direction: Direction,
    pub hits: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub num_queries: usize,
}

impl RankingMetrics {
    pub fn from_ranks(ranks: &[usize], ks: &[usize], direction: Direction) -> Result<Self> {
        let hits = ks.iter().map(|&k| Ok((k, hits_at_k(ranks, k)?))).collect::<Result<_>>()?;
        Ok(RankingMetrics {
            direction,
            hits,
            mrr: mrr(ranks)?,
            num_queries: ranks.len(),
        })
    }

    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.get(&k).copied()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["direction".to_string()];
        cols.extend(self.hits.keys().map(|k| format!("hits@{k}")));
        cols.extend(["mrr".to_string(), "n".to_string()]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.direction.to_string()];
        cols.extend(self.hits.values().map(|v| v.to_string()));
        cols.extend([self.mrr.to_string(), self.num_queries.to_string()]);
        cols.join(",")
    }
}

impl Serialize for RankingMetrics {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.hits.len() + 3))?;
        map.serialize_entry("direction", self.direction.as_str())?;
        for (k, v) in &self.hits {
            map.serialize_entry(&format!("hits@{k}"), v)?;
        }
        map.serialize_entry("mrr", &self.mrr)?;
        map.serialize_entry("n", &self.num_queries)?;
        map.end()
    }
}

pub fn evaluate<T: Scalar>(
    emb: &DenseMatrix<T>,
    seeds: &AlignmentSeeds,
    index: &GlobalIndex,
    direction: Direction,
    pool: CandidatePool,
    ks: &[usize],
) -> Result<RankingMetrics> {
    let ranks = rank_alignments(emb, seeds, index, direction, pool)?;
    RankingMetrics::from_ranks(&ranks, ks, direction)
}
