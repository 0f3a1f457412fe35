use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FilterMode, IdTriple};
use crate::kgdata::{Dataset, Triple};

pub const HITS_AT: [u32; 3] = [1, 3, 10];

pub trait Scorer: Sync {
    fn entity_count(&self) -> usize;
    fn score(&self, h: usize, r: usize, t: usize) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Head,
    Tail,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Head => "head",
            Direction::Tail => "tail",
        })
    }
}

/// `(h, r, ?)` for [`Direction::Tail`], `(?, r, t)` for [`Direction::Head`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Query {
    pub triple: IdTriple,
    pub direction: Direction,
}

impl Query {
    pub fn target(&self) -> usize {
        match self.direction {
            Direction::Head => self.triple.h as usize,
            Direction::Tail => self.triple.t as usize,
        }
    }

    /// The triple obtained by placing `e` in the queried slot.
    pub fn with_candidate(&self, e: usize) -> IdTriple {
        match self.direction {
            Direction::Head => IdTriple { h: e as u32, ..self.triple },
            Direction::Tail => IdTriple { t: e as u32, ..self.triple },
        }
    }
}

/// Known-true triples indexed for filtered ranking.
#[derive(Clone, Debug, Default)]
pub struct KnownTriples {
    tails: HashMap<(u32, u32), HashSet<u32>>,
    heads: HashMap<(u32, u32), HashSet<u32>>,
}

impl KnownTriples {
    pub fn new<'a>(triples: impl IntoIterator<Item = &'a IdTriple>) -> Self {
        let mut k = Self::default();
        for t in triples {
            k.tails.entry((t.h, t.r)).or_default().insert(t.t);
            k.heads.entry((t.r, t.t)).or_default().insert(t.h);
        }
        k
    }

    /// Train, valid and test triples of `dataset`.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let all: Vec<Triple> = dataset.all_triples().cloned().collect();
        Self::new(&super::id_triples(dataset, &all))
    }

    pub fn contains(&self, t: &IdTriple) -> bool {
        self.tails.get(&(t.h, t.r)).is_some_and(|s| s.contains(&t.t))
    }

    fn excluded(&self, q: &Query) -> Option<&HashSet<u32>> {
        match q.direction {
            Direction::Tail => self.tails.get(&(q.triple.h, q.triple.r)),
            Direction::Head => self.heads.get(&(q.triple.r, q.triple.t)),
        }
    }
}

/// `1 + #greater + floor(#ties / 2)` over candidates other than `target` not excluded.
pub fn rank_from_scores(scores: &[f64], target: usize, excluded: impl Fn(usize) -> bool) -> u64 {
    let s = scores[target];
    let (mut greater, mut ties) = (0u64, 0u64);
    for (e, &v) in scores.iter().enumerate() {
        if e == target || excluded(e) {
            continue;
        }
        if v > s {
            greater += 1;
        } else if v == s {
            ties += 1;
        }
    }
    1 + greater + ties / 2
}

pub fn candidate_scores(scorer: &dyn Scorer, q: &Query) -> Vec<f64> {
    (0..scorer.entity_count())
        .map(|e| {
            let t = q.with_candidate(e);
            scorer.score(t.h as usize, t.r as usize, t.t as usize)
        })
        .collect()
}

pub fn rank_query(scorer: &dyn Scorer, q: &Query, filter: FilterMode, known: &KnownTriples) -> u64 {
    let scores = candidate_scores(scorer, q);
    let excluded = match filter {
        FilterMode::Raw => None,
        FilterMode::Filtered => known.excluded(q),
    };
    rank_from_scores(&scores, q.target(), |e| excluded.is_some_and(|s| s.contains(&(e as u32))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits: BTreeMap<u32, f64>,
    pub query_count: usize,
}

/// `None` for an empty rank list.
pub fn metrics_from_ranks(ranks: &[u64]) -> Option<Metrics> {
    if ranks.is_empty() {
        return None;
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let hits = HITS_AT.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= u64::from(k)).count() as f64 / n)).collect();
    Some(Metrics { mrr, hits, query_count: ranks.len() })
}

/// Everything needed to rerun an evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub modality: String,
    pub variant: Option<String>,
    pub filter: FilterMode,
    pub seed: u64,
    pub d: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits: BTreeMap<u32, f64>,
    pub query_count: usize,
    pub per_direction: BTreeMap<Direction, Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<Fingerprint>,
}

impl MetricsReport {
    pub fn overall(&self) -> Metrics {
        Metrics { mrr: self.mrr, hits: self.hits.clone(), query_count: self.query_count }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryRank {
    pub triple: IdTriple,
    pub direction: Direction,
    pub rank: u64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no test triples to evaluate")]
    EmptyTest,
    #[error("entity subset is empty")]
    EmptySubset,
    #[error("no test triple touches the entity subset")]
    NoMatchingTriples,
    #[error("rank lists differ at query {0}")]
    MismatchedQueries(usize),
}

/// Head then tail rank for every test triple, in test order.
pub fn rank_all(scorer: &dyn Scorer, test: &[IdTriple], filter: FilterMode, known: &KnownTriples) -> Vec<QueryRank> {
    test.par_iter()
        .flat_map_iter(|&triple| {
            [Direction::Head, Direction::Tail].map(|direction| {
                let q = Query { triple, direction };
                QueryRank { triple, direction, rank: rank_query(scorer, &q, filter, known) }
            })
        })
        .collect()
}

pub fn report_from_ranks(ranks: &[QueryRank], fingerprint: Option<Fingerprint>) -> Result<MetricsReport, EvalError> {
    let all: Vec<u64> = ranks.iter().map(|q| q.rank).collect();
    let overall = metrics_from_ranks(&all).ok_or(EvalError::EmptyTest)?;
    let per_direction = [Direction::Head, Direction::Tail]
        .into_iter()
        .filter_map(|d| {
            let rs: Vec<u64> = ranks.iter().filter(|q| q.direction == d).map(|q| q.rank).collect();
            metrics_from_ranks(&rs).map(|m| (d, m))
        })
        .collect();
    Ok(MetricsReport {
        mrr: overall.mrr,
        hits: overall.hits,
        query_count: overall.query_count,
        per_direction,
        fingerprint,
    })
}

pub fn evaluate(
    scorer: &dyn Scorer,
    test: &[IdTriple],
    filter: FilterMode,
    known: &KnownTriples,
    fingerprint: Option<Fingerprint>,
) -> Result<(MetricsReport, Vec<QueryRank>), EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let ranks = rank_all(scorer, test, filter, known);
    Ok((report_from_ranks(&ranks, fingerprint)?, ranks))
}

/// One `ranks.jsonl` row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRow {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub direction: Direction,
    pub rank: u64,
}

pub fn rank_rows(dataset: &Dataset, ranks: &[QueryRank]) -> Vec<RankRow> {
    ranks
        .iter()
        .map(|q| RankRow {
            head: dataset.entities[q.triple.h as usize].id.clone(),
            relation: dataset.relations[q.triple.r as usize].clone(),
            tail: dataset.entities[q.triple.t as usize].id.clone(),
            direction: q.direction,
            rank: q.rank,
        })
        .collect()
}

/// Scores given directly as a table, indexed `[h][r][t]`.
#[derive(Clone, Debug)]
pub struct ScoreTable {
    pub entities: usize,
    pub relations: usize,
    pub scores: Vec<f64>,
}

impl Scorer for ScoreTable {
    fn entity_count(&self) -> usize {
        self.entities
    }

    fn score(&self, h: usize, r: usize, t: usize) -> f64 {
        self.scores[(h * self.relations + r) * self.entities + t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strict_best_is_rank_one() {
        assert_eq!(rank_from_scores(&[0.9, 0.1, 0.5], 0, |_| false), 1);
    }

    #[test]
    fn all_tied() {
        assert_eq!(rank_from_scores(&[0.3; 5], 2, |_| false), 3);
    }

    #[test]
    fn metrics_arithmetic() {
        let m = metrics_from_ranks(&[1, 2, 4, 10]).unwrap();
        assert!((m.mrr - 0.4625).abs() < 1e-12);
        assert_eq!(m.hits[&3], 0.5);
        assert_eq!(m.hits[&10], 1.0);
        let p = metrics_from_ranks(&[1, 1, 1, 1]).unwrap();
        assert_eq!((p.mrr, p.hits[&1]), (1.0, 1.0));
        assert!(metrics_from_ranks(&[]).is_none());
    }

    proptest! {
        #[test]
        fn metric_order(ranks in prop::collection::vec(1u64..50, 1..40)) {
            let m = metrics_from_ranks(&ranks).unwrap();
            prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
            prop_assert!(m.hits[&1] <= m.hits[&3] && m.hits[&3] <= m.hits[&10]);
            prop_assert!(m.mrr >= m.hits[&1]);
        }
    }
}
