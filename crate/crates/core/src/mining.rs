//! Bitext mining and cross-lingual retrieval.
//!
//! Candidate pairs are scored with the ratio margin
//!
//! ```text
//! score(x, y) = cos(x, y) / ( sum_{z in NN_k(x)} cos(x, z) / 2k
//!                           + sum_{z in NN_k(y)} cos(y, z) / 2k )
//! ```
//!
//! where `NN_k(x)` are the `k` nearest neighbours of `x` in the other
//! language. Dividing by the neighbourhood density suppresses hub sentences
//! that are close to everything.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::hash::Hash;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};

const QUERY_BLOCK: usize = 64;
const POOL_BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub cosine: f64,
}

/// Descending cosine, ascending index.
fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.cosine.total_cmp(&a.cosine).then(a.index.cmp(&b.index))
}

/// Up to `k` neighbours per query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub k: usize,
    pub per_query: Vec<Vec<Neighbor>>,
}

impl NeighborList {
    pub fn neighbors(&self, query: usize) -> &[Neighbor] {
        &self.per_query[query]
    }

    /// Sum of the neighbour cosines of each query.
    pub fn cosine_sums(&self) -> Vec<f64> {
        self.per_query.iter().map(|n| n.iter().map(|x| x.cosine).sum()).collect()
    }
}

/// Rows scaled to unit length.
pub fn normalize_rows(m: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(m.data().len());
    for (i, row) in m.iter_rows().enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::arg(format!("zero-norm row {i} (id {:?})", m.ids()[i])));
        }
        out.extend(row.iter().map(|x| x / norm));
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn push_top_k(top: &mut Vec<Neighbor>, cand: Neighbor, k: usize) {
    if top.len() == k {
        match top.last() {
            Some(worst) if rank_order(&cand, worst) == Ordering::Less => {
                top.pop();
            }
            _ => return,
        }
    }
    let pos = top.partition_point(|n| rank_order(n, &cand) == Ordering::Less);
    top.insert(pos, cand);
}

/// Exact cosine k-NN of every query row in `pool`.
///
/// Rows are normalized once; similarities are dot products computed in
/// query x pool blocks. Query blocks run in parallel and results are
/// collected in query order.
pub fn knn(queries: &EmbeddingMatrix, pool: &EmbeddingMatrix, k: usize) -> Result<NeighborList> {
    if queries.dim() != pool.dim() {
        return Err(Error::arg(format!(
            "knn dimension mismatch: queries {}, pool {}",
            queries.dim(),
            pool.dim()
        )));
    }
    if pool.rows() == 0 {
        return Err(Error::arg("knn pool is empty"));
    }
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let dim = queries.dim();
    let q = normalize_rows(queries)?;
    let p = normalize_rows(pool)?;
    let k_eff = k.min(pool.rows());
    let per_query: Vec<Vec<Neighbor>> = q
        .par_chunks(QUERY_BLOCK * dim)
        .flat_map_iter(|qblock| {
            let nq = qblock.len() / dim;
            let mut tops: Vec<Vec<Neighbor>> = vec![Vec::with_capacity(k_eff + 1); nq];
            for (pb, pblock) in p.chunks(POOL_BLOCK * dim).enumerate() {
                let base = pb * POOL_BLOCK;
                for (qi, qrow) in qblock.chunks_exact(dim).enumerate() {
                    for (pj, prow) in pblock.chunks_exact(dim).enumerate() {
                        let cand = Neighbor {
                            index: base + pj,
                            cosine: dot(qrow, prow),
                        };
                        push_top_k(&mut tops[qi], cand, k_eff);
                    }
                }
            }
            tops
        })
        .collect();
    Ok(NeighborList { k: k_eff, per_query })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Margin {
    /// `a / b`
    #[default]
    Ratio,
}

impl Margin {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Margin::Ratio => a / b,
        }
    }
}

impl fmt::Display for Margin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Margin::Ratio => f.write_str("ratio"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    #[default]
    UnionMax,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
            Direction::UnionMax => "union_max",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            "union_max" | "union-max" => Ok(Direction::UnionMax),
            _ => Err(Error::arg(format!("unknown mining direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub k: usize,
    pub margin: Margin,
    pub direction: Direction,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 4,
            margin: Margin::Ratio,
            direction: Direction::UnionMax,
        }
    }
}

/// Ratio-margin score of a pair given the neighbour cosines of both sides.
/// Each neighbourhood is averaged over its own length (`k`, or the pool
/// size when that is smaller).
pub fn margin_score(cos_xy: f64, nnx: &[f64], nny: &[f64]) -> Result<f64> {
    margin_score_with(Margin::Ratio, cos_xy, nnx, nny)
}

pub fn margin_score_with(margin: Margin, cos_xy: f64, nnx: &[f64], nny: &[f64]) -> Result<f64> {
    if nnx.is_empty() || nny.is_empty() {
        return Err(Error::arg("margin score needs non-empty neighbourhoods"));
    }
    let denom = neighborhood_term(nnx.iter().sum(), nnx.len()) + neighborhood_term(nny.iter().sum(), nny.len());
    finish_score(margin, cos_xy, denom, || format!("nnx={nnx:?} nny={nny:?}"))
}

fn neighborhood_term(sum: f64, k: usize) -> f64 {
    sum / (2 * k) as f64
}

fn finish_score(margin: Margin, cos_xy: f64, denom: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if denom == 0.0 {
        return Err(Error::Numeric(format!("zero margin denominator: {}", context())));
    }
    let s = margin.apply(cos_xy, denom);
    if !s.is_finite() {
        return Err(Error::Numeric(format!("non-finite margin score: {}", context())));
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub src: usize,
    pub tgt: usize,
    pub src_id: String,
    pub tgt_id: String,
    pub score: f64,
}

impl ScoredCandidate {
    pub fn key(&self) -> (String, String) {
        (self.src_id.clone(), self.tgt_id.clone())
    }
}

fn candidate_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.src_id.cmp(&b.src_id))
        .then_with(|| a.tgt_id.cmp(&b.tgt_id))
}

/// Scored translation candidates between two pools.
///
/// Forward scores each source row against its `k` target neighbours,
/// backward the reverse; union-max merges both keeping the larger score per
/// (src, tgt). Output is sorted by descending score, ties by ids.
pub fn mine_candidates(
    src: &EmbeddingMatrix,
    tgt: &EmbeddingMatrix,
    config: &MiningConfig,
) -> Result<Vec<ScoredCandidate>> {
    if src.rows() == 0 || tgt.rows() == 0 {
        return Err(Error::arg("mining needs non-empty source and target pools"));
    }
    let fwd = knn(src, tgt, config.k)?;
    let bwd = knn(tgt, src, config.k)?;
    let fsum = fwd.cosine_sums();
    let bsum = bwd.cosine_sums();
    let score = |i: usize, j: usize, c: f64| -> Result<f64> {
        let denom = neighborhood_term(fsum[i], fwd.k) + neighborhood_term(bsum[j], bwd.k);
        finish_score(config.margin, c, denom, || {
            format!(
                "src {} nnx={:?} tgt {} nny={:?}",
                src.ids()[i],
                fwd.neighbors(i),
                tgt.ids()[j],
                bwd.neighbors(j)
            )
        })
    };
    let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut add = |i: usize, j: usize, s: f64| {
        best.entry((i, j)).and_modify(|v| *v = v.max(s)).or_insert(s);
    };
    if matches!(config.direction, Direction::Forward | Direction::UnionMax) {
        for (i, ns) in fwd.per_query.iter().enumerate() {
            for n in ns {
                add(i, n.index, score(i, n.index, n.cosine)?);
            }
        }
    }
    if matches!(config.direction, Direction::Backward | Direction::UnionMax) {
        for (j, ns) in bwd.per_query.iter().enumerate() {
            for n in ns {
                add(n.index, j, score(n.index, j, n.cosine)?);
            }
        }
    }
    let mut out: Vec<ScoredCandidate> = best
        .into_iter()
        .map(|((i, j), score)| ScoredCandidate {
            src: i,
            tgt: j,
            src_id: src.ids()[i].clone(),
            tgt_id: tgt.ids()[j].clone(),
            score,
        })
        .collect();
    out.sort_by(candidate_order);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        PrecisionRecall { precision, recall, f1 }
    }
}

pub fn f1<T: Eq + Hash>(predicted: &HashSet<T>, gold: &HashSet<T>) -> PrecisionRecall {
    let tp = predicted.intersection(gold).count();
    PrecisionRecall::from_counts(tp, predicted.len(), gold.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    /// Pairs scoring strictly above this are returned; `-inf` keeps all.
    pub threshold: f64,
    pub metrics: PrecisionRecall,
}

/// Sweeps every distinct candidate score (plus `-inf`) as a threshold and
/// keeps the one with the best F1; ties go to the highest threshold.
pub fn optimize_threshold(
    candidates: &[ScoredCandidate],
    gold: &HashSet<(String, String)>,
) -> ThresholdChoice {
    let mut sorted: Vec<&ScoredCandidate> = candidates.iter().collect();
    sorted.sort_by(|a, b| candidate_order(a, b));
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let mut tp = 0usize;
    let mut best: Option<ThresholdChoice> = None;
    let mut consider = |threshold: f64, tp: usize, predicted: usize| {
        let metrics = PrecisionRecall::from_counts(tp, predicted, gold.len());
        if best.is_none_or(|b| metrics.f1 > b.metrics.f1) {
            best = Some(ThresholdChoice { threshold, metrics });
        }
    };
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        // prediction set for threshold `s` is everything strictly above it
        consider(s, tp, seen.len());
        while i < sorted.len() && sorted[i].score == s {
            let c = sorted[i];
            if seen.insert((c.src_id.as_str(), c.tgt_id.as_str()))
                && gold.contains(&(c.src_id.clone(), c.tgt_id.clone()))
            {
                tp += 1;
            }
            i += 1;
        }
    }
    consider(f64::NEG_INFINITY, tp, seen.len());
    best.expect("at least the -inf threshold is considered")
}

pub fn apply_threshold(candidates: &[ScoredCandidate], threshold: f64) -> Vec<ScoredCandidate> {
    candidates.iter().filter(|c| c.score > threshold).cloned().collect()
}

/// Precision/recall/F1 of the unique pairs scoring above `threshold`.
pub fn evaluate_threshold(
    candidates: &[ScoredCandidate],
    gold: &HashSet<(String, String)>,
    threshold: f64,
) -> PrecisionRecall {
    let predicted: HashSet<(String, String)> =
        candidates.iter().filter(|c| c.score > threshold).map(ScoredCandidate::key).collect();
    f1(&predicted, gold)
}

/// Top-1 retrieval accuracy in both directions for row-aligned pools.
/// Ties go to the lower index, so a tied correct match only counts when it
/// is the tie-winner.
pub fn tatoeba_accuracy(src: &EmbeddingMatrix, tgt: &EmbeddingMatrix) -> Result<(f64, f64)> {
    if src.rows() != tgt.rows() {
        return Err(Error::arg(format!(
            "tatoeba needs aligned pools, got {} and {} rows",
            src.rows(),
            tgt.rows()
        )));
    }
    if src.rows() == 0 {
        return Err(Error::arg("tatoeba needs at least one pair"));
    }
    let acc = |nl: NeighborList| {
        let hits = nl.per_query.iter().enumerate().filter(|(i, n)| n[0].index == *i).count();
        hits as f64 / nl.per_query.len() as f64
    };
    Ok((acc(knn(src, tgt, 1)?), acc(knn(tgt, src, 1)?)))
}

// ---------------------------------------------------------------------------
// TSV formats

/// Reads `row_index<TAB>sentence_id`; every row in `0..rows` must appear
/// exactly once.
pub fn read_id_map(path: &Path, rows: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids: Vec<Option<String>> = vec![None; rows];
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let (idx, id) = line.split_once('\t').ok_or_else(|| err("expected row_index<TAB>id".into()))?;
        let idx: usize = idx.trim().parse().map_err(|_| err(format!("bad row index {idx:?}")))?;
        let slot = ids.get_mut(idx).ok_or_else(|| err(format!("row index {idx} out of range ({rows} rows)")))?;
        if slot.replace(id.to_owned()).is_some() {
            return Err(err(format!("row index {idx} listed twice")));
        }
    }
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| id.ok_or_else(|| Error::arg(format!("{}: no id for row {i}", path.display()))))
        .collect()
}

/// Reads `src_id<TAB>tgt_id` gold pairs.
pub fn read_gold_pairs(path: &Path) -> Result<HashSet<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split('\t');
        match (f.next(), f.next()) {
            (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                out.insert((a.to_owned(), b.to_owned()));
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "expected src_id<TAB>tgt_id".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn format_threshold(t: f64) -> String {
    if t == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        t.to_string()
    }
}

/// `src_id<TAB>tgt_id<TAB>score` with `#` header lines recording the
/// mining settings.
pub fn candidates_tsv(candidates: &[ScoredCandidate], config: &MiningConfig, threshold: Option<f64>) -> String {
    let mut out = format!(
        "# k={}\n# margin={}\n# direction={}\n# threshold={}\n# dedup=none\n",
        config.k,
        config.margin,
        config.direction,
        threshold.map_or("none".into(), format_threshold)
    );
    for c in candidates {
        out.push_str(&format!("{}\t{}\t{}\n", c.src_id, c.tgt_id, c.score));
    }
    out
}
