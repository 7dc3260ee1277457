//! Retrieval metrics: similar-pair labels, AUROC, average precision and
//! Top-k hit ratio, plus a per-query evaluation report.

use std::io::Write;

use thiserror::Error;

use crate::hash_index::{CodeDatabase, HashCode, IndexError};
use crate::simmatrix::SimilarityMatrix;

/// Database structures within this fraction of the best score are similar.
pub const SIMILAR_RATIO: f64 = 0.9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty database")]
    EmptyDatabase,
    #[error("need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("no positive labels")]
    NoPositives,
    #[error("scores and labels differ in length")]
    LengthMismatch,
    #[error("structure `{0}` is missing from the similarity matrix")]
    UnknownId(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Database indices `b` (excluding `query`) with
/// `TM(query, b) ≥ ratio · max_db TM(query, ·)`.
pub fn label_similar(m: &SimilarityMatrix, query: usize, db: &[usize], ratio: f64) -> Result<Vec<usize>, EvalError> {
    let db: Vec<usize> = db.iter().copied().filter(|&b| b != query).collect();
    if db.is_empty() {
        return Err(EvalError::EmptyDatabase);
    }
    let row = m.row(query);
    let max = db.iter().map(|&b| row[b] as f64).fold(f64::NEG_INFINITY, f64::max);
    Ok(db.into_iter().filter(|&b| row[b] as f64 >= ratio * max).collect())
}

/// Probability that a random positive has a smaller distance than a random
/// negative, ties counting one half. `distances` are lower-is-better.
pub fn auroc(distances: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if distances.len() != labels.len() {
        return Err(EvalError::LengthMismatch);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && distances[order[j + 1]] == distances[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let pos_after_neg = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(1.0 - pos_after_neg / (p * n))
}

/// Mean of precision at each positive's rank, for labels in ranked order.
pub fn auprc(ranked_labels: &[bool]) -> Result<f64, EvalError> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &l) in ranked_labels.iter().enumerate() {
        if l {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(EvalError::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// Fraction of similar structures found in the top `k`, normalized by
/// `min(k, n_similar)`, for one query.
pub fn topk_hits(ranked_labels: &[bool], n_similar: usize, k: usize) -> Result<f64, EvalError> {
    if n_similar == 0 {
        return Err(EvalError::NoPositives);
    }
    let found = ranked_labels.iter().take(k).filter(|&&l| l).count();
    Ok(found as f64 / k.min(n_similar) as f64)
}

/// Mean of [`topk_hits`] over queries given as `(ranked labels, n_similar)`.
pub fn topk_hit_ratio(queries: &[(Vec<bool>, usize)], k: usize) -> Result<f64, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoPositives);
    }
    let mut s = 0.0;
    for (labels, n) in queries {
        s += topk_hits(labels, *n, k)?;
    }
    Ok(s / queries.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEvaluation {
    pub query: String,
    pub n_similar: usize,
    /// `None` when every database structure is similar.
    pub auroc: Option<f64>,
    pub auprc: f64,
    pub top: [f64; 3],
}

pub const TOP_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: Vec<QueryEvaluation>,
    /// Queries with no similar database structure.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub n_queries: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub top: [f64; 3],
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        let n = self.queries.len().max(1) as f64;
        let aurocs: Vec<f64> = self.queries.iter().filter_map(|q| q.auroc).collect();
        EvalSummary {
            n_queries: self.queries.len(),
            auroc: if aurocs.is_empty() { f64::NAN } else { aurocs.iter().sum::<f64>() / aurocs.len() as f64 },
            auprc: self.queries.iter().map(|q| q.auprc).sum::<f64>() / n,
            top: std::array::from_fn(|i| self.queries.iter().map(|q| q.top[i]).sum::<f64>() / n),
        }
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "query\tn_similar\tauroc\tauprc\ttop1\ttop5\ttop10")?;
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.4}"));
        for q in &self.queries {
            writeln!(w, "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", q.query, q.n_similar, fmt(q.auroc), q.auprc, q.top[0], q.top[1], q.top[2])?;
        }
        let s = self.summary();
        writeln!(w, "mean\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", s.n_queries, fmt(Some(s.auroc).filter(|v| v.is_finite())), s.auprc, s.top[0], s.top[1], s.top[2])?;
        writeln!(w, "# skipped_queries\t{}", self.skipped.len())
    }
}

/// Ranks the whole database for each query (leaving out the query's own id)
/// and scores the ranking against labels from `m`.
pub fn evaluate(db: &CodeDatabase, queries: &[HashCode], m: &SimilarityMatrix) -> Result<EvalReport, EvalError> {
    if db.is_empty() {
        return Err(EvalError::EmptyDatabase);
    }
    let db_idx: Vec<usize> = db.ids().iter().map(|id| m.index_of(id).ok_or_else(|| EvalError::UnknownId(id.clone()))).collect::<Result<_, _>>()?;
    let mut out = EvalReport { queries: Vec::new(), skipped: Vec::new() };
    for q in queries {
        let qi = m.index_of(&q.id).ok_or_else(|| EvalError::UnknownId(q.id.clone()))?;
        let candidates: Vec<usize> = db_idx.iter().copied().filter(|&b| b != qi).collect();
        if candidates.is_empty() {
            out.skipped.push(q.id.clone());
            continue;
        }
        let similar = label_similar(m, qi, &candidates, SIMILAR_RATIO)?;
        if similar.is_empty() {
            out.skipped.push(q.id.clone());
            continue;
        }
        let hits = db.search_excluding(q, db.len(), Some(&q.id))?;
        let is_similar = |id: &str| m.index_of(id).is_some_and(|b| similar.contains(&b));
        let labels: Vec<bool> = hits.iter().map(|h| is_similar(&h.id)).collect();
        let dists: Vec<f64> = hits.iter().map(|h| h.scaled).collect();
        let auroc = match auroc(&dists, &labels) {
            Ok(v) => Some(v),
            Err(EvalError::DegenerateLabels) => None,
            Err(e) => return Err(e),
        };
        let top = std::array::from_fn(|i| topk_hits(&labels, similar.len(), TOP_KS[i]).unwrap_or(0.0));
        out.queries.push(QueryEvaluation { query: q.id.clone(), n_similar: similar.len(), auroc, auprc: auprc(&labels)?, top });
    }
    Ok(out)
}
