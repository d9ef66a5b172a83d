//! Retrieval metrics over ranked search results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::index::SearchResult;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    EmptyEval,
    #[error("{results} results for {labels} labels")]
    LengthMismatch { results: usize, labels: usize },
}

/// 1-based rank of `truth` in `ranked`, if present.
pub fn rank_of_truth<'a>(ranked: impl IntoIterator<Item = &'a str>, truth: &str) -> Option<usize> {
    ranked.into_iter().position(|s| s == truth).map(|p| p + 1)
}

/// Reciprocal rank, zero when the truth is absent or ranked beyond `cutoff`.
pub fn reciprocal_rank(rank: Option<usize>, cutoff: usize) -> f64 {
    match rank {
        Some(r) if r <= cutoff => 1.0 / r as f64,
        _ => 0.0,
    }
}

pub fn mrr_at(ranks: &[Option<usize>], cutoff: usize) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    Ok(ranks.iter().map(|&r| reciprocal_rank(r, cutoff)).sum::<f64>() / ranks.len() as f64)
}

pub fn mrr_at_10(ranks: &[Option<usize>]) -> Result<f64, EvalError> {
    mrr_at(ranks, 10)
}

pub fn recall_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let hits = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub true_id: String,
    pub rank: Option<usize>,
    pub reciprocal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub mrr_at_10: f64,
    pub recall: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    /// Scores `results` against `truths` (same order), reporting recall at each of `recall_ks`.
    pub fn from_results(
        results: &[SearchResult],
        truths: &[String],
        recall_ks: &[usize],
    ) -> Result<Self, EvalError> {
        if results.len() != truths.len() {
            return Err(EvalError::LengthMismatch { results: results.len(), labels: truths.len() });
        }
        let per_query: Vec<QueryOutcome> = results
            .iter()
            .zip(truths)
            .map(|(r, t)| {
                let rank = rank_of_truth(r.song_ids(), t);
                QueryOutcome {
                    query_id: r.query_id.clone(),
                    true_id: t.clone(),
                    rank,
                    reciprocal: reciprocal_rank(rank, 10),
                }
            })
            .collect();
        let ranks: Vec<Option<usize>> = per_query.iter().map(|q| q.rank).collect();
        let mut recall = BTreeMap::new();
        for &k in recall_ks {
            recall.insert(k, recall_at_k(&ranks, k)?);
        }
        Ok(Self { n_queries: ranks.len(), mrr_at_10: mrr_at_10(&ranks)?, recall, per_query })
    }

    /// `query_id\ttrue_id\trank\treciprocal`, rank 0 when absent.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("query_id\ttrue_id\trank\treciprocal\n");
        for q in &self.per_query {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", q.query_id, q.true_id, q.rank.unwrap_or(0), q.reciprocal);
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
