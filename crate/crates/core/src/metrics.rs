//! Recall@K and NDCG@K, corpus means and seed aggregation.
//!
//! Defaults: recall divides hits by `min(K, |relevant|)` and NDCG divides by
//! the ideal DCG of K hits. Both switch to the textbook variants
//! (`|relevant|` denominator, ideal DCG truncated at `|relevant|`).

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::InteractionMatrix;
use crate::recommenders::RankedList;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecallDenominator {
    MinK,
    Relevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdealDcg {
    FullK,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    pub recall: RecallDenominator,
    pub idcg: IdealDcg,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            recall: RecallDenominator::MinK,
            idcg: IdealDcg::FullK,
        }
    }
}

impl FromStr for RecallDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_k" => Ok(Self::MinK),
            "relevant" => Ok(Self::Relevant),
            other => Err(Error::Config(format!("unknown recall denominator `{other}` (min_k|relevant)"))),
        }
    }
}

impl FromStr for IdealDcg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_k" => Ok(Self::FullK),
            "truncated" => Ok(Self::Truncated),
            other => Err(Error::Config(format!("unknown ideal DCG `{other}` (full_k|truncated)"))),
        }
    }
}

impl fmt::Display for RecallDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MinK => "min_k",
            Self::Relevant => "relevant",
        })
    }
}

impl fmt::Display for IdealDcg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullK => "full_k",
            Self::Truncated => "truncated",
        })
    }
}

fn check(relevant: &[usize], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("cutoff K must be positive".into()));
    }
    if relevant.is_empty() {
        return Err(Error::InvalidArgument("relevant set is empty".into()));
    }
    if relevant.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("relevant set must be sorted and distinct".into()));
    }
    Ok(())
}

fn is_hit(relevant: &[usize], item: usize) -> bool {
    relevant.binary_search(&item).is_ok()
}

/// `relevant` must be sorted and distinct.
pub fn recall_at_k_with(ranked: &[usize], relevant: &[usize], k: usize, conv: Conventions) -> Result<f64> {
    check(relevant, k)?;
    let hits = ranked.iter().take(k).filter(|&&i| is_hit(relevant, i)).count();
    let denom = match conv.recall {
        RecallDenominator::MinK => k.min(relevant.len()),
        RecallDenominator::Relevant => relevant.len(),
    };
    Ok(hits as f64 / denom as f64)
}

pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    recall_at_k_with(ranked, relevant, k, Conventions::default())
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// `relevant` must be sorted and distinct.
pub fn ndcg_at_k_with(ranked: &[usize], relevant: &[usize], k: usize, conv: Conventions) -> Result<f64> {
    check(relevant, k)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| is_hit(relevant, i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal_hits = match conv.idcg {
        IdealDcg::FullK => k,
        IdealDcg::Truncated => k.min(relevant.len()),
    };
    let idcg: f64 = (1..=ideal_hits).map(discount).sum();
    Ok(dcg / idcg)
}

pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    ndcg_at_k_with(ranked, relevant, k, Conventions::default())
}

/// Mean metrics at one cutoff over users with a non-empty test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub cutoff: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
}

pub fn evaluate(lists: &[RankedList], test: &InteractionMatrix, cutoffs: &[usize], conv: Conventions) -> Result<Vec<CutoffMetrics>> {
    if lists.len() != test.n_users() {
        return Err(Error::Shape(format!("{} ranked lists for {} users", lists.len(), test.n_users())));
    }
    cutoffs
        .iter()
        .map(|&k| {
            let (mut recall, mut ndcg, mut n) = (0.0, 0.0, 0usize);
            for (u, list) in lists.iter().enumerate() {
                let rel = test.row(u);
                if rel.is_empty() {
                    continue;
                }
                recall += recall_at_k_with(&list.items, rel, k, conv)?;
                ndcg += ndcg_at_k_with(&list.items, rel, k, conv)?;
                n += 1;
            }
            let d = n.max(1) as f64;
            Ok(CutoffMetrics {
                cutoff: k,
                recall: recall / d,
                ndcg: ndcg / d,
                n_users: n,
            })
        })
        .collect()
}

/// `(after - before) / before`, absent when `before` is zero.
pub fn relative_improvement(after: f64, before: f64) -> Option<f64> {
    (before != 0.0).then(|| (after - before) / before)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One row of a report: an algorithm on one matrix variant at one cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algo: String,
    pub variant: String,
    pub cutoff: usize,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
    pub n_users: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Aggregates per-seed metric lists (all with the same cutoffs) into
    /// mean and standard deviation rows.
    pub fn push_seeds(&mut self, algo: &str, variant: &str, per_seed: &[Vec<CutoffMetrics>]) -> Result<()> {
        let Some(first) = per_seed.first() else {
            return Err(Error::InvalidArgument("no seeds to aggregate".into()));
        };
        for (k, m) in first.iter().enumerate() {
            let column = |f: fn(&CutoffMetrics) -> f64| -> Result<Vec<f64>> {
                per_seed
                    .iter()
                    .map(|s| {
                        s.get(k)
                            .filter(|c| c.cutoff == m.cutoff)
                            .map(f)
                            .ok_or_else(|| Error::Shape("seeds disagree on cutoffs".into()))
                    })
                    .collect()
            };
            let (recall_mean, recall_std) = mean_std(&column(|c| c.recall)?);
            let (ndcg_mean, ndcg_std) = mean_std(&column(|c| c.ndcg)?);
            self.rows.push(ReportRow {
                algo: algo.into(),
                variant: variant.into(),
                cutoff: m.cutoff,
                recall_mean,
                recall_std,
                ndcg_mean,
                ndcg_std,
                n_users: m.n_users,
                seeds: per_seed.len(),
            });
        }
        Ok(())
    }

    pub fn find(&self, algo: &str, variant: &str, cutoff: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.algo == algo && r.variant == variant && r.cutoff == cutoff)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rows).expect("report rows serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(Self {
            rows: serde_json::from_str(text)?,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("algo,variant,cutoff,recall_mean,recall_std,ndcg_mean,ndcg_std,n_users,seeds\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.algo, r.variant, r.cutoff, r.recall_mean, r.recall_std, r.ndcg_mean, r.ndcg_std, r.n_users, r.seeds
            );
        }
        out
    }
}
