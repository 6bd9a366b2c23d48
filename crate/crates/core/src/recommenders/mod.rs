//! Downstream recommenders and top-K ranking.
//!
//! Every model scores the full column space of the matrix it was trained
//! on, which may include injected pseudo-items. Ranking restricts itself to
//! the leading `n_candidates` columns and drops each user's training items.

mod als;
mod hybrid;
mod neumf;
mod svd;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use als::{als_fit, als_objective, AlsConfig, AlsTrace};
pub use hybrid::{hybrid_score, HybridScorer};
pub use neumf::{neumf_fit, NeuMfConfig, NeuMfModel};
pub use svd::svd_fit;

use crate::dataset::InteractionMatrix;
use crate::nn::Mat;
use crate::{Error, Result};

/// Anything that can score every item for a user.
pub trait Scorer {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    fn user_scores(&self, user: usize) -> Vec<f64>;

    /// Dense users x items score matrix.
    fn score_matrix(&self) -> Mat {
        let mut m = Mat::zeros((self.n_users(), self.n_items()));
        for u in 0..self.n_users() {
            for (dst, s) in m.row_mut(u).iter_mut().zip(self.user_scores(u)) {
                *dst = s;
            }
        }
        m
    }
}

/// Dot-product model shared by ALS, PureSVD and DR-MF.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub algo: Algo,
    pub users: Mat,
    pub items: Mat,
}

impl FactorModel {
    pub fn factors(&self) -> usize {
        self.users.ncols()
    }
}

impl Scorer for FactorModel {
    fn n_users(&self) -> usize {
        self.users.nrows()
    }

    fn n_items(&self) -> usize {
        self.items.nrows()
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        self.items.dot(&self.users.row(user)).to_vec()
    }

    fn score_matrix(&self) -> Mat {
        self.users.dot(&self.items.t())
    }
}

/// Precomputed scores, for example from an external model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix(pub Mat);

impl Scorer for ScoreMatrix {
    fn n_users(&self) -> usize {
        self.0.nrows()
    }

    fn n_items(&self) -> usize {
        self.0.ncols()
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        self.0.row(user).to_vec()
    }

    fn score_matrix(&self) -> Mat {
        self.0.clone()
    }
}

/// Items ordered by (score desc, index asc) with their scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Top `k_max` of one score row over `0..n_candidates`, skipping `exclude`
/// (sorted).
pub fn top_k(scores: &[f64], n_candidates: usize, exclude: &[usize], k_max: usize) -> RankedList {
    let mut cand: Vec<usize> = (0..n_candidates.min(scores.len()))
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let order = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    let k = k_max.min(cand.len());
    if k == 0 {
        return RankedList::default();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    RankedList {
        scores: cand.iter().map(|&i| scores[i]).collect(),
        items: cand,
    }
}

/// Ranked lists for every user. `exclude` holds the training items that
/// must never be recommended; candidates are its first `n_base_items`
/// columns.
pub fn recommend_topk(model: &dyn Scorer, exclude: &InteractionMatrix, k_max: usize) -> Result<Vec<RankedList>> {
    if model.n_users() != exclude.n_users() || model.n_items() < exclude.n_base_items() {
        return Err(Error::Shape(format!(
            "model scores {}x{}, training mask is {}x{}",
            model.n_users(),
            model.n_items(),
            exclude.n_users(),
            exclude.n_base_items()
        )));
    }
    let scores = model.score_matrix();
    let n = exclude.n_base_items();
    Ok((0..exclude.n_users())
        .map(|u| {
            let row = scores.row(u);
            let row = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
            top_k(&row, n, exclude.row(u), k_max)
        })
        .collect())
}

/// Supported downstream algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algo {
    Als,
    PureSvd,
    DrMf,
    Hybrid,
    NeuMf,
}

impl Algo {
    pub const ALL: [Algo; 5] = [Algo::Als, Algo::PureSvd, Algo::DrMf, Algo::Hybrid, Algo::NeuMf];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Als => "als",
            Algo::PureSvd => "svd",
            Algo::DrMf => "drmf",
            Algo::Hybrid => "hybrid",
            Algo::NeuMf => "neumf",
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "als" => Ok(Algo::Als),
            "svd" | "puresvd" => Ok(Algo::PureSvd),
            "drmf" | "dr-mf" => Ok(Algo::DrMf),
            "hybrid" | "hybridrec" => Ok(Algo::Hybrid),
            "neumf" => Ok(Algo::NeuMf),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecConfig {
    pub als: AlsConfig,
    pub svd_rank: usize,
    pub drmf_rank: usize,
    pub hybrid_alpha: f64,
    pub neumf: NeuMfConfig,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            als: AlsConfig::default(),
            svd_rank: 128,
            drmf_rank: 64,
            hybrid_alpha: 0.5,
            neumf: NeuMfConfig::default(),
        }
    }
}

/// Fits `algo` on `x`. `weights`, when given, supplies ALS confidences for
/// observed entries; the other algorithms ignore it.
pub fn fit(algo: Algo, x: &InteractionMatrix, weights: Option<&Mat>, cfg: &RecConfig, seed: u64) -> Result<Box<dyn Scorer>> {
    let rank = |f: usize| f.min(x.n_users()).min(x.n_items());
    Ok(match algo {
        Algo::Als => Box::new(als_fit(x, weights, &AlsConfig { seed, ..cfg.als })?.0),
        Algo::PureSvd => Box::new(svd_fit(x, rank(cfg.svd_rank), Algo::PureSvd)?),
        Algo::DrMf => Box::new(svd_fit(x, rank(cfg.drmf_rank), Algo::DrMf)?),
        Algo::Hybrid => {
            let als = als_fit(x, weights, &AlsConfig { seed, ..cfg.als })?.0;
            let svd = svd_fit(x, rank(cfg.svd_rank), Algo::PureSvd)?;
            Box::new(hybrid_score(&als, &svd, cfg.hybrid_alpha, x.n_base_items())?)
        }
        Algo::NeuMf => {
            let ncfg = NeuMfConfig {
                seed,
                ..cfg.neumf.clone()
            };
            Box::new(neumf_fit(x, &ncfg)?.0)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_rng;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn full_sort(scores: &[f64], n: usize, exclude: &[usize], k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
        all.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        all.truncate(k);
        all
    }

    #[test]
    fn top_k_examples() {
        let scores = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(top_k(&scores, 5, &[], 3).items, vec![4, 3, 2]);
        assert!(top_k(&scores, 5, &[0, 1, 2, 3, 4], 3).items.is_empty());
        assert_eq!(top_k(&scores, 3, &[2], 5).items, vec![1, 0]);
        assert_eq!(top_k(&[1.0, 1.0, 1.0], 3, &[], 2).items, vec![0, 1]);
    }

    #[test]
    fn top_k_matches_full_sort_on_random_instances() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) * 0.5).collect();
            let mut exclude: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.3).collect();
            exclude.sort_unstable();
            let cands = rng.random_range(0..=n);
            let k = rng.random_range(0..12);
            let got = top_k(&scores, cands, &exclude, k);
            assert_eq!(got.items, full_sort(&scores, cands, &exclude, k));
            assert!(got.items.iter().all(|i| !exclude.contains(i)));
        }
    }

    #[test]
    fn recommend_excludes_training_and_injected_items() {
        let train = InteractionMatrix::from_rows(3, vec![vec![0], vec![1, 2]]).unwrap().with_base_items(2).unwrap();
        let scores = ScoreMatrix(Array2::from_shape_vec((2, 3), vec![9.0, 1.0, 5.0, 2.0, 8.0, 7.0]).unwrap());
        let lists = recommend_topk(&scores, &train, 5).unwrap();
        assert_eq!(lists[0].items, vec![1]);
        assert_eq!(lists[1].items, vec![0]);
        let wrong = InteractionMatrix::empty(3, 3);
        assert!(recommend_topk(&scores, &wrong, 5).is_err());
    }

    #[test]
    fn algo_names_roundtrip() {
        for a in Algo::ALL {
            assert_eq!(a.name().parse::<Algo>().unwrap(), a);
        }
        assert!("ngcf".parse::<Algo>().is_err());
    }

    proptest! {
        #[test]
        fn ranking_is_invariant_under_monotone_transforms(seed in 0u64..500, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let mut rng = stream_rng(seed, 1);
            let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
            let exclude = vec![3, 7];
            let base = top_k(&scores, 30, &exclude, 10).items;
            let affine: Vec<f64> = scores.iter().map(|s| s * scale + shift).collect();
            let cubic: Vec<f64> = scores.iter().map(|s| s.powi(3) + s).collect();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            prop_assert_eq!(&top_k(&affine, 30, &exclude, 10).items, &base);
            prop_assert_eq!(&top_k(&cubic, 30, &exclude, 10).items, &base);
            prop_assert_eq!(&top_k(&exp, 30, &exclude, 10).items, &base);
        }
    }
}
