//! Convex mix of per-user min-max normalized ALS and SVD scores.

use super::{FactorModel, Scorer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HybridScorer {
    pub als: FactorModel,
    pub svd: FactorModel,
    pub alpha: f64,
    /// Columns over which each row is normalized.
    pub n_candidates: usize,
}

pub fn hybrid_score(als: &FactorModel, svd: &FactorModel, alpha: f64, n_candidates: usize) -> Result<HybridScorer> {
    if als.n_users() != svd.n_users() || als.n_items() != svd.n_items() {
        return Err(Error::Shape("hybrid components score different index spaces".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("mixing weight {alpha} outside [0, 1]")));
    }
    Ok(HybridScorer {
        als: als.clone(),
        svd: svd.clone(),
        alpha,
        n_candidates: n_candidates.min(als.n_items()),
    })
}

/// Maps the first `n` entries onto [0, 1] by their min and max; a constant
/// block becomes all zeros. Later entries use the same affine map.
pub(crate) fn min_max(row: &mut [f64], n: usize) {
    let head = &row[..n.min(row.len())];
    let lo = head.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in row.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

impl Scorer for HybridScorer {
    fn n_users(&self) -> usize {
        self.als.n_users()
    }

    fn n_items(&self) -> usize {
        self.als.n_items()
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        let mut a = self.als.user_scores(user);
        let mut s = self.svd.user_scores(user);
        min_max(&mut a, self.n_candidates);
        min_max(&mut s, self.n_candidates);
        a.iter().zip(&s).map(|(a, s)| self.alpha * a + (1.0 - self.alpha) * s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommenders::{top_k, Algo};
    use ndarray::array;

    fn models() -> (FactorModel, FactorModel) {
        let als = FactorModel {
            algo: Algo::Als,
            users: array![[1.0], [2.0]],
            items: array![[0.2], [0.6], [0.4]],
        };
        let svd = FactorModel {
            algo: Algo::PureSvd,
            users: array![[1.0], [-1.0]],
            items: array![[3.0], [1.0], [2.0]],
        };
        (als, svd)
    }

    #[test]
    fn extreme_weights_follow_one_component() {
        let (als, svd) = models();
        for u in 0..2 {
            let h1 = hybrid_score(&als, &svd, 1.0, 3).unwrap().user_scores(u);
            let h0 = hybrid_score(&als, &svd, 0.0, 3).unwrap().user_scores(u);
            assert_eq!(top_k(&h1, 3, &[], 3).items, top_k(&als.user_scores(u), 3, &[], 3).items);
            assert_eq!(top_k(&h0, 3, &[], 3).items, top_k(&svd.user_scores(u), 3, &[], 3).items);
        }
    }

    #[test]
    fn half_mix_on_two_items_by_hand() {
        let als = FactorModel {
            algo: Algo::Als,
            users: array![[1.0]],
            items: array![[2.0], [4.0]],
        };
        let svd = FactorModel {
            algo: Algo::PureSvd,
            users: array![[1.0]],
            items: array![[5.0], [1.0]],
        };
        // als normalizes to [0, 1], svd to [1, 0]
        let h = hybrid_score(&als, &svd, 0.5, 2).unwrap().user_scores(0);
        assert_eq!(h, vec![0.5, 0.5]);
        let h = hybrid_score(&als, &svd, 0.25, 2).unwrap().user_scores(0);
        assert_eq!(h, vec![0.75, 0.25]);
    }

    #[test]
    fn constant_rows_normalize_to_zero() {
        let mut row = vec![3.0, 3.0, 3.0];
        min_max(&mut row, 3);
        assert_eq!(row, vec![0.0; 3]);
        let (als, svd) = models();
        assert!(hybrid_score(&als, &svd, 1.5, 3).is_err());
    }
}
