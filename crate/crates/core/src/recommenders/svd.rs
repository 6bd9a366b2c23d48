//! Truncated SVD through the eigendecomposition of the smaller Gram matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use super::{Algo, FactorModel};
use crate::dataset::InteractionMatrix;
use crate::{Error, Result};

/// Best rank-`f` factorization `X ~ U_f S_f V_f^T`, returned as user
/// factors `U_f S_f` and item factors `V_f`.
pub fn svd_fit(x: &InteractionMatrix, f: usize, algo: Algo) -> Result<FactorModel> {
    let (m, n) = (x.n_users(), x.n_items());
    if f == 0 || f > m.min(n) {
        return Err(Error::InvalidArgument(format!("rank {f} outside 1..={} for a {m}x{n} matrix", m.min(n))));
    }
    let dense = DMatrix::from_fn(m, n, |u, i| if x.contains(u, i) { 1.0 } else { 0.0 });
    // eigenvectors of the smaller Gram give one side; the other follows
    // from X v = s u
    let users_side = m <= n;
    let gram = if users_side {
        &dense * dense.transpose()
    } else {
        dense.transpose() * &dense
    };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| f64::total_cmp(&eig.eigenvalues[b], &eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut users = Array2::zeros((m, f));
    let mut items = Array2::zeros((n, f));
    let tol = 1e-10 * eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b)).max(1.0);
    for (k, &idx) in order.iter().take(f).enumerate() {
        let lambda: f64 = eig.eigenvalues[idx];
        let lambda = lambda.max(0.0);
        if lambda <= tol {
            continue;
        }
        let s = lambda.sqrt();
        let vec = eig.eigenvectors.column(idx);
        if users_side {
            // vec is u; v = X^T u / s
            let v = dense.transpose() * vec / s;
            for u in 0..m {
                users[[u, k]] = vec[u] * s;
            }
            for i in 0..n {
                items[[i, k]] = v[i];
            }
        } else {
            // vec is v; U S = X v
            let u_col = &dense * vec;
            for u in 0..m {
                users[[u, k]] = u_col[u];
            }
            for i in 0..n {
                items[[i, k]] = vec[i];
            }
        }
    }
    Ok(FactorModel { algo, users, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommenders::Scorer;
    use crate::stream_rng;
    use rand::Rng;

    fn oracle_rank_f(x: &InteractionMatrix, f: usize) -> DMatrix<f64> {
        let dense = DMatrix::from_fn(x.n_users(), x.n_items(), |u, i| if x.contains(u, i) { 1.0 } else { 0.0 });
        let svd = dense.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| f64::total_cmp(&svd.singular_values[b], &svd.singular_values[a]));
        let mut out = DMatrix::zeros(x.n_users(), x.n_items());
        for &k in idx.iter().take(f) {
            out += u.column(k) * vt.row(k) * svd.singular_values[k];
        }
        out
    }

    fn max_diff(model: &FactorModel, want: &DMatrix<f64>) -> f64 {
        let got = model.score_matrix();
        let mut worst: f64 = 0.0;
        for ((r, c), v) in got.indexed_iter() {
            worst = worst.max((v - want[(r, c)]).abs());
        }
        worst
    }

    fn random(users: usize, items: usize, seed: u64) -> InteractionMatrix {
        let mut rng = stream_rng(seed, 5);
        let rows = (0..users)
            .map(|_| (0..items).filter(|_| rng.random::<f64>() < 0.5).collect())
            .collect();
        InteractionMatrix::from_rows(items, rows).unwrap()
    }

    #[test]
    fn identity_is_reconstructed_exactly() {
        let x = InteractionMatrix::from_rows(3, vec![vec![0], vec![1], vec![2]]).unwrap();
        let m = svd_fit(&x, 3, Algo::PureSvd).unwrap();
        let s = m.score_matrix();
        for u in 0..3 {
            for i in 0..3 {
                assert!((s[[u, i]] - if u == i { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_matrix_has_zero_error() {
        let x = InteractionMatrix::from_rows(5, vec![vec![0, 2, 3], vec![], vec![0, 2, 3], vec![0, 2, 3]]).unwrap();
        let m = svd_fit(&x, 1, Algo::DrMf).unwrap();
        let dense = DMatrix::from_fn(4, 5, |u, i| if x.contains(u, i) { 1.0 } else { 0.0 });
        assert!(max_diff(&m, &dense) < 1e-10);
    }

    #[test]
    fn matches_dense_svd_oracle() {
        for seed in 0..20 {
            for (users, items) in [(4, 4), (6, 3), (3, 7)] {
                let x = random(users, items, seed);
                let f = 1 + (seed as usize) % users.min(items);
                let m = svd_fit(&x, f, Algo::PureSvd).unwrap();
                let oracle = oracle_rank_f(&x, f);
                // skip draws whose f-th and (f+1)-th singular values tie,
                // where the best rank-f approximation is not unique
                let sv = {
                    let d = DMatrix::from_fn(users, items, |u, i| if x.contains(u, i) { 1.0 } else { 0.0 });
                    let mut s: Vec<f64> = d.singular_values().iter().copied().collect();
                    s.sort_by(|a, b| b.total_cmp(a));
                    s
                };
                if f < sv.len() && (sv[f - 1] - sv[f]).abs() < 1e-6 {
                    continue;
                }
                assert!(max_diff(&m, &oracle) < 1e-8, "seed {seed} shape {users}x{items} f {f}");
            }
        }
    }

    #[test]
    fn error_does_not_increase_with_rank_and_bad_ranks_fail() {
        let x = random(6, 8, 3);
        let dense = DMatrix::from_fn(6, 8, |u, i| if x.contains(u, i) { 1.0 } else { 0.0 });
        let mut last = f64::INFINITY;
        for f in 1..=6 {
            let s = svd_fit(&x, f, Algo::PureSvd).unwrap().score_matrix();
            let err: f64 = s.indexed_iter().map(|((r, c), v)| (v - dense[(r, c)]).powi(2)).sum();
            assert!(err <= last + 1e-10);
            last = err;
        }
        assert!(last < 1e-10);
        assert!(svd_fit(&x, 0, Algo::PureSvd).is_err());
        assert!(svd_fit(&x, 7, Algo::PureSvd).is_err());
    }
}
