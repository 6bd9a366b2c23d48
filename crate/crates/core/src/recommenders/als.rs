//! Implicit-feedback alternating least squares with confidence
//! `c_ui = 1 + alpha * w_ui` on observed entries and `c = 1` elsewhere.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Algo, FactorModel};
use crate::dataset::InteractionMatrix;
use crate::nn::{randn, Mat};
use crate::{stream_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsConfig {
    pub factors: usize,
    pub reg: f64,
    pub alpha: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self {
            factors: 64,
            reg: 0.01,
            alpha: 40.0,
            iters: 15,
            seed: 0,
        }
    }
}

/// Objective after every half-sweep (users solved, then items solved).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlsTrace {
    pub objective: Vec<f64>,
}

struct Entries {
    by_user: Vec<Vec<(usize, f64)>>,
    by_item: Vec<Vec<(usize, f64)>>,
}

fn confidences(x: &InteractionMatrix, weights: Option<&Mat>, alpha: f64) -> Result<Entries> {
    if let Some(w) = weights {
        if w.dim() != (x.n_users(), x.n_items()) {
            return Err(Error::Shape(format!("weights {:?} for a {}x{} matrix", w.dim(), x.n_users(), x.n_items())));
        }
    }
    let mut by_user = vec![Vec::new(); x.n_users()];
    let mut by_item = vec![Vec::new(); x.n_items()];
    for (u, i) in x.iter() {
        let w = weights.map_or(1.0, |w| w[[u, i]]);
        let c = 1.0 + alpha * w;
        by_user[u].push((i, c));
        by_item[i].push((u, c));
    }
    Ok(Entries { by_user, by_item })
}

/// Columns of `fixed` are the other side's factors.
fn solve_side(fixed: &DMatrix<f64>, rows: &[Vec<(usize, f64)>], reg: f64, out: &mut DMatrix<f64>) {
    let f = fixed.nrows();
    let gram = fixed * fixed.transpose();
    for (r, entries) in rows.iter().enumerate() {
        let mut a = gram.clone();
        let mut b = DVector::zeros(f);
        for &(j, c) in entries {
            let y = fixed.column(j);
            a.ger(c - 1.0, &y, &y, 1.0);
            b.axpy(c, &y, 1.0);
        }
        for k in 0..f {
            a[(k, k)] += reg;
        }
        let x = a.cholesky().expect("ridge system is positive definite").solve(&b);
        out.set_column(r, &x);
    }
}

fn objective_of(users: &DMatrix<f64>, items: &DMatrix<f64>, entries: &Entries, reg: f64) -> f64 {
    let gram = items * items.transpose();
    let mut total = 0.0;
    for (u, row) in entries.by_user.iter().enumerate() {
        let x = users.column(u);
        total += (x.transpose() * &gram * x)[(0, 0)];
        for &(i, c) in row {
            let pred = x.dot(&items.column(i));
            total += c * (1.0 - pred).powi(2) - pred * pred;
        }
    }
    total + reg * (users.norm_squared() + items.norm_squared())
}

/// Confidence-weighted squared error plus ridge penalty of a fitted model.
pub fn als_objective(model: &FactorModel, x: &InteractionMatrix, weights: Option<&Mat>, cfg: &AlsConfig) -> Result<f64> {
    let entries = confidences(x, weights, cfg.alpha)?;
    let (u, i) = (to_columns(&model.users), to_columns(&model.items));
    Ok(objective_of(&u, &i, &entries, cfg.reg))
}

fn to_columns(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.ncols(), m.nrows(), |r, c| m[[c, r]])
}

fn to_rows(m: &DMatrix<f64>) -> Mat {
    Array2::from_shape_fn((m.ncols(), m.nrows()), |(r, c)| m[(c, r)])
}

/// Alternating ridge solves, users first. Factors start from `N(0, 0.1^2)`.
pub fn als_fit(x: &InteractionMatrix, weights: Option<&Mat>, cfg: &AlsConfig) -> Result<(FactorModel, AlsTrace)> {
    if cfg.factors == 0 {
        return Err(Error::InvalidArgument("ALS needs at least one factor".into()));
    }
    if !(cfg.reg > 0.0) {
        return Err(Error::InvalidArgument("ALS regularization must be positive".into()));
    }
    let entries = confidences(x, weights, cfg.alpha)?;
    let mut rng = stream_rng(cfg.seed, 0xa15);
    let mut users = to_columns(&randn(x.n_users(), cfg.factors, 0.1, &mut rng));
    let mut items = to_columns(&randn(x.n_items(), cfg.factors, 0.1, &mut rng));
    let mut trace = AlsTrace::default();
    for _ in 0..cfg.iters {
        solve_side(&items, &entries.by_user, cfg.reg, &mut users);
        trace.objective.push(objective_of(&users, &items, &entries, cfg.reg));
        solve_side(&users, &entries.by_item, cfg.reg, &mut items);
        trace.objective.push(objective_of(&users, &items, &entries, cfg.reg));
    }
    Ok((
        FactorModel {
            algo: Algo::Als,
            users: to_rows(&users),
            items: to_rows(&items),
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recommenders::Scorer;
    use ndarray::array;
    use rand::Rng;

    fn random_matrix(users: usize, items: usize, p: f64, seed: u64) -> InteractionMatrix {
        let mut rng = stream_rng(seed, 2);
        let rows = (0..users)
            .map(|_| (0..items).filter(|_| rng.random::<f64>() < p).collect())
            .collect();
        InteractionMatrix::from_rows(items, rows).unwrap()
    }

    #[test]
    fn rank_one_matrix_orders_users() {
        let x = InteractionMatrix::from_rows(2, vec![vec![0, 1], vec![]]).unwrap();
        let cfg = AlsConfig {
            factors: 1,
            iters: 10,
            ..AlsConfig::default()
        };
        let (m, _) = als_fit(&x, None, &cfg).unwrap();
        let s = m.score_matrix();
        assert!(s[[0, 0]] > s[[1, 0]] && s[[0, 1]] > s[[1, 1]], "{s:?}");
    }

    #[test]
    fn zero_iterations_return_seeded_factors() {
        let x = random_matrix(5, 4, 0.4, 1);
        let cfg = AlsConfig {
            factors: 3,
            iters: 0,
            seed: 9,
            ..AlsConfig::default()
        };
        let (m, trace) = als_fit(&x, None, &cfg).unwrap();
        let mut rng = stream_rng(9, 0xa15);
        assert_eq!(m.users, randn(5, 3, 0.1, &mut rng));
        assert_eq!(m.items, randn(4, 3, 0.1, &mut rng));
        assert!(trace.objective.is_empty());
        assert!(als_fit(&x, None, &AlsConfig { reg: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn objective_never_increases_between_half_sweeps() {
        for seed in 0..5 {
            let x = random_matrix(30, 25, 0.15, seed);
            let cfg = AlsConfig {
                factors: 6,
                iters: 8,
                seed,
                ..AlsConfig::default()
            };
            let (m, trace) = als_fit(&x, None, &cfg).unwrap();
            for w in trace.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-10), "{:?}", trace.objective);
            }
            let recomputed = als_objective(&m, &x, None, &cfg).unwrap();
            assert!((recomputed - trace.objective.last().unwrap()).abs() < 1e-8 * recomputed);
        }
    }

    #[test]
    fn objective_matches_dense_definition() {
        let x = InteractionMatrix::from_rows(3, vec![vec![0, 2], vec![1]]).unwrap();
        let w = array![[1.0, 0.0, 0.5], [0.0, 0.25, 0.0]];
        let m = FactorModel {
            algo: Algo::Als,
            users: array![[0.3, -0.2], [0.1, 0.4]],
            items: array![[0.5, 0.1], [-0.3, 0.2], [0.2, 0.2]],
        };
        let cfg = AlsConfig::default();
        let pred = m.score_matrix();
        let mut want = 0.0;
        for u in 0..2 {
            for i in 0..3 {
                let (p, c) = if x.contains(u, i) { (1.0, 1.0 + cfg.alpha * w[[u, i]]) } else { (0.0, 1.0) };
                want += c * (p - pred[[u, i]]).powi(2);
            }
        }
        want += cfg.reg * (m.users.mapv(|v| v * v).sum() + m.items.mapv(|v| v * v).sum());
        let got = als_objective(&m, &x, Some(&w), &cfg).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
