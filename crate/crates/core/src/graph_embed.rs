//! LightGCN propagation over the bipartite user-item graph and BPR
//! pretraining of the initial node embeddings.
//!
//! Node order is users first (`0..M`), then items (`M..M+N`).

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionMatrix;
use crate::error::check_finite;
use crate::nn::{randn, sigmoid_scalar, softplus, Adam, Mat};
use crate::{stream_rng, Error, Result};

/// Embedding table for all `M + N` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    pub n_users: usize,
    pub n_items: usize,
    pub matrix: Mat,
}

impl NodeEmbeddings {
    pub fn new(n_users: usize, n_items: usize, matrix: Mat) -> Result<Self> {
        if matrix.nrows() != n_users + n_items {
            return Err(Error::Shape(format!(
                "{} embedding rows for {} nodes",
                matrix.nrows(),
                n_users + n_items
            )));
        }
        Ok(Self {
            n_users,
            n_items,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn user(&self, u: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(u)
    }

    pub fn item(&self, i: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(self.n_users + i)
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        self.user(u).dot(&self.item(i))
    }
}

/// Symmetric-normalized adjacency of the bipartite graph in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdjacency {
    n_nodes: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    pub self_loops: bool,
}

impl NormAdjacency {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let span = self.indptr[row]..self.indptr[row + 1];
        match self.indices[span.clone()].binary_search(&col) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// Row `r` as (column, value) pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Mat {
        let mut d = Array2::zeros((self.n_nodes, self.n_nodes));
        for r in 0..self.n_nodes {
            for (c, v) in self.row(r) {
                d[[r, c]] = v;
            }
        }
        d
    }

    /// Sparse-dense product `A * h`.
    pub fn matmul(&self, h: &Mat) -> Mat {
        assert_eq!(h.nrows(), self.n_nodes, "adjacency/embedding row mismatch");
        let mut out = Array2::zeros(h.raw_dim());
        for (r, mut out_row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &h.row(c));
            }
        }
        out
    }

    /// `A^layers * h`.
    pub fn matmul_pow(&self, h: &Mat, layers: usize) -> Mat {
        let mut cur = h.clone();
        for _ in 0..layers {
            cur = self.matmul(&cur);
        }
        cur
    }
}

/// `D^-1/2 A D^-1/2` for the bipartite graph of `x`, optionally with the
/// identity added before normalization.
pub fn build_norm_adjacency(x: &InteractionMatrix, self_loops: bool) -> NormAdjacency {
    let m = x.n_users();
    let n_nodes = m + x.n_items();
    let extra = usize::from(self_loops);
    let mut deg: Vec<usize> = x.user_degrees();
    deg.extend(x.item_degrees());
    let deg: Vec<f64> = deg.iter().map(|&d| (d + extra) as f64).collect();

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for (u, i) in x.iter() {
        neighbors[u].push(m + i);
        neighbors[m + i].push(u);
    }
    let mut indptr = Vec::with_capacity(n_nodes + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for (r, nb) in neighbors.iter_mut().enumerate() {
        if self_loops {
            nb.push(r);
        }
        nb.sort_unstable();
        for &c in nb.iter() {
            indices.push(c);
            values.push(1.0 / (deg[r] * deg[c]).sqrt());
        }
        indptr.push(indices.len());
    }
    NormAdjacency {
        n_nodes,
        indptr,
        indices,
        values,
        self_loops,
    }
}

/// Layer mean `(1 / (K + 1)) * sum_{k=0..K} A^k E0`.
pub fn propagate(e0: &NodeEmbeddings, adj: &NormAdjacency, layers: usize) -> NodeEmbeddings {
    NodeEmbeddings {
        n_users: e0.n_users,
        n_items: e0.n_items,
        matrix: propagate_matrix(&e0.matrix, adj, layers),
    }
}

pub(crate) fn propagate_matrix(e0: &Mat, adj: &NormAdjacency, layers: usize) -> Mat {
    let mut acc = e0.clone();
    let mut cur = e0.clone();
    for _ in 0..layers {
        cur = adj.matmul(&cur);
        acc += &cur;
    }
    acc / (layers + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub dim: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the base table, per node.
    pub reg: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            epochs: 50,
            lr: 1e-3,
            reg: 1e-4,
            batch: 2048,
            seed: 0,
        }
    }
}

/// Trained base table plus the mean BPR loss of every epoch.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub base: NodeEmbeddings,
    pub losses: Vec<f64>,
}

impl Pretrained {
    /// Propagated embeddings used as the injection encoder input.
    pub fn propagated(&self, adj: &NormAdjacency, layers: usize) -> NodeEmbeddings {
        propagate(&self.base, adj, layers)
    }
}

/// Pretrains a LightGCN embedder with the BPR loss: one uniform negative
/// per observed (user, item) pair, scores are dot products of propagated
/// embeddings.
pub fn pretrain(x: &InteractionMatrix, cfg: &EmbedConfig) -> Result<Pretrained> {
    if cfg.dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
    }
    let (m, n) = (x.n_users(), x.n_items());
    let mut rng = stream_rng(cfg.seed, 0xe3b);
    let mut table = randn(m + n, cfg.dim, 0.1, &mut rng);
    let adj = build_norm_adjacency(x, false);
    let mut opt = Adam::new(cfg.lr);
    let mut pairs: Vec<(usize, usize)> = x.iter().collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch.max(1);

    for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in pairs.chunks(batch) {
            let triples: Vec<(usize, usize, usize)> = chunk
                .iter()
                .filter_map(|&(u, i)| sample_negative(x, u, &mut rng).map(|j| (u, i, j)))
                .collect();
            if triples.is_empty() {
                continue;
            }
            let (loss, grad) = bpr_loss_and_grad(&table, &adj, cfg, m, &triples);
            epoch_loss += loss * triples.len() as f64;
            opt.step(vec![&mut table], &[grad]);
        }
        let mean = epoch_loss / pairs.len().max(1) as f64;
        check_finite("graph_embed", epoch, mean)?;
        log::debug!("embedder epoch {epoch}: bpr {mean:.5}");
        losses.push(mean);
    }
    Ok(Pretrained {
        base: NodeEmbeddings::new(m, n, table)?,
        losses,
    })
}

fn sample_negative<R: Rng>(x: &InteractionMatrix, u: usize, rng: &mut R) -> Option<usize> {
    let n = x.n_items();
    if x.row(u).len() >= n {
        return None;
    }
    loop {
        let j = rng.random_range(0..n);
        if !x.contains(u, j) {
            return Some(j);
        }
    }
}

/// Mean BPR loss over `triples` (user, positive, negative) and its gradient
/// with respect to the base table.
pub(crate) fn bpr_loss_and_grad(
    table: &Mat,
    adj: &NormAdjacency,
    cfg: &EmbedConfig,
    n_users: usize,
    triples: &[(usize, usize, usize)],
) -> (f64, Mat) {
    let emb = propagate_matrix(table, adj, cfg.layers);
    let mut g_emb = Array2::zeros(emb.raw_dim());
    let scale = 1.0 / triples.len() as f64;
    let mut loss = 0.0;
    for &(u, i, j) in triples {
        let (ui, uj) = (n_users + i, n_users + j);
        let diff = &emb.row(ui) - &emb.row(uj);
        let x = emb.row(u).dot(&diff);
        loss += softplus(-x);
        let g = -sigmoid_scalar(-x) * scale;
        g_emb.row_mut(u).scaled_add(g, &diff);
        let eu = emb.row(u).to_owned();
        g_emb.row_mut(ui).scaled_add(g, &eu);
        g_emb.row_mut(uj).scaled_add(-g, &eu);
    }
    let n_nodes = table.nrows() as f64;
    loss = loss * scale + 0.5 * cfg.reg * table.mapv(|v| v * v).sum() / n_nodes;
    // The layer-mean operator is symmetric, so its transpose is itself.
    let mut grad = propagate_matrix(&g_emb, adj, cfg.layers);
    grad.scaled_add(cfg.reg / n_nodes, table);
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numerical_gradient, Parameters};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn single_edge_weights() {
        let x = InteractionMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        let plain = build_norm_adjacency(&x, false);
        assert_eq!(plain.get(0, 1), 1.0);
        assert_eq!(plain.get(0, 0), 0.0);
        let looped = build_norm_adjacency(&x, true);
        assert_eq!(looped.get(0, 1), 0.5);
        assert_eq!(looped.get(1, 0), 0.5);
        assert_eq!(looped.get(0, 0), 0.5);
    }

    #[test]
    fn star_user_weights() {
        let x = InteractionMatrix::from_pairs(1, 4, (0..4).map(|i| (0, i))).unwrap();
        let a = build_norm_adjacency(&x, false);
        for i in 0..4 {
            assert_eq!(a.get(0, 1 + i), 0.5);
        }
    }

    #[test]
    fn isolated_node_gets_zero_row() {
        let x = InteractionMatrix::from_pairs(2, 1, [(0, 0)]).unwrap();
        let a = build_norm_adjacency(&x, false);
        assert_eq!(a.row(1).count(), 0);
        let d = a.to_dense();
        assert_eq!(d, d.t());
    }

    #[test]
    fn propagate_two_nodes_one_layer() {
        let x = InteractionMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        let a = build_norm_adjacency(&x, false);
        let e0 = NodeEmbeddings::new(1, 1, array![[1.0, 3.0], [5.0, -1.0]]).unwrap();
        let out = propagate(&e0, &a, 1);
        assert_eq!(out.matrix, array![[3.0, 1.0], [3.0, 1.0]]);
        assert_eq!(propagate(&e0, &a, 0), e0);
    }

    #[test]
    fn propagate_matches_dense_powers() {
        // users {0, 1}, item 0: the path u0 - i0 - u1
        let x = InteractionMatrix::from_pairs(2, 1, [(0, 0), (1, 0)]).unwrap();
        let a = build_norm_adjacency(&x, false);
        let dense = a.to_dense();
        let e0 = randn(3, 4, 1.0, &mut stream_rng(4, 0));
        let a2 = dense.dot(&dense);
        let expected = (&e0 + &dense.dot(&e0) + &a2.dot(&e0)) / 3.0;
        let got = propagate_matrix(&e0, &a, 2);
        for (g, e) in got.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn propagate_is_linear() {
        let x = InteractionMatrix::from_pairs(3, 2, [(0, 0), (1, 0), (1, 1), (2, 1)]).unwrap();
        let a = build_norm_adjacency(&x, true);
        let mut rng = stream_rng(5, 0);
        let e1 = randn(5, 3, 1.0, &mut rng);
        let e2 = randn(5, 3, 1.0, &mut rng);
        let lhs = propagate_matrix(&(&e1 * 2.0 - &e2 * 0.5), &a, 3);
        let rhs = propagate_matrix(&e1, &a, 3) * 2.0 - propagate_matrix(&e2, &a, 3) * 0.5;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert_abs_diff_eq!(l, r, epsilon = 1e-12);
        }
    }

    struct Table(Mat);
    impl Parameters for Table {
        fn params(&self) -> Vec<&Mat> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Mat> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let x = InteractionMatrix::from_pairs(2, 3, [(0, 0), (0, 1), (1, 2)]).unwrap();
        let a = build_norm_adjacency(&x, false);
        let cfg = EmbedConfig {
            dim: 2,
            reg: 0.1,
            ..EmbedConfig::default()
        };
        let triples = [(0, 0, 2), (0, 1, 2), (1, 2, 0)];
        let mut t = Table(randn(5, 2, 0.5, &mut stream_rng(6, 0)));
        let (_, analytic) = bpr_loss_and_grad(&t.0, &a, &cfg, 2, &triples);
        let numeric =
            numerical_gradient(&mut t, 1e-5, |t| bpr_loss_and_grad(&t.0, &a, &cfg, 2, &triples).0);
        assert!(max_relative_error(&[analytic], &numeric, 1e-6) < 1e-5);
    }

    #[test]
    fn pretrain_learns_disjoint_preferences() {
        let x = InteractionMatrix::from_pairs(2, 2, [(0, 0), (1, 1)]).unwrap();
        let cfg = EmbedConfig {
            dim: 8,
            epochs: 200,
            lr: 1e-2,
            ..EmbedConfig::default()
        };
        let trained = pretrain(&x, &cfg).unwrap();
        let emb = trained.propagated(&build_norm_adjacency(&x, false), cfg.layers);
        assert!(emb.score(0, 0) > emb.score(0, 1));
        assert!(emb.score(1, 1) > emb.score(1, 0));
    }

    #[test]
    fn pretrain_zero_epochs_and_determinism() {
        let x = InteractionMatrix::from_pairs(3, 3, [(0, 0), (1, 1), (2, 2), (0, 1)]).unwrap();
        let cfg = EmbedConfig {
            epochs: 0,
            dim: 4,
            ..EmbedConfig::default()
        };
        let init = pretrain(&x, &cfg).unwrap();
        let expected = randn(6, 4, 0.1, &mut stream_rng(cfg.seed, 0xe3b));
        assert_eq!(init.base.matrix, expected);
        let cfg = EmbedConfig { epochs: 5, ..cfg };
        assert_eq!(pretrain(&x, &cfg).unwrap().base, pretrain(&x, &cfg).unwrap().base);
    }

    #[test]
    fn bpr_loss_falls_over_training() {
        let rows: Vec<Vec<usize>> = (0..30).map(|u| vec![u % 10, (u + 3) % 10, (u * 7) % 10]).collect();
        let x = InteractionMatrix::from_rows(10, rows).unwrap();
        let cfg = EmbedConfig {
            dim: 8,
            epochs: 40,
            lr: 5e-3,
            batch: 16,
            ..EmbedConfig::default()
        };
        let losses = pretrain(&x, &cfg).unwrap().losses;
        let first: f64 = losses[..10].iter().sum();
        let last: f64 = losses[30..].iter().sum();
        assert!(last < first, "{first} -> {last}");
    }
}
