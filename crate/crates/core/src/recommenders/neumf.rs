//! Neural matrix factorization: a GMF branch and an MLP branch over
//! separate embeddings, fused by a final linear layer into one logit.

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::dataset::InteractionMatrix;
use crate::error::check_finite;
use crate::nn::{randn, relu, relu_backward, sigmoid_scalar, softplus, Adam, Linear, Mat, Parameters};
use crate::{stream_rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuMfConfig {
    pub emb_dim: usize,
    pub mlp_widths: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for NeuMfConfig {
    fn default() -> Self {
        Self {
            emb_dim: 32,
            mlp_widths: vec![64, 32, 16],
            lr: 1e-3,
            epochs: 20,
            negatives: 4,
            batch: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuMfModel {
    pub gmf_user: Mat,
    pub gmf_item: Mat,
    pub mlp_user: Mat,
    pub mlp_item: Mat,
    pub layers: Vec<Linear>,
    pub fusion: Linear,
}

struct Pass {
    gu: Mat,
    gi: Mat,
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    joint: Mat,
    logits: Vec<f64>,
}

impl NeuMfModel {
    pub fn new<R: Rng>(n_users: usize, n_items: usize, cfg: &NeuMfConfig, rng: &mut R) -> Self {
        let e = cfg.emb_dim;
        let mut layers = Vec::with_capacity(cfg.mlp_widths.len());
        let mut width = 2 * e;
        for &w in &cfg.mlp_widths {
            layers.push(Linear::new(width, w, rng));
            width = w;
        }
        Self {
            gmf_user: randn(n_users, e, 0.1, rng),
            gmf_item: randn(n_items, e, 0.1, rng),
            mlp_user: randn(n_users, e, 0.1, rng),
            mlp_item: randn(n_items, e, 0.1, rng),
            layers,
            fusion: Linear::new(e + width, 1, rng),
        }
    }

    fn forward(&self, users: &[usize], items: &[usize]) -> Pass {
        let gu = self.gmf_user.select(Axis(0), users);
        let gi = self.gmf_item.select(Axis(0), items);
        let gmf = &gu * &gi;
        let mut h = concatenate(
            Axis(1),
            &[self.mlp_user.select(Axis(0), users).view(), self.mlp_item.select(Axis(0), items).view()],
        )
        .expect("equal batch sizes");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let p = layer.forward(&h);
            inputs.push(std::mem::replace(&mut h, relu(&p)));
            pre.push(p);
        }
        let joint = concatenate(Axis(1), &[gmf.view(), h.view()]).expect("equal batch sizes");
        let logits = self.fusion.forward(&joint).column(0).to_vec();
        Pass {
            gu,
            gi,
            inputs,
            pre,
            joint,
            logits,
        }
    }

    /// Mean BCE over the batch and gradients in `params()` order.
    fn loss_and_grads(&self, users: &[usize], items: &[usize], labels: &[f64]) -> (f64, Vec<Mat>) {
        let pass = self.forward(users, items);
        let n = users.len().max(1) as f64;
        let mut loss = 0.0;
        let mut g_logit = Array2::zeros((users.len(), 1));
        for (k, (&l, &y)) in pass.logits.iter().zip(labels).enumerate() {
            loss += softplus(l) - y * l;
            g_logit[[k, 0]] = (sigmoid_scalar(l) - y) / n;
        }
        let mut g_fusion = self.fusion.zero_grad();
        let g_joint = self.fusion.backward(&pass.joint, &g_logit, &mut g_fusion);
        let e = self.gmf_user.ncols();
        let g_gmf = g_joint.slice(s![.., ..e]).to_owned();
        let mut g_h = g_joint.slice(s![.., e..]).to_owned();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let mut g = layer.zero_grad();
            g_h = layer.backward(&pass.inputs[k], &relu_backward(&pass.pre[k], &g_h), &mut g);
            layer_grads.push(g);
        }
        layer_grads.reverse();

        let mut g_gmf_user = Array2::zeros(self.gmf_user.raw_dim());
        let mut g_gmf_item = Array2::zeros(self.gmf_item.raw_dim());
        let mut g_mlp_user = Array2::zeros(self.mlp_user.raw_dim());
        let mut g_mlp_item = Array2::zeros(self.mlp_item.raw_dim());
        let g_gu = &g_gmf * &pass.gi;
        let g_gi = &g_gmf * &pass.gu;
        for (k, (&u, &i)) in users.iter().zip(items).enumerate() {
            let mut r = g_gmf_user.row_mut(u);
            r += &g_gu.row(k);
            let mut r = g_gmf_item.row_mut(i);
            r += &g_gi.row(k);
            let mut r = g_mlp_user.row_mut(u);
            r += &g_h.slice(s![k, ..e]);
            let mut r = g_mlp_item.row_mut(i);
            r += &g_h.slice(s![k, e..]);
        }
        let mut grads = vec![g_gmf_user, g_gmf_item, g_mlp_user, g_mlp_item];
        for g in layer_grads {
            grads.extend(g.into_vec());
        }
        grads.extend(g_fusion.into_vec());
        (loss / n, grads)
    }
}

impl Parameters for NeuMfModel {
    fn params(&self) -> Vec<&Mat> {
        let mut v = vec![&self.gmf_user, &self.gmf_item, &self.mlp_user, &self.mlp_item];
        for l in &self.layers {
            v.extend([&l.w, &l.b]);
        }
        v.extend([&self.fusion.w, &self.fusion.b]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.gmf_user, &mut self.gmf_item, &mut self.mlp_user, &mut self.mlp_item];
        for l in &mut self.layers {
            v.extend([&mut l.w, &mut l.b]);
        }
        v.extend([&mut self.fusion.w, &mut self.fusion.b]);
        v
    }
}

impl Scorer for NeuMfModel {
    fn n_users(&self) -> usize {
        self.gmf_user.nrows()
    }

    fn n_items(&self) -> usize {
        self.gmf_item.nrows()
    }

    fn user_scores(&self, user: usize) -> Vec<f64> {
        let items: Vec<usize> = (0..self.n_items()).collect();
        self.forward(&vec![user; items.len()], &items).logits
    }
}

/// BCE training on every positive plus `negatives` uniformly drawn
/// unobserved items per positive, resampled each epoch.
pub fn neumf_fit(x: &InteractionMatrix, cfg: &NeuMfConfig) -> Result<(NeuMfModel, Vec<f64>)> {
    if x.nnz() == 0 {
        return Err(Error::InvalidArgument("NeuMF needs at least one positive".into()));
    }
    let mut rng = stream_rng(cfg.seed, 0x4e0);
    let mut model = NeuMfModel::new(x.n_users(), x.n_items(), cfg, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let positives: Vec<(usize, usize)> = x.iter().collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut examples: Vec<(usize, usize, f64)> = Vec::with_capacity(positives.len() * (1 + cfg.negatives));
        for &(u, i) in &positives {
            examples.push((u, i, 1.0));
            if x.row(u).len() == x.n_items() {
                continue;
            }
            for _ in 0..cfg.negatives {
                let j = loop {
                    let j = rng.random_range(0..x.n_items());
                    if !x.contains(u, j) {
                        break j;
                    }
                };
                examples.push((u, j, 0.0));
            }
        }
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in examples.chunks(cfg.batch.max(1)) {
            let us: Vec<usize> = chunk.iter().map(|e| e.0).collect();
            let is: Vec<usize> = chunk.iter().map(|e| e.1).collect();
            let ys: Vec<f64> = chunk.iter().map(|e| e.2).collect();
            let (loss, grads) = model.loss_and_grads(&us, &is, &ys);
            total += loss * chunk.len() as f64;
            opt.step(model.params_mut(), &grads);
        }
        let mean = total / examples.len() as f64;
        check_finite("neumf", epoch, mean)?;
        losses.push(mean);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_relative_error, numerical_gradient};

    #[test]
    fn disjoint_preferences_are_ranked() {
        let x = InteractionMatrix::from_rows(2, vec![vec![0], vec![1]]).unwrap();
        let cfg = NeuMfConfig {
            emb_dim: 4,
            mlp_widths: vec![8, 4],
            lr: 1e-2,
            epochs: 200,
            negatives: 1,
            batch: 4,
            seed: 1,
        };
        let (m, losses) = neumf_fit(&x, &cfg).unwrap();
        assert!(m.user_scores(0)[0] > m.user_scores(0)[1]);
        assert!(m.user_scores(1)[1] > m.user_scores(1)[0]);
        let head = losses[..10].iter().sum::<f64>();
        let tail = losses[losses.len() - 10..].iter().sum::<f64>();
        assert!(tail < head);
    }

    #[test]
    fn zero_epochs_returns_seeded_init() {
        let x = InteractionMatrix::from_rows(3, vec![vec![0, 2], vec![1]]).unwrap();
        let cfg = NeuMfConfig {
            epochs: 0,
            ..NeuMfConfig::default()
        };
        let (m, _) = neumf_fit(&x, &cfg).unwrap();
        assert_eq!(m, NeuMfModel::new(2, 3, &cfg, &mut stream_rng(0, 0x4e0)));
        assert!(neumf_fit(&InteractionMatrix::empty(2, 2), &cfg).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = NeuMfConfig {
            emb_dim: 2,
            mlp_widths: vec![2],
            ..NeuMfConfig::default()
        };
        let mut m = NeuMfModel::new(2, 2, &cfg, &mut stream_rng(3, 0));
        for p in m.params_mut() {
            *p = randn(p.nrows(), p.ncols(), 0.7, &mut stream_rng(p.len() as u64, 1));
        }
        let (us, is, ys) = ([0, 1, 1], [1, 0, 1], [1.0, 0.0, 1.0]);
        let (_, analytic) = m.loss_and_grads(&us, &is, &ys);
        let numeric = numerical_gradient(&mut m, 1e-5, |m| m.loss_and_grads(&us, &is, &ys).0);
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-4);
    }
}
