//! Injection encoder-decoder over graph nodes.
//!
//! The encoder maps each node's pretrained embedding, a positional code and
//! its propagated neighborhood into a Gaussian latent. The decoder maps a
//! latent back to node features and, for items, to a length-`M` vector of
//! user interaction probabilities.

use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::InteractionMatrix;
use crate::error::check_finite;
use crate::graph_embed::{NodeEmbeddings, NormAdjacency};
use crate::nn::{
    gaussian_kl, randn, relu, relu_backward, sigmoid, sinusoidal_table, Adam, Linear, Mat,
    Parameters,
};
use crate::{stream_rng, Error, Result};

/// Node class label used to condition the latent diffusion model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeClass {
    User = 0,
    Item = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub hidden: usize,
    pub joint: usize,
    pub latent: usize,
    pub decoder_hidden: usize,
    pub feature_split: usize,
    pub map_split: usize,
    /// Propagation layers of the encoder's neighborhood aggregation.
    pub layers: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lambda_feat: f64,
    pub lambda_map: f64,
    pub beta_kl: f64,
    pub learned_positional: bool,
    pub seed: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            joint: 128,
            latent: 64,
            decoder_hidden: 128,
            feature_split: 64,
            map_split: 64,
            layers: 2,
            lr: 2e-4,
            epochs: 30_000,
            lambda_feat: 1.0,
            lambda_map: 1.0,
            beta_kl: 0.2,
            learned_positional: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionEncoder {
    pub feat: Linear,
    pub pos: Linear,
    pub joint: Linear,
    pub mu: Linear,
    pub logvar: Linear,
    /// Positional table, one row per node.
    pub positional: Mat,
    pub learned_positional: bool,
}

/// Intermediate activations of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pre_feat: Mat,
    pub h0: Mat,
    pub h_neigh: Mat,
    h_joint: Mat,
    pre_z: Mat,
    h_z: Mat,
    pub mu: Mat,
    pub logvar: Mat,
}

impl InjectionEncoder {
    pub fn new<R: rand::Rng>(
        n_nodes: usize,
        input_dim: usize,
        cfg: &InjectionConfig,
        rng: &mut R,
    ) -> Self {
        let mut logvar = Linear::new(cfg.joint, cfg.latent, rng);
        logvar.w *= 0.1;
        Self {
            feat: Linear::new(input_dim, cfg.hidden, rng),
            pos: Linear::new(input_dim, cfg.hidden, rng),
            joint: Linear::new(2 * cfg.hidden, cfg.joint, rng),
            mu: Linear::new(cfg.joint, cfg.latent, rng),
            logvar,
            positional: sinusoidal_table(n_nodes, input_dim),
            learned_positional: cfg.learned_positional,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.output_dim()
    }

    pub fn forward(&self, z_in: &Mat, adj: &NormAdjacency, layers: usize) -> Result<EncoderPass> {
        if z_in.nrows() != adj.n_nodes() || z_in.nrows() != self.positional.nrows() {
            return Err(Error::Shape(format!(
                "{} input rows, {} graph nodes, {} positional rows",
                z_in.nrows(),
                adj.n_nodes(),
                self.positional.nrows()
            )));
        }
        if z_in.ncols() != self.feat.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but encoder expects {}",
                z_in.ncols(),
                self.feat.input_dim()
            )));
        }
        let pre_feat = self.feat.forward(z_in);
        let h0 = relu(&pre_feat);
        let h_input = &h0 + &self.pos.forward(&self.positional);
        let h_neigh = adj.matmul_pow(&h_input, layers);
        let h_joint = concatenate(Axis(1), &[h0.view(), h_neigh.view()]).expect("same row count");
        let pre_z = self.joint.forward(&h_joint);
        let h_z = relu(&pre_z);
        let mu = self.mu.forward(&h_z);
        let logvar = self.logvar.forward(&h_z);
        Ok(EncoderPass {
            pre_feat,
            h0,
            h_neigh,
            h_joint,
            pre_z,
            h_z,
            mu,
            logvar,
        })
    }
}

/// Per-node Gaussian posterior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodes {
    pub mu: Mat,
    pub logvar: Mat,
}

/// Latent codes (mean and log-variance only) for every node.
pub fn encode(
    z_in: &NodeEmbeddings,
    adj: &NormAdjacency,
    encoder: &InjectionEncoder,
    layers: usize,
) -> Result<LatentCodes> {
    let pass = encoder.forward(&z_in.matrix, adj, layers)?;
    Ok(LatentCodes {
        mu: pass.mu,
        logvar: pass.logvar,
    })
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize(mu: &Mat, logvar: &Mat, eps: &Mat) -> Result<Mat> {
    if mu.dim() != logvar.dim() || mu.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "mu {:?}, logvar {:?}, eps {:?}",
            mu.dim(),
            logvar.dim(),
            eps.dim()
        )));
    }
    let mut out = mu.clone();
    ndarray::Zip::from(&mut out)
        .and(logvar)
        .and(eps)
        .for_each(|o, &lv, &e| *o += (0.5 * lv).exp() * e);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionDecoder {
    pub expand1: Linear,
    pub expand2: Linear,
    pub feature_split: usize,
    pub feature_head: Linear,
    pub map_head: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderPass {
    pre1: Mat,
    h1: Mat,
    pre2: Mat,
    expanded: Mat,
    /// Reconstructed node features in (0, 1).
    pub features: Mat,
    /// Pre-sigmoid interaction scores, one column per user.
    pub logits: Mat,
}

impl DecoderPass {
    pub fn probabilities(&self) -> Mat {
        sigmoid(&self.logits)
    }
}

impl InjectionDecoder {
    pub fn new<R: rand::Rng>(n_users: usize, feature_dim: usize, cfg: &InjectionConfig, rng: &mut R) -> Self {
        let mut map_head = Linear::new(cfg.map_split, n_users, rng);
        map_head.w *= 0.1;
        Self {
            expand1: Linear::new(cfg.latent, cfg.decoder_hidden, rng),
            expand2: Linear::new(cfg.decoder_hidden, cfg.feature_split + cfg.map_split, rng),
            feature_split: cfg.feature_split,
            feature_head: Linear::new(cfg.feature_split, feature_dim, rng),
            map_head,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.expand1.input_dim()
    }

    pub fn n_users(&self) -> usize {
        self.map_head.output_dim()
    }

    fn trunk(&self, z: &Mat) -> (Mat, Mat, Mat, Mat) {
        let pre1 = self.expand1.forward(z);
        let h1 = relu(&pre1);
        let pre2 = self.expand2.forward(&h1);
        let expanded = relu(&pre2);
        (pre1, h1, pre2, expanded)
    }

    pub fn forward(&self, z: &Mat) -> Result<DecoderPass> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent width {} but decoder expects {}",
                z.ncols(),
                self.latent_dim()
            )));
        }
        let (pre1, h1, pre2, expanded) = self.trunk(z);
        let zf = expanded.slice(s![.., ..self.feature_split]).to_owned();
        let za = expanded.slice(s![.., self.feature_split..]).to_owned();
        let features = sigmoid(&self.feature_head.forward(&zf));
        let logits = self.map_head.forward(&za);
        Ok(DecoderPass {
            pre1,
            h1,
            pre2,
            expanded,
            features,
            logits,
        })
    }
}

/// Decodes a latent batch into (features, interaction probabilities).
pub fn decode(z: &Mat, decoder: &InjectionDecoder) -> Result<(Mat, Mat)> {
    let pass = decoder.forward(z)?;
    let probs = pass.probabilities();
    Ok((pass.features, probs))
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_mean(probs: &Mat, targets: &Mat) -> f64 {
    let mut total = 0.0;
    ndarray::Zip::from(probs).and(targets).for_each(|&p, &x| {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        total -= x * p.ln() + (1.0 - x) * (1.0 - p).ln();
    });
    total / probs.len().max(1) as f64
}

/// Mean over rows of the squared L2 distance.
pub fn feature_error(recon: &Mat, target: &Mat) -> f64 {
    let diff = recon - target;
    diff.mapv(|v| v * v).sum() / recon.nrows().max(1) as f64
}

/// `lambda_feat * feature_error + lambda_map * bce_mean`.
pub fn reconstruction_loss(
    feat_recon: &Mat,
    feat_target: &Mat,
    map_probs: &Mat,
    map_target: &Mat,
    lambda_feat: f64,
    lambda_map: f64,
) -> Result<f64> {
    if feat_recon.dim() != feat_target.dim() || map_probs.dim() != map_target.dim() {
        return Err(Error::Shape("reconstruction targets do not match outputs".into()));
    }
    let mut loss = lambda_feat * feature_error(feat_recon, feat_target);
    if lambda_map != 0.0 {
        loss += lambda_map * bce_mean(map_probs, map_target);
    }
    Ok(loss)
}

/// Encoder and decoder trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVae {
    pub n_users: usize,
    pub n_items: usize,
    pub layers: usize,
    pub encoder: InjectionEncoder,
    pub decoder: InjectionDecoder,
}

impl Parameters for InjectionVae {
    fn params(&self) -> Vec<&Mat> {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut v = vec![
            &e.feat.w, &e.feat.b, &e.pos.w, &e.pos.b, &e.joint.w, &e.joint.b, &e.mu.w, &e.mu.b,
            &e.logvar.w, &e.logvar.b,
        ];
        if e.learned_positional {
            v.push(&e.positional);
        }
        v.extend([
            &d.expand1.w, &d.expand1.b, &d.expand2.w, &d.expand2.b, &d.feature_head.w,
            &d.feature_head.b, &d.map_head.w, &d.map_head.b,
        ]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let e = &mut self.encoder;
        let d = &mut self.decoder;
        let mut v = vec![
            &mut e.feat.w, &mut e.feat.b, &mut e.pos.w, &mut e.pos.b, &mut e.joint.w,
            &mut e.joint.b, &mut e.mu.w, &mut e.mu.b, &mut e.logvar.w, &mut e.logvar.b,
        ];
        if e.learned_positional {
            v.push(&mut e.positional);
        }
        v.extend([
            &mut d.expand1.w, &mut d.expand1.b, &mut d.expand2.w, &mut d.expand2.b,
            &mut d.feature_head.w, &mut d.feature_head.b, &mut d.map_head.w, &mut d.map_head.b,
        ]);
        v
    }
}

/// Loss components of one training evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionLoss {
    pub feature: f64,
    pub map: f64,
    pub kl: f64,
    pub total: f64,
}

/// Training data for the injection model: inputs and reconstruction targets.
pub struct InjectionBatch<'a> {
    pub z_in: &'a Mat,
    pub adj: &'a NormAdjacency,
    /// Items x users: row `i` is item `i`'s column of the interaction matrix.
    pub map_target: &'a Mat,
    pub eps: &'a Mat,
}

impl InjectionVae {
    pub fn new(n_users: usize, n_items: usize, input_dim: usize, cfg: &InjectionConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, 0x1a7);
        let encoder = InjectionEncoder::new(n_users + n_items, input_dim, cfg, &mut rng);
        let decoder = InjectionDecoder::new(n_users, input_dim, cfg, &mut rng);
        Self {
            n_users,
            n_items,
            layers: cfg.layers,
            encoder,
            decoder,
        }
    }

    pub fn node_classes(&self) -> Vec<NodeClass> {
        (0..self.n_users + self.n_items)
            .map(|v| if v < self.n_users { NodeClass::User } else { NodeClass::Item })
            .collect()
    }

    /// Loss (reconstruction plus weighted KL) and gradients in
    /// [`Parameters::params`] order.
    pub fn loss_and_grads(&self, batch: &InjectionBatch<'_>, cfg: &InjectionConfig) -> Result<(InjectionLoss, Vec<Mat>)> {
        let enc = &self.encoder;
        let dec = &self.decoder;
        let m = self.n_users;
        let n_nodes = batch.z_in.nrows();
        let ep = enc.forward(batch.z_in, batch.adj, self.layers)?;
        let z = reparameterize(&ep.mu, &ep.logvar, batch.eps)?;
        let dp = dec.forward(&z)?;
        let item_logits = dp.logits.slice(s![m.., ..]).to_owned();
        if item_logits.dim() != batch.map_target.dim() {
            return Err(Error::Shape(format!(
                "map target {:?} vs item logits {:?}",
                batch.map_target.dim(),
                item_logits.dim()
            )));
        }
        let item_probs = sigmoid(&item_logits);
        let feature = feature_error(&dp.features, batch.z_in);
        let map = bce_mean(&item_probs, batch.map_target);
        let (kl, kl_mu, kl_lv) = gaussian_kl(&ep.mu, &ep.logvar);
        let total = cfg.lambda_feat * feature + cfg.lambda_map * map + cfg.beta_kl * kl;

        // decoder heads
        let mut g_feat_out = (&dp.features - batch.z_in) * (2.0 * cfg.lambda_feat / n_nodes as f64);
        g_feat_out.zip_mut_with(&dp.features, |g, &f| *g *= f * (1.0 - f));
        let split = dec.feature_split;
        let zf = dp.expanded.slice(s![.., ..split]).to_owned();
        let za_items = dp.expanded.slice(s![m.., split..]).to_owned();
        let mut g_fh = dec.feature_head.zero_grad();
        let g_zf = dec.feature_head.backward(&zf, &g_feat_out, &mut g_fh);
        let g_logits = (&item_probs - batch.map_target) * (cfg.lambda_map / item_probs.len().max(1) as f64);
        let mut g_mh = dec.map_head.zero_grad();
        let g_za_items = dec.map_head.backward(&za_items, &g_logits, &mut g_mh);
        let mut g_expanded = Array2::zeros(dp.expanded.raw_dim());
        g_expanded.slice_mut(s![.., ..split]).assign(&g_zf);
        g_expanded.slice_mut(s![m.., split..]).assign(&g_za_items);

        // decoder trunk
        let g_pre2 = relu_backward(&dp.pre2, &g_expanded);
        let mut g_e2 = dec.expand2.zero_grad();
        let g_h1 = dec.expand2.backward(&dp.h1, &g_pre2, &mut g_e2);
        let g_pre1 = relu_backward(&dp.pre1, &g_h1);
        let mut g_e1 = dec.expand1.zero_grad();
        let g_z = dec.expand1.backward(&z, &g_pre1, &mut g_e1);

        // reparameterization and KL
        let g_mu = &g_z + &(kl_mu * cfg.beta_kl);
        let mut g_lv = kl_lv * cfg.beta_kl;
        ndarray::Zip::from(&mut g_lv)
            .and(&g_z)
            .and(&ep.logvar)
            .and(batch.eps)
            .for_each(|g, &gz, &lv, &e| *g += gz * e * 0.5 * (0.5 * lv).exp());

        // encoder
        let mut g_mu_l = enc.mu.zero_grad();
        let mut g_hz = enc.mu.backward(&ep.h_z, &g_mu, &mut g_mu_l);
        let mut g_lv_l = enc.logvar.zero_grad();
        g_hz += &enc.logvar.backward(&ep.h_z, &g_lv, &mut g_lv_l);
        let g_pre_z = relu_backward(&ep.pre_z, &g_hz);
        let mut g_joint = enc.joint.zero_grad();
        let g_hj = enc.joint.backward(&ep.h_joint, &g_pre_z, &mut g_joint);
        let hidden = ep.h0.ncols();
        let g_neigh = g_hj.slice(s![.., hidden..]).to_owned();
        // A_norm is symmetric, so backprop through A^L is A^L again.
        let g_input = batch.adj.matmul_pow(&g_neigh, self.layers);
        let g_h0 = &g_hj.slice(s![.., ..hidden]) + &g_input;
        let mut g_pos = enc.pos.zero_grad();
        let g_positional = enc.pos.backward(&enc.positional, &g_input, &mut g_pos);
        let g_pre_feat = relu_backward(&ep.pre_feat, &g_h0);
        let mut g_feat = enc.feat.zero_grad();
        enc.feat.backward_params(batch.z_in, &g_pre_feat, &mut g_feat);

        let mut grads: Vec<Mat> = Vec::new();
        for g in [g_feat, g_pos, g_joint, g_mu_l, g_lv_l] {
            grads.extend(g.into_vec());
        }
        if enc.learned_positional {
            grads.push(g_positional);
        }
        for g in [g_e1, g_e2, g_fh, g_mh] {
            grads.extend(g.into_vec());
        }
        Ok((
            InjectionLoss {
                feature,
                map,
                kl,
                total,
            },
            grads,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new("injection_vae");
        ck.set_meta("n_users", self.n_users);
        ck.set_meta("n_items", self.n_items);
        ck.set_meta("layers", self.layers);
        ck.set_meta("feature_split", self.decoder.feature_split);
        ck.set_meta("learned_positional", self.encoder.learned_positional);
        let e = &self.encoder;
        let d = &self.decoder;
        let named: [(&str, &Linear); 9] = [
            ("enc.feat", &e.feat),
            ("enc.pos", &e.pos),
            ("enc.joint", &e.joint),
            ("enc.mu", &e.mu),
            ("enc.logvar", &e.logvar),
            ("dec.expand1", &d.expand1),
            ("dec.expand2", &d.expand2),
            ("dec.feature_head", &d.feature_head),
            ("dec.map_head", &d.map_head),
        ];
        for (name, layer) in named {
            ck.push(format!("{name}.w"), &layer.w);
            ck.push(format!("{name}.b"), &layer.b);
        }
        ck.push("enc.positional", &e.positional);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("injection_vae")?;
        let lin = |name: &str| -> Result<Linear> {
            Ok(Linear {
                w: ck.tensor(&format!("{name}.w"))?,
                b: ck.tensor(&format!("{name}.b"))?,
            })
        };
        Ok(Self {
            n_users: ck.meta_parse("n_users")?,
            n_items: ck.meta_parse("n_items")?,
            layers: ck.meta_parse("layers")?,
            encoder: InjectionEncoder {
                feat: lin("enc.feat")?,
                pos: lin("enc.pos")?,
                joint: lin("enc.joint")?,
                mu: lin("enc.mu")?,
                logvar: lin("enc.logvar")?,
                positional: ck.tensor("enc.positional")?,
                learned_positional: ck.meta_parse("learned_positional")?,
            },
            decoder: InjectionDecoder {
                expand1: lin("dec.expand1")?,
                expand2: lin("dec.expand2")?,
                feature_split: ck.meta_parse("feature_split")?,
                feature_head: lin("dec.feature_head")?,
                map_head: lin("dec.map_head")?,
            },
        })
    }
}

/// Items x users dense target: row `i` lists which users interacted with item `i`.
pub fn item_user_target(x: &InteractionMatrix) -> Mat {
    let mut t = Array2::zeros((x.n_items(), x.n_users()));
    for (u, i) in x.iter() {
        t[[i, u]] = 1.0;
    }
    t
}

/// Trained injection model plus its per-epoch total loss.
#[derive(Debug, Clone)]
pub struct TrainedInjection {
    pub vae: InjectionVae,
    pub losses: Vec<InjectionLoss>,
}

/// Full-batch Adam training of the injection encoder and decoder.
pub fn train_injection_vae(
    z_in: &NodeEmbeddings,
    x: &InteractionMatrix,
    adj: &NormAdjacency,
    cfg: &InjectionConfig,
) -> Result<TrainedInjection> {
    if z_in.n_users != x.n_users() || z_in.n_items != x.n_items() {
        return Err(Error::Shape("embeddings do not match the interaction matrix".into()));
    }
    let mut vae = InjectionVae::new(x.n_users(), x.n_items(), z_in.dim(), cfg);
    let target = item_user_target(x);
    let mut rng = stream_rng(cfg.seed, 0x1a8);
    let n_nodes = x.n_users() + x.n_items();
    let mut opt = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let eps = randn(n_nodes, cfg.latent, 1.0, &mut rng);
        let batch = InjectionBatch {
            z_in: &z_in.matrix,
            adj,
            map_target: &target,
            eps: &eps,
        };
        let (loss, grads) = vae.loss_and_grads(&batch, cfg)?;
        check_finite("injection_vae", epoch, loss.total)?;
        if epoch % 500 == 0 {
            log::debug!("injection epoch {epoch}: {loss:?}");
        }
        losses.push(loss);
        opt.step(vae.params_mut(), &grads);
    }
    Ok(TrainedInjection { vae, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_embed::build_norm_adjacency;
    use crate::nn::{max_relative_error, numerical_gradient, sigmoid_scalar};
    use approx::assert_abs_diff_eq;

    fn zero_linear(l: &mut Linear) {
        l.w.fill(0.0);
        l.b.fill(0.0);
    }

    fn small_cfg() -> InjectionConfig {
        InjectionConfig {
            hidden: 3,
            joint: 3,
            latent: 2,
            decoder_hidden: 3,
            feature_split: 2,
            map_split: 2,
            layers: 1,
            ..InjectionConfig::default()
        }
    }

    #[test]
    fn zero_weights_give_standard_normal_codes() {
        let x = InteractionMatrix::from_pairs(2, 2, [(0, 0), (1, 1), (0, 1)]).unwrap();
        let adj = build_norm_adjacency(&x, true);
        let mut vae = InjectionVae::new(2, 2, 4, &small_cfg());
        for l in [
            &mut vae.encoder.feat,
            &mut vae.encoder.pos,
            &mut vae.encoder.joint,
            &mut vae.encoder.mu,
            &mut vae.encoder.logvar,
        ] {
            zero_linear(l);
        }
        let z = NodeEmbeddings::new(2, 2, randn(4, 4, 1.0, &mut stream_rng(0, 0))).unwrap();
        let codes = encode(&z, &adj, &vae.encoder, 2).unwrap();
        assert!(codes.mu.iter().all(|&v| v == 0.0));
        assert!(codes.logvar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_layers_joint_is_h0_and_h0_plus_positional() {
        let x = InteractionMatrix::from_pairs(1, 2, [(0, 0), (0, 1)]).unwrap();
        let adj = build_norm_adjacency(&x, true);
        let vae = InjectionVae::new(1, 2, 3, &small_cfg());
        let z = randn(3, 3, 1.0, &mut stream_rng(1, 0));
        let pass = vae.encoder.forward(&z, &adj, 0).unwrap();
        let expected = &pass.h0 + &vae.encoder.pos.forward(&vae.encoder.positional);
        assert_eq!(pass.h_neigh, expected);
    }

    /// Dense elementwise re-derivation of the encoder and decoder on a
    /// two-node graph, written with explicit loops.
    #[test]
    fn forward_passes_match_dense_loops() {
        let x = InteractionMatrix::from_pairs(1, 1, [(0, 0)]).unwrap();
        let adj = build_norm_adjacency(&x, true);
        let cfg = small_cfg();
        let vae = InjectionVae::new(1, 1, 2, &cfg);
        let z = randn(2, 2, 1.0, &mut stream_rng(2, 0));
        let enc = &vae.encoder;
        let lin = |l: &Linear, v: &[f64]| -> Vec<f64> {
            (0..l.output_dim())
                .map(|o| l.b[[0, o]] + (0..v.len()).map(|k| l.w[[k, o]] * v[k]).sum::<f64>())
                .collect()
        };
        let relu_v = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
        let h0: Vec<Vec<f64>> = (0..2).map(|r| relu_v(lin(&enc.feat, &[z[[r, 0]], z[[r, 1]]]))).collect();
        let hin: Vec<Vec<f64>> = (0..2)
            .map(|r| {
                let p = lin(&enc.pos, &[enc.positional[[r, 0]], enc.positional[[r, 1]]]);
                h0[r].iter().zip(p).map(|(a, b)| a + b).collect()
            })
            .collect();
        // self-looped 1x1 graph: every entry of A_norm is 0.5
        let neigh: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..3).map(|k| 0.5 * hin[0][k] + 0.5 * hin[1][k]).collect())
            .collect();
        let pass = enc.forward(&z, &adj, 1).unwrap();
        for r in 0..2 {
            let joint: Vec<f64> = h0[r].iter().chain(neigh[r].iter()).copied().collect();
            let hz = relu_v(lin(&enc.joint, &joint));
            let mu = lin(&enc.mu, &hz);
            let lv = lin(&enc.logvar, &hz);
            for k in 0..2 {
                assert_abs_diff_eq!(pass.mu[[r, k]], mu[k], epsilon = 1e-10);
                assert_abs_diff_eq!(pass.logvar[[r, k]], lv[k], epsilon = 1e-10);
            }
        }

        let dec = &vae.decoder;
        let latent = [0.3, -1.2];
        let e = relu_v(lin(&dec.expand2, &relu_v(lin(&dec.expand1, &latent))));
        let feat: Vec<f64> = lin(&dec.feature_head, &e[..2]).into_iter().map(sigmoid_scalar).collect();
        let map: Vec<f64> = lin(&dec.map_head, &e[2..]).into_iter().map(sigmoid_scalar).collect();
        let (f, p) = decode(&ndarray::array![[0.3, -1.2]], dec).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(f[[0, k]], feat[k], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(p[[0, 0]], map[0], epsilon = 1e-10);
    }

    #[test]
    fn zero_decoder_gives_one_half() {
        let mut vae = InjectionVae::new(3, 2, 4, &small_cfg());
        zero_linear(&mut vae.decoder.map_head);
        let (_, probs) = decode(&randn(5, 2, 1.0, &mut stream_rng(3, 0)), &vae.decoder).unwrap();
        assert_eq!(probs.dim(), (5, 3));
        assert!(probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn reparameterize_cases() {
        let mu = ndarray::array![[1.0, -2.0]];
        let zero = Array2::zeros((1, 2));
        assert_eq!(reparameterize(&mu, &zero, &zero).unwrap(), mu);
        let ones = Array2::ones((1, 2));
        assert_eq!(reparameterize(&mu, &zero, &ones).unwrap(), &mu + 1.0);
        assert!(reparameterize(&mu, &zero, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let n = 100_000;
        let mu = Array2::from_elem((n, 1), 0.7);
        let logvar = Array2::from_elem((n, 1), 4f64.ln());
        let eps = randn(n, 1, 1.0, &mut stream_rng(4, 0));
        let s = reparameterize(&mu, &logvar, &eps).unwrap();
        let mean = s.mean().unwrap();
        let std = (s.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64).sqrt();
        assert!((std - 2.0).abs() / 2.0 < 0.02, "std {std}");
        assert!((mean - 0.7).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn reconstruction_loss_cases() {
        let z = randn(3, 2, 1.0, &mut stream_rng(5, 0));
        let xm = ndarray::array![[1.0, 0.0], [0.0, 0.0]];
        let half = Array2::from_elem((2, 2), 0.5);
        assert_eq!(reconstruction_loss(&z, &z, &half, &xm, 1.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            reconstruction_loss(&z, &z, &half, &xm, 1.0, 1.0).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        let zr = &z + 0.3;
        let one = reconstruction_loss(&zr, &z, &half, &xm, 1.0, 0.0).unwrap();
        let two = reconstruction_loss(&zr, &z, &half, &xm, 2.0, 0.0).unwrap();
        assert_eq!(two, 2.0 * one);
        let extreme = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        assert!(reconstruction_loss(&z, &z, &extreme, &xm, 1.0, 1.0).unwrap().is_finite());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let x = InteractionMatrix::from_pairs(2, 1, [(0, 0)]).unwrap();
        let adj = build_norm_adjacency(&x, true);
        let cfg = InjectionConfig {
            hidden: 2,
            joint: 2,
            latent: 1,
            decoder_hidden: 2,
            feature_split: 1,
            map_split: 1,
            layers: 1,
            beta_kl: 0.2,
            lambda_feat: 0.7,
            lambda_map: 1.3,
            learned_positional: true,
            ..InjectionConfig::default()
        };
        let mut vae = InjectionVae::new(2, 1, 1, &cfg);
        let mut rng = stream_rng(6, 0);
        // push every ReLU input away from its kink
        for p in vae.params_mut() {
            *p = randn(p.nrows(), p.ncols(), 0.8, &mut rng);
        }
        let z = randn(3, 1, 1.0, &mut rng);
        let target = item_user_target(&x);
        let eps = randn(3, 1, 1.0, &mut rng);
        let batch = InjectionBatch {
            z_in: &z,
            adj: &adj,
            map_target: &target,
            eps: &eps,
        };
        let (_, analytic) = vae.loss_and_grads(&batch, &cfg).unwrap();
        assert!(vae.num_params() <= 50, "{} params", vae.num_params());
        let numeric = numerical_gradient(&mut vae, 1e-5, |v| v.loss_and_grads(&batch, &cfg).unwrap().0.total);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let rows: Vec<Vec<usize>> = (0..50).map(|u| vec![u % 7, (u * 3) % 7, 7 + u % 3]).collect();
        let x = InteractionMatrix::from_rows(10, rows).unwrap();
        let adj = build_norm_adjacency(&x, true);
        let z = NodeEmbeddings::new(50, 10, randn(60, 8, 0.2, &mut stream_rng(7, 0))).unwrap();
        let cfg = InjectionConfig {
            hidden: 16,
            joint: 16,
            latent: 8,
            decoder_hidden: 16,
            feature_split: 8,
            map_split: 8,
            epochs: 150,
            lr: 5e-3,
            ..InjectionConfig::default()
        };
        let t = train_injection_vae(&z, &x, &adj, &cfg).unwrap();
        let first = t.losses.first().unwrap().total;
        let last = t.losses.last().unwrap().total;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(t.vae, train_injection_vae(&z, &x, &adj, &cfg).unwrap().vae);

        let init = train_injection_vae(&z, &x, &adj, &InjectionConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(init.vae, InjectionVae::new(50, 10, 8, &cfg));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let vae = InjectionVae::new(3, 2, 4, &small_cfg());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inj.ckpt");
        vae.save(&path).unwrap();
        assert_eq!(InjectionVae::load(&path).unwrap(), vae);
    }
}
