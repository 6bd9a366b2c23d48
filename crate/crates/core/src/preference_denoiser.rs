//! Stage two: a per-user preference VAE over the rows of the (augmented)
//! matrix, a diffusion model over its latent means, and the reverse
//! sampler that turns denoised latents back into interaction scores.

use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::InteractionMatrix;
use crate::error::check_finite;
use crate::injection_diffusion::{ConditionalDenoiser, DenoiserShape};
use crate::nn::{gaussian_kl, randn, sigmoid, sigmoid_scalar, softplus, Adam, Linear, Mat, Parameters};
use crate::schedule::{make_schedule, posterior_mean, q_sample, q_sample_rows, DiffusionSchedule};
use crate::{stream_rng, Error, Result};

fn tanh_backward(act: &Mat, grad: &Mat) -> Mat {
    let mut g = grad.clone();
    g.zip_mut_with(act, |g, &y| *g *= 1.0 - y * y);
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefVaeConfig {
    pub latent: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PrefVaeConfig {
    fn default() -> Self {
        Self {
            latent: 200,
            hidden: 600,
            lr: 1e-3,
            epochs: 60,
            batch: 128,
            seed: 0,
        }
    }
}

/// Tanh MLP encoder/decoder over binary user rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceVae {
    pub enc: Linear,
    pub mu: Linear,
    pub logvar: Linear,
    pub dec_hidden: Linear,
    pub dec_out: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl PreferenceVae {
    pub fn new<R: Rng>(n_items: usize, cfg: &PrefVaeConfig, rng: &mut R) -> Self {
        let mut logvar = Linear::new(cfg.hidden, cfg.latent, rng);
        logvar.w *= 0.1;
        Self {
            enc: Linear::new(n_items, cfg.hidden, rng),
            mu: Linear::new(cfg.hidden, cfg.latent, rng),
            logvar,
            dec_hidden: Linear::new(cfg.latent, cfg.hidden, rng),
            dec_out: Linear::new(cfg.hidden, n_items, rng),
        }
    }

    pub fn n_items(&self) -> usize {
        self.enc.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.output_dim()
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.ncols() != self.n_items() {
            return Err(Error::Shape(format!("rows of width {} for a {}-item VAE", x.ncols(), self.n_items())));
        }
        Ok(())
    }

    /// Posterior mean and log-variance for each row of `x`.
    pub fn encode(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check_input(x)?;
        let h = self.enc.forward(x).mapv(f64::tanh);
        Ok((self.mu.forward(&h), self.logvar.forward(&h)))
    }

    pub fn decode_logits(&self, z: &Mat) -> Result<Mat> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::Shape(format!("latent width {} for a {}-dim VAE", z.ncols(), self.latent_dim())));
        }
        let h = self.dec_hidden.forward(z).mapv(f64::tanh);
        Ok(self.dec_out.forward(&h))
    }

    /// Interaction probabilities in (0, 1).
    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        Ok(sigmoid(&self.decode_logits(z)?))
    }

    /// Negative ELBO averaged over rows (Bernoulli likelihood summed over
    /// entries) and its gradients for one draw `eps`.
    pub fn loss_and_grads(&self, x: &Mat, eps: &Mat) -> Result<(ElboTerms, Vec<Mat>)> {
        self.check_input(x)?;
        let n = x.nrows().max(1) as f64;
        let h = self.enc.forward(x).mapv(f64::tanh);
        let mu = self.mu.forward(&h);
        let lv = self.logvar.forward(&h);
        let std = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * eps);
        let hd = self.dec_hidden.forward(&z).mapv(f64::tanh);
        let logits = self.dec_out.forward(&hd);

        let mut recon = 0.0;
        ndarray::Zip::from(&logits)
            .and(x)
            .for_each(|&l, &t| recon += softplus(l) - t * l);
        recon /= n;
        let (kl, d_mu_kl, d_lv_kl) = gaussian_kl(&mu, &lv);

        let mut g_logits = logits.mapv(sigmoid_scalar) - x;
        g_logits /= n;
        let mut g_dec_out = self.dec_out.zero_grad();
        let g_hd = self.dec_out.backward(&hd, &g_logits, &mut g_dec_out);
        let mut g_dec_hidden = self.dec_hidden.zero_grad();
        let g_z = self.dec_hidden.backward(&z, &tanh_backward(&hd, &g_hd), &mut g_dec_hidden);
        let g_mu = &g_z + &d_mu_kl;
        let g_lv = &g_z * eps * &std * 0.5 + &d_lv_kl;
        let mut g_mu_layer = self.mu.zero_grad();
        let mut g_lv_layer = self.logvar.zero_grad();
        let g_h = self.mu.backward(&h, &g_mu, &mut g_mu_layer) + self.logvar.backward(&h, &g_lv, &mut g_lv_layer);
        let mut g_enc = self.enc.zero_grad();
        self.enc.backward_params(x, &tanh_backward(&h, &g_h), &mut g_enc);

        let mut grads = Vec::with_capacity(10);
        grads.extend(g_enc.into_vec());
        grads.extend(g_mu_layer.into_vec());
        grads.extend(g_lv_layer.into_vec());
        grads.extend(g_dec_hidden.into_vec());
        grads.extend(g_dec_out.into_vec());
        Ok((
            ElboTerms {
                recon,
                kl,
                total: recon + kl,
            },
            grads,
        ))
    }

    fn write_into(&self, ck: &mut Checkpoint) {
        for (name, l) in self.layers() {
            ck.push(format!("{name}.w"), &l.w);
            ck.push(format!("{name}.b"), &l.b);
        }
    }

    fn layers(&self) -> [(&'static str, &Linear); 5] {
        [
            ("vae.enc", &self.enc),
            ("vae.mu", &self.mu),
            ("vae.logvar", &self.logvar),
            ("vae.dec_hidden", &self.dec_hidden),
            ("vae.dec_out", &self.dec_out),
        ]
    }

    fn read_from(ck: &Checkpoint) -> Result<Self> {
        let lin = |name: &str| -> Result<Linear> {
            Ok(Linear {
                w: ck.tensor(&format!("{name}.w"))?,
                b: ck.tensor(&format!("{name}.b"))?,
            })
        };
        Ok(Self {
            enc: lin("vae.enc")?,
            mu: lin("vae.mu")?,
            logvar: lin("vae.logvar")?,
            dec_hidden: lin("vae.dec_hidden")?,
            dec_out: lin("vae.dec_out")?,
        })
    }
}

impl Parameters for PreferenceVae {
    fn params(&self) -> Vec<&Mat> {
        let mut v = Vec::with_capacity(10);
        for l in [&self.enc, &self.mu, &self.logvar, &self.dec_hidden, &self.dec_out] {
            v.extend([&l.w, &l.b]);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = Vec::with_capacity(10);
        for l in [
            &mut self.enc,
            &mut self.mu,
            &mut self.logvar,
            &mut self.dec_hidden,
            &mut self.dec_out,
        ] {
            v.extend([&mut l.w, &mut l.b]);
        }
        v
    }
}

/// Trained preference VAE with the per-epoch mean negative ELBO.
#[derive(Debug, Clone)]
pub struct TrainedPrefVae {
    pub vae: PreferenceVae,
    pub losses: Vec<f64>,
}

pub fn train_pref_vae(x: &InteractionMatrix, cfg: &PrefVaeConfig) -> Result<TrainedPrefVae> {
    if x.n_users() == 0 || x.n_items() == 0 {
        return Err(Error::InvalidArgument("preference VAE needs a non-empty matrix".into()));
    }
    let dense = x.to_dense();
    let mut rng = stream_rng(cfg.seed, 0x9e1);
    let mut vae = PreferenceVae::new(x.n_items(), cfg, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..x.n_users()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let rows = dense.select(Axis(0), chunk);
            let eps = randn(chunk.len(), cfg.latent, 1.0, &mut rng);
            let (terms, grads) = vae.loss_and_grads(&rows, &eps)?;
            total += terms.total * chunk.len() as f64;
            opt.step(vae.params_mut(), &grads);
        }
        let mean = total / x.n_users() as f64;
        check_finite("preference_vae", epoch, mean)?;
        losses.push(mean);
    }
    Ok(TrainedPrefVae { vae, losses })
}

/// Forward marginal of the latent diffusion; same closed form as stage one.
pub fn latent_forward(z0: &Mat, t: usize, eps: &Mat, sched: &DiffusionSchedule) -> Result<Mat> {
    q_sample(z0, t, eps, sched)
}

/// Training objective of the latent score network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreLoss {
    /// Finite-difference score objective.
    Fd,
    /// Plain noise matching `||eps - s(z_t, t)||^2`.
    Eps,
}

impl FromStr for ScoreLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fd" => Ok(Self::Fd),
            "eps" => Ok(Self::Eps),
            other => Err(Error::Config(format!("unknown score loss `{other}` (fd|eps)"))),
        }
    }
}

impl std::fmt::Display for ScoreLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fd => "fd",
            Self::Eps => "eps",
        })
    }
}

/// Unbiased variance over every component of `r`; 1.0 when it is zero or
/// undefined.
pub fn residual_variance(r: &Mat) -> f64 {
    let n = r.len();
    if n < 2 {
        return 1.0;
    }
    let mean = r.sum() / n as f64;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var > 0.0 && var.is_finite() {
        var
    } else {
        1.0
    }
}

fn mean_row_sq_norm(m: &Mat) -> f64 {
    m.mapv(|v| v * v).sum() / m.nrows().max(1) as f64
}

/// Time-conditioned latent network `s_theta(z_t, t)` with its schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentScoreModel {
    pub net: ConditionalDenoiser,
    pub schedule: DiffusionSchedule,
    pub loss: ScoreLoss,
}

impl LatentScoreModel {
    pub fn new<R: Rng>(latent: usize, cfg: &LatentDiffConfig, rng: &mut R) -> Result<Self> {
        let schedule = make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        let shape = DenoiserShape {
            latent,
            hidden: cfg.hidden,
            blocks: cfg.blocks,
            time_dim: cfg.time_dim,
            n_classes: 0,
            class_dim: 0,
        };
        Ok(Self {
            net: ConditionalDenoiser::new(&shape, cfg.steps, rng),
            schedule,
            loss: cfg.loss,
        })
    }

    pub fn score(&self, z_t: &Mat, t: usize) -> Result<Mat> {
        self.net.forward(z_t, &vec![t; z_t.nrows()], None)
    }

    /// Noise estimate used by the reverse sampler. Under the
    /// finite-difference objective the network regresses `eps - z_t`, so
    /// `z_t` is added back.
    pub fn predict_noise(&self, z_t: &Mat, t: usize) -> Result<Mat> {
        let s = self.score(z_t, t)?;
        Ok(match self.loss {
            ScoreLoss::Fd => s + z_t,
            ScoreLoss::Eps => s,
        })
    }

    /// Loss on a batch with per-row timesteps, and parameter gradients.
    pub fn loss_and_grads(&self, z_t: &Mat, ts: &[usize], eps: &Mat, mu_fd: f64) -> Result<(f64, Vec<Mat>)> {
        match self.loss {
            ScoreLoss::Eps => self.net.mse_loss_and_grads(z_t, ts, None, eps),
            ScoreLoss::Fd => fd_loss_and_grads(&self.net, z_t, ts, eps, mu_fd),
        }
    }

    pub fn save(&self, path: &Path, vae: &PreferenceVae) -> Result<()> {
        let mut ck = Checkpoint::new("preference_denoiser");
        ck.set_meta("loss", self.loss);
        ck.push(
            "schedule.betas",
            &Array2::from_shape_vec((1, self.schedule.steps()), self.schedule.betas().to_vec()).unwrap(),
        );
        vae.write_into(&mut ck);
        self.net.write_into(&mut ck, "score");
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<(PreferenceVae, Self)> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("preference_denoiser")?;
        let betas = ck.tensor("schedule.betas")?;
        let model = Self {
            net: ConditionalDenoiser::read_from(&ck, "score")?,
            schedule: DiffusionSchedule::from_betas(betas.iter().copied().collect())?,
            loss: ck.meta("loss")?.parse()?,
        };
        Ok((PreferenceVae::read_from(&ck)?, model))
    }
}

/// Finite-difference score loss for one batch:
///
/// `0.5 / Var[eps - z_t] * (||s(z_t + mu eps)/mu^2 - s(z_t)/mu^2 - r||^2 + ||s(z_t) - r||^2)`
///
/// with `r = eps - z_t`, squared norms averaged over rows and the variance
/// taken over all batch components.
pub fn fd_score_loss(model: &LatentScoreModel, z_t: &Mat, t: usize, eps: &Mat, mu_fd: f64) -> Result<f64> {
    fd_value(&model.net, z_t, &vec![t; z_t.nrows()], eps, mu_fd)
}

fn fd_terms(
    net: &ConditionalDenoiser,
    z_t: &Mat,
    ts: &[usize],
    eps: &Mat,
    mu_fd: f64,
) -> Result<(Mat, Mat, Mat, Mat, f64)> {
    if !(mu_fd > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {mu_fd}")));
    }
    if z_t.dim() != eps.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_t.dim(), eps.dim())));
    }
    let r = eps - z_t;
    let shifted = z_t + &(eps * mu_fd);
    let s_shift = net.forward(&shifted, ts, None)?;
    let s_base = net.forward(z_t, ts, None)?;
    let mu2 = mu_fd * mu_fd;
    let a = (&s_shift - &s_base) / mu2 - &r;
    let b = &s_base - &r;
    Ok((shifted, a, b, r, mu2))
}

fn fd_value(net: &ConditionalDenoiser, z_t: &Mat, ts: &[usize], eps: &Mat, mu_fd: f64) -> Result<f64> {
    let (_, a, b, r, _) = fd_terms(net, z_t, ts, eps, mu_fd)?;
    Ok(0.5 / residual_variance(&r) * (mean_row_sq_norm(&a) + mean_row_sq_norm(&b)))
}

fn fd_loss_and_grads(net: &ConditionalDenoiser, z_t: &Mat, ts: &[usize], eps: &Mat, mu_fd: f64) -> Result<(f64, Vec<Mat>)> {
    let (shifted, a, b, r, mu2) = fd_terms(net, z_t, ts, eps, mu_fd)?;
    let var = residual_variance(&r);
    let loss = 0.5 / var * (mean_row_sq_norm(&a) + mean_row_sq_norm(&b));
    let scale = 1.0 / (var * z_t.nrows().max(1) as f64);
    let g_shift = &a * (scale / mu2);
    let g_base = (&b - &(&a / mu2)) * scale;
    let (_, mut grads) = net.vjp(&shifted, ts, None, &g_shift)?;
    let (_, grads_base) = net.vjp(z_t, ts, None, &g_base)?;
    for (g, h) in grads.iter_mut().zip(grads_base) {
        *g += &h;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentDiffConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub mu_fd: f64,
    pub loss: ScoreLoss,
    pub seed: u64,
}

impl Default for LatentDiffConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-4,
            epochs: 100,
            batch: 128,
            hidden: 128,
            blocks: 3,
            time_dim: 32,
            mu_fd: 1e-2,
            loss: ScoreLoss::Fd,
            seed: 0,
        }
    }
}

/// Trained latent model and its per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct TrainedLatentDiffusion {
    pub model: LatentScoreModel,
    pub losses: Vec<f64>,
}

/// Fits the latent network on fixed latents with `t` uniform in `1..=T`.
pub fn train_latent_diffusion(latents: &Mat, cfg: &LatentDiffConfig) -> Result<TrainedLatentDiffusion> {
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("latents must be finite".into()));
    }
    let mut rng = stream_rng(cfg.seed, 0x9e2);
    let mut model = LatentScoreModel::new(latents.ncols(), cfg, &mut rng)?;
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..latents.nrows()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let steps = model.schedule.steps();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let z0 = latents.select(Axis(0), chunk);
            let ts: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=steps)).collect();
            let eps = randn(chunk.len(), latents.ncols(), 1.0, &mut rng);
            let z_t = q_sample_rows(&z0, &ts, &eps, &model.schedule)?;
            let (loss, grads) = model.loss_and_grads(&z_t, &ts, &eps, cfg.mu_fd)?;
            total += loss * chunk.len() as f64;
            opt.step(model.net.params_mut(), &grads);
        }
        let mean = total / latents.nrows().max(1) as f64;
        check_finite("latent_diffusion", epoch, mean)?;
        losses.push(mean);
    }
    Ok(TrainedLatentDiffusion { model, losses })
}

/// Where the reverse chain starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenoiseMode {
    /// Noise each user's own latent mean to `t_start`, then denoise.
    Partial,
    /// Start every user from `z_T ~ N(0, I)`.
    Prior,
}

impl FromStr for DenoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(Self::Partial),
            "prior" => Ok(Self::Prior),
            other => Err(Error::Config(format!("unknown denoise mode `{other}` (partial|prior)"))),
        }
    }
}

impl std::fmt::Display for DenoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Partial => "partial",
            Self::Prior => "prior",
        })
    }
}

/// Runs the reverse chain from step `t_start` down to 0. `t_start = 0`
/// returns `z` untouched.
pub fn reverse_chain<R: Rng>(model: &LatentScoreModel, mut z: Mat, t_start: usize, rng: &mut R) -> Result<Mat> {
    if t_start > model.schedule.steps() {
        return Err(Error::OutOfRange(format!(
            "t_start {t_start} beyond {} steps",
            model.schedule.steps()
        )));
    }
    for t in (1..=t_start).rev() {
        let eps_hat = model.predict_noise(&z, t)?;
        let mean = posterior_mean(&z, t, &eps_hat, &model.schedule)?;
        z = if t > 1 {
            let sd = model.schedule.beta(t).sqrt();
            mean + randn(z.nrows(), z.ncols(), sd, rng)
        } else {
            mean
        };
    }
    Ok(z)
}

/// Denoised latents for every row of `x`.
pub fn denoise_latents(
    vae: &PreferenceVae,
    model: &LatentScoreModel,
    x: &InteractionMatrix,
    mode: DenoiseMode,
    t_start: usize,
    seed: u64,
) -> Result<Mat> {
    let mut rng = stream_rng(seed, 0x9e3);
    let d = vae.latent_dim();
    match mode {
        DenoiseMode::Partial => {
            let (mu, _) = vae.encode(&x.to_dense())?;
            if t_start == 0 {
                return Ok(mu);
            }
            let eps = randn(mu.nrows(), d, 1.0, &mut rng);
            let z = q_sample(&mu, t_start, &eps, &model.schedule)?;
            reverse_chain(model, z, t_start, &mut rng)
        }
        DenoiseMode::Prior => {
            let steps = model.schedule.steps();
            let z = randn(x.n_users(), d, 1.0, &mut rng);
            reverse_chain(model, z, steps, &mut rng)
        }
    }
}

/// Decoded interaction scores `X_opt`, one row per user.
pub fn denoise_users(
    vae: &PreferenceVae,
    model: &LatentScoreModel,
    x: &InteractionMatrix,
    mode: DenoiseMode,
    t_start: usize,
    seed: u64,
) -> Result<Mat> {
    vae.decode(&denoise_latents(vae, model, x, mode, t_start, seed)?)
}

/// Keeps each user's `n` highest-scoring items, `n` being the user's
/// degree in `observed`; equal scores keep the lower item index. With
/// `union`, observed entries are added back afterwards.
pub fn finalize_matrix(scores: &Mat, observed: &InteractionMatrix, union: bool) -> Result<InteractionMatrix> {
    if scores.dim() != (observed.n_users(), observed.n_items()) {
        return Err(Error::Shape(format!(
            "scores {:?} for a {}x{} matrix",
            scores.dim(),
            observed.n_users(),
            observed.n_items()
        )));
    }
    let rows = scores
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(u, row)| {
            let n = observed.row(u).len();
            let mut top = top_n_indices(row.as_slice().expect("row-major scores"), n);
            if union {
                top.extend_from_slice(observed.row(u));
            }
            top
        })
        .collect();
    InteractionMatrix::from_rows(observed.n_items(), rows)?.with_base_items(observed.n_base_items())
}

fn top_n_indices(row: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let order = |&a: &usize, &b: &usize| row[b].total_cmp(&row[a]).then(a.cmp(&b));
    if n == 0 {
        return Vec::new();
    }
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, order);
        idx.truncate(n);
    }
    idx.sort_unstable_by(order);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub mode: DenoiseMode,
    pub t_start: usize,
    pub union: bool,
    pub seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            mode: DenoiseMode::Partial,
            t_start: 18,
            union: true,
            seed: 0,
        }
    }
}

/// Everything stage two produces for one input matrix.
#[derive(Debug, Clone)]
pub struct PreferenceOutcome {
    pub vae: TrainedPrefVae,
    pub diffusion: TrainedLatentDiffusion,
    pub scores: Mat,
    pub matrix: InteractionMatrix,
}

/// Trains both stage-two models on `x` and returns the finalized matrix.
pub fn structural_denoise(
    x: &InteractionMatrix,
    vae_cfg: &PrefVaeConfig,
    diff_cfg: &LatentDiffConfig,
    den: &DenoiseConfig,
) -> Result<PreferenceOutcome> {
    let vae = train_pref_vae(x, vae_cfg)?;
    let (mu, _) = vae.vae.encode(&x.to_dense())?;
    let diffusion = train_latent_diffusion(&mu, diff_cfg)?;
    let scores = denoise_users(&vae.vae, &diffusion.model, x, den.mode, den.t_start, den.seed)?;
    let matrix = finalize_matrix(&scores, x, den.union)?;
    Ok(PreferenceOutcome {
        vae,
        diffusion,
        scores,
        matrix,
    })
}
