//! Class-conditional DDPM over injection latents.
//!
//! Latents are flat vectors, so the noise predictor is a residual MLP fed
//! with `[z_t | time embedding | class embedding]`. Time and class
//! embeddings are learned lookup tables; the time table starts from a
//! sinusoidal code.

use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::check_finite;
use crate::injection_vae::NodeClass;
use crate::nn::{randn, relu, relu_backward, sinusoidal_table, Adam, Linear, Mat, Parameters};
use crate::schedule::{make_schedule, posterior_mean, q_sample_rows, DiffusionSchedule};
use crate::{stream_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub latent: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    /// Zero disables class conditioning.
    pub n_classes: usize,
    pub class_dim: usize,
}

/// Residual-MLP noise predictor `eps_theta(z_t, t[, c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDenoiser {
    pub time_table: Mat,
    pub class_table: Mat,
    pub input: Linear,
    pub blocks: Vec<(Linear, Linear)>,
    pub output: Linear,
}

struct DenoiserPass {
    input: Mat,
    /// Residual stream before each block, then the final one.
    stream: Vec<Mat>,
    pre: Vec<Mat>,
    act: Vec<Mat>,
    out: Mat,
}

impl ConditionalDenoiser {
    pub fn new<R: Rng>(shape: &DenoiserShape, steps: usize, rng: &mut R) -> Self {
        let in_dim = shape.latent + shape.time_dim + shape.class_dim * usize::from(shape.n_classes > 0);
        let blocks = (0..shape.blocks)
            .map(|_| {
                let a = Linear::new(shape.hidden, shape.hidden, rng);
                let mut b = Linear::new(shape.hidden, shape.hidden, rng);
                b.w *= 0.1;
                (a, b)
            })
            .collect();
        let mut output = Linear::new(shape.hidden, shape.latent, rng);
        output.w *= 0.1;
        let class_table = if shape.n_classes > 0 {
            randn(shape.n_classes, shape.class_dim, 1.0, rng)
        } else {
            Array2::zeros((0, 0))
        };
        Self {
            time_table: sinusoidal_table(steps, shape.time_dim),
            class_table,
            input: Linear::new(in_dim, shape.hidden, rng),
            blocks,
            output,
        }
    }

    /// Model whose every weight is zero; its prediction is identically 0.
    pub fn zeros(shape: &DenoiserShape, steps: usize) -> Self {
        let mut m = Self::new(shape, steps, &mut stream_rng(0, 0));
        for p in m.params_mut() {
            p.fill(0.0);
        }
        m
    }

    pub fn latent_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn steps(&self) -> usize {
        self.time_table.nrows()
    }

    pub fn conditional(&self) -> bool {
        self.class_table.nrows() > 0
    }

    fn assemble_input(&self, z_t: &Mat, ts: &[usize], classes: Option<&[usize]>) -> Result<Mat> {
        if z_t.ncols() != self.latent_dim() || ts.len() != z_t.nrows() {
            return Err(Error::Shape(format!(
                "denoiser input {:?} with {} timesteps, latent width {}",
                z_t.dim(),
                ts.len(),
                self.latent_dim()
            )));
        }
        let mut time = Array2::zeros((ts.len(), self.time_table.ncols()));
        for (r, &t) in ts.iter().enumerate() {
            if t == 0 || t > self.steps() {
                return Err(Error::OutOfRange(format!("timestep {t} outside 1..={}", self.steps())));
            }
            time.row_mut(r).assign(&self.time_table.row(t - 1));
        }
        let mut parts = vec![z_t.view(), time.view()];
        let class_emb;
        if self.conditional() {
            let classes = classes.ok_or_else(|| Error::InvalidArgument("class labels required".into()))?;
            let mut c = Array2::zeros((ts.len(), self.class_table.ncols()));
            for (r, &k) in classes.iter().enumerate() {
                if k >= self.class_table.nrows() {
                    return Err(Error::OutOfRange(format!("class {k}")));
                }
                c.row_mut(r).assign(&self.class_table.row(k));
            }
            class_emb = c;
            parts.push(class_emb.view());
        }
        Ok(concatenate(Axis(1), &parts).expect("row counts agree"))
    }

    fn forward_pass(&self, z_t: &Mat, ts: &[usize], classes: Option<&[usize]>) -> Result<DenoiserPass> {
        let input = self.assemble_input(z_t, ts, classes)?;
        let mut h = self.input.forward(&input);
        let mut stream = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut act = Vec::with_capacity(self.blocks.len());
        for (a, b) in &self.blocks {
            let p = a.forward(&h);
            let r = relu(&p);
            let next = &h + &b.forward(&r);
            stream.push(h);
            pre.push(p);
            act.push(r);
            h = next;
        }
        let out = self.output.forward(&h);
        stream.push(h);
        Ok(DenoiserPass {
            input,
            stream,
            pre,
            act,
            out,
        })
    }

    /// Batched prediction with per-row timesteps and optional class labels.
    pub fn forward(&self, z_t: &Mat, ts: &[usize], classes: Option<&[usize]>) -> Result<Mat> {
        Ok(self.forward_pass(z_t, ts, classes)?.out)
    }

    /// Gradients of `sum(grad_out * output)` in `params()` order.
    fn backward(&self, pass: &DenoiserPass, ts: &[usize], classes: Option<&[usize]>, grad_out: &Mat) -> Vec<Mat> {
        let mut g_out = self.output.zero_grad();
        let mut g_h = self.output.backward(pass.stream.last().unwrap(), grad_out, &mut g_out);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (k, (a, b)) in self.blocks.iter().enumerate().rev() {
            let mut gb = b.zero_grad();
            let g_r = b.backward(&pass.act[k], &g_h, &mut gb);
            let mut ga = a.zero_grad();
            let g_in = a.backward(&pass.stream[k], &relu_backward(&pass.pre[k], &g_r), &mut ga);
            g_h = g_h + g_in;
            block_grads.push((ga, gb));
        }
        block_grads.reverse();
        let mut g_input_layer = self.input.zero_grad();
        let g_x = self.input.backward(&pass.input, &g_h, &mut g_input_layer);

        let latent = self.latent_dim();
        let tdim = self.time_table.ncols();
        let mut g_time = Array2::zeros(self.time_table.raw_dim());
        for (r, &t) in ts.iter().enumerate() {
            let mut row = g_time.row_mut(t - 1);
            row += &g_x.slice(s![r, latent..latent + tdim]);
        }
        let mut g_class = Array2::zeros(self.class_table.raw_dim());
        if let Some(classes) = classes.filter(|_| self.conditional()) {
            for (r, &k) in classes.iter().enumerate() {
                let mut row = g_class.row_mut(k);
                row += &g_x.slice(s![r, latent + tdim..]);
            }
        }

        let mut grads = vec![g_time, g_class];
        grads.extend(g_input_layer.into_vec());
        for (ga, gb) in block_grads {
            grads.extend(ga.into_vec());
            grads.extend(gb.into_vec());
        }
        grads.extend(g_out.into_vec());
        grads
    }

    /// Mean over rows of `||target - eps_theta||^2` and its gradients.
    pub fn mse_loss_and_grads(
        &self,
        z_t: &Mat,
        ts: &[usize],
        classes: Option<&[usize]>,
        target: &Mat,
    ) -> Result<(f64, Vec<Mat>)> {
        let pass = self.forward_pass(z_t, ts, classes)?;
        let diff = &pass.out - target;
        let n = z_t.nrows().max(1) as f64;
        let loss = diff.mapv(|v| v * v).sum() / n;
        let grads = self.backward(&pass, ts, classes, &(diff * (2.0 / n)));
        Ok((loss, grads))
    }

    /// Backward pass for an arbitrary upstream gradient on the output.
    pub(crate) fn vjp(&self, z_t: &Mat, ts: &[usize], classes: Option<&[usize]>, grad_out: &Mat) -> Result<(Mat, Vec<Mat>)> {
        let pass = self.forward_pass(z_t, ts, classes)?;
        let grads = self.backward(&pass, ts, classes, grad_out);
        Ok((pass.out, grads))
    }

    pub(crate) fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set_meta(&format!("{prefix}.blocks"), self.blocks.len());
        ck.push(format!("{prefix}.time_table"), &self.time_table);
        ck.push(format!("{prefix}.class_table"), &self.class_table);
        ck.push(format!("{prefix}.input.w"), &self.input.w);
        ck.push(format!("{prefix}.input.b"), &self.input.b);
        for (k, (a, b)) in self.blocks.iter().enumerate() {
            ck.push(format!("{prefix}.block{k}.a.w"), &a.w);
            ck.push(format!("{prefix}.block{k}.a.b"), &a.b);
            ck.push(format!("{prefix}.block{k}.b.w"), &b.w);
            ck.push(format!("{prefix}.block{k}.b.b"), &b.b);
        }
        ck.push(format!("{prefix}.output.w"), &self.output.w);
        ck.push(format!("{prefix}.output.b"), &self.output.b);
    }

    pub(crate) fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let lin = |name: String| -> Result<Linear> {
            Ok(Linear {
                w: ck.tensor(&format!("{name}.w"))?,
                b: ck.tensor(&format!("{name}.b"))?,
            })
        };
        let n_blocks: usize = ck.meta_parse(&format!("{prefix}.blocks"))?;
        let blocks = (0..n_blocks)
            .map(|k| Ok((lin(format!("{prefix}.block{k}.a"))?, lin(format!("{prefix}.block{k}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            time_table: ck.tensor(&format!("{prefix}.time_table"))?,
            class_table: ck.tensor(&format!("{prefix}.class_table"))?,
            input: lin(format!("{prefix}.input"))?,
            blocks,
            output: lin(format!("{prefix}.output"))?,
        })
    }
}

impl Parameters for ConditionalDenoiser {
    fn params(&self) -> Vec<&Mat> {
        let mut v = vec![&self.time_table, &self.class_table, &self.input.w, &self.input.b];
        for (a, b) in &self.blocks {
            v.extend([&a.w, &a.b, &b.w, &b.b]);
        }
        v.extend([&self.output.w, &self.output.b]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![
            &mut self.time_table,
            &mut self.class_table,
            &mut self.input.w,
            &mut self.input.b,
        ];
        for (a, b) in &mut self.blocks {
            v.extend([&mut a.w, &mut a.b, &mut b.w, &mut b.b]);
        }
        v.extend([&mut self.output.w, &mut self.output.b]);
        v
    }
}

/// Single prediction `eps_theta(z_t, t, class)` for a batch sharing `t`.
pub fn predict_noise(model: &ConditionalDenoiser, z_t: &Mat, t: usize, class: NodeClass) -> Result<Mat> {
    let ts = vec![t; z_t.nrows()];
    let cs = vec![class as usize; z_t.nrows()];
    model.forward(z_t, &ts, Some(&cs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub class_dim: usize,
    /// Train on per-dimension standardized latents and undo the map after
    /// sampling, so the chain's N(0, I) start matches the data scale.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-3,
            epochs: 200,
            batch: 256,
            hidden: 128,
            blocks: 3,
            time_dim: 32,
            class_dim: 32,
            standardize: true,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }

    pub fn shape(&self, latent: usize, n_classes: usize) -> DenoiserShape {
        DenoiserShape {
            latent,
            hidden: self.hidden,
            blocks: self.blocks,
            time_dim: self.time_dim,
            n_classes,
            class_dim: self.class_dim,
        }
    }
}

/// A trained denoiser together with the schedule it was trained under and
/// the affine map from its working space back to latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionDiffusion {
    pub model: ConditionalDenoiser,
    pub schedule: DiffusionSchedule,
    /// 1 x d; latents are `working * scale + shift`.
    pub shift: Mat,
    pub scale: Mat,
    pub losses: Vec<f64>,
}

/// Per-column mean and standard deviation; degenerate columns get scale 1.
fn column_moments(latents: &Mat) -> (Mat, Mat) {
    let n = latents.nrows().max(1) as f64;
    let mean = latents.sum_axis(Axis(0)) / n;
    let mut scale = Array2::ones((1, latents.ncols()));
    for (j, col) in latents.columns().into_iter().enumerate() {
        let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
        if var > 1e-24 {
            scale[[0, j]] = var.sqrt();
        }
    }
    (mean.insert_axis(Axis(0)), scale)
}

impl InjectionDiffusion {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new("injection_diffusion");
        ck.push("schedule.betas", &Array2::from_shape_vec((1, self.schedule.steps()), self.schedule.betas().to_vec()).unwrap());
        ck.push("latent.shift", &self.shift);
        ck.push("latent.scale", &self.scale);
        self.model.write_into(&mut ck, "denoiser");
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("injection_diffusion")?;
        let betas = ck.tensor("schedule.betas")?;
        Ok(Self {
            model: ConditionalDenoiser::read_from(&ck, "denoiser")?,
            schedule: DiffusionSchedule::from_betas(betas.iter().copied().collect())?,
            shift: ck.tensor("latent.shift")?,
            scale: ck.tensor("latent.scale")?,
            losses: Vec::new(),
        })
    }
}

/// Trains the conditional noise predictor on `latents` with per-row class
/// labels, sampling `t` uniformly from `1..=T` for every example.
pub fn train_diffusion(latents: &Mat, classes: &[NodeClass], cfg: &DiffusionConfig) -> Result<InjectionDiffusion> {
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("latents must be finite".into()));
    }
    if classes.len() != latents.nrows() {
        return Err(Error::Shape(format!("{} classes for {} latents", classes.len(), latents.nrows())));
    }
    let schedule = cfg.schedule()?;
    let mut rng = stream_rng(cfg.seed, 0xdd1);
    let mut model = ConditionalDenoiser::new(&cfg.shape(latents.ncols(), 2), cfg.steps, &mut rng);
    let labels: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
    let (shift, scale) = if cfg.standardize {
        column_moments(latents)
    } else {
        (Array2::zeros((1, latents.ncols())), Array2::ones((1, latents.ncols())))
    };
    let working = (latents - &shift) / &scale;
    let losses = fit_denoiser(&mut model, &working, Some(&labels), &schedule, cfg, &mut rng, "injection_diffusion")?;
    Ok(InjectionDiffusion {
        model,
        schedule,
        shift,
        scale,
        losses,
    })
}

pub(crate) fn fit_denoiser<R: Rng>(
    model: &mut ConditionalDenoiser,
    latents: &Mat,
    labels: Option<&[usize]>,
    schedule: &DiffusionSchedule,
    cfg: &DiffusionConfig,
    rng: &mut R,
    stage: &'static str,
) -> Result<Vec<f64>> {
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..latents.nrows()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let z0 = latents.select(Axis(0), chunk);
            let ts: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
            let cs: Option<Vec<usize>> = labels.map(|l| chunk.iter().map(|&k| l[k]).collect());
            let eps = randn(chunk.len(), latents.ncols(), 1.0, rng);
            let z_t = q_sample_rows(&z0, &ts, &eps, schedule)?;
            let (loss, grads) = model.mse_loss_and_grads(&z_t, &ts, cs.as_deref(), &eps)?;
            total += loss * chunk.len() as f64;
            opt.step(model.params_mut(), &grads);
        }
        let mean = total / latents.nrows().max(1) as f64;
        check_finite(stage, epoch, mean)?;
        losses.push(mean);
    }
    Ok(losses)
}

/// Ancestral sampling from `z_T ~ N(0, I)` with reverse variance `beta_t`;
/// the last step returns the posterior mean without noise.
pub fn sample_latents(diffusion: &InjectionDiffusion, n: usize, class: NodeClass, seed: u64) -> Result<Mat> {
    let model = &diffusion.model;
    let sched = &diffusion.schedule;
    let mut rng = stream_rng(seed, 0x5a3);
    let mut z = randn(n, model.latent_dim(), 1.0, &mut rng);
    if n == 0 {
        return Ok(z);
    }
    let classes = vec![class as usize; n];
    for t in (1..=sched.steps()).rev() {
        let eps_hat = model.forward(&z, &vec![t; n], Some(&classes))?;
        let mean = posterior_mean(&z, t, &eps_hat, sched)?;
        z = if t > 1 {
            mean + randn(n, model.latent_dim(), sched.beta(t).sqrt(), &mut rng)
        } else {
            mean
        };
    }
    Ok(z * &diffusion.scale + &diffusion.shift)
}
