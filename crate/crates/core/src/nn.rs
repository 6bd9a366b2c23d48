//! Minimal dense layers with hand-written backward passes and Adam.
//!
//! Batches are row-major: a batch of `n` inputs of width `d` is an `n x d`
//! matrix, and a linear layer stores its weight as `in x out`.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Mat = Array2<f64>;

/// Gaussian matrix with the given standard deviation.
pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    /// He-style initialization, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (2.0 / input.max(1) as f64).sqrt();
        Self {
            w: randn(input, output, std, rng),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.b
    }

    /// Returns the input gradient and accumulates weight gradients.
    pub fn backward(&self, x: &Mat, grad_out: &Mat, grad: &mut LinearGrad) -> Mat {
        grad.w += &x.t().dot(grad_out);
        grad.b += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        grad_out.dot(&self.w.t())
    }

    /// Weight gradients only, for layers fed directly by data.
    pub fn backward_params(&self, x: &Mat, grad_out: &Mat, grad: &mut LinearGrad) {
        grad.w += &x.t().dot(grad_out);
        grad.b += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }

    pub fn zero_grad(&self) -> LinearGrad {
        LinearGrad {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub w: Mat,
    pub b: Mat,
}

impl LinearGrad {
    pub fn into_vec(self) -> [Mat; 2] {
        [self.w, self.b]
    }
}

pub fn relu(x: &Mat) -> Mat {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through a ReLU given its pre-activation.
pub fn relu_backward(pre: &Mat, grad: &Mat) -> Mat {
    let mut g = grad.clone();
    g.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    g
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Mat) -> Mat {
    x.mapv(sigmoid_scalar)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fixed sinusoidal table: row `p` encodes position `p`.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Mat {
    Array2::from_shape_fn((positions, dim), |(p, k)| {
        let pair = (k / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = p as f64 * freq;
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Mean of `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)` over rows, and its
/// gradients with respect to `mu` and `logvar` (already divided by the row
/// count).
pub fn gaussian_kl(mu: &Mat, logvar: &Mat) -> (f64, Mat, Mat) {
    let n = mu.nrows().max(1) as f64;
    let mut total = 0.0;
    ndarray::Zip::from(mu)
        .and(logvar)
        .for_each(|&m, &lv| total += 0.5 * (m * m + lv.exp() - 1.0 - lv));
    let d_mu = mu / n;
    let d_lv = logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0) / n);
    (total / n, d_mu, d_lv)
}

/// Anything with a fixed, ordered list of parameter tensors.
pub trait Parameters {
    fn params(&self) -> Vec<&Mat>;
    fn params_mut(&mut self) -> Vec<&mut Mat>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &[Mat]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let lr = self.lr;
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Central finite-difference gradient of `loss` with respect to every
/// parameter of `model`, in `params()` order.
pub fn numerical_gradient<M, F>(model: &mut M, step: f64, mut loss: F) -> Vec<Mat>
where
    M: Parameters,
    F: FnMut(&M) -> f64,
{
    let shapes: Vec<_> = model.params().iter().map(|p| p.raw_dim()).collect();
    let mut out: Vec<Mat> = shapes.iter().map(|s| Array2::zeros(*s)).collect();
    for (k, grad) in out.iter_mut().enumerate() {
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = model.params()[k][[r, c]];
            model.params_mut()[k][[r, c]] = orig + step;
            let up = loss(model);
            model.params_mut()[k][[r, c]] = orig - step;
            let down = loss(model);
            model.params_mut()[k][[r, c]] = orig;
            grad[[r, c]] = (up - down) / (2.0 * step);
        }
    }
    out
}

/// Largest relative error between two gradient lists, using
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[Mat], numeric: &[Mat], floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        ndarray::Zip::from(a).and(n).for_each(|&a, &n| {
            let denom = a.abs().max(n.abs()).max(floor);
            worst = worst.max((a - n).abs() / denom);
        });
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_rng;
    use ndarray::array;

    struct Tiny {
        a: Linear,
        b: Linear,
    }

    impl Parameters for Tiny {
        fn params(&self) -> Vec<&Mat> {
            vec![&self.a.w, &self.a.b, &self.b.w, &self.b.b]
        }
        fn params_mut(&mut self) -> Vec<&mut Mat> {
            vec![&mut self.a.w, &mut self.a.b, &mut self.b.w, &mut self.b.b]
        }
    }

    fn tiny_loss(t: &Tiny, x: &Mat) -> f64 {
        let h = relu(&t.a.forward(x));
        let y = t.b.forward(&h);
        y.mapv(|v| v * v).sum()
    }

    #[test]
    fn linear_relu_backward_matches_finite_differences() {
        let mut rng = stream_rng(1, 0);
        let mut t = Tiny {
            a: Linear::new(3, 4, &mut rng),
            b: Linear::new(4, 2, &mut rng),
        };
        t.a.b = randn(1, 4, 0.3, &mut rng);
        let x = randn(5, 3, 1.0, &mut rng);
        let pre = t.a.forward(&x);
        let h = relu(&pre);
        let y = t.b.forward(&h);
        let gy = y.mapv(|v| 2.0 * v);
        let mut gb = t.b.zero_grad();
        let gh = t.b.backward(&h, &gy, &mut gb);
        let mut ga = t.a.zero_grad();
        t.a.backward(&x, &relu_backward(&pre, &gh), &mut ga);
        let analytic: Vec<Mat> = ga.into_vec().into_iter().chain(gb.into_vec()).collect();
        let numeric = numerical_gradient(&mut t, 1e-5, |m| tiny_loss(m, &x));
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-5);
    }

    #[test]
    fn kl_is_zero_at_standard_normal_and_nonnegative() {
        let (kl, _, _) = gaussian_kl(&Array2::zeros((3, 4)), &Array2::zeros((3, 4)));
        assert_eq!(kl, 0.0);
        let (kl, _, _) = gaussian_kl(&array![[0.5, -1.0]], &array![[0.3, -2.0]]);
        assert!(kl > 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = array![[3.0, -2.0]];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = p.mapv(|v| 2.0 * v);
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }
}
