//! DDPM forward (noising) and reverse (denoising) processes.
//!
//! Timesteps are 1-based throughout: `t` ranges over `1..=steps()`.

use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;

/// Per-step variances and the products derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly interpolated betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Param(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-step noise scale, `sqrt(beta_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// A shorter chain over `count` evenly spaced original timesteps, with
    /// betas recomputed so that its cumulative products match the original
    /// schedule at the kept steps. Returns the chain and, for each of its
    /// steps, the original timestep the model should be conditioned on.
    pub fn respaced(&self, count: usize) -> Result<(Self, Vec<usize>)> {
        let total = self.steps();
        if count == 0 || count > total {
            return Err(Error::Param(format!(
                "respaced step count {count} outside 1..={total}"
            )));
        }
        let kept: Vec<usize> = (1..=count)
            .map(|i| ((i as f64) * total as f64 / count as f64).round() as usize)
            .map(|t| t.clamp(1, total))
            .collect();
        let mut betas = Vec::with_capacity(count);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok((Self::from_betas(betas)?, kept))
    }
}

/// Draws `x_t ~ q(x_t | x_0)` as `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<E: Element>(
    x0: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let i = sched.idx(t)?;
    let ab = sched.alpha_bars[i];
    let (a, b) = (E::from_f64(ab.sqrt()), E::from_f64((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e)?)
}

/// One application of the single-step noising kernel
/// `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step<E: Element>(
    prev: &Tensor<E>,
    t: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let i = sched.idx(t)?;
    let beta = sched.betas[i];
    let (a, b) = (E::from_f64((1.0 - beta).sqrt()), E::from_f64(beta.sqrt()));
    Ok(prev.zip_map(eps, |x, e| a * x + b * e)?)
}

/// Ancestral DDPM step:
/// `x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - ab_t) * eps_pred) / sqrt(a_t) + sigma_t z`,
/// with the noise term dropped at `t = 1`.
pub fn reverse_step<E: Element>(
    xt: &Tensor<E>,
    eps_pred: &Tensor<E>,
    t: usize,
    z: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Tensor<E>> {
    let i = sched.idx(t)?;
    if z.shape() != xt.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "reverse_step",
            lhs: xt.shape().to_vec(),
            rhs: z.shape().to_vec(),
        }
        .into());
    }
    let alpha = sched.alphas[i];
    let inv_sqrt_alpha = E::from_f64(1.0 / alpha.sqrt());
    let coef = E::from_f64((1.0 - alpha) / (1.0 - sched.alpha_bars[i]).sqrt());
    let sigma = if t == 1 { E::zero() } else { E::from_f64(sched.sigmas[i]) };
    let mean = xt.zip_map(eps_pred, |x, e| inv_sqrt_alpha * (x - coef * e))?;
    Ok(mean.zip_map(z, |m, n| m + sigma * n)?)
}

/// Ancestral DDPM step through the predicted clean sample.
///
/// `x0_hat = (x_t - sqrt(1 - ab_t) eps_pred) / sqrt(ab_t)` is clamped to
/// `[-bound, bound]` before forming the posterior mean
/// `sqrt(ab_{t-1}) beta_t / (1 - ab_t) x0_hat + sqrt(a_t) (1 - ab_{t-1}) / (1 - ab_t) x_t`.
/// With an infinite bound this equals [`reverse_step`]. Data normalized to
/// `[-1, 1]` uses `bound = 1`; the clamp stops `1 / sqrt(ab_t)` from
/// amplifying small noise errors at large `t` into out-of-range samples.
pub fn reverse_step_clipped<E: Element>(
    xt: &Tensor<E>,
    eps_pred: &Tensor<E>,
    t: usize,
    z: &Tensor<E>,
    sched: &NoiseSchedule,
    bound: f64,
) -> Result<Tensor<E>> {
    let i = sched.idx(t)?;
    if z.shape() != xt.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "reverse_step_clipped",
            lhs: xt.shape().to_vec(),
            rhs: z.shape().to_vec(),
        }
        .into());
    }
    if !(bound > 0.0) {
        return Err(Error::Param(format!("clip bound must be positive, got {bound}")));
    }
    let ab = sched.alpha_bars[i];
    let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bars[i - 1] };
    let (beta, alpha) = (sched.betas[i], sched.alphas[i]);
    let (sa, sb) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt());
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let sigma = if t == 1 { 0.0 } else { sched.sigmas[i] };
    let mean = xt.zip_map(eps_pred, |x, e| {
        let (x, e) = (x.as_f64(), e.as_f64());
        let x0 = (sa * x - sb * e).clamp(-bound, bound);
        E::from_f64(c0 * x0 + ct * x)
    })?;
    let sigma = E::from_f64(sigma);
    Ok(mean.zip_map(z, |m, n| m + sigma * n)?)
}

/// A noise-prediction network `eps_theta`.
///
/// `cond` holds the clean condition frames `(B, F_c, H, W)`, `noised` the
/// noised prediction frames `(B, F_n, H, W)`, and `t` one timestep per
/// sample. Returns predicted noise shaped like `noised`.
pub trait EpsModel<E: Element> {
    fn predict_eps(&self, g: &mut Graph<E>, cond: Var, noised: Var, t: &[usize]) -> Result<Var>;
}

/// The masked denoising objective for fixed timesteps and noise.
///
/// `frames` is `(B, F_c + F_n, H, W)` and `eps` has the same shape; only the
/// last `F_n` frames of `eps` are used. Condition frames are passed clean and
/// never enter the loss.
pub fn denoising_loss<E: Element, M: EpsModel<E> + ?Sized>(
    model: &M,
    g: &mut Graph<E>,
    frames: &Tensor<E>,
    cond_frames: usize,
    t: &[usize],
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let shape = frames.shape();
    if shape.len() != 4 || eps.shape() != shape {
        return Err(Error::Param(format!(
            "expected matching (B, F, H, W) frames and noise, got {:?} and {:?}",
            shape,
            eps.shape()
        )));
    }
    let (b, f) = (shape[0], shape[1]);
    if cond_frames == 0 || cond_frames >= f {
        return Err(Error::Param(format!(
            "condition frame count {cond_frames} must be in 1..{f}"
        )));
    }
    if t.len() != b {
        return Err(Error::Param(format!("{} timesteps for batch of {b}", t.len())));
    }
    let pred_frames = f - cond_frames;
    let cond = frames.narrow(1, 0, cond_frames)?;
    let x0 = frames.narrow(1, cond_frames, pred_frames)?;
    let eps = eps.narrow(1, cond_frames, pred_frames)?;

    let per_sample = x0.numel() / b;
    let mut noised = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let range = i * per_sample..(i + 1) * per_sample;
        let xs = Tensor::from_vec(&[per_sample], x0.data()[range.clone()].to_vec())?;
        let es = Tensor::from_vec(&[per_sample], eps.data()[range].to_vec())?;
        noised.extend(q_sample(&xs, ti, &es, sched)?.into_data());
    }
    let noised = Tensor::from_vec(x0.shape(), noised)?;

    let cond = g.constant(cond);
    let noised = g.constant(noised);
    let target = g.constant(eps);
    let pred = model.predict_eps(g, cond, noised, t)?;
    Ok(g.mse(pred, target)?)
}

/// Samples `t ~ U{1..T}` and `eps ~ N(0, I)` and records the denoising loss.
pub fn train_loss<E: Element, M: EpsModel<E> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    g: &mut Graph<E>,
    frames: &Tensor<E>,
    cond_frames: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var> {
    let b = frames.shape().first().copied().unwrap_or(0);
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = Tensor::randn(frames.shape(), 1.0, rng);
    denoising_loss(model, g, frames, cond_frames, &t, &eps, sched)
}

/// Runs the reverse chain from pure noise to a sample of the prediction
/// frames, conditioned on `cond` `(B, F_c, H, W)`.
///
/// `chain` is the schedule actually stepped (the full schedule, or one
/// produced by [`NoiseSchedule::respaced`]) and `model_t[k-1]` is the model
/// timestep used at chain step `k`.
pub fn sample<E: Element, M: EpsModel<E> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: &Tensor<E>,
    pred_shape: &[usize],
    chain: &NoiseSchedule,
    model_t: &[usize],
    rng: &mut R,
) -> Result<Tensor<E>> {
    if model_t.len() != chain.steps() {
        return Err(Error::Param(format!(
            "{} model timesteps for a {}-step chain",
            model_t.len(),
            chain.steps()
        )));
    }
    let b = pred_shape[0];
    let mut x = Tensor::randn(pred_shape, 1.0, rng);
    for k in (1..=chain.steps()).rev() {
        let mut g = Graph::new();
        let c = g.constant(cond.clone());
        let xv = g.constant(x.clone());
        let ts = vec![model_t[k - 1]; b];
        let eps = model.predict_eps(&mut g, c, xv, &ts)?;
        let z = if k > 1 {
            Tensor::randn(pred_shape, 1.0, rng)
        } else {
            Tensor::zeros(pred_shape)
        };
        x = reverse_step(&x, g.value(eps), k, &z, chain)?;
    }
    Ok(x)
}
