//! Forward noising, the noise-regression objective, classifier-free
//! guidance, and the DDPM / DDIM / PLMS samplers.

use std::cell::{Cell, RefCell};

use fsn_tensor::{no_grad, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionProbe, Conditioning, Denoiser};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear β schedule. Index `t` runs over `0..T`; `alpha_bar[0] = alpha[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.timesteps;
        let ok = n >= 2 && 0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0;
        if !ok {
            return Err(contract(format!("invalid schedule {cfg:?}")));
        }
        let betas: Vec<f64> =
            (0..n).map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(contract(format!("timestep {t} outside 0..{}", self.timesteps())));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(&ScheduleConfig::default()).expect("default schedule is valid")
    }
}

/// Per-item coefficient broadcast over the trailing axes of `like`.
fn per_item(values: Vec<f64>, like: &[usize]) -> Result<Tensor> {
    let mut shape = vec![1; like.len()];
    shape[0] = values.len();
    Ok(Tensor::new(values, &shape)?)
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`, with one `t` per batch item.
pub fn q_sample(schedule: &NoiseSchedule, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(contract(format!("z0 {:?} and noise {:?} differ", z0.shape(), eps.shape())));
    }
    if z0.rank() == 0 || z0.dim(0) != t.len() {
        return Err(contract(format!("{} timesteps for a batch of shape {:?}", t.len(), z0.shape())));
    }
    for &s in t {
        schedule.check(s)?;
    }
    let a = per_item(t.iter().map(|&s| schedule.alpha_bar(s).sqrt()).collect(), z0.shape())?;
    let b = per_item(t.iter().map(|&s| (1.0 - schedule.alpha_bar(s)).sqrt()).collect(), z0.shape())?;
    Ok(z0.mul(&a)?.add(&eps.mul(&b)?)?)
}

/// Anything that predicts noise.
pub trait EpsModel {
    fn predict(&self, z: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

impl EpsModel for Denoiser {
    fn predict(&self, z: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.forward(z, t, cond, None)
    }
}

/// A denoiser whose attention layers report to a probe.
pub struct Probed<'a> {
    pub model: &'a Denoiser,
    pub probe: RefCell<&'a mut dyn AttentionProbe>,
}

impl<'a> Probed<'a> {
    pub fn new(model: &'a Denoiser, probe: &'a mut dyn AttentionProbe) -> Self {
        Self { model, probe: RefCell::new(probe) }
    }
}

impl EpsModel for Probed<'_> {
    fn predict(&self, z: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let mut probe = self.probe.borrow_mut();
        self.model.forward(z, t, cond, Some(&mut **probe))
    }
}

/// Counts calls to the wrapped model.
pub struct CallCounter<'a, M: EpsModel + ?Sized> {
    pub inner: &'a M,
    pub calls: Cell<usize>,
}

impl<'a, M: EpsModel + ?Sized> CallCounter<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self { inner, calls: Cell::new(0) }
    }
}

impl<M: EpsModel + ?Sized> EpsModel for CallCounter<'_, M> {
    fn predict(&self, z: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(z, t, cond)
    }
}

/// Unconditional input used for dropped prompts and the guidance branch:
/// the null-prompt embedding with no layout.
#[derive(Debug, Clone)]
pub struct NullCondition {
    /// `S·D` values of the encoded all-PAD prompt.
    pub text: Vec<f64>,
}

impl NullCondition {
    /// Replaces the text of every item whose `drop` flag is set with the
    /// null embedding and opens its layout to all ones, which makes its
    /// attention plain cross-attention.
    pub fn apply(&self, cond: &Conditioning, drop: &[bool]) -> Result<Conditioning> {
        if !drop.iter().any(|&d| d) {
            return Ok(cond.clone());
        }
        let row = self.text.len();
        if cond.text.numel() != row * drop.len() {
            return Err(contract("null embedding does not match the text batch"));
        }
        let mut text = cond.text.to_vec();
        for (b, _) in drop.iter().enumerate().filter(|(_, &d)| d) {
            text[b * row..(b + 1) * row].copy_from_slice(&self.text);
        }
        let layout = match &cond.layout {
            None => None,
            Some(l) => {
                let per = l.numel() / drop.len();
                let mut v = l.to_vec();
                for (b, _) in drop.iter().enumerate().filter(|(_, &d)| d) {
                    v[b * per..(b + 1) * per].iter_mut().for_each(|x| *x = 1.0);
                }
                Some(Tensor::new(v, l.shape())?)
            }
        };
        Ok(Conditioning {
            text: Tensor::new(text, cond.text.shape())?,
            layout,
            lambda: cond.lambda,
            overrides: cond.overrides.clone(),
        })
    }

    /// Batch of `b` null conditionings.
    pub fn batch(&self, b: usize, seq_len: usize) -> Result<Conditioning> {
        let dim = self.text.len() / seq_len;
        Ok(Conditioning::text_only(Tensor::new(self.text.repeat(b), &[b, seq_len, dim])?))
    }
}

/// Fixed random draws of one training step.
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub drop: Vec<bool>,
}

impl LossDraw {
    /// Per item: the unconditional coin, then `t`; the noise tensor last.
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, shape: &[usize], p_uncond: f64, rng: &mut R) -> Self {
        let b = shape[0];
        let mut t = Vec::with_capacity(b);
        let mut drop = Vec::with_capacity(b);
        for _ in 0..b {
            drop.push(rng.random::<f64>() < p_uncond);
            t.push(rng.random_range(0..schedule.timesteps()));
        }
        Self { t, eps: Tensor::randn(shape, rng), drop }
    }
}

/// Mean squared error between the drawn noise and the model's prediction.
pub fn loss_for_draw(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    cond: &Conditioning,
    null: Option<&NullCondition>,
    draw: &LossDraw,
) -> Result<Tensor> {
    let z_t = q_sample(schedule, z0, &draw.t, &draw.eps)?;
    let cond = match null {
        Some(n) => n.apply(cond, &draw.drop)?,
        None => cond.clone(),
    };
    let pred = model.predict(&z_t, &draw.t, &cond)?;
    let loss = pred.sub(&draw.eps)?.square()?.mean_all()?;
    let v = loss.item()?;
    if !v.is_finite() {
        return Err(TensorError::Divergence(format!("training loss is {v}")).into());
    }
    Ok(loss)
}

/// Draws `t`, `ε` and the unconditional coin from `rng`, then evaluates
/// [`loss_for_draw`].
pub fn training_loss<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    cond: &Conditioning,
    null: Option<&NullCondition>,
    p_uncond: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let p = if null.is_some() { p_uncond } else { 0.0 };
    let draw = LossDraw::sample(schedule, z0.shape(), p, rng);
    loss_for_draw(model, schedule, z0, cond, null, &draw)
}

/// `ε_u + s·(ε_c − ε_u)`; `s = 1` returns `ε_c` and `s = 0` returns `ε_u`
/// unchanged.
pub fn cfg_eps(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(contract("guidance branches differ in shape"));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let data = eps_cond.data().iter().zip(eps_uncond.data().iter()).map(|(c, u)| u + s * (c - u)).collect();
    Ok(Tensor::new(data, eps_cond.shape())?)
}

/// Result of one reverse step.
#[derive(Debug, Clone)]
pub struct Step {
    pub z_prev: Tensor,
    pub z0_hat: Tensor,
}

/// Generalized DDIM update from `t` to `t_prev` (`None` is the clean end,
/// `ᾱ = 1`). The predicted `ẑ0` is clamped to `[-1, 1]` and the noise
/// re-derived from the clamped estimate. `eta = 0` is deterministic; for
/// `eta > 0` fresh noise is drawn from `rng`.
pub fn ddim_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    rng: &mut R,
) -> Result<Step> {
    schedule.check(t)?;
    if let Some(p) = t_prev {
        if p >= t {
            return Err(contract(format!("t_prev {p} must precede t {t}")));
        }
    }
    if z_t.shape() != eps.shape() {
        return Err(contract("noise prediction and sample differ in shape"));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = t_prev.map_or(1.0, |p| schedule.alpha_bar(p));
    let (sa, s1a) = (ab.sqrt(), (1.0 - ab).sqrt());
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();

    let (z, e) = (z_t.data(), eps.data());
    let z0: Vec<f64> = z.iter().zip(e.iter()).map(|(z, e)| ((z - s1a * e) / sa).clamp(-1.0, 1.0)).collect();
    let mut out: Vec<f64> = z
        .iter()
        .zip(&z0)
        .map(|(z, x0)| {
            let e = (z - sa * x0) / s1a;
            ab_prev.sqrt() * x0 + dir * e
        })
        .collect();
    if sigma > 0.0 {
        let noise = Tensor::randn(z_t.shape(), rng);
        out.iter_mut().zip(noise.data().iter()).for_each(|(o, n)| *o += sigma * n);
    }
    Ok(Step { z_prev: Tensor::new(out, z_t.shape())?, z0_hat: Tensor::new(z0, z_t.shape())? })
}

/// Ancestral step: DDIM with `eta = 1`.
pub fn ddpm_step<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    rng: &mut R,
) -> Result<Step> {
    ddim_step(schedule, z_t, eps, t, t_prev, 1.0, rng)
}

/// PLMS combination of the current and up to three previous predictions.
/// With no history the current prediction is returned.
pub fn plms_combine(current: &Tensor, history: &[Tensor]) -> Result<Tensor> {
    let coeffs: &[f64] = match history.len() {
        0 => return Ok(current.clone()),
        1 => &[3.0, -1.0],
        2 => &[23.0, -16.0, 5.0],
        _ => &[55.0, -59.0, 37.0, -9.0],
    };
    let denom = match history.len() {
        1 => 2.0,
        2 => 12.0,
        _ => 24.0,
    };
    let mut terms = vec![current];
    terms.extend(history.iter().rev().take(coeffs.len() - 1));
    let n = current.numel();
    let mut out = vec![0.0; n];
    for (c, t) in coeffs.iter().zip(&terms) {
        out.iter_mut().zip(t.data().iter()).for_each(|(o, v)| *o += c * v);
    }
    out.iter_mut().for_each(|o| *o /= denom);
    Ok(Tensor::new(out, current.shape())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Ddim,
    Plms,
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Method::Ddpm),
            "ddim" => Ok(Method::Ddim),
            "plms" => Ok(Method::Plms),
            other => Err(contract(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: Method,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { method: Method::Plms, steps: 50, guidance_scale: 2.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.timesteps() {
            return Err(contract(format!("sampler steps {} outside 1..={}", self.steps, schedule.timesteps())));
        }
        if self.guidance_scale.is_nan() || self.guidance_scale < 0.0 {
            return Err(contract(format!("guidance scale {} must be non-negative", self.guidance_scale)));
        }
        Ok(())
    }
}

/// Uniform-stride timesteps, descending: `[(n-1)·c, …, c, 0]` with
/// `c = T / n`.
pub fn sampling_timesteps(total: usize, steps: usize) -> Vec<usize> {
    let c = total / steps;
    (0..steps).rev().map(|i| i * c).collect()
}

/// Standard-normal starting noise, one independent stream per seed.
pub fn initial_noise(item_shape: &[usize], seeds: &[u64]) -> Result<Tensor> {
    let n: usize = item_shape.iter().product();
    let mut data = Vec::with_capacity(n * seeds.len());
    for &s in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        data.extend(Tensor::randn(&[n], &mut rng).to_vec());
    }
    let mut shape = vec![seeds.len()];
    shape.extend_from_slice(item_shape);
    Ok(Tensor::new(data, &shape)?)
}

fn guided(
    model: &dyn EpsModel,
    z: &Tensor,
    t: usize,
    cond: &Conditioning,
    uncond: &Conditioning,
    scale: f64,
) -> Result<Tensor> {
    let ts = vec![t; z.dim(0)];
    if scale == 1.0 {
        return model.predict(z, &ts, cond);
    }
    let e_c = model.predict(z, &ts, cond)?;
    let e_u = model.predict(z, &ts, uncond)?;
    cfg_eps(&e_c, &e_u, scale)
}

/// Runs the configured sampler from `z_start` and returns the clean sample
/// clamped to `[-1, 1]`.
///
/// PLMS takes one improved-Euler step first (two model evaluations), then
/// multistep updates of increasing order. It needs at least 4 steps and
/// otherwise falls back to DDIM with a logged notice.
pub fn sample(
    model: &dyn EpsModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    cond: &Conditioning,
    uncond: &Conditioning,
    z_start: &Tensor,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let _guard = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ts = sampling_timesteps(schedule.timesteps(), cfg.steps);
    let mut method = cfg.method;
    if method == Method::Plms && cfg.steps < 4 {
        log::info!("PLMS needs at least 4 steps; using DDIM for {} steps", cfg.steps);
        method = Method::Ddim;
    }
    let mut z = z_start.detach();
    let mut history: Vec<Tensor> = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied();
        let e_t = guided(model, &z, t, cond, uncond, cfg.guidance_scale)?;
        let step = match method {
            Method::Ddim => ddim_step(schedule, &z, &e_t, t, t_prev, 0.0, &mut rng)?,
            Method::Ddpm => ddpm_step(schedule, &z, &e_t, t, t_prev, &mut rng)?,
            Method::Plms => {
                let e_prime = if history.is_empty() {
                    let next = t_prev.expect("at least 4 steps");
                    let probe = ddim_step(schedule, &z, &e_t, t, t_prev, 0.0, &mut rng)?;
                    let e_next = guided(model, &probe.z_prev, next, cond, uncond, cfg.guidance_scale)?;
                    e_t.add(&e_next)?.scale(0.5)?
                } else {
                    plms_combine(&e_t, &history)?
                };
                history.push(e_t);
                if history.len() > 3 {
                    history.remove(0);
                }
                ddim_step(schedule, &z, &e_prime, t, t_prev, 0.0, &mut rng)?
            }
        };
        if !step.z_prev.all_finite() {
            return Err(TensorError::Divergence(format!("non-finite sample at t = {t}")).into());
        }
        z = step.z_prev;
    }
    let out: Vec<f64> = z.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(Tensor::new(out, z.shape())?)
}
