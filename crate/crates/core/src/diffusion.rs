//! Conditional variance-preserving diffusion in the DDPM discretization.
//!
//! `alpha_t` (t = 1..=T) is the per-step noise rate; `alpha_bar_t` is the
//! product of `1 - alpha_s` up to `t`. The network predicts the injected
//! noise, and the score of the noised marginal is `-eps / sqrt(1 - alpha_bar)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, Role, UNetLite};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub first: f64,
    pub last: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 2000, first: 1e-3, last: 5e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

fn decompose(x: f64) -> (u128, i32) {
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let frac = (bits & ((1u64 << 52) - 1)) as u128;
    (frac | (1u128 << 52), exp - 1075)
}

/// `(a (n - k) + b k) / n` rounded once to the nearest double (ties to even),
/// for positive normal `a`, `b` within a factor `2^40` of each other.
fn exact_lerp(a: f64, b: f64, k: usize, n: usize) -> f64 {
    let ((ma, ea), (mb, eb)) = (decompose(a), decompose(b));
    let e = ea.min(eb);
    let big_a = ma << (ea - e);
    let big_b = mb << (eb - e);
    let num = (big_a * (n - k) as u128 + big_b * k as u128) << 3;
    let (q, r) = (num / n as u128, num % n as u128);
    // A sticky bit below the rounding position makes the single
    // integer-to-float rounding exact.
    let q = (q << 1) | u128::from(r != 0);
    let scale = f64::from_bits(((e - 4 + 1023) as u64) << 52);
    q as f64 * scale
}

impl NoiseSchedule {
    /// `steps` equidistant rates from `first` to `last`, each the double
    /// nearest to the exact linear interpolant.
    pub fn linear(first: f64, last: f64, steps: usize) -> Result<NoiseSchedule> {
        let normal = |v: f64| v.is_normal() && v > 0.0 && v < 1.0;
        if !(normal(first) && normal(last) && first <= last) {
            return Err(Error::invalid(format!("schedule endpoints {first}, {last} must satisfy 0 < first <= last < 1")));
        }
        if steps < 2 || steps > 1 << 20 {
            return Err(Error::invalid(format!("schedule length {steps} outside 2..=2^20")));
        }
        if (decompose(first).1 - decompose(last).1).abs() > 40 {
            return Err(Error::invalid("schedule endpoints differ by more than a factor 2^40"));
        }
        let n = steps - 1;
        let alphas: Vec<f64> = (0..steps).map(|k| exact_lerp(first, last, k, n)).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        let mut acc = 1.0;
        alpha_bars.push(acc);
        for a in &alphas {
            acc *= 1.0 - a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { alphas, alpha_bars })
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<NoiseSchedule> {
        Self::linear(c.first, c.last, c.steps)
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_bar_t` for `t` in `0..=T`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::invalid(format!("diffusion time {t} outside 0..={}", self.len())));
        }
        Ok(())
    }

    /// Descending sampling times for a strided reverse pass: `steps` values
    /// spread evenly over `1..=T`, always starting at `T`.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.len();
        if steps == 0 || steps > t_max {
            return Err(Error::invalid(format!("sampling steps {steps} outside 1..={t_max}")));
        }
        Ok((1..=steps).rev().map(|i| ((i * t_max) as f64 / steps as f64).round() as usize).collect())
    }
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`; `t = 0` returns `x_0`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("forward_noise", format!("{} signal vs {} noise values", x0.len(), eps.len())));
    }
    if t == 0 {
        return Ok(x0.to_vec());
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| (s * x as f64 + n * e as f64) as f32).collect())
}

/// Noise-prediction loss `mean |eps_hat - eps|^2` with `t` uniform on `1..=T`
/// per sample. `predict` receives the noised batch and the drawn times.
pub fn dsm_loss<P>(g: &mut Graph, schedule: &NoiseSchedule, x0: &Tensor, rng: &mut Rng, predict: P) -> Result<Var>
where
    P: FnOnce(&mut Graph, Var, &[usize]) -> Result<Var>,
{
    let n = x0.shape()[0];
    let per = x0.numel() / n;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.len())).collect();
    let eps = rng::normal_vec(rng, x0.numel());
    let mut xt = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        let r = i * per..(i + 1) * per;
        xt.extend(forward_noise(schedule, &x0.data()[r.clone()], t, &eps[r])?);
    }
    let xt = g.constant(Tensor::new(x0.shape(), xt)?);
    let target = g.constant(Tensor::new(x0.shape(), eps)?);
    let pred = predict(g, xt, &ts)?;
    g.mse(pred, target)
}

/// Weights `(sqrt(1 - alpha_bar), sqrt(alpha_bar))` of `x_t` and of the
/// network output in the noise prediction of a diffusion network.
fn eps_weights(alpha_bar: f64) -> (f64, f64) {
    ((1.0 - alpha_bar).sqrt(), alpha_bar.sqrt())
}

/// [`dsm_loss`] for a diffusion network conditioned on `y: [N, 7, H, W]`.
///
/// The noise prediction is `sqrt(1 - alpha_bar) x_t + sqrt(alpha_bar) F`
/// with `F` the network output, so it tends to `x_t` as the signal vanishes.
pub fn net_dsm_loss(g: &mut Graph, net: &UNetLite, bound: &Bound, schedule: &NoiseSchedule, x0: &Tensor, y: &Tensor, rng: &mut Rng) -> Result<Var> {
    let yv = g.constant(y.clone());
    let t_max = schedule.len() as f32;
    dsm_loss(g, schedule, x0, rng, |g, xt, ts| {
        let input = g.concat_channels(&[xt, yv])?;
        let t: Vec<f32> = ts.iter().map(|&t| t as f32 / t_max).collect();
        let f = net.forward_graph(g, bound, input, Some(&t))?;
        let n = ts.len();
        let (cx, cf): (Vec<f32>, Vec<f32>) = ts
            .iter()
            .map(|&t| {
                let (a, b) = eps_weights(schedule.alpha_bar(t));
                (a as f32, b as f32)
            })
            .unzip();
        let cx = g.constant(Tensor::new(&[n, 1], cx)?);
        let cf = g.constant(Tensor::new(&[n, 1], cf)?);
        let zero = g.constant(Tensor::zeros(&[n, 1]));
        let skip = g.affine_scale_shift(xt, cx, zero)?;
        let out = g.affine_scale_shift(f, cf, zero)?;
        g.add(skip, out)
    })
}

/// Euler–Maruyama integration of the reverse SDE
/// `dX = alpha (X / 2 + score) dt + sqrt(alpha) dW` from `x` (a draw of the
/// prior) down to `t = 0`, visiting `steps` evenly spaced times. Between
/// visited times the rate is `1 - alpha_bar_t / alpha_bar_prev`, which is
/// `alpha_t` when every step is visited. The step into `t = 0` returns the
/// drift-only mean and adds no noise.
///
/// `score(x, t, alpha_bar_t)` returns the score at the current state.
pub fn reverse_sample<F>(schedule: &NoiseSchedule, steps: usize, mut x: Vec<f32>, rng: &mut Rng, mut score: F) -> Result<Vec<f32>>
where
    F: FnMut(&[f32], usize, f64) -> Result<Vec<f32>>,
{
    let times = schedule.timesteps(steps)?;
    for (i, &t) in times.iter().enumerate() {
        let prev = times.get(i + 1).copied().unwrap_or(0);
        let rate = if t == prev + 1 { schedule.alpha(t) } else { 1.0 - schedule.alpha_bar(t) / schedule.alpha_bar(prev) };
        let s = score(&x, t, schedule.alpha_bar(t))?;
        if s.len() != x.len() {
            return Err(Error::shape("reverse_sample", format!("score has {} values for a {}-value state", s.len(), x.len())));
        }
        let last = i + 1 == times.len();
        let xi = if last { vec![0.0; x.len()] } else { rng::normal_vec(rng, x.len()) };
        let sq = rate.sqrt();
        for ((v, &sv), &z) in x.iter_mut().zip(&s).zip(&xi) {
            let xv = *v as f64;
            *v = (xv + rate * (0.5 * xv + sv as f64) + sq * z as f64) as f32;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("reverse diffusion state became non-finite at t = {t}")));
        }
    }
    Ok(x)
}

/// Draws one sample per conditioning stack in `y: [N, 7, H, W]`.
pub fn dm_sample(net: &UNetLite, schedule: &NoiseSchedule, y: &Tensor, steps: usize, rng: &mut Rng) -> Result<Tensor> {
    if net.role() != Role::Dm {
        return Err(Error::invalid(format!("dm_sample needs a dm network, got {}", net.role().name())));
    }
    let s = y.shape();
    let shape = [s[0], 1, s[2], s[3]];
    let n: usize = shape.iter().product();
    let t_max = schedule.len() as f32;
    let x = rng::normal_vec(rng, n);
    let out = reverse_sample(schedule, steps, x, rng, |x, t, ab| {
        let xt = Tensor::new(&shape, x.to_vec())?;
        let f = net.forward_conditional(&xt, y, &vec![t as f32 / t_max; shape[0]])?;
        let (cx, cf) = eps_weights(ab);
        Ok(x.iter().zip(f.data()).map(|(&xv, &fv)| (-(cx * xv as f64 + cf * fv as f64) / cx) as f32).collect())
    })?;
    Tensor::new(&shape, out)
}
