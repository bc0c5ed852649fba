//! Dormand–Prince 5(4) integration, adaptive or on a fixed grid.
//!
//! The adaptive driver follows Hairer, Nørsett & Wanner: FSAL stages, an
//! RMS error norm with mixed absolute/relative scaling, PI step-size control
//! and the standard starting-step heuristic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Upper bound on attempted steps (accepted plus rejected).
    pub max_steps: usize,
    /// Largest allowed step; `None` means the whole span.
    pub max_step: Option<f64>,
    /// Keep every accepted state, not just the last.
    pub keep_states: bool,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { abs_tol: 1e-5, rel_tol: 1e-4, max_steps: 10_000, max_step: None, keep_states: false }
    }
}

impl OdeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::invalid(format!("tolerances must be positive, got abs {} rel {}", self.abs_tol, self.rel_tol)));
        }
        if self.max_steps == 0 || self.max_step.is_some_and(|h| !(h > 0.0)) {
            return Err(Error::invalid("step limits must be positive"));
        }
        Ok(())
    }
}

/// Accepted times and (optionally all) accepted states.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Every accepted state when requested, otherwise only the latest one.
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    fn record(&mut self, t: f64, y: &[f64], keep: bool) {
        self.times.push(t);
        if keep || self.states.is_empty() {
            self.states.push(y.to_vec());
        } else {
            let last = self.states.last_mut().expect("nonempty");
            last.copy_from_slice(y);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dopri5Result {
    pub state: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Scaled error norm of every attempted step, in order.
    pub errors: Vec<f64>,
    pub trajectory: Trajectory,
}

struct Stepper<'a, F> {
    f: &'a mut F,
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
    evaluations: usize,
    trajectory: Trajectory,
}

impl<F> Stepper<'_, F>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    fn eval(&mut self, t: f64, y: &[f64], slot: usize) -> Result<()> {
        let mut out = std::mem::take(&mut self.k[slot]);
        let r = (self.f)(t, y, &mut out);
        self.k[slot] = out;
        self.evaluations += 1;
        if let Err(e) = r {
            return Err(self.fail(t, format!("right-hand side failed: {e}")));
        }
        if self.k[slot].iter().any(|v| !v.is_finite()) {
            return Err(self.fail(t, "right-hand side is not finite".into()));
        }
        Ok(())
    }

    fn fail(&self, t: f64, reason: String) -> Error {
        Error::Integration { reason, t, partial: Box::new(self.trajectory.clone()) }
    }

    /// Stages 2..=7 from `k[0] = f(t, y)`; writes the fifth-order update
    /// into `y_new` and returns the embedded error vector in `tmp`'s place.
    fn step(&mut self, t: f64, y: &[f64], h: f64, y_new: &mut [f64]) -> Result<()> {
        for s in 1..7 {
            for i in 0..y.len() {
                let mut acc = 0.0;
                for (j, a) in A[s][..s].iter().enumerate() {
                    acc += a * self.k[j][i];
                }
                self.tmp[i] = y[i] + h * acc;
            }
            let tmp = std::mem::take(&mut self.tmp);
            let r = self.eval(t + C[s] * h, &tmp, s);
            self.tmp = tmp;
            r?;
        }
        // Stage 7 was evaluated at the fifth-order solution.
        y_new.copy_from_slice(&self.tmp);
        Ok(())
    }

    fn error_norm(&self, y: &[f64], y_new: &[f64], h: f64, opts: &OdeOptions) -> f64 {
        let mut acc = 0.0;
        for i in 0..y.len() {
            let err: f64 = h * (0..7).map(|s| E[s] * self.k[s][i]).sum::<f64>();
            let sc = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            acc += (err / sc).powi(2);
        }
        (acc / y.len().max(1) as f64).sqrt()
    }
}

fn check_span(t0: f64, t1: f64) -> Result<()> {
    if !(t0.is_finite() && t1.is_finite() && t1 != t0) {
        return Err(Error::invalid(format!("time span [{t0}, {t1}] is empty or not finite")));
    }
    Ok(())
}

fn stepper<F>(f: &mut F, n: usize) -> Stepper<'_, F> {
    Stepper { f, k: vec![vec![0.0; n]; 7], tmp: vec![0.0; n], evaluations: 0, trajectory: Trajectory::default() }
}

/// Adaptive integration of `y' = f(t, y)` from `t0` to `t1`, which may lie
/// on either side of `t0`.
pub fn dopri5<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], opts: &OdeOptions) -> Result<Dopri5Result>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    check_span(t0, t1)?;
    opts.validate()?;
    let n = y0.len();
    let span = (t1 - t0).abs();
    let dir = (t1 - t0).signum();
    let h_max = opts.max_step.unwrap_or(span).min(span);
    let mut st = stepper(&mut f, n);
    let mut y = y0.to_vec();
    let mut t = t0;
    st.trajectory.record(t, &y, opts.keep_states);
    st.eval(t, &y, 0)?;

    let mut h = initial_step(&mut st, t, &y, opts, h_max, dir)?;
    let mut y_new = vec![0.0; n];
    let (mut accepted, mut rejected) = (0, 0);
    let mut errors = Vec::new();
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;
    let expo1 = 0.2 - BETA * 0.75;

    while dir * (t1 - t) > 0.0 {
        if accepted + rejected >= opts.max_steps {
            return Err(st.fail(t, format!("step limit {} reached", opts.max_steps)));
        }
        let last = h >= dir * (t1 - t) - 1e-12 * span;
        if last {
            h = dir * (t1 - t);
        }
        st.step(t, &y, dir * h, &mut y_new)?;
        let err = st.error_norm(&y, &y_new, h, opts);
        errors.push(err);
        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = (h / fac).min(h_max);
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err.max(1e-4);
            accepted += 1;
            t = if last { t1 } else { t + dir * h };
            std::mem::swap(&mut y, &mut y_new);
            st.k.swap(0, 6);
            st.trajectory.record(t, &y, opts.keep_states);
            last_rejected = false;
            h = h_new;
        } else {
            rejected += 1;
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
        if !(h > 1e-14 * span) {
            return Err(st.fail(t, format!("step size underflow ({h:e})")));
        }
    }
    Ok(Dopri5Result { state: y, accepted, rejected, evaluations: st.evaluations, errors, trajectory: st.trajectory })
}

fn initial_step<F>(st: &mut Stepper<'_, F>, t: f64, y: &[f64], opts: &OdeOptions, h_max: f64, dir: f64) -> Result<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y.len().max(1) as f64;
    let sc: Vec<f64> = y.iter().map(|v| opts.abs_tol + opts.rel_tol * v.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt();
    let d0 = norm(y);
    let d1 = norm(&st.k[0]);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(h_max);
    let y1: Vec<f64> = y.iter().zip(&st.k[0]).map(|(a, b)| a + dir * h0 * b).collect();
    st.eval(t + dir * h0, &y1, 1)?;
    let diff: Vec<f64> = st.k[1].iter().zip(&st.k[0]).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(h_max))
}

/// The fifth-order Dormand–Prince formula on `steps` equal steps.
pub fn dopri5_fixed<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], steps: usize, keep_states: bool) -> Result<Dopri5Result>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    check_span(t0, t1)?;
    if steps == 0 {
        return Err(Error::invalid("fixed-step integration needs at least one step"));
    }
    let h = (t1 - t0) / steps as f64;
    let mut st = stepper(&mut f, y0.len());
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; y.len()];
    st.trajectory.record(t0, &y, keep_states);
    st.eval(t0, &y, 0)?;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        st.step(t, &y, h, &mut y_new)?;
        std::mem::swap(&mut y, &mut y_new);
        st.k.swap(0, 6);
        let tn = if i + 1 == steps { t1 } else { t0 + (i + 1) as f64 * h };
        st.trajectory.record(tn, &y, keep_states);
    }
    Ok(Dopri5Result { state: y, accepted: steps, rejected: 0, evaluations: st.evaluations, errors: Vec::new(), trajectory: st.trajectory })
}
