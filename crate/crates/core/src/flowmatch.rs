//! Conditional flow matching on the linear path `x_t = (1 - t) z + t x`.
//!
//! Training regresses the velocity field onto `x - z`; sampling integrates
//! `dx/dt = v(x, y, t)` from a standard normal draw at `t = 0` to `t = 1`.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, Role, UNetLite};
use crate::ode::{self, OdeOptions};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// How the sampling ODE is discretized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SolverMode {
    /// Dormand–Prince fifth-order steps on a fixed grid.
    Fixed { steps: usize },
    /// Error-controlled Dormand–Prince 5(4).
    Adaptive(OdeOptions),
}

impl Default for SolverMode {
    fn default() -> Self {
        SolverMode::Fixed { steps: 10 }
    }
}

/// Path point per sample: `(1 - t_i) z_i + t_i x_i`.
pub fn interpolate(z: &[f32], x: &[f32], t: &[f32]) -> Result<Vec<f32>> {
    if z.len() != x.len() || t.is_empty() || x.len() % t.len() != 0 {
        return Err(Error::shape("interpolate", format!("{} latent, {} target values, {} times", z.len(), x.len(), t.len())));
    }
    let per = x.len() / t.len();
    Ok(z.iter()
        .zip(x)
        .enumerate()
        .map(|(i, (&zv, &xv))| {
            let ti = t[i / per];
            if ti == 0.0 {
                zv
            } else if ti == 1.0 {
                xv
            } else {
                (1.0 - ti) * zv + ti * xv
            }
        })
        .collect())
}

/// `mean |v(x_t, t) - (x - z)|^2` with `z ~ N(0, I)` and `t ~ U[0, 1]` per sample.
pub fn cfm_loss<P>(g: &mut Graph, x: &Tensor, rng: &mut Rng, predict: P) -> Result<Var>
where
    P: FnOnce(&mut Graph, Var, &[f32]) -> Result<Var>,
{
    let n = x.shape()[0];
    let t: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
    let z = rng::normal_vec(rng, x.numel());
    let xt = interpolate(&z, x.data(), &t)?;
    let u: Vec<f32> = x.data().iter().zip(&z).map(|(a, b)| a - b).collect();
    let xt = g.constant(Tensor::new(x.shape(), xt)?);
    let target = g.constant(Tensor::new(x.shape(), u)?);
    let pred = predict(g, xt, &t)?;
    g.mse(pred, target)
}

/// [`cfm_loss`] for a flow network conditioned on `y: [N, 7, H, W]`.
pub fn net_cfm_loss(g: &mut Graph, net: &UNetLite, bound: &Bound, x: &Tensor, y: &Tensor, rng: &mut Rng) -> Result<Var> {
    let yv = g.constant(y.clone());
    cfm_loss(g, x, rng, |g, xt, t| {
        let input = g.concat_channels(&[xt, yv])?;
        net.forward_graph(g, bound, input, Some(t))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Integrates `dx/dt = velocity(x, t)` from `z` over `[0, 1]`.
pub fn integrate<F>(z: &[f32], mode: &SolverMode, mut velocity: F) -> Result<(Vec<f32>, StepStats)>
where
    F: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let rhs = |t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
        let x: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        let v = velocity(&x, t.clamp(0.0, 1.0) as f32)?;
        if v.len() != out.len() {
            return Err(Error::shape("velocity", format!("{} values for a {}-value state", v.len(), out.len())));
        }
        out.iter_mut().zip(&v).for_each(|(o, &vv)| *o = vv as f64);
        Ok(())
    };
    let y0: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let r = match mode {
        SolverMode::Fixed { steps } => ode::dopri5_fixed(rhs, 0.0, 1.0, &y0, *steps, false)?,
        SolverMode::Adaptive(opts) => ode::dopri5(rhs, 0.0, 1.0, &y0, opts)?,
    };
    let stats = StepStats { accepted: r.accepted, rejected: r.rejected, evaluations: r.evaluations };
    Ok((r.state.into_iter().map(|v| v as f32).collect(), stats))
}

/// One sample per conditioning stack in `y: [N, 7, H, W]`, each integrated
/// separately so that step statistics are per sample.
pub fn fm_sample(net: &UNetLite, y: &Tensor, mode: &SolverMode, rng: &mut Rng) -> Result<(Tensor, Vec<StepStats>)> {
    if net.role() != Role::Fm {
        return Err(Error::invalid(format!("fm_sample needs an fm network, got {}", net.role().name())));
    }
    let s = y.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let hw = h * w;
    let z = rng::normal_vec(rng, n * hw);
    let mut out = Vec::with_capacity(n * hw);
    let mut stats = Vec::with_capacity(n);
    for i in 0..n {
        let yi = Tensor::new(&[1, s[1], h, w], y.data()[i * s[1] * hw..(i + 1) * s[1] * hw].to_vec())?;
        let (x, st) = integrate(&z[i * hw..(i + 1) * hw], mode, |x, t| {
            let xt = Tensor::new(&[1, 1, h, w], x.to_vec())?;
            Ok(net.forward_conditional(&xt, &yi, &[t])?.into_data())
        })?;
        out.extend(x);
        stats.push(st);
    }
    Ok((Tensor::new(&[n, 1, h, w], out)?, stats))
}

/// Writes `sample,accepted,rejected,evaluations` rows.
pub fn write_step_stats(path: &Path, labels: &[String], stats: &[StepStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample,accepted,rejected,evaluations")?;
    for (l, s) in labels.iter().zip(stats) {
        writeln!(f, "{l},{},{},{}", s.accepted, s.rejected, s.evaluations)?;
    }
    f.flush()?;
    Ok(())
}
