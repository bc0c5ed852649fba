//! Empirical order of the fixed-step Dormand–Prince scheme.

use gadolab::ode::{self, OdeOptions};

fn exp_rhs(_: f64, y: &[f64], out: &mut [f64]) -> gadolab::Result<()> {
    out[0] = y[0];
    Ok(())
}

/// Absolute error at `t = 1` of `x' = x, x(0) = 1` with `n` fixed steps.
pub fn fixed_error(n: usize) -> f64 {
    let r = ode::dopri5_fixed(exp_rhs, 0.0, 1.0, &[1.0], n, false).unwrap();
    (r.state[0] - std::f64::consts::E).abs()
}

/// Least-squares slope of `log err` against `log h` over the step counts.
pub fn observed_order(counts: &[usize]) -> f64 {
    let pts: Vec<(f64, f64)> = counts.iter().map(|&n| ((1.0 / n as f64).ln(), fixed_error(n).ln())).collect();
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Relative error of the adaptive solver at `t = 1` under default tolerances.
pub fn adaptive_relative_error() -> f64 {
    let r = ode::dopri5(exp_rhs, 0.0, 1.0, &[1.0], &OdeOptions::default()).unwrap();
    (r.state[0] - std::f64::consts::E).abs() / std::f64::consts::E
}
