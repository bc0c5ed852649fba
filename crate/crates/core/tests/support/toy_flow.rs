//! A small MLP velocity field trained by conditional flow matching on a
//! two-mode Gaussian mixture in 2D.

use gadolab::autodiff::{Graph, Var};
use gadolab::flowmatch::{self, SolverMode, StepStats};
use gadolab::nets::time_embedding;
use gadolab::optim::{AdamConfig, AdamState};
use gadolab::rng::{self, Rng};
use gadolab::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub const MODES: [[f32; 2]; 2] = [[-1.5, -1.0], [1.5, 1.0]];
pub const SIGMA: f32 = 0.15;
const WIDTH: usize = 64;
const TIME: usize = 16;

pub fn draw(rng: &mut Rng, n: usize) -> Vec<f32> {
    let noise = Normal::new(0.0f32, SIGMA).unwrap();
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let m = MODES[rng.random_range(0..2)];
        out.push(m[0] + noise.sample(rng));
        out.push(m[1] + noise.sample(rng));
    }
    out
}

pub struct Mlp {
    pub params: Vec<Tensor>,
}

impl Mlp {
    pub fn new(rng: &mut Rng) -> Mlp {
        let mut init = |fan_in: usize, shape: &[usize]| {
            let n = shape.iter().product();
            let s = (1.0 / fan_in as f32).sqrt();
            Tensor::new(shape, rng::normal_vec(rng, n).into_iter().map(|v| v * s).collect()).unwrap().with_grad()
        };
        let params = vec![
            init(2, &[2, WIDTH]),
            init(TIME, &[TIME, WIDTH]),
            Tensor::zeros(&[WIDTH]).with_grad(),
            init(WIDTH, &[WIDTH, WIDTH]),
            Tensor::zeros(&[WIDTH]).with_grad(),
            init(WIDTH, &[WIDTH, 2]),
            Tensor::zeros(&[2]).with_grad(),
        ];
        Mlp { params }
    }

    fn graph(&self, g: &mut Graph, p: &[Var], x: Var, t: &[f32]) -> gadolab::Result<Var> {
        let e = g.constant(time_embedding(t, TIME));
        let a = g.matmul(x, p[0])?;
        let b = g.linear(e, p[1], p[2])?;
        let h = g.add(a, b)?;
        let h = g.silu(h)?;
        let h = g.linear(h, p[3], p[4])?;
        let h = g.silu(h)?;
        g.linear(h, p[5], p[6])
    }

    pub fn velocity(&self, x: &[f32], t: f32) -> gadolab::Result<Vec<f32>> {
        let n = x.len() / 2;
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|w| g.constant(w.clone())).collect();
        let xv = g.constant(Tensor::new(&[n, 2], x.to_vec())?);
        let v = self.graph(&mut g, &p, xv, &vec![t; n])?;
        Ok(g.value(v).data().to_vec())
    }

    /// Adam on the flow-matching loss; returns the loss of every step.
    pub fn train(&mut self, rng: &mut Rng, steps: usize, batch: usize) -> Vec<f32> {
        let mut adam = AdamState::new(AdamConfig { lr: 2e-3, ..Default::default() }, &self.params);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let x = Tensor::new(&[batch, 2], draw(rng, batch)).unwrap();
            let mut g = Graph::new();
            let p: Vec<Var> = self.params.iter().map(|w| g.leaf(w)).collect();
            let loss = flowmatch::cfm_loss(&mut g, &x, rng, |g, xt, t| self.graph(g, &p, xt, t)).unwrap();
            losses.push(g.value(loss).data()[0]);
            g.backward(loss).unwrap();
            for (w, &v) in self.params.iter_mut().zip(&p) {
                w.zero_grad();
                g.accumulate_into(v, w).unwrap();
            }
            adam.step(&mut self.params).unwrap();
        }
        losses
    }

    pub fn sample(&self, rng: &mut Rng, n: usize, mode: &SolverMode) -> (Vec<f32>, StepStats) {
        let z = rng::normal_vec(rng, 2 * n);
        flowmatch::integrate(&z, mode, |x, t| self.velocity(x, t)).unwrap()
    }
}

/// Fraction of points within `3 SIGMA` of the nearest mode.
pub fn fraction_near_modes(points: &[f32]) -> f64 {
    let near = points
        .chunks(2)
        .filter(|p| MODES.iter().any(|m| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt() < 3.0 * SIGMA))
        .count();
    near as f64 / (points.len() / 2) as f64
}
