//! Central finite-difference oracle for the autodiff engine.
//!
//! Every op-kind has a naive `f64` reference forward written with plain index
//! loops. The oracle differentiates `sum(op(inputs) * r)` numerically through
//! that reference and compares against the engine's reverse-mode gradients.

use gadolab::autodiff::{Graph, OpKind};
use gadolab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    fn zeros(shape: &[usize]) -> Arr {
        Arr { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }
}

fn idx4(s: &[usize], n: usize, c: usize, i: usize, j: usize) -> usize {
    ((n * s[1] + c) * s[2] + i) * s[3] + j
}

/// Reference forward in f64.
pub fn reference(op: OpKind, xs: &[Arr]) -> Arr {
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (&xs[0], &xs[1]);
            let shape = if a.data.len() >= b.data.len() { a.shape.clone() } else { b.shape.clone() };
            let n: usize = shape.iter().product();
            let get = |t: &Arr, i: usize| if t.data.len() == 1 { t.data[0] } else { t.data[i] };
            let data = (0..n)
                .map(|i| {
                    let (x, y) = (get(a, i), get(b, i));
                    match op {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Arr { shape, data }
        }
        OpKind::MatMul => {
            let (a, b) = (&xs[0], &xs[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = Arr::zeros(&[m, n]);
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a.data[i * k + p] * b.data[p * n + j];
                    }
                    out.data[i * n + j] = s;
                }
            }
            out
        }
        OpKind::Conv2d => {
            let (x, w) = (&xs[0], &xs[1]);
            let (n, ci, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
            let mut out = Arr::zeros(&[n, co, h, wd]);
            for s in 0..n {
                for o in 0..co {
                    for i in 0..h {
                        for j in 0..wd {
                            let mut acc = xs.get(2).map_or(0.0, |b| b.data[o]);
                            for c in 0..ci {
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let yi = i as isize + ky as isize - (kh / 2) as isize;
                                        let xj = j as isize + kx as isize - (kw / 2) as isize;
                                        if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                            continue;
                                        }
                                        acc += w.data[((o * ci + c) * kh + ky) * kw + kx]
                                            * x.data[idx4(&x.shape, s, c, yi as usize, xj as usize)];
                                    }
                                }
                            }
                            out.data[idx4(&out.shape, s, o, i, j)] = acc;
                        }
                    }
                }
            }
            out
        }
        OpKind::Silu => map(&xs[0], |v| v / (1.0 + (-v).exp())),
        OpKind::Relu => map(&xs[0], |v| if v > 0.0 { v } else { 0.0 }),
        OpKind::Abs => map(&xs[0], f64::abs),
        OpKind::Scale(k) => map(&xs[0], |v| v * k as f64),
        OpKind::AddScalar(k) => map(&xs[0], |v| v + k as f64),
        OpKind::Sum => Arr { shape: vec![1], data: vec![xs[0].data.iter().sum()] },
        OpKind::Mean => Arr { shape: vec![1], data: vec![xs[0].data.iter().sum::<f64>() / xs[0].data.len() as f64] },
        OpKind::ConcatChannels => {
            let (n, h, w) = (xs[0].shape[0], xs[0].shape[2], xs[0].shape[3]);
            let ctot: usize = xs.iter().map(|t| t.shape[1]).sum();
            let mut out = Arr::zeros(&[n, ctot, h, w]);
            for s in 0..n {
                let mut c0 = 0;
                for t in xs {
                    for c in 0..t.shape[1] {
                        for i in 0..h {
                            for j in 0..w {
                                out.data[idx4(&out.shape, s, c0 + c, i, j)] = t.data[idx4(&t.shape, s, c, i, j)];
                            }
                        }
                    }
                    c0 += t.shape[1];
                }
            }
            out
        }
        OpKind::Downsample2x => {
            let x = &xs[0];
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let mut out = Arr::zeros(&[n, c, h / 2, w / 2]);
            for s in 0..n {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            out.data[idx4(&out.shape, s, ch, i / 2, j / 2)] +=
                                0.25 * x.data[idx4(&x.shape, s, ch, i, j)];
                        }
                    }
                }
            }
            out
        }
        OpKind::Upsample2x => {
            let x = &xs[0];
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let mut out = Arr::zeros(&[n, c, 2 * h, 2 * w]);
            for s in 0..n {
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            out.data[idx4(&out.shape, s, ch, i, j)] = x.data[idx4(&x.shape, s, ch, i / 2, j / 2)];
                        }
                    }
                }
            }
            out
        }
        OpKind::AffineScaleShift => {
            let (x, sc, sh) = (&xs[0], &xs[1], &xs[2]);
            let mut out = x.clone();
            let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            for s in 0..n {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let k = idx4(&x.shape, s, ch, i, j);
                            out.data[k] = x.data[k] * sc.data[s * c + ch] + sh.data[s * c + ch];
                        }
                    }
                }
            }
            out
        }
        OpKind::AddBias => {
            let (x, b) = (&xs[0], &xs[1]);
            let c = x.shape[1];
            let inner: usize = x.shape[2..].iter().product();
            let mut out = x.clone();
            for (k, v) in out.data.iter_mut().enumerate() {
                *v += b.data[(k / inner) % c];
            }
            out
        }
    }
}

fn map(x: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    Arr { shape: x.shape.clone(), data: x.data.iter().map(|&v| f(v)).collect() }
}

/// Input shapes for one random instance of `op`.
pub fn instance_shapes(op: OpKind, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = rng.random_range(1..3);
    let c = rng.random_range(1..4);
    let h = 2 * rng.random_range(1..4);
    let w = 2 * rng.random_range(1..4);
    match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let s = vec![n, c, h];
            // every fourth instance exercises the scalar-broadcast form
            match rng.random_range(0..4) {
                0 => vec![s, vec![1]],
                1 => vec![vec![1], s],
                _ => vec![s.clone(), s],
            }
        }
        OpKind::MatMul => {
            let (m, k, p) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            vec![vec![m, k], vec![k, p]]
        }
        OpKind::Conv2d => {
            let co = rng.random_range(1..4);
            let k = if rng.random_bool(0.25) { 1 } else { 3 };
            let mut v = vec![vec![n, c, h, w], vec![co, c, k, k]];
            if rng.random_bool(0.7) {
                v.push(vec![co]);
            }
            v
        }
        OpKind::ConcatChannels => {
            let parts = rng.random_range(1..4);
            (0..parts).map(|_| vec![n, rng.random_range(1..3), h, w]).collect()
        }
        OpKind::AffineScaleShift => vec![vec![n, c, h, w], vec![n, c], vec![n, c]],
        OpKind::AddBias => {
            if rng.random_bool(0.5) {
                vec![vec![n, c], vec![c]]
            } else {
                vec![vec![n, c, h, w], vec![c]]
            }
        }
        _ => vec![vec![n, c, h, w]],
    }
}

/// Draws values in `[-1, 1]` kept at least `0.02` away from zero, so the
/// kinks of `abs` and `relu` stay outside the finite-difference stencil.
fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.02..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

/// Relative L2 error between reverse-mode and finite-difference gradients
/// for one random instance, maximized over the inputs.
pub fn check_instance(op: OpKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = instance_shapes(op, &mut rng);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::new(s, draw(&mut rng, s.iter().product())).unwrap().with_grad())
        .collect();

    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = g.apply(op, &vars).unwrap();
    let out_shape = g.shape(out).to_vec();
    let r = Tensor::new(&out_shape, draw(&mut rng, out_shape.iter().product())).unwrap();
    let rv = g.leaf(&r);
    let prod = g.mul(out, rv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();

    let arrs: Vec<Arr> = inputs
        .iter()
        .map(|t| Arr { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v as f64).collect() })
        .collect();
    let r64: Vec<f64> = r.data().iter().map(|&v| v as f64).collect();
    let objective = |xs: &[Arr]| -> f64 {
        reference(op, xs).data.iter().zip(&r64).map(|(a, b)| a * b).sum()
    };

    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap();
        let mut num = vec![0.0; arrs[k].data.len()];
        for e in 0..num.len() {
            let mut plus = arrs.clone();
            plus[k].data[e] += h;
            let mut minus = arrs.clone();
            minus[k].data[e] -= h;
            num[e] = (objective(&plus) - objective(&minus)) / (2.0 * h);
        }
        worst = worst.max(relative_l2(analytic, &num));
    }
    worst
}

pub fn relative_l2(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(&a, &n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / scale.max(1e-6)
}

pub fn all_op_kinds() -> Vec<OpKind> {
    vec![
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Silu,
        OpKind::Relu,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Abs,
        OpKind::ConcatChannels,
        OpKind::Downsample2x,
        OpKind::Upsample2x,
        OpKind::AffineScaleShift,
        OpKind::AddBias,
        OpKind::Scale(-1.7),
        OpKind::AddScalar(0.4),
    ]
}

/// Six-parameter MLP `silu(x w1 + b1) w2` on fixed data, L2 loss; returns
/// the relative error of the reverse-mode gradient against f64 central
/// differences with step 1e-3.
pub fn mlp_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ts: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let theta: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut g = Graph::new();
    let x = g.leaf(&Tensor::new(&[5, 1], xs.clone()).unwrap());
    let t = g.leaf(&Tensor::new(&[5, 1], ts.clone()).unwrap());
    let w1 = g.leaf(&Tensor::new(&[1, 2], theta[0..2].to_vec()).unwrap().with_grad());
    let b1 = g.leaf(&Tensor::new(&[2], theta[2..4].to_vec()).unwrap().with_grad());
    let w2 = g.leaf(&Tensor::new(&[2, 1], theta[4..6].to_vec()).unwrap().with_grad());
    let hdn = g.linear(x, w1, b1).unwrap();
    let act = g.silu(hdn).unwrap();
    let y = g.matmul(act, w2).unwrap();
    let loss = g.mse(y, t).unwrap();
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for v in [w1, b1, w2] {
        analytic.extend_from_slice(g.grad(v).unwrap());
    }

    let f = |p: &[f64]| -> f64 {
        let mut l = 0.0;
        for (xi, ti) in xs.iter().zip(&ts) {
            let xi = *xi as f64;
            let mut y = 0.0;
            for k in 0..2 {
                let z = xi * p[k] + p[2 + k];
                y += z / (1.0 + (-z).exp()) * p[4 + k];
            }
            l += (y - *ti as f64).powi(2);
        }
        l / xs.len() as f64
    };
    let p64: Vec<f64> = theta.iter().map(|&v| v as f64).collect();
    let h = 1e-3;
    let num: Vec<f64> = (0..6)
        .map(|k| {
            let mut a = p64.clone();
            a[k] += h;
            let mut b = p64.clone();
            b[k] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect();
    relative_l2(&analytic, &num)
}
