//! Brute-force references for the evaluation metrics.

use std::collections::BTreeSet;

/// Dice and Jaccard from explicit index sets.
pub fn dice_jaccard(a: &[bool], b: &[bool]) -> (f64, f64) {
    let sa: BTreeSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: BTreeSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    let inter = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    if union == 0.0 {
        return (1.0, 1.0);
    }
    (2.0 * inter / (sa.len() + sb.len()) as f64, inter / union)
}

/// Top-`p`% selection by rank counting. `p` is an integer percentage, and
/// the count `p n / 100` rounds half up in exact integer arithmetic.
pub fn threshold_segment(field: &[f32], roi: &[bool], p: u32) -> Vec<bool> {
    let n = roi.iter().filter(|&&r| r).count();
    let k = (2 * p as usize * n + 100) / 200;
    (0..field.len())
        .map(|i| {
            if !roi[i] {
                return false;
            }
            let rank = (0..field.len())
                .filter(|&j| roi[j] && (field[j].abs() > field[i].abs() || (field[j].abs() == field[i].abs() && j < i)))
                .count();
            rank < k
        })
        .collect()
}

/// Pearson r from raw sums, and its two-sided p-value from the regularized
/// incomplete beta function `I_x(df/2, 1/2)` with `x = df / (df + t^2)`.
pub fn pearson(u: &[f32], v: &[f32]) -> (f64, f64) {
    let n = u.len() as f64;
    let (mut su, mut sv, mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        su += a;
        sv += b;
        suu += a * a;
        svv += b * b;
        suv += a * b;
    }
    let r = (n * suv - su * sv) / ((n * suu - su * su).sqrt() * (n * svv - sv * sv).sqrt());
    let df = n - 2.0;
    let t2 = r * r * df / (1.0 - r * r);
    (r, inc_beta(df / 2.0, 0.5, df / (df + t2)))
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Mean SSIM with each window's weighted statistics summed directly over
/// the 2D Gaussian window.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, range: f64) -> f64 {
    let (win, sigma) = (11usize, 1.5f64);
    let r = (win / 2) as f64;
    let mut k2 = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            k2[i * win + j] = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k2.iter().sum();
    k2.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - win {
        for x in 0..=w - win {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let q = (y + i) * w + x + j;
                    ma += k2[i * win + j] * a[q] as f64;
                    mb += k2[i * win + j] * b[q] as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let q = (y + i) * w + x + j;
                    let (da, db) = (a[q] as f64 - ma, b[q] as f64 - mb);
                    va += k2[i * win + j] * da * da;
                    vb += k2[i * win + j] * db * db;
                    cov += k2[i * win + j] * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

use gadolab::metrics::{self, SegmentationSource, SsimParams};
use gadolab::Mask;
use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_mask(r: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<bool> {
    (0..n).map(|_| r.random_bool(density)).collect()
}

/// Largest deviation of `dice_jaccard` from the set oracle over `count`
/// random mask pairs, including empty ones.
pub fn worst_dice_error(count: usize, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..count {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let (da, db) = if i % 10 == 0 { (0.0, r.random_range(0.0..1.0)) } else { (r.random_range(0.0..1.0), r.random_range(0.0..1.0)) };
        let a = random_mask(&mut r, h * w, da);
        let b = random_mask(&mut r, h * w, db);
        let (d, j) = metrics::dice_jaccard(&Mask::new(&[h, w], a.clone()).unwrap(), &Mask::new(&[h, w], b.clone()).unwrap()).unwrap();
        let (od, oj) = dice_jaccard(&a, &b);
        worst = worst.max((d - od).abs()).max((j - oj).abs());
    }
    worst
}

/// Number of random instances where `threshold_segment` selects a different
/// voxel set than the rank oracle. Fields are quantized so ties occur.
pub fn segment_mismatches(count: usize, seed: u64) -> usize {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..count {
        let (h, w) = (r.random_range(2..16), r.random_range(2..16));
        let levels = r.random_range(2..50) as f32;
        let field: Vec<f32> = (0..h * w).map(|_| (r.random_range(-1.0f32..1.0) * levels).round() / levels).collect();
        let density = r.random_range(0.2..1.0);
        let mut roi = random_mask(&mut r, h * w, density);
        roi[0] = true;
        let p = r.random_range(1..=30u32);
        let got = metrics::threshold_segment(&field, &Mask::new(&[h, w], roi.clone()).unwrap(), p as f64, SegmentationSource::Fm).unwrap();
        if got.mask.data() != threshold_segment(&field, &roi, p).as_slice() {
            bad += 1;
        }
    }
    bad
}

/// Largest deviation of Pearson r and p-value from the oracle.
pub fn worst_pearson_error(count: usize, seed: u64) -> (f64, f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (mut wr, mut wp) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let n = r.random_range(3..400);
        let slope = r.random_range(-2.0f32..2.0);
        let noise = r.random_range(0.05f32..3.0);
        let u: Vec<f32> = (0..n).map(|_| r.random_range(-1.0f32..1.0) + 0.5).collect();
        let v: Vec<f32> = u.iter().map(|&x| slope * x + noise * r.random_range(-1.0f32..1.0)).collect();
        let got = metrics::pearson(&u, &v, None).unwrap();
        let (or, op) = pearson(&u, &v);
        wr = wr.max((got.r - or).abs());
        wp = wp.max((got.p_value - op).abs());
    }
    (wr, wp)
}

/// Largest deviation of SSIM from the direct-window oracle.
pub fn worst_ssim_error(count: usize, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (h, w) = (r.random_range(11..24), r.random_range(11..24));
        let range = [1.0, 255.0, 4500.0][r.random_range(0..3)];
        let a: Vec<f32> = (0..h * w).map(|_| r.random_range(0.0..range) as f32).collect();
        let mix = r.random_range(0.0f32..1.0);
        let b: Vec<f32> = a.iter().map(|&x| mix * x + (1.0 - mix) * r.random_range(0.0..range) as f32).collect();
        let got = metrics::ssim(&a, &b, h, w, &SsimParams::with_range(range)).unwrap();
        worst = worst.max((got - ssim(&a, &b, h, w, range)).abs());
    }
    worst
}
