//! Exact rational oracle for the linear noise schedule.

use num::bigint::BigInt;
use num::rational::BigRational;
use num::Signed;

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

/// `(a (n - k) + b k) / n` computed exactly from the double values of `a` and `b`.
pub fn interpolant(a: f64, b: f64, k: usize, n: usize) -> BigRational {
    let (nk, kk, nn) = (BigInt::from(n - k), BigInt::from(k), BigInt::from(n));
    (rat(a) * BigRational::from_integer(nk) + rat(b) * BigRational::from_integer(kk)) / BigRational::from_integer(nn)
}

/// True when `c` is the double nearest to `exact`, ties going to the even
/// mantissa. Checked against both neighbours of `c`.
pub fn is_nearest(c: f64, exact: &BigRational) -> bool {
    let up = f64::from_bits(c.to_bits() + 1);
    let down = f64::from_bits(c.to_bits() - 1);
    let d = (rat(c) - exact).abs();
    let du = (rat(up) - exact).abs();
    let dd = (rat(down) - exact).abs();
    let even = c.to_bits() & 1 == 0;
    (d < du || (d == du && even)) && (d < dd || (d == dd && even))
}

/// Increments between consecutive exact interpolants, which must all agree.
pub fn increments_constant(a: f64, b: f64, n: usize) -> bool {
    let step = interpolant(a, b, 1, n) - interpolant(a, b, 0, n);
    (1..n).all(|k| interpolant(a, b, k + 1, n) - interpolant(a, b, k, n) == step)
}
