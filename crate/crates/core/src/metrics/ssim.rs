//! Mean SSIM with an 11x11 Gaussian window (sigma 1.5), evaluated at every
//! position where the window fits inside the image.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Dynamic range of the pixel values.
    pub range: f64,
    pub k1: f64,
    pub k2: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { range: 1.0, k1: 0.01, k2: 0.03, window: 11, sigma: 1.5 }
    }
}

impl SsimParams {
    pub fn with_range(range: f64) -> Self {
        SsimParams { range, ..Default::default() }
    }

    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let k: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

struct LocalStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

/// Separable "valid" filtering of `img` (`h x w`) with `k`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..n).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

fn local_stats(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams) -> Result<LocalStats> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim", format!("{} and {} values for a {h}x{w} image", a.len(), b.len())));
    }
    if h < p.window || w < p.window {
        return Err(Error::invalid(format!("ssim: {h}x{w} image is smaller than the {0}x{0} window", p.window)));
    }
    let k = p.kernel();
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(&a64, h, w, &k);
    let mu_b = filter_valid(&b64, h, w, &k);
    let aa = filter_valid(&prod(&a64, &a64), h, w, &k);
    let bb = filter_valid(&prod(&b64, &b64), h, w, &k);
    let ab = filter_valid(&prod(&a64, &b64), h, w, &k);
    let var_a = aa.iter().zip(&mu_a).map(|(s, m)| s - m * m).collect();
    let var_b = bb.iter().zip(&mu_b).map(|(s, m)| s - m * m).collect();
    let cov = ab.iter().zip(mu_a.iter().zip(&mu_b)).map(|(s, (x, y))| s - x * y).collect();
    Ok(LocalStats { mu_a, mu_b, var_a, var_b, cov })
}

/// Mean structural similarity of two `h x w` images.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    let st = local_stats(a, b, h, w, p)?;
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let n = st.mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (st.mu_a[i], st.mu_b[i]);
            ((2.0 * ma * mb + c1) * (2.0 * st.cov[i] + c2))
                / ((ma * ma + mb * mb + c1) * (st.var_a[i] + st.var_b[i] + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean of the contrast-structure factor `(2 cov + C2) / (var_a + var_b + C2)`,
/// which unlike the full index does not depend on the local means.
pub fn ssim_contrast_structure(a: &[f32], b: &[f32], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    let st = local_stats(a, b, h, w, p)?;
    let c2 = (p.k2 * p.range).powi(2);
    let n = st.cov.len();
    Ok((0..n).map(|i| (2.0 * st.cov[i] + c2) / (st.var_a[i] + st.var_b[i] + c2)).sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize) -> Vec<f32> {
        (0..h * w).map(|i| ((i / w + i % w) % 2) as f32).collect()
    }

    #[test]
    fn identical_images_score_one() {
        let a: Vec<f32> = (0..256).map(|i| (i as f32 * 0.37).sin() * 3.0 + 10.0).collect();
        assert_eq!(ssim(&a, &a, 16, 16, &SsimParams::default()).unwrap(), 1.0);
    }

    #[test]
    fn inverted_checkerboard_is_negative() {
        let a = checker(16, 16);
        let b: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        let s = ssim(&a, &b, 16, 16, &SsimParams::default()).unwrap();
        assert!(s < 0.0, "{s}");
    }

    #[test]
    fn too_small_is_an_error() {
        let a = vec![0.0; 100];
        assert!(ssim(&a, &a, 10, 10, &SsimParams::default()).is_err());
    }

    #[test]
    fn contrast_structure_ignores_common_shift() {
        let a: Vec<f32> = (0..400).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect();
        let b: Vec<f32> = (0..400).map(|i| ((i * 104729) % 97) as f32 / 97.0).collect();
        let p = SsimParams::default();
        let base = ssim_contrast_structure(&a, &b, 20, 20, &p).unwrap();
        let a2: Vec<f32> = a.iter().map(|v| v + 0.25).collect();
        let b2: Vec<f32> = b.iter().map(|v| v + 0.25).collect();
        let shifted = ssim_contrast_structure(&a2, &b2, 20, 20, &p).unwrap();
        assert!((base - shifted).abs() < 1e-6);
        // The luminance factor is not shift invariant when local means differ.
        let full = ssim(&a, &b, 20, 20, &p).unwrap();
        let full_shift = ssim(&a2, &b2, 20, 20, &p).unwrap();
        assert!(full.is_finite() && full_shift.is_finite());
    }
}
