//! Evaluation metrics: absolute errors, SSIM, Pearson correlation, relative
//! error with the zero-difference skip rule, percentile segmentation inside
//! the ROI, and Dice/Jaccard overlap.

mod ssim;

pub use ssim::{ssim, ssim_contrast_structure, SsimParams};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::mask::Mask;

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{a} vs {b} elements")))
    }
}

/// Mean absolute error, over `mask` when given (rMAE), else over all voxels.
pub fn mae(pred: &[f32], target: &[f32], mask: Option<&Mask>) -> Result<f64> {
    same_len("mae", pred.len(), target.len())?;
    let (sum, n) = match mask {
        Some(m) => {
            same_len("mae", pred.len(), m.len())?;
            pred.iter()
                .zip(target)
                .zip(m.data())
                .filter(|(_, &keep)| keep)
                .fold((0.0f64, 0usize), |(s, n), ((&p, &t), _)| (s + (p as f64 - t as f64).abs(), n + 1))
        }
        None => (pred.iter().zip(target).map(|(&p, &t)| (p as f64 - t as f64).abs()).sum(), pred.len()),
    };
    if n == 0 {
        return Err(Error::invalid("mae: empty mask"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    /// Two-sided, from Student's t with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation of `u` and `v`, excluding voxels where `skip` is set.
pub fn pearson(u: &[f32], v: &[f32], skip: Option<&[bool]>) -> Result<Pearson> {
    same_len("pearson", u.len(), v.len())?;
    if let Some(s) = skip {
        same_len("pearson", u.len(), s.len())?;
    }
    let keep = |i: usize| skip.is_none_or(|s| !s[i]);
    let idx: Vec<usize> = (0..u.len()).filter(|&i| keep(i)).collect();
    let n = idx.len();
    if n < 3 {
        return Err(Error::invalid(format!("pearson: need at least 3 voxels after skipping, got {n}")));
    }
    let mu = idx.iter().map(|&i| u[i] as f64).sum::<f64>() / n as f64;
    let mv = idx.iter().map(|&i| v[i] as f64).sum::<f64>() / n as f64;
    let (mut suu, mut svv, mut suv) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (a, b) = (u[i] as f64 - mu, v[i] as f64 - mv);
        suu += a * a;
        svv += b * b;
        suv += a * b;
    }
    if suu <= 0.0 {
        return Err(Error::invalid("pearson: first argument has zero variance"));
    }
    if svv <= 0.0 {
        return Err(Error::invalid("pearson: second argument has zero variance"));
    }
    let r = (suv / (suu.sqrt() * svv.sqrt())).clamp(-1.0, 1.0);
    let dof = (n - 2) as f64;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (dof / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::numeric(format!("pearson: {e}")))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Pearson { r, p_value, n })
}

/// `|mean - post| / |pre - post|` where `pre != post`. The second return is
/// the skip mask (set where `pre == post`); skipped entries hold 0.
pub fn relative_error(mean: &[f32], post: &[f32], pre: &[f32]) -> Result<(Vec<f32>, Vec<bool>)> {
    same_len("relative_error", mean.len(), post.len())?;
    same_len("relative_error", mean.len(), pre.len())?;
    let mut re = Vec::with_capacity(mean.len());
    let mut skip = Vec::with_capacity(mean.len());
    for ((&m, &po), &pr) in mean.iter().zip(post).zip(pre) {
        let den = (pr as f64 - po as f64).abs();
        if den > 0.0 {
            re.push(((m as f64 - po as f64).abs() / den) as f32);
            skip.push(false);
        } else {
            re.push(0.0);
            skip.push(true);
        }
    }
    Ok((re, skip))
}

pub fn absolute_error(pred: &[f32], target: &[f32]) -> Result<Vec<f32>> {
    same_len("absolute_error", pred.len(), target.len())?;
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentationSource {
    GroundTruth,
    E2e,
    Fm,
    Dm,
    PreContrast,
}

impl SegmentationSource {
    pub fn name(self) -> &'static str {
        match self {
            SegmentationSource::GroundTruth => "gt",
            SegmentationSource::E2e => "e2e",
            SegmentationSource::Fm => "fm",
            SegmentationSource::Dm => "dm",
            SegmentationSource::PreContrast => "pre",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub mask: Mask,
    /// Percentage of ROI voxels selected, in `(0, 30]`.
    pub percentile: f64,
    pub source: SegmentationSource,
}

/// Number of voxels selected at percentage `p` of an ROI of `roi_size` voxels.
pub fn selection_count(roi_size: usize, p: f64) -> usize {
    (p * roi_size as f64 / 100.0).round() as usize
}

/// Selects the `round(p/100 * |ROI|)` ROI voxels with the largest
/// `|field|`. Ties are broken by raster order (lower index first).
pub fn threshold_segment(field: &[f32], roi: &Mask, p: f64, source: SegmentationSource) -> Result<SegmentationMask> {
    same_len("threshold_segment", field.len(), roi.len())?;
    if !(p > 0.0 && p <= 30.0) {
        return Err(Error::invalid(format!("threshold_segment: percentage {p} outside (0, 30]")));
    }
    let mut idx: Vec<usize> = (0..field.len()).filter(|&i| roi.data()[i]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("threshold_segment: empty ROI"));
    }
    let k = selection_count(idx.len(), p);
    idx.sort_by(|&a, &b| field[b].abs().total_cmp(&field[a].abs()).then(a.cmp(&b)));
    let mut mask = Mask::empty(roi.shape());
    for &i in &idx[..k] {
        mask.data_mut()[i] = true;
    }
    Ok(SegmentationMask { mask, percentile: p, source })
}

/// Dice and Jaccard scores. Two empty masks score `(1, 1)`.
pub fn dice_jaccard(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("dice_jaccard", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok((1.0, 1.0));
    }
    let (tp, fp, fneg) = (tp as f64, fp as f64, fneg as f64);
    Ok((2.0 * tp / (2.0 * tp + fp + fneg), tp / (tp + fp + fneg)))
}
