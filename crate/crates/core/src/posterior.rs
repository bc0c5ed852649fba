//! Mean and uncertainty maps from an ensemble of generative samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::export;
use crate::nets::Role;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    /// `N` samples, each `[H, W]`.
    pub samples: Vec<Tensor>,
    pub mean: Tensor,
    /// Population standard deviation per voxel.
    pub stddev: Tensor,
    pub model: Role,
    pub condition: String,
}

/// Per-voxel mean and population standard deviation. Each voxel's values
/// are sorted before the f64 reduction, so the result does not depend on
/// sample order.
pub fn aggregate(samples: Vec<Tensor>, model: Role, condition: impl Into<String>) -> Result<PosteriorEnsemble> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!("an ensemble needs at least 2 samples, got {}", samples.len())));
    }
    if !model.is_generative() {
        return Err(Error::invalid("ensembles come from dm or fm models"));
    }
    let shape = samples[0].shape().to_vec();
    if let Some(bad) = samples.iter().find(|s| s.shape() != shape.as_slice()) {
        return Err(Error::shape("aggregate", format!("{:?} vs {:?}", bad.shape(), shape)));
    }
    let n = samples.len() as f64;
    let len = samples[0].numel();
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    let mut col = vec![0.0f32; samples.len()];
    for i in 0..len {
        for (c, s) in col.iter_mut().zip(&samples) {
            *c = s.data()[i];
        }
        col.sort_by(f32::total_cmp);
        let m = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        mean.push(m as f32);
        std.push(var.sqrt() as f32);
    }
    Ok(PosteriorEnsemble {
        mean: Tensor::new(&shape, mean)?,
        stddev: Tensor::new(&shape, std)?,
        samples,
        model,
        condition: condition.into(),
    })
}

impl PosteriorEnsemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Post-contrast estimate `scale * (pre + mean)` from the central
    /// pre-contrast slice and the normalization factor of its pair.
    pub fn reconstruction(&self, pre: &[f32], scale: f32) -> Result<Vec<f32>> {
        if pre.len() != self.mean.numel() {
            return Err(Error::shape("reconstruction", format!("{} pre values for a {}-voxel mean", pre.len(), self.mean.numel())));
        }
        Ok(pre.iter().zip(self.mean.data()).map(|(p, m)| (p + m) * scale).collect())
    }

    /// Writes `<stem>_mean` and `<stem>_std` as `.vct` and `.pgm`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let s = self.mean.shape();
        let (h, w) = (s[0], s[s.len() - 1]);
        self.mean.save(dir.join(format!("{stem}_mean.vct")))?;
        self.stddev.save(dir.join(format!("{stem}_std.vct")))?;
        let abs_mean: Vec<f32> = self.mean.data().iter().map(|v| v.abs()).collect();
        export::write_pgm(&dir.join(format!("{stem}_mean.pgm")), h, w, &abs_mean)?;
        export::write_pgm(&dir.join(format!("{stem}_std.pgm")), h, w, self.stddev.data())?;
        Ok(())
    }
}
