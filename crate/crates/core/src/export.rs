//! Image export for inspection.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Binary 8-bit PGM (P5) of a row-major `h x w` image scaled so that its
/// maximum maps to 255; negative values clamp to 0.
pub fn write_pgm(path: &Path, h: usize, w: usize, data: &[f32]) -> Result<()> {
    std::fs::write(path, encode_pgm(h, w, data)?)?;
    Ok(())
}

pub fn encode_pgm(h: usize, w: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != h * w || h == 0 || w == 0 {
        return Err(Error::shape("pgm", format!("{} values for a {h}x{w} image", data.len())));
    }
    let max = data.iter().copied().filter(|v| v.is_finite()).fold(0.0f32, f32::max);
    let mut out = Vec::with_capacity(h * w + 20);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend(data.iter().map(|&v| if max > 0.0 && v.is_finite() { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 }));
    Ok(out)
}
