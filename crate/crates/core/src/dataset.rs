//! 2.5D slice pairs, per-modality normalization, augmentation and the
//! train/validation/test split.
//!
//! A pair is built around an interior axial slice `d`: the conditioning
//! stack `y` holds pre-contrast slices `d-3 ..= d+3` channel-first as
//! `[7, H, W]`, `x` is the post-contrast slice and `diff = x - pre[d]` is
//! the learning target.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::phantom::{self, Modality, PhantomRecipe, PhantomVolume};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const STACK: usize = 7;
pub const HALF_STACK: usize = STACK / 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    /// `[7, H, W]` pre-contrast stack; channel 3 is the central slice.
    pub y: Tensor,
    /// `[H, W]` post-contrast central slice.
    pub x: Tensor,
    /// `[H, W]`, `x - y[3]`.
    pub diff: Tensor,
    pub roi: Mask,
    pub modality: Modality,
    pub volume_id: usize,
    pub slice_index: usize,
    /// Factor the intensities were divided by; 1 for raw pairs.
    pub scale: f32,
}

impl SlicePair {
    pub fn height(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.x.shape()[1]
    }

    /// Central pre-contrast slice.
    pub fn pre(&self) -> &[f32] {
        let n = self.height() * self.width();
        &self.y.data()[HALF_STACK * n..(HALF_STACK + 1) * n]
    }
}

/// One pair per interior slice `d` in `3 ..= D-4`.
pub fn extract_pairs(vol: &PhantomVolume, volume_id: usize) -> Result<Vec<SlicePair>> {
    let (h, w, d) = vol.dims();
    if d < STACK {
        return Err(Error::invalid(format!("volume depth {d} is below the {STACK}-slice stack")));
    }
    let pre: Vec<Vec<f32>> = (0..d).map(|k| PhantomVolume::slice_of(&vol.pre, k)).collect();
    (HALF_STACK..d - HALF_STACK)
        .map(|k| {
            let mut y = Vec::with_capacity(STACK * h * w);
            for s in &pre[k - HALF_STACK..=k + HALF_STACK] {
                y.extend_from_slice(s);
            }
            let x = PhantomVolume::slice_of(&vol.post, k);
            let diff: Vec<f32> = x.iter().zip(&pre[k]).map(|(a, b)| a - b).collect();
            Ok(SlicePair {
                y: Tensor::new(&[STACK, h, w], y)?,
                x: Tensor::new(&[h, w], x)?,
                diff: Tensor::new(&[h, w], diff)?,
                roi: Mask::new(&[h, w], PhantomVolume::mask_slice(&vol.roi, k))?,
                modality: vol.modality,
                volume_id,
                slice_index: k,
                scale: 1.0,
            })
        })
        .collect()
}

fn scaled(t: &Tensor, f: f32) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= f);
    out
}

fn divided(t: &Tensor, f: f32) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v /= f);
    out
}

/// T1w pairs are divided by the maximum of their pre-contrast stack; T1
/// pairs are returned unchanged.
pub fn normalize(pair: &SlicePair) -> Result<SlicePair> {
    match pair.modality {
        Modality::T1 => Ok(pair.clone()),
        Modality::T1w => {
            if pair.scale != 1.0 {
                return Err(Error::invalid("pair is already normalized"));
            }
            let m = pair.y.max();
            if !(m > 0.0) {
                return Err(Error::invalid(format!("T1w stack maximum {m} is not positive")));
            }
            Ok(SlicePair {
                y: divided(&pair.y, m),
                x: divided(&pair.x, m),
                diff: divided(&pair.diff, m),
                scale: m,
                ..pair.clone()
            })
        }
    }
}

pub fn denormalize(pair: &SlicePair) -> SlicePair {
    if pair.scale == 1.0 {
        return pair.clone();
    }
    SlicePair {
        y: scaled(&pair.y, pair.scale),
        x: scaled(&pair.x, pair.scale),
        diff: scaled(&pair.diff, pair.scale),
        scale: 1.0,
        ..pair.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub quarter_turns: bool,
    /// Small-angle rotations are drawn uniformly in `[-max, max]` degrees.
    pub max_angle_deg: f32,
    /// Square crop side; `None` keeps the full image.
    pub crop: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { quarter_turns: true, max_angle_deg: 15.0, crop: Some(48) }
    }
}

/// A concrete joint transform: quarter turns, then a small rotation about
/// the image center, then a crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub quarter_turns: u8,
    pub angle_deg: f32,
    /// `(row, col, height, width)` in the rotated image.
    pub crop: Option<(usize, usize, usize, usize)>,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { quarter_turns: 0, angle_deg: 0.0, crop: None };

    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut Rng) -> Result<Transform> {
        let quarter_turns = if cfg.quarter_turns { rng.random_range(0..4u8) } else { 0 };
        let angle_deg = if cfg.max_angle_deg > 0.0 { rng.random_range(-cfg.max_angle_deg..=cfg.max_angle_deg) } else { 0.0 };
        let (rh, rw) = if quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let crop = match cfg.crop {
            None => None,
            Some(c) => {
                if c == 0 || c > rh || c > rw {
                    return Err(Error::invalid(format!("crop {c} does not fit a {rh}x{rw} image")));
                }
                Some((rng.random_range(0..=rh - c), rng.random_range(0..=rw - c), c, c))
            }
        };
        Ok(Transform { quarter_turns, angle_deg, crop })
    }
}

/// Image planes of one `[C, H, W]` buffer under a transform.
struct Plane<'a, T> {
    data: &'a [T],
    h: usize,
    w: usize,
}

fn rot90<T: Copy>(p: &Plane<T>) -> Vec<T> {
    // Counter-clockwise: out[i][j] = in[j][w-1-i], output is w x h.
    let (h, w) = (p.h, p.w);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..w {
        for j in 0..h {
            out.push(p.data[j * w + (w - 1 - i)]);
        }
    }
    out
}

fn source_coords(i: usize, j: usize, h: usize, w: usize, cos: f64, sin: f64) -> (f64, f64) {
    let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (di, dj) = (i as f64 - ci, j as f64 - cj);
    (cos * di - sin * dj + ci, sin * di + cos * dj + cj)
}

fn rotate_bilinear(p: &Plane<f32>, deg: f32) -> Vec<f32> {
    let (h, w) = (p.h, p.w);
    let (sin, cos) = (deg as f64).to_radians().sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = source_coords(i, j, h, w, cos, sin);
            let si = si.clamp(0.0, (h - 1) as f64);
            let sj = sj.clamp(0.0, (w - 1) as f64);
            let (i0, j0) = (si.floor() as usize, sj.floor() as usize);
            let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
            let (fi, fj) = (si - i0 as f64, sj - j0 as f64);
            let at = |a: usize, b: usize| p.data[a * w + b] as f64;
            let v = (1.0 - fi) * ((1.0 - fj) * at(i0, j0) + fj * at(i0, j1)) + fi * ((1.0 - fj) * at(i1, j0) + fj * at(i1, j1));
            out.push(v as f32);
        }
    }
    out
}

fn rotate_nearest(p: &Plane<bool>, deg: f32) -> Vec<bool> {
    let (h, w) = (p.h, p.w);
    let (sin, cos) = (deg as f64).to_radians().sin_cos();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = source_coords(i, j, h, w, cos, sin);
            let si = si.round().clamp(0.0, (h - 1) as f64) as usize;
            let sj = sj.round().clamp(0.0, (w - 1) as f64) as usize;
            out.push(p.data[si * w + sj]);
        }
    }
    out
}

fn transform_plane<T: Copy>(data: &[T], h: usize, w: usize, t: &Transform, rotate: impl Fn(&Plane<T>, f32) -> Vec<T>) -> (Vec<T>, usize, usize) {
    let (mut buf, mut h, mut w) = (data.to_vec(), h, w);
    for _ in 0..t.quarter_turns % 4 {
        buf = rot90(&Plane { data: &buf, h, w });
        std::mem::swap(&mut h, &mut w);
    }
    if t.angle_deg != 0.0 {
        buf = rotate(&Plane { data: &buf, h, w }, t.angle_deg);
    }
    if let Some((r0, c0, ch, cw)) = t.crop {
        let mut out = Vec::with_capacity(ch * cw);
        for r in r0..r0 + ch {
            out.extend_from_slice(&buf[r * w + c0..r * w + c0 + cw]);
        }
        return (out, ch, cw);
    }
    (buf, h, w)
}

/// Applies `t` to every field of the pair with identical parameters.
pub fn apply_transform(pair: &SlicePair, t: &Transform) -> Result<SlicePair> {
    let (h, w) = (pair.height(), pair.width());
    let (rh, rw) = if t.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
    if let Some((r0, c0, ch, cw)) = t.crop {
        if ch == 0 || cw == 0 || r0 + ch > rh || c0 + cw > rw {
            return Err(Error::invalid(format!("crop {ch}x{cw} at ({r0}, {c0}) does not fit a {rh}x{rw} image")));
        }
    }
    let plane = |d: &[f32]| transform_plane(d, h, w, t, rotate_bilinear);
    let n = h * w;
    let mut y = Vec::new();
    let (mut oh, mut ow) = (0, 0);
    for c in 0..STACK {
        let (p, a, b) = plane(&pair.y.data()[c * n..(c + 1) * n]);
        y.extend(p);
        (oh, ow) = (a, b);
    }
    let (x, _, _) = plane(pair.x.data());
    let (diff, _, _) = plane(pair.diff.data());
    let (roi, _, _) = transform_plane(pair.roi.data(), h, w, t, rotate_nearest);
    Ok(SlicePair {
        y: Tensor::new(&[STACK, oh, ow], y)?,
        x: Tensor::new(&[oh, ow], x)?,
        diff: Tensor::new(&[oh, ow], diff)?,
        roi: Mask::new(&[oh, ow], roi)?,
        ..pair.clone()
    })
}

/// Random joint rotation and crop for training.
pub fn augment(pair: &SlicePair, cfg: &AugmentConfig, rng: &mut Rng) -> Result<SlicePair> {
    let t = Transform::sample(cfg, pair.height(), pair.width(), rng)?;
    apply_transform(pair, &t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Keep every n-th ROI-intersecting test slice.
    pub test_stride: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 64, val: 4, test: 5, test_stride: 5 }
    }
}

impl SplitConfig {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 || self.test_stride == 0 {
            return Err(Error::invalid("split needs at least one train and one test volume and a positive test stride"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// `(volume id, slice index)` of every evaluated test slice.
    pub test_slices: Vec<(usize, usize)>,
}

impl Split {
    /// Volume ids are shuffled with `seed` and dealt into train, val and test.
    pub fn assign(cfg: &SplitConfig, seed: u64) -> Result<Split> {
        cfg.validate()?;
        let mut ids: Vec<usize> = (0..cfg.total()).collect();
        ids.shuffle(&mut rng::seeded(seed));
        let test = ids[..cfg.test].to_vec();
        let val = ids[cfg.test..cfg.test + cfg.val].to_vec();
        let mut train = ids[cfg.test + cfg.val..].to_vec();
        train.sort_unstable();
        let mut val = val;
        val.sort_unstable();
        let mut test = test;
        test.sort_unstable();
        Ok(Split { train, val, test, test_slices: Vec::new() })
    }

    /// Fills `test_slices`: interior slices of the test volumes whose ROI is
    /// nonempty, keeping every `stride`-th in (volume, slice) order.
    pub fn select_test_slices(&mut self, volumes: &[(usize, &PhantomVolume)], stride: usize) {
        let mut candidates = Vec::new();
        for &id in &self.test {
            if let Some((_, v)) = volumes.iter().find(|(i, _)| *i == id) {
                let d = v.dims().2;
                for k in HALF_STACK..d.saturating_sub(HALF_STACK) {
                    if PhantomVolume::mask_slice(&v.roi, k).iter().any(|&b| b) {
                        candidates.push((id, k));
                    }
                }
            }
        }
        self.test_slices = candidates.into_iter().step_by(stride.max(1)).collect();
    }

    pub fn is_disjoint(&self) -> bool {
        let all: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.len() == all.len()
    }
}

/// On-disk dataset description written next to the volume files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub recipe: PhantomRecipe,
    pub split: Split,
    /// File stem of each volume, indexed by volume id.
    pub volumes: Vec<String>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

/// Per-volume seeds are drawn from the master seed so that volumes stay
/// independent of how many are generated.
pub fn volume_seed(master: u64, id: usize) -> u64 {
    rng::stream(master, 1000 + id as u64).random()
}

/// Generates every volume of a split into `dir` and writes the manifest.
pub fn generate_dataset(dir: &Path, recipe: &PhantomRecipe, split_cfg: &SplitConfig, seed: u64) -> Result<DatasetManifest> {
    recipe.validate()?;
    let mut split = Split::assign(split_cfg, seed)?;
    let mut volumes = Vec::with_capacity(split_cfg.total());
    let mut test_vols = Vec::new();
    for id in 0..split_cfg.total() {
        let vol = phantom::generate(&PhantomRecipe { seed: volume_seed(seed, id), ..recipe.clone() })?;
        let stem = format!("vol{id:03}");
        vol.save(dir, &stem)?;
        volumes.push(stem);
        if split.test.contains(&id) {
            test_vols.push((id, vol));
        }
    }
    let refs: Vec<(usize, &PhantomVolume)> = test_vols.iter().map(|(i, v)| (*i, v)).collect();
    split.select_test_slices(&refs, split_cfg.test_stride);
    let manifest = DatasetManifest { seed, recipe: recipe.clone(), split, volumes };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A dataset directory opened through its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(Dataset { dir: dir.to_path_buf(), manifest: serde_json::from_str(&text)? })
    }

    pub fn volume(&self, id: usize) -> Result<PhantomVolume> {
        let stem = self.manifest.volumes.get(id).ok_or_else(|| Error::invalid(format!("no volume {id} in dataset")))?;
        PhantomVolume::load(&self.dir, stem)
    }

    /// Normalized pairs of every interior slice of the given volumes.
    pub fn pairs(&self, ids: &[usize]) -> Result<Vec<SlicePair>> {
        let mut out = Vec::new();
        for &id in ids {
            for p in extract_pairs(&self.volume(id)?, id)? {
                out.push(normalize(&p)?);
            }
        }
        Ok(out)
    }

    /// Normalized pairs of the selected test slices.
    pub fn test_pairs(&self) -> Result<Vec<SlicePair>> {
        let mut out = Vec::new();
        let mut cached: Option<(usize, Vec<SlicePair>)> = None;
        for &(id, k) in &self.manifest.split.test_slices {
            if cached.as_ref().map(|(c, _)| *c) != Some(id) {
                cached = Some((id, extract_pairs(&self.volume(id)?, id)?));
            }
            let pairs = &cached.as_ref().unwrap().1;
            let p = pairs.iter().find(|p| p.slice_index == k).ok_or_else(|| Error::invalid(format!("volume {id} has no interior slice {k}")))?;
            out.push(normalize(p)?);
        }
        Ok(out)
    }
}
