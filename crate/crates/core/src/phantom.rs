//! Procedural pre/post-contrast brain phantoms.
//!
//! Anatomy is built once per seed as a relaxation-rate map `R1 = 1/T1`
//! (in 1/s): nested soft-edged tissue ellipsoids on a CSF-like background,
//! plus tumor ellipsoids whose outer shell (the rim) has its own constant
//! rate and whose interior is necrotic. Contrast uptake raises `R1` on a
//! subset of the rim. The two modalities are monotone maps of the same rate
//! map:
//!
//! * T1 (quantitative): `T1 = 1000 / R1` milliseconds, decreasing in `R1`,
//!   so enhancement darkens.
//! * T1w: `gain * S0 * (1 - exp(-TR * R1))`, increasing in `R1`, so
//!   enhancement brightens. `gain` is drawn per volume in `[0.5, 2.0]`.
//!
//! All enhancing voxels share the same pre-contrast rate, so the ordering of
//! `|post - pre|` inside the ROI is the same in both modalities.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const T1_MIN_MS: f32 = 200.0;
pub const T1_MAX_MS: f32 = 4500.0;
const T1W_S0: f64 = 1000.0;
const T1W_TR_S: f64 = 0.6;
/// Enhancement magnitudes are quantized to this many levels.
const ENHANCEMENT_LEVELS: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1w,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1w => "t1w",
        }
    }

    /// Fixed multiplier taking voxel values into network units. T1 maps
    /// carry physical milliseconds and are divided by the upper end of the
    /// physical range; T1w slices are already max-normalized per stack.
    pub fn unit_scale(self) -> f32 {
        match self {
            Modality::T1 => 1.0 / T1_MAX_MS,
            Modality::T1w => 1.0,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(Modality::T1),
            "t1w" => Ok(Modality::T1w),
            other => Err(Error::invalid(format!("unknown modality {other:?} (expected t1 or t1w)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomRecipe {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Nested tissue ellipsoids, 2 to 4.
    pub tissue_count: usize,
    /// Tumor ellipsoids, 0 to 3.
    pub tumor_count: usize,
    /// In-plane tumor semi-axis range in normalized units (grid half-extent = 1).
    pub tumor_radius: [f32; 2],
    /// Fraction of ROI voxels whose value changes after contrast.
    pub enhancement_fraction: f32,
    /// Noise standard deviation relative to the tissue contrast of the volume.
    pub noise: f32,
    pub modality: Modality,
    pub seed: u64,
}

impl Default for PhantomRecipe {
    fn default() -> Self {
        PhantomRecipe {
            height: 64,
            width: 64,
            depth: 16,
            tissue_count: 3,
            tumor_count: 2,
            tumor_radius: [0.15, 0.3],
            enhancement_fraction: 0.42,
            noise: 0.01,
            modality: Modality::T1,
            seed: 0,
        }
    }
}

impl PhantomRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 || self.depth < 16 {
            return Err(Error::invalid(format!(
                "phantom extents must be at least 16, got {}x{}x{}",
                self.height, self.width, self.depth
            )));
        }
        if !(2..=4).contains(&self.tissue_count) {
            return Err(Error::invalid(format!("tissue_count must be 2..=4, got {}", self.tissue_count)));
        }
        if self.tumor_count > 3 {
            return Err(Error::invalid(format!("tumor_count must be 0..=3, got {}", self.tumor_count)));
        }
        let [lo, hi] = self.tumor_radius;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::invalid(format!("tumor_radius range {:?} must satisfy 0 < lo <= hi < 1", self.tumor_radius)));
        }
        if !(0.0..=1.0).contains(&self.enhancement_fraction) {
            return Err(Error::invalid(format!(
                "enhancement_fraction must lie in [0, 1], got {}",
                self.enhancement_fraction
            )));
        }
        if self.tumor_count == 0 && self.enhancement_fraction > 0.0 {
            return Err(Error::invalid("enhancement requested but tumor_count is 0"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Paired pre/post volume, each `[H, W, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub pre: Tensor,
    pub post: Tensor,
    pub roi: Mask,
    /// Voxels whose rate changes after contrast.
    pub enhancing: Mask,
    pub modality: Modality,
    pub seed: u64,
    /// Scanner gain (T1w); 1 for T1.
    pub gain: f32,
    pub recipe: PhantomRecipe,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    modality: Modality,
    seed: u64,
    gain: f32,
    recipe: PhantomRecipe,
}

impl PhantomVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pre.shape();
        (s[0], s[1], s[2])
    }

    /// Axial slice `k` of an `[H, W, D]` volume as a row-major `H x W` buffer.
    pub fn slice_of(vol: &Tensor, k: usize) -> Vec<f32> {
        let s = vol.shape();
        let d = s[2];
        vol.data().iter().skip(k).step_by(d).copied().collect()
    }

    pub fn mask_slice(mask: &Mask, k: usize) -> Vec<bool> {
        let d = mask.shape()[2];
        mask.data().iter().skip(k).step_by(d).copied().collect()
    }

    /// Writes `<stem>_pre.vct`, `<stem>_post.vct`, `<stem>_roi.vct`,
    /// `<stem>_enh.vct` and the `<stem>.json` sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.pre.save(dir.join(format!("{stem}_pre.vct")))?;
        self.post.save(dir.join(format!("{stem}_post.vct")))?;
        self.roi.to_tensor().save(dir.join(format!("{stem}_roi.vct")))?;
        self.enhancing.to_tensor().save(dir.join(format!("{stem}_enh.vct")))?;
        let side = Sidecar { modality: self.modality, seed: self.seed, gain: self.gain, recipe: self.recipe.clone() };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<PhantomVolume> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let pre = Tensor::load(dir.join(format!("{stem}_pre.vct")))?;
        let post = Tensor::load(dir.join(format!("{stem}_post.vct")))?;
        let roi = Mask::from_tensor(&Tensor::load(dir.join(format!("{stem}_roi.vct")))?);
        let enhancing = Mask::from_tensor(&Tensor::load(dir.join(format!("{stem}_enh.vct")))?);
        if pre.shape() != post.shape() || roi.shape() != pre.shape() || enhancing.shape() != pre.shape() || pre.rank() != 3 {
            return Err(Error::Format(format!("volume {stem}: inconsistent tensor shapes")));
        }
        Ok(PhantomVolume { pre, post, roi, enhancing, modality: side.modality, seed: side.seed, gain: side.gain, recipe: side.recipe })
    }
}

/// Sum of a few random 3D sinusoids, normalized into `[-1, 1]`.
struct SmoothField {
    terms: Vec<([f64; 3], f64, f64)>,
}

impl SmoothField {
    fn draw(rng: &mut Rng, waves: usize, max_freq: f64) -> Self {
        let terms = (0..waves)
            .map(|_| {
                let k = [
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(-max_freq..max_freq),
                ];
                (k, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
            })
            .collect();
        SmoothField { terms }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let total: f64 = self.terms.iter().map(|t| t.2).sum();
        self.terms
            .iter()
            .map(|(k, phase, amp)| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .sum::<f64>()
            / total
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// In-plane rotation.
    angle: f64,
}

impl Ellipsoid {
    /// Normalized radius: `< 1` inside, `1` on the surface.
    fn rho(&self, p: [f64; 3]) -> f64 {
        let (du, dv, dw) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let (s, c) = self.angle.sin_cos();
        let a = (c * du + s * dv) / self.radii[0];
        let b = (-s * du + c * dv) / self.radii[1];
        let w = dw / self.radii[2];
        (a * a + b * b + w * w).sqrt()
    }
}

/// Every random quantity of a phantom, drawn in a fixed order that does not
/// depend on the modality.
struct Anatomy {
    tissues: Vec<(Ellipsoid, f64)>,
    background_r1: f64,
    tumors: Vec<Ellipsoid>,
    rim_r1: f64,
    core_r1: f64,
    rim_field: SmoothField,
    uptake_field: SmoothField,
    magnitude_field: SmoothField,
    amplitude: f64,
    gain: f64,
}

impl Anatomy {
    fn draw(recipe: &PhantomRecipe) -> Anatomy {
        let mut r = rng::seeded(recipe.seed);
        let jitter = |r: &mut Rng, v: f64, rel: f64| v * r.random_range(1.0 - rel..1.0 + rel);

        let brain = Ellipsoid {
            center: [r.random_range(-0.04..0.04), r.random_range(-0.04..0.04), 0.0],
            radii: [r.random_range(0.78..0.88), r.random_range(0.70..0.85), r.random_range(1.3..1.6)],
            angle: r.random_range(-0.15..0.15),
        };
        const TISSUE_T1_MS: [f64; 4] = [1400.0, 850.0, 1150.0, 650.0];
        const SHRINK: [(f64, f64); 3] = [(0.65, 0.75), (0.40, 0.50), (0.20, 0.30)];
        let mut tissues = Vec::with_capacity(recipe.tissue_count);
        let brain_r1 = 1000.0 / jitter(&mut r, TISSUE_T1_MS[0], 0.05);
        let (bc, br, ba) = (brain.center, brain.radii, brain.angle);
        tissues.push((brain, brain_r1));
        for (i, &(lo, hi)) in SHRINK.iter().enumerate().take(recipe.tissue_count - 1) {
            let f = r.random_range(lo..hi);
            let e = Ellipsoid {
                center: [bc[0] + r.random_range(-0.05..0.05), bc[1] + r.random_range(-0.05..0.05), bc[2]],
                radii: [br[0] * f, br[1] * f, br[2] * f],
                angle: ba + r.random_range(-0.3..0.3),
            };
            tissues.push((e, 1000.0 / jitter(&mut r, TISSUE_T1_MS[i + 1], 0.05)));
        }
        let background_r1 = 1000.0 / jitter(&mut r, 4000.0, 0.03);
        let rim_r1 = 1000.0 / jitter(&mut r, 1700.0, 0.05);
        let core_r1 = 1000.0 / jitter(&mut r, 2600.0, 0.05);

        let [lo, hi] = recipe.tumor_radius;
        let tumors = (0..recipe.tumor_count)
            .map(|_| {
                let phi = r.random_range(0.0..std::f64::consts::TAU);
                let rad = 0.45 * r.random_range(0.0f64..1.0).sqrt();
                let a = r.random_range(lo as f64..=hi as f64);
                let b = a * r.random_range(0.75..1.25);
                let c = 0.5 * (a + b) * r.random_range(1.5..2.5);
                Ellipsoid {
                    center: [bc[0] + rad * br[0] * phi.cos(), bc[1] + rad * br[1] * phi.sin(), r.random_range(-0.3..0.3)],
                    radii: [a, b, c],
                    angle: r.random_range(0.0..std::f64::consts::PI),
                }
            })
            .collect();

        Anatomy {
            tissues,
            background_r1,
            tumors,
            rim_r1,
            core_r1,
            rim_field: SmoothField::draw(&mut r, 4, 9.0),
            uptake_field: SmoothField::draw(&mut r, 4, 9.0),
            magnitude_field: SmoothField::draw(&mut r, 3, 5.0),
            amplitude: r.random_range(0.8..2.0),
            gain: r.random_range(0.5..2.0),
        }
    }
}

/// Indices of the `k` largest scores, ties broken by ascending index.
fn top_k(candidates: &[usize], score: impl Fn(usize) -> f64, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = candidates.iter().map(|&i| (i, score(i))).collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx.into_iter().map(|(i, _)| i).collect()
}

fn map_modality(modality: Modality, r1: f64, gain: f64) -> f64 {
    match modality {
        Modality::T1 => 1000.0 / r1,
        Modality::T1w => gain * T1W_S0 * (1.0 - (-T1W_TR_S * r1).exp()),
    }
}

/// Generates one volume pair. Deterministic in `recipe` (including its seed).
pub fn generate(recipe: &PhantomRecipe) -> Result<PhantomVolume> {
    recipe.validate()?;
    let (h, w, d) = (recipe.height, recipe.width, recipe.depth);
    let n = h * w * d;
    let anat = Anatomy::draw(recipe);
    let coord = |idx: usize| -> [f64; 3] {
        let (i, j, k) = (idx / (w * d), (idx / d) % w, idx % d);
        [
            (i as f64 + 0.5) / h as f64 * 2.0 - 1.0,
            (j as f64 + 0.5) / w as f64 * 2.0 - 1.0,
            (k as f64 + 0.5) / d as f64 * 2.0 - 1.0,
        ]
    };

    let mut r1 = vec![0.0f64; n];
    let mut tumor_rho = vec![f64::INFINITY; n];
    for (idx, (rate, trho)) in r1.iter_mut().zip(tumor_rho.iter_mut()).enumerate() {
        let p = coord(idx);
        let mut v = anat.background_r1;
        for (e, tr1) in &anat.tissues {
            let m = 1.0 / (1.0 + (-(1.0 - e.rho(p)) / 0.04).exp());
            v = v * (1.0 - m) + tr1 * m;
        }
        *rate = v;
        *trho = anat.tumors.iter().map(|t| t.rho(p)).fold(f64::INFINITY, f64::min);
    }

    let mut roi_idx: Vec<usize> = (0..n).filter(|&i| tumor_rho[i] <= 1.0).collect();
    if roi_idx.is_empty() && !anat.tumors.is_empty() {
        // Tumor thinner than a voxel: keep the voxel closest to its center.
        let best = (0..n).min_by(|&a, &b| tumor_rho[a].total_cmp(&tumor_rho[b])).expect("n > 0");
        roi_idx.push(best);
    }
    let mut roi = Mask::empty(&[h, w, d]);
    let mut enhancing = Mask::empty(&[h, w, d]);
    let mut delta = vec![0.0f64; n];
    if !roi_idx.is_empty() {
        let f = recipe.enhancement_fraction as f64;
        let n_roi = roi_idx.len();
        let k_enh = (f * n_roi as f64).round() as usize;
        let k_rim = ((1.25 * f).min(1.0) * n_roi as f64).round().max(k_enh as f64) as usize;
        let rim = top_k(&roi_idx, |i| tumor_rho[i] + 0.12 * anat.rim_field.at(coord(i)), k_rim);
        let enh = top_k(&rim, |i| anat.uptake_field.at(coord(i)), k_enh);
        for &i in &roi_idx {
            roi.data_mut()[i] = true;
            r1[i] = anat.core_r1;
        }
        for &i in &rim {
            r1[i] = anat.rim_r1;
        }
        for &i in &enh {
            enhancing.data_mut()[i] = true;
            let q = 0.15 + 0.85 * 0.5 * (anat.magnitude_field.at(coord(i)) + 1.0);
            delta[i] = anat.amplitude * (q * ENHANCEMENT_LEVELS).round() / ENHANCEMENT_LEVELS;
        }
    }

    let gain = match recipe.modality {
        Modality::T1 => 1.0,
        Modality::T1w => anat.gain,
    };
    let mut pre: Vec<f64> = r1.iter().map(|&v| map_modality(recipe.modality, v, gain)).collect();
    let mut post: Vec<f64> = r1
        .iter()
        .zip(&delta)
        .zip(&pre)
        .map(|((&v, &dv), &p)| if dv > 0.0 { map_modality(recipe.modality, v + dv, gain) } else { p })
        .collect();

    if recipe.noise > 0.0 {
        let lo = pre.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pre.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sigma = recipe.noise as f64 * (hi - lo);
        // Separate acquisitions: each modality has its own noise stream.
        let stream_id = match recipe.modality {
            Modality::T1 => 1,
            Modality::T1w => 2,
        };
        let mut nr = rng::stream(recipe.seed, stream_id);
        let eta_pre = rng::normal_vec(&mut nr, n);
        let eta_post = rng::normal_vec(&mut nr, n);
        let (floor, ceil) = match recipe.modality {
            Modality::T1 => (T1_MIN_MS as f64, T1_MAX_MS as f64),
            Modality::T1w => (1e-3 * gain * T1W_S0, f64::INFINITY),
        };
        for i in 0..n {
            pre[i] = (pre[i] + sigma * eta_pre[i] as f64).clamp(floor, ceil);
            post[i] = (post[i] + sigma * eta_post[i] as f64).clamp(floor, ceil);
        }
    }

    let to_t = |v: Vec<f64>| Tensor::new(&[h, w, d], v.into_iter().map(|x| x as f32).collect());
    Ok(PhantomVolume {
        pre: to_t(pre)?,
        post: to_t(post)?,
        roi,
        enhancing,
        modality: recipe.modality,
        seed: recipe.seed,
        gain: gain as f32,
        recipe: recipe.clone(),
    })
}

/// The T1 and T1w renderings of the same anatomy. `recipe.modality` is
/// ignored; `seed` overrides `recipe.seed`.
pub fn paired_modalities(seed: u64, recipe: &PhantomRecipe) -> Result<(PhantomVolume, PhantomVolume)> {
    let mut r = recipe.clone();
    r.seed = seed;
    r.modality = Modality::T1;
    let t1 = generate(&r)?;
    r.modality = Modality::T1w;
    let t1w = generate(&r)?;
    Ok((t1, t1w))
}
