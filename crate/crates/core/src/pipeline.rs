//! The gen → train → sample → eval → sweep workflow on a run directory.
//!
//! ```text
//! <output_dir>/<name>/
//!   manifest.json          config echo, seed, version and every command run
//!   data/<modality>/       phantom volumes and dataset.json
//!   checkpoints/           <model>_<modality>.vcb
//!   samples/<model>_<modality>/
//!   reports/               CSV tables and SVG plots
//! ```
//!
//! All randomness is drawn from sub-streams of the run seed, so a run is a
//! pure function of its configuration.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{self, Dataset, SlicePair};
use crate::error::{Error, Result};
use crate::export;
use crate::flowmatch;
use crate::metrics::{self, SegmentationSource, SsimParams};
use crate::nets::Role;
use crate::phantom::{Modality, PhantomRecipe, T1_MAX_MS};
use crate::report::{self, MetricRow, SweepCurve};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::{EpochLoss, Model};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRecord {
    pub argv: Vec<String>,
    pub command: String,
    pub config: RunConfig,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub name: String,
    pub seed: u64,
    pub version: String,
    pub commands: Vec<CommandRecord>,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        RunPaths { root: cfg.run_dir() }
    }

    pub fn data(&self, m: Modality) -> PathBuf {
        self.root.join("data").join(m.name())
    }

    pub fn checkpoint(&self, role: Role, m: Modality) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}_{}.vcb", role.name(), m.name()))
    }

    pub fn samples(&self, role: Role, m: Modality) -> PathBuf {
        self.root.join("samples").join(format!("{}_{}", role.name(), m.name()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Appends a command record to the run manifest, creating it if needed.
pub fn record_command(cfg: &RunConfig, argv: &[String], command: &str, wall_seconds: f64) -> Result<()> {
    let path = RunPaths::new(cfg).root.join(MANIFEST);
    let mut m = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            RunManifest { name: cfg.name.clone(), seed: cfg.seed, version: env!("CARGO_PKG_VERSION").to_string(), commands: Vec::new() }
        }
        Err(e) => return Err(e.into()),
    };
    m.commands.push(CommandRecord { argv: argv.to_vec(), command: command.to_string(), config: cfg.clone(), wall_seconds });
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

/// Runs `f` and records it in the manifest with its wall time.
pub fn timed<T>(cfg: &RunConfig, argv: &[String], command: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    record_command(cfg, argv, command, start.elapsed().as_secs_f64())?;
    Ok(out)
}

fn role_index(role: Role) -> u64 {
    match role {
        Role::E2e => 0,
        Role::Dm => 1,
        Role::Fm => 2,
    }
}

fn modality_index(m: Modality) -> u64 {
    match m {
        Modality::T1 => 0,
        Modality::T1w => 1,
    }
}

const INIT_STREAMS: u64 = 0x100;
const TRAIN_STREAMS: u64 = 0x200;
const SAMPLE_STREAMS: u64 = 0x300;

fn stream_id(base: u64, role: Role, m: Modality) -> u64 {
    base + role_index(role) * 2 + modality_index(m)
}

pub fn slice_label(p: &SlicePair) -> String {
    format!("v{}s{}", p.volume_id, p.slice_index)
}

fn check_modality(cfg: &RunConfig, m: Modality) -> Result<()> {
    if cfg.modalities.contains(&m) {
        Ok(())
    } else {
        Err(Error::invalid(format!("modality {} is not part of this run", m.name())))
    }
}

/// Generates one dataset per modality. All modalities share the volume
/// seeds, so their volumes are paired acquisitions of the same anatomy.
pub fn gen(cfg: &RunConfig) -> Result<Vec<dataset::DatasetManifest>> {
    let paths = RunPaths::new(cfg);
    cfg.modalities
        .iter()
        .map(|&m| {
            let dir = paths.data(m);
            std::fs::create_dir_all(&dir)?;
            dataset::generate_dataset(&dir, &PhantomRecipe { modality: m, ..cfg.phantom.clone() }, &cfg.split, cfg.seed)
        })
        .collect()
}

fn open_dataset(cfg: &RunConfig, m: Modality) -> Result<Dataset> {
    let dir = RunPaths::new(cfg).data(m);
    Dataset::open(&dir).map_err(|e| match e {
        Error::Io(io) => Error::invalid(format!("no dataset in {} ({io}); run gen first", dir.display())),
        other => other,
    })
}

fn load_model(cfg: &RunConfig, role: Role, m: Modality) -> Result<Model> {
    let path = RunPaths::new(cfg).checkpoint(role, m);
    if !path.exists() {
        return Err(Error::invalid(format!("missing checkpoint {}; run train first", path.display())));
    }
    Model::load(&path)
}

/// Trains one model on the training volumes of one modality, writes its
/// checkpoint and a per-epoch loss table.
pub fn train(cfg: &RunConfig, role: Role, m: Modality, mut on_epoch: impl FnMut(EpochLoss)) -> Result<Vec<EpochLoss>> {
    check_modality(cfg, m)?;
    let ds = open_dataset(cfg, m)?;
    let pairs = ds.pairs(&ds.manifest.split.train)?;
    let init_seed = rng::stream(cfg.seed, stream_id(INIT_STREAMS, role, m)).random();
    let mut model = Model::new(role, cfg.net.clone(), m, cfg.train.target_scale, cfg.schedule.clone(), init_seed)?;
    let mut r = rng::stream(cfg.seed, stream_id(TRAIN_STREAMS, role, m));
    let log = model.train(&pairs, &cfg.train, &mut r, &mut on_epoch)?;
    let paths = RunPaths::new(cfg);
    let ckpt = paths.checkpoint(role, m);
    std::fs::create_dir_all(ckpt.parent().unwrap_or(Path::new(".")))?;
    model.save(&ckpt)?;
    std::fs::create_dir_all(paths.reports())?;
    let rows: Vec<MetricRow> = log.iter().map(|e| MetricRow::new("train", role.name(), m, format!("loss_epoch{}", e.epoch), e.loss)).collect();
    report::write_csv(&paths.reports().join(format!("train_{}_{}.csv", role.name(), m.name())), &rows)?;
    Ok(log)
}

/// Writes predictions for every test slice: `<slice>_mean` for all models
/// and `<slice>_std` for generative ones. Flow models also get a solver
/// statistics table.
pub fn sample(cfg: &RunConfig, role: Role, m: Modality) -> Result<()> {
    check_modality(cfg, m)?;
    let ds = open_dataset(cfg, m)?;
    let model = load_model(cfg, role, m)?;
    let paths = RunPaths::new(cfg);
    let dir = paths.samples(role, m);
    std::fs::create_dir_all(&dir)?;
    let mut labels = Vec::new();
    let mut stats = Vec::new();
    for (i, pair) in ds.test_pairs()?.iter().enumerate() {
        let label = slice_label(pair);
        let (h, w) = (pair.height(), pair.width());
        if role == Role::E2e {
            let pred = Tensor::new(&[h, w], model.predict(pair)?)?;
            pred.save(dir.join(format!("{label}_mean.vct")))?;
            let abs: Vec<f32> = pred.data().iter().map(|v| v.abs()).collect();
            export::write_pgm(&dir.join(format!("{label}_mean.pgm")), h, w, &abs)?;
            continue;
        }
        let seed = rng::stream(cfg.seed, stream_id(SAMPLE_STREAMS, role, m)).random::<u64>();
        let mut r = rng::stream(seed, i as u64);
        let (ens, st) = model.sample(pair, &cfg.sampler, &mut r)?;
        ens.save(&dir, &label)?;
        for (k, s) in st.into_iter().enumerate() {
            labels.push(format!("{label}#{k}"));
            stats.push(s);
        }
    }
    if role == Role::Fm {
        std::fs::create_dir_all(paths.reports())?;
        flowmatch::write_step_stats(&paths.reports().join(format!("fm_steps_{}.csv", m.name())), &labels, &stats)?;
    }
    Ok(())
}

/// Predicted difference maps (and stddev maps for generative models) of
/// each test slice, read back from the samples directory.
fn load_predictions(cfg: &RunConfig, role: Role, m: Modality, pairs: &[SlicePair]) -> Result<Vec<(Vec<f32>, Option<Vec<f32>>)>> {
    let dir = RunPaths::new(cfg).samples(role, m);
    pairs
        .iter()
        .map(|p| {
            let label = slice_label(p);
            let mean_path = dir.join(format!("{label}_mean.vct"));
            if !mean_path.exists() {
                return Err(Error::invalid(format!("missing {}; run sample --model {} --modality {} first", mean_path.display(), role.name(), m.name())));
            }
            let mean = Tensor::load(&mean_path)?.into_data();
            let std = if role.is_generative() { Some(Tensor::load(dir.join(format!("{label}_std.vct")))?.into_data()) } else { None };
            if mean.len() != p.x.numel() {
                return Err(Error::shape("eval", format!("{label}: {} predicted voxels for a {}-voxel slice", mean.len(), p.x.numel())));
            }
            Ok((mean, std))
        })
        .collect()
}

fn ssim_range(m: Modality) -> f64 {
    match m {
        Modality::T1 => T1_MAX_MS as f64,
        Modality::T1w => 1.0,
    }
}

/// Image-quality metrics per test slice, their means, and pooled Pearson
/// correlations between the stddev map and the absolute and relative
/// errors. The zero-difference baseline is reported as model `pre`.
pub fn eval(cfg: &RunConfig) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &m in &cfg.modalities {
        let pairs = open_dataset(cfg, m)?.test_pairs()?;
        if pairs.is_empty() {
            return Err(Error::invalid(format!("{} dataset has no test slices", m.name())));
        }
        let ssim_p = SsimParams::with_range(ssim_range(m));
        let mut sources: Vec<(String, Vec<(Vec<f32>, Option<Vec<f32>>)>)> =
            vec![("pre".into(), pairs.iter().map(|p| (vec![0.0; p.x.numel()], None)).collect())];
        for &role in &cfg.models {
            sources.push((role.name().into(), load_predictions(cfg, role, m, &pairs)?));
        }
        for (name, preds) in &sources {
            let mut sums = [0.0f64; 3];
            let (mut std_all, mut ae_all, mut re_all, mut skip_all) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (p, (mean, std)) in pairs.iter().zip(preds) {
                let label = slice_label(p);
                let (h, w) = (p.height(), p.width());
                let recon: Vec<f32> = p.pre().iter().zip(mean).map(|(a, b)| a + b).collect();
                let post = p.x.data();
                let vals = [metrics::mae(&recon, post, None)?, metrics::mae(&recon, post, Some(&p.roi))?, metrics::ssim(&recon, post, h, w, &ssim_p)?];
                for (k, (metric, v)) in ["mae", "rmae", "ssim"].iter().zip(vals).enumerate() {
                    rows.push(MetricRow::new(&label, name, m, *metric, v));
                    sums[k] += v;
                }
                if let Some(std) = std {
                    let (re, skip) = metrics::relative_error(&recon, post, p.pre())?;
                    std_all.extend_from_slice(std);
                    ae_all.extend(metrics::absolute_error(&recon, post)?);
                    re_all.extend(re);
                    skip_all.extend(skip);
                }
            }
            for (k, metric) in ["mae", "rmae", "ssim"].iter().enumerate() {
                rows.push(MetricRow::new("mean", name, m, *metric, sums[k] / pairs.len() as f64));
            }
            if !std_all.is_empty() {
                for (metric, target, skip) in [("std_ae", &ae_all, None), ("std_re", &re_all, Some(skip_all.as_slice()))] {
                    let (r, pv) = match metrics::pearson(&std_all, target, skip) {
                        Ok(c) => (c.r, c.p_value),
                        Err(_) => (f64::NAN, f64::NAN),
                    };
                    rows.push(MetricRow::new("all", name, m, format!("pearson_r_{metric}"), r));
                    rows.push(MetricRow::new("all", name, m, format!("pearson_p_{metric}"), pv));
                }
            }
        }
    }
    let dir = RunPaths::new(cfg).reports();
    std::fs::create_dir_all(&dir)?;
    report::write_csv(&dir.join("metrics.csv"), &rows)?;
    Ok(rows)
}

fn source_of(role: Role) -> SegmentationSource {
    match role {
        Role::E2e => SegmentationSource::E2e,
        Role::Dm => SegmentationSource::Dm,
        Role::Fm => SegmentationSource::Fm,
    }
}

/// Dice and Jaccard of top-p% segmentations against the ground-truth
/// difference, averaged over test slices, for every threshold in the
/// config. With two modalities, also compares their ground truths.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<(Modality, SweepCurve)>> {
    let th = &cfg.metrics.thresholds;
    let mut curves = Vec::new();
    let mut gts: Vec<(Modality, Vec<SlicePair>)> = Vec::new();
    for &m in &cfg.modalities {
        let pairs = open_dataset(cfg, m)?.test_pairs()?;
        if pairs.is_empty() {
            return Err(Error::invalid(format!("{} dataset has no test slices", m.name())));
        }
        let gt: Vec<&[f32]> = pairs.iter().map(|p| p.diff.data()).collect();
        let rois: Vec<&crate::mask::Mask> = pairs.iter().map(|p| &p.roi).collect();
        let zeros: Vec<Vec<f32>> = pairs.iter().map(|p| vec![0.0; p.x.numel()]).collect();
        let zr: Vec<&[f32]> = zeros.iter().map(|v| v.as_slice()).collect();
        curves.push((m, report::sweep_curve("pre", SegmentationSource::PreContrast, &gt, &zr, &rois, th)?));
        for &role in &cfg.models {
            let preds = load_predictions(cfg, role, m, &pairs)?;
            let pr: Vec<&[f32]> = preds.iter().map(|(mean, _)| mean.as_slice()).collect();
            curves.push((m, report::sweep_curve(role.name(), source_of(role), &gt, &pr, &rois, th)?));
        }
        gts.push((m, pairs));
    }
    if let [(a, pa), (b, pb), ..] = gts.as_slice() {
        let same = pa.len() == pb.len() && pa.iter().zip(pb).all(|(x, y)| slice_label(x) == slice_label(y) && x.roi == y.roi);
        if same {
            let ga: Vec<&[f32]> = pa.iter().map(|p| p.diff.data()).collect();
            let gb: Vec<&[f32]> = pb.iter().map(|p| p.diff.data()).collect();
            let rois: Vec<&crate::mask::Mask> = pa.iter().map(|p| &p.roi).collect();
            curves.push((*a, report::sweep_curve(format!("gt_{}", b.name()), SegmentationSource::GroundTruth, &ga, &gb, &rois, th)?));
        }
    }
    let mut rows = Vec::new();
    for (m, c) in &curves {
        for (i, &p) in c.thresholds.iter().enumerate() {
            rows.push(MetricRow::new("mean", &c.label, *m, "dice", c.dice[i]).at(p));
            rows.push(MetricRow::new("mean", &c.label, *m, "jaccard", c.jaccard[i]).at(p));
        }
    }
    let dir = RunPaths::new(cfg).reports();
    std::fs::create_dir_all(&dir)?;
    report::write_csv(&dir.join("sweep.csv"), &rows)?;
    for &m in &cfg.modalities {
        for (metric, pick) in [("dice", 0usize), ("jaccard", 1)] {
            let series: Vec<(String, &[f64], &[f64])> = curves
                .iter()
                .filter(|(cm, _)| *cm == m)
                .map(|(_, c)| (c.label.clone(), c.thresholds.as_slice(), if pick == 0 { c.dice.as_slice() } else { c.jaccard.as_slice() }))
                .collect();
            let refs: Vec<(&str, &[f64], &[f64])> = series.iter().map(|(l, x, y)| (l.as_str(), *x, *y)).collect();
            let svg = report::render_svg(&format!("{} segmentation agreement ({})", metric, m.name()), metric, &refs);
            std::fs::write(dir.join(format!("sweep_{}_{}.svg", metric, m.name())), svg)?;
        }
    }
    Ok(curves)
}
