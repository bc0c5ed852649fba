//! Training and inference for the three model roles.
//!
//! Networks see `y * u` and predict `diff * u * k`, where `u` is the
//! modality's unit scale and `k` the model's target scale. Predictions are
//! returned in pair units.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{self, AugmentConfig, SlicePair, STACK};
use crate::diffusion::{self, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::flowmatch::{self, SolverMode, StepStats};
use crate::nets::{NetConfig, Role, UNetLite};
use crate::optim::{AdamConfig, AdamState};
use crate::phantom::Modality;
use crate::posterior::{self, PosteriorEnsemble};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    /// Multiplier from difference units to generative-model units.
    pub target_scale: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 1500, batch_size: 8, adam: AdamConfig::default(), augment: AugmentConfig::default(), target_scale: 1.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.target_scale.is_finite() && self.target_scale > 0.0) {
            return Err(Error::invalid(format!("target scale {} must be positive", self.target_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Posterior samples per test slice.
    pub ensemble: usize,
    /// Reverse-diffusion steps (at most the schedule length).
    pub dm_steps: usize,
    pub fm_solver: SolverMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { ensemble: 50, dm_steps: 2000, fm_solver: SolverMode::default() }
    }
}

/// A network together with the data conventions it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: UNetLite,
    pub modality: Modality,
    pub target_scale: f32,
    pub schedule: ScheduleConfig,
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    modality: Modality,
    target_scale: f32,
    schedule: ScheduleConfig,
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

impl Model {
    pub fn new(role: Role, config: NetConfig, modality: Modality, target_scale: f32, schedule: ScheduleConfig, seed: u64) -> Result<Model> {
        if role == Role::Dm {
            NoiseSchedule::from_config(&schedule)?;
        }
        Ok(Model { net: UNetLite::new(config, role, seed)?, modality, target_scale, schedule, epoch: 0 })
    }

    pub fn role(&self) -> Role {
        self.net.role()
    }

    fn unit(&self) -> f32 {
        self.modality.unit_scale()
    }

    /// Factor from difference units to network output units.
    fn out_scale(&self) -> f32 {
        let k = if self.role().is_generative() { self.target_scale } else { 1.0 };
        self.unit() * k
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta { modality: self.modality, target_scale: self.target_scale, schedule: self.schedule.clone() };
        self.net.save(path, self.epoch, serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<Model> {
        let (net, epoch, extra) = UNetLite::load(path)?;
        let meta: ModelMeta = serde_json::from_value(extra)?;
        Ok(Model { net, modality: meta.modality, target_scale: meta.target_scale, schedule: meta.schedule, epoch })
    }

    fn check_pair(&self, p: &SlicePair) -> Result<()> {
        if p.modality != self.modality {
            return Err(Error::invalid(format!("{} model given a {} pair", self.modality.name(), p.modality.name())));
        }
        Ok(())
    }

    /// Stacks pairs into network-unit `[N, 7, H, W]` inputs and `[N, 1, H, W]` targets.
    fn batch(&self, pairs: &[SlicePair]) -> Result<(Tensor, Tensor)> {
        let (h, w) = (pairs[0].height(), pairs[0].width());
        let (u, o) = (self.unit(), self.out_scale());
        let mut y = Vec::with_capacity(pairs.len() * STACK * h * w);
        let mut d = Vec::with_capacity(pairs.len() * h * w);
        for p in pairs {
            self.check_pair(p)?;
            if (p.height(), p.width()) != (h, w) {
                return Err(Error::shape("batch", format!("{}x{} pair in a {h}x{w} batch", p.height(), p.width())));
            }
            y.extend(p.y.data().iter().map(|v| v * u));
            d.extend(p.diff.data().iter().map(|v| v * o));
        }
        Ok((Tensor::new(&[pairs.len(), STACK, h, w], y)?, Tensor::new(&[pairs.len(), 1, h, w], d)?))
    }

    /// Runs `cfg.epochs` passes over `pairs` in shuffled mini-batches with
    /// fresh augmentation, calling `on_epoch` after each.
    pub fn train(&mut self, pairs: &[SlicePair], cfg: &TrainConfig, rng: &mut Rng, mut on_epoch: impl FnMut(EpochLoss)) -> Result<Vec<EpochLoss>> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::invalid("no training pairs"));
        }
        if self.role().is_generative() && (cfg.target_scale - self.target_scale).abs() > 0.0 {
            return Err(Error::invalid(format!("model target scale {} differs from training config {}", self.target_scale, cfg.target_scale)));
        }
        let schedule = NoiseSchedule::from_config(&self.schedule)?;
        let mut adam = AdamState::new(cfg.adam.clone(), self.net.params());
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut log = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let aug: Vec<SlicePair> = chunk.iter().map(|&i| dataset::augment(&pairs[i], &cfg.augment, rng)).collect::<Result<_>>()?;
                let (y, target) = self.batch(&aug)?;
                let mut g = Graph::new();
                let bound = self.net.bind(&mut g);
                let loss = match self.role() {
                    Role::E2e => {
                        let yv = g.constant(y);
                        let tv = g.constant(target);
                        let out = self.net.forward_graph(&mut g, &bound, yv, None)?;
                        g.l1(out, tv)?
                    }
                    Role::Dm => diffusion::net_dsm_loss(&mut g, &self.net, &bound, &schedule, &target, &y, rng)?,
                    Role::Fm => flowmatch::net_cfm_loss(&mut g, &self.net, &bound, &target, &y, rng)?,
                };
                let lv = g.value(loss).data()[0] as f64;
                if !lv.is_finite() {
                    return Err(Error::numeric(format!("training loss became {lv} at epoch {}", self.epoch + 1)));
                }
                g.backward(loss)?;
                self.net.collect_grads(&g, &bound)?;
                adam.step(self.net.params_mut())?;
                total += lv;
                batches += 1;
            }
            self.epoch += 1;
            let e = EpochLoss { epoch: self.epoch, loss: total / batches as f64 };
            on_epoch(e);
            log.push(e);
        }
        Ok(log)
    }

    /// E2E difference prediction for one pair, in pair units.
    pub fn predict(&self, pair: &SlicePair) -> Result<Vec<f32>> {
        if self.role() != Role::E2e {
            return Err(Error::invalid(format!("predict needs an e2e model, got {}", self.role().name())));
        }
        let (y, _) = self.batch(std::slice::from_ref(pair))?;
        let out = self.net.forward_e2e(&y)?;
        let o = self.out_scale();
        Ok(out.data().iter().map(|v| v / o).collect())
    }

    /// `n` posterior samples for one pair, aggregated in pair units, plus
    /// the flow solver statistics of each sample (empty for diffusion).
    pub fn sample(&self, pair: &SlicePair, cfg: &SamplerConfig, rng: &mut Rng) -> Result<(PosteriorEnsemble, Vec<StepStats>)> {
        let n = cfg.ensemble;
        let (y1, _) = self.batch(std::slice::from_ref(pair))?;
        let per = y1.numel();
        let mut yd = Vec::with_capacity(n * per);
        for _ in 0..n {
            yd.extend_from_slice(y1.data());
        }
        let (h, w) = (pair.height(), pair.width());
        let y = Tensor::new(&[n, STACK, h, w], yd)?;
        let (out, stats) = match self.role() {
            Role::Dm => {
                let schedule = NoiseSchedule::from_config(&self.schedule)?;
                (diffusion::dm_sample(&self.net, &schedule, &y, cfg.dm_steps, rng)?, Vec::new())
            }
            Role::Fm => flowmatch::fm_sample(&self.net, &y, &cfg.fm_solver, rng)?,
            Role::E2e => return Err(Error::invalid("sampling needs a dm or fm model")),
        };
        let o = self.out_scale();
        let samples = out
            .data()
            .chunks(h * w)
            .map(|c| Tensor::new(&[h, w], c.iter().map(|v| v / o).collect()))
            .collect::<Result<Vec<_>>>()?;
        let label = format!("v{}s{}", pair.volume_id, pair.slice_index);
        Ok((posterior::aggregate(samples, self.role(), label)?, stats))
    }
}
