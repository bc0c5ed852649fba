//! Conditional U-Net used as the E2E regressor, the diffusion noise
//! predictor and the flow-matching velocity field.
//!
//! Each resolution level has two 3x3 conv + SiLU layers. Generative roles
//! get a sinusoidal time embedding passed through a small MLP; every level
//! then modulates its first conv output with `h * (1 + scale) + shift`.
//! The output head is zero-initialized.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::STACK;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    E2e,
    Dm,
    Fm,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::E2e => "e2e",
            Role::Dm => "dm",
            Role::Fm => "fm",
        }
    }

    pub fn is_generative(self) -> bool {
        self != Role::E2e
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e2e" => Ok(Role::E2e),
            "dm" => Ok(Role::Dm),
            "fm" => Ok(Role::Fm),
            other => Err(Error::invalid(format!("unknown model {other:?} (expected e2e, dm or fm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Width of the sinusoidal time embedding (even).
    pub time_embedding: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { levels: 3, base_channels: 16, time_embedding: 32 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 6 || self.base_channels == 0 {
            return Err(Error::invalid(format!("net needs 1..=6 levels and positive channels, got {self:?}")));
        }
        if self.time_embedding < 2 || self.time_embedding % 2 != 0 {
            return Err(Error::invalid(format!("time embedding width {} must be even and at least 2", self.time_embedding)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn hidden(&self) -> usize {
        2 * self.time_embedding
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with variance `2 / fan_in`.
    He(usize),
    /// Normal with the given standard deviation.
    Small(f32),
    Zero,
}

fn layout(cfg: &NetConfig, role: Role) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut conv = |name: String, cin: usize, cout: usize, init: Init| {
        out.push((format!("{name}.w"), vec![cout, cin, 3, 3], init));
        out.push((format!("{name}.b"), vec![cout], Init::Zero));
    };
    let cin0 = STACK + usize::from(role.is_generative());
    let mut cin = cin0;
    for l in 0..cfg.levels {
        let c = cfg.channels(l);
        conv(format!("enc{l}.a"), cin, c, Init::He(cin * 9));
        conv(format!("enc{l}.b"), c, c, Init::He(c * 9));
        cin = c;
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let c = cfg.channels(l);
        let cat = cfg.channels(l + 1) + c;
        conv(format!("dec{l}.a"), cat, c, Init::He(cat * 9));
        conv(format!("dec{l}.b"), c, c, Init::He(c * 9));
    }
    conv("head".into(), cfg.channels(0), 1, Init::Zero);
    if role.is_generative() {
        let (e, hd) = (cfg.time_embedding, cfg.hidden());
        out.push(("time.w".into(), vec![e, hd], Init::He(e)));
        out.push(("time.b".into(), vec![hd], Init::Zero));
        let film_levels: Vec<(String, usize)> = (0..cfg.levels)
            .map(|l| (format!("enc{l}"), cfg.channels(l)))
            .chain((0..cfg.levels.saturating_sub(1)).rev().map(|l| (format!("dec{l}"), cfg.channels(l))))
            .collect();
        let std = (1.0 / hd as f32).sqrt();
        for (name, c) in film_levels {
            out.push((format!("{name}.scale.w"), vec![hd, c], Init::Small(std)));
            out.push((format!("{name}.scale.b"), vec![c], Init::Zero));
            out.push((format!("{name}.shift.w"), vec![hd, c], Init::Small(std)));
            out.push((format!("{name}.shift.b"), vec![c], Init::Zero));
        }
    }
    out
}

/// Sinusoidal embedding of `t` in `[0, 1]`: `[sin(1000 t f_k), cos(1000 t f_k)]`
/// with geometrically spaced frequencies `f_k` from 1 down to 1/1000.
pub fn time_embedding(t: &[f32], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(t.len() * width);
    for &tv in t {
        let arg = 1000.0 * tv as f64;
        let freqs = (0..half).map(|k| (-(1000f64.ln()) * k as f64 / half.max(2).saturating_sub(1) as f64).exp());
        let (s, c): (Vec<f32>, Vec<f32>) = freqs.map(|f| ((arg * f).sin() as f32, (arg * f).cos() as f32)).unzip();
        data.extend(s);
        data.extend(c);
    }
    Tensor::new(&[t.len(), width], data).expect("embedding shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetLite {
    config: NetConfig,
    role: Role,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

/// Parameters of a network bound into one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl UNetLite {
    pub fn new(config: NetConfig, role: Role, seed: u64) -> Result<UNetLite> {
        config.validate()?;
        let mut r = rng::stream(seed, 0x6e6574);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(&config, role) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::He(fan_in) => {
                    let d = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("valid std");
                    (0..n).map(|_| d.sample(&mut r)).collect()
                }
                Init::Small(std) => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| d.sample(&mut r)).collect()
                }
            };
            names.push(name);
            params.push(Tensor::new(&shape, data)?.with_grad());
        }
        Ok(Self::assemble(config, role, names, params))
    }

    fn assemble(config: NetConfig, role: Role, names: Vec<String>, params: Vec<Tensor>) -> UNetLite {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        UNetLite { config, role, names, params, index }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn in_channels(&self) -> usize {
        STACK + usize::from(self.role.is_generative())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Inserts the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.leaf(p)).collect() }
    }

    /// Inserts the parameters as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.constant(p.clone())).collect() }
    }

    /// Adds the gradients of the last backward pass into the parameters.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            g.accumulate_into(v, p)?;
        }
        Ok(())
    }

    fn p(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << (self.config.levels - 1);
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape("unet", format!("{h}x{w} input is not divisible by {m}")));
        }
        Ok(())
    }

    /// Records a forward pass of `input: [N, C, H, W]` and returns the
    /// `[N, 1, H, W]` output. `t` (one entry per sample in `[0, 1]`) is
    /// required exactly for generative roles.
    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, input: Var, t: Option<&[f32]>) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels() {
            return Err(Error::shape(
                "unet",
                format!("{} expects [N, {}, H, W] input, got {shape:?}", self.role.name(), self.in_channels()),
            ));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        self.check_spatial(h, w)?;
        let temb = match (self.role.is_generative(), t) {
            (false, None) => None,
            (false, Some(_)) => return Err(Error::invalid("e2e network takes no time input")),
            (true, None) => return Err(Error::invalid(format!("{} network needs a time input", self.role.name()))),
            (true, Some(t)) => {
                if t.len() != n {
                    return Err(Error::shape("unet", format!("{} time values for batch {n}", t.len())));
                }
                if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::invalid(format!("time {bad} outside [0, 1]")));
                }
                let e = g.constant(time_embedding(t, self.config.time_embedding));
                let hcur = g.linear(e, self.p(bound, "time.w"), self.p(bound, "time.b"))?;
                Some(g.silu(hcur)?)
            }
        };
        let conv = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let y = g.conv2d(x, self.p(bound, &format!("{name}.w")), Some(self.p(bound, &format!("{name}.b"))))?;
            g.silu(y)
        };
        let film = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
            let Some(te) = temb else { return Ok(x) };
            let s = g.linear(te, self.p(bound, &format!("{name}.scale.w")), self.p(bound, &format!("{name}.scale.b")))?;
            let s = g.add_scalar(s, 1.0)?;
            let b = g.linear(te, self.p(bound, &format!("{name}.shift.w")), self.p(bound, &format!("{name}.shift.b")))?;
            g.affine_scale_shift(x, s, b)
        };
        let mut skips = Vec::new();
        let mut x = input;
        for l in 0..self.config.levels {
            if l > 0 {
                x = g.downsample2x(x)?;
            }
            let name = format!("enc{l}");
            x = conv(g, x, &format!("{name}.a"))?;
            x = film(g, x, &name)?;
            x = conv(g, x, &format!("{name}.b"))?;
            skips.push(x);
        }
        for l in (0..self.config.levels - 1).rev() {
            let up = g.upsample2x(x)?;
            x = g.concat_channels(&[up, skips[l]])?;
            let name = format!("dec{l}");
            x = conv(g, x, &format!("{name}.a"))?;
            x = film(g, x, &name)?;
            x = conv(g, x, &format!("{name}.b"))?;
        }
        g.conv2d(x, self.p(bound, "head.w"), Some(self.p(bound, "head.b")))
    }

    /// E2E prediction of the difference image for `y: [N, 7, H, W]`.
    pub fn forward_e2e(&self, y: &Tensor) -> Result<Tensor> {
        if self.role != Role::E2e {
            return Err(Error::invalid(format!("forward_e2e on a {} network", self.role.name())));
        }
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let yv = g.constant(y.clone());
        let out = self.forward_graph(&mut g, &b, yv, None)?;
        Ok(g.value(out).clone())
    }

    /// Generative field for `x_t: [N, 1, H, W]`, `y: [N, 7, H, W]` at times `t`.
    pub fn forward_conditional(&self, x_t: &Tensor, y: &Tensor, t: &[f32]) -> Result<Tensor> {
        if !self.role.is_generative() {
            return Err(Error::invalid("forward_conditional on an e2e network"));
        }
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let xv = g.constant(x_t.clone());
        let yv = g.constant(y.clone());
        let input = g.concat_channels(&[xv, yv])?;
        let out = self.forward_graph(&mut g, &b, input, Some(t))?;
        Ok(g.value(out).clone())
    }

    /// Writes the weights as a bundle: magic `VCB1`, u64 LE header length,
    /// JSON header, then one `.vct` record per parameter. `extra` is stored
    /// verbatim in the header.
    pub fn save(&self, path: &Path, epoch: usize, extra: serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            role: self.role,
            config: self.config.clone(),
            epoch,
            extra,
            names: self.names.clone(),
            shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.write_all(b"VCB1")?;
        buf.write_all(&(json.len() as u64).to_le_bytes())?;
        buf.write_all(&json)?;
        for p in &self.params {
            p.write_vct(&mut buf)?;
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a bundle, returning the network, its epoch and the extra header value.
    pub fn load(path: &Path) -> Result<(UNetLite, usize, serde_json::Value)> {
        let bytes = fs::read(path)?;
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != b"VCB1" {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(Error::Format("checkpoint header exceeds file".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let expected = layout(&header.config, header.role);
        if expected.len() != header.names.len() {
            return Err(Error::Format("checkpoint does not match the network layout".into()));
        }
        let mut params = Vec::with_capacity(expected.len());
        for ((name, shape, _), hname) in expected.iter().zip(&header.names) {
            let t = Tensor::read_vct(&mut r)?;
            if name != hname || t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("checkpoint parameter {hname} does not match {name} {shape:?}")));
            }
            params.push(t.with_grad());
        }
        Ok((Self::assemble(header.config, header.role, header.names, params), header.epoch, header.extra))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    role: Role,
    config: NetConfig,
    epoch: usize,
    #[serde(default)]
    extra: serde_json::Value,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetConfig {
        NetConfig { levels: 2, base_channels: 4, time_embedding: 8 }
    }

    fn ramp(shape: &[usize], k: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| (i as f32 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn zero_head_means_zero_output() {
        let net = UNetLite::new(NetConfig::default(), Role::E2e, 1).unwrap();
        let out = net.forward_e2e(&ramp(&[1, 7, 64, 64], 0.37)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 64, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count_is_an_error() {
        let net = UNetLite::new(small(), Role::E2e, 1).unwrap();
        assert!(net.forward_e2e(&ramp(&[1, 6, 8, 8], 0.1)).is_err());
        let fm = UNetLite::new(small(), Role::Fm, 1).unwrap();
        assert!(fm.forward_conditional(&ramp(&[1, 1, 8, 8], 0.1), &ramp(&[1, 7, 8, 8], 0.2), &[1.5]).is_err());
        assert!(fm.forward_conditional(&ramp(&[1, 1, 8, 8], 0.1), &ramp(&[1, 7, 8, 8], 0.2), &[0.5, 0.5]).is_err());
        assert!(net.forward_e2e(&ramp(&[1, 7, 6, 5], 0.1)).is_err());
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let a = UNetLite::new(small(), Role::Dm, 1).unwrap();
        let b = UNetLite::new(small(), Role::Dm, 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params(), b.params());
        // enc0 (8->4, 4->4), enc1 (4->8, 8->8), dec0 (12->4, 4->4), head (4->1)
        let convs = [(8, 4), (4, 4), (4, 8), (8, 8), (12, 4), (4, 4), (4, 1)];
        let conv_params: usize = convs.iter().map(|(i, o)| i * o * 9 + o).sum();
        let time = 8 * 16 + 16 + [4, 8, 4].iter().map(|c| 2 * (16 * c + c)).sum::<usize>();
        assert_eq!(a.param_count(), conv_params + time);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = UNetLite::new(small(), Role::Fm, 4).unwrap();
        let path = dir.path().join("fm.vcb");
        net.save(&path, 17, serde_json::json!({"k": 1})).unwrap();
        let (back, epoch, extra) = UNetLite::load(&path).unwrap();
        assert_eq!(epoch, 17);
        assert_eq!(extra["k"], 1);
        assert_eq!(back, net);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(UNetLite::load(&path).is_err());
    }

    #[test]
    fn embedding_distinguishes_times() {
        let e = time_embedding(&[0.0, 1.0], 32);
        let (a, b) = e.data().split_at(32);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 0.1));
        assert_eq!(&a[..16], &[0.0; 16]);
        assert_eq!(&a[16..], &[1.0; 16]);
    }
}
