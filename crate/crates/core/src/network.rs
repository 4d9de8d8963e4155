//! Cost-signature layers, the spatial encoder-decoder, full-pipeline
//! inference and the weight file format.
//!
//! Channel plan for the default configuration:
//!
//! ```text
//! cost volumes (3 x 128) --1x1+BN+ReLU--> 192 -> 96 -> 48 -> 32   signature
//! [signature, left YUV] 35 --3x3+BN+ReLU x3--> 32                  stem
//! [stem, left YUV] 35 -> encoder 32, 48, 64, 80, 96, 112 (2x2 max-pool
//!   between scales) -> decoder with 2x2 transposed-conv upsampling and skip
//!   concatenation -> 32 --1x1--> 1                                  half-res map
//! ```
//!
//! Convolutions followed by batch norm carry no bias; the norm's shift
//! takes that role.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::gradcheck::{grad_check_with, random_tensor, GradCheckOptions};
use crate::autodiff::{ops, BatchStats, Padding, Tape, Tensor, Var};
use crate::costvol::{build_volumes, normalize_in_place, CostStats, CostType, CostVolume};
use crate::imageio::{write_atomic, DisparityMap, RawImage};
use crate::preprocess::{downsample2x, pad_to_multiple, rgb_to_yuv, CropRecord, PlanarImage};
use crate::{Error, Result};

/// Image channels concatenated to the signature and stem outputs.
pub const IMAGE_CHANNELS: usize = 3;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub disparities: usize,
    pub costs: Vec<CostType>,
    pub signature_dims: Vec<usize>,
    pub stem_layers: usize,
    pub stem_kernel: usize,
    pub stem_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub channel_increment: usize,
    pub convs_per_scale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            disparities: 128,
            costs: CostType::ALL.to_vec(),
            signature_dims: vec![192, 96, 48, 32],
            stem_layers: 3,
            stem_kernel: 3,
            stem_channels: 32,
            levels: 5,
            base_channels: 32,
            channel_increment: 16,
            convs_per_scale: 2,
        }
    }
}

impl ModelConfig {
    /// The census-only ablation.
    pub fn census_only() -> Self {
        Self { costs: vec![CostType::Census], ..Self::default() }
    }

    /// The three-level encoder-decoder ablation.
    pub fn three_level() -> Self {
        Self { levels: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.disparities == 0 {
            return bad("disparity count must be positive");
        }
        if self.costs.is_empty() {
            return bad("at least one cost type is required");
        }
        let canonical: Vec<CostType> = CostType::ALL.into_iter().filter(|c| self.costs.contains(c)).collect();
        if canonical != self.costs {
            return bad("cost types must be unique and ordered census, u, v");
        }
        if self.signature_dims.is_empty() || self.signature_dims.contains(&0) {
            return bad("signature dims must be non-empty and positive");
        }
        if self.signature_dims.windows(2).any(|p| p[1] >= p[0]) {
            return bad("signature dims must be strictly decreasing");
        }
        if self.levels != 3 && self.levels != 5 {
            return bad("encoder-decoder levels must be 3 or 5");
        }
        if self.stem_layers == 0 || self.stem_channels == 0 || self.stem_kernel == 0 || self.stem_kernel > 3 {
            return bad("stem needs at least one layer with a 1..=3 kernel");
        }
        if self.base_channels == 0 || self.convs_per_scale == 0 {
            return bad("encoder-decoder needs channels and convolutions");
        }
        Ok(())
    }

    pub fn signature_input_channels(&self) -> usize {
        self.costs.len() * self.disparities
    }

    pub fn signature_channels(&self) -> usize {
        *self.signature_dims.last().expect("validated")
    }

    /// Encoder channels per scale, finest first (`levels + 1` entries).
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..=self.levels).map(|s| self.base_channels + s * self.channel_increment).collect()
    }

    /// Spatial dims fed to the encoder-decoder must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.levels
    }

    /// Expected shape of every named tensor, in file order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
            for p in ["gamma", "beta", "running_mean", "running_var"] {
                out.push((format!("{name}.bn.{p}"), vec![c]));
            }
        };
        let mut cin = self.signature_input_channels();
        for (i, &c) in self.signature_dims.iter().enumerate() {
            out.push((format!("sig.{i}.weight"), vec![c, cin, 1, 1]));
            bn(&mut out, format!("sig.{i}"), c);
            cin = c;
        }
        cin = self.signature_channels() + IMAGE_CHANNELS;
        for i in 0..self.stem_layers {
            let k = self.stem_kernel;
            out.push((format!("stem.{i}.weight"), vec![self.stem_channels, cin, k, k]));
            bn(&mut out, format!("stem.{i}"), self.stem_channels);
            cin = self.stem_channels;
        }
        let enc = self.encoder_channels();
        cin = self.stem_channels + IMAGE_CHANNELS;
        for (s, &c) in enc.iter().enumerate() {
            for j in 0..self.convs_per_scale {
                conv(&mut out, format!("enc.{s}.conv{j}"), c, if j == 0 { cin } else { c }, 3);
            }
            cin = c;
        }
        for s in (0..self.levels).rev() {
            let name = format!("dec.{s}.up");
            out.push((format!("{name}.weight"), vec![cin, enc[s], 2, 2]));
            out.push((format!("{name}.bias"), vec![enc[s]]));
            for j in 0..self.convs_per_scale {
                conv(&mut out, format!("dec.{s}.conv{j}"), enc[s], if j == 0 { 2 * enc[s] } else { enc[s] }, 3);
            }
            cin = enc[s];
        }
        conv(&mut out, "head".into(), 1, cin, 1);
        for c in &self.costs {
            out.push((format!("norm.{}.mean", c.name()), vec![1]));
            out.push((format!("norm.{}.std", c.name()), vec![1]));
        }
        out
    }

    /// Recovers the configuration from the tensor shapes of a weight set.
    pub fn infer_from(w: &ModelWeights) -> Result<Self> {
        let dims = |name: &str| -> Result<&[usize]> {
            w.get(name).map(Tensor::dims).ok_or_else(|| Error::WeightFile(format!("missing tensor {name}")))
        };
        let costs: Vec<CostType> =
            CostType::ALL.into_iter().filter(|c| w.get(&format!("norm.{}.mean", c.name())).is_some()).collect();
        if costs.is_empty() {
            return Err(Error::WeightFile("no normalization statistics".into()));
        }
        let sig_in = dims("sig.0.weight")?[1];
        if sig_in % costs.len() != 0 {
            return Err(Error::WeightFile("signature input is not a multiple of the cost count".into()));
        }
        let signature_dims: Vec<usize> = (0..)
            .map_while(|i| w.get(&format!("sig.{i}.weight")).map(|t| t.dims()[0]))
            .collect();
        let stem = dims("stem.0.weight")?;
        let stem_layers = (0..).take_while(|i| w.get(&format!("stem.{i}.weight")).is_some()).count();
        let scales = (0..).take_while(|s| w.get(&format!("enc.{s}.conv0.weight")).is_some()).count();
        let convs_per_scale = (0..).take_while(|j| w.get(&format!("enc.0.conv{j}.weight")).is_some()).count();
        let base_channels = dims("enc.0.conv0.weight")?[0];
        let channel_increment = if scales > 1 { dims("enc.1.conv0.weight")?[0].saturating_sub(base_channels) } else { 16 };
        let cfg = Self {
            disparities: sig_in / costs.len(),
            costs,
            signature_dims,
            stem_layers,
            stem_kernel: stem[2],
            stem_channels: stem[0],
            levels: scales.saturating_sub(1),
            base_channels,
            channel_increment,
            convs_per_scale,
        };
        cfg.validate()?;
        cfg.check_weights(w)?;
        Ok(cfg)
    }

    /// Every layer's shape must follow from the configuration.
    pub fn check_weights(&self, w: &ModelWeights) -> Result<()> {
        for (name, shape) in self.layout() {
            match w.get(&name) {
                Some(t) if t.dims() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::WeightFile(format!("{name} has shape {:?}, expected {shape:?}", t.dims())))
                }
                None => return Err(Error::WeightFile(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    tensors: IndexMap<String, Tensor>,
}

pub const WEIGHT_MAGIC: &[u8; 4] = b"FDSC";
pub const WEIGHT_VERSION: u32 = 1;

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn cost_stats(&self, c: CostType) -> Result<CostStats> {
        let get = |k: &str| {
            self.get(&format!("norm.{}.{k}", c.name()))
                .map(|t| t.data()[0])
                .ok_or_else(|| Error::WeightFile(format!("missing normalization for {}", c.name())))
        };
        Ok(CostStats { mean: get("mean")?, std: get("std")? })
    }

    pub fn set_cost_stats(&mut self, c: CostType, s: CostStats) {
        self.insert(format!("norm.{}.mean", c.name()), Tensor::scalar(s.mean));
        self.insert(format!("norm.{}.std", c.name()), Tensor::scalar(s.std));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != WEIGHT_MAGIC {
            return Err(Error::WeightFile("bad magic".into()));
        }
        let version = r.u32()?;
        if version != WEIGHT_VERSION {
            return Err(Error::WeightFile(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::WeightFile("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::WeightFile(format!("{name}: implausible rank {ndim}")));
            }
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|&n| n <= (bytes.len() - r.pos) / 4).ok_or_else(|| {
                Error::WeightFile(format!("{name}: shape {dims:?} exceeds the remaining file length"))
            })?;
            let data = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::from_vec(&dims, data)?).is_some() {
                return Err(Error::WeightFile(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFile("trailing bytes after the last tensor".into()));
        }
        Ok(Self { tensors })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::WeightFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    write_atomic(path, &w.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelWeights::from_bytes(&bytes)
}

/// Parameters updated by the optimizer; running statistics and cost
/// normalization are not.
pub fn is_trainable(name: &str) -> bool {
    !(name.starts_with("norm.") || name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Deterministic initialization: He fan-in normal kernels, zero biases,
/// unit/zero batch-norm affine parameters and running statistics, identity
/// cost normalization.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::new();
    for (name, shape) in cfg.layout() {
        let n: usize = shape.iter().product();
        let t = if name.ends_with(".weight") {
            // conv: [cout, cin, k, k]; transposed: [cin, cout, 2, 2], where
            // each output sums over cin inputs
            let fan_in = if name.contains(".up.") { shape[0] } else { shape[1] * shape[2] * shape[3] };
            let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            Tensor::from_vec(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") || name.ends_with(".std") {
            Tensor::full(&shape, 1.0)
        } else {
            Tensor::zeros(&shape)
        };
        w.insert(name, t);
    }
    cfg.check_weights(&w)?;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running averages are reported for update.
    Train,
    /// Stored running statistics.
    Infer,
}

/// Execution backend for the network graph: eager tensors for inference or
/// tape variables for training.
pub(crate) trait Exec {
    type V;
    fn conv(&mut self, x: Self::V, layer: &str, pad: Padding) -> Result<Self::V>;
    fn upconv(&mut self, x: Self::V, layer: &str) -> Result<Self::V>;
    fn bn(&mut self, x: Self::V, layer: &str) -> Result<Self::V>;
    fn relu(&mut self, x: Self::V) -> Self::V;
    fn maxpool(&mut self, x: Self::V) -> Result<Self::V>;
    fn concat(&mut self, xs: &[&Self::V]) -> Result<Self::V>;
    fn dup(&mut self, x: &Self::V) -> Self::V;
    fn crop(&mut self, x: Self::V, h: usize, w: usize) -> Result<Self::V>;
    fn dims(&self, x: &Self::V) -> [usize; 4];
}

fn weight<'a>(w: &'a ModelWeights, name: &str) -> Result<&'a Tensor> {
    w.get(name).ok_or_else(|| Error::WeightFile(format!("missing tensor {name}")))
}

pub(crate) struct Eager<'a> {
    pub weights: &'a ModelWeights,
    pub bn_mode: BnMode,
}

impl Exec for Eager<'_> {
    type V = Tensor;

    fn conv(&mut self, x: Tensor, layer: &str, pad: Padding) -> Result<Tensor> {
        let k = weight(self.weights, &format!("{layer}.weight"))?;
        let b = self.weights.get(&format!("{layer}.bias"));
        Ok(ops::conv2d(&x, k, b, pad)?)
    }

    fn upconv(&mut self, x: Tensor, layer: &str) -> Result<Tensor> {
        let k = weight(self.weights, &format!("{layer}.weight"))?;
        let b = weight(self.weights, &format!("{layer}.bias"))?;
        Ok(ops::transposed_conv2x2(&x, k, Some(b))?)
    }

    fn bn(&mut self, x: Tensor, layer: &str) -> Result<Tensor> {
        let p = |s: &str| weight(self.weights, &format!("{layer}.bn.{s}"));
        match self.bn_mode {
            BnMode::Infer => Ok(ops::batchnorm_infer(&x, p("gamma")?, p("beta")?, p("running_mean")?, p("running_var")?)?),
            BnMode::Train => Ok(ops::batchnorm_train(&x, p("gamma")?, p("beta")?)?.y),
        }
    }

    fn relu(&mut self, mut x: Tensor) -> Tensor {
        for v in x.data_mut() {
            *v = v.max(0.0);
        }
        x
    }

    fn maxpool(&mut self, x: Tensor) -> Result<Tensor> {
        Ok(ops::maxpool2x2(&x)?.0)
    }

    fn concat(&mut self, xs: &[&Tensor]) -> Result<Tensor> {
        Ok(ops::concat_channels(xs)?)
    }

    fn dup(&mut self, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn crop(&mut self, x: Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok(ops::crop(&x, h, w)?)
    }

    fn dims(&self, x: &Tensor) -> [usize; 4] {
        x.shape4().expect("feature maps are 4-D")
    }
}

/// Records the network on a tape. Trainable tensors become tape parameters
/// on first use; train-mode batch statistics are collected per layer.
pub struct TapeExec<'a> {
    pub tape: &'a mut Tape,
    weights: &'a ModelWeights,
    bn_mode: BnMode,
    params: IndexMap<String, Var>,
    batch_stats: Vec<(String, BatchStats)>,
}

impl<'a> TapeExec<'a> {
    pub fn new(tape: &'a mut Tape, weights: &'a ModelWeights, bn_mode: BnMode) -> Self {
        Self { tape, weights, bn_mode, params: IndexMap::new(), batch_stats: Vec::new() }
    }

    fn param(&mut self, name: String) -> Result<Var> {
        if let Some(&v) = self.params.get(&name) {
            return Ok(v);
        }
        let v = self.tape.param(weight(self.weights, &name)?.clone());
        self.params.insert(name, v);
        Ok(v)
    }

    /// Parameter variables created so far, by weight name.
    pub fn params(&self) -> &IndexMap<String, Var> {
        &self.params
    }

    pub fn into_parts(self) -> (IndexMap<String, Var>, Vec<(String, BatchStats)>) {
        (self.params, self.batch_stats)
    }
}

impl Exec for TapeExec<'_> {
    type V = Var;

    fn conv(&mut self, x: Var, layer: &str, pad: Padding) -> Result<Var> {
        let k = self.param(format!("{layer}.weight"))?;
        let bias = format!("{layer}.bias");
        let b = if self.weights.get(&bias).is_some() { Some(self.param(bias)?) } else { None };
        Ok(self.tape.conv2d(x, k, b, pad)?)
    }

    fn upconv(&mut self, x: Var, layer: &str) -> Result<Var> {
        let k = self.param(format!("{layer}.weight"))?;
        let b = self.param(format!("{layer}.bias"))?;
        Ok(self.tape.transposed_conv2x2(x, k, Some(b))?)
    }

    fn bn(&mut self, x: Var, layer: &str) -> Result<Var> {
        let gamma = self.param(format!("{layer}.bn.gamma"))?;
        let beta = self.param(format!("{layer}.bn.beta"))?;
        match self.bn_mode {
            BnMode::Train => {
                let (y, stats) = self.tape.batchnorm_train(x, gamma, beta)?;
                self.batch_stats.push((layer.to_string(), stats));
                Ok(y)
            }
            BnMode::Infer => {
                let mean = weight(self.weights, &format!("{layer}.bn.running_mean"))?.clone();
                let var = weight(self.weights, &format!("{layer}.bn.running_var"))?.clone();
                Ok(self.tape.batchnorm_infer(x, gamma, beta, mean, var)?)
            }
        }
    }

    fn relu(&mut self, x: Var) -> Var {
        self.tape.relu(x)
    }

    fn maxpool(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.maxpool2x2(x)?)
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let xs: Vec<Var> = xs.iter().map(|&&v| v).collect();
        Ok(self.tape.concat_channels(&xs)?)
    }

    fn dup(&mut self, x: &Var) -> Var {
        *x
    }

    fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        Ok(self.tape.crop(x, h, w)?)
    }

    fn dims(&self, x: &Var) -> [usize; 4] {
        self.tape.value(*x).shape4().expect("feature maps are 4-D")
    }
}

/// Shape-only backend: walks the graph and records every layer's output.
struct ShapeTrace {
    shapes: HashMap<String, Vec<usize>>,
    trace: Vec<(String, [usize; 4])>,
}

impl ShapeTrace {
    fn kernel(&self, layer: &str) -> Result<&[usize]> {
        let name = format!("{layer}.weight");
        self.shapes.get(&name).map(Vec::as_slice).ok_or_else(|| Error::WeightFile(format!("missing tensor {name}")))
    }

    fn record(&mut self, name: impl Into<String>, s: [usize; 4]) -> [usize; 4] {
        self.trace.push((name.into(), s));
        s
    }
}

impl Exec for ShapeTrace {
    type V = [usize; 4];

    fn conv(&mut self, [n, c, h, w]: [usize; 4], layer: &str, _pad: Padding) -> Result<[usize; 4]> {
        let k = self.kernel(layer)?;
        if k[1] != c {
            return Err(Error::Dimensions(format!("{layer} expects {} channels, got {c}", k[1])));
        }
        let cout = k[0];
        Ok(self.record(layer, [n, cout, h, w]))
    }

    fn upconv(&mut self, [n, c, h, w]: [usize; 4], layer: &str) -> Result<[usize; 4]> {
        let k = self.kernel(layer)?;
        if k[0] != c {
            return Err(Error::Dimensions(format!("{layer} expects {} channels, got {c}", k[0])));
        }
        let cout = k[1];
        Ok(self.record(layer, [n, cout, 2 * h, 2 * w]))
    }

    fn bn(&mut self, x: [usize; 4], _layer: &str) -> Result<[usize; 4]> {
        Ok(x)
    }

    fn relu(&mut self, x: [usize; 4]) -> [usize; 4] {
        x
    }

    fn maxpool(&mut self, [n, c, h, w]: [usize; 4]) -> Result<[usize; 4]> {
        Ok(self.record("maxpool", [n, c, h / 2, w / 2]))
    }

    fn concat(&mut self, xs: &[&[usize; 4]]) -> Result<[usize; 4]> {
        let [n, _, h, w] = *xs[0];
        if xs.iter().any(|s| s[0] != n || s[2..] != [h, w]) {
            return Err(Error::Dimensions("concatenated maps differ in size".into()));
        }
        Ok(self.record("concat", [n, xs.iter().map(|s| s[1]).sum(), h, w]))
    }

    fn dup(&mut self, x: &[usize; 4]) -> [usize; 4] {
        *x
    }

    fn crop(&mut self, [n, c, _, _]: [usize; 4], h: usize, w: usize) -> Result<[usize; 4]> {
        Ok(self.record("crop", [n, c, h, w]))
    }

    fn dims(&self, x: &[usize; 4]) -> [usize; 4] {
        *x
    }
}

/// Output shape of every stage for a `width × height` input pair, without
/// computing any values. Names are layer names plus `input`, `half_res`,
/// `pad`, `maxpool`, `concat`, `crop` and `output`.
pub fn trace_shapes(cfg: &ModelConfig, width: usize, height: usize) -> Result<Vec<(String, [usize; 4])>> {
    cfg.validate()?;
    let mut e = ShapeTrace { shapes: cfg.layout().into_iter().collect(), trace: Vec::new() };
    e.record("input", [1, IMAGE_CHANNELS, height, width]);
    let (hw, hh) = (width.div_ceil(2), height.div_ceil(2));
    let a0 = e.record("half_res", [1, cfg.signature_input_channels(), hh, hw]);
    let sig = signature_graph(&mut e, a0, cfg)?;
    let crop = CropRecord::for_dims(hh, hw, cfg.spatial_multiple());
    let (ph, pw) = crop.padded_dims();
    let sig = e.record("pad", [1, sig[1], ph, pw]);
    let img = [1, IMAGE_CHANNELS, ph, pw];
    let [n, c, _, _] = spatial_graph(&mut e, sig, img, cfg, crop)?;
    e.record("output", [n, c, height, width]);
    Ok(e.trace)
}

pub(crate) fn signature_graph<E: Exec>(e: &mut E, a0: E::V, cfg: &ModelConfig) -> Result<E::V> {
    let mut x = a0;
    for i in 0..cfg.signature_dims.len() {
        let layer = format!("sig.{i}");
        x = e.conv(x, &layer, Padding::Same)?;
        x = e.bn(x, &layer)?;
        x = e.relu(x);
    }
    Ok(x)
}

/// Stem plus encoder-decoder on padded inputs; output cropped to `crop`.
pub(crate) fn spatial_graph<E: Exec>(e: &mut E, sig: E::V, left: E::V, cfg: &ModelConfig, crop: CropRecord) -> Result<E::V> {
    let [_, _, h, w] = e.dims(&sig);
    let m = cfg.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::Dimensions(format!("spatial input {h}x{w} is not padded to a multiple of {m}")));
    }
    if e.dims(&left)[2..] != [h, w] {
        return Err(Error::Dimensions("signature and image dims differ".into()));
    }
    let mut x = e.concat(&[&sig, &left])?;
    for i in 0..cfg.stem_layers {
        let layer = format!("stem.{i}");
        x = e.conv(x, &layer, Padding::Same)?;
        x = e.bn(x, &layer)?;
        x = e.relu(x);
    }
    x = e.concat(&[&x, &left])?;
    drop(left);

    let mut skips = Vec::with_capacity(cfg.levels);
    for s in 0..=cfg.levels {
        if s > 0 {
            x = e.maxpool(x)?;
        }
        for j in 0..cfg.convs_per_scale {
            x = e.conv(x, &format!("enc.{s}.conv{j}"), Padding::Same)?;
            x = e.relu(x);
        }
        if s < cfg.levels {
            skips.push(e.dup(&x));
        }
    }
    for s in (0..cfg.levels).rev() {
        x = e.upconv(x, &format!("dec.{s}.up"))?;
        let skip = skips.pop().expect("one skip per level");
        x = e.concat(&[&x, &skip])?;
        drop(skip);
        for j in 0..cfg.convs_per_scale {
            x = e.conv(x, &format!("dec.{s}.conv{j}"), Padding::Same)?;
            x = e.relu(x);
        }
    }
    x = e.conv(x, "head", Padding::Same)?;
    e.crop(x, crop.height, crop.width)
}

/// Stacks normalized volumes into the `(1, |costs|·D, H, W)` signature input,
/// volume-major then disparity-ascending.
pub fn volumes_to_tensor(volumes: &[CostVolume]) -> Result<Tensor> {
    let first = volumes.first().ok_or_else(|| Error::Dimensions("no cost volumes".into()))?;
    let (w, h, d) = (first.width, first.height, first.disparities);
    if volumes.iter().any(|v| (v.width, v.height, v.disparities) != (w, h, d)) {
        return Err(Error::Dimensions("cost volumes differ in size".into()));
    }
    let hw = w * h;
    let mut data = vec![0.0f32; volumes.len() * d * hw];
    for (vi, v) in volumes.iter().enumerate() {
        let base = vi * d * hw;
        for (p, costs) in v.costs.chunks_exact(d).enumerate() {
            for (di, &c) in costs.iter().enumerate() {
                data[base + di * hw + p] = c;
            }
        }
    }
    Ok(Tensor::from_vec(&[1, volumes.len() * d, h, w], data)?)
}

/// Left image features at half resolution: YUV scaled to `v / 255 - 0.5`.
pub fn image_tensor(yuv: &PlanarImage) -> Tensor {
    let data = yuv.data().iter().map(|v| v / 255.0 - 0.5).collect();
    Tensor::from_vec(&[1, 3, yuv.height(), yuv.width()], data).expect("planar layout matches")
}

/// Runs the per-pixel signature layers on normalized cost volumes.
pub fn signature_forward(volumes: &[CostVolume], w: &ModelWeights, cfg: &ModelConfig, mode: BnMode) -> Result<Tensor> {
    if volumes.len() != cfg.costs.len() || volumes.iter().any(|v| v.disparities != cfg.disparities) {
        return Err(Error::Dimensions(format!(
            "model expects {} volumes of {} disparities",
            cfg.costs.len(),
            cfg.disparities
        )));
    }
    signature_graph(&mut Eager { weights: w, bn_mode: mode }, volumes_to_tensor(volumes)?, cfg)
}

/// Stem and encoder-decoder on inputs already padded to
/// [`ModelConfig::spatial_multiple`]; the result is cropped to `crop`.
pub fn spatial_forward(
    sig: &Tensor,
    left: &Tensor,
    w: &ModelWeights,
    cfg: &ModelConfig,
    mode: BnMode,
    crop: CropRecord,
) -> Result<Tensor> {
    spatial_graph(&mut Eager { weights: w, bn_mode: mode }, sig.clone(), left.clone(), cfg, crop)
}

/// Half-resolution inputs to the learned stages.
pub struct PreparedPair {
    pub left_yuv: PlanarImage,
    pub volumes: Vec<CostVolume>,
}

/// Color conversion, 2× downsampling, cost volumes and normalization.
pub fn prepare_pair(left: &RawImage, right: &RawImage, w: &ModelWeights, cfg: &ModelConfig) -> Result<PreparedPair> {
    if (left.width(), left.height()) != (right.width(), right.height()) {
        return Err(Error::Dimensions(format!(
            "left image is {}x{}, right image is {}x{}",
            left.width(),
            left.height(),
            right.width(),
            right.height()
        )));
    }
    let left_yuv = downsample2x(&rgb_to_yuv(left));
    let right_yuv = downsample2x(&rgb_to_yuv(right));
    let mut volumes = build_volumes(&left_yuv, &right_yuv, cfg.disparities, &cfg.costs)?;
    for (v, &c) in volumes.iter_mut().zip(&cfg.costs) {
        normalize_in_place(v, w.cost_stats(c)?);
    }
    Ok(PreparedPair { left_yuv, volumes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Nearest neighbor, as used while training.
    Nearest,
    /// Bilinear where it differs from nearest by less than one pixel,
    /// nearest elsewhere.
    DiscontinuityAware,
}

/// Upsamples a half-resolution map to `width × height`. Full-resolution pixel
/// `x` sits at half-resolution coordinate `x / 2`.
pub fn upsample_disparity(half: &[f32], hw: usize, hh: usize, width: usize, height: usize, mode: UpsampleMode) -> Vec<f32> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, fy) = (y / 2, if y % 2 == 1 { 0.5 } else { 0.0 });
        let y0 = y0.min(hh - 1);
        let y1 = (y0 + 1).min(hh - 1);
        for x in 0..width {
            let (x0, fx) = ((x / 2).min(hw - 1), if x % 2 == 1 { 0.5 } else { 0.0 });
            let x1 = (x0 + 1).min(hw - 1);
            let nearest = half[y0 * hw + x0];
            let value = match mode {
                UpsampleMode::Nearest => nearest,
                UpsampleMode::DiscontinuityAware => {
                    let top = half[y0 * hw + x0] * (1.0 - fx) + half[y0 * hw + x1] * fx;
                    let bottom = half[y1 * hw + x0] * (1.0 - fx) + half[y1 * hw + x1] * fx;
                    let bilinear = top * (1.0 - fy) + bottom * fy;
                    if (bilinear - nearest).abs() < 1.0 {
                        bilinear
                    } else {
                        nearest
                    }
                }
            };
            out.push(value);
        }
    }
    out
}

/// Wall time spent in each pipeline stage of one prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    /// Color conversion, downsampling, cost volumes and normalization.
    pub cost_volumes: Duration,
    pub signature: Duration,
    /// Padding, stem, encoder-decoder and head.
    pub spatial: Duration,
    pub upsampling: Duration,
}

/// Half-resolution network output for one pair, `(1, 1, h/2, w/2)`.
pub fn predict_half_res(left: &RawImage, right: &RawImage, w: &ModelWeights, cfg: &ModelConfig) -> Result<Tensor> {
    Ok(half_res_timed(left, right, w, cfg)?.0)
}

fn half_res_timed(left: &RawImage, right: &RawImage, w: &ModelWeights, cfg: &ModelConfig) -> Result<(Tensor, StageTimes)> {
    let mut times = StageTimes::default();
    let t = Instant::now();
    let prep = prepare_pair(left, right, w, cfg)?;
    times.cost_volumes = t.elapsed();
    let t = Instant::now();
    let sig = signature_forward(&prep.volumes, w, cfg, BnMode::Infer)?;
    drop(prep.volumes);
    times.signature = t.elapsed();
    let t = Instant::now();
    let img = image_tensor(&prep.left_yuv);
    let (sig, crop) = pad_to_multiple(&sig, cfg.spatial_multiple());
    let (img, _) = pad_to_multiple(&img, cfg.spatial_multiple());
    let half = spatial_forward(&sig, &img, w, cfg, BnMode::Infer, crop)?;
    times.spatial = t.elapsed();
    Ok((half, times))
}

/// Full pipeline. Every output pixel is valid; negative network outputs are
/// clamped to zero disparity.
pub fn predict_disparity(left: &RawImage, right: &RawImage, w: &ModelWeights, cfg: &ModelConfig, mode: UpsampleMode) -> Result<DisparityMap> {
    Ok(predict_disparity_timed(left, right, w, cfg, mode)?.0)
}

/// [`predict_disparity`] with per-stage wall times.
pub fn predict_disparity_timed(
    left: &RawImage,
    right: &RawImage,
    w: &ModelWeights,
    cfg: &ModelConfig,
    mode: UpsampleMode,
) -> Result<(DisparityMap, StageTimes)> {
    let (half, mut times) = half_res_timed(left, right, w, cfg)?;
    let t = Instant::now();
    let [_, _, hh, hw] = half.shape4()?;
    let full = upsample_disparity(half.data(), hw, hh, left.width(), left.height(), mode);
    let values = full.into_iter().map(|v| v.max(0.0)).collect();
    let map = DisparityMap::dense(left.width(), left.height(), values)?;
    times.upsampling = t.elapsed();
    Ok((map, times))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradReport {
    /// Relative error per trainable tensor, in weight order.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
    /// Probes skipped for crossing a relu or max-pool branch.
    pub skipped: usize,
}

impl NetworkGradReport {
    pub fn worst(&self) -> (&str, f64) {
        self.per_tensor.iter().fold(("", 0.0), |a, (n, e)| if *e > a.1 { (n.as_str(), *e) } else { a })
    }
}

/// Gradient check of the assembled signature and spatial network on random
/// half-resolution inputs, probing every trainable tensor.
pub fn network_grad_check(
    cfg: &ModelConfig,
    height: usize,
    width: usize,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<NetworkGradReport> {
    let mut w = build_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    // non-trivial affine batch-norm parameters
    for (name, t) in w.tensors_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            let r = random_tensor(&mut rng, t.dims());
            for (a, b) in t.data_mut().iter_mut().zip(r.data()) {
                *a += 0.2 * b;
            }
        }
    }
    let a0 = random_tensor(&mut rng, &[1, cfg.signature_input_channels(), height, width]);
    let img = random_tensor(&mut rng, &[1, IMAGE_CHANNELS, height, width]);
    let names: Vec<String> = w.names().filter(|n| is_trainable(n)).map(String::from).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| w.get(n).unwrap().clone()).collect();
    let crop = CropRecord::for_dims(height, width, cfg.spatial_multiple());
    if !crop.is_noop() {
        return Err(Error::Dimensions("grad check dims must already be aligned".into()));
    }
    let report = grad_check_with(&inputs, seed, opts, |tape, vars| {
        let mut local = w.clone();
        for (n, &v) in names.iter().zip(vars) {
            local.insert(n.clone(), tape.value(v).clone());
        }
        let mut e = TapeExec::new(tape, &local, BnMode::Train);
        e.params = names.iter().cloned().zip(vars.iter().copied()).collect();
        let a0v = e.tape.constant(a0.clone());
        let imgv = e.tape.constant(img.clone());
        let run = signature_graph(&mut e, a0v, cfg).and_then(|sig| spatial_graph(&mut e, sig, imgv, cfg, crop));
        run.map_err(|err| match err {
            Error::Autodiff(a) => a,
            other => crate::autodiff::AutodiffError::ShapeMismatch(other.to_string()),
        })
    })?;
    Ok(NetworkGradReport {
        per_tensor: names.into_iter().zip(report.per_input).collect(),
        checked: report.checked,
        skipped: report.skipped,
    })
}

/// Writes running statistics after a train-mode pass:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running_stats(w: &mut ModelWeights, stats: &[(String, BatchStats)]) -> Result<()> {
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for (layer, s) in stats {
        if seen.insert(layer.as_str(), ()).is_some() {
            return Err(Error::Config(format!("batch-norm layer {layer} ran twice in one pass")));
        }
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{layer}.bn.{suffix}");
            let t = w.get_mut(&name).ok_or_else(|| Error::WeightFile(format!("missing tensor {name}")))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_channel_plan() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.signature_input_channels(), 384);
        assert_eq!(cfg.encoder_channels(), vec![32, 48, 64, 80, 96, 112]);
        assert_eq!(ModelConfig::census_only().signature_input_channels(), 128);
        assert_eq!(ModelConfig::three_level().encoder_channels(), vec![32, 48, 64, 80]);
        let w = build_model(&cfg, 0).unwrap();
        assert_eq!(w.get("sig.0.weight").unwrap().dims(), &[192, 384, 1, 1]);
        assert_eq!(w.get("stem.0.weight").unwrap().dims(), &[32, 35, 3, 3]);
        assert_eq!(w.get("enc.0.conv0.weight").unwrap().dims(), &[32, 35, 3, 3]);
        assert_eq!(w.get("dec.0.conv0.weight").unwrap().dims(), &[32, 64, 3, 3]);
        assert_eq!(w.get("dec.4.up.weight").unwrap().dims(), &[112, 96, 2, 2]);
        assert_eq!(w.get("head.weight").unwrap().dims(), &[1, 32, 1, 1]);
        assert_eq!(ModelConfig::infer_from(&w).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::default();
        c.signature_dims = vec![96, 192, 32];
        assert!(build_model(&c, 0).is_err());
        let c = ModelConfig { levels: 4, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { costs: vec![CostType::ChromaU, CostType::Census], ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig { disparities: 8, ..ModelConfig::three_level() };
        assert_eq!(build_model(&cfg, 4).unwrap(), build_model(&cfg, 4).unwrap());
        assert_ne!(build_model(&cfg, 4).unwrap(), build_model(&cfg, 5).unwrap());
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let cfg = ModelConfig { disparities: 4, signature_dims: vec![8, 4], base_channels: 4, ..ModelConfig::three_level() };
        let w = build_model(&cfg, 1).unwrap();
        let bytes = w.to_bytes();
        let back = ModelWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.names().eq(w.names()));

        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelWeights::from_bytes(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(Error::WeightFile(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(Error::WeightFile(m)) if m.contains("version")));
    }

    #[test]
    fn upsample_constant_and_step() {
        let half = vec![7.0; 6];
        let full = upsample_disparity(&half, 3, 2, 6, 4, UpsampleMode::DiscontinuityAware);
        assert!(full.iter().all(|&v| v == 7.0));

        // columns 0,1 = 0 and 2,3 = 10 at half resolution
        let half = vec![0.0, 0.0, 10.0, 10.0];
        let full = upsample_disparity(&half, 4, 1, 8, 2, UpsampleMode::DiscontinuityAware);
        // x = 3 sits at 1.5: bilinear 5, nearest 0 -> nearest kept
        assert_eq!(full[3], 0.0);
        assert_eq!(full[4], 10.0);
        let smooth = vec![0.0, 0.5, 1.0, 1.5];
        let full = upsample_disparity(&smooth, 4, 1, 8, 1, UpsampleMode::DiscontinuityAware);
        assert_eq!(full[1], 0.25);
        let nearest = upsample_disparity(&smooth, 4, 1, 8, 1, UpsampleMode::Nearest);
        assert_eq!(nearest[1], 0.0);
    }

    #[test]
    fn signature_of_zero_volumes_is_zero() {
        let cfg = ModelConfig { disparities: 4, signature_dims: vec![8, 4], ..ModelConfig::default() };
        let w = build_model(&cfg, 2).unwrap();
        let vols: Vec<CostVolume> =
            (0..3).map(|_| CostVolume { width: 5, height: 3, disparities: 4, costs: vec![0.0; 60] }).collect();
        let s = signature_forward(&vols, &w, &cfg, BnMode::Infer).unwrap();
        assert_eq!(s.dims(), &[1, 4, 3, 5]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_rejects_unpadded_input() {
        let cfg = ModelConfig { disparities: 4, signature_dims: vec![8, 4], base_channels: 4, ..ModelConfig::three_level() };
        let w = build_model(&cfg, 2).unwrap();
        let sig = Tensor::zeros(&[1, 4, 12, 16]);
        let img = Tensor::zeros(&[1, 3, 12, 16]);
        let crop = CropRecord::for_dims(12, 16, 1);
        assert!(matches!(spatial_forward(&sig, &img, &w, &cfg, BnMode::Infer, crop), Err(Error::Dimensions(_))));
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let cfg = ModelConfig { disparities: 4, signature_dims: vec![8, 4], base_channels: 4, ..ModelConfig::three_level() };
        let mut w = build_model(&cfg, 2).unwrap();
        for (name, t) in w.tensors_mut() {
            if is_trainable(name) {
                t.data_mut().fill(0.0);
            }
        }
        let sig = Tensor::full(&[1, 4, 16, 24], 0.3);
        let img = Tensor::full(&[1, 3, 16, 24], -0.2);
        let crop = CropRecord { height: 13, width: 21, pad_bottom: 3, pad_right: 3 };
        let out = spatial_forward(&sig, &img, &w, &cfg, BnMode::Infer, crop).unwrap();
        assert_eq!(out.dims(), &[1, 1, 13, 21]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_update() {
        let cfg = ModelConfig { disparities: 2, signature_dims: vec![2], base_channels: 4, ..ModelConfig::three_level() };
        let mut w = build_model(&cfg, 0).unwrap();
        let stats = vec![("sig.0".to_string(), BatchStats { mean: vec![1.0, 2.0], var: vec![3.0, 5.0] })];
        update_running_stats(&mut w, &stats).unwrap();
        assert_eq!(w.get("sig.0.bn.running_mean").unwrap().data(), &[0.1, 0.2]);
        assert_eq!(w.get("sig.0.bn.running_var").unwrap().data(), &[0.9 + 0.3, 0.9 + 0.5]);
    }
}
