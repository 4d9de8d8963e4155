//! Robust loss, data augmentation and the optimization loop.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamState, BatchStats, Tape, Tensor};
use crate::costvol::{build_volumes, CostStatsAccumulator, CostType};
use crate::imageio::{decode_disp16, decode_ppm, write_atomic, DisparityMap, RawImage};
use crate::network::{
    image_tensor, is_trainable, load_weights, prepare_pair, signature_graph, spatial_graph, update_running_stats,
    volumes_to_tensor, BnMode, Exec, ModelConfig, ModelWeights, TapeExec,
};
use crate::preprocess::{downsample2x, pad_to_multiple, rgb_to_yuv};
use crate::synthstereo::{sample_file_name, DATASET_DIRS};
use crate::{Error, Result};

/// A training pair with full-resolution ground truth. `right_gt` is the
/// disparity map with respect to the right image, when available.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub left: RawImage,
    pub right: RawImage,
    pub gt: DisparityMap,
    pub right_gt: Option<DisparityMap>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.left.width()
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = (self.left.width(), self.left.height());
        let mut all = vec![(self.right.width(), self.right.height()), (self.gt.width(), self.gt.height())];
        if let Some(r) = &self.right_gt {
            all.push((r.width(), r.height()));
        }
        if all.iter().any(|&d| d != dims) {
            return Err(Error::Dimensions("sample images and ground truth differ in size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// d(loss)/d(pred), same layout as the prediction.
    pub grad: Vec<f32>,
    pub valid: usize,
}

/// Per-pixel robust penalty `max(τ, |e|)^(1/8)`.
pub fn robust_penalty(error: f32, tau: f32) -> f64 {
    (error.abs().max(tau) as f64).powf(0.125)
}

/// Sum of penalties and unnormalized gradient over one map.
fn loss_terms(pred: &[f32], gt: &DisparityMap, tau: f32, grad: &mut [f32]) -> f64 {
    let mut sum = 0.0f64;
    for (((&p, &g), &ok), out) in pred.iter().zip(gt.values()).zip(gt.valid()).zip(grad.iter_mut()) {
        if !ok {
            *out = 0.0;
            continue;
        }
        let e = p - g;
        sum += robust_penalty(e, tau);
        *out = if e.abs() > tau { (0.125 * (e.abs() as f64).powf(-0.875)) as f32 * e.signum() } else { 0.0 };
    }
    sum
}

fn check_tau(tau: f32) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must be positive, got {tau}")))
    }
}

/// Mean robust penalty over valid ground-truth pixels and its gradient with
/// respect to `pred`. The gradient is zero on the clipped branch `|e| <= τ`.
pub fn robust_loss(pred: &[f32], gt: &DisparityMap, tau: f32) -> Result<LossOutput> {
    robust_loss_batch(pred, &[gt], tau)
}

/// Robust loss pooled over a batch: `pred` holds the maps back to back and
/// the mean runs over all valid pixels of all maps.
pub fn robust_loss_batch(pred: &[f32], gts: &[&DisparityMap], tau: f32) -> Result<LossOutput> {
    check_tau(tau)?;
    let total: usize = gts.iter().map(|g| g.values().len()).sum();
    if pred.len() != total {
        return Err(Error::Dimensions(format!("prediction has {} values, ground truth {total}", pred.len())));
    }
    let valid: usize = gts.iter().map(|g| g.valid_count()).sum();
    if valid == 0 {
        return Err(Error::Data("no valid ground-truth pixels".into()));
    }
    let mut grad = vec![0.0f32; total];
    let mut sum = 0.0;
    let mut offset = 0;
    for g in gts {
        let n = g.values().len();
        sum += loss_terms(&pred[offset..offset + n], g, tau, &mut grad[offset..offset + n]);
        offset += n;
    }
    let inv = 1.0 / valid as f32;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok(LossOutput { value: sum / valid as f64, grad, valid })
}

/// Swaps the views and mirrors everything horizontally, so the original
/// right view becomes a left view with its own ground truth.
pub fn augment_swap_flip(s: &Sample) -> Result<Sample> {
    let right_gt = s
        .right_gt
        .as_ref()
        .ok_or_else(|| Error::Data("swap-flip needs ground truth for the right image".into()))?;
    Ok(Sample {
        left: s.right.flip_horizontal(),
        right: s.left.flip_horizontal(),
        gt: right_gt.flip_horizontal(),
        right_gt: Some(s.gt.flip_horizontal()),
    })
}

pub const MIN_SCALED_DIM: usize = 64;

/// Output dims for a zoom-out by `factor`.
pub fn scaled_dims(width: usize, height: usize, factor: f64) -> (usize, usize) {
    let f = |d: usize| ((d as f64 / factor) + 1e-9).floor() as usize;
    (f(width), f(height))
}

/// Source coordinate of output pixel `i` when `src` pixels map onto `dst`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn resize_bilinear(img: &RawImage, w: usize, h: usize) -> Result<RawImage> {
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let sy = source_coord(y, img.height(), h);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y0 + 1).min(img.height() - 1);
        for x in 0..w {
            let sx = source_coord(x, img.width(), w);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x0 + 1).min(img.width() - 1);
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                data.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(RawImage::new(w, h, data)?)
}

fn resize_disparity(gt: &DisparityMap, w: usize, h: usize, factor: f64) -> Result<DisparityMap> {
    let nearest = |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = nearest(y, gt.height(), h);
        for x in 0..w {
            let sx = nearest(x, gt.width(), w);
            let i = sy * gt.width() + sx;
            values.push((gt.values()[i] as f64 / factor) as f32);
            valid.push(gt.valid()[i]);
        }
    }
    Ok(DisparityMap::new(w, h, values, valid)?)
}

/// Downscales a sample by `factor >= 1`: images bilinearly, ground truth by
/// nearest neighbor with disparities divided by the factor.
pub fn augment_scale(s: &Sample, factor: f64) -> Result<Sample> {
    if !(factor.is_finite() && factor >= 1.0) {
        return Err(Error::Config(format!("scale factor must be at least 1, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(s.clone());
    }
    let (w, h) = scaled_dims(s.width(), s.height(), factor);
    if w < MIN_SCALED_DIM || h < MIN_SCALED_DIM {
        return Err(Error::Dimensions(format!(
            "scaling {}x{} by 1/{factor} gives {w}x{h}, below {MIN_SCALED_DIM}x{MIN_SCALED_DIM}",
            s.width(),
            s.height()
        )));
    }
    Ok(Sample {
        left: resize_bilinear(&s.left, w, h)?,
        right: resize_bilinear(&s.right, w, h)?,
        gt: resize_disparity(&s.gt, w, h, factor)?,
        right_gt: s.right_gt.as_ref().map(|g| resize_disparity(g, w, h, factor)).transpose()?,
    })
}

/// Random-access training data.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn get(&self, index: usize) -> Result<Sample> {
        <[Sample]>::get(self, index).cloned().ok_or_else(|| Error::Data(format!("sample {index} out of range")))
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        SampleSource::get(self.as_slice(), index)
    }
}

/// A dataset directory with `left/`, `right/`, `disp_left/` and optional
/// `disp_right/` subdirectories, matched by file stem. Samples are read on
/// demand.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
    stems: Vec<String>,
    has_right_gt: bool,
}

impl DirectorySource {
    pub fn open(root: &Path) -> Result<Self> {
        let left = root.join(DATASET_DIRS[0]);
        let mut stems = Vec::new();
        for entry in fs::read_dir(&left).map_err(|e| Error::io(&left, e))? {
            let path = entry.map_err(|e| Error::io(&left, e))?.path();
            if path.extension().is_some_and(|e| e == "ppm") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        let has_right_gt = root.join(DATASET_DIRS[3]).is_dir();
        for stem in &stems {
            for (dir, ext) in [(DATASET_DIRS[1], "ppm"), (DATASET_DIRS[2], "pgm")] {
                let p = root.join(dir).join(format!("{stem}.{ext}"));
                if !p.is_file() {
                    return Err(Error::Data(format!("missing counterpart {}", p.display())));
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), stems, has_right_gt })
    }

    pub fn stems(&self) -> &[String] {
        &self.stems
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_ppm(path: &Path) -> Result<RawImage> {
    decode_ppm(&read_file(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_disp(path: &Path) -> Result<DisparityMap> {
    decode_disp16(&read_file(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl SampleSource for DirectorySource {
    fn len(&self) -> usize {
        self.stems.len()
    }

    fn get(&self, index: usize) -> Result<Sample> {
        let stem = self.stems.get(index).ok_or_else(|| Error::Data(format!("sample {index} out of range")))?;
        let file = |dir: &str, ext: &str| self.root.join(dir).join(format!("{stem}.{ext}"));
        let right_gt_path = file(DATASET_DIRS[3], "pgm");
        let s = Sample {
            left: read_ppm(&file(DATASET_DIRS[0], "ppm"))?,
            right: read_ppm(&file(DATASET_DIRS[1], "ppm"))?,
            gt: read_disp(&file(DATASET_DIRS[2], "pgm"))?,
            right_gt: if self.has_right_gt && right_gt_path.is_file() { Some(read_disp(&right_gt_path)?) } else { None },
        };
        s.validate()?;
        Ok(s)
    }
}

/// Optimization settings plus the model to build when no initial weights
/// are given.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Stages of `(iterations, lr)`, run in order.
    pub lr_schedule: Vec<(usize, f32)>,
    /// Original pairs per batch; swap-flip doubles the effective batch.
    pub batch_size: usize,
    pub tau: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub swap_flip: bool,
    pub scale_aug: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
    /// Pairs used to fit the cost normalization and the initial head bias
    /// of a run from random initialization.
    pub norm_samples: usize,
    /// Draw with repetition; otherwise each pair is used at most once.
    pub repeat: bool,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub init_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_schedule: vec![(350_000, 1e-4)],
            batch_size: 4,
            tau: 1.0,
            weight_decay: 1e-5,
            seed: 0,
            swap_flip: true,
            scale_aug: true,
            scale_min: 1.0,
            scale_max: 1.5,
            checkpoint_interval: 10_000,
            norm_samples: 64,
            repeat: true,
            model: ModelConfig::default(),
            init_seed: 0,
            init_weights: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value for {key}: {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "lr_schedule" => {
                    c.lr_schedule = v
                        .split(',')
                        .map(|stage| {
                            let (n, lr) = stage
                                .trim()
                                .split_once(':')
                                .ok_or_else(|| Error::Config(format!("lr_schedule stage {stage:?} is not iterations:lr")))?;
                            Ok((parse_value(key, n.trim())?, parse_value(key, lr.trim())?))
                        })
                        .collect::<Result<_>>()?
                }
                "iterations" => {
                    let lr = c.lr_schedule.first().map_or(1e-4, |s| s.1);
                    c.lr_schedule = vec![(parse_value(key, v)?, lr)];
                }
                "lr" => {
                    let lr = parse_value(key, v)?;
                    c.lr_schedule.iter_mut().for_each(|s| s.1 = lr);
                }
                "batch_size" => c.batch_size = parse_value(key, v)?,
                "tau" => c.tau = parse_value(key, v)?,
                "weight_decay" => c.weight_decay = parse_value(key, v)?,
                "seed" => c.seed = parse_value(key, v)?,
                "swap_flip" => c.swap_flip = parse_value(key, v)?,
                "scale_aug" => c.scale_aug = parse_value(key, v)?,
                "scale_min" => c.scale_min = parse_value(key, v)?,
                "scale_max" => c.scale_max = parse_value(key, v)?,
                "checkpoint_interval" => c.checkpoint_interval = parse_value(key, v)?,
                "norm_samples" => c.norm_samples = parse_value(key, v)?,
                "repeat" => c.repeat = parse_value(key, v)?,
                "init_seed" => c.init_seed = parse_value(key, v)?,
                "init_weights" => c.init_weights = Some(PathBuf::from(v)),
                "disparities" => c.model.disparities = parse_value(key, v)?,
                "costs" => {
                    c.model.costs = v
                        .split(',')
                        .map(|s| CostType::from_name(s.trim()).ok_or_else(|| Error::Config(format!("unknown cost type {s:?}"))))
                        .collect::<Result<_>>()?
                }
                "signature_dims" => c.model.signature_dims = parse_list(key, v)?,
                "stem_layers" => c.model.stem_layers = parse_value(key, v)?,
                "stem_kernel" => c.model.stem_kernel = parse_value(key, v)?,
                "stem_channels" => c.model.stem_channels = parse_value(key, v)?,
                "levels" => c.model.levels = parse_value(key, v)?,
                "base_channels" => c.model.base_channels = parse_value(key, v)?,
                "channel_increment" => c.model.channel_increment = parse_value(key, v)?,
                "convs_per_scale" => c.model.convs_per_scale = parse_value(key, v)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.lr_schedule.is_empty() {
            return bad("lr_schedule needs at least one stage".into());
        }
        if let Some(&(_, lr)) = self.lr_schedule.iter().find(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
            return bad(format!("learning rate must be non-negative, got {lr}"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(self.scale_min >= 1.0 && self.scale_max >= self.scale_min && self.scale_max.is_finite()) {
            return bad(format!("scale range [{}, {}] must satisfy 1 <= min <= max", self.scale_min, self.scale_max));
        }
        self.model.validate()
    }

    pub fn total_iterations(&self) -> usize {
        self.lr_schedule.iter().map(|s| s.0).sum()
    }

    /// Learning rate of the stage containing 0-based iteration `i`.
    pub fn lr_at(&self, i: usize) -> f32 {
        let mut end = 0;
        for &(n, lr) in &self.lr_schedule {
            end += n;
            if i < end {
                return lr;
            }
        }
        self.lr_schedule.last().map_or(0.0, |s| s.1)
    }
}

/// Weights with optimizer state; `adam.step` counts completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: ModelWeights,
    pub adam: AdamState,
}

const ADAM_STEP: &str = "adam.step";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    pub fn fresh(weights: ModelWeights, cfg: &TrainConfig) -> Self {
        Self { weights, adam: AdamState::new(cfg.lr_at(0), cfg.weight_decay) }
    }

    /// Model tensors followed by the optimizer state as named tensors.
    pub fn to_weights(&self) -> ModelWeights {
        let mut w = self.weights.clone();
        let step = self.adam.step;
        let (hi, lo) = ((step >> 24) as f32, (step & 0xff_ffff) as f32);
        w.insert(ADAM_STEP, Tensor::from_vec(&[2], vec![hi, lo]).expect("two values"));
        for (prefix, moments) in [(ADAM_M, &self.adam.first_moment), (ADAM_V, &self.adam.second_moment)] {
            for (name, m) in moments {
                let dims = self.weights.get(name).map_or_else(|| vec![m.len()], |t| t.dims().to_vec());
                w.insert(format!("{prefix}{name}"), Tensor::from_vec(&dims, m.clone()).expect("moment matches"));
            }
        }
        w
    }

    /// Splits a checkpoint file's tensors; plain weight files load with a
    /// zero step and empty moments.
    pub fn from_weights(mut all: ModelWeights, cfg: &TrainConfig) -> Result<Self> {
        let mut adam = AdamState::new(cfg.lr_at(0), cfg.weight_decay);
        if let Some(t) = all.remove(ADAM_STEP) {
            let d = t.data();
            if d.len() != 2 {
                return Err(Error::WeightFile("malformed adam.step".into()));
            }
            adam.step = ((d[0] as u64) << 24) | d[1] as u64;
        }
        let names: Vec<String> = all.names().map(String::from).collect();
        for name in names {
            for (prefix, slot) in [(ADAM_M, 0), (ADAM_V, 1)] {
                if let Some(param) = name.strip_prefix(prefix) {
                    let t = all.remove(&name).expect("listed");
                    let map = if slot == 0 { &mut adam.first_moment } else { &mut adam.second_moment };
                    map.insert(param.to_string(), t.into_data());
                }
            }
        }
        Ok(Self { weights: all, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::network::save_weights(&self.to_weights(), path)
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        Self::from_weights(load_weights(path)?, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    /// 1-based count of completed iterations.
    pub iter: usize,
    pub loss: f64,
    pub lr: f32,
}

pub const LOSS_LOG_HEADER: &str = "iter,loss,lr";

pub fn format_loss_log(entries: &[LogEntry]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for e in entries {
        s.push_str(&format!("{},{},{}\n", e.iter, e.loss, e.lr));
    }
    s
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LogEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(Error::Data("loss log lacks the iter,loss,lr header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Data(format!("malformed loss log row {l:?}")));
            }
            Ok(LogEntry { iter: parse_value("iter", f[0])?, loss: parse_value("loss", f[1])?, lr: parse_value("lr", f[2])? })
        })
        .collect()
}

/// Where the loop writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// `checkpoint_NNNNNN.fdsc` files land here at each interval.
    pub checkpoint_dir: Option<PathBuf>,
    /// CSV loss log; rows of earlier iterations already in the file are
    /// kept when resuming.
    pub log_path: Option<PathBuf>,
}

pub fn checkpoint_file_name(iter: usize) -> String {
    format!("checkpoint_{iter:06}.fdsc")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: Checkpoint,
    /// Entries for the iterations run in this call.
    pub log: Vec<LogEntry>,
}

/// Fits each cost type's mean and standard deviation on the first `count`
/// pairs and stores them in `w`.
pub fn fit_cost_stats(data: &dyn SampleSource, cfg: &ModelConfig, count: usize, w: &mut ModelWeights) -> Result<()> {
    let n = count.min(data.len());
    if n == 0 {
        return Ok(());
    }
    let mut acc = vec![CostStatsAccumulator::default(); cfg.costs.len()];
    for i in 0..n {
        let s = data.get(i)?;
        let l = downsample2x(&rgb_to_yuv(&s.left));
        let r = downsample2x(&rgb_to_yuv(&s.right));
        for (a, v) in acc.iter_mut().zip(build_volumes(&l, &r, cfg.disparities, &cfg.costs)?) {
            a.push(&v);
        }
    }
    for (a, &c) in acc.iter().zip(&cfg.costs) {
        w.set_cost_stats(c, a.finish()?);
    }
    Ok(())
}

/// Sets the head bias to the mean valid ground-truth disparity of the first
/// `count` pairs.
pub fn fit_output_bias(data: &dyn SampleSource, count: usize, w: &mut ModelWeights) -> Result<()> {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..count.min(data.len()) {
        let s = data.get(i)?;
        for (&v, &ok) in s.gt.values().iter().zip(s.gt.valid()) {
            if ok {
                sum += v as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Ok(());
    }
    let bias = w.get_mut("head.bias").ok_or_else(|| Error::WeightFile("missing tensor head.bias".into()))?;
    bias.data_mut()[0] = (sum / n as f64) as f32;
    Ok(())
}

fn stack_batch(items: Vec<Tensor>) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let dims = first.dims().to_vec();
    if items.iter().any(|t| t.dims() != dims.as_slice()) {
        return Err(Error::Dimensions("batch samples differ in size".into()));
    }
    let n = items.len();
    let data: Vec<f32> = items.into_iter().flat_map(Tensor::into_data).collect();
    Ok(Tensor::from_vec(&[n, dims[1], dims[2], dims[3]], data)?)
}

/// Result of one train-mode forward and backward pass.
pub struct StepResult {
    pub loss: f64,
    /// Gradients of the trainable tensors, in weight order.
    pub grads: IndexMap<String, Tensor>,
    pub batch_stats: Vec<(String, BatchStats)>,
}

/// Train-mode forward with nearest-neighbor upsampling, robust loss over
/// the batch, and backward.
pub fn forward_backward(batch: &[Sample], w: &ModelWeights, cfg: &ModelConfig, tau: f32) -> Result<StepResult> {
    let (width, height) = batch.first().map(|s| (s.width(), s.height())).ok_or_else(|| Error::Data("empty batch".into()))?;
    if batch.iter().any(|s| (s.width(), s.height()) != (width, height)) {
        return Err(Error::Dimensions("batch samples differ in size".into()));
    }
    let prepared: Vec<(Tensor, Tensor)> = batch
        .par_iter()
        .map(|s| {
            s.validate()?;
            let p = prepare_pair(&s.left, &s.right, w, cfg)?;
            Ok((volumes_to_tensor(&p.volumes)?, image_tensor(&p.left_yuv)))
        })
        .collect::<Result<_>>()?;
    let (a0s, imgs): (Vec<Tensor>, Vec<Tensor>) = prepared.into_iter().unzip();
    let a0 = stack_batch(a0s)?;
    let (img, crop) = pad_to_multiple(&stack_batch(imgs)?, cfg.spatial_multiple());

    let mut tape = Tape::new();
    let mut exec = TapeExec::new(&mut tape, w, BnMode::Train);
    let a0 = exec.tape.constant(a0);
    let img = exec.tape.constant(img);
    let sig = signature_graph(&mut exec, a0, cfg)?;
    let sig = exec.tape.pad_replicate(sig, crop.pad_bottom, crop.pad_right)?;
    let half = spatial_graph(&mut exec, sig, img, cfg, crop)?;
    let full = exec.tape.nearest_upsample2x(half)?;
    let full = exec.crop(full, height, width)?;
    let (params, batch_stats) = exec.into_parts();

    let gts: Vec<&DisparityMap> = batch.iter().map(|s| &s.gt).collect();
    let loss = robust_loss_batch(tape.value(full).data(), &gts, tau)?;
    let loss_var = tape.custom_loss(full, loss.value as f32, loss.grad)?;
    let mut grads = tape.backward(loss_var)?;
    let grads = params
        .iter()
        .map(|(name, &v)| {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(w.get(name).expect("param exists").dims()));
            (name.clone(), g)
        })
        .collect();
    Ok(StepResult { loss: loss.value, grads, batch_stats })
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Pair indices for 0-based iteration `i`.
fn draw_indices(cfg: &TrainConfig, n: usize, i: usize, rng: &mut ChaCha8Rng, order: &[usize]) -> Result<Vec<usize>> {
    if cfg.repeat {
        if n >= cfg.batch_size {
            Ok(index::sample(rng, n, cfg.batch_size).into_vec())
        } else {
            Ok((0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect())
        }
    } else {
        let start = i * cfg.batch_size;
        order
            .get(start..start + cfg.batch_size)
            .map(<[usize]>::to_vec)
            .ok_or_else(|| Error::Data(format!("data exhausted at iteration {} with repetition disabled", i + 1)))
    }
}

/// Draws and augments the batch of 0-based iteration `i`. The per-iteration
/// random stream depends only on the seed and `i`.
pub fn assemble_batch(data: &dyn SampleSource, cfg: &TrainConfig, i: usize) -> Result<Vec<Sample>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Data("training data source is empty".into()));
    }
    let order: Vec<usize> = if cfg.repeat {
        Vec::new()
    } else {
        let mut rng = iteration_rng(cfg.seed, usize::MAX);
        index::sample(&mut rng, n, n).into_vec()
    };
    let mut rng = iteration_rng(cfg.seed, i);
    let indices = draw_indices(cfg, n, i, &mut rng, &order)?;
    let factor = if cfg.scale_aug && cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..cfg.scale_max)
    } else if cfg.scale_aug {
        cfg.scale_min
    } else {
        1.0
    };
    let per_pair: Vec<Vec<Sample>> = indices
        .par_iter()
        .map(|&k| {
            let s = data.get(k)?;
            let mut out = vec![augment_scale(&s, factor)?];
            if cfg.swap_flip {
                let twin = augment_swap_flip(&out[0])?;
                out.push(twin);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_pair.into_iter().flatten().collect())
}

/// Runs iterations `state.adam.step .. cfg.total_iterations()`.
///
/// A fresh state (step 0) without `cfg.init_weights` first fits the cost
/// normalization on up to `cfg.norm_samples` pairs. Given the same seed, resuming from a checkpoint
/// reproduces the uninterrupted run exactly.
pub fn train_loop(data: &dyn SampleSource, cfg: &TrainConfig, mut state: Checkpoint, out: &TrainOutputs) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training data source is empty".into()));
    }
    cfg.model.check_weights(&state.weights)?;
    let start = usize::try_from(state.adam.step).map_err(|_| Error::Config("checkpoint step out of range".into()))?;
    if start == 0 && cfg.init_weights.is_none() && cfg.norm_samples > 0 {
        fit_cost_stats(data, &cfg.model, cfg.norm_samples, &mut state.weights)?;
    }
    state.adam.weight_decay = cfg.weight_decay;

    let mut prior = Vec::new();
    if let Some(p) = out.log_path.as_ref().filter(|p| start > 0 && p.is_file()) {
        prior = parse_loss_log(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
        prior.retain(|e| e.iter <= start);
    }
    let write_log = |entries: &[LogEntry]| -> Result<()> {
        if let Some(p) = &out.log_path {
            let all: Vec<LogEntry> = prior.iter().chain(entries).copied().collect();
            write_atomic(p, format_loss_log(&all).as_bytes()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };

    let mut log = Vec::new();
    for i in start..cfg.total_iterations() {
        let batch = assemble_batch(data, cfg, i)?;
        let step = forward_backward(&batch, &state.weights, &cfg.model, cfg.tau)?;
        if !step.loss.is_finite() {
            write_log(&log)?;
            return Err(Error::Data(format!("loss became non-finite ({}) at iteration {}", step.loss, i + 1)));
        }
        let lr = cfg.lr_at(i);
        state.adam.lr = lr;
        adam_step(state.weights.tensors_mut(), &step.grads, &mut state.adam)?;
        update_running_stats(&mut state.weights, &step.batch_stats)?;
        log.push(LogEntry { iter: i + 1, loss: step.loss, lr });
        if cfg.checkpoint_interval > 0 && (i + 1) % cfg.checkpoint_interval == 0 {
            if let Some(dir) = &out.checkpoint_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                state.save(&dir.join(checkpoint_file_name(i + 1)))?;
            }
            write_log(&log)?;
        }
    }
    write_log(&log)?;
    Ok(TrainOutcome { state, log })
}

/// Initial weights for a run: loaded from `cfg.init_weights` when set,
/// otherwise freshly built from `cfg.model` and `cfg.init_seed` with the
/// head bias fitted to `data`.
pub fn initial_weights(cfg: &TrainConfig, data: &dyn SampleSource) -> Result<ModelWeights> {
    match &cfg.init_weights {
        Some(p) => {
            let w = Checkpoint::load(p, cfg)?.weights;
            cfg.model.check_weights(&w)?;
            Ok(w)
        }
        None => {
            let mut w = crate::network::build_model(&cfg.model, cfg.init_seed)?;
            fit_output_bias(data, cfg.norm_samples, &mut w)?;
            Ok(w)
        }
    }
}

/// Trainable tensors only, for comparisons that ignore running statistics.
pub fn trainable_view(w: &ModelWeights) -> Vec<(&str, &Tensor)> {
    w.iter().filter(|(n, _)| is_trainable(n)).map(|(n, t)| (n.as_str(), t)).collect()
}

/// Writes samples in the dataset directory layout.
pub fn write_samples(samples: &[Sample], out: &Path) -> Result<()> {
    use crate::imageio::{encode_disp16, encode_ppm};
    for d in DATASET_DIRS {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let put = |dir: &str, ext: &str, bytes: Vec<u8>| {
            let p = out.join(dir).join(sample_file_name(i, ext));
            write_atomic(&p, &bytes).map_err(|e| Error::io(&p, e))
        };
        put(DATASET_DIRS[0], "ppm", encode_ppm(&s.left))?;
        put(DATASET_DIRS[1], "ppm", encode_ppm(&s.right))?;
        put(DATASET_DIRS[2], "pgm", encode_disp16(&s.gt).0)?;
        if let Some(r) = &s.right_gt {
            put(DATASET_DIRS[3], "pgm", encode_disp16(r).0)?;
        }
    }
    Ok(())
}
