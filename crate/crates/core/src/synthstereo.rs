//! Layered synthetic stereo pairs with exact ground truth.
//!
//! A scene is a textured fronto-parallel background plus rectangular
//! fronto-parallel layers, each at an integer disparity. Layer textures live
//! in left-image coordinates; the right view shows every layer shifted left
//! by its disparity, with the largest disparity on top. The background
//! texture is wider than the image so disoccluded right-image pixels extend
//! it instead of leaving holes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::imageio::{encode_disp16, encode_ppm, write_atomic, DisparityMap, RawImage};
use crate::trainer::Sample;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    pub disparity: u32,
    pub texture_seed: u64,
}

impl Layer {
    fn contains(&self, x: usize, y: usize) -> bool {
        (self.x..self.x + self.width).contains(&x) && (self.y..self.y + self.height).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_disparity: u32,
    pub layers: Vec<Layer>,
    /// Exclusive upper bound on any disparity, in full-resolution pixels.
    pub disparity_limit: u32,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("empty image".into());
        }
        if self.background_disparity >= self.disparity_limit {
            return bad(format!("background disparity {} not below limit", self.background_disparity));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.width == 0 || l.height == 0 || l.x + l.width > self.width || l.y + l.height > self.height {
                return bad(format!("layer {i} rectangle outside the image"));
            }
            if l.disparity <= self.background_disparity || l.disparity >= self.disparity_limit {
                return bad(format!("layer {i} disparity {} outside (background, limit)", l.disparity));
            }
            if self.layers[..i].iter().any(|o| o.disparity == l.disparity) {
                return bad(format!("layer {i} shares disparity {} with another layer", l.disparity));
            }
        }
        Ok(())
    }
}

/// RGB texture: per-pixel uniform noise smoothed by a 3×3 box blur with
/// clamped borders.
fn texture(seed: u64, width: usize, height: usize) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<[u16; 3]> = (0..width * height).map(|_| [0; 3].map(|_: u16| rng.random_range(0..256u16))).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0u16; 3];
            for dy in 0..3 {
                let sy = (y + dy).saturating_sub(1).min(height - 1);
                for dx in 0..3 {
                    let sx = (x + dx).saturating_sub(1).min(width - 1);
                    let n = noise[sy * width + sx];
                    for c in 0..3 {
                        acc[c] += n[c];
                    }
                }
            }
            out.push(acc.map(|s| ((s as f32) / 9.0).round() as u8));
        }
    }
    out
}

struct Textures {
    background: Vec<[u8; 3]>,
    background_width: usize,
    layers: Vec<Vec<[u8; 3]>>,
}

impl Textures {
    fn new(spec: &SceneSpec) -> Self {
        let background_width = spec.width + spec.background_disparity as usize;
        Self {
            background: texture(spec.seed, background_width, spec.height),
            background_width,
            layers: spec.layers.iter().map(|l| texture(l.texture_seed, l.width, l.height)).collect(),
        }
    }
}

/// Renders the pair with left- and right-view ground truth.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let tex = Textures::new(spec);
    let (w, h) = (spec.width, spec.height);
    let bg = spec.background_disparity as usize;

    let mut left = RawImage::filled(w, h, [0; 3])?;
    let mut right = left.clone();
    let mut left_gt = vec![0.0f32; w * h];
    let mut right_gt = vec![0.0f32; w * h];

    for y in 0..h {
        for x in 0..w {
            // left view: the layer rectangle is in left coordinates
            let top = spec
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.contains(x, y))
                .max_by_key(|(_, l)| l.disparity);
            let (rgb, d) = match top {
                Some((i, l)) => (tex.layers[i][(y - l.y) * l.width + (x - l.x)], l.disparity),
                None => (tex.background[y * tex.background_width + x], spec.background_disparity),
            };
            left.set_pixel(x, y, rgb);
            left_gt[y * w + x] = d as f32;

            // right view: right pixel x sees left coordinate x + d
            let top = spec
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| l.contains(x + l.disparity as usize, y))
                .max_by_key(|(_, l)| l.disparity);
            let (rgb, d) = match top {
                Some((i, l)) => {
                    let u = x + l.disparity as usize - l.x;
                    (tex.layers[i][(y - l.y) * l.width + u], l.disparity)
                }
                None => (tex.background[y * tex.background_width + x + bg], spec.background_disparity),
            };
            right.set_pixel(x, y, rgb);
            right_gt[y * w + x] = d as f32;
        }
    }
    Ok(Sample {
        left,
        right,
        gt: DisparityMap::dense(w, h, left_gt)?,
        right_gt: Some(DisparityMap::dense(w, h, right_gt)?),
    })
}

/// Left pixels whose match `x - gt` lies inside the right image and shows the
/// same surface there.
pub fn non_occluded_mask(sample: &Sample) -> Result<Vec<bool>> {
    let right_gt = sample
        .right_gt
        .as_ref()
        .ok_or_else(|| Error::Data("non-occlusion needs right-view ground truth".into()))?;
    let (w, h) = (sample.gt.width(), sample.gt.height());
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(d) = sample.gt.get(x, y) else { continue };
            let xr = x as f32 - d;
            if xr < 0.0 || xr.fract() != 0.0 {
                continue;
            }
            mask[y * w + x] = right_gt.get(xr as usize, y) == Some(d);
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneOptions {
    pub width: usize,
    pub height: usize,
    pub disparity_limit: u32,
    pub max_layers: usize,
}

impl SceneOptions {
    pub fn new(width: usize, height: usize) -> Self {
        let limit = ((width / 4).clamp(4, 256) as u32) & !1;
        Self { width, height, disparity_limit: limit, max_layers: 3 }
    }
}

/// Random scene with even disparities and even-aligned rectangles, so every
/// 2×2 downsampling block lies on one surface and half-resolution ground
/// truth stays integral.
pub fn random_scene_spec(rng: &mut impl Rng, opts: SceneOptions) -> SceneSpec {
    let even = |v: usize| v & !1;
    let limit = opts.disparity_limit.max(4) as usize;
    let bg = even(rng.random_range(2..=(limit / 3).max(2)));
    let mut free: Vec<u32> = ((bg + 2)..limit).step_by(2).map(|d| d as u32).collect();
    let layer_count = rng.random_range(0..=opts.max_layers.min(free.len()));
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let disparity = free.swap_remove(rng.random_range(0..free.len()));
        let lw = even(rng.random_range(opts.width / 6..=opts.width / 2).max(2)).min(even(opts.width));
        let lh = even(rng.random_range(opts.height / 6..=opts.height / 2).max(2)).min(even(opts.height));
        let x = even(rng.random_range(0..=opts.width - lw));
        let y = even(rng.random_range(0..=opts.height - lh));
        layers.push(Layer { x, y, width: lw.max(1), height: lh.max(1), disparity, texture_seed: rng.random() });
    }
    SceneSpec {
        width: opts.width,
        height: opts.height,
        background_disparity: bg as u32,
        layers,
        disparity_limit: limit as u32,
        seed: rng.random(),
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// The `index`-th scene of the dataset identified by `seed`.
pub fn dataset_sample(seed: u64, index: usize, opts: SceneOptions) -> Result<Sample> {
    generate_scene(&random_scene_spec(&mut scene_rng(seed, index), opts))
}

pub const DATASET_DIRS: [&str; 4] = ["left", "right", "disp_left", "disp_right"];

pub fn sample_file_name(index: usize, ext: &str) -> String {
    format!("{index:04}.{ext}")
}

/// Writes `count` samples under `out`: `left/NNNN.ppm`, `right/NNNN.ppm`,
/// `disp_left/NNNN.pgm`, `disp_right/NNNN.pgm`.
pub fn generate_dataset(count: usize, opts: SceneOptions, seed: u64, out: &Path) -> Result<()> {
    for dir in DATASET_DIRS {
        let p = out.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    (0..count).into_par_iter().try_for_each(|i| {
        let s = dataset_sample(seed, i, opts)?;
        let right_gt = s.right_gt.as_ref().expect("synthetic samples carry right ground truth");
        let files = [
            ("left", encode_ppm(&s.left), "ppm"),
            ("right", encode_ppm(&s.right), "ppm"),
            ("disp_left", encode_disp16(&s.gt).0, "pgm"),
            ("disp_right", encode_disp16(right_gt).0, "pgm"),
        ];
        for (dir, bytes, ext) in files {
            let p = out.join(dir).join(sample_file_name(i, ext));
            write_atomic(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    })
}
