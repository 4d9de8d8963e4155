//! Fixed matching-cost volumes: 5×5 census on Y compared by Hamming
//! distance, and absolute differences of the U and V channels.
//!
//! Volumes are stored disparity-fastest, `(y * width + x) * D + d`, so the
//! per-pixel vector over disparities is contiguous.
//!
//! Where the candidate `x - d` falls left of the right image, the entry is
//! copied from the first valid column for that disparity, `x = d`. When
//! `d >= width` no column is valid and the entry compares the last left
//! column against the first right column.

use std::io::{self, Read, Write};

use rayon::prelude::*;

use crate::preprocess::PlanarImage;
use crate::{Error, Result};

pub const CENSUS_BITS: u32 = 24;

/// Per-pixel 24-bit census codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusMap {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<u32>,
}

/// Census over the 24 non-center positions of a 5×5 window, row-major with
/// bit 0 at the top-left neighbor. A bit is set iff the neighbor is strictly
/// darker than the center; window coordinates are clamped to the image.
/// Reads channel 0 of `plane`.
pub fn census_transform(plane: &PlanarImage) -> CensusMap {
    let (w, h) = (plane.width(), plane.height());
    let p = plane.plane(0);
    let mut codes = vec![0u32; w * h];
    codes.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let rows: [usize; 5] = std::array::from_fn(|i| (y + i).saturating_sub(2).min(h - 1));
        for (x, code) in row.iter_mut().enumerate() {
            let cols: [usize; 5] = std::array::from_fn(|i| (x + i).saturating_sub(2).min(w - 1));
            let center = p[y * w + x];
            let mut c = 0u32;
            let mut bit = 0;
            for (wy, &sy) in rows.iter().enumerate() {
                for (wx, &sx) in cols.iter().enumerate() {
                    if wy == 2 && wx == 2 {
                        continue;
                    }
                    if p[sy * w + sx] < center {
                        c |= 1 << bit;
                    }
                    bit += 1;
                }
            }
            *code = c;
        }
    });
    CensusMap { width: w, height: h, codes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CostType {
    Census,
    ChromaU,
    ChromaV,
}

impl CostType {
    /// Concatenation order of the volumes in the signature input.
    pub const ALL: [CostType; 3] = [CostType::Census, CostType::ChromaU, CostType::ChromaV];

    pub fn name(self) -> &'static str {
        match self {
            CostType::Census => "census",
            CostType::ChromaU => "u",
            CostType::ChromaV => "v",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// H×W×D matching costs, disparity-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub disparities: usize,
    pub costs: Vec<f32>,
}

impl CostVolume {
    pub fn at(&self, x: usize, y: usize, d: usize) -> f32 {
        self.costs[(y * self.width + x) * self.disparities + d]
    }

    /// Disparity vector of one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.disparities;
        &self.costs[i..i + self.disparities]
    }

    /// Per-pixel argmin over disparities (lowest index wins ties).
    pub fn winner_take_all(&self) -> Vec<usize> {
        self.costs
            .chunks_exact(self.disparities)
            .map(|c| {
                let mut best = 0;
                for (d, &v) in c.iter().enumerate() {
                    if v < c[best] {
                        best = d;
                    }
                }
                best
            })
            .collect()
    }

    pub fn write_fvol(&self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(b"FVOL")?;
        for v in [self.height, self.width, self.disparities] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.costs.len());
        for c in &self.costs {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_fvol(input: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("FVOL: {m}"));
        let mut head = [0u8; 16];
        input.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != b"FVOL" {
            return Err(bad("bad magic"));
        }
        let field = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (height, width, disparities) = (field(0), field(1), field(2));
        let mut raw = vec![0u8; 4 * height * width * disparities];
        input.read_exact(&mut raw).map_err(|_| bad("truncated payload"))?;
        let costs = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { width, height, disparities, costs })
    }
}

/// Source column pair `(left x, right x)` for an entry, applying the fill
/// rule.
#[inline]
fn source_columns(x: usize, d: usize, width: usize) -> (usize, usize) {
    if d < width {
        let xs = x.max(d);
        (xs, xs - d)
    } else {
        (width - 1, 0)
    }
}

#[inline(always)]
fn hamming_row(left: &[u32], right: &[u32], out: &mut [f32], d_count: usize) {
    let w = left.len();
    for x in 0..w {
        let cell = &mut out[x * d_count..(x + 1) * d_count];
        for (d, c) in cell.iter_mut().enumerate() {
            let (xl, xr) = source_columns(x, d, w);
            *c = (left[xl] ^ right[xr]).count_ones() as f32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn hamming_row_popcnt(left: &[u32], right: &[u32], out: &mut [f32], d_count: usize) {
    hamming_row(left, right, out, d_count)
}

fn dispatch_hamming_row(left: &[u32], right: &[u32], out: &mut [f32], d_count: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("popcnt") {
            // SAFETY: the CPU supports popcnt.
            return unsafe { hamming_row_popcnt(left, right, out, d_count) };
        }
    }
    hamming_row(left, right, out, d_count)
}

fn check_dims(a: (usize, usize), b: (usize, usize), d: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimensions(format!("left {}x{} vs right {}x{}", a.0, a.1, b.0, b.1)));
    }
    if d == 0 {
        return Err(Error::Config("disparity count must be at least 1".into()));
    }
    Ok(())
}

/// `C(x, y, d) = popcount(left(x, y) ^ right(x - d, y))`.
pub fn hamming_cost_volume(left: &CensusMap, right: &CensusMap, disparities: usize) -> Result<CostVolume> {
    check_dims((left.width, left.height), (right.width, right.height), disparities)?;
    let w = left.width;
    let mut costs = vec![0.0f32; w * left.height * disparities];
    costs.par_chunks_mut(w * disparities).enumerate().for_each(|(y, row)| {
        dispatch_hamming_row(&left.codes[y * w..(y + 1) * w], &right.codes[y * w..(y + 1) * w], row, disparities);
    });
    Ok(CostVolume { width: w, height: left.height, disparities, costs })
}

/// `C(x, y, d) = |left(x, y) - right(x - d, y)|` on channel 0 of each plane.
pub fn chroma_cost_volume(left: &PlanarImage, right: &PlanarImage, disparities: usize) -> Result<CostVolume> {
    check_dims((left.width(), left.height()), (right.width(), right.height()), disparities)?;
    let w = left.width();
    let (lp, rp) = (left.plane(0), right.plane(0));
    let mut costs = vec![0.0f32; w * left.height() * disparities];
    costs.par_chunks_mut(w * disparities).enumerate().for_each(|(y, row)| {
        let (l, r) = (&lp[y * w..(y + 1) * w], &rp[y * w..(y + 1) * w]);
        for x in 0..w {
            for d in 0..disparities {
                let (xl, xr) = source_columns(x, d, w);
                row[x * disparities + d] = (l[xl] - r[xr]).abs();
            }
        }
    });
    Ok(CostVolume { width: w, height: left.height(), disparities, costs })
}

/// Builds the requested volumes, in the order given, from half-resolution
/// YUV images.
pub fn build_volumes(left: &PlanarImage, right: &PlanarImage, disparities: usize, costs: &[CostType]) -> Result<Vec<CostVolume>> {
    if left.channels() != 3 || right.channels() != 3 {
        return Err(Error::Dimensions("cost volumes need 3-channel YUV images".into()));
    }
    let needs_census = costs.contains(&CostType::Census);
    let census = if needs_census {
        Some((census_transform(&left.channel(0)), census_transform(&right.channel(0))))
    } else {
        None
    };
    costs
        .iter()
        .map(|c| match c {
            CostType::Census => {
                let (l, r) = census.as_ref().expect("computed above");
                hamming_cost_volume(l, r, disparities)
            }
            CostType::ChromaU => chroma_cost_volume(&left.channel(1), &right.channel(1), disparities),
            CostType::ChromaV => chroma_cost_volume(&left.channel(2), &right.channel(2), disparities),
        })
        .collect()
}

pub const MIN_STD: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostStats {
    pub mean: f32,
    pub std: f32,
}

impl CostStats {
    pub const IDENTITY: CostStats = CostStats { mean: 0.0, std: 1.0 };
}

/// Streaming mean and population variance over the entries of many volumes
/// (pairwise merge of per-volume moments).
#[derive(Debug, Clone, Copy, Default)]
pub struct CostStatsAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl CostStatsAccumulator {
    pub fn push(&mut self, v: &CostVolume) {
        let n = v.costs.len() as u64;
        if n == 0 {
            return;
        }
        let mean = v.costs.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
        let m2 = v.costs.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>();
        let total = self.count + n;
        let delta = mean - self.mean;
        self.mean += delta * n as f64 / total as f64;
        self.m2 += m2 + delta * delta * self.count as f64 * n as f64 / total as f64;
        self.count = total;
    }

    pub fn finish(&self) -> Result<CostStats> {
        if self.count == 0 {
            return Err(Error::Data("no cost volumes to compute statistics from".into()));
        }
        let std = (self.m2 / self.count as f64).sqrt() as f32;
        Ok(CostStats { mean: self.mean as f32, std: std.max(MIN_STD) })
    }
}

pub fn compute_cost_stats<'a>(volumes: impl IntoIterator<Item = &'a CostVolume>) -> Result<CostStats> {
    let mut acc = CostStatsAccumulator::default();
    for v in volumes {
        acc.push(v);
    }
    acc.finish()
}

pub fn normalize_in_place(v: &mut CostVolume, s: CostStats) {
    let inv = 1.0 / s.std;
    for c in &mut v.costs {
        *c = (*c - s.mean) * inv;
    }
}

pub fn normalize_volume(v: &CostVolume, s: CostStats) -> CostVolume {
    let mut out = v.clone();
    normalize_in_place(&mut out, s);
    out
}
