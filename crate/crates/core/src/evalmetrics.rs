//! KITTI-style disparity accuracy metrics.
//!
//! All rates are percentages over pixels with valid ground truth, optionally
//! restricted by a mask. Thresholds are strict: an error equal to the
//! threshold is an inlier. Aggregates over several images are
//! pixel-weighted.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::imageio::{decode_disp16, decode_pgm16, write_atomic, DisparityMap};
use crate::{Error, Result};

/// Outlier thresholds reported in [`Metrics::outliers`], in pixels.
pub const OUTLIER_THRESHOLDS: [f32; 4] = [2.0, 3.0, 4.0, 5.0];
pub const D1_ABS: f32 = 3.0;
pub const D1_REL: f32 = 0.05;
pub const CSV_HEADER: &str = "image,avg_err,out2,out3,out4,out5,d1,valid_px";

fn check_dims(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<()> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::Dimensions(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if mask.is_some_and(|m| m.len() != gt.values().len()) {
        return Err(Error::Dimensions("mask size differs from the ground truth".into()));
    }
    Ok(())
}

/// Absolute errors at pixels with valid ground truth inside the mask.
fn errors<'a>(pred: &'a DisparityMap, gt: &'a DisparityMap, mask: Option<&'a [bool]>) -> impl Iterator<Item = (f32, f32)> + 'a {
    (0..gt.values().len()).filter_map(move |i| {
        let keep = gt.valid()[i] && mask.is_none_or(|m| m[i]);
        keep.then(|| ((pred.values()[i] - gt.values()[i]).abs(), gt.values()[i]))
    })
}

fn empty() -> Error {
    Error::Data("no valid ground-truth pixels in the evaluated region".into())
}

/// Mean `|pred - gt|` over valid ground-truth pixels.
pub fn avg_abs_error(pred: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    check_dims(pred, gt, None)?;
    let (sum, n) = errors(pred, gt, None).fold((0.0f64, 0usize), |(s, n), (e, _)| (s + e as f64, n + 1));
    if n == 0 {
        return Err(empty());
    }
    Ok(sum / n as f64)
}

/// Percentage of valid, masked pixels with `|err| > threshold`.
pub fn outlier_rate(pred: &DisparityMap, gt: &DisparityMap, threshold: f32, mask: Option<&[bool]>) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("outlier threshold must be positive, got {threshold}")));
    }
    check_dims(pred, gt, mask)?;
    let (bad, n) = errors(pred, gt, mask).fold((0usize, 0usize), |(b, n), (e, _)| (b + (e > threshold) as usize, n + 1));
    if n == 0 {
        return Err(empty());
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// The KITTI D1 outlier test: error above 3 px and above 5% of the truth.
pub fn is_d1_outlier(err: f32, gt: f32) -> bool {
    err > D1_ABS && err > D1_REL * gt
}

/// Percentage of valid, masked pixels that are D1 outliers.
pub fn d1_rate(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<f64> {
    check_dims(pred, gt, mask)?;
    let (bad, n) =
        errors(pred, gt, mask).fold((0usize, 0usize), |(b, n), (e, g)| (b + is_d1_outlier(e, g) as usize, n + 1));
    if n == 0 {
        return Err(empty());
    }
    Ok(100.0 * bad as f64 / n as f64)
}

/// Additive per-pixel tallies; summing them aggregates pixel-weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricCounts {
    pub abs_err_sum: f64,
    pub outliers: [usize; 4],
    pub d1: usize,
    pub valid: usize,
}

impl MetricCounts {
    pub fn measure(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<Self> {
        check_dims(pred, gt, mask)?;
        let mut c = Self::default();
        for (e, g) in errors(pred, gt, mask) {
            c.abs_err_sum += e as f64;
            for (n, &t) in c.outliers.iter_mut().zip(&OUTLIER_THRESHOLDS) {
                *n += (e > t) as usize;
            }
            c.d1 += is_d1_outlier(e, g) as usize;
            c.valid += 1;
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &Self) {
        self.abs_err_sum += o.abs_err_sum;
        for (a, b) in self.outliers.iter_mut().zip(&o.outliers) {
            *a += b;
        }
        self.d1 += o.d1;
        self.valid += o.valid;
    }

    /// `None` when no pixel was counted.
    pub fn metrics(&self) -> Option<Metrics> {
        if self.valid == 0 {
            return None;
        }
        let pct = |k: usize| 100.0 * k as f64 / self.valid as f64;
        Some(Metrics {
            avg_err: self.abs_err_sum / self.valid as f64,
            outliers: self.outliers.map(pct),
            d1: pct(self.d1),
            valid_px: self.valid,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub avg_err: f64,
    /// Percentages above 2, 3, 4 and 5 px.
    pub outliers: [f64; 4],
    pub d1: f64,
    pub valid_px: usize,
}

/// Pixel subsets a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    All,
    /// Non-occluded pixels.
    Noc,
    /// Pixels on the object mask.
    Fg,
    /// Pixels off the object mask.
    Bg,
}

impl Variant {
    pub fn suffix(self) -> &'static str {
        match self {
            Variant::All => "",
            Variant::Noc => ":noc",
            Variant::Fg => ":fg",
            Variant::Bg => ":bg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub image: String,
    pub variant: Variant,
    pub metrics: Metrics,
}

/// Per-image rows (images with no pixel in a variant are omitted for that
/// variant) and one pixel-weighted aggregate per variant.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<(Variant, Metrics)>,
}

impl MetricReport {
    pub fn aggregate(&self, v: Variant) -> Option<&Metrics> {
        self.aggregates.iter().find(|a| a.0 == v).map(|a| &a.1)
    }

    pub fn to_csv(&self) -> String {
        let line = |name: &str, m: &Metrics| {
            format!(
                "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                m.avg_err, m.outliers[0], m.outliers[1], m.outliers[2], m.outliers[3], m.d1, m.valid_px
            )
        };
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&line(&format!("{}{}", r.image, r.variant.suffix()), &r.metrics));
        }
        for (v, m) in &self.aggregates {
            s.push_str(&line(&format!("aggregate{}", v.suffix()), m));
        }
        s
    }
}

/// One evaluated image: prediction, ground truth and optional masks.
pub struct EvalItem {
    pub name: String,
    pub pred: DisparityMap,
    pub gt: DisparityMap,
    pub noc: Option<Vec<bool>>,
    pub obj: Option<Vec<bool>>,
}

/// Report over in-memory items. Variants beyond All appear when every item
/// carries the corresponding mask.
pub fn report(items: &[EvalItem]) -> Result<MetricReport> {
    let with_noc = !items.is_empty() && items.iter().all(|i| i.noc.is_some());
    let with_obj = !items.is_empty() && items.iter().all(|i| i.obj.is_some());
    let mut variants = vec![Variant::All];
    if with_noc {
        variants.push(Variant::Noc);
    }
    if with_obj {
        variants.extend([Variant::Fg, Variant::Bg]);
    }
    let per_item: Vec<Vec<MetricCounts>> = items
        .par_iter()
        .map(|it| {
            variants
                .iter()
                .map(|v| match v {
                    Variant::All => MetricCounts::measure(&it.pred, &it.gt, None),
                    Variant::Noc => MetricCounts::measure(&it.pred, &it.gt, it.noc.as_deref()),
                    Variant::Fg => MetricCounts::measure(&it.pred, &it.gt, it.obj.as_deref()),
                    Variant::Bg => {
                        let inv: Vec<bool> = it.obj.as_ref().expect("checked").iter().map(|&b| !b).collect();
                        MetricCounts::measure(&it.pred, &it.gt, Some(&inv))
                    }
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Data(format!("{}: {e}", it.name)))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut totals = vec![MetricCounts::default(); variants.len()];
    for (it, counts) in items.iter().zip(&per_item) {
        for ((v, c), t) in variants.iter().zip(counts).zip(totals.iter_mut()) {
            t.add(c);
            if let Some(m) = c.metrics() {
                rows.push(ReportRow { image: it.name.clone(), variant: *v, metrics: m });
            }
        }
    }
    let aggregates = variants.iter().zip(&totals).filter_map(|(v, t)| t.metrics().map(|m| (*v, m))).collect::<Vec<_>>();
    if aggregates.first().is_none_or(|a| a.0 != Variant::All) {
        return Err(empty());
    }
    Ok(MetricReport { rows, aggregates })
}

fn stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_string());
            }
        }
    }
    Ok(out)
}

fn read_map(path: &Path) -> Result<DisparityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_disp16(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_mask(path: &Path) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let g = decode_pgm16(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(g.data.iter().map(|&v| v != 0).collect())
}

/// Evaluates every `<stem>.pgm` in `pred_dir` against `gt_dir/<stem>.pgm`.
/// Masks, when given, are read from `<dir>/<stem>.pgm` (nonzero = inside).
pub fn eval_report(pred_dir: &Path, gt_dir: &Path, noc_dir: Option<&Path>, obj_dir: Option<&Path>) -> Result<MetricReport> {
    let pred = stems(pred_dir)?;
    let gt = stems(gt_dir)?;
    if let Some(s) = pred.symmetric_difference(&gt).next() {
        let side = if pred.contains(s) { gt_dir } else { pred_dir };
        return Err(Error::Data(format!("{s}.pgm has no counterpart in {}", side.display())));
    }
    let names: Vec<&String> = pred.iter().collect();
    let items = names
        .par_iter()
        .map(|stem| {
            let file = format!("{stem}.pgm");
            let mask = |d: Option<&Path>| d.map(|d| read_mask(&d.join(&file))).transpose();
            let item = EvalItem {
                name: stem.to_string(),
                pred: read_map(&pred_dir.join(&file))?,
                gt: read_map(&gt_dir.join(&file))?,
                noc: mask(noc_dir)?,
                obj: mask(obj_dir)?,
            };
            let n = item.gt.values().len();
            if (item.pred.width(), item.pred.height()) != (item.gt.width(), item.gt.height())
                || item.noc.as_ref().is_some_and(|m| m.len() != n)
                || item.obj.as_ref().is_some_and(|m| m.len() != n)
            {
                return Err(Error::Dimensions(format!("{stem}: prediction, ground truth and masks differ in size")));
            }
            Ok(item)
        })
        .collect::<Result<Vec<_>>>()?;
    report(&items)
}

pub fn write_csv(report: &MetricReport, path: &Path) -> Result<()> {
    write_atomic(path, report.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32]) -> DisparityMap {
        DisparityMap::dense(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn trivial_examples() {
        let gt = map(&[10.0, 20.0]);
        assert_eq!(avg_abs_error(&gt, &gt).unwrap(), 0.0);
        assert_eq!(avg_abs_error(&map(&[12.5, 20.0]), &gt).unwrap(), 1.25);
        let gt = map(&[0.0, 0.0]);
        assert_eq!(outlier_rate(&map(&[1.0, 4.0]), &gt, 3.0, None).unwrap(), 50.0);
        assert_eq!(outlier_rate(&map(&[3.0, 0.0]), &gt, 3.0, None).unwrap(), 0.0);
        assert_eq!(d1_rate(&map(&[104.0]), &map(&[100.0]), None).unwrap(), 0.0);
        assert_eq!(d1_rate(&map(&[14.0]), &map(&[10.0]), None).unwrap(), 100.0);
    }

    #[test]
    fn error_cases() {
        let gt = DisparityMap::new(2, 1, vec![0.0; 2], vec![false; 2]).unwrap();
        assert!(avg_abs_error(&map(&[1.0, 2.0]), &gt).is_err());
        assert!(outlier_rate(&map(&[1.0, 2.0]), &map(&[1.0, 2.0]), 0.0, None).is_err());
        assert!(d1_rate(&map(&[1.0]), &map(&[1.0, 2.0]), None).is_err());
        let mask = [false, false];
        assert!(d1_rate(&map(&[1.0, 2.0]), &map(&[1.0, 2.0]), Some(&mask)).is_err());
    }

    #[test]
    fn variants_and_csv() {
        let items = vec![EvalItem {
            name: "a".into(),
            pred: map(&[0.0, 10.0, 0.0, 0.0]),
            gt: map(&[0.0, 0.0, 0.0, 0.0]),
            noc: Some(vec![true, false, true, true]),
            obj: Some(vec![false, true, false, false]),
        }];
        let r = report(&items).unwrap();
        assert_eq!(r.aggregate(Variant::All).unwrap().outliers[1], 25.0);
        assert_eq!(r.aggregate(Variant::Noc).unwrap().outliers[1], 0.0);
        assert_eq!(r.aggregate(Variant::Fg).unwrap().outliers[1], 100.0);
        assert_eq!(r.aggregate(Variant::Bg).unwrap().valid_px, 3);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("a,2.5"));
        assert!(lines[2].starts_with("a:noc,"));
        assert!(lines.last().unwrap().starts_with("aggregate:bg,"));
    }
}
