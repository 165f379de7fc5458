//! Saliency evaluation: MAE, max F-measure, S-measure, max E-measure and
//! PR curves, plus directory-level aggregation.
//!
//! Ground truth is binarized at `> 0.5` before every metric. Predictions are
//! binarized with `pred > k/255` for `k = 0..=255`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imageio::load_gray;
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 256;
pub const BETA_SQ: f64 = 0.3;
pub const ALPHA: f64 = 0.5;
/// Guard added to the alignment denominator when it would be zero.
pub const E_EPSILON: f64 = 1e-8;
pub const E_MEASURE_VARIANT: &str = "enhanced alignment, xi = 2ab/(a^2+b^2) with eps=1e-8 only when a^2+b^2=0, \
     mean over W*H, max over pred > k/255; uniform gt: mean(1-bin) or mean(bin)";

/// Threshold `k/255`.
pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// Flattened, validated pair: pred values and binary gt.
struct Pair {
    h: usize,
    w: usize,
    pred: Vec<f64>,
    gt: Vec<bool>,
}

fn plane(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::shape(op, format!("expected a single H×W map, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

fn pair(pred: &Tensor, gt: &Tensor, op: &'static str) -> Result<Pair> {
    let (h, w) = plane(pred, op)?;
    if plane(gt, op)? != (h, w) {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("{op}: prediction value {v} outside [0, 1]")));
    }
    if gt.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{op}: non-finite ground truth")));
    }
    Ok(Pair {
        h,
        w,
        pred: pred.data().to_vec(),
        gt: gt.data().iter().map(|&v| v > 0.5).collect(),
    })
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let p = pair(pred, gt, "mae")?;
    let s: f64 = p
        .pred
        .iter()
        .zip(&p.gt)
        .map(|(&v, &g)| (v - g as u8 as f64).abs())
        .sum();
    Ok(s / p.pred.len() as f64)
}

/// Confusion counts at every threshold.
#[derive(Clone, Debug)]
struct Counts {
    tp: Vec<usize>,
    fp: Vec<usize>,
    fg: usize,
    n: usize,
}

impl Counts {
    fn new(p: &Pair) -> Self {
        let mut fg: Vec<f64> = Vec::new();
        let mut bg: Vec<f64> = Vec::new();
        for (&v, &g) in p.pred.iter().zip(&p.gt) {
            if g { fg.push(v) } else { bg.push(v) }
        }
        fg.sort_by(f64::total_cmp);
        bg.sort_by(f64::total_cmp);
        let above = |s: &[f64], t: f64| s.len() - s.partition_point(|&v| v <= t);
        let (mut tp, mut fp) = (Vec::with_capacity(THRESHOLDS), Vec::with_capacity(THRESHOLDS));
        for k in 0..THRESHOLDS {
            tp.push(above(&fg, threshold(k)));
            fp.push(above(&bg, threshold(k)));
        }
        Self {
            tp,
            fp,
            fg: fg.len(),
            n: p.pred.len(),
        }
    }
}

/// Precision and recall at the 256 thresholds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Ground truth had no foreground; recall is 1 everywhere by convention.
    pub gt_empty: bool,
}

impl PrCurve {
    fn from_counts(c: &Counts) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Self {
            precision: (0..THRESHOLDS).map(|k| ratio(c.tp[k], c.tp[k] + c.fp[k])).collect(),
            recall: (0..THRESHOLDS).map(|k| ratio(c.tp[k], c.fg)).collect(),
            gt_empty: c.fg == 0,
        }
    }

    pub fn f_measure(&self) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_beta(p, r))
            .collect()
    }

    /// Element-wise mean of several curves.
    pub fn mean(curves: &[&PrCurve]) -> Option<PrCurve> {
        if curves.is_empty() {
            return None;
        }
        let n = curves.len() as f64;
        let avg = |get: fn(&PrCurve) -> &Vec<f64>| -> Vec<f64> {
            (0..THRESHOLDS)
                .map(|k| curves.iter().map(|c| get(c)[k]).sum::<f64>() / n)
                .collect()
        };
        Some(PrCurve {
            precision: avg(|c| &c.precision),
            recall: avg(|c| &c.recall),
            gt_empty: curves.iter().all(|c| c.gt_empty),
        })
    }

    /// 256 rows of `threshold,precision,recall`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for k in 0..THRESHOLDS {
            let _ = writeln!(s, "{},{},{}", threshold(k), self.precision[k], self.recall[k]);
        }
        s
    }
}

fn f_beta(p: f64, r: f64) -> f64 {
    let den = BETA_SQ * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * p * r / den
    }
}

pub fn pr_curve(pred: &Tensor, gt: &Tensor) -> Result<PrCurve> {
    let p = pair(pred, gt, "pr_curve")?;
    Ok(PrCurve::from_counts(&Counts::new(&p)))
}

pub fn max_f_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(max_of(&pr_curve(pred, gt)?.f_measure()))
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn s_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    Ok(s_measure_pair(&pair(pred, gt, "s_measure")?))
}

fn s_measure_pair(p: &Pair) -> f64 {
    let n = p.pred.len() as f64;
    let fg = p.gt.iter().filter(|&&g| g).count();
    if fg == 0 {
        return 1.0 - p.pred.iter().sum::<f64>() / n;
    }
    if fg == p.pred.len() {
        return p.pred.iter().sum::<f64>() / n;
    }
    let s = ALPHA * s_object(p) + (1.0 - ALPHA) * s_region(p);
    s.max(0.0)
}

fn mean_std(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = vals.clone().count();
    let mean = vals.clone().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, std)
}

fn object_score(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma) = mean_std(vals);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn s_object(p: &Pair) -> f64 {
    let pix = || p.pred.iter().zip(&p.gt);
    let u = pix().filter(|(_, &g)| g).count() as f64 / p.pred.len() as f64;
    let fg = object_score(pix().filter(|(_, &g)| g).map(|(&v, _)| v));
    let bg = object_score(pix().filter(|(_, &g)| !g).map(|(&v, _)| 1.0 - v));
    u * fg + (1.0 - u) * bg
}

/// Split point `(x, y)`: rounded foreground centroid plus one.
fn centroid(p: &Pair) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, &g) in p.gt.iter().enumerate() {
        if g {
            sy += (i / p.w) as f64;
            sx += (i % p.w) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return (
            (p.w as f64 / 2.0).round_ties_even() as usize + 1,
            (p.h as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    let n = n as f64;
    (
        (sx / n).round_ties_even() as usize + 1,
        (sy / n).round_ties_even() as usize + 1,
    )
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = pred.iter().sum::<f64>() / n;
    let y = gt.iter().sum::<f64>() / n;
    let dof = (n - 1.0).max(1.0);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in pred.iter().zip(gt) {
        sxx += (a - x) * (a - x);
        syy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sxx, syy, sxy) = (sxx / dof, syy / dof, sxy / dof);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &Pair) -> f64 {
    let (x, y) = centroid(p);
    let (x, y) = (x.min(p.w), y.min(p.h));
    let area = (p.h * p.w) as f64;
    let mut score = 0.0;
    for (rows, cols) in [(0..y, 0..x), (0..y, x..p.w), (y..p.h, 0..x), (y..p.h, x..p.w)] {
        let count = rows.len() * cols.len();
        if count == 0 {
            continue;
        }
        let (mut a, mut b) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for r in rows {
            for c in cols.clone() {
                a.push(p.pred[r * p.w + c]);
                b.push(p.gt[r * p.w + c] as u8 as f64);
            }
        }
        score += count as f64 / area * ssim(&a, &b);
    }
    score
}

pub fn e_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let p = pair(pred, gt, "e_measure")?;
    Ok(max_of(&e_curve(&Counts::new(&p))))
}

fn enhanced(a: f64, b: f64) -> f64 {
    let den = a * a + b * b;
    let xi = 2.0 * a * b / if den == 0.0 { E_EPSILON } else { den };
    (xi + 1.0) * (xi + 1.0) / 4.0
}

/// E-measure at every threshold, from the four confusion cells.
fn e_curve(c: &Counts) -> Vec<f64> {
    let n = c.n as f64;
    (0..THRESHOLDS)
        .map(|k| {
            let (tp, fp) = (c.tp[k], c.fp[k]);
            let positives = tp + fp;
            if c.fg == 0 {
                return (c.n - positives) as f64 / n;
            }
            if c.fg == c.n {
                return positives as f64 / n;
            }
            let (fn_, tn) = (c.fg - tp, c.n - c.fg - fp);
            let mp = positives as f64 / n;
            let mg = c.fg as f64 / n;
            let sum = tp as f64 * enhanced(1.0 - mp, 1.0 - mg)
                + fp as f64 * enhanced(1.0 - mp, -mg)
                + fn_ as f64 * enhanced(-mp, 1.0 - mg)
                + tn as f64 * enhanced(-mp, -mg);
            sum / n
        })
        .collect()
}

/// All metrics for one image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mae: f64,
    pub max_f: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub gt_empty: bool,
    #[serde(skip)]
    pub pr: PrCurve,
}

pub fn evaluate_pair(name: &str, pred: &Tensor, gt: &Tensor) -> Result<ImageMetrics> {
    let p = pair(pred, gt, "evaluate")?;
    let counts = Counts::new(&p);
    let pr = PrCurve::from_counts(&counts);
    let mae = p
        .pred
        .iter()
        .zip(&p.gt)
        .map(|(&v, &g)| (v - g as u8 as f64).abs())
        .sum::<f64>()
        / p.pred.len() as f64;
    Ok(ImageMetrics {
        name: name.to_string(),
        mae,
        max_f: max_of(&pr.f_measure()),
        s_measure: s_measure_pair(&p),
        e_measure: max_of(&e_curve(&counts)),
        gt_empty: pr.gt_empty,
        pr,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricMeans {
    pub mae: f64,
    pub max_f: f64,
    pub s_measure: f64,
    pub e_measure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub file: String,
    pub reason: String,
}

/// Per-image metrics in filename order plus their unweighted means.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean: Option<MetricMeans>,
    #[serde(skip)]
    pub mean_pr: Option<PrCurve>,
    /// Files without a counterpart of the same stem, or that failed to load.
    pub skipped: Vec<Skipped>,
}

pub const CSV_COLUMNS: &str = "image,mae,max_f,s_measure,e_measure";

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>, skipped: Vec<Skipped>) -> Self {
        let mean = (!images.is_empty()).then(|| {
            let n = images.len() as f64;
            let avg = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
            MetricMeans {
                mae: avg(|m| m.mae),
                max_f: avg(|m| m.max_f),
                s_measure: avg(|m| m.s_measure),
                e_measure: avg(|m| m.e_measure),
            }
        });
        let mean_pr = PrCurve::mean(&images.iter().map(|m| &m.pr).collect::<Vec<_>>());
        Self {
            images,
            mean,
            mean_pr,
            skipped,
        }
    }

    pub fn warnings(&self) -> usize {
        self.skipped.len()
    }

    /// One row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_COLUMNS}\n");
        for m in &self.images {
            let _ = writeln!(s, "{},{},{},{},{}", csv_field(&m.name), m.mae, m.max_f, m.s_measure, m.e_measure);
        }
        if let Some(m) = &self.mean {
            let _ = writeln!(s, "mean,{},{},{},{}", m.mae, m.max_f, m.s_measure, m.e_measure);
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

/// Image files in `dir` keyed by stem, in filename order. Repeated stems
/// after the first are reported as skipped.
pub fn list_images(dir: &Path) -> Result<(BTreeMap<String, PathBuf>, Vec<Skipped>)> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = Vec::new();
    for e in entries {
        let path = e
            .map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        let ok = path.is_file()
            && path
                .extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()));
        if ok {
            files.push(path);
        }
    }
    files.sort();
    let mut map = BTreeMap::new();
    let mut skipped = Vec::new();
    for f in files {
        let Some(stem) = f.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        if map.contains_key(&stem) {
            skipped.push(Skipped {
                file: f.display().to_string(),
                reason: format!("duplicate stem {stem}"),
            });
        } else {
            map.insert(stem, f);
        }
    }
    Ok((map, skipped))
}

/// Matches predictions to ground truth by file stem, resizes predictions to
/// the ground-truth size (bilinear) and evaluates every pair.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let (preds, mut skipped) = list_images(pred_dir)?;
    let (gts, s2) = list_images(gt_dir)?;
    skipped.extend(s2);
    for (stem, path) in &preds {
        if !gts.contains_key(stem) {
            skipped.push(Skipped {
                file: path.display().to_string(),
                reason: "no ground truth with this stem".into(),
            });
        }
    }
    for (stem, path) in &gts {
        if !preds.contains_key(stem) {
            skipped.push(Skipped {
                file: path.display().to_string(),
                reason: "no prediction with this stem".into(),
            });
        }
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = preds
        .iter()
        .filter_map(|(stem, p)| gts.get(stem).map(|g| (stem, p, g)))
        .collect();
    let results: Vec<std::result::Result<ImageMetrics, Skipped>> = pairs
        .par_iter()
        .map(|(stem, p, g)| {
            let eval = || -> Result<ImageMetrics> {
                let gt = load_gray(g)?;
                let mut pred = load_gray(p)?;
                if pred.shape() != gt.shape() {
                    pred = pred.resize_bilinear(gt.shape()[1], gt.shape()[2])?;
                }
                evaluate_pair(stem, &pred, &gt)
            };
            eval().map_err(|e| Skipped {
                file: p.display().to_string(),
                reason: e.to_string(),
            })
        })
        .collect();
    let mut images = Vec::new();
    for r in results {
        match r {
            Ok(m) => images.push(m),
            Err(s) => skipped.push(s),
        }
    }
    Ok(MetricReport::from_images(images, skipped))
}
