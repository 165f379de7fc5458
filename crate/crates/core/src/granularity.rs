//! Depth histograms, exhaustive multi-threshold Otsu and region masks.
//!
//! A depth map is quantized to 256 bins. `multi_otsu` picks `T` thresholds
//! `d_1 < … < d_T` maximizing the between-class variance; region `i` then
//! holds the pixels whose bin lies in `(d_{i-1}, d_i]` with `d_0 = -1` and
//! `d_{T+1} = 255`. Regions are ordered by ascending depth value.

use std::cmp::Ordering;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINS: usize = 256;

/// Thresholds used when none are requested explicitly.
pub const DEFAULT_THRESHOLDS: usize = 2;

/// Largest supported threshold count.
pub const MAX_THRESHOLDS: usize = 3;

/// Single-channel depth image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("depth map must be non-empty"));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "depth map",
                format!("{height}x{width} needs {} values, got {}", height * width, values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("depth value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Accepts any tensor whose leading axes are all 1 (`H×W`, `1×H×W`, `1×1×H×W`).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
            return Err(Error::shape(
                "depth map",
                format!("expected a single-channel map, got {s:?}"),
            ));
        }
        Self::new(s[s.len() - 2], s[s.len() - 1], t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.values.clone()).expect("valid shape")
    }
}

/// Histogram bin of a depth value: `floor(v·255 + 0.5)` clamped to `[0, 255]`.
pub fn depth_bin(value: f64) -> usize {
    ((value * 255.0 + 0.5).floor().max(0.0) as usize).min(BINS - 1)
}

/// 256-bin occupancy counts of a depth map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthHistogram {
    bins: [u64; BINS],
    total: u64,
}

impl DepthHistogram {
    pub fn from_counts(bins: [u64; BINS]) -> Self {
        let total = bins.iter().sum();
        Self { bins, total }
    }

    pub fn bins(&self) -> &[u64; BINS] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn occupied(&self) -> usize {
        self.bins.iter().filter(|&&c| c > 0).count()
    }
}

pub fn build_histogram(depth: &DepthMap) -> DepthHistogram {
    let mut bins = [0u64; BINS];
    for &v in &depth.values {
        bins[depth_bin(v)] += 1;
    }
    DepthHistogram::from_counts(bins)
}

/// Optimal thresholds for one histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    /// Strictly ascending bin indices in `[0, 255)`.
    pub thresholds: Vec<u8>,
    /// Between-class variance `Σ (w_i/N)(μ_i − μ)²` in squared bin units.
    pub objective: f64,
    /// Threshold count asked for; `thresholds.len()` may be smaller when the
    /// histogram has too few occupied bins.
    pub requested: usize,
}

impl ThresholdSet {
    pub fn effective(&self) -> usize {
        self.thresholds.len()
    }

    /// Validates and wraps explicit thresholds.
    pub fn from_thresholds(thresholds: Vec<u8>) -> Result<Self> {
        if thresholds.len() > MAX_THRESHOLDS {
            return Err(Error::invalid(format!(
                "at most {MAX_THRESHOLDS} thresholds supported, got {}",
                thresholds.len()
            )));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) || thresholds.contains(&255) {
            return Err(Error::invalid(format!(
                "thresholds must be strictly ascending in [0, 255): {thresholds:?}"
            )));
        }
        Ok(Self {
            requested: thresholds.len(),
            thresholds,
            objective: f64::NAN,
        })
    }
}

/// Prefix moments: `count[p]` and `moment[p]` cover bins `0..p`.
pub(crate) struct Moments {
    count: Vec<u64>,
    moment: Vec<u64>,
}

impl Moments {
    pub(crate) fn new(hist: &DepthHistogram) -> Self {
        let mut count = vec![0u64; BINS + 1];
        let mut moment = vec![0u64; BINS + 1];
        for b in 0..BINS {
            count[b + 1] = count[b] + hist.bins[b];
            moment[b + 1] = moment[b] + b as u64 * hist.bins[b];
        }
        Self { count, moment }
    }

    /// `(pixels, Σ bin)` for bins in `lo..hi`.
    fn class(&self, lo: usize, hi: usize) -> (u64, u64) {
        (
            self.count[hi] - self.count[lo],
            self.moment[hi] - self.moment[lo],
        )
    }

    /// Exact `Σ S_i²/w_i` over non-empty classes as `(numerator, denominator)`.
    pub(crate) fn exact(&self, bounds: &[usize]) -> (BigInt, BigInt) {
        let mut num = BigInt::from(0u8);
        let mut den = BigInt::from(1u8);
        for w in bounds.windows(2) {
            let (cw, cs) = self.class(w[0], w[1]);
            if cw == 0 {
                continue;
            }
            let cw = BigInt::from(cw);
            let cs = BigInt::from(cs);
            num = num * &cw + &cs * &cs * &den;
            den *= cw;
        }
        (num, den)
    }

    fn has_empty(&self, bounds: &[usize]) -> bool {
        bounds.windows(2).any(|w| self.class(w[0], w[1]).0 == 0)
    }

    fn same_partition(&self, a: &[usize], b: &[usize]) -> bool {
        a.windows(2)
            .zip(b.windows(2))
            .all(|(x, y)| self.class(x[0], x[1]) == self.class(y[0], y[1]))
    }
}

fn exact_cmp(m: &Moments, a: &[usize], b: &[usize]) -> Ordering {
    if m.same_partition(a, b) {
        return Ordering::Equal;
    }
    let (na, da) = m.exact(a);
    let (nb, db) = m.exact(b);
    (na * db).cmp(&(nb * da))
}

struct Search<'a> {
    moments: &'a Moments,
    /// `term[lo * (BINS + 1) + hi] = S²/w` for bins `lo..hi`.
    term: Vec<f64>,
    t: usize,
    bounds: Vec<usize>,
    best_bounds: Vec<usize>,
    best_value: f64,
    found: bool,
}

impl Search<'_> {
    fn term(&self, lo: usize, hi: usize) -> f64 {
        self.term[lo * (BINS + 1) + hi]
    }

    fn visit(&mut self, level: usize, partial: f64) {
        let lo = self.bounds[level - 1];
        if level == self.t + 1 {
            let value = partial + self.term(lo, BINS);
            self.offer(value);
            return;
        }
        // Boundary b_level = d_level + 1 with d_level in [0, 255).
        let remaining = self.t - level;
        for b in (lo + 1)..=(BINS - 1 - remaining) {
            self.bounds[level] = b;
            self.visit(level + 1, partial + self.term(lo, b));
        }
    }

    fn offer(&mut self, value: f64) {
        if !self.found {
            self.accept(value);
            return;
        }
        let tol = 1e-10 * self.best_value.abs().max(1.0);
        if value > self.best_value + tol {
            self.accept(value);
        } else if value >= self.best_value - tol {
            match exact_cmp(self.moments, &self.bounds, &self.best_bounds) {
                Ordering::Greater => self.accept(value),
                Ordering::Equal
                    if self.moments.has_empty(&self.best_bounds)
                        && !self.moments.has_empty(&self.bounds) =>
                {
                    self.accept(value)
                }
                _ => {}
            }
        }
    }

    fn accept(&mut self, value: f64) {
        self.best_value = value;
        self.best_bounds.copy_from_slice(&self.bounds);
        self.found = true;
    }
}

/// Exhaustive multi-threshold Otsu over all `C(255, T)` threshold tuples.
///
/// Ties resolve to the lexicographically smallest tuple, compared in exact
/// integer arithmetic. With fewer than `T + 1` occupied bins the threshold
/// count is reduced to `occupied − 1`.
pub fn multi_otsu(hist: &DepthHistogram, t: usize) -> Result<ThresholdSet> {
    if hist.total == 0 {
        return Err(Error::invalid("multi_otsu: empty histogram"));
    }
    if t > MAX_THRESHOLDS {
        return Err(Error::invalid(format!(
            "multi_otsu: at most {MAX_THRESHOLDS} thresholds supported, got {t}"
        )));
    }
    let t_eff = t.min(hist.occupied() - 1);
    let moments = Moments::new(hist);
    if t_eff == 0 {
        return Ok(ThresholdSet {
            thresholds: Vec::new(),
            objective: 0.0,
            requested: t,
        });
    }

    let mut term = vec![0.0; (BINS + 1) * (BINS + 1)];
    for lo in 0..=BINS {
        for hi in lo..=BINS {
            let (w, s) = moments.class(lo, hi);
            if w > 0 {
                term[lo * (BINS + 1) + hi] = (s as f64) * (s as f64) / w as f64;
            }
        }
    }
    let mut bounds = vec![0usize; t_eff + 2];
    bounds[t_eff + 1] = BINS;
    let mut search = Search {
        moments: &moments,
        term,
        t: t_eff,
        best_bounds: bounds.clone(),
        bounds,
        best_value: f64::NEG_INFINITY,
        found: false,
    };
    search.visit(1, 0.0);

    let thresholds = search.best_bounds[1..=t_eff]
        .iter()
        .map(|&b| (b - 1) as u8)
        .collect();
    Ok(ThresholdSet {
        objective: between_class_variance(hist, &search.best_bounds),
        thresholds,
        requested: t,
    })
}

fn between_class_variance(hist: &DepthHistogram, bounds: &[usize]) -> f64 {
    let m = Moments::new(hist);
    let n = hist.total as f64;
    let mean = m.moment[BINS] as f64 / n;
    bounds
        .windows(2)
        .map(|w| {
            let (cw, cs) = m.class(w[0], w[1]);
            if cw == 0 {
                0.0
            } else {
                let mu = cs as f64 / cw as f64;
                (cw as f64 / n) * (mu - mean) * (mu - mean)
            }
        })
        .sum()
}

/// Between-class variance of an arbitrary threshold tuple.
pub fn threshold_objective(hist: &DepthHistogram, thresholds: &[u8]) -> f64 {
    let mut bounds = vec![0];
    bounds.extend(thresholds.iter().map(|&d| d as usize + 1));
    bounds.push(BINS);
    between_class_variance(hist, &bounds)
}

/// Depth regions stored as a label map; region `i` is the binary mask
/// `label == i`. The masks partition the image by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GranularityMasks {
    height: usize,
    width: usize,
    regions: usize,
    labels: Vec<u8>,
}

impl GranularityMasks {
    pub fn from_labels(height: usize, width: usize, regions: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || regions == 0 || regions > 256 {
            return Err(Error::invalid("masks: empty size or region count"));
        }
        if labels.len() != height * width {
            return Err(Error::shape("masks", "label count does not match size"));
        }
        if labels.iter().any(|&l| l as usize >= regions) {
            return Err(Error::invalid("masks: label out of range"));
        }
        Ok(Self {
            height,
            width,
            regions,
            labels,
        })
    }

    /// One region covering every pixel.
    pub fn single(height: usize, width: usize) -> Self {
        Self::from_labels(height, width, 1, vec![0; height * width]).expect("valid size")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Binary mask of region `i` as a `1×1×H×W` tensor.
    pub fn mask(&self, i: usize) -> Tensor {
        assert!(i < self.regions, "region {i} out of range");
        let data = self
            .labels
            .iter()
            .map(|&l| if l as usize == i { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("valid shape")
    }

    pub fn masks(&self) -> Vec<Tensor> {
        (0..self.regions).map(|i| self.mask(i)).collect()
    }

    /// Region `i` as 8-bit grayscale (0 / 255).
    pub fn mask_bytes(&self, i: usize) -> Vec<u8> {
        self.labels
            .iter()
            .map(|&l| if l as usize == i { 255 } else { 0 })
            .collect()
    }

    pub fn pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.regions];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Nearest-neighbour resize; the result is still a partition.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize_masks: size must be >= 1"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let src_y: Vec<usize> = (0..height).map(|y| nearest(y, height, self.height)).collect();
        let src_x: Vec<usize> = (0..width).map(|x| nearest(x, width, self.width)).collect();
        let mut labels = Vec::with_capacity(height * width);
        for &sy in &src_y {
            for &sx in &src_x {
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        Ok(Self {
            height,
            width,
            regions: self.regions,
            labels,
        })
    }
}

/// Source index of output pixel `dst` (pixel-centre sampling).
fn nearest(dst: usize, out: usize, inp: usize) -> usize {
    (((2 * dst + 1) * inp) / (2 * out)).min(inp - 1)
}

pub fn generate_masks(depth: &DepthMap, thresholds: &ThresholdSet) -> GranularityMasks {
    let labels = depth
        .values
        .iter()
        .map(|&v| {
            let bin = depth_bin(v);
            thresholds
                .thresholds
                .iter()
                .filter(|&&d| (d as usize) < bin)
                .count() as u8
        })
        .collect();
    GranularityMasks {
        height: depth.height,
        width: depth.width,
        regions: thresholds.thresholds.len() + 1,
        labels,
    }
}

pub fn resize_masks(masks: &GranularityMasks, height: usize, width: usize) -> Result<GranularityMasks> {
    masks.resize(height, width)
}

/// Histogram, thresholds and masks in one call.
pub fn masks_for_depth(depth: &DepthMap, t: usize) -> Result<(ThresholdSet, GranularityMasks)> {
    let thresholds = multi_otsu(&build_histogram(depth), t)?;
    let masks = generate_masks(depth, &thresholds);
    Ok((thresholds, masks))
}
