//! Image-quality covariates (average intensity, grayscale utilization,
//! Laplacian-of-Gaussian sharpness) and the live vs. post-mortem rank-sum comparison.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::preprocess::{apply_crop, CropGeometry, DEFAULT_MARGIN_FACTOR};
use crate::stats::BoxplotStats;

/// Significance level for the live vs. post-mortem comparisons.
pub const ALPHA: f64 = 0.05;

/// Largest pooled sample size for which the exact null distribution is used.
pub const EXACT_MAX_TOTAL: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub average_intensity: f64,
    pub entropy: f64,
    pub sharpness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessParams {
    pub sigma: f64,
    pub kernel_halfwidth: usize,
}

impl SharpnessParams {
    pub fn with_sigma(sigma: f64) -> Self {
        Self {
            sigma,
            kernel_halfwidth: (4.0 * sigma).round().max(1.0) as usize,
        }
    }
}

impl Default for SharpnessParams {
    fn default() -> Self {
        Self::with_sigma(1.4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramStats {
    pub counts: [u64; 256],
    pub probabilities: [f64; 256],
}

impl HistogramStats {
    fn from_pixels<'a>(pixels: impl Iterator<Item = &'a u8>) -> Option<Self> {
        let mut counts = [0u64; 256];
        let mut n = 0u64;
        for &p in pixels {
            counts[p as usize] += 1;
            n += 1;
        }
        if n == 0 {
            return None;
        }
        let mut probabilities = [0.0; 256];
        for (p, &c) in probabilities.iter_mut().zip(&counts) {
            *p = c as f64 / n as f64;
        }
        Some(Self {
            counts,
            probabilities,
        })
    }

    pub fn of(image: &Image) -> Self {
        Self::from_pixels(image.pixels().iter()).expect("images are non-empty")
    }

    /// Shannon entropy in bits; empty bins contribute nothing.
    pub fn entropy(&self) -> f64 {
        let h: f64 = self
            .probabilities
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum();
        h.max(0.0)
    }
}

fn masked_pixels<'a>(image: &'a Image, mask: Option<&'a [bool]>) -> impl Iterator<Item = &'a u8> {
    image
        .pixels()
        .iter()
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, p)| p)
}

pub fn average_intensity(image: &Image) -> f64 {
    image.pixels().iter().map(|&p| p as u64).sum::<u64>() as f64 / image.len() as f64
}

pub fn grayscale_utilization(image: &Image) -> f64 {
    HistogramStats::of(image).entropy()
}

/// Discrete Laplacian-of-Gaussian kernel, mean-subtracted so its entries sum
/// to zero. Row-major, side `2·halfwidth + 1`.
pub fn log_kernel(params: &SharpnessParams) -> Vec<f64> {
    let h = params.kernel_halfwidth as i64;
    let s2 = params.sigma * params.sigma;
    let mut k: Vec<f64> = (-h..=h)
        .flat_map(|y| (-h..=h).map(move |x| (x, y)))
        .map(|(x, y)| {
            let r2 = (x * x + y * y) as f64;
            -(1.0 - r2 / (2.0 * s2)) * (-r2 / (2.0 * s2)).exp() / (std::f64::consts::PI * s2 * s2)
        })
        .collect();
    let m = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= m);
    k
}

/// Mean squared LoG response over the valid region (windows fully inside the
/// image, and inside `mask` when given). Responses are taken relative to the
/// window's center pixel, which is equivalent for a zero-sum kernel and makes
/// flat regions respond with exactly zero.
pub fn sharpness_masked(image: &Image, params: &SharpnessParams, mask: Option<&[bool]>) -> Result<f64> {
    if !(params.sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {}", params.sigma)));
    }
    let h = params.kernel_halfwidth;
    let side = 2 * h + 1;
    let (w, ht) = (image.width(), image.height());
    if w < side || ht < side {
        return Err(Error::param(format!(
            "image {w}x{ht} is smaller than the {side}x{side} LoG kernel"
        )));
    }
    let kernel = log_kernel(params);
    let px: Vec<f64> = image.pixels().iter().map(|&p| p as f64 / 255.0).collect();
    let window_inside = |cx: usize, cy: usize| -> bool {
        match mask {
            None => true,
            Some(m) => (cy - h..=cy + h).all(|y| (cx - h..=cx + h).all(|x| m[y * w + x])),
        }
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for cy in h..ht - h {
        for cx in h..w - h {
            if !window_inside(cx, cy) {
                continue;
            }
            let center = px[cy * w + cx];
            let mut r = 0.0;
            for ky in 0..side {
                let row = (cy + ky - h) * w + cx - h;
                for kx in 0..side {
                    r += kernel[ky * side + kx] * (px[row + kx] - center);
                }
            }
            sum += r * r;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::param("no valid region for the LoG kernel"));
    }
    Ok(sum / count as f64)
}

pub fn sharpness(image: &Image, params: &SharpnessParams) -> Result<f64> {
    sharpness_masked(image, params, None)
}

impl QualityMetrics {
    pub fn compute(image: &Image, params: &SharpnessParams) -> Result<Self> {
        Ok(Self {
            average_intensity: average_intensity(image),
            entropy: grayscale_utilization(image),
            sharpness: sharpness(image, params)?,
        })
    }

    /// Metrics restricted to pixels where `mask` is set.
    pub fn compute_masked(image: &Image, mask: &[bool], params: &SharpnessParams) -> Result<Self> {
        let hist = HistogramStats::from_pixels(masked_pixels(image, Some(mask)))
            .ok_or_else(|| Error::param("mask selects no pixels"))?;
        let total: u64 = hist.counts.iter().sum();
        let ai = hist
            .counts
            .iter()
            .enumerate()
            .map(|(v, &c)| v as f64 * c as f64)
            .sum::<f64>()
            / total as f64;
        Ok(Self {
            average_intensity: ai,
            entropy: hist.entropy(),
            sharpness: sharpness_masked(image, params, Some(mask))?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSumMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Rank sum of the first sample.
    pub statistic: f64,
    /// Standardized statistic; zero for the exact method.
    pub z: f64,
    pub p_value: f64,
    pub method: RankSumMethod,
}

/// Mid-ranks (1-based) of the pooled values plus the tie group sizes.
fn mid_ranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Number of size-`k` subsets of {1..n} for every possible sum.
fn subset_sum_counts(n: usize, k: usize) -> Vec<Vec<f64>> {
    let max_sum = n * (n + 1) / 2;
    // counts[j][s]: subsets of size j with sum s over the ranks seen so far
    let mut counts = vec![vec![0.0f64; max_sum + 1]; k + 1];
    counts[0][0] = 1.0;
    for r in 1..=n {
        for j in (1..=k.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                counts[j][s] += counts[j - 1][s - r];
            }
        }
    }
    counts
}

/// Two-sided Wilcoxon rank-sum test. Exact null distribution when the pooled
/// size is at most [`EXACT_MAX_TOTAL`] and there are no ties; otherwise the
/// normal approximation with tie and continuity corrections.
pub fn wilcoxon_rank_sum(sample_a: &[f64], sample_b: &[f64]) -> Result<RankSumResult> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::param("rank-sum test needs two non-empty samples"));
    }
    if sample_a.iter().chain(sample_b).any(|v| v.is_nan()) {
        return Err(Error::param("rank-sum test samples contain NaN"));
    }
    let (na, nb) = (sample_a.len(), sample_b.len());
    let n = na + nb;
    let pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    let (ranks, ties) = mid_ranks(&pooled);
    let w: f64 = ranks[..na].iter().sum();

    if n <= EXACT_MAX_TOTAL && ties.is_empty() {
        let counts = subset_sum_counts(n, na);
        // Compare doubled deviations so that half-integer means stay exact.
        let twice_mean = (na * (n + 1)) as i64;
        let observed = (2 * w as i64 - twice_mean).abs();
        let (mut extreme, mut total) = (0.0, 0.0);
        for (s, &c) in counts[na].iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            total += c;
            if (2 * s as i64 - twice_mean).abs() >= observed {
                extreme += c;
            }
        }
        return Ok(RankSumResult {
            statistic: w,
            z: 0.0,
            p_value: (extreme / total).min(1.0),
            method: RankSumMethod::Exact,
        });
    }

    let (na_f, nb_f, n_f) = (na as f64, nb as f64, n as f64);
    let mean = na_f * (n_f + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let variance = na_f * nb_f / 12.0 * ((n_f + 1.0) - tie_term / (n_f * (n_f - 1.0)));
    let deviation = w - mean;
    let (z, p_value) = if variance <= 0.0 {
        (0.0, 1.0)
    } else {
        let corrected = (deviation.abs() - 0.5).max(0.0);
        let z = corrected / variance.sqrt() * deviation.signum();
        let normal = Normal::standard();
        (z, (2.0 * normal.sf(z.abs())).min(1.0))
    };
    Ok(RankSumResult {
        statistic: w,
        z,
        p_value,
        method: RankSumMethod::NormalApproximation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub image_path: PathBuf,
    pub subject_id: String,
    pub label: Label,
    pub metrics: QualityMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub n_images: usize,
    pub average_intensity: BoxplotStats,
    pub entropy: BoxplotStats,
    pub sharpness: BoxplotStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTests {
    pub alpha: f64,
    pub average_intensity: RankSumResult,
    pub entropy: RankSumResult,
    pub sharpness: RankSumResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub preprocessed: bool,
    pub margin_factor: f64,
    pub sharpness_params: SharpnessParams,
    pub images: Vec<ImageQuality>,
    pub per_class: BTreeMap<Label, ClassQuality>,
    /// Live vs. post-mortem comparisons; absent when only one class is present.
    pub tests: Option<CovariateTests>,
    pub warnings: Vec<String>,
}

/// Metrics for one sample, on the raw frame or on its `cropped_masked` version.
pub fn sample_quality(
    image: &Image,
    annotation: &crate::dataset::IrisAnnotation,
    preprocessed: bool,
    params: &SharpnessParams,
) -> Result<QualityMetrics> {
    if !preprocessed {
        return QualityMetrics::compute(image, params);
    }
    let geom = CropGeometry::new(annotation, DEFAULT_MARGIN_FACTOR)?;
    annotation
        .validate(image.width(), image.height())
        .map_err(Error::Consistency)?;
    let cropped = apply_crop(image, &geom);
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mask: Vec<bool> = (0..geom.side)
        .flat_map(|y| (0..geom.side).map(move |x| (x, y)))
        .map(|(x, y)| {
            let sx = geom.origin_x + x as i64;
            let sy = geom.origin_y + y as i64;
            geom.keeps(x, y) && sx >= 0 && sy >= 0 && sx < w && sy < h
        })
        .collect();
    QualityMetrics::compute_masked(&cropped, &mask, params)
}

/// Per-image covariates, per-class boxplot summaries and rank-sum tests.
pub fn quality_report(dataset: &Dataset, preprocessed: bool, params: &SharpnessParams) -> Result<QualityReport> {
    let mut images = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let img = Image::load(&r.image_path)?;
        let metrics = sample_quality(&img, &r.annotation, preprocessed, params)?;
        images.push(ImageQuality {
            image_path: r.image_path.clone(),
            subject_id: r.subject_id.clone(),
            label: r.label,
            metrics,
        });
    }
    Ok(summarize(images, preprocessed, params))
}

pub(crate) fn summarize(images: Vec<ImageQuality>, preprocessed: bool, params: &SharpnessParams) -> QualityReport {
    let column = |label: Label, f: fn(&QualityMetrics) -> f64| -> Vec<f64> {
        images
            .iter()
            .filter(|q| q.label == label)
            .map(|q| f(&q.metrics))
            .collect()
    };
    let mut per_class = BTreeMap::new();
    let mut warnings = Vec::new();
    for label in Label::ALL {
        let ai = column(label, |m| m.average_intensity);
        if ai.is_empty() {
            warnings.push(format!("no {label} images; rank-sum tests omitted"));
            continue;
        }
        per_class.insert(
            label,
            ClassQuality {
                n_images: ai.len(),
                average_intensity: BoxplotStats::from_values(&ai).expect("non-empty"),
                entropy: BoxplotStats::from_values(&column(label, |m| m.entropy)).expect("non-empty"),
                sharpness: BoxplotStats::from_values(&column(label, |m| m.sharpness)).expect("non-empty"),
            },
        );
    }
    let tests = (per_class.len() == 2).then(|| {
        let test = |f: fn(&QualityMetrics) -> f64| {
            wilcoxon_rank_sum(&column(Label::Live, f), &column(Label::PostMortem, f))
                .expect("both classes non-empty")
        };
        CovariateTests {
            alpha: ALPHA,
            average_intensity: test(|m| m.average_intensity),
            entropy: test(|m| m.entropy),
            sharpness: test(|m| m.sharpness),
        }
    });
    QualityReport {
        preprocessed,
        margin_factor: DEFAULT_MARGIN_FACTOR,
        sharpness_params: *params,
        images,
        per_class,
        tests,
        warnings,
    }
}

impl QualityReport {
    /// Per-image metrics as CSV text.
    pub fn images_csv(&self) -> String {
        let mut out = String::from("image_path,subject_id,label,average_intensity,entropy,sharpness\n");
        for q in &self.images {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                q.image_path.display(),
                q.subject_id,
                q.label,
                q.metrics.average_intensity,
                q.metrics.entropy,
                q.metrics.sharpness
            ));
        }
        out
    }
}
