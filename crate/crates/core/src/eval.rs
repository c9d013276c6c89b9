//! PAD performance metrics: accuracy, ROC/AUC, APCER/BPCER, zero-APCER
//! operating points and liveness scores against time since death.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::stats::BoxplotStats;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Categorical decision threshold on `p_live` (softmax argmax for two classes).
pub const DECISION_THRESHOLD: f64 = 0.5;

pub const SCORED_HEADER: &str = "split_index,subject_id,image_path,true_label,hours_post_mortem,p_live";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub p_live: f64,
    pub true_label: Label,
    pub hours_post_mortem: f64,
    pub subject_id: String,
    pub split_index: usize,
    #[serde(default)]
    pub image_path: PathBuf,
}

impl ScoredSample {
    pub fn new(p_live: f64, true_label: Label, hours_post_mortem: f64) -> Self {
        Self {
            p_live,
            true_label,
            hours_post_mortem,
            subject_id: String::new(),
            split_index: 0,
            image_path: PathBuf::new(),
        }
    }
}

/// Smallest double strictly greater than `x` (for finite `x`).
pub fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn class_scores(scored: &[ScoredSample], label: Label) -> Vec<f64> {
    scored.iter().filter(|s| s.true_label == label).map(|s| s.p_live).collect()
}

/// Share of samples whose categorical decision (`p_live >= 0.5` means live)
/// matches the ground truth.
pub fn split_accuracy(scored: &[ScoredSample]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::param("accuracy of an empty score list"));
    }
    let correct = scored
        .iter()
        .filter(|s| (s.p_live >= DECISION_THRESHOLD) == (s.true_label == Label::Live))
        .count();
    Ok(correct as f64 / scored.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Fraction of post-mortem samples accepted as live.
    pub false_live_rate: f64,
    /// Fraction of live samples accepted as live.
    pub true_live_rate: f64,
    pub threshold: f64,
}

/// ROC with `live` as the positive class, swept over every distinct score
/// (a sample is accepted as live when `p_live >= threshold`), plus the
/// trapezoidal area under it.
pub fn roc_auc(scored: &[ScoredSample]) -> Result<(Vec<RocPoint>, f64)> {
    let n_live = scored.iter().filter(|s| s.true_label == Label::Live).count();
    let n_pm = scored.len() - n_live;
    if n_live == 0 || n_pm == 0 {
        return Err(Error::UndefinedRoc(format!(
            "need both classes, got {n_live} live and {n_pm} post-mortem samples"
        )));
    }
    let mut sorted: Vec<&ScoredSample> = scored.iter().collect();
    sorted.sort_by(|a, b| b.p_live.total_cmp(&a.p_live));
    let max = sorted[0].p_live;
    let mut points = vec![RocPoint {
        false_live_rate: 0.0,
        true_live_rate: 0.0,
        threshold: next_up(max),
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].p_live;
        while i < sorted.len() && sorted[i].p_live == t {
            match sorted[i].true_label {
                Label::Live => tp += 1,
                Label::PostMortem => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            false_live_rate: fp as f64 / n_pm as f64,
            true_live_rate: tp as f64 / n_live as f64,
            threshold: t,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].false_live_rate - w[0].false_live_rate) * (w[1].true_live_rate + w[0].true_live_rate) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0);
    Ok((points, auc))
}

/// APCER: post-mortem samples with `p_live >= threshold`; BPCER: live samples
/// with `p_live < threshold`.
pub fn apcer_bpcer(scored: &[ScoredSample], threshold: f64) -> Result<(f64, f64)> {
    let live = class_scores(scored, Label::Live);
    let pm = class_scores(scored, Label::PostMortem);
    if live.is_empty() || pm.is_empty() {
        return Err(Error::param("APCER/BPCER need both live and post-mortem samples"));
    }
    let apcer = pm.iter().filter(|&&p| p >= threshold).count() as f64 / pm.len() as f64;
    let bpcer = live.iter().filter(|&&p| p < threshold).count() as f64 / live.len() as f64;
    Ok((apcer, bpcer))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub min_hours: f64,
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub n_post_mortem: usize,
}

/// Lowest threshold at which no post-mortem sample captured at least
/// `min_hours` after death is accepted as live.
pub fn zero_apcer_operating_point(scored: &[ScoredSample], min_hours: f64) -> Result<OperatingPoint> {
    let filtered: Vec<ScoredSample> = scored
        .iter()
        .filter(|s| s.true_label == Label::Live || s.hours_post_mortem >= min_hours)
        .cloned()
        .collect();
    let pm = class_scores(&filtered, Label::PostMortem);
    if pm.is_empty() {
        return Err(Error::param(format!(
            "no post-mortem samples with hours_post_mortem >= {min_hours}"
        )));
    }
    let threshold = next_up(pm.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (apcer, bpcer) = apcer_bpcer(&filtered, threshold)?;
    Ok(OperatingPoint {
        min_hours,
        threshold,
        apcer,
        bpcer,
        n_post_mortem: pm.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBin {
    /// True for the zero-hours bin holding the live samples.
    pub live: bool,
    /// Post-mortem bins cover (lower, upper]; `upper = None` is unbounded.
    pub lower_hours: f64,
    pub upper_hours: Option<f64>,
    pub n: usize,
    /// Median/quartiles/whiskers and mean/standard deviation of `p_live`.
    pub stats: Option<BoxplotStats>,
}

/// Groups liveness scores by time since death. Live samples form the 0-hour
/// bin; post-mortem samples fall into (edge[i], edge[i+1]] bins, with an
/// unbounded bin past the last edge and a leading one below the first. With no
/// edges, every distinct acquisition time gets its own bin.
pub fn time_horizon_analysis(scored: &[ScoredSample], bin_edges: &[f64]) -> Vec<TimeBin> {
    let bin = |live: bool, lower: f64, upper: Option<f64>, values: Vec<f64>| TimeBin {
        live,
        lower_hours: lower,
        upper_hours: upper,
        n: values.len(),
        stats: BoxplotStats::from_values(&values),
    };
    let mut bins = vec![bin(true, 0.0, Some(0.0), class_scores(scored, Label::Live))];
    let pm: Vec<&ScoredSample> = scored.iter().filter(|s| s.true_label == Label::PostMortem).collect();
    if bin_edges.is_empty() {
        let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for s in &pm {
            groups.entry(s.hours_post_mortem.to_bits()).or_default().push(s.p_live);
        }
        bins.extend(groups.into_iter().map(|(h, v)| {
            let h = f64::from_bits(h);
            bin(false, h, Some(h), v)
        }));
        return bins;
    }
    let mut edges = bin_edges.to_vec();
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let in_range = |h: f64, lo: Option<f64>, hi: Option<f64>| lo.is_none_or(|l| h > l) && hi.is_none_or(|u| h <= u);
    let mut ranges: Vec<(Option<f64>, Option<f64>)> = Vec::new();
    if pm.iter().any(|s| s.hours_post_mortem <= edges[0]) {
        ranges.push((None, Some(edges[0])));
    }
    ranges.extend(edges.windows(2).map(|w| (Some(w[0]), Some(w[1]))));
    ranges.push((edges.last().copied(), None));
    for (lo, hi) in ranges {
        let values: Vec<f64> = pm
            .iter()
            .filter(|s| in_range(s.hours_post_mortem, lo, hi))
            .map(|s| s.p_live)
            .collect();
        if hi.is_none() && values.is_empty() {
            continue;
        }
        bins.push(bin(false, lo.unwrap_or(0.0), hi, values));
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n_samples: usize,
    pub per_split_accuracy: Vec<f64>,
    pub per_split_auc: Vec<f64>,
    pub mean_accuracy: f64,
    pub roc_points: Vec<RocPoint>,
    pub auc: f64,
    /// Error rates at `operating_threshold`.
    pub apcer: f64,
    pub bpcer: f64,
    pub operating_threshold: f64,
    pub zero_apcer_points: Vec<OperatingPoint>,
    /// Pooled AUC after dropping post-mortem samples below each `min_hours`.
    pub auc_min_hours: Vec<(f64, f64)>,
    pub time_bins: Vec<TimeBin>,
    #[serde(skip)]
    pub samples: Vec<ScoredSample>,
}

/// Metrics of one split at the categorical threshold.
pub fn evaluate_split(scored: &[ScoredSample]) -> Result<EvalReport> {
    let accuracy = split_accuracy(scored)?;
    let (roc_points, auc) = roc_auc(scored)?;
    let (apcer, bpcer) = apcer_bpcer(scored, DECISION_THRESHOLD)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_samples: scored.len(),
        per_split_accuracy: vec![accuracy],
        per_split_auc: vec![auc],
        mean_accuracy: accuracy,
        roc_points,
        auc,
        apcer,
        bpcer,
        operating_threshold: DECISION_THRESHOLD,
        zero_apcer_points: Vec::new(),
        auc_min_hours: Vec::new(),
        time_bins: Vec::new(),
        samples: scored.to_vec(),
    })
}

/// Mean of per-split accuracies plus ROC/AUC and error rates pooled over the
/// union of all splits' samples; per-split AUCs are kept.
pub fn aggregate_splits(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::param("no per-split reports to aggregate"));
    }
    let per_split_accuracy: Vec<f64> = reports.iter().flat_map(|r| r.per_split_accuracy.iter().copied()).collect();
    let per_split_auc: Vec<f64> = reports.iter().flat_map(|r| r.per_split_auc.iter().copied()).collect();
    let pooled: Vec<ScoredSample> = reports.iter().flat_map(|r| r.samples.iter().cloned()).collect();
    let (roc_points, auc) = roc_auc(&pooled)?;
    let (apcer, bpcer) = apcer_bpcer(&pooled, DECISION_THRESHOLD)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        n_samples: pooled.len(),
        mean_accuracy: per_split_accuracy.iter().sum::<f64>() / per_split_accuracy.len() as f64,
        per_split_accuracy,
        per_split_auc,
        roc_points,
        auc,
        apcer,
        bpcer,
        operating_threshold: DECISION_THRESHOLD,
        zero_apcer_points: Vec::new(),
        auc_min_hours: Vec::new(),
        time_bins: Vec::new(),
        samples: pooled,
    })
}

/// Full report over per-split score lists: aggregate metrics, zero-APCER
/// operating points and pooled AUC for every `min_hours`, and time bins.
pub fn evaluate(per_split: &[Vec<ScoredSample>], min_hours: &[f64], bin_edges: &[f64]) -> Result<EvalReport> {
    let reports = per_split
        .iter()
        .map(|s| evaluate_split(s))
        .collect::<Result<Vec<_>>>()?;
    let mut report = aggregate_splits(&reports)?;
    for &h in min_hours {
        report.zero_apcer_points.push(zero_apcer_operating_point(&report.samples, h)?);
        let kept: Vec<ScoredSample> = report
            .samples
            .iter()
            .filter(|s| s.true_label == Label::Live || s.hours_post_mortem >= h)
            .cloned()
            .collect();
        report.auc_min_hours.push((h, roc_auc(&kept)?.1));
    }
    report.time_bins = time_horizon_analysis(&report.samples, bin_edges);
    Ok(report)
}

pub fn write_scored(samples: &[ScoredSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(SCORED_HEADER);
    out.push('\n');
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for s in samples {
        w.write_record([
            s.split_index.to_string(),
            s.subject_id.clone(),
            s.image_path.to_string_lossy().into_owned(),
            s.true_label.to_string(),
            format!("{}", s.hours_post_mortem),
            format!("{:e}", s.p_live),
        ])
        .map_err(|e| Error::Config(e.to_string()))?;
    }
    out.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?).expect("utf8"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scored(path: impl AsRef<Path>) -> Result<Vec<ScoredSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Config(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != SCORED_HEADER {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("header must be `{SCORED_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Validation {
            row: i + 1,
            field: "<row>".into(),
            reason: e.to_string(),
        })?;
        let field = |k: usize, name: &str| -> Result<String> {
            row.get(k).map(str::to_string).ok_or_else(|| Error::Validation {
                row: i + 1,
                field: name.into(),
                reason: "missing".into(),
            })
        };
        let num = |k: usize, name: &str| -> Result<f64> {
            field(k, name)?.parse::<f64>().map_err(|e| Error::Validation {
                row: i + 1,
                field: name.into(),
                reason: e.to_string(),
            })
        };
        let p_live = num(5, "p_live")?;
        if !(0.0..=1.0).contains(&p_live) {
            return Err(Error::Validation {
                row: i + 1,
                field: "p_live".into(),
                reason: format!("{p_live} outside [0, 1]"),
            });
        }
        out.push(ScoredSample {
            split_index: num(0, "split_index")? as usize,
            subject_id: field(1, "subject_id")?,
            image_path: PathBuf::from(field(2, "image_path")?),
            true_label: field(3, "true_label")?.parse().map_err(|e: String| Error::Validation {
                row: i + 1,
                field: "true_label".into(),
                reason: e,
            })?,
            hours_post_mortem: num(4, "hours_post_mortem")?,
            p_live,
        });
    }
    Ok(out)
}
