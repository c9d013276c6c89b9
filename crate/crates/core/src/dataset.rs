//! Corpus manifest ingestion and subject-disjoint train/test partitioning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact header row of a manifest file.
pub const MANIFEST_HEADER: &str =
    "image_path,subject_id,eye,label,hours_post_mortem,center_x,center_y,radius_Ri";

/// Optional preamble line carrying the dataset's source tag, e.g. `# source_tag: synthetic`.
const SOURCE_TAG_PREFIX: &str = "source_tag:";

const DEFAULT_SOURCE_TAG: &str = "unspecified";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Live,
    PostMortem,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Live, Label::PostMortem];

    /// Output unit of the classifier carrying this class.
    pub fn class_index(self) -> usize {
        match self {
            Label::Live => 0,
            Label::PostMortem => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Live),
            1 => Some(Label::PostMortem),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::PostMortem => "post_mortem",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "live" => Ok(Label::Live),
            "post_mortem" => Ok(Label::PostMortem),
            other => Err(format!("expected `live` or `post_mortem`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Eye {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
    #[serde(rename = "U")]
    Unknown,
}

impl Eye {
    pub fn code(self) -> &'static str {
        match self {
            Eye::Left => "L",
            Eye::Right => "R",
            Eye::Unknown => "U",
        }
    }
}

impl FromStr for Eye {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "L" => Ok(Eye::Left),
            "R" => Ok(Eye::Right),
            "U" => Ok(Eye::Unknown),
            other => Err(format!("expected one of L, R, U, got `{other}`")),
        }
    }
}

/// Circle approximating the outer iris boundary, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrisAnnotation {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

impl IrisAnnotation {
    pub fn new(center_x: f64, center_y: f64, radius: f64) -> Self {
        Self {
            center_x,
            center_y,
            radius,
        }
    }

    /// Checks the annotation against an image of the given size.
    pub fn validate(&self, width: usize, height: usize) -> std::result::Result<(), String> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(format!("radius must be positive, got {}", self.radius));
        }
        let inside = |v: f64, extent: usize| v.is_finite() && v >= 0.0 && v <= extent as f64;
        if !inside(self.center_x, width) || !inside(self.center_y, height) {
            return Err(format!(
                "center ({}, {}) outside {}x{} image",
                self.center_x, self.center_y, width, height
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub subject_id: String,
    pub eye: Eye,
    pub label: Label,
    pub hours_post_mortem: f64,
    pub annotation: IrisAnnotation,
}

impl SampleRecord {
    /// Label/time-since-death consistency.
    pub fn check_label_hours(&self) -> std::result::Result<(), String> {
        match self.label {
            Label::Live if self.hours_post_mortem != 0.0 => Err(format!(
                "live sample must have hours_post_mortem = 0, got {}",
                self.hours_post_mortem
            )),
            Label::PostMortem if !(self.hours_post_mortem > 0.0 && self.hours_post_mortem.is_finite()) => {
                Err(format!(
                    "post-mortem sample must have hours_post_mortem > 0, got {}",
                    self.hours_post_mortem
                ))
            }
            _ => Ok(()),
        }
    }

    /// File stem used to name per-sample outputs.
    pub fn sample_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.subject_id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub source_tag: String,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, source_tag: impl Into<String>) -> Self {
        Self {
            records,
            source_tag: source_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subjects(&self, label: Label) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.subject_id.clone())
            .collect()
    }

    pub fn all_subjects(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.subject_id.clone()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    pub fn has_both_classes(&self) -> bool {
        self.count(Label::Live) > 0 && self.count(Label::PostMortem) > 0
    }

    /// Verifies that no subject carries both labels.
    pub fn check_subject_labels(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, (Label, usize)> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            match seen.get(r.subject_id.as_str()) {
                Some(&(label, _)) if label != r.label => {
                    return Err(Error::Validation {
                        row: i + 1,
                        field: "label".into(),
                        reason: format!(
                            "subject `{}` appears as both {} and {}",
                            r.subject_id, label, r.label
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    seen.insert(&r.subject_id, (r.label, i));
                }
            }
        }
        Ok(())
    }
}

fn row_error(row: usize, field: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        row,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn parse_field<T: FromStr>(row: usize, field: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.trim()
        .parse::<T>()
        .map_err(|e| row_error(row, field, format!("cannot parse `{raw}`: {e}")))
}

/// Loads and validates a manifest. Relative image paths resolve against the
/// manifest's directory. Row numbers in errors count data rows from 1.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut source_tag = DEFAULT_SOURCE_TAG.to_string();
    let mut body = String::new();
    let mut header_seen = false;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !header_seen {
            let trimmed = line.trim();
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix(SOURCE_TAG_PREFIX) {
                    source_tag = tag.trim().to_string();
                }
                continue;
            }
            if trimmed.is_empty() {
                continue;
            }
            if trimmed.trim_start_matches('\u{feff}') != MANIFEST_HEADER {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    reason: format!("header must be exactly `{MANIFEST_HEADER}`, got `{trimmed}`"),
                });
            }
            header_seen = true;
        }
        body.push_str(&line);
        body.push('\n');
    }
    if !header_seen {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "missing header row".into(),
        });
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(body.as_bytes());
    let mut records = Vec::new();
    let mut seen_paths: HashSet<PathBuf> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| row_error(row_no, "<row>", e.to_string()))?;
        if row.len() != 8 {
            return Err(row_error(
                row_no,
                "<row>",
                format!("expected 8 fields, found {}", row.len()),
            ));
        }
        let raw_path = row[0].trim();
        if raw_path.is_empty() {
            return Err(row_error(row_no, "image_path", "empty path"));
        }
        let subject_id = row[1].trim().to_string();
        if subject_id.is_empty() {
            return Err(row_error(row_no, "subject_id", "empty subject id"));
        }
        let eye: Eye = parse_field(row_no, "eye", &row[2])?;
        let label: Label = parse_field(row_no, "label", &row[3])?;
        let hours: f64 = parse_field(row_no, "hours_post_mortem", &row[4])?;
        let cx: f64 = parse_field(row_no, "center_x", &row[5])?;
        let cy: f64 = parse_field(row_no, "center_y", &row[6])?;
        let radius: f64 = parse_field(row_no, "radius_Ri", &row[7])?;

        let image_path = base.join(raw_path);
        if !seen_paths.insert(image_path.clone()) {
            return Err(row_error(
                row_no,
                "image_path",
                format!("duplicate image path `{raw_path}`"),
            ));
        }
        let record = SampleRecord {
            image_path,
            subject_id,
            eye,
            label,
            hours_post_mortem: hours,
            annotation: IrisAnnotation::new(cx, cy, radius),
        };
        record
            .check_label_hours()
            .map_err(|r| row_error(row_no, "hours_post_mortem", r))?;
        if !(radius.is_finite() && radius > 0.0) {
            return Err(row_error(row_no, "radius_Ri", "radius must be positive"));
        }
        let (w, h) = probe_grayscale(&record.image_path)
            .map_err(|r| row_error(row_no, "image_path", r))?;
        record
            .annotation
            .validate(w, h)
            .map_err(|r| row_error(row_no, "center_x", r))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "manifest has no data rows".into(),
        });
    }
    let dataset = Dataset::new(records, source_tag);
    dataset.check_subject_labels()?;
    Ok(dataset)
}

/// Reads the image header; returns its size when it is a single-channel raster.
fn probe_grayscale(path: &Path) -> std::result::Result<(usize, usize), String> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| format!("cannot open `{}`: {e}", path.display()))?
        .with_guessed_format()
        .map_err(|e| format!("cannot read `{}`: {e}", path.display()))?;
    let decoder = reader
        .into_decoder()
        .map_err(|e| format!("cannot decode `{}`: {e}", path.display()))?;
    use image::ImageDecoder;
    let (w, h) = decoder.dimensions();
    if decoder.color_type().channel_count() != 1 {
        return Err(format!(
            "`{}` is not single-channel ({:?})",
            path.display(),
            decoder.color_type()
        ));
    }
    Ok((w as usize, h as usize))
}

/// Writes a manifest. Image paths are written relative to `base` when possible.
pub fn write_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    writeln!(out, "# {SOURCE_TAG_PREFIX} {}", dataset.source_tag).expect("in-memory write");
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
        w.write_record(MANIFEST_HEADER.split(','))
            .map_err(|e| Error::Config(e.to_string()))?;
        for r in &dataset.records {
            let rel = r.image_path.strip_prefix(&base).unwrap_or(&r.image_path);
            w.write_record([
                rel.to_string_lossy().as_ref(),
                &r.subject_id,
                r.eye.code(),
                r.label.as_str(),
                &format_number(r.hours_post_mortem),
                &format_number(r.annotation.center_x),
                &format_number(r.annotation.center_y),
                &format_number(r.annotation.radius),
            ])
            .map_err(|e| Error::Config(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// One subject-disjoint train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split_index: usize,
    pub test_subjects_live: BTreeSet<String>,
    pub test_subjects_pm: BTreeSet<String>,
    pub train_subjects_live: BTreeSet<String>,
    pub train_subjects_pm: BTreeSet<String>,
    pub rng_seed: u64,
}

impl SplitSpec {
    pub fn test_subjects(&self) -> BTreeSet<String> {
        self.test_subjects_live
            .union(&self.test_subjects_pm)
            .cloned()
            .collect()
    }

    pub fn train_subjects(&self) -> BTreeSet<String> {
        self.train_subjects_live
            .union(&self.train_subjects_pm)
            .cloned()
            .collect()
    }

    pub fn is_subject_disjoint(&self) -> bool {
        self.test_subjects().is_disjoint(&self.train_subjects())
    }
}

fn split_seed(base: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (base, index)
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `n_splits` independent subject-disjoint partitions. Each split samples
/// `n_test_subjects_per_class` test subjects per class uniformly without
/// replacement inside the split; draws are independent across splits.
pub fn make_splits(
    dataset: &Dataset,
    n_splits: usize,
    n_test_subjects_per_class: usize,
    rng_seed: u64,
) -> Result<Vec<SplitSpec>> {
    if n_splits == 0 {
        return Err(Error::Config("n_splits must be at least 1".into()));
    }
    if n_test_subjects_per_class == 0 {
        return Err(Error::Config(
            "n_test_subjects_per_class must be at least 1".into(),
        ));
    }
    let live: Vec<String> = dataset.subjects(Label::Live).into_iter().collect();
    let pm: Vec<String> = dataset.subjects(Label::PostMortem).into_iter().collect();
    for (label, pool) in [(Label::Live, &live), (Label::PostMortem, &pm)] {
        if pool.len() <= n_test_subjects_per_class {
            return Err(Error::Config(format!(
                "class {label} has {} subjects; need more than {n_test_subjects_per_class} \
                 so that the train side is non-empty",
                pool.len()
            )));
        }
    }

    let draw = |pool: &[String], rng: &mut ChaCha8Rng| -> (BTreeSet<String>, BTreeSet<String>) {
        let test: BTreeSet<String> = pool
            .choose_multiple(rng, n_test_subjects_per_class)
            .cloned()
            .collect();
        let train = pool.iter().filter(|s| !test.contains(*s)).cloned().collect();
        (test, train)
    };

    Ok((1..=n_splits)
        .map(|split_index| {
            let seed = split_seed(rng_seed, split_index);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (test_live, train_live) = draw(&live, &mut rng);
            let (test_pm, train_pm) = draw(&pm, &mut rng);
            SplitSpec {
                split_index,
                test_subjects_live: test_live,
                test_subjects_pm: test_pm,
                train_subjects_live: train_live,
                train_subjects_pm: train_pm,
                rng_seed: seed,
            }
        })
        .collect())
}

/// Partitions records by subject membership.
pub fn materialize_split(dataset: &Dataset, split: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let present = dataset.all_subjects();
    let test = split.test_subjects();
    let train = split.train_subjects();
    if let Some(s) = test.intersection(&train).next() {
        return Err(Error::Consistency(format!(
            "split {} places subject `{s}` on both sides",
            split.split_index
        )));
    }
    if let Some(s) = test.union(&train).find(|s| !present.contains(*s)) {
        return Err(Error::Consistency(format!(
            "split {} references unknown subject `{s}`",
            split.split_index
        )));
    }
    let mut train_records = Vec::new();
    let mut test_records = Vec::new();
    for r in &dataset.records {
        if test.contains(&r.subject_id) {
            test_records.push(r.clone());
        } else if train.contains(&r.subject_id) {
            train_records.push(r.clone());
        } else {
            return Err(Error::Consistency(format!(
                "subject `{}` is assigned to neither side of split {}",
                r.subject_id, split.split_index
            )));
        }
    }
    Ok((
        Dataset::new(train_records, dataset.source_tag.clone()),
        Dataset::new(test_records, dataset.source_tag.clone()),
    ))
}

/// Serializes splits as JSON lines, one document per split.
pub fn splits_to_jsonl(splits: &[SplitSpec]) -> String {
    let mut out = String::new();
    for s in splits {
        out.push_str(&serde_json::to_string(s).expect("split serializes"));
        out.push('\n');
    }
    out
}

pub fn splits_from_jsonl(text: &str) -> Result<Vec<SplitSpec>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("split line {}: {e}", i + 1)))
        })
        .collect()
}
