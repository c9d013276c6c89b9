use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use irispad::dataset::{self, Dataset, SplitSpec};
use irispad::eval::{self, ScoredSample};
use irispad::model::{self, BackboneInit, TrainedModel, TrainingConfig};
use irispad::preprocess::NORMALIZATION_TAG;
use irispad::quality::{self, SharpnessParams};
use irispad::synth::{self, Cue, SynthConfig};
use irispad::{explain, plot, pretrain, Label};
use serde::Serialize;
use serde_json::json;

use crate::config::{CommonFlags, RunConfig};
use crate::{CliError, CliResult};

const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Files written by one command, listed in `produced_files_<command>.json`.
struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(|e| format!("cannot create {}: {e}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path).to_path_buf();
        self.files.push(rel);
    }

    fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
        }
        std::fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        self.record(&path);
        Ok(path)
    }

    /// Writes the reproducibility record and the list of produced files.
    fn finish(mut self, command: &str, config: serde_json::Value) -> CliResult<()> {
        let record = json!({
            "command": command,
            "code_version": CODE_VERSION,
            "normalization_tag": NORMALIZATION_TAG,
            "config": config,
        });
        self.write(format!("run_record_{command}.json"), pretty(&record))?;
        self.files.sort();
        self.files.dedup();
        let list: Vec<String> = self.files.iter().map(|p| p.display().to_string()).collect();
        let path = self.path(format!("produced_files_{command}.json"));
        std::fs::write(&path, pretty(&list)).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        Ok(())
    }
}

fn pretty(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_manifest(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(format!("manifest not found: {}", path.display()).into());
    }
    Ok(dataset::load_manifest(path)?)
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// blur, boundary_fade or planted_patch.
    #[arg(long, default_value = "blur")]
    pub cue: Cue,
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    #[arg(long, default_value_t = 160)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "hours-min", default_value_t = 5.0)]
    pub hours_min: f64,
    #[arg(long = "hours-max", default_value_t = 814.0)]
    pub hours_max: f64,
    /// Acquisition time (hours) shared by all post-mortem subjects; repeatable.
    #[arg(long = "session")]
    pub sessions: Vec<f64>,
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        n_subjects_per_class: a.subjects,
        images_per_subject: a.images,
        image_size: a.size,
        cue: a.cue,
        hours_range: (a.hours_min, a.hours_max),
        sessions: a.sessions.clone(),
        rng_seed: a.seed,
    };
    let mut out = Outputs::new(&a.out)?;
    let corpus = synth::generate_with_meta(&cfg, &a.out)?;
    for r in &corpus.dataset.records {
        out.record(&r.image_path);
    }
    out.record(&corpus.manifest_path);
    out.record(&a.out.join(synth::META_FILE));
    println!(
        "wrote {} images ({} live, {} post-mortem) and {}",
        corpus.dataset.len(),
        corpus.dataset.count(Label::Live),
        corpus.dataset.count(Label::PostMortem),
        corpus.manifest_path.display()
    );
    out.finish("synth", json!({ "synth": cfg, "rng_seed": a.seed }))
}

#[derive(Debug, clap::Args)]
pub struct QualityArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Measure the cropped and masked representation instead of full frames.
    #[arg(long)]
    pub preprocessed: bool,
    /// Laplacian-of-Gaussian scale for sharpness.
    #[arg(long, default_value_t = 1.4)]
    pub sigma: f64,
}

pub fn quality(a: &QualityArgs) -> CliResult<()> {
    let ds = load_manifest(&a.manifest)?;
    let params = SharpnessParams::with_sigma(a.sigma);
    let report = quality::quality_report(&ds, a.preprocessed, &params)?;
    let mut out = Outputs::new(&a.out)?;
    out.write("quality_report.json", pretty(&report))?;
    out.write("quality_images.csv", report.images_csv())?;
    type Pick = fn(&quality::ClassQuality) -> &irispad::stats::BoxplotStats;
    let metrics: [(&str, &str, Pick); 3] = [
        ("average_intensity", "average intensity", |c| &c.average_intensity),
        ("entropy", "grayscale utilization (bits)", |c| &c.entropy),
        ("sharpness", "sharpness", |c| &c.sharpness),
    ];
    for (key, title, pick) in metrics {
        let groups: Vec<_> = report
            .per_class
            .iter()
            .map(|(label, c)| (label.to_string(), pick(c).clone()))
            .collect();
        out.write(format!("quality_{key}.svg"), plot::boxplot_svg(&groups, title, title))?;
    }
    if let Some(t) = &report.tests {
        for (name, r) in [
            ("average intensity", &t.average_intensity),
            ("entropy", &t.entropy),
            ("sharpness", &t.sharpness),
        ] {
            println!("{name}: p = {:.4e} ({:?})", r.p_value, r.method);
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    out.finish(
        "quality",
        json!({ "manifest": a.manifest, "preprocessed": a.preprocessed, "sharpness": params }),
    )
}

#[derive(Debug, clap::Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "input-size", default_value_t = 224)]
    pub input_size: usize,
    #[arg(long = "width-divisor", default_value_t = 1)]
    pub width_divisor: usize,
    #[arg(long = "fc-width", default_value_t = 4096)]
    pub fc_width: usize,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long = "images-per-family", default_value_t = 96)]
    pub images_per_family: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn pretrain(a: &PretrainArgs) -> CliResult<()> {
    let cfg = model::ModelConfig::reduced(a.input_size, a.width_divisor, a.fc_width);
    let proxy = pretrain::ProxyConfig {
        images_per_family: a.images_per_family,
        epochs: a.epochs,
        learning_rate: a.lr,
        rng_seed: a.seed,
        ..Default::default()
    };
    let mut out = Outputs::new(&a.out)?;
    let mut log = String::from("epoch,mean_loss,train_accuracy\n");
    let network = pretrain::pretrain_backbone::<f32>(&cfg, &proxy, |e| {
        eprintln!("proxy epoch {}", e.log_line());
        log.push_str(&e.log_line());
        log.push('\n');
    })?;
    let path = out.path("proxy_backbone.safetensors");
    model::save_backbone_safetensors(&network, &path)?;
    out.record(&path);
    out.write("proxy_log.csv", log)?;
    println!("wrote {}", path.display());
    out.finish("pretrain", json!({ "model": cfg, "proxy": proxy }))
}

fn backbone_init(spec: &str) -> BackboneInit {
    if spec == "random" {
        BackboneInit::Random
    } else {
        BackboneInit::Pretrained(PathBuf::from(spec))
    }
}

fn split_name(split: &SplitSpec) -> String {
    format!("split_{:02}", split.split_index)
}

struct SplitOutcome {
    accuracy: f64,
    files: Vec<PathBuf>,
}

fn train_split(cfg: &RunConfig, ds: &Dataset, split: &SplitSpec, root: &Path) -> CliResult<SplitOutcome> {
    let (train_ds, test_ds) = dataset::materialize_split(ds, split)?;
    let init = backbone_init(&cfg.backbone);
    let model: TrainedModel<f32> = model::build_model(&cfg.model, &init, split.rng_seed)?;
    let tc = TrainingConfig {
        rng_seed: split.rng_seed,
        ..cfg.training.clone()
    };
    let mut log = String::from("epoch,mean_loss,train_accuracy\n");
    let model = model::train(model, &train_ds, &tc, |e| {
        log.push_str(&e.log_line());
        log.push('\n');
    })?;
    let name = split_name(split);
    let model_path = root.join("models").join(format!("{name}.irispad"));
    model::save_model(&model, &model_path)?;
    let scores = model::predict_dataset(&model, &test_ds)?;
    let scored: Vec<ScoredSample> = test_ds
        .records
        .iter()
        .zip(&scores)
        .map(|(r, s)| ScoredSample {
            p_live: s.p_live,
            true_label: r.label,
            hours_post_mortem: r.hours_post_mortem,
            subject_id: r.subject_id.clone(),
            split_index: split.split_index,
            image_path: r.image_path.clone(),
        })
        .collect();
    let scores_path = root.join("scores").join(format!("{name}.csv"));
    eval::write_scored(&scored, &scores_path)?;
    let log_path = root.join("logs").join(format!("{name}.csv"));
    std::fs::create_dir_all(log_path.parent().expect("parent")).map_err(|e| e.to_string())?;
    std::fs::write(&log_path, log).map_err(|e| format!("cannot write {}: {e}", log_path.display()))?;
    Ok(SplitOutcome {
        accuracy: eval::split_accuracy(&scored)?,
        files: vec![model_path, scores_path, log_path],
    })
}

pub fn train(flags: &CommonFlags) -> CliResult<()> {
    let cfg = flags.resolve()?;
    let ds = load_manifest(CommonFlags::manifest(&cfg)?)?;
    let splits = dataset::make_splits(&ds, cfg.n_splits, cfg.n_test_subjects, cfg.rng_seed)?;
    if let Some(bad) = splits.iter().find(|s| !s.is_subject_disjoint()) {
        return Err(irispad::Error::Consistency(format!("split {} is not subject-disjoint", bad.split_index)).into());
    }
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.write("splits.jsonl", dataset::splits_to_jsonl(&splits))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, CliResult<SplitOutcome>>> = Mutex::new(BTreeMap::new());
    let workers = cfg.workers.min(splits.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(split) = splits.get(i) else { break };
                let r = train_split(&cfg, &ds, split, &cfg.output_dir);
                if let Ok(o) = &r {
                    eprintln!("{}: test accuracy {:.4}", split_name(split), o.accuracy);
                }
                results.lock().expect("lock").insert(i, r);
            });
        }
    });
    let mut accuracies = Vec::new();
    for (_, r) in results.into_inner().expect("lock") {
        let o = r?;
        accuracies.push(o.accuracy);
        for f in &o.files {
            out.record(f);
        }
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    println!("trained {} splits; mean test accuracy {mean:.4}", accuracies.len());
    out.finish("train", serde_json::to_value(&cfg).expect("serializable"))
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Directory of scored-sample files (default: <out>/scores).
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

fn read_all_scores(dir: &Path) -> CliResult<Vec<ScoredSample>> {
    let mut files: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let mut all = Vec::new();
    for f in &files {
        all.extend(eval::read_scored(f)?);
    }
    if all.is_empty() {
        return Err(format!("no scored samples found in {} (run `irispad train` first)", dir.display()).into());
    }
    Ok(all)
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let cfg = a.common.resolve()?;
    let scores_dir = a.scores.clone().unwrap_or_else(|| cfg.output_dir.join("scores"));
    let all = read_all_scores(&scores_dir)?;
    let mut by_split: BTreeMap<usize, Vec<ScoredSample>> = BTreeMap::new();
    for s in all {
        by_split.entry(s.split_index).or_default().push(s);
    }
    let per_split: Vec<Vec<ScoredSample>> = by_split.into_values().collect();
    let pooled: Vec<&ScoredSample> = per_split.iter().flatten().collect();
    let (min_hours, skipped): (Vec<f64>, Vec<f64>) = cfg.min_hours.iter().partition(|&&h| {
        pooled
            .iter()
            .any(|s| s.true_label == Label::PostMortem && s.hours_post_mortem >= h)
    });
    for h in skipped {
        eprintln!("warning: no post-mortem samples at >= {h} hours; horizon skipped");
    }
    let report = eval::evaluate(&per_split, &min_hours, &cfg.bin_edges)?;

    let mut out = Outputs::new(&cfg.output_dir)?;
    out.write("eval_report.json", pretty(&report))?;
    let mut curves = vec![(format!("pooled (AUC {:.4})", report.auc), report.roc_points.clone())];
    for &(h, auc) in &report.auc_min_hours {
        if h > 0.0 {
            let kept: Vec<ScoredSample> = pooled
                .iter()
                .filter(|s| s.true_label == Label::Live || s.hours_post_mortem >= h)
                .map(|s| (*s).clone())
                .collect();
            curves.push((format!(">= {h} h (AUC {auc:.4})"), eval::roc_auc(&kept)?.0));
        }
    }
    out.write("roc.svg", plot::roc_svg(&curves, "ROC, live as positive class"))?;
    out.write(
        "accuracy.svg",
        plot::accuracy_bars_svg(&report.per_split_accuracy, "test accuracy per split"),
    )?;
    out.write(
        "time_horizon.svg",
        plot::time_horizon_svg(&report.time_bins, "liveness score against time since death"),
    )?;
    println!(
        "splits {}  mean accuracy {:.4}  pooled AUC {:.4}  APCER {:.4}  BPCER {:.4}",
        report.per_split_accuracy.len(),
        report.mean_accuracy,
        report.auc,
        report.apcer,
        report.bpcer
    );
    for op in &report.zero_apcer_points {
        println!(
            ">= {} h: APCER 0 at threshold {:.6}, BPCER {:.4}",
            op.min_hours, op.threshold, op.bpcer
        );
    }
    out.finish(
        "evaluate",
        json!({ "scores_dir": scores_dir, "min_hours": min_hours, "bin_edges": cfg.bin_edges }),
    )
}

#[derive(Debug, clap::Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Model artifact written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Class whose score is explained (live or post_mortem).
    #[arg(long)]
    pub class: Option<Label>,
    /// Sample to explain (file stem of its image); repeatable.
    #[arg(long = "sample-id")]
    pub sample_ids: Vec<String>,
    /// Number of samples to explain when no ids are given, alternating classes.
    #[arg(long)]
    pub samples: Option<usize>,
}

pub fn explain(a: &ExplainArgs) -> CliResult<()> {
    let cfg = a.common.resolve()?;
    let ds = load_manifest(CommonFlags::manifest(&cfg)?)?;
    if !a.model.exists() {
        return Err(format!("model not found: {}", a.model.display()).into());
    }
    let model: TrainedModel<f32> = model::load_model(&a.model)?;
    let target = match a.class {
        Some(c) => c,
        None => cfg.explain_class.parse::<Label>().map_err(CliError::from)?,
    };
    let ids = if a.sample_ids.is_empty() {
        cfg.explain_sample_ids.clone()
    } else {
        a.sample_ids.clone()
    };
    let chosen: Vec<&dataset::SampleRecord> = if ids.is_empty() {
        let n = a.samples.unwrap_or(cfg.explain_samples);
        let mut pm = ds.records.iter().filter(|r| r.label == Label::PostMortem);
        let mut live = ds.records.iter().filter(|r| r.label == Label::Live);
        let mut picked = Vec::new();
        while picked.len() < n {
            let before = picked.len();
            picked.extend(pm.next());
            if picked.len() < n {
                picked.extend(live.next());
            }
            if picked.len() == before {
                break;
            }
        }
        picked
    } else {
        ids.iter()
            .map(|id| {
                ds.records
                    .iter()
                    .find(|r| &r.sample_id() == id)
                    .ok_or_else(|| CliError::from(format!("sample `{id}` not in manifest")))
            })
            .collect::<CliResult<_>>()?
    };
    let mut out = Outputs::new(&cfg.output_dir)?;
    let mut index = Vec::new();
    for r in chosen {
        let img = irispad::Image::load(&r.image_path)?;
        let e = explain::explain_sample(&model, &img, &r.annotation, target, &cfg.layer)?;
        let score = model::predict(&model, &img, &r.annotation)?;
        let paths = explain::write_explanation(&e, &cfg.output_dir, &r.sample_id())?;
        for p in &paths {
            out.record(p);
        }
        index.push(json!({
            "sample_id": r.sample_id(),
            "true_label": r.label,
            "p_live": score.p_live,
            "heatmap_shape": e.heatmap.values.dim(),
            "files": paths.iter().map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned())).collect::<Vec<_>>(),
        }));
    }
    out.write(
        "explain_index.json",
        pretty(&json!({ "layer": cfg.layer, "target_class": target, "samples": index })),
    )?;
    println!("explained {} samples at layer {}", index.len(), cfg.layer);
    out.finish(
        "explain",
        json!({ "model": a.model, "layer": cfg.layer, "target_class": target, "config": cfg }),
    )
}
