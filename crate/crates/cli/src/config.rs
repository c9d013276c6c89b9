//! Run configuration: TOML file values, overridden by command-line flags.

use std::path::{Path, PathBuf};

use irispad::model::{ModelConfig, TrainingConfig};
use serde::{Deserialize, Serialize};

/// Post-mortem horizons (hours) evaluated by default: all samples, samples
/// past the first acquisition session, samples at least 16 hours old.
pub const DEFAULT_MIN_HOURS: [f64; 3] = [0.0, 6.0, 16.0];
pub const DEFAULT_SPLITS: usize = 20;
pub const DEFAULT_TEST_SUBJECTS: usize = 3;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub splits: Option<usize>,
    pub test_subjects: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub batch: Option<usize>,
    pub min_hours: Option<Vec<f64>>,
    pub bin_edges: Option<Vec<f64>>,
    pub layer: Option<String>,
    pub workers: Option<usize>,
    pub model: ModelSection,
    pub explain: ExplainSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: Option<usize>,
    pub width_divisor: Option<usize>,
    pub fc_width: Option<usize>,
    pub dropout: Option<f64>,
    /// `random`, or a path to torchvision-layout safetensors weights.
    pub backbone: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub samples: Option<usize>,
    pub sample_ids: Option<Vec<String>>,
    pub class: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

/// Fully resolved settings, recorded verbatim in every run record.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub manifest_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub n_splits: usize,
    pub n_test_subjects: usize,
    pub training: TrainingConfig,
    pub model: ModelConfig,
    pub backbone: String,
    pub min_hours: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub layer: String,
    pub workers: usize,
    pub explain_samples: usize,
    pub explain_sample_ids: Vec<String>,
    pub explain_class: String,
    pub rng_seed: u64,
}

/// Flags shared by the pipeline subcommands; every one overrides the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonFlags {
    /// TOML configuration file; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub splits: Option<usize>,
    #[arg(long = "test-subjects")]
    pub test_subjects: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Post-mortem horizon for zero-APCER operating points; repeatable.
    #[arg(long = "min-hours")]
    pub min_hours: Vec<f64>,
    /// Edges of the time-since-death bins; repeatable.
    #[arg(long = "bin-edge")]
    pub bin_edges: Vec<f64>,
    /// Convolutional layer explained by Grad-CAM.
    #[arg(long)]
    pub layer: Option<String>,
    /// Upper bound on splits trained concurrently.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long = "input-size")]
    pub input_size: Option<usize>,
    #[arg(long = "width-divisor")]
    pub width_divisor: Option<usize>,
    #[arg(long = "fc-width")]
    pub fc_width: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// `random` or a safetensors file with VGG-16 backbone weights.
    #[arg(long)]
    pub backbone: Option<String>,
}

impl CommonFlags {
    pub fn resolve(&self) -> Result<RunConfig, String> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let seed = self.seed.or(file.seed).unwrap_or(0);
        let defaults = TrainingConfig::default();
        let training = TrainingConfig {
            learning_rate: self.lr.or(file.lr).unwrap_or(defaults.learning_rate),
            momentum: self.momentum.or(file.momentum).unwrap_or(defaults.momentum),
            batch_size: self.batch.or(file.batch).unwrap_or(defaults.batch_size),
            epochs: self.epochs.or(file.epochs).unwrap_or(defaults.epochs),
            rng_seed: seed,
        };
        let base = ModelConfig::default();
        let model = ModelConfig {
            input_size: self.input_size.or(file.model.input_size).unwrap_or(base.input_size),
            width_divisor: self.width_divisor.or(file.model.width_divisor).unwrap_or(base.width_divisor),
            fc_width: self.fc_width.or(file.model.fc_width).unwrap_or(base.fc_width),
            dropout: self.dropout.or(file.model.dropout).unwrap_or(base.dropout),
            ..base
        };
        let pick_list = |flag: &Vec<f64>, file: Option<Vec<f64>>, default: &[f64]| {
            if !flag.is_empty() {
                flag.clone()
            } else {
                file.unwrap_or_else(|| default.to_vec())
            }
        };
        let cfg = RunConfig {
            manifest_path: self.manifest.clone().or(file.manifest),
            output_dir: self
                .out
                .clone()
                .or(file.out)
                .ok_or("an output directory is required (--out or `out` in the config)")?,
            n_splits: self.splits.or(file.splits).unwrap_or(DEFAULT_SPLITS),
            n_test_subjects: self.test_subjects.or(file.test_subjects).unwrap_or(DEFAULT_TEST_SUBJECTS),
            training,
            layer: self
                .layer
                .clone()
                .or(file.layer)
                .unwrap_or_else(|| model.default_cam_layer().to_string()),
            model,
            backbone: self.backbone.clone().or(file.model.backbone).unwrap_or_else(|| "random".into()),
            min_hours: pick_list(&self.min_hours, file.min_hours, &DEFAULT_MIN_HOURS),
            bin_edges: pick_list(&self.bin_edges, file.bin_edges, &[]),
            workers: self.workers.or(file.workers).unwrap_or(1).max(1),
            explain_samples: file.explain.samples.unwrap_or(4),
            explain_sample_ids: file.explain.sample_ids.unwrap_or_default(),
            explain_class: file.explain.class.unwrap_or_else(|| "post_mortem".into()),
            rng_seed: seed,
        };
        cfg.training.validate().map_err(|e| e.to_string())?;
        cfg.model.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn manifest(cfg: &RunConfig) -> Result<&Path, String> {
        cfg.manifest_path
            .as_deref()
            .ok_or_else(|| "a manifest is required (--manifest or `manifest` in the config)".to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let flags = CommonFlags {
            out: Some("o".into()),
            ..Default::default()
        };
        let c = flags.resolve().unwrap();
        assert_eq!((c.n_splits, c.n_test_subjects), (20, 3));
        assert_eq!(c.training.learning_rate, 1e-4);
        assert_eq!(c.training.momentum, 0.9);
        assert_eq!((c.training.batch_size, c.training.epochs), (16, 10));
        assert_eq!(c.layer, "conv5_3");
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "out = \"a\"\nepochs = 3\nlr = 0.5\nmin_hours = [1.0]\n[model]\ninput_size = 64\n").unwrap();
        let flags = CommonFlags {
            config: Some(p),
            epochs: Some(7),
            ..Default::default()
        };
        let c = flags.resolve().unwrap();
        assert_eq!(c.training.epochs, 7);
        assert_eq!(c.training.learning_rate, 0.5);
        assert_eq!(c.min_hours, vec![1.0]);
        assert_eq!(c.model.input_size, 64);
        assert_eq!(c.output_dir, PathBuf::from("a"));
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "out = \"a\"\nepoch = 3\n").unwrap();
        let flags = CommonFlags {
            config: Some(p),
            ..Default::default()
        };
        assert!(flags.resolve().is_err());
    }
}
