//! Synthetic two-class iris-like corpus with controllable liveness cues.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, Dataset, Eye, IrisAnnotation, Label, SampleRecord};
use crate::error::{Error, Result};
use crate::filter::gaussian_blur_f64;
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "synth_meta.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cue {
    /// Post-mortem frames are Gaussian-blurred.
    Blur,
    /// The iris-sclera boundary of post-mortem frames is softened.
    BoundaryFade,
    /// A bright square is planted inside the iris of post-mortem frames.
    PlantedPatch,
}

impl std::str::FromStr for Cue {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "blur" => Ok(Cue::Blur),
            "boundary_fade" => Ok(Cue::BoundaryFade),
            "planted_patch" => Ok(Cue::PlantedPatch),
            other => Err(format!("unknown cue `{other}` (blur, boundary_fade, planted_patch)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_subjects_per_class: usize,
    pub images_per_subject: usize,
    /// Side of the square frames, pixels.
    pub image_size: usize,
    pub cue: Cue,
    /// Range of hours post-mortem, sampled log-uniformly.
    pub hours_range: (f64, f64),
    /// Fixed acquisition times (hours) shared by every post-mortem subject,
    /// cycled over its images. Empty: independent draws from `hours_range`.
    #[serde(default)]
    pub sessions: Vec<f64>,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects_per_class: 8,
            images_per_subject: 10,
            image_size: 160,
            cue: Cue::Blur,
            hours_range: (5.0, 814.0),
            sessions: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects_per_class == 0 || self.images_per_subject == 0 {
            return Err(Error::Config("subject and image counts must be positive".into()));
        }
        if self.image_size < 48 {
            return Err(Error::Config(format!("image_size must be at least 48, got {}", self.image_size)));
        }
        let (lo, hi) = self.hours_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("hours_range must satisfy 0 < min <= max, got ({lo}, {hi})")));
        }
        if let Some(h) = self.sessions.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(Error::Config(format!("session times must be positive, got {h}")));
        }
        Ok(())
    }

    /// Cue strength in [0, 1]; non-decreasing in `hours`, zero for live samples.
    pub fn cue_strength(&self, hours: f64) -> f64 {
        if hours <= 0.0 {
            return 0.0;
        }
        let (lo, hi) = self.hours_range;
        if hi <= lo {
            return 1.0;
        }
        ((hours / lo).ln() / (hi / lo).ln()).clamp(0.0, 1.0)
    }
}

/// Generation record for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub image_path: PathBuf,
    pub subject_id: String,
    pub label: Label,
    pub hours_post_mortem: f64,
    pub cue: Cue,
    pub cue_strength: f64,
    /// Gaussian sigma applied to the frame (blur cue), pixels.
    pub blur_sigma: f64,
    /// Width of the iris-sclera transition, pixels.
    pub boundary_width: f64,
    /// Planted square as (x0, y0, x1, y1), image pixel coordinates, exclusive upper bounds.
    pub patch: Option<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub meta: Vec<SynthMeta>,
    pub manifest_path: PathBuf,
}

/// Live frames: natural optics only.
const LIVE_BLUR_SIGMA: f64 = 0.5;
const PM_BLUR_SIGMA: (f64, f64) = (1.1, 2.4);
const LIVE_BOUNDARY_WIDTH: f64 = 1.0;
const PM_BOUNDARY_WIDTH: (f64, f64) = (4.0, 12.0);
const SENSOR_NOISE: f64 = 2.0;
/// Per-frame illumination gain.
const GAIN_RANGE: (f64, f64) = (0.8, 1.2);
/// Planted square: side as a fraction of the iris radius, blend weight range, target level.
const PATCH_SIDE: f64 = 0.8;
const PATCH_ALPHA: (f64, f64) = (0.85, 1.0);
const PATCH_LEVEL: f64 = 250.0;

struct SubjectLook {
    iris_frac: f64,
    pupil_ratio: f64,
    iris_level: f64,
    sclera_level: f64,
    waves: Vec<(f64, f64, f64, f64)>,
    crypts: Vec<(f64, f64, f64, f64)>,
}

impl SubjectLook {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..14)
            .map(|_| {
                (
                    rng.random_range(4.0..40.0f64).round(),
                    rng.random_range(0.5..6.0),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(4.0..14.0),
                )
            })
            .collect();
        let crypts = (0..rng.random_range(10..22))
            .map(|_| {
                (
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.1..0.95),
                    rng.random_range(0.03..0.09),
                    rng.random_range(15.0..40.0),
                )
            })
            .collect();
        Self {
            iris_frac: rng.random_range(0.26..0.32),
            pupil_ratio: rng.random_range(0.3..0.45),
            iris_level: rng.random_range(80.0..120.0),
            sclera_level: rng.random_range(135.0..170.0),
            waves,
            crypts,
        }
    }

    /// Iris texture at normalized radius `u` (0 at pupil edge, 1 at boundary) and angle.
    fn texture(&self, u: f64, theta: f64) -> f64 {
        let mut v = self.iris_level;
        for &(ang_f, rad_f, phase, amp) in &self.waves {
            v += amp * (ang_f * theta + rad_f * 2.0 * PI * u + phase).sin() / (1.0 + 0.15 * rad_f);
        }
        for &(ct, cu, size, depth) in &self.crypts {
            let dt = (theta - ct + PI).rem_euclid(2.0 * PI) - PI;
            let d2 = (dt / (2.5 * size)).powi(2) + ((u - cu) / size).powi(2);
            v -= depth * (-d2).exp();
        }
        v
    }
}

fn smoothstep_edge(d: f64, width: f64) -> f64 {
    // 0 well inside, 1 well outside, linear ramp of `width` pixels centered on the edge
    ((d / width.max(1e-6)) + 0.5).clamp(0.0, 1.0)
}

fn subject_seed(base: u64, label: Label, subject: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((subject as u64) << 1 | label.class_index() as u64)
        .rotate_left(17)
        ^ 0xD1B5_4A32_D192_ED03
}

fn render(
    cfg: &SynthConfig,
    look: &SubjectLook,
    label: Label,
    hours: f64,
    rng: &mut ChaCha8Rng,
) -> (Image, IrisAnnotation, SynthMeta) {
    let s = cfg.image_size as f64;
    let strength = cfg.cue_strength(hours);
    let radius = look.iris_frac * s * rng.random_range(0.97..1.03);
    let cx = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let cy = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let pupil = radius * look.pupil_ratio * rng.random_range(0.92..1.08);
    let gain = rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1);
    let rotation = rng.random_range(-0.15..0.15);

    let is_pm = label == Label::PostMortem;
    let boundary_width = if is_pm && cfg.cue == Cue::BoundaryFade {
        PM_BOUNDARY_WIDTH.0 + (PM_BOUNDARY_WIDTH.1 - PM_BOUNDARY_WIDTH.0) * strength
    } else {
        LIVE_BOUNDARY_WIDTH
    };
    let blur_sigma = if is_pm && cfg.cue == Cue::Blur {
        PM_BLUR_SIGMA.0 + (PM_BLUR_SIGMA.1 - PM_BLUR_SIGMA.0) * strength
    } else {
        LIVE_BLUR_SIGMA
    };
    let glint = (
        cx + rng.random_range(-0.3..0.3) * pupil,
        cy + rng.random_range(-0.3..0.3) * pupil,
        rng.random_range(0.12..0.2) * pupil,
    );

    let n = cfg.image_size;
    let mut buf = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx) + rotation;
            let u = ((r - pupil) / (radius - pupil)).clamp(0.0, 1.0);
            let iris = look.texture(u, theta);
            let sclera = look.sclera_level - 12.0 * (r / (0.7 * s)).powi(2);
            let outside = smoothstep_edge(r - radius, boundary_width);
            let mut v = iris * (1.0 - outside) + sclera * outside;
            let in_pupil = 1.0 - smoothstep_edge(r - pupil, 1.0);
            v = v * (1.0 - in_pupil) + 18.0 * in_pupil;
            let (gx, gy, gr) = glint;
            if ((x as f64 + 0.5 - gx).powi(2) + (y as f64 + 0.5 - gy).powi(2)).sqrt() < gr {
                v = 250.0;
            }
            buf[y * n + x] = v * gain;
        }
    }

    let mut patch = None;
    if is_pm && cfg.cue == Cue::PlantedPatch {
        let side = PATCH_SIDE * radius;
        // Place the square fully inside the iris disc.
        let reach = radius - side * std::f64::consts::FRAC_1_SQRT_2 - 2.0;
        let (pr, pt) = (rng.random_range(0.0..reach.max(0.0)), rng.random_range(0.0..2.0 * PI));
        let (px, py) = (cx + pr * pt.cos(), cy + pr * pt.sin());
        let (x0, y0, x1, y1) = (px - side / 2.0, py - side / 2.0, px + side / 2.0, py + side / 2.0);
        let alpha = PATCH_ALPHA.0 + (PATCH_ALPHA.1 - PATCH_ALPHA.0) * strength;
        for y in (y0.floor().max(0.0) as usize)..(y1.ceil().min(s) as usize) {
            for x in (x0.floor().max(0.0) as usize)..(x1.ceil().min(s) as usize) {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if fx >= x0 && fx < x1 && fy >= y0 && fy < y1 {
                    let v = &mut buf[y * n + x];
                    *v = *v * (1.0 - alpha) + PATCH_LEVEL * alpha;
                }
            }
        }
        patch = Some([x0, y0, x1, y1]);
    }

    let mut out = gaussian_blur_f64(&buf, n, n, blur_sigma);
    let noise = Normal::new(0.0, SENSOR_NOISE).expect("finite");
    for v in &mut out {
        *v += noise.sample(rng);
    }
    let pixels = out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    let image = Image::new(n, n, pixels).expect("square frame");
    let annotation = IrisAnnotation::new(
        cx + rng.random_range(-0.5..0.5),
        cy + rng.random_range(-0.5..0.5),
        radius,
    );
    let meta = SynthMeta {
        image_path: PathBuf::new(),
        subject_id: String::new(),
        label,
        hours_post_mortem: hours,
        cue: cfg.cue,
        cue_strength: strength,
        blur_sigma,
        boundary_width,
        patch,
    };
    (image, annotation, meta)
}

/// Writes the images, `manifest.csv` and `synth_meta.jsonl` under `output_dir`.
pub fn generate(config: &SynthConfig, output_dir: impl AsRef<Path>) -> Result<Dataset> {
    generate_with_meta(config, output_dir).map(|c| c.dataset)
}

pub fn generate_with_meta(config: &SynthConfig, output_dir: impl AsRef<Path>) -> Result<SynthCorpus> {
    config.validate()?;
    let dir = output_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (lo, hi) = config.hours_range;
    let mut records = Vec::new();
    let mut metas = Vec::new();
    for label in Label::ALL {
        let prefix = match label {
            Label::Live => "live",
            Label::PostMortem => "pm",
        };
        for subject in 0..config.n_subjects_per_class {
            let subject_id = format!("{prefix}_{subject:03}");
            let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(config.rng_seed, label, subject));
            let look = SubjectLook::sample(&mut rng);
            let mut hours: Vec<f64> = (0..config.images_per_subject)
                .map(|k| match label {
                    Label::Live => 0.0,
                    Label::PostMortem if !config.sessions.is_empty() => config.sessions[k % config.sessions.len()],
                    Label::PostMortem => (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp(),
                })
                .collect();
            hours.sort_by(f64::total_cmp);
            for (k, &h) in hours.iter().enumerate() {
                let (image, annotation, mut meta) = render(config, &look, label, h, &mut rng);
                let rel = PathBuf::from("images").join(&subject_id).join(format!("{subject_id}_{k:02}.png"));
                let path = dir.join(&rel);
                image.save_png(&path)?;
                meta.image_path = rel;
                meta.subject_id = subject_id.clone();
                records.push(SampleRecord {
                    image_path: path,
                    subject_id: subject_id.clone(),
                    eye: if k % 2 == 0 { Eye::Left } else { Eye::Right },
                    label,
                    hours_post_mortem: h,
                    annotation,
                });
                metas.push(meta);
            }
        }
    }
    let dataset = Dataset::new(records, "synthetic");
    let manifest_path = dir.join(MANIFEST_FILE);
    write_manifest(&dataset, &manifest_path)?;
    let mut jsonl = String::new();
    for m in &metas {
        jsonl.push_str(&serde_json::to_string(m).expect("meta serializes"));
        jsonl.push('\n');
    }
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, jsonl).map_err(|e| Error::io(&meta_path, e))?;
    Ok(SynthCorpus {
        dataset,
        meta: metas,
        manifest_path,
    })
}

pub fn load_meta(dir: impl AsRef<Path>) -> Result<Vec<SynthMeta>> {
    let path = dir.as_ref().join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}
