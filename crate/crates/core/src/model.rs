//! VGG-16-topology live/post-mortem classifier: construction, fine-tuning,
//! scoring and the single-file model artifact.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, IrisAnnotation, Label};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, BackwardOptions, Conv3x3, Dense, Gradients, Layer, LayerKind, Mode, Network, Sgd};
use crate::preprocess::{self, NetworkInput, DEFAULT_INPUT_SIZE, DEFAULT_MARGIN_FACTOR, NORMALIZATION_TAG};
use crate::scalar::Scalar;

/// Convolution blocks of VGG-16: (output channels, convolutions per block).
pub const VGG16_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
pub const VGG16_FC_WIDTH: usize = 4096;
pub const NUM_CLASSES: usize = 2;
/// Standard deviation of the freshly initialized classification layer.
pub const TAIL_INIT_STD: f64 = 0.01;

const ARTIFACT_MAGIC: &[u8; 8] = b"IRISPAD\0";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Vgg16Imagenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub num_classes: usize,
    /// Spatial side of the square network input; a multiple of 32.
    pub input_size: usize,
    /// Divides every convolution width of the backbone (1 = full VGG-16).
    pub width_divisor: usize,
    /// Width of the two hidden fully connected layers.
    pub fc_width: usize,
    pub dropout: f64,
    pub margin_factor: f64,
    pub replaced_tail: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Vgg16Imagenet,
            num_classes: NUM_CLASSES,
            input_size: DEFAULT_INPUT_SIZE,
            width_divisor: 1,
            fc_width: VGG16_FC_WIDTH,
            dropout: 0.5,
            margin_factor: DEFAULT_MARGIN_FACTOR,
            replaced_tail: "fc8 (fc_width -> 2, N(0, 0.01) weights, zero bias) + softmax + classification output"
                .into(),
        }
    }
}

impl ModelConfig {
    /// Same topology at reduced width and resolution.
    pub fn reduced(input_size: usize, width_divisor: usize, fc_width: usize) -> Self {
        Self {
            input_size,
            width_divisor,
            fc_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.width_divisor == 0 || 64 % self.width_divisor != 0 {
            return Err(Error::Config(format!(
                "width_divisor must divide 64, got {}",
                self.width_divisor
            )));
        }
        if self.fc_width == 0 {
            return Err(Error::Config("fc_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.margin_factor >= 1.0) {
            return Err(Error::Config(format!("margin_factor must be >= 1, got {}", self.margin_factor)));
        }
        Ok(())
    }

    fn conv_widths(&self) -> Vec<(usize, usize)> {
        VGG16_BLOCKS
            .iter()
            .map(|&(c, n)| (c / self.width_divisor, n))
            .collect()
    }

    /// Name of the deepest convolution before the final pooling stage.
    pub fn default_cam_layer(&self) -> &'static str {
        "conv5_3"
    }
}

/// Source of the backbone (convolutional and first two dense layers) weights.
#[derive(Debug, Clone, PartialEq)]
pub enum BackboneInit {
    /// torchvision-layout VGG weights in a safetensors file: ImageNet VGG-16
    /// for the full model, or a proxy-pretrained backbone of matching shape.
    Pretrained(PathBuf),
    /// He-normal initialization (no pretrained weights).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            batch_size: 16,
            epochs: 10,
            rng_seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

impl EpochStats {
    /// `epoch,mean_loss,train_accuracy`
    pub fn log_line(&self) -> String {
        format!("{},{:.6},{:.4}", self.epoch, self.mean_loss, self.train_accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LivenessScore {
    pub p_live: f64,
    pub p_post_mortem: f64,
    pub predicted_label: Label,
}

impl LivenessScore {
    /// From a two-class probability row; ties go to post-mortem.
    pub fn from_probabilities(p_live: f64, p_post_mortem: f64) -> Self {
        Self {
            p_live,
            p_post_mortem,
            predicted_label: if p_live > p_post_mortem {
                Label::Live
            } else {
                Label::PostMortem
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub network: Network<T>,
    pub config: ModelConfig,
    pub training_config: Option<TrainingConfig>,
    pub history: Vec<EpochStats>,
    pub backbone_source: String,
    pub normalization_tag: String,
}

pub(crate) fn vgg_network<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Network<T> {
    let mut layers = Vec::new();
    let mut in_ch = 3;
    for (b, (width, n)) in config.conv_widths().into_iter().enumerate() {
        for k in 0..n {
            layers.push(Layer {
                name: format!("conv{}_{}", b + 1, k + 1),
                kind: LayerKind::Conv(Conv3x3 {
                    in_channels: in_ch,
                    out_channels: width,
                    weight: nn::he_normal(width, in_ch * 9, rng),
                    bias: Array1::zeros(width),
                    relu: true,
                }),
            });
            in_ch = width;
        }
        layers.push(Layer {
            name: format!("pool{}", b + 1),
            kind: LayerKind::MaxPool,
        });
    }
    let spatial = config.input_size / 32;
    let flat = in_ch * spatial * spatial;
    layers.push(Layer {
        name: "flatten".into(),
        kind: LayerKind::Flatten,
    });
    let mut fan_in = flat;
    for (name, drop) in [("fc6", "drop6"), ("fc7", "drop7")] {
        layers.push(Layer {
            name: name.into(),
            kind: LayerKind::Dense(Dense {
                weight: nn::he_normal(config.fc_width, fan_in, rng),
                bias: Array1::zeros(config.fc_width),
                relu: true,
            }),
        });
        layers.push(Layer {
            name: drop.into(),
            kind: LayerKind::Dropout { rate: config.dropout },
        });
        fan_in = config.fc_width;
    }
    layers.push(Layer {
        name: "fc8".into(),
        kind: LayerKind::Dense(Dense {
            weight: nn::gaussian((config.num_classes, fan_in), TAIL_INIT_STD, rng),
            bias: Array1::zeros(config.num_classes),
            relu: false,
        }),
    });
    Network { layers }
}

/// torchvision `vgg16().features` / `.classifier` parameter prefixes, in layer order.
const TORCHVISION_KEYS: [(&str, &str); 15] = [
    ("conv1_1", "features.0"),
    ("conv1_2", "features.2"),
    ("conv2_1", "features.5"),
    ("conv2_2", "features.7"),
    ("conv3_1", "features.10"),
    ("conv3_2", "features.12"),
    ("conv3_3", "features.14"),
    ("conv4_1", "features.17"),
    ("conv4_2", "features.19"),
    ("conv4_3", "features.21"),
    ("conv5_1", "features.24"),
    ("conv5_2", "features.26"),
    ("conv5_3", "features.28"),
    ("fc6", "classifier.0"),
    ("fc7", "classifier.3"),
];

const PRETRAINED_REMEDIATION: &str = "export torchvision's ImageNet VGG-16 weights once with network access: \
python -c \"import torchvision, safetensors.torch as st; \
m = torchvision.models.vgg16(weights='IMAGENET1K_V1'); \
st.save_file({k: v.contiguous() for k, v in m.state_dict().items()}, 'vgg16_imagenet.safetensors')\" \
and pass the file path; or build with a random backbone for desk-scale experiments";

fn load_pretrained<T: Scalar>(net: &mut Network<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Environment {
        message: format!("pretrained VGG-16 weights unavailable at {}: {e}", path.display()),
        remediation: PRETRAINED_REMEDIATION.into(),
    })?;
    let tensors = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    let read = |key: &str, expected: usize| -> Result<Vec<T>> {
        let view = tensors
            .tensor(key)
            .map_err(|e| Error::Integrity(format!("{}: tensor `{key}`: {e}", path.display())))?;
        let data: Vec<f64> = match view.dtype() {
            safetensors::Dtype::F32 => f32::from_le_slice(view.data()).into_iter().map(f64::from).collect(),
            safetensors::Dtype::F64 => f64::from_le_slice(view.data()),
            other => {
                return Err(Error::Integrity(format!(
                    "tensor `{key}` has unsupported dtype {other:?}"
                )))
            }
        };
        if data.len() != expected {
            return Err(Error::Integrity(format!(
                "tensor `{key}` has {} values, expected {expected} for this width_divisor/fc_width/input_size",
                data.len()
            )));
        }
        Ok(data.into_iter().map(T::of).collect())
    };
    for (name, prefix) in TORCHVISION_KEYS {
        let idx = net.layer_index(name).expect("VGG layer");
        let (w, b) = net.layers[idx].params_mut().expect("parametric layer");
        let wv = read(&format!("{prefix}.weight"), w.len())?;
        let bv = read(&format!("{prefix}.bias"), b.len())?;
        *w = Array2::from_shape_vec(w.raw_dim(), wv).expect("length checked");
        *b = Array1::from_vec(bv);
    }
    Ok(())
}

/// Writes the backbone layers (conv1_1 .. fc7) in torchvision's VGG-16 key
/// layout as little-endian f32, loadable through [`BackboneInit::Pretrained`].
pub fn save_backbone_safetensors<T: Scalar>(network: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut blobs = Vec::new();
    for (name, prefix) in TORCHVISION_KEYS {
        let idx = network
            .layer_index(name)
            .ok_or_else(|| Error::Consistency(format!("network has no layer `{name}`")))?;
        let (w, b) = network.layers[idx].params().expect("parametric layer");
        let f32_bytes = |values: &mut dyn Iterator<Item = f64>| {
            values.flat_map(|v| (v as f32).to_le_bytes()).collect::<Vec<u8>>()
        };
        blobs.push((
            format!("{prefix}.weight"),
            vec![w.nrows(), w.ncols()],
            f32_bytes(&mut w.iter().map(|v| v.as_f64())),
        ));
        blobs.push((format!("{prefix}.bias"), vec![b.len()], f32_bytes(&mut b.iter().map(|v| v.as_f64()))));
    }
    let views = blobs
        .iter()
        .map(|(k, shape, data)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), data)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Integrity(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    safetensors::serialize_to_file(views, &None, path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Builds the classifier: VGG-16 topology with pretrained (or randomly
/// initialized) backbone and a fresh two-class tail seeded by `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, init: &BackboneInit, seed: u64) -> Result<TrainedModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone_source = match init {
        BackboneInit::Pretrained(path) => {
            if !path.exists() {
                return Err(Error::Environment {
                    message: format!("pretrained VGG-16 weights not found at {}", path.display()),
                    remediation: PRETRAINED_REMEDIATION.into(),
                });
            }
            format!("pretrained:{}", path.display())
        }
        BackboneInit::Random => "random:he-normal".to_string(),
    };
    let mut network = vgg_network(config, &mut rng);
    if let BackboneInit::Pretrained(path) = init {
        load_pretrained(&mut network, path)?;
    }
    Ok(TrainedModel {
        network,
        config: config.clone(),
        training_config: None,
        history: Vec::new(),
        backbone_source,
        normalization_tag: NORMALIZATION_TAG.to_string(),
    })
}

/// Preprocessed training/evaluation examples.
#[derive(Debug, Clone)]
pub struct TensorSet<T> {
    pub inputs: Vec<Array3<T>>,
    pub labels: Vec<Label>,
}

impl<T: Scalar> TensorSet<T> {
    pub fn from_dataset(dataset: &Dataset, config: &ModelConfig) -> Result<Self> {
        let mut inputs = Vec::with_capacity(dataset.len());
        let mut labels = Vec::with_capacity(dataset.len());
        for r in &dataset.records {
            let img = Image::load(&r.image_path)?;
            let input: NetworkInput<T> =
                preprocess::preprocess(&img, &r.annotation, config.margin_factor, config.input_size)?;
            inputs.push(input.tensor);
            labels.push(r.label);
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Fine-tunes every layer on `train_set` (see [`train_tensors`]).
pub fn train<T: Scalar>(
    model: TrainedModel<T>,
    train_set: &Dataset,
    config: &TrainingConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel<T>> {
    if !train_set.has_both_classes() {
        return Err(Error::Config("training set must contain both live and post-mortem samples".into()));
    }
    config.validate()?;
    let data = TensorSet::from_dataset(train_set, &model.config)?;
    train_tensors(model, &data, config, on_epoch)
}

/// Mini-batch SGD with momentum on mean two-class cross-entropy for exactly
/// `config.epochs` epochs. Batches are reshuffled every epoch from
/// `config.rng_seed`; the last partial batch is kept.
pub fn train_tensors<T: Scalar>(
    mut model: TrainedModel<T>,
    data: &TensorSet<T>,
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel<T>> {
    config.validate()?;
    let has = |l: Label| data.labels.contains(&l);
    if !(has(Label::Live) && has(Label::PostMortem)) {
        return Err(Error::Config("training set must contain both live and post-mortem samples".into()));
    }
    if config.epochs == 0 {
        return Ok(model);
    }
    let targets: Vec<usize> = data.labels.iter().map(|l| l.class_index()).collect();
    let history = fit(&mut model.network, &data.inputs, &targets, config, &mut on_epoch)?;
    model.history.extend(history);
    model.training_config = Some(config.clone());
    Ok(model)
}

/// Index of the largest entry; ties go to the later class, so a two-class
/// tie decides post-mortem.
fn argmax<T: Scalar>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v >= row[best] {
            best = i;
        }
    }
    best
}

/// The optimization loop shared by fine-tuning and proxy pretraining.
pub(crate) fn fit<T: Scalar>(
    network: &mut Network<T>,
    inputs: &[Array3<T>],
    targets: &[usize],
    config: &TrainingConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut sgd = Sgd::new(network, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let opts = BackwardOptions {
        need_input_grad: false,
        ..Default::default()
    };
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = nn::stack_inputs(&chunk.iter().map(|&i| &inputs[i]).collect::<Vec<_>>());
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let trace = network.forward(batch, Mode::Train(&mut rng));
            let logits = trace.logits();
            let (loss, grad) = nn::cross_entropy(logits.view(), &batch_targets);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            correct += logits
                .rows()
                .into_iter()
                .zip(&batch_targets)
                .filter(|(row, &t)| argmax(row.view()) == t)
                .count();
            loss_sum += loss * chunk.len() as f64;
            let mut grads = Gradients::zeros_like(network);
            let (n, k) = grad.dim();
            let grad4 = grad.into_shape_with_order((n, k, 1, 1)).expect("reshape");
            network.backward(&trace, grad4, &opts, Some(&mut grads));
            if !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: f64::NAN,
                });
            }
            sgd.step(network, &grads);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / inputs.len() as f64,
            train_accuracy: correct as f64 / inputs.len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Inference batch size; results do not depend on it beyond rounding.
pub const INFERENCE_BATCH: usize = 16;

impl<T: Scalar> TrainedModel<T> {
    /// Evaluation-mode scores for already prepared inputs.
    pub fn score_tensors(&self, inputs: &[&Array3<T>]) -> Vec<LivenessScore> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_BATCH) {
            let batch = nn::stack_inputs(chunk);
            out.extend(self.score_batch(&batch));
        }
        out
    }

    pub fn score_batch(&self, batch: &Array4<T>) -> Vec<LivenessScore> {
        let probs = nn::softmax(self.network.logits(batch).view());
        probs
            .rows()
            .into_iter()
            .map(|r| {
                LivenessScore::from_probabilities(
                    r[Label::Live.class_index()].as_f64(),
                    r[Label::PostMortem.class_index()].as_f64(),
                )
            })
            .collect()
    }

    pub fn prepare(&self, image: &Image, annotation: &IrisAnnotation) -> Result<NetworkInput<T>> {
        preprocess::preprocess(image, annotation, self.config.margin_factor, self.config.input_size)
    }
}

/// crop_and_mask → prepare_for_network → forward pass.
pub fn predict<T: Scalar>(model: &TrainedModel<T>, image: &Image, annotation: &IrisAnnotation) -> Result<LivenessScore> {
    let input = model.prepare(image, annotation)?;
    Ok(model.score_tensors(&[&input.tensor])[0])
}

/// Scores many samples with batched forward passes.
pub fn predict_batch<T: Scalar>(
    model: &TrainedModel<T>,
    samples: &[(Image, IrisAnnotation)],
) -> Result<Vec<LivenessScore>> {
    let inputs = samples
        .iter()
        .map(|(img, ann)| model.prepare(img, ann).map(|i| i.tensor))
        .collect::<Result<Vec<_>>>()?;
    Ok(model.score_tensors(&inputs.iter().collect::<Vec<_>>()))
}

/// Loads and scores every record of `dataset`.
pub fn predict_dataset<T: Scalar>(model: &TrainedModel<T>, dataset: &Dataset) -> Result<Vec<LivenessScore>> {
    let data = TensorSet::<T>::from_dataset(dataset, &model.config)?;
    Ok(model.score_tensors(&data.inputs.iter().collect::<Vec<_>>()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ArtifactHeader {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    training_config: Option<TrainingConfig>,
    history: Vec<EpochStats>,
    backbone_source: String,
    normalization_tag: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    weight_shape: [usize; 2],
    bias_len: usize,
}

/// Writes weights, both configurations and the format version to one file:
/// magic, version, header length, JSON header, raw little-endian parameters,
/// SHA-256 of everything before it.
pub fn save_model<T: Scalar>(model: &TrainedModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for layer in &model.network.layers {
        if let Some((w, b)) = layer.params() {
            tensors.push(TensorEntry {
                layer: layer.name.clone(),
                weight_shape: [w.nrows(), w.ncols()],
                bias_len: b.len(),
            });
            T::to_le_bytes_vec(w.as_standard_layout().as_slice().expect("contiguous"), &mut payload);
            T::to_le_bytes_vec(b.as_slice().expect("contiguous"), &mut payload);
        }
    }
    let header = ArtifactHeader {
        format_version: ARTIFACT_VERSION,
        dtype: T::DTYPE.into(),
        config: model.config.clone(),
        training_config: model.training_config.clone(),
        history: model.history.clone(),
        backbone_source: model.backbone_source.clone(),
        normalization_tag: model.normalization_tag.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(payload.len() + header_json.len() + 64);
    buf.extend_from_slice(ARTIFACT_MAGIC);
    buf.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&payload);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainedModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let integrity = |m: &str| Error::Integrity(format!("{}: {m}", path.display()));
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != ARTIFACT_MAGIC {
        return Err(integrity("not a model artifact or truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(integrity("checksum mismatch (corrupt or truncated file)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != ARTIFACT_VERSION {
        return Err(Error::Version(format!(
            "artifact format version {version}, this build reads {ARTIFACT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| integrity("header length exceeds file"))?;
    let header: ArtifactHeader =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| integrity(&format!("header: {e}")))?;
    if header.format_version != ARTIFACT_VERSION {
        return Err(Error::Version(format!("header format version {}", header.format_version)));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Version(format!(
            "artifact stores {} parameters, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::Version(format!("stored model configuration is not loadable: {e}")))?;
    let mut model: TrainedModel<T> = TrainedModel {
        network: vgg_network(&header.config, &mut ChaCha8Rng::seed_from_u64(0)),
        config: header.config,
        training_config: header.training_config,
        history: header.history,
        backbone_source: header.backbone_source,
        normalization_tag: header.normalization_tag,
    };
    let size = std::mem::size_of::<T>();
    let mut offset = header_end;
    let param_layers: Vec<usize> = (0..model.network.layers.len())
        .filter(|&i| model.network.layers[i].params().is_some())
        .collect();
    if param_layers.len() != header.tensors.len() {
        return Err(Error::Version(format!(
            "artifact holds {} parameter tensors, configuration implies {}",
            header.tensors.len(),
            param_layers.len()
        )));
    }
    for (&li, entry) in param_layers.iter().zip(&header.tensors) {
        let layer = &mut model.network.layers[li];
        let name = layer.name.clone();
        let (w, b) = layer.params_mut().expect("parametric");
        if entry.layer != name || entry.weight_shape != [w.nrows(), w.ncols()] || entry.bias_len != b.len() {
            return Err(Error::Version(format!(
                "tensor `{}` {:?} does not match configured layer `{name}` {:?}",
                entry.layer,
                entry.weight_shape,
                [w.nrows(), w.ncols()]
            )));
        }
        let nw = w.len() * size;
        let nb = b.len() * size;
        if offset + nw + nb > body.len() {
            return Err(integrity("payload shorter than declared tensors"));
        }
        *w = Array2::from_shape_vec(w.raw_dim(), T::from_le_slice(&body[offset..offset + nw])).expect("sized");
        *b = Array1::from_vec(T::from_le_slice(&body[offset + nw..offset + nw + nb]));
        offset += nw + nb;
    }
    if offset != body.len() {
        return Err(integrity("trailing bytes after parameters"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dropout: 0.0,
            ..ModelConfig::reduced(32, 16, 16)
        }
    }

    #[test]
    fn vgg16_topology() {
        let m: TrainedModel<f32> = build_model(&tiny(), &BackboneInit::Random, 1).unwrap();
        let convs = m
            .network
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv(_)))
            .count();
        let dense = m
            .network
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Dense(_)))
            .count();
        assert_eq!((convs, dense), (13, 3));
        assert_eq!(m.network.layers.last().unwrap().name, "fc8");
        assert!(m.network.layer_index(tiny().default_cam_layer()).is_some());
    }

    #[test]
    fn rejects_non_binary_config() {
        let cfg = ModelConfig {
            num_classes: 3,
            ..tiny()
        };
        assert!(matches!(
            build_model::<f32>(&cfg, &BackboneInit::Random, 0),
            Err(Error::Config(_))
        ));
        let cfg = ModelConfig {
            input_size: 40,
            ..tiny()
        };
        assert!(build_model::<f32>(&cfg, &BackboneInit::Random, 0).is_err());
    }

    #[test]
    fn missing_pretrained_weights_is_environment_error() {
        let cfg = ModelConfig::default();
        let err = build_model::<f32>(&cfg, &BackboneInit::Pretrained("/nonexistent/vgg16.safetensors".into()), 0)
            .unwrap_err();
        match err {
            Error::Environment { remediation, .. } => assert!(remediation.contains("torchvision")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_pretrained_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.safetensors");
        std::fs::write(&p, b"not safetensors").unwrap();
        let err = build_model::<f32>(&ModelConfig::default(), &BackboneInit::Pretrained(p), 0).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err:?}");
    }

    #[test]
    fn torchvision_layout_is_mapped_onto_layers() {
        // Fake weights with torchvision key names, sized for a reduced network.
        let cfg = tiny();
        let source: TrainedModel<f32> = build_model(&cfg, &BackboneInit::Random, 11).unwrap();
        let mut blobs = Vec::new();
        for (name, prefix) in TORCHVISION_KEYS {
            let (w, b) = source.network.layers[source.network.layer_index(name).unwrap()].params().unwrap();
            let mut wb = Vec::new();
            f32::to_le_bytes_vec(w.as_slice().unwrap(), &mut wb);
            let mut bb = Vec::new();
            f32::to_le_bytes_vec(b.as_slice().unwrap(), &mut bb);
            blobs.push((format!("{prefix}.weight"), vec![w.nrows(), w.ncols()], wb));
            blobs.push((format!("{prefix}.bias"), vec![b.len()], bb));
        }
        let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = blobs
            .iter()
            .map(|(k, shape, data)| {
                (
                    k.clone(),
                    safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), data).unwrap(),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vgg.safetensors");
        safetensors::serialize_to_file(views, &None, &p).unwrap();

        let mut target: TrainedModel<f32> = build_model(&cfg, &BackboneInit::Random, 99).unwrap();
        let tail_before = target.network.layers.last().unwrap().params().unwrap().0.clone();
        load_pretrained(&mut target.network, &p).unwrap();
        for (name, _) in TORCHVISION_KEYS {
            let i = source.network.layer_index(name).unwrap();
            assert_eq!(source.network.layers[i], target.network.layers[i], "{name}");
        }
        // The classification tail is not taken from the backbone file.
        assert_eq!(target.network.layers.last().unwrap().params().unwrap().0, &tail_before);
    }

    #[test]
    fn scores_are_normalized_and_deterministic() {
        let m: TrainedModel<f64> = build_model(&tiny(), &BackboneInit::Random, 3).unwrap();
        let x = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c + y * 3 + x * 7) % 11) as f64 / 5.0 - 1.0);
        let a = m.score_tensors(&[&x]);
        let b = m.score_tensors(&[&x]);
        assert_eq!(a, b);
        assert!((a[0].p_live + a[0].p_post_mortem - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tie_breaks_to_post_mortem() {
        assert_eq!(LivenessScore::from_probabilities(0.5, 0.5).predicted_label, Label::PostMortem);
        assert_eq!(LivenessScore::from_probabilities(0.51, 0.49).predicted_label, Label::Live);
    }

    #[test]
    fn training_config_validation() {
        let mut c = TrainingConfig::default();
        assert!(c.validate().is_ok());
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c = TrainingConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn paper_hyperparameter_defaults() {
        let c = TrainingConfig::default();
        assert_eq!((c.learning_rate, c.momentum, c.batch_size, c.epochs), (1e-4, 0.9, 16, 10));
    }
}
