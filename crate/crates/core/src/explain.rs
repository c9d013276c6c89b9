//! Grad-CAM, guided backpropagation and their combination, plus PNG renders.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};

use crate::dataset::{IrisAnnotation, Label};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::TrainedModel;
use crate::nn::{BackwardOptions, LayerKind, Mode, ReluRule};
use crate::preprocess::{self, resize_field, NetworkInput};
use crate::scalar::Scalar;

/// Display blend weight of the colorized heatmap.
pub const OVERLAY_ALPHA: f64 = 0.5;
/// Blank columns between panels of the four-panel render.
pub const PANEL_GUTTER: usize = 8;

/// Non-negative class-activation map at the feature-map resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Shape (rows, cols) of the feature map.
    pub values: Array2<f64>,
    pub target_class: Label,
    pub layer_id: String,
}

/// Input-resolution attribution (channel-summed input gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub target_class: Label,
}

fn one_hot<T: Scalar>(classes: usize, target: Label) -> Array4<T> {
    let mut g = Array4::zeros((1, classes, 1, 1));
    g[[0, target.class_index(), 0, 0]] = T::one();
    g
}

fn feature_layer<T: Scalar>(model: &TrainedModel<T>, layer_id: &str) -> Result<usize> {
    let idx = model
        .network
        .layer_index(layer_id)
        .ok_or_else(|| Error::param(format!("unknown layer `{layer_id}`")))?;
    match model.network.layers[idx].kind {
        LayerKind::Conv(_) | LayerKind::MaxPool => Ok(idx),
        _ => Err(Error::param(format!("layer `{layer_id}` is not a convolutional feature map"))),
    }
}

fn single<T: Scalar>(input: &NetworkInput<T>) -> Array4<T> {
    input.tensor.clone().insert_axis(Axis(0))
}

/// Feature maps of `layer_id` (after its rectifier) for one input, and the
/// gradient of the pre-softmax `target` score with respect to them.
pub fn class_score_gradient<T: Scalar>(
    model: &TrainedModel<T>,
    input: &NetworkInput<T>,
    target: Label,
    layer_id: &str,
) -> Result<(Array3<T>, Array3<T>)> {
    let idx = feature_layer(model, layer_id)?;
    let net = &model.network;
    let trace = net.forward(single(input), Mode::<rand::rngs::ThreadRng>::Eval);
    let classes = trace.logits().ncols();
    let opts = BackwardOptions {
        rule: ReluRule::Standard,
        stop_at: idx + 1,
        need_input_grad: true,
    };
    let grad = net.backward(&trace, one_hot(classes, target), &opts, None);
    let act = trace.output_of(idx).index_axis(Axis(0), 0).to_owned();
    Ok((act, grad.index_axis_move(Axis(0), 0)))
}

/// Pre-softmax `target` score when the feature maps of `layer_id` are
/// replaced by `features` (used for finite-difference checks).
pub fn class_score_from_features<T: Scalar>(
    model: &TrainedModel<T>,
    features: &Array3<T>,
    target: Label,
    layer_id: &str,
) -> Result<f64> {
    let idx = feature_layer(model, layer_id)?;
    let net = &model.network;
    let trace = net.forward_range(
        features.clone().insert_axis(Axis(0)),
        idx + 1..net.layers.len(),
        Mode::<rand::rngs::ThreadRng>::Eval,
    );
    Ok(trace.logits()[[0, target.class_index()]].as_f64())
}

/// Grad-CAM: channel weights are the spatial means of the class-score
/// gradient; the map is the rectified weighted sum of the feature maps.
pub fn grad_cam<T: Scalar>(
    model: &TrainedModel<T>,
    input: &NetworkInput<T>,
    target: Label,
    layer_id: &str,
) -> Result<Heatmap> {
    let (act, grad) = class_score_gradient(model, input, target, layer_id)?;
    let (c, h, w) = act.dim();
    let mut values = Array2::<f64>::zeros((h, w));
    for k in 0..c {
        let alpha = grad.index_axis(Axis(0), k).iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
        if alpha == 0.0 {
            continue;
        }
        values.zip_mut_with(&act.index_axis(Axis(0), k), |v, a| *v += alpha * a.as_f64());
    }
    values.mapv_inplace(|v| v.max(0.0));
    Ok(Heatmap {
        values,
        target_class: target,
        layer_id: layer_id.to_string(),
    })
}

fn input_gradient<T: Scalar>(
    model: &TrainedModel<T>,
    input: &NetworkInput<T>,
    target: Label,
    rule: ReluRule,
) -> SaliencyMap {
    let net = &model.network;
    let trace = net.forward(single(input), Mode::<rand::rngs::ThreadRng>::Eval);
    let classes = trace.logits().ncols();
    let opts = BackwardOptions {
        rule,
        stop_at: 0,
        need_input_grad: true,
    };
    let grad = net.backward(&trace, one_hot(classes, target), &opts, None);
    let grad = grad.index_axis(Axis(0), 0);
    SaliencyMap {
        values: grad.map(|v| v.as_f64()).sum_axis(Axis(0)),
        target_class: target,
    }
}

/// Guided backpropagation: every rectifier passes gradient only where its
/// forward output and the incoming gradient are both positive.
pub fn guided_backprop<T: Scalar>(model: &TrainedModel<T>, input: &NetworkInput<T>, target: Label) -> SaliencyMap {
    input_gradient(model, input, target, ReluRule::Guided)
}

/// Plain input gradient of the class score.
pub fn vanilla_backprop<T: Scalar>(model: &TrainedModel<T>, input: &NetworkInput<T>, target: Label) -> SaliencyMap {
    input_gradient(model, input, target, ReluRule::Standard)
}

/// Heatmap bilinearly upsampled to `(width, height)`.
pub fn upsample(heatmap: &Heatmap, width: usize, height: usize) -> Array2<f64> {
    resize_field(&heatmap.values, width, height)
}

/// Upsampled heatmap times the saliency map, elementwise.
pub fn guided_grad_cam(heatmap: &Heatmap, saliency: &SaliencyMap) -> Result<SaliencyMap> {
    if heatmap.target_class != saliency.target_class {
        return Err(Error::Consistency(format!(
            "heatmap explains {} but saliency explains {}",
            heatmap.target_class, saliency.target_class
        )));
    }
    let (h, w) = saliency.values.dim();
    let up = upsample(heatmap, w, h);
    Ok(SaliencyMap {
        values: up * &saliency.values,
        target_class: saliency.target_class,
    })
}

/// Axis-aligned box `[x0, y0, x1, y1]` in continuous pixel coordinates.
pub type BoxF = [f64; 4];

/// Box scaled by `factor` about its center.
pub fn dilate_box(b: BoxF, factor: f64) -> BoxF {
    let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
    let (hw, hh) = ((b[2] - b[0]) * factor / 2.0, (b[3] - b[1]) * factor / 2.0);
    [cx - hw, cy - hh, cx + hw, cy + hh]
}

/// Share of heatmap mass inside `b` (given in network-input pixels of an
/// `input_size` square), each cell's mass spread uniformly over the input
/// area it covers. `None` for an all-zero heatmap.
pub fn heatmap_mass_in_box(heatmap: &Heatmap, b: BoxF, input_size: usize) -> Option<f64> {
    let (h, w) = heatmap.values.dim();
    let total: f64 = heatmap.values.sum();
    if total <= 0.0 {
        return None;
    }
    let (cw, ch) = (input_size as f64 / w as f64, input_size as f64 / h as f64);
    let overlap = |lo: f64, hi: f64, a: f64, z: f64| (hi.min(z) - lo.max(a)).max(0.0);
    let mut inside = 0.0;
    for ((i, j), &v) in heatmap.values.indexed_iter() {
        let ox = overlap(j as f64 * cw, (j + 1) as f64 * cw, b[0], b[2]);
        let oy = overlap(i as f64 * ch, (i + 1) as f64 * ch, b[1], b[3]);
        inside += v * ox * oy / (cw * ch);
    }
    Some(inside / total)
}

/// Jet-style colormap on [0, 1].
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn normalized_by_max(values: &Array2<f64>) -> Array2<f64> {
    let max = values.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        values / max
    } else {
        Array2::zeros(values.raw_dim())
    }
}

/// RGB rows (height, width, 3) of the colorized heatmap blended over `image`.
pub fn overlay_rgb(image: &Image, heatmap: &Heatmap) -> Array3<u8> {
    let (w, h) = (image.width(), image.height());
    let heat = normalized_by_max(&upsample(heatmap, w, h));
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let gray = image.get(x, y) as f64;
        let color = colormap(heat[[y, x]])[c] as f64;
        ((1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * color).round() as u8
    })
}

fn save_rgb(rgb: &Array3<u8>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w, _) = rgb.dim();
    let data: Vec<u8> = rgb.iter().copied().collect();
    image::save_buffer(path, &data, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes the heatmap overlay for `image` as an RGB PNG of the same size.
pub fn render_overlay(image: &Image, heatmap: &Heatmap, output_path: impl AsRef<Path>) -> Result<()> {
    save_rgb(&overlay_rgb(image, heatmap), output_path.as_ref())
}

/// Saliency scaled to gray levels: zero maps to mid-gray, the largest
/// magnitude to black or white.
pub fn saliency_image(saliency: &SaliencyMap) -> Image {
    let (h, w) = saliency.values.dim();
    let peak = saliency.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Image::from_fn(w, h, |x, y| {
        let v = if peak > 0.0 { saliency.values[[y, x]] / peak } else { 0.0 };
        (127.5 + 127.5 * v).round().clamp(0.0, 255.0) as u8
    })
}

fn gray_rgb(image: &Image) -> Array3<u8> {
    Array3::from_shape_fn((image.height(), image.width(), 3), |(y, x, _)| image.get(x, y))
}

/// Original, CAM overlay, guided backpropagation and guided Grad-CAM side
/// by side, separated by white gutters. All panels share the image size.
pub fn panel_rgb(image: &Image, heatmap: &Heatmap, gbp: &SaliencyMap, guided_cam: &SaliencyMap) -> Array3<u8> {
    let (w, h) = (image.width(), image.height());
    let panels = [
        gray_rgb(image),
        overlay_rgb(image, heatmap),
        gray_rgb(&resize_image(&saliency_image(gbp), w, h)),
        gray_rgb(&resize_image(&saliency_image(guided_cam), w, h)),
    ];
    let mut out = Array3::from_elem((h, 4 * w + 3 * PANEL_GUTTER, 3), 255u8);
    for (k, p) in panels.iter().enumerate() {
        let x0 = k * (w + PANEL_GUTTER);
        out.slice_mut(ndarray::s![.., x0..x0 + w, ..]).assign(p);
    }
    out
}

fn resize_image(image: &Image, w: usize, h: usize) -> Image {
    if image.width() == w && image.height() == h {
        return image.clone();
    }
    let field = preprocess::resize_bilinear(image, w, h);
    Image::from_fn(w, h, |x, y| field[[y, x]].round().clamp(0.0, 255.0) as u8)
}

/// Everything computed for one explained sample.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub heatmap: Heatmap,
    pub guided_backprop: SaliencyMap,
    pub guided_grad_cam: SaliencyMap,
    /// Cropped and masked image resized to the network input.
    pub network_view: Image,
}

/// Runs all three attribution methods for one raw sample.
pub fn explain_sample<T: Scalar>(
    model: &TrainedModel<T>,
    image: &Image,
    annotation: &IrisAnnotation,
    target: Label,
    layer_id: &str,
) -> Result<Explanation> {
    let cropped = preprocess::crop_and_mask(image, annotation, model.config.margin_factor)?;
    let size = model.config.input_size;
    let input = preprocess::prepare_for_network::<T>(&cropped, size)?;
    let heatmap = grad_cam(model, &input, target, layer_id)?;
    let gbp = guided_backprop(model, &input, target);
    let combined = guided_grad_cam(&heatmap, &gbp)?;
    Ok(Explanation {
        heatmap,
        guided_backprop: gbp,
        guided_grad_cam: combined,
        network_view: resize_image(&cropped, size, size),
    })
}

/// Output file names for one explained sample.
pub fn output_paths(dir: &Path, sample_id: &str, target: Label) -> [PathBuf; 4] {
    ["cam", "gbp", "guided_cam", "panel"].map(|kind| dir.join(format!("{sample_id}__{target}__{kind}.png")))
}

/// Writes the CAM overlay, guided backpropagation, guided Grad-CAM and
/// four-panel PNGs; returns their paths in that order.
pub fn write_explanation(explanation: &Explanation, dir: &Path, sample_id: &str) -> Result<[PathBuf; 4]> {
    let target = explanation.heatmap.target_class;
    let paths = output_paths(dir, sample_id, target);
    let view = &explanation.network_view;
    render_overlay(view, &explanation.heatmap, &paths[0])?;
    saliency_image(&explanation.guided_backprop).save_png(&paths[1])?;
    saliency_image(&explanation.guided_grad_cam).save_png(&paths[2])?;
    save_rgb(
        &panel_rgb(view, &explanation.heatmap, &explanation.guided_backprop, &explanation.guided_grad_cam),
        &paths[3],
    )?;
    Ok(paths)
}
