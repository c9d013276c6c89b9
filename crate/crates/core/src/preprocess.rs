//! Iris crop-and-mask and conversion to the classifier's input tensor.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, IrisAnnotation};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Ratio of the crop half-side to the annotated iris radius.
pub const DEFAULT_MARGIN_FACTOR: f64 = 1.2;

/// Native input side of the VGG-16 backbone.
pub const DEFAULT_INPUT_SIZE: usize = 224;

/// Per-channel statistics of the ImageNet training distribution (RGB order).
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Identifies the resize + normalization applied by [`prepare_for_network`].
pub const NORMALIZATION_TAG: &str =
    "bilinear-half-pixel;gray->rgb;x/255;imagenet-mean-std(0.485,0.456,0.406/0.229,0.224,0.225)";

/// Geometry of a crop: top-left corner in source coordinates, side, and the
/// circle (center in output coordinates, radius) outside which pixels are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub origin_x: i64,
    pub origin_y: i64,
    pub side: usize,
    pub center: usize,
    pub mask_radius: f64,
}

impl CropGeometry {
    pub fn new(annotation: &IrisAnnotation, margin_factor: f64) -> Result<Self> {
        if !(margin_factor >= 1.0 && margin_factor.is_finite()) {
            return Err(Error::param(format!(
                "margin_factor must be >= 1, got {margin_factor}"
            )));
        }
        if !(annotation.radius > 0.0 && annotation.radius.is_finite()) {
            return Err(Error::param(format!(
                "iris radius must be positive, got {}",
                annotation.radius
            )));
        }
        let mask_radius = margin_factor * annotation.radius;
        let exact = 2.0 * mask_radius;
        // Guard against representation noise pushing an integral side up by one.
        let side = (exact - exact * 1e-12).ceil().max(1.0) as usize;
        let center = side / 2;
        let cx = annotation.center_x.round() as i64;
        let cy = annotation.center_y.round() as i64;
        Ok(Self {
            origin_x: cx - center as i64,
            origin_y: cy - center as i64,
            side,
            center,
            mask_radius,
        })
    }

    /// Whether output pixel (x, y) lies inside the kept disc.
    #[inline]
    pub fn keeps(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.center as f64;
        let dy = y as f64 - self.center as f64;
        (dx * dx + dy * dy).sqrt() <= self.mask_radius
    }

    /// Maps a source-image point into output coordinates.
    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (x - self.origin_x as f64, y - self.origin_y as f64)
    }
}

/// Crops the square of side `ceil(2·margin_factor·R)` centered on the rounded
/// iris center and zeroes every pixel farther than `margin_factor·R` from it.
/// Parts of the square outside the source frame are zero-filled.
pub fn crop_and_mask(image: &Image, annotation: &IrisAnnotation, margin_factor: f64) -> Result<Image> {
    let geom = CropGeometry::new(annotation, margin_factor)?;
    annotation
        .validate(image.width(), image.height())
        .map_err(Error::Consistency)?;
    Ok(apply_crop(image, &geom))
}

pub(crate) fn apply_crop(image: &Image, geom: &CropGeometry) -> Image {
    let (w, h) = (image.width() as i64, image.height() as i64);
    Image::from_fn(geom.side, geom.side, |x, y| {
        let sx = geom.origin_x + x as i64;
        let sy = geom.origin_y + y as i64;
        if sx < 0 || sy < 0 || sx >= w || sy >= h || !geom.keeps(x, y) {
            0
        } else {
            image.get(sx as usize, sy as usize)
        }
    })
}

/// Bilinear resize with half-pixel centers; returns intensities in [0, 255].
/// A constant field stays exactly constant.
pub fn resize_bilinear(image: &Image, out_w: usize, out_h: usize) -> Array2<f64> {
    let field = Array2::from_shape_fn((image.height(), image.width()), |(y, x)| image.get(x, y) as f64);
    resize_field(&field, out_w, out_h)
}

/// Bilinear resize of a real (rows = y) field with half-pixel centers.
pub fn resize_field(field: &Array2<f64>, out_w: usize, out_h: usize) -> Array2<f64> {
    let (in_h, in_w) = field.dim();
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, in_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, wy) = axis(y, sy, in_h);
        let (x0, x1, wx) = cols[x];
        let p = |xx: usize, yy: usize| field[[yy, xx]];
        let top = p(x0, y0) + wx * (p(x1, y0) - p(x0, y0));
        let bottom = p(x0, y1) + wx * (p(x1, y1) - p(x0, y1));
        top + wy * (bottom - top)
    })
}

/// Three-channel normalized classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput<T> {
    /// Shape (3, S, S).
    pub tensor: Array3<T>,
    pub normalization_tag: String,
}

impl<T: Scalar> NetworkInput<T> {
    pub fn size(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Resizes to `target_size`², replicates the gray channel and applies the
/// backbone's per-channel normalization.
pub fn prepare_for_network<T: Scalar>(image: &Image, target_size: usize) -> Result<NetworkInput<T>> {
    if target_size == 0 {
        return Err(Error::param("target_size must be positive"));
    }
    let resized = resize_bilinear(image, target_size, target_size);
    let tensor = Array3::from_shape_fn((3, target_size, target_size), |(c, y, x)| {
        T::of((resized[[y, x]] / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
    });
    Ok(NetworkInput {
        tensor,
        normalization_tag: NORMALIZATION_TAG.to_string(),
    })
}

/// Full path from raw capture to network input.
pub fn preprocess<T: Scalar>(
    image: &Image,
    annotation: &IrisAnnotation,
    margin_factor: f64,
    target_size: usize,
) -> Result<NetworkInput<T>> {
    let cropped = crop_and_mask(image, annotation, margin_factor)?;
    prepare_for_network(&cropped, target_size)
}

/// Writes `cropped_masked` versions of every record under `out_dir`, mirroring
/// the records' paths relative to their deepest common directory.
pub fn write_cropped_mirror(dataset: &Dataset, out_dir: &Path, margin_factor: f64) -> Result<Vec<PathBuf>> {
    let root = common_dir(dataset.records.iter().map(|r| r.image_path.as_path()));
    let mut written = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let img = Image::load(&r.image_path)?;
        let out = crop_and_mask(&img, &r.annotation, margin_factor)?;
        let rel = r.image_path.strip_prefix(&root).unwrap_or(&r.image_path);
        let dest = out_dir.join(rel).with_extension("png");
        out.save_png(&dest)?;
        written.push(dest);
    }
    Ok(written)
}

fn common_dir<'a>(mut paths: impl Iterator<Item = &'a Path>) -> PathBuf {
    let Some(first) = paths.next() else {
        return PathBuf::new();
    };
    let mut prefix: PathBuf = first.parent().map(Path::to_path_buf).unwrap_or_default();
    for p in paths {
        while !p.starts_with(&prefix) {
            if !prefix.pop() {
                return PathBuf::new();
            }
        }
    }
    prefix
}
