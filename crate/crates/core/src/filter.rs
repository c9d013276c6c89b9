//! Separable Gaussian smoothing on 8-bit images.

use crate::image::Image;

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

#[inline]
fn reflect(i: i64, len: i64) -> usize {
    let mut i = i;
    if len == 1 {
        return 0;
    }
    while i < 0 || i >= len {
        i = if i < 0 { -i - 1 } else { 2 * len - i - 1 };
    }
    i as usize
}

/// Gaussian blur in floating point with symmetric border reflection.
pub fn gaussian_blur_f64(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let taps = gaussian_taps(sigma);
    let half = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * data[y * width + reflect(x as i64 + k as i64 - half, width as i64)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(y as i64 + k as i64 - half, height as i64) * width + x])
                .sum();
        }
    }
    out
}

/// Gaussian blur of an 8-bit image; results are rounded back to 8 bits.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let data: Vec<f64> = image.pixels().iter().map(|&p| p as f64).collect();
    let out = gaussian_blur_f64(&data, image.width(), image.height(), sigma);
    Image::new(
        image.width(),
        image.height(),
        out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )
    .expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let img = Image::filled(9, 7, 42);
        assert_eq!(gaussian_blur(&img, 2.0), img);
    }

    #[test]
    fn mass_is_preserved_away_from_borders() {
        let mut data = vec![0.0; 31 * 31];
        data[15 * 31 + 15] = 1.0;
        let out = gaussian_blur_f64(&data, 31, 31, 1.5);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out[15 * 31 + 15] < 1.0);
    }
}
