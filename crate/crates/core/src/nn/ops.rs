//! Tensor kernels for 3x3 same-padding convolution and 2x2 max pooling.

use ndarray::{Array2, ArrayView3, ArrayViewMut3};

use crate::scalar::Scalar;

/// Unfolds a (C, H, W) map into a (C·9, H·W) patch matrix for a 3x3 kernel
/// with one pixel of zero padding. Row order is (channel, ky, kx).
pub fn im2col<T: Scalar>(x: ArrayView3<T>, col: &mut Array2<T>) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(col.dim(), (c * 9, h * w));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let dst = col.as_slice_mut().expect("standard layout");
    let hw = h * w;
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = T::zero();
                            out[1..].copy_from_slice(&line[..w - 1]);
                        }
                        1 => out.copy_from_slice(line),
                        _ => {
                            out[..w - 1].copy_from_slice(&line[1..]);
                            out[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into a (C, H, W) map.
pub fn col2im<T: Scalar>(col: &Array2<T>, mut x: ArrayViewMut3<T>) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(col.dim(), (c * 9, h * w));
    let src = col.as_slice().expect("standard layout");
    let dst = x.as_slice_mut().expect("standard layout");
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(ch * 9 + ky * 3 + kx) * hw..(ch * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let inp = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => line[..w - 1].iter_mut().zip(&inp[1..]).for_each(|(d, s)| *d += *s),
                        1 => line.iter_mut().zip(inp).for_each(|(d, s)| *d += *s),
                        _ => line[1..].iter_mut().zip(&inp[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling of one (C, H, W) map. Writes the pooled map and,
/// for every output cell, the flat in-plane index of the selected input (first
/// maximum on ties).
pub fn max_pool2<T: Scalar>(x: ArrayView3<T>, mut out: ArrayViewMut3<T>, argmax: &mut [u32]) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        let v = x[[ch, y, xx]];
                        if v > best || (dy == 0 && dx == 0) {
                            best = v;
                            best_idx = (y * w + xx) as u32;
                        }
                    }
                }
                out[[ch, oy, ox]] = best;
                argmax[(ch * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};

    #[test]
    fn im2col_center_row_is_identity_and_adjoint_holds() {
        let x = Array3::from_shape_fn((2, 4, 5), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let mut col = Array2::zeros((18, 20));
        im2col(x.view(), &mut col);
        assert_eq!(col.row(4).to_vec(), x.index_axis(Axis(0), 0).iter().copied().collect::<Vec<_>>());
        // <im2col(x), g> == <x, col2im(g)>
        let g = Array2::from_shape_fn((18, 20), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let lhs: f64 = (&col * &g).sum();
        let mut back = Array3::zeros((2, 4, 5));
        col2im(&g, back.view_mut());
        let rhs: f64 = (&x * &back).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn pooling_picks_maximum() {
        let x = Array3::from_shape_vec((1, 2, 4), vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 2.0]).unwrap();
        let mut out = Array3::zeros((1, 1, 2));
        let mut idx = vec![0; 2];
        max_pool2(x.view(), out.view_mut(), &mut idx);
        assert_eq!(out.iter().copied().collect::<Vec<f64>>(), vec![5.0, 9.0]);
        assert_eq!(idx, vec![1, 6]);
    }
}
