//! Grid resampling: area-average downsampling and two upsampling kernels.
//!
//! Down = box averaging with fractional overlap weights, so non-integer
//! ratios like 16 -> 6 are well defined. `box_up` broadcasts each coarse
//! cell over its box (the exact adjoint of `area_down` up to scale), which
//! is what the residual quantizer uses: paired with area down and a
//! codebook containing the zero vector it makes per-scale reconstruction
//! error provably non-increasing. `bilinear_up` (half-pixel centers) is
//! kept as the smooth alternative. All kernels are written in
//! lerp/deviation form so a constant map resamples to the bit-identical
//! constant, and a same-shape call is a plain copy.

use ndarray::{Array3, ArrayView3};

/// Per-output-cell box over one axis: first covered input index plus the
/// overlap weight of each covered index. Weights sum to `in_len / out_len`.
fn axis_boxes(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f64>)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let first = lo.floor() as usize;
            // hi can land exactly on an integer boundary; keep the box half-open.
            let last = (hi.ceil() as usize).min(in_len) - 1;
            let weights = (first..=last)
                .map(|i| {
                    let cell_lo = i as f64;
                    let cell_hi = cell_lo + 1.0;
                    (hi.min(cell_hi) - lo.max(cell_lo)).max(0.0)
                })
                .collect();
            (first, weights)
        })
        .collect()
}

/// Area-average downsample (or general box resample) to `(oh, ow)`.
pub fn area_down(src: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    if (h, w) == (oh, ow) {
        return src.to_owned();
    }
    let rows = axis_boxes(h, oh);
    let cols = axis_boxes(w, ow);
    let mut out = Array3::zeros((oh, ow, c));
    for (oi, (r0, rw)) in rows.iter().enumerate() {
        for (oj, (c0, cw)) in cols.iter().enumerate() {
            let total: f64 = rw.iter().sum::<f64>() * cw.iter().sum::<f64>();
            for ch in 0..c {
                // Deviation form: anchor on the first covered pixel so a
                // constant map stays exactly constant.
                let anchor = src[(*r0, *c0, ch)];
                let mut acc = 0.0;
                for (di, wr) in rw.iter().enumerate() {
                    for (dj, wc) in cw.iter().enumerate() {
                        acc += wr * wc * (src[(r0 + di, c0 + dj, ch)] - anchor);
                    }
                }
                out[(oi, oj, ch)] = anchor + acc / total;
            }
        }
    }
    out
}

/// Adjoint of [`area_down`]: scatters output-cell gradients back over the
/// pixels each box averaged. Used by the codec's training backward.
pub fn area_down_adjoint(grad: ArrayView3<'_, f64>, ih: usize, iw: usize) -> Array3<f64> {
    let (oh, ow, c) = grad.dim();
    if (ih, iw) == (oh, ow) {
        return grad.to_owned();
    }
    let rows = axis_boxes(ih, oh);
    let cols = axis_boxes(iw, ow);
    let mut out = Array3::zeros((ih, iw, c));
    for (oi, (r0, rw)) in rows.iter().enumerate() {
        for (oj, (c0, cw)) in cols.iter().enumerate() {
            let total: f64 = rw.iter().sum::<f64>() * cw.iter().sum::<f64>();
            for ch in 0..c {
                let g = grad[(oi, oj, ch)] / total;
                for (di, wr) in rw.iter().enumerate() {
                    for (dj, wc) in cw.iter().enumerate() {
                        out[(r0 + di, c0 + dj, ch)] += wr * wc * g;
                    }
                }
            }
        }
    }
    out
}

/// Box-broadcast upsample to `(oh, ow)`: each output pixel is the
/// overlap-weighted mix of the coarse cells whose boxes cover it (a plain
/// copy of the covering cell away from box boundaries).
pub fn box_up(src: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    if (h, w) == (oh, ow) {
        return src.to_owned();
    }
    // Transpose the down-sampling boxes: per fine index, the covering
    // coarse cells and overlap weights (summing to 1).
    let transpose = |coarse: usize, fine: usize| -> Vec<Vec<(usize, f64)>> {
        let mut cover: Vec<Vec<(usize, f64)>> = vec![Vec::new(); fine];
        for (cell, (first, weights)) in axis_boxes(fine, coarse).into_iter().enumerate() {
            for (off, weight) in weights.into_iter().enumerate() {
                if weight > 0.0 {
                    cover[first + off].push((cell, weight));
                }
            }
        }
        cover
    };
    let rows = transpose(h, oh);
    let cols = transpose(w, ow);
    let mut out = Array3::zeros((oh, ow, c));
    for (oi, rcov) in rows.iter().enumerate() {
        for (oj, ccov) in cols.iter().enumerate() {
            for ch in 0..c {
                let anchor = src[(rcov[0].0, ccov[0].0, ch)];
                let mut acc = 0.0;
                for &(ri, rw) in rcov {
                    for &(ci, cw) in ccov {
                        acc += rw * cw * (src[(ri, ci, ch)] - anchor);
                    }
                }
                out[(oi, oj, ch)] = anchor + acc;
            }
        }
    }
    out
}

/// Source coordinate and lerp fraction for one output index under the
/// half-pixel convention, clamped at the borders.
fn lerp_coords(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let pos = (o as f64 + 0.5) * ratio - 0.5;
            if pos <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = (pos.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let f = if i1 > i0 { pos - i0 as f64 } else { 0.0 };
                (i0, i1, f)
            }
        })
        .collect()
}

/// Bilinear upsample (or general resample) to `(oh, ow)`.
pub fn bilinear_up(src: ArrayView3<'_, f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    if (h, w) == (oh, ow) {
        return src.to_owned();
    }
    let rows = lerp_coords(h, oh);
    let cols = lerp_coords(w, ow);
    let mut out = Array3::zeros((oh, ow, c));
    for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
            for ch in 0..c {
                let a = src[(r0, c0, ch)];
                let b = src[(r0, c1, ch)];
                let d = src[(r1, c0, ch)];
                let e = src[(r1, c1, ch)];
                let top = a + fc * (b - a);
                let bot = d + fc * (e - d);
                out[(oi, oj, ch)] = top + fr * (bot - top);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn constant(h: usize, w: usize, c: usize, v: f64) -> Array3<f64> {
        Array3::from_elem((h, w, c), v)
    }

    #[test]
    fn down_integer_ratio_is_block_mean() {
        let mut src = Array3::zeros((4, 4, 1));
        for i in 0..4 {
            for j in 0..4 {
                src[(i, j, 0)] = (i * 4 + j) as f64;
            }
        }
        let out = area_down(src.view(), 2, 2);
        assert_eq!(out[(0, 0, 0)], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(out[(0, 1, 0)], (2.0 + 3.0 + 6.0 + 7.0) / 4.0);
        assert_eq!(out[(1, 0, 0)], (8.0 + 9.0 + 12.0 + 13.0) / 4.0);
        assert_eq!(out[(1, 1, 0)], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn down_preserves_constants_bit_exactly() {
        let src = constant(16, 16, 3, 0.1);
        for &(oh, ow) in &[(1, 1), (2, 2), (6, 6), (12, 12)] {
            let out = area_down(src.view(), oh, ow);
            assert!(out.iter().all(|&v| v == 0.1), "({oh},{ow})");
        }
    }

    #[test]
    fn up_preserves_constants_bit_exactly() {
        let src = constant(2, 2, 3, 0.3);
        for &(oh, ow) in &[(4, 4), (6, 6), (16, 16)] {
            let out = bilinear_up(src.view(), oh, ow);
            assert!(out.iter().all(|&v| v == 0.3), "bilinear ({oh},{ow})");
            let out = box_up(src.view(), oh, ow);
            assert!(out.iter().all(|&v| v == 0.3), "box ({oh},{ow})");
        }
        let src3 = constant(3, 3, 1, 0.7);
        let out = box_up(src3.view(), 16, 16); // fractional boxes
        assert!(out.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn box_up_integer_ratio_is_block_broadcast() {
        let mut src = Array3::zeros((2, 2, 1));
        src[(0, 0, 0)] = 1.0;
        src[(0, 1, 0)] = 2.0;
        src[(1, 0, 0)] = 3.0;
        src[(1, 1, 0)] = 4.0;
        let out = box_up(src.view(), 4, 4);
        assert_eq!(out[(0, 0, 0)], 1.0);
        assert_eq!(out[(1, 1, 0)], 1.0);
        assert_eq!(out[(0, 2, 0)], 2.0);
        assert_eq!(out[(3, 0, 0)], 3.0);
        assert_eq!(out[(2, 3, 0)], 4.0);
    }

    #[test]
    fn box_up_then_area_down_is_identity_on_integer_ratios() {
        use rand::Rng;
        let mut rng = crate::rng::stream(4, "resample-updown");
        for &(ch, cw, fh, fw) in &[(2usize, 2usize, 4usize, 4usize), (4, 4, 16, 16), (2, 3, 6, 12)] {
            let src = Array3::from_shape_fn((ch, cw, 2), |_| rng.gen_range(-1.0..1.0));
            let down = area_down(box_up(src.view(), fh, fw).view(), ch, cw);
            for (a, b) in src.iter().zip(down.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_shape_is_identity() {
        let mut src = Array3::zeros((3, 5, 2));
        src.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.37);
        let down = area_down(src.view(), 3, 5);
        let up = bilinear_up(src.view(), 3, 5);
        assert_eq!(src, down);
        assert_eq!(src, up);
    }

    #[test]
    fn up_from_single_cell_broadcasts() {
        let mut src = Array3::zeros((1, 1, 2));
        src[(0, 0, 0)] = 2.5;
        src[(0, 0, 1)] = -1.0;
        let out = bilinear_up(src.view(), 8, 8);
        assert!(out.index_axis(ndarray::Axis(2), 0).iter().all(|&v| v == 2.5));
        assert!(out.index_axis(ndarray::Axis(2), 1).iter().all(|&v| v == -1.0));
    }

    #[test]
    fn down_fractional_boxes_weight_by_overlap() {
        // 3 -> 2: cell 0 covers [0, 1.5) = pixel 0 plus half of pixel 1.
        let mut src = Array3::zeros((1, 3, 1));
        src[(0, 0, 0)] = 1.0;
        src[(0, 1, 0)] = 2.0;
        src[(0, 2, 0)] = 4.0;
        let out = area_down(src.view(), 1, 2);
        assert!((out[(0, 0, 0)] - (1.0 + 0.5 * 2.0) / 1.5).abs() < 1e-12);
        assert!((out[(0, 1, 0)] - (0.5 * 2.0 + 4.0) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_down_inner_product() {
        // <Down(x), y> == <x, Down^T(y)> for random x, y.
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "resample-adjoint");
        let x = Array3::from_shape_fn((7, 5, 2), |_| rng.gen_range(-1.0..1.0));
        let y = Array3::from_shape_fn((3, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let dx = area_down(x.view(), 3, 2);
        let aty = area_down_adjoint(y.view(), 7, 5);
        let lhs: f64 = dx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
