//! 2D rotary position embeddings with scale-dependent coordinates.
//!
//! A target token at cell (i, j) of scale k maps to the coordinate
//! `(i * floor(h/h_k), j * floor(w/w_k))` on the finest feature grid;
//! source tokens get the same coordinate shifted by (64, 64) so they can
//! never collide with target positions. The first half of each head's
//! dimensions rotates by x-angles, the second half by y-angles, with the
//! usual 10000 frequency base.

use crate::error::{Error, Result};
use crate::schedule::ScaleSchedule;

pub const SOURCE_OFFSET: usize = 64;
const FREQ_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RopeCoord {
    pub x: usize,
    pub y: usize,
}

/// Whether a token carries source or target content; sources are offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordRole {
    Source,
    Target,
}

/// Coordinate of cell (i, j) in scale `k` (1-based) of `schedule`.
pub fn coord_of(
    role: CoordRole,
    k: usize,
    cell: (usize, usize),
    schedule: &ScaleSchedule,
) -> Result<RopeCoord> {
    if k == 0 || k > schedule.num_scales() {
        return Err(Error::Bounds(format!(
            "scale {k} out of 1..={}",
            schedule.num_scales()
        )));
    }
    let (hk, wk) = schedule.grid(k);
    let (i, j) = cell;
    if i >= hk || j >= wk {
        return Err(Error::Bounds(format!(
            "cell ({i},{j}) outside grid ({hk},{wk}) of scale {k}"
        )));
    }
    let (h, w) = schedule.feature_hw;
    let mut x = i * (h / hk);
    let mut y = j * (w / wk);
    if role == CoordRole::Source {
        x += SOURCE_OFFSET;
        y += SOURCE_OFFSET;
    }
    Ok(RopeCoord { x, y })
}

/// Per-pair rotation angles for one head dimension count.
fn pair_freqs(head_dim: usize) -> Vec<f64> {
    // head_dim/2 dims per axis, so head_dim/4 rotation pairs per axis.
    let per_axis = head_dim / 2;
    (0..per_axis / 2)
        .map(|p| FREQ_BASE.powf(-2.0 * p as f64 / per_axis as f64))
        .collect()
}

/// Rotate one per-head vector in place by its coordinate.
///
/// `coord` (0, 0) is the identity; rotations preserve the norm.
pub fn apply_rope(vec: &mut [f64], coord: RopeCoord) -> Result<()> {
    let d = vec.len();
    if d % 4 != 0 || d == 0 {
        return Err(Error::Config(format!(
            "head dim {d} must be a positive multiple of 4"
        )));
    }
    let freqs = pair_freqs(d);
    rotate_half(&mut vec[..d / 2], coord.x as f64, &freqs, false);
    rotate_half(&mut vec[d / 2..], coord.y as f64, &freqs, false);
    Ok(())
}

/// Inverse rotation, used when back-propagating through RoPE.
pub fn apply_rope_inverse(vec: &mut [f64], coord: RopeCoord) -> Result<()> {
    let d = vec.len();
    if d % 4 != 0 || d == 0 {
        return Err(Error::Config(format!(
            "head dim {d} must be a positive multiple of 4"
        )));
    }
    let freqs = pair_freqs(d);
    rotate_half(&mut vec[..d / 2], coord.x as f64, &freqs, true);
    rotate_half(&mut vec[d / 2..], coord.y as f64, &freqs, true);
    Ok(())
}

fn rotate_half(half: &mut [f64], pos: f64, freqs: &[f64], inverse: bool) {
    for (p, &f) in freqs.iter().enumerate() {
        let angle = pos * f;
        let (sin, cos) = if inverse {
            (-angle).sin_cos()
        } else {
            angle.sin_cos()
        };
        let a = half[2 * p];
        let b = half[2 * p + 1];
        half[2 * p] = a * cos - b * sin;
        half[2 * p + 1] = a * sin + b * cos;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sched_256() -> ScaleSchedule {
        ScaleSchedule::for_resolution(256).unwrap()
    }

    #[test]
    fn target_coords_follow_stride() {
        let s = sched_256();
        // h = 16, h_k = 4 at scale 3, so (3, 3) lands on (12, 12).
        let c = coord_of(CoordRole::Target, 3, (3, 3), &s).unwrap();
        assert_eq!((c.x, c.y), (12, 12));
        // Finest scale has stride 1.
        let c = coord_of(CoordRole::Target, 7, (5, 9), &s).unwrap();
        assert_eq!((c.x, c.y), (5, 9));
    }

    #[test]
    fn source_coords_start_at_offset() {
        let s = sched_256();
        for k in 1..=7 {
            let c = coord_of(CoordRole::Source, k, (0, 0), &s).unwrap();
            assert_eq!((c.x, c.y), (64, 64));
        }
    }

    #[test]
    fn out_of_grid_cell_rejected() {
        let s = sched_256();
        assert!(coord_of(CoordRole::Target, 1, (1, 0), &s).is_err());
        assert!(coord_of(CoordRole::Target, 8, (0, 0), &s).is_err());
        assert!(coord_of(CoordRole::Target, 0, (0, 0), &s).is_err());
    }

    #[test]
    fn source_target_ranges_disjoint_for_paper_schedules() {
        for res in [256, 512] {
            let s = ScaleSchedule::for_resolution(res).unwrap();
            let mut max_target = 0;
            let mut min_source = usize::MAX;
            for k in 1..=s.num_scales() {
                let (hk, wk) = s.grid(k);
                for i in 0..hk {
                    for j in 0..wk {
                        let t = coord_of(CoordRole::Target, k, (i, j), &s).unwrap();
                        let src = coord_of(CoordRole::Source, k, (i, j), &s).unwrap();
                        max_target = max_target.max(t.x).max(t.y);
                        min_source = min_source.min(src.x).min(src.y);
                    }
                }
            }
            assert!(max_target < min_source, "{res}: {max_target} vs {min_source}");
        }
    }

    #[test]
    fn zero_coord_is_identity() {
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.31 - 2.0).collect();
        let mut rotated = v.clone();
        apply_rope(&mut rotated, RopeCoord { x: 0, y: 0 }).unwrap();
        assert_eq!(v, rotated);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = crate::rng::stream(11, "rope-norm");
        for _ in 0..50 {
            let v: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut r = v.clone();
            let coord = RopeCoord {
                x: rng.gen_range(0..128),
                y: rng.gen_range(0..128),
            };
            apply_rope(&mut r, coord).unwrap();
            let rnorm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - rnorm).abs() < 1e-6);
        }
    }

    #[test]
    fn inverse_undoes_rotation() {
        let mut rng = crate::rng::stream(12, "rope-inv");
        let v: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coord = RopeCoord { x: 17, y: 90 };
        let mut r = v.clone();
        apply_rope(&mut r, coord).unwrap();
        apply_rope_inverse(&mut r, coord).unwrap();
        for (a, b) in v.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_shift_invariance() {
        let mut rng = crate::rng::stream(13, "rope-shift");
        for _ in 0..100 {
            let q: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p1 = RopeCoord {
                x: rng.gen_range(0..40),
                y: rng.gen_range(0..40),
            };
            let p2 = RopeCoord {
                x: rng.gen_range(0..40),
                y: rng.gen_range(0..40),
            };
            let s = (rng.gen_range(0..60), rng.gen_range(0..60));
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let rot = |v: &[f64], c: RopeCoord| {
                let mut r = v.to_vec();
                apply_rope(&mut r, c).unwrap();
                r
            };
            let base = dot(&rot(&q, p1), &rot(&k, p2));
            let shifted = dot(
                &rot(&q, RopeCoord { x: p1.x + s.0, y: p1.y + s.1 }),
                &rot(&k, RopeCoord { x: p2.x + s.0, y: p2.y + s.1 }),
            );
            assert!((base - shifted).abs() < 1e-5, "{base} vs {shifted}");
        }
    }

    #[test]
    fn rotation_is_linear() {
        let mut rng = crate::rng::stream(14, "rope-lin");
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coord = RopeCoord { x: 3, y: 29 };
        let mut sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x + 0.5 * y).collect();
        apply_rope(&mut sum, coord).unwrap();
        let mut ra = a.clone();
        let mut rb = b.clone();
        apply_rope(&mut ra, coord).unwrap();
        apply_rope(&mut rb, coord).unwrap();
        for i in 0..16 {
            assert!((sum[i] - (2.0 * ra[i] + 0.5 * rb[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_head_dim_rejected() {
        let mut v = vec![0.0; 6];
        assert!(apply_rope(&mut v, RopeCoord { x: 1, y: 1 }).is_err());
    }
}
