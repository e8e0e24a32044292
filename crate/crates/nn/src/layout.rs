//! Token-grid reshapes. A grid is `batch × h × w × c`, row-major.

use crate::float::Float;

/// `(b, h, w, c) -> (b, h/2, w/2, 4c)`; each output channel block is ordered
/// `(dy, dx, c)`.
pub fn space_to_depth<T: Float>(x: &[T], batch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    assert!(h % 2 == 0 && w % 2 == 0, "grid {h}x{w} is not even");
    assert_eq!(x.len(), batch * h * w * c);
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for i in 0..h2 {
            for j in 0..w2 {
                let dst = ((b * h2 + i) * w2 + j) * 4 * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = ((b * h + 2 * i + dy) * w + 2 * j + dx) * c;
                        let o = dst + (dy * 2 + dx) * c;
                        out[o..o + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`space_to_depth`]: `(b, h2, w2, 4c) -> (b, 2h2, 2w2, c)`.
pub fn depth_to_space<T: Float>(x: &[T], batch: usize, h2: usize, w2: usize, c: usize) -> Vec<T> {
    assert_eq!(x.len(), batch * h2 * w2 * 4 * c);
    let (h, w) = (h2 * 2, w2 * 2);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for i in 0..h2 {
            for j in 0..w2 {
                let src = ((b * h2 + i) * w2 + j) * 4 * c;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = ((b * h + 2 * i + dy) * w + 2 * j + dx) * c;
                        let o = src + (dy * 2 + dx) * c;
                        out[dst..dst + c].copy_from_slice(&x[o..o + c]);
                    }
                }
            }
        }
    }
    out
}

/// Planar `(b, c, h, w)` to interleaved `(b, h, w, c)`.
pub fn chw_to_hwc<T: Float>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((b * h + i) * w + j) * c + ch] = x[((b * c + ch) * h + i) * w + j];
                }
            }
        }
    }
    out
}

pub fn hwc_to_chw<T: Float>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[((b * c + ch) * h + i) * w + j] = x[((b * h + i) * w + j) * c + ch];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn depth_round_trip(b in 1usize..3, h2 in 1usize..4, w2 in 1usize..4, c in 1usize..4) {
            let n = b * h2 * 2 * w2 * 2 * c;
            let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let y = space_to_depth(&x, b, 2 * h2, 2 * w2, c);
            prop_assert_eq!(depth_to_space(&y, b, h2, w2, c), x.clone());
            let p = chw_to_hwc(&x, b, c, 2 * h2, 2 * w2);
            prop_assert_eq!(hwc_to_chw(&p, b, c, 2 * h2, 2 * w2), x);
        }
    }

    #[test]
    fn space_to_depth_groups_two_by_two_cells() {
        // 1 batch, 2x2 grid, 1 channel
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(space_to_depth(&x, 1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]);
        // 2x4 grid -> two output tokens
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(space_to_depth(&x, 1, 2, 4, 1), vec![0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }
}
