//! Elementwise activations and small vector helpers.

use crate::float::Float;

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Float>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input.
pub fn silu_backward<T: Float>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

pub fn add_assign<T: Float>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub fn add<T: Float>(a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

/// `x[b, n, :] += v[b, :]` for a per-sample vector broadcast over tokens.
pub fn add_broadcast_rows<T: Float>(x: &mut [T], v: &[T], batch: usize, tokens: usize, dim: usize) {
    for b in 0..batch {
        let vb = &v[b * dim..(b + 1) * dim];
        for n in 0..tokens {
            let off = (b * tokens + n) * dim;
            for j in 0..dim {
                x[off + j] += vb[j];
            }
        }
    }
}

/// Reverse of [`add_broadcast_rows`]: sum token gradients per sample.
pub fn sum_broadcast_rows<T: Float>(dx: &[T], batch: usize, tokens: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * dim];
    for b in 0..batch {
        for n in 0..tokens {
            let off = (b * tokens + n) * dim;
            for j in 0..dim {
                out[b * dim + j] += dx[off + j];
            }
        }
    }
    out
}
