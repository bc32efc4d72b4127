//! Hamming-window blur kernels and L2 pooling, `sqrt(g * (x ⊙ x))`, evaluated
//! per channel with reflective borders.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Floor under the blurred energy before the square root; keeps the
/// derivative bounded at zero input.
pub const SQRT_GUARD: f64 = 1e-12;

/// Separable 2D Hamming window normalized to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct HammingKernel2D {
    size: usize,
    weights: Vec<f64>,
}

/// Unnormalized 1D Hamming window `0.54 - 0.46 cos(2πn/(M-1))`.
pub fn hamming_window(size: usize) -> Vec<f64> {
    if size == 1 {
        return vec![1.0];
    }
    let denom = (size - 1) as f64;
    // mirror the first half so the window is bitwise symmetric
    (0..size)
        .map(|n| n.min(size - 1 - n))
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

impl HammingKernel2D {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "hamming kernel size must be odd and positive, got {size}"
            )));
        }
        let w = hamming_window(size);
        let mut weights = Vec::with_capacity(size * size);
        for a in &w {
            for b in &w {
                weights.push(a * b);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|v| *v /= total);
        Ok(Self { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major `size × size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn radius(&self) -> usize {
        (self.size - 1) / 2
    }
}

/// Reflect an index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn pooled_extent(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Forward L2 pooling over `planes` independent `h × w` planes.
/// Returns `(output, blurred_energy)`; the energy is kept for the backward pass.
pub fn l2pool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &HammingKernel2D,
    stride: usize,
) -> (Vec<T>, Vec<T>) {
    let (ho, wo) = (pooled_extent(h, stride), pooled_extent(w, stride));
    let m = kernel.size();
    let r = kernel.radius() as isize;
    let g: Vec<T> = kernel.weights().iter().map(|&v| T::of(v)).collect();
    let guard = T::of(SQRT_GUARD);
    let mut energy = vec![T::zero(); planes * ho * wo];
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for a in 0..m {
                    let iy = reflect((oy * stride) as isize + a as isize - r, h);
                    for b in 0..m {
                        let ix = reflect((ox * stride) as isize + b as isize - r, w);
                        let v = src[iy * w + ix];
                        acc = acc + g[a * m + b] * v * v;
                    }
                }
                let idx = p * ho * wo + oy * wo + ox;
                energy[idx] = acc;
                out[idx] = acc.max(guard).sqrt();
            }
        }
    }
    (out, energy)
}

/// Accumulates the input gradient of L2 pooling into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn l2pool_backward<T: Scalar>(
    x: &[T],
    out: &[T],
    energy: &[T],
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &HammingKernel2D,
    stride: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (pooled_extent(h, stride), pooled_extent(w, stride));
    let m = kernel.size();
    let r = kernel.radius() as isize;
    let g: Vec<T> = kernel.weights().iter().map(|&v| T::of(v)).collect();
    let guard = T::of(SQRT_GUARD);
    let two = T::of(2.0);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let idx = p * ho * wo + oy * wo + ox;
                if energy[idx] <= guard {
                    continue;
                }
                // d sqrt(v) / dv = 1 / (2 sqrt(v)), d v / d x = 2 g x
                let dv = dy[idx] / (two * out[idx]);
                for a in 0..m {
                    let iy = reflect((oy * stride) as isize + a as isize - r, h);
                    for b in 0..m {
                        let ix = reflect((ox * stride) as isize + b as isize - r, w);
                        let k = iy * w + ix;
                        dst[k] = dst[k] + two * g[a * m + b] * src[k] * dv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_one_is_identity_kernel() {
        let k = HammingKernel2D::new(1).unwrap();
        assert_eq!(k.weights(), &[1.0]);
    }

    #[test]
    fn size_three_window() {
        let w = hamming_window(3);
        // cos(0) = 1, cos(pi) = -1
        assert!((w[0] - 0.08).abs() < 1e-15);
        assert!((w[1] - 1.0).abs() < 1e-15);
        assert!((w[2] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn rejects_even_and_zero() {
        assert!(HammingKernel2D::new(0).is_err());
        assert!(HammingKernel2D::new(4).is_err());
    }

    #[test]
    fn kernels_are_symmetric_and_unit_sum() {
        for size in [3, 5, 7, 9] {
            let k = HammingKernel2D::new(size).unwrap();
            let total: f64 = k.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            let c = k.radius();
            for i in 0..size {
                for j in 0..size {
                    let v = k.at(i, j);
                    assert!(v > 0.0);
                    assert_eq!(v, k.at(size - 1 - i, j));
                    assert_eq!(v, k.at(i, size - 1 - j));
                    assert!((v - k.at(j, i)).abs() < 1e-18);
                    assert!(v <= k.at(c, c));
                }
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }
}
