//! im2col convolution kernels with zero padding.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the column matrix: `channels · k · k`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn valid(&self) -> bool {
        self.stride > 0 && self.height + 2 * self.pad >= self.kernel && self.width + 2 * self.pad >= self.kernel
    }
}

/// Unfolds one `(c, h, w)` image into a `(c·k·k, ho·wo)` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-matrix gradient back onto one image, accumulating into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let v = &mut line[ix as usize];
                            *v = *v + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched forward: `x` is `(b, c, h, w)`, `w` is `(o, c, k, k)`.
/// Returns the output and the stacked column matrices used by the backward pass.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let (pl, pos) = (g.patch_len(), g.positions());
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); batch * pl * pos];
    let mut out = vec![T::zero(); batch * out_channels * pos];
    for b in 0..batch {
        let col = &mut cols[b * pl * pos..(b + 1) * pl * pos];
        im2col(&x[b * in_len..(b + 1) * in_len], g, col);
        let y = &mut out[b * out_channels * pos..(b + 1) * out_channels * pos];
        T::gemm(out_channels, pl, pos, weight, false, col, false, y, T::zero());
        if let Some(bias) = bias {
            for (o, row) in y.chunks_mut(pos).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bias[o]);
            }
        }
    }
    (out, cols)
}

/// Batched backward. Accumulates into `dx`, `dw` and `db` when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    cols: &[T],
    batch: usize,
    weight: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (pl, pos) = (g.patch_len(), g.positions());
    let in_len = g.channels * g.height * g.width;
    let mut dcols = vec![T::zero(); if dx.is_some() { pl * pos } else { 0 }];
    for b in 0..batch {
        let dyb = &dy[b * out_channels * pos..(b + 1) * out_channels * pos];
        let col = &cols[b * pl * pos..(b + 1) * pl * pos];
        if let Some(dw) = dw.as_deref_mut() {
            T::gemm(out_channels, pos, pl, dyb, false, col, true, dw, T::one());
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, row) in dyb.chunks(pos).enumerate() {
                db[o] = db[o] + row.iter().copied().sum();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(pl, out_channels, pos, weight, true, dyb, false, &mut dcols, T::zero());
            col2im(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}
