//! Raw slice kernels shared by the forward and backward passes.

use crate::tensor::Scalar;

/// Geometry of a square-kernel 2-D convolution over a `C x H x W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `x` into a `patch_len x out_len` matrix (cross-correlation order).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let l = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters-adds patch gradients back into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let l = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Normalizes each contiguous row of length `n` to zero mean and unit
/// variance (biased estimator, `eps` inside the square root). Writes the
/// normalized values to `out` and returns per-row reciprocal std.
pub fn normalize_rows<T: Scalar>(x: &[T], n: usize, eps: T, out: &mut [T]) -> Vec<T> {
    let inv_n = T::one() / T::from_usize(n).unwrap();
    x.chunks_exact(n)
        .zip(out.chunks_exact_mut(n))
        .map(|(row, dst)| {
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * rstd;
            }
            rstd
        })
        .collect()
}

/// Backward of [`normalize_rows`]; accumulates into `dx`.
pub fn normalize_rows_backward<T: Scalar>(dy: &[T], xhat: &[T], rstd: &[T], n: usize, dx: &mut [T]) {
    let inv_n = T::one() / T::from_usize(n).unwrap();
    for (((dy, xh), dx), &r) in dy
        .chunks_exact(n)
        .zip(xhat.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
        .zip(rstd)
    {
        let mean_dy = dy.iter().copied().sum::<T>() * inv_n;
        let mean_dy_xh = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((d, &g), &h) in dx.iter_mut().zip(dy).zip(xh) {
            *d += r * (g - mean_dy - h * mean_dy_xh);
        }
    }
}

/// Numerically stable softmax over the middle axis of an `outer x n x inner` view.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize, out: &mut [T]) {
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let at = |j: usize| base + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..n {
                out[at(j)] *= inv;
            }
        }
    }
}

pub fn smooth_l1<T: Scalar>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::of(0.5) * d * d
    } else {
        a - T::of(0.5)
    }
}
