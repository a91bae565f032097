//! im2col / col2im kernels for square-kernel 2-D convolutions.
//!
//! Activations are laid out channel-major, `[C, N, H, W]`, so that a whole
//! batch convolves with a single GEMM and the product lands directly in the
//! same layout.

use crate::tensor::Float;

/// Geometry of a convolution from a "large" image `(h, w)` down to the
/// "small" grid `(ho, wo)`. A transposed convolution uses the same geometry
/// with the roles of input and output swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Spatial size of the large image whose conv with these parameters yields
    /// `small` cells; used to derive transposed-conv output sizes.
    pub fn upsampled(small: usize, k: usize, stride: usize, pad: usize) -> usize {
        (small - 1) * stride + k - 2 * pad
    }
}

/// `x: [C, N, H, W]` -> `cols: [C*k*k, N*Ho*Wo]`.
pub fn im2col<F: Float>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    let plane = g.h * g.w;
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(c * g.batch + n) * plane..(c * g.batch + n + 1) * plane];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        let base = (n * ho + oh) * wo;
                        if ih < 0 || ih >= g.h as isize {
                            dst[base..base + wo].iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let srow = &src[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            dst[base + ow] = if iw < 0 || iw >= g.w as isize { F::zero() } else { srow[iw as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `x` (which is not cleared).
pub fn col2im<F: Float>(cols: &[F], g: &ConvGeom, x: &mut [F]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(c * g.batch + n) * plane..(c * g.batch + n + 1) * plane];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let base = (n * ho + oh) * wo;
                        let drow = &mut dst[ih as usize * g.w..(ih as usize + 1) * g.w];
                        for ow in 0..wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                drow[iw as usize] += src[base + ow];
                            }
                        }
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
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { channels: 2, batch: 3, h: 6, w: 6, k: 4, stride: 2, pad: 1 };
        let xn = g.channels * g.batch * g.h * g.w;
        let x: Vec<f64> = (0..xn).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let yn = g.col_rows() * g.col_cols();
        let y: Vec<f64> = (0..yn).map(|i| ((i * 11 % 13) as f64) * 0.5 - 3.0).collect();
        let mut cols = vec![0.0; yn];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; xn];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_sizes() {
        let g = ConvGeom { channels: 1, batch: 1, h: 32, w: 32, k: 4, stride: 2, pad: 1 };
        assert_eq!(g.out_h(), 16);
        let g = ConvGeom { channels: 1, batch: 1, h: 4, w: 4, k: 4, stride: 1, pad: 0 };
        assert_eq!(g.out_h(), 1);
        assert_eq!(ConvGeom::upsampled(16, 4, 2, 1), 32);
        assert_eq!(ConvGeom::upsampled(1, 4, 1, 0), 4);
    }
}
