//! Strided 2-D convolution kernels (im2col + GEMM) and their adjoints.
//!
//! Layout conventions: activations are `[B, C, H, W]`; a convolution weight is
//! `[O, C, kh, kw]`, viewed as an `[O, C*kh*kw]` matrix. A transposed
//! convolution reuses the weight layout of the convolution it is the adjoint
//! of, so its weight is `[C_in, C_out, kh, kw]`.

use super::{Scalar, TensorError};

/// Upper bound on the im2col buffer, in elements, before a batch is split.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output is `ceil(len / stride)`; the padding deficit is split with the
    /// smaller half before the data.
    Same,
    /// No padding; output is `(len - k) / stride + 1`.
    Valid,
}

/// Spatial bookkeeping of one convolution (also used, reversed, by the
/// transposed convolution that mirrors it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// Leading padding (top, left).
    pub pad: (usize, usize),
}

fn axis(len: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize), TensorError> {
    if k == 0 || s == 0 {
        return Err(TensorError::ShapeMismatch("kernel and stride must be positive".into()));
    }
    match padding {
        Padding::Same => {
            let out = len.div_ceil(s);
            let total = ((out.max(1) - 1) * s + k).saturating_sub(len);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if len < k {
                return Err(TensorError::ShapeMismatch(format!(
                    "valid convolution with kernel {k} on axis of length {len}"
                )));
            }
            Ok(((len - k) / s + 1, 0))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        input_chw: [usize; 3],
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self, TensorError> {
        let [c, h, w] = input_chw;
        if c == 0 || h == 0 || w == 0 || out_channels == 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "empty convolution input {input_chw:?} or zero filters"
            )));
        }
        let (out_h, pad_top) = axis(h, kernel.0, stride.0, padding)?;
        let (out_w, pad_left) = axis(w, kernel.1, stride.1, padding)?;
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels,
            out_h,
            out_w,
            kernel,
            stride,
            pad: (pad_top, pad_left),
        })
    }

    /// Rows of the im2col matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    fn chunk_items(&self) -> usize {
        (COLS_BUDGET / (self.patch_len() * self.out_plane()).max(1)).max(1)
    }

    /// Unfolds one `[C, H, W]` item into columns `col0..col0 + out_plane` of
    /// a `[C*kh*kw, ld]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, col0: usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (pt, pl) = self.pad;
        for c in 0..self.in_channels {
            let plane = &x[c * self.in_plane()..(c + 1) * self.in_plane()];
            for u in 0..kh {
                for v in 0..kw {
                    let row = (c * kh + u) * kw + v;
                    let dst = &mut cols[row * ld + col0..row * ld + col0 + self.out_plane()];
                    for i in 0..self.out_h {
                        let y = (i * sh + u) as isize - pt as isize;
                        let line = &mut dst[i * self.out_w..(i + 1) * self.out_w];
                        if y < 0 || y >= self.in_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.in_w..(y as usize + 1) * self.in_w];
                        for (j, d) in line.iter_mut().enumerate() {
                            let xx = (j * sw + v) as isize - pl as isize;
                            *d = if xx < 0 || xx >= self.in_w as isize {
                                T::zero()
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into a
    /// `[C, H, W]` item.
    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, col0: usize, x: &mut [T]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (pt, pl) = self.pad;
        let plane_len = self.in_plane();
        for c in 0..self.in_channels {
            let plane = &mut x[c * plane_len..(c + 1) * plane_len];
            for u in 0..kh {
                for v in 0..kw {
                    let row = (c * kh + u) * kw + v;
                    let src = &cols[row * ld + col0..row * ld + col0 + self.out_plane()];
                    for i in 0..self.out_h {
                        let y = (i * sh + u) as isize - pt as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.in_w..(y as usize + 1) * self.in_w];
                        for j in 0..self.out_w {
                            let xx = (j * sw + v) as isize - pl as isize;
                            if xx >= 0 && xx < self.in_w as isize {
                                dst[xx as usize] = dst[xx as usize] + src[i * self.out_w + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies items `b0..b0+n` of a `[B, R, P]` tensor into an `[R, n*P]` matrix.
fn gather_planes<T: Scalar>(src: &[T], rows: usize, plane: usize, b0: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * n * plane];
    let ld = n * plane;
    for i in 0..n {
        let item = &src[(b0 + i) * rows * plane..(b0 + i + 1) * rows * plane];
        for r in 0..rows {
            out[r * ld + i * plane..r * ld + (i + 1) * plane]
                .copy_from_slice(&item[r * plane..(r + 1) * plane]);
        }
    }
    out
}

/// Inverse of [`gather_planes`], adding an optional per-row bias.
fn scatter_planes<T: Scalar>(
    src: &[T],
    rows: usize,
    plane: usize,
    b0: usize,
    n: usize,
    bias: Option<&[T]>,
    dst: &mut [T],
) {
    let ld = n * plane;
    for i in 0..n {
        let item = &mut dst[(b0 + i) * rows * plane..(b0 + i + 1) * rows * plane];
        for r in 0..rows {
            let b = bias.map_or(T::zero(), |b| b[r]);
            for (d, &s) in item[r * plane..(r + 1) * plane]
                .iter_mut()
                .zip(&src[r * ld + i * plane..r * ld + (i + 1) * plane])
            {
                *d = s + b;
            }
        }
    }
}

/// Per-channel sums of a `[B, C, P]` tensor.
fn channel_sums<T: Scalar>(x: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *acc = *acc + x[start..start + plane].iter().copied().sum::<T>();
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, p_in, p_out, o) = (g.patch_len(), g.in_plane(), g.out_plane(), g.out_channels);
    let mut y = vec![T::zero(); batch * o * p_out];
    let step = g.chunk_items();
    let mut b0 = 0;
    while b0 < batch {
        let n = step.min(batch - b0);
        let ld = n * p_out;
        let mut cols = vec![T::zero(); k * ld];
        for i in 0..n {
            let item = &x[(b0 + i) * g.in_channels * p_in..(b0 + i + 1) * g.in_channels * p_in];
            g.im2col(item, &mut cols, ld, i * p_out);
        }
        let mut out = vec![T::zero(); o * ld];
        T::gemm(o, k, ld, T::one(), w, k, 1, &cols, ld, 1, T::zero(), &mut out, ld, 1);
        scatter_planes(&out, o, p_out, b0, n, bias, &mut y);
        b0 += n;
    }
    y
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, p_in, p_out, o) = (g.patch_len(), g.in_plane(), g.out_plane(), g.out_channels);
    let item_in = g.in_channels * p_in;
    let mut dx = vec![T::zero(); batch * item_in];
    let mut dw = vec![T::zero(); o * k];
    let step = g.chunk_items();
    let mut b0 = 0;
    while b0 < batch {
        let n = step.min(batch - b0);
        let ld = n * p_out;
        let mut cols = vec![T::zero(); k * ld];
        for i in 0..n {
            g.im2col(&x[(b0 + i) * item_in..(b0 + i + 1) * item_in], &mut cols, ld, i * p_out);
        }
        let dyc = gather_planes(dy, o, p_out, b0, n);
        T::gemm(o, ld, k, T::one(), &dyc, ld, 1, &cols, 1, ld, T::one(), &mut dw, k, 1);
        // cols is reused as the column-space gradient
        T::gemm(k, o, ld, T::one(), w, 1, k, &dyc, ld, 1, T::zero(), &mut cols, ld, 1);
        for i in 0..n {
            g.col2im(&cols, ld, i * p_out, &mut dx[(b0 + i) * item_in..(b0 + i + 1) * item_in]);
        }
        b0 += n;
    }
    let db = channel_sums(dy, batch, o, p_out);
    (dx, dw, db)
}

/// Transposed convolution: maps `[B, O, out_h, out_w]` back onto the
/// `[B, C, in_h, in_w]` grid of `g`.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, p_in, p_out, o) = (g.patch_len(), g.in_plane(), g.out_plane(), g.out_channels);
    let item_out = g.in_channels * p_in;
    let mut y = vec![T::zero(); batch * item_out];
    let step = g.chunk_items();
    let mut b0 = 0;
    while b0 < batch {
        let n = step.min(batch - b0);
        let ld = n * p_out;
        let xc = gather_planes(x, o, p_out, b0, n);
        let mut cols = vec![T::zero(); k * ld];
        T::gemm(k, o, ld, T::one(), w, 1, k, &xc, ld, 1, T::zero(), &mut cols, ld, 1);
        for i in 0..n {
            g.col2im(&cols, ld, i * p_out, &mut y[(b0 + i) * item_out..(b0 + i + 1) * item_out]);
        }
        b0 += n;
    }
    if let Some(bias) = bias {
        for item in y.chunks_exact_mut(item_out) {
            for (c, plane) in item.chunks_exact_mut(p_in).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + bias[c]);
            }
        }
    }
    y
}

/// Gradients of a transposed convolution with respect to input, weight and
/// bias.
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (k, p_in, p_out, o) = (g.patch_len(), g.in_plane(), g.out_plane(), g.out_channels);
    let item_out = g.in_channels * p_in;
    let mut dx = vec![T::zero(); batch * o * p_out];
    let mut dw = vec![T::zero(); o * k];
    let step = g.chunk_items();
    let mut b0 = 0;
    while b0 < batch {
        let n = step.min(batch - b0);
        let ld = n * p_out;
        let mut cols = vec![T::zero(); k * ld];
        for i in 0..n {
            g.im2col(&dy[(b0 + i) * item_out..(b0 + i + 1) * item_out], &mut cols, ld, i * p_out);
        }
        let xc = gather_planes(x, o, p_out, b0, n);
        let mut dxc = vec![T::zero(); o * ld];
        T::gemm(o, k, ld, T::one(), w, k, 1, &cols, ld, 1, T::zero(), &mut dxc, ld, 1);
        scatter_planes(&dxc, o, p_out, b0, n, None, &mut dx);
        T::gemm(o, ld, k, T::one(), &xc, ld, 1, &cols, 1, ld, T::one(), &mut dw, k, 1);
        b0 += n;
    }
    let db = channel_sums(dy, batch, g.in_channels, p_in);
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_output_dims() {
        let g = ConvGeometry::new([1, 128, 32], 32, (5, 5), (2, 1), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (64, 32));
        assert_eq!(g.pad, (1, 2));
        let g = ConvGeometry::new([1, 7, 7], 1, (3, 3), (2, 2), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
    }

    #[test]
    fn valid_padding_requires_fit() {
        let g = ConvGeometry::new([512, 4, 4], 40, (4, 4), (1, 1), Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (1, 1));
        assert!(ConvGeometry::new([1, 3, 3], 1, (4, 4), (1, 1), Padding::Valid).is_err());
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let g = ConvGeometry::new([1, 3, 3], 1, (3, 3), (1, 1), Padding::Same).unwrap();
        let y = conv2d_forward::<f64>(&g, 1, &[1.0; 9], &[1.0; 9], None);
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn pointwise_identity() {
        let g = ConvGeometry::new([2, 2, 3], 2, (1, 1), (1, 1), Padding::Same).unwrap();
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let w = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(conv2d_forward(&g, 1, &x, &w, None), x);
        assert_eq!(conv_transpose2d_forward(&g, 1, &x, &w, None), x);
    }
}
