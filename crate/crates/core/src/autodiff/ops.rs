//! Dense convolution kernels shared by the forward and backward passes.
//!
//! Convolutions are lowered to GEMM through im2col / col2im. The transpose
//! convolution is defined as the adjoint (input gradient) of a convolution
//! with the same stride and padding, so the three routines here cover the
//! forward and backward passes of both operator kinds.

use ndarray::{Array2, ArrayView2};

use super::Scalar;

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output spatial extent of a transpose convolution along one axis.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * pad + 1 {
        return None;
    }
    Some(grown - 2 * pad)
}

/// Gather `x` (one image, `c`×`h`×`w`) into a `(c*kh*kw) × (oh*ow)` matrix.
/// Out-of-bounds taps read as zero (zero padding).
fn im2col<F: Scalar>(
    x: &[F],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<F> {
    let mut cols = vec![F::zero(); c * kh * kw * oh * ow];
    let span = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * span;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = plane[iy * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the columns matrix back onto an image; adjoint of [`im2col`].
fn col2im<F: Scalar>(
    cols: &[F],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    out: &mut [F],
) {
    let span = oh * ow;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * span;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] = plane[iy * w + ix as usize] + cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// y[b,o,:,:] = sum_c w[o,c,:,:] * x[b,c,:,:]  (+ bias), batched over `b`.
///
/// `x` is `[b, c, h, w]`, `w` is `[o, c, kh, kw]`; returns `[b, o, oh, ow]`.
pub fn conv2d_forward<F: Scalar>(
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    weight: &[F],
    (o, kh, kw): (usize, usize, usize),
    bias: Option<&[F]>,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<F> {
    let span = oh * ow;
    let ckk = c * kh * kw;
    let w_mat = ArrayView2::from_shape((o, ckk), weight).expect("conv weight layout");
    let mut y = vec![F::zero(); b * o * span];
    for item in 0..b {
        let cols = im2col(
            &x[item * c * h * w..(item + 1) * c * h * w],
            (c, h, w),
            (kh, kw),
            stride,
            pad,
            (oh, ow),
        );
        let cols_m = ArrayView2::from_shape((ckk, span), &cols).expect("cols layout");
        let prod = w_mat.dot(&cols_m);
        let dst = &mut y[item * o * span..(item + 1) * o * span];
        dst.copy_from_slice(prod.as_slice().expect("contiguous"));
        if let Some(bias) = bias {
            for ch in 0..o {
                for v in &mut dst[ch * span..(ch + 1) * span] {
                    *v = *v + bias[ch];
                }
            }
        }
    }
    y
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_data<F: Scalar>(
    dy: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    weight: &[F],
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<F> {
    let span = oh * ow;
    let ckk = c * kh * kw;
    let w_mat = ArrayView2::from_shape((o, ckk), weight).expect("conv weight layout");
    let mut dx = vec![F::zero(); b * c * h * w];
    for item in 0..b {
        let dy_m = ArrayView2::from_shape((o, span), &dy[item * o * span..(item + 1) * o * span])
            .expect("dy layout");
        let cols_grad = w_mat.t().dot(&dy_m);
        col2im(
            cols_grad.as_slice().expect("contiguous"),
            (c, h, w),
            (kh, kw),
            stride,
            pad,
            (oh, ow),
            &mut dx[item * c * h * w..(item + 1) * c * h * w],
        );
    }
    dx
}

/// Gradient of [`conv2d_forward`] with respect to the weight (and bias).
///
/// Returns `(dw, db)` with batch items accumulated in index order.
pub fn conv2d_backward_weight<F: Scalar>(
    dy: &[F],
    x: &[F],
    (b, c, h, w): (usize, usize, usize, usize),
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> (Vec<F>, Vec<F>) {
    let span = oh * ow;
    let ckk = c * kh * kw;
    let mut dw = Array2::<F>::zeros((o, ckk));
    let mut db = vec![F::zero(); o];
    for item in 0..b {
        let dy_item = &dy[item * o * span..(item + 1) * o * span];
        let dy_m = ArrayView2::from_shape((o, span), dy_item).expect("dy layout");
        let cols = im2col(
            &x[item * c * h * w..(item + 1) * c * h * w],
            (c, h, w),
            (kh, kw),
            stride,
            pad,
            (oh, ow),
        );
        let cols_m = ArrayView2::from_shape((ckk, span), &cols).expect("cols layout");
        dw = dw + dy_m.dot(&cols_m.t());
        for ch in 0..o {
            let mut acc = F::zero();
            for v in &dy_item[ch * span..(ch + 1) * span] {
                acc = acc + *v;
            }
            db[ch] = db[ch] + acc;
        }
    }
    (dw.into_raw_vec_and_offset().0, db)
}
