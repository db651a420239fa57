//! 2-D convolution: im2col + small GEMM kernels, plus a naive reference.
//!
//! The GEMM accumulates every output element over the reduction index in
//! ascending order, which is the same order the naive 6-nested-loop
//! reference uses. With both paths doing plain multiply-then-add in `f64`
//! (no FMA contraction), the two implementations agree bit for bit; tests
//! rely on that.
//!
//! Layouts (all row-major):
//! * input `x`: `[batch, in_channels, h, w]`
//! * weight `w`: `[out_channels, in_channels, kh, kw]`
//! * patch matrix `cols`: `[in_channels * kh * kw, out_h * out_w]`, row
//!   index `(ci * kh + ki) * kw + kj`

use super::Tensor;
use crate::error::{Error, Result};

/// `c[m][n] += a[m][k] * b[k][n]`, accumulating over `k` in ascending order.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m][n] += sum_p a[m][p] * b[n][p]` (second operand transposed).
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m][n] += sum_o a[o][m] * b[o][n]` (first operand transposed).
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], o: usize, m: usize, n: usize) {
    for oo in 0..o {
        let arow = &a[oo * m..(oo + 1) * m];
        let brow = &b[oo * n..(oo + 1) * n];
        for i in 0..m {
            let aim = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aim * bv;
            }
        }
    }
}

/// Output spatial size for one dimension, or an error when the kernel does
/// not fit in the padded input.
fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} does not fit input {input} with pad {pad}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `(out_h, out_w)` for a conv over `(h, w)` input.
pub fn conv2d_output_shape(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    Ok((out_dim(h, kh, stride, pad)?, out_dim(w, kw, stride, pad)?))
}

/// Gathers one sample's padded patches into `cols`; out-of-bounds taps are 0.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let p_total = oh * ow;
    let mut r = 0;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[r * p_total..(r + 1) * p_total];
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[p..p + ow].fill(0.0);
                        p += ow;
                        continue;
                    }
                    let rowbase = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[p] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            xc[rowbase + ix as usize]
                        };
                        p += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-adds patch-space gradients back to image space (im2col adjoint).
fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f64],
) {
    let p_total = oh * ow;
    let mut r = 0;
    for ci in 0..c {
        let base = ci * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[r * p_total..(r + 1) * p_total];
                let mut p = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        p += ow;
                        continue;
                    }
                    let rowbase = base + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[rowbase + ix as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

fn check_conv_shapes(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: "4-D input and 4-D weight".into(),
            got: format!("input {xs:?}, weight {ws:?}"),
        });
    }
    if xs[1] != ws[1] {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            expected: format!("input channels {}", ws[1]),
            got: format!("{}", xs[1]),
        });
    }
    Ok((xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3]))
}

/// Convolution forward via im2col + GEMM.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd, o, kh, kw) = check_conv_shapes(x, w)?;
    let (oh, ow) = conv2d_output_shape(h, wd, kh, kw, stride, pad)?;
    let k = c * kh * kw;
    let p = oh * ow;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; b * o * p];
    let xs = x.data();
    let wm = w.data();
    for bi in 0..b {
        im2col(
            &xs[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut cols,
        );
        gemm(wm, &cols, &mut out[bi * o * p..(bi + 1) * o * p], o, k, p);
    }
    Tensor::new(vec![b, o, oh, ow], out)
}

/// Gradients of the convolution w.r.t. input and weight.
///
/// The patch matrix is rebuilt per sample rather than cached; at the sizes
/// this crate targets, recomputing is cheaper than holding every layer's
/// patches for the lifetime of the tape.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let (b, c, h, wd, o, kh, kw) = check_conv_shapes(x, w)?;
    let (oh, ow) = conv2d_output_shape(h, wd, kh, kw, stride, pad)?;
    let k = c * kh * kw;
    let p = oh * ow;
    let mut cols = vec![0.0; k * p];
    let mut gcols = vec![0.0; k * p];
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let xs = x.data();
    let wm = w.data();
    let gys = gy.data();
    for bi in 0..b {
        let xb = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
        let gyb = &gys[bi * o * p..(bi + 1) * o * p];
        im2col(xb, c, h, wd, kh, kw, stride, pad, oh, ow, &mut cols);
        // gw[o][k] += gy_b[o][p] . cols[k][p]^T
        gemm_nt(gyb, &cols, &mut gw, o, p, k);
        // gcols[k][p] = w[o][k]^T . gy_b[o][p]
        gcols.fill(0.0);
        gemm_tn(wm, gyb, &mut gcols, o, k, p);
        col2im_add(
            &gcols,
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd],
        );
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(w.shape().to_vec(), gw)?,
    ))
}

/// Naive direct convolution, kept as the correctness reference.
///
/// Sums taps in `(ci, ki, kj)` order, skipping out-of-bounds positions. The
/// im2col path must agree with this bit for bit on any shape.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd, o, kh, kw) = check_conv_shapes(x, w)?;
    let (oh, ow) = conv2d_output_shape(h, wd, kh, kw, stride, pad)?;
    let mut out = vec![0.0; b * o * oh * ow];
    let xs = x.data();
    let wm = w.data();
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xs[((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = wm[((oc * c + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ones_kernel_counts_taps() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn im2col_path_matches_reference_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(b, c, h, w, o, kh, kw, stride, pad) in &[
            (2usize, 3usize, 5usize, 5usize, 4usize, 3usize, 3usize, 1usize, 1usize),
            (1, 2, 7, 6, 3, 3, 2, 2, 0),
            (3, 1, 4, 4, 2, 1, 1, 1, 0),
            (1, 3, 5, 5, 2, 3, 3, 2, 2),
        ] {
            let x = Tensor::randn(&[b, c, h, w], &mut rng);
            let wt = Tensor::randn(&[o, c, kh, kw], &mut rng);
            let fast = conv2d_forward(&x, &wt, stride, pad).unwrap();
            let slow = conv2d_reference(&x, &wt, stride, pad).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            assert_eq!(fast.data(), slow.data(), "shape case {b},{c},{h},{w}");
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_an_error() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let w = Tensor::full(&[1, 1, 5, 5], 1.0);
        assert!(conv2d_forward(&x, &w, 1, 1).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::full(&[1, 2, 4, 4], 1.0);
        let w = Tensor::full(&[1, 3, 3, 3], 1.0);
        assert!(conv2d_forward(&x, &w, 1, 1).is_err());
    }
}
