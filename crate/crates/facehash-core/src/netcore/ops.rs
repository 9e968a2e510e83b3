//! Differentiable primitives for the hashing network: conv2d (im2col + GEMM),
//! fully-connected, 1-d batch normalization, ReLU, and global average pool.
//! Everything is f64 and deterministic: parallel work is split over disjoint
//! output regions, and reductions keep a fixed order.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Dimension};

/// Deterministic parallel matmul: rows of the output are computed in
/// disjoint chunks, each with its own sequential GEMM.
pub(crate) fn par_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    debug_assert_eq!(k, b.dim().0);
    let mut out = Array2::zeros((m, n));
    let flops = m * k * n;
    if flops < 1 << 18 || m < 8 {
        general_mat_mul(1.0, &a, &b, 0.0, &mut out.view_mut());
        return out;
    }
    let chunk = m.div_ceil(rayon::current_num_threads() * 2).max(16);
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(a.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut oc, ac)| {
            general_mat_mul(1.0, &ac, &b, 0.0, &mut oc);
        });
    out
}

pub(crate) fn out_spatial(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Unroll conv patches: row ((n*OH + oy)*OW + ox), column (c*K + ky)*K + kx.
pub(crate) fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = out_spatial(h, w, k, stride, pad);
    let mut col = Array2::zeros((n * oh * ow, c * k * k));
    col.axis_chunks_iter_mut(Axis(0), oh * ow)
        .into_par_iter()
        .zip(x.outer_iter().into_par_iter())
        .for_each(|(mut rows, xn)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = oy * ow + ox;
                    let mut r = rows.row_mut(row);
                    let r = r.as_slice_mut().expect("contiguous row");
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                r[(ci * k + ky) * k + kx] = xn[(ci, iy as usize, ix as usize)];
                            }
                        }
                    }
                }
            }
        });
    col
}

/// Fold patch gradients back onto the input, accumulating overlaps.
pub(crate) fn col2im(
    col: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (oh, ow) = out_spatial(h, w, k, stride, pad);
    let mut x = Array4::zeros((n, c, h, w));
    x.outer_iter_mut()
        .into_par_iter()
        .zip(col.axis_chunks_iter(Axis(0), oh * ow).into_par_iter())
        .for_each(|(mut xn, rows)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = rows.row(oy * ow + ox);
                    let row = row.as_slice().expect("contiguous row");
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                xn[(ci, iy as usize, ix as usize)] +=
                                    row[(ci * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        });
    x
}

/// 2-d convolution with weights stored as (c_out, c_in * k * k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub(crate) fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Array2::zeros((c_out, c_in * kernel * kernel)),
            bias: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub(crate) fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = out_spatial(h, w, self.kernel, self.stride, self.pad);
        let col = im2col(x, self.kernel, self.stride, self.pad);
        let mut out_mat = par_matmul(col.view(), self.weight.t());
        for mut row in out_mat.rows_mut() {
            row += &self.bias;
        }
        nhwc_to_nchw(&out_mat, n, oh, ow, self.c_out)
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub(crate) fn backward(
        &self,
        x: &Array4<f64>,
        grad_out: &Array4<f64>,
    ) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
        let (n, c, h, w) = x.dim();
        let grad_mat = nchw_to_rows(grad_out);
        let grad_bias = grad_mat.sum_axis(Axis(0));
        let col = im2col(x, self.kernel, self.stride, self.pad);
        let grad_weight = par_matmul(grad_mat.t(), col.view());
        let grad_col = par_matmul(grad_mat.view(), self.weight.view());
        let grad_x = col2im(&grad_col, n, c, h, w, self.kernel, self.stride, self.pad);
        (grad_x, grad_weight, grad_bias)
    }
}

/// (rows=(n,oh,ow), c) -> (n, c, oh, ow), standard layout.
fn nhwc_to_nchw(mat: &Array2<f64>, n: usize, oh: usize, ow: usize, c: usize) -> Array4<f64> {
    let mut out = Array4::zeros((n, c, oh, ow));
    out.outer_iter_mut()
        .into_par_iter()
        .zip(mat.axis_chunks_iter(Axis(0), oh * ow).into_par_iter())
        .for_each(|(mut on, rows)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = rows.row(oy * ow + ox);
                    let row = row.as_slice().expect("contiguous row");
                    for (ci, &v) in row.iter().enumerate() {
                        on[(ci, oy, ox)] = v;
                    }
                }
            }
        });
    out
}

/// (n, c, oh, ow) -> (rows=(n,oh,ow), c), standard layout.
fn nchw_to_rows(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, oh, ow) = x.dim();
    let mut mat = Array2::zeros((n * oh * ow, c));
    mat.axis_chunks_iter_mut(Axis(0), oh * ow)
        .into_par_iter()
        .zip(x.outer_iter().into_par_iter())
        .for_each(|(mut rows, xn)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut row = rows.row_mut(oy * ow + ox);
                    let row = row.as_slice_mut().expect("contiguous row");
                    for (ci, v) in row.iter_mut().enumerate() {
                        *v = xn[(ci, oy, ox)];
                    }
                }
            }
        });
    mat
}

/// Fully-connected layer; weight is (in, out).
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearLayer {
    pub(crate) fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearLayer {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = par_matmul(x.view(), self.weight.view());
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        out
    }

    pub(crate) fn backward(
        &self,
        x: &Array2<f64>,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let grad_x = par_matmul(grad_out.view(), self.weight.t());
        let grad_w = par_matmul(x.t(), grad_out.view());
        let grad_b = grad_out.sum_axis(Axis(0));
        (grad_x, grad_w, grad_b)
    }
}

/// Batch normalization over the feature axis of an (N, K) matrix.
///
/// Train mode normalizes with biased batch variance and folds unbiased batch
/// statistics into the running estimates with momentum 0.1 (torch semantics);
/// eval mode normalizes with the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNorm1d {
    pub(crate) fn new(features: usize) -> Self {
        BatchNorm1d {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub(crate) fn forward_train(&mut self, x: &Array2<f64>) -> (Array2<f64>, BnCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
        let mut var: Array1<f64> = Array1::zeros(x.ncols());
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        var.mapv_inplace(|v| v / n);
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());

        let mut xhat = x.clone();
        for mut row in xhat.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.gamma[j] + self.beta[j];
            }
        }

        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        for j in 0..x.ncols() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var[j] * unbiased;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub(crate) fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.running_mean[j]) / (self.running_var[j] + self.eps).sqrt()
                    * self.gamma[j]
                    + self.beta[j];
            }
        }
        y
    }

    pub(crate) fn backward(
        &self,
        cache: &BnCache,
        grad_out: &Array2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let n = grad_out.nrows() as f64;
        let k = grad_out.ncols();
        let mut grad_gamma: Array1<f64> = Array1::zeros(k);
        let mut grad_beta: Array1<f64> = Array1::zeros(k);
        let mut mean_gxhat: Array1<f64> = Array1::zeros(k);
        let mut mean_gxhat_xhat: Array1<f64> = Array1::zeros(k);
        for (g_row, x_row) in grad_out.rows().into_iter().zip(cache.xhat.rows()) {
            for j in 0..k {
                let gxhat = g_row[j] * self.gamma[j];
                grad_gamma[j] += g_row[j] * x_row[j];
                grad_beta[j] += g_row[j];
                mean_gxhat[j] += gxhat;
                mean_gxhat_xhat[j] += gxhat * x_row[j];
            }
        }
        mean_gxhat.mapv_inplace(|v| v / n);
        mean_gxhat_xhat.mapv_inplace(|v| v / n);

        let mut grad_x = grad_out.clone();
        for (mut g_row, x_row) in grad_x.rows_mut().into_iter().zip(cache.xhat.rows()) {
            for j in 0..k {
                let gxhat = g_row[j] * self.gamma[j];
                g_row[j] =
                    cache.inv_std[j] * (gxhat - mean_gxhat[j] - x_row[j] * mean_gxhat_xhat[j]);
            }
        }
        (grad_x, grad_gamma, grad_beta)
    }
}

pub(crate) fn relu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given the pre-activation values (derivative 0 at 0).
pub(crate) fn relu_backward<D: Dimension>(
    grad: &ndarray::Array<f64, D>,
    pre: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut out = grad.clone();
    out.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

pub(crate) fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += x[(ni, ci, y, xx)];
                }
            }
            out[(ni, ci)] = acc * scale;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward(grad: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = grad.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(ni, ci, _, _)| grad[(ni, ci)] * scale)
}
