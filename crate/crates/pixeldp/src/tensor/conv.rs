//! 2-D convolution (cross-correlation), its input adjoint, and kernel
//! gradients.
//!
//! Tensors use `[H, W, C]` layout for feature maps and `[kH, kW, Cin, Cout]`
//! for kernels. The forward pass is im2col followed by the deterministic
//! GEMM, which accumulates in `(kh, kw, cin)` order per output element —
//! the same order as the textbook quadruple loop, so the two agree
//! bit-for-bit.

use super::gemm::{gemm_acc, transpose};
use super::Tensor;
use crate::{Error, Result};

/// Zero-padding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding; output shrinks by kernel size.
    Valid,
    /// Output spatial dims are `ceil(in / stride)`; zeros split evenly with
    /// the extra row/column at bottom/right.
    Same,
}

/// Resolved geometry for one convolution: shapes, stride, padding offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub h_in: usize,
    pub w_in: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [h_in, w_in, c_in] = match input_shape {
            [h, w, c] => [*h, *w, *c],
            s => return Err(Error::shape(format!("conv input must be [H,W,C], got {s:?}"))),
        };
        let [k_h, k_w, kc_in, c_out] = match kernel_shape {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => {
                return Err(Error::shape(format!(
                    "conv kernel must be [kH,kW,Cin,Cout], got {s:?}"
                )))
            }
        };
        if kc_in != c_in {
            return Err(Error::shape(format!(
                "kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::param("conv stride must be >= 1"));
        }
        let (h_out, w_out, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h_in < k_h || w_in < k_w {
                    return Err(Error::shape(format!(
                        "valid conv: input {h_in}x{w_in} smaller than kernel {k_h}x{k_w}"
                    )));
                }
                ((h_in - k_h) / stride + 1, (w_in - k_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let h_out = h_in.div_ceil(stride);
                let w_out = w_in.div_ceil(stride);
                let pad_h = ((h_out - 1) * stride + k_h).saturating_sub(h_in);
                let pad_w = ((w_out - 1) * stride + k_w).saturating_sub(w_in);
                (h_out, w_out, pad_h / 2, pad_w / 2)
            }
        };
        Ok(Conv2dGeometry {
            h_in,
            w_in,
            c_in,
            k_h,
            k_w,
            c_out,
            stride,
            pad_top,
            pad_left,
            h_out,
            w_out,
        })
    }

    pub fn input_len(&self) -> usize {
        self.h_in * self.w_in * self.c_in
    }

    pub fn output_len(&self) -> usize {
        self.h_out * self.w_out * self.c_out
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.h_out, self.w_out, self.c_out]
    }

    /// Patch length: rows of the kernel matrix.
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.c_in
    }

    /// Number of output pixels: rows of the im2col matrix.
    pub fn pixels(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Fill `col` (`pixels x patch_len`, row-major) with input patches; padding
/// positions become zero.
pub fn im2col(geom: &Conv2dGeometry, input: &[f64], col: &mut [f64]) {
    debug_assert_eq!(input.len(), geom.input_len());
    debug_assert_eq!(col.len(), geom.pixels() * geom.patch_len());
    let kl = geom.patch_len();
    for oh in 0..geom.h_out {
        for ow in 0..geom.w_out {
            let row = (oh * geom.w_out + ow) * kl;
            let mut idx = row;
            let ih0 = (oh * geom.stride) as isize - geom.pad_top as isize;
            let iw0 = (ow * geom.stride) as isize - geom.pad_left as isize;
            for kh in 0..geom.k_h {
                let ih = ih0 + kh as isize;
                for kw in 0..geom.k_w {
                    let iw = iw0 + kw as isize;
                    if ih >= 0 && (ih as usize) < geom.h_in && iw >= 0 && (iw as usize) < geom.w_in
                    {
                        let src = ((ih as usize) * geom.w_in + iw as usize) * geom.c_in;
                        col[idx..idx + geom.c_in].copy_from_slice(&input[src..src + geom.c_in]);
                    } else {
                        col[idx..idx + geom.c_in].fill(0.0);
                    }
                    idx += geom.c_in;
                }
            }
        }
    }
}

/// Forward convolution into a caller-provided buffer, reusing `col` scratch.
pub fn conv2d_forward_into(
    geom: &Conv2dGeometry,
    input: &[f64],
    kernel: &[f64],
    col: &mut Vec<f64>,
    out: &mut [f64],
) {
    debug_assert_eq!(kernel.len(), geom.patch_len() * geom.c_out);
    debug_assert_eq!(out.len(), geom.output_len());
    col.resize(geom.pixels() * geom.patch_len(), 0.0);
    im2col(geom, input, col);
    out.fill(0.0);
    gemm_acc(
        out,
        col,
        kernel,
        geom.pixels(),
        geom.patch_len(),
        geom.c_out,
    );
}

/// Cross-correlation of `input [H,W,Cin]` with `kernel [kH,kW,Cin,Cout]`.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let geom = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = Tensor::zeros(&geom.output_shape());
    let mut col = Vec::new();
    conv2d_forward_into(&geom, input.data(), kernel.data(), &mut col, out.data_mut());
    Ok(out)
}

/// Adjoint of the forward map: scatter output-gradients back to the input.
/// `grad_in` is overwritten. `kernel_t` scratch holds the transposed kernel.
pub fn conv2d_input_grad_into(
    geom: &Conv2dGeometry,
    kernel: &[f64],
    grad_out: &[f64],
    col_grad: &mut Vec<f64>,
    kernel_t: &mut Vec<f64>,
    grad_in: &mut [f64],
) {
    debug_assert_eq!(grad_out.len(), geom.output_len());
    debug_assert_eq!(grad_in.len(), geom.input_len());
    let kl = geom.patch_len();
    // col_grad = grad_out · kernelᵀ
    if kernel_t.len() != kernel.len() {
        *kernel_t = transpose(kernel, kl, geom.c_out);
    }
    col_grad.clear();
    col_grad.resize(geom.pixels() * kl, 0.0);
    gemm_acc(col_grad, grad_out, kernel_t, geom.pixels(), geom.c_out, kl);
    // col2im scatter-add
    grad_in.fill(0.0);
    for oh in 0..geom.h_out {
        for ow in 0..geom.w_out {
            let row = (oh * geom.w_out + ow) * kl;
            let mut idx = row;
            let ih0 = (oh * geom.stride) as isize - geom.pad_top as isize;
            let iw0 = (ow * geom.stride) as isize - geom.pad_left as isize;
            for kh in 0..geom.k_h {
                let ih = ih0 + kh as isize;
                for kw in 0..geom.k_w {
                    let iw = iw0 + kw as isize;
                    if ih >= 0 && (ih as usize) < geom.h_in && iw >= 0 && (iw as usize) < geom.w_in
                    {
                        let dst = ((ih as usize) * geom.w_in + iw as usize) * geom.c_in;
                        for c in 0..geom.c_in {
                            grad_in[dst + c] += col_grad[idx + c];
                        }
                    }
                    idx += geom.c_in;
                }
            }
        }
    }
}

/// Adjoint map as a standalone operation (allocating).
pub fn conv2d_input_grad(
    geom: &Conv2dGeometry,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<Tensor> {
    if grad_out.len() != geom.output_len() {
        return Err(Error::shape(format!(
            "conv adjoint: expected {} output values, got {}",
            geom.output_len(),
            grad_out.len()
        )));
    }
    let mut grad_in = Tensor::zeros(&[geom.h_in, geom.w_in, geom.c_in]);
    let mut col_grad = Vec::new();
    let mut kernel_t = Vec::new();
    conv2d_input_grad_into(
        geom,
        kernel.data(),
        grad_out.data(),
        &mut col_grad,
        &mut kernel_t,
        grad_in.data_mut(),
    );
    Ok(grad_in)
}

/// Accumulate kernel gradients: `grad_kernel += im2col(input)ᵀ · grad_out`.
pub fn conv2d_kernel_grad(
    geom: &Conv2dGeometry,
    input: &[f64],
    grad_out: &[f64],
    col: &mut Vec<f64>,
    col_t: &mut Vec<f64>,
    grad_kernel: &mut [f64],
) {
    let kl = geom.patch_len();
    debug_assert_eq!(grad_kernel.len(), kl * geom.c_out);
    col.resize(geom.pixels() * kl, 0.0);
    im2col(geom, input, col);
    col_t.clear();
    col_t.extend_from_slice(&transpose(col, geom.pixels(), kl));
    gemm_acc(grad_kernel, col_t, grad_out, kl, geom.pixels(), geom.c_out);
}
