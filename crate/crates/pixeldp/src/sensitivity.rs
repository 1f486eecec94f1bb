//! Certified sensitivity bounds Δ_{p,q} for the pre-noise computation.
//!
//! The noise layer's σ is proportional to Δ_{p,q}: the maximum q-norm change
//! of the pre-noise output per unit p-norm change of the input. Everything
//! here returns *proved upper bounds* — iterative estimates (spectral norms)
//! are inflated by [`SPECTRAL_SAFETY`] so a certificate never leans on solver
//! optimism. Unsupported layers fail loudly: a silently wrong Δ would void
//! every certificate downstream.
//!
//! ∞-norm input bounds are inherently loose. For a linear layer `W` (m
//! outputs, n inputs) we use `min(√n·‖W‖₂,₂, √m·‖W‖∞,∞)` for q = 2 and
//! `min(m·‖W‖∞,∞, √(nm)·‖W‖₂,₂)` for q = 1, and restrict ∞-norm
//! certification to noise placed at the input or right after one linear
//! layer.

use crate::network::LayerSpec;
use crate::tensor::{
    conv_column_norms, matrix_norm, power_iteration_spectral, transpose, MatrixView, NormIndex,
    NormPair, Tensor, POWER_ITER_MAX, POWER_ITER_TOL,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Safety factor applied to power-iteration spectral estimates before they
/// are used as sensitivity bounds (the iteration converges from below).
pub const SPECTRAL_SAFETY: f64 = 1.0 + 10.0 * POWER_ITER_TOL;

/// Input-side norm index p ∈ {1, 2, ∞}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputNorm {
    L1,
    L2,
    #[serde(rename = "linf")]
    LInf,
}

/// Output-side norm index q ∈ {1, 2} (what the DP mechanisms support).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputNorm {
    L1,
    L2,
}

impl OutputNorm {
    pub fn as_input(self) -> InputNorm {
        match self {
            OutputNorm::L1 => InputNorm::L1,
            OutputNorm::L2 => InputNorm::L2,
        }
    }

    fn norm_index(self) -> NormIndex {
        match self {
            OutputNorm::L1 => NormIndex::One,
            OutputNorm::L2 => NormIndex::Two,
        }
    }
}

impl std::fmt::Display for InputNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputNorm::L1 => write!(f, "1"),
            InputNorm::L2 => write!(f, "2"),
            InputNorm::LInf => write!(f, "inf"),
        }
    }
}

impl std::fmt::Display for OutputNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutputNorm::L1 => write!(f, "1"),
            OutputNorm::L2 => write!(f, "2"),
        }
    }
}

/// A proved upper bound on Δ_{p,q}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBound {
    pub p: InputNorm,
    pub q: OutputNorm,
    pub value: f64,
}

impl SensitivityBound {
    pub fn new(p: InputNorm, q: OutputNorm, value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::param(format!(
                "sensitivity bound must be finite and >= 0, got {value}"
            )));
        }
        Ok(SensitivityBound { p, q, value })
    }
}

/// Sequential composition: Δ^{g2∘g1}_{p,q} ≤ Δ^{g1}_{p,r} · Δ^{g2}_{r,q}.
/// The inner norm indices must match.
pub fn compose(d1: &SensitivityBound, d2: &SensitivityBound) -> Result<SensitivityBound> {
    if d1.q.as_input() != d2.p {
        return Err(Error::param(format!(
            "compose: inner norms disagree ({} vs {})",
            d1.q, d2.p
        )));
    }
    SensitivityBound::new(d1.p, d2.q, d1.value * d2.value)
}

/// Surrogate bounds on Δ_{∞,q} for a linear operator given as its matrix
/// (rows = outputs, columns = inputs). Tight ∞-norm operator bounds are
/// computationally hard; these are the cheap sound ones.
pub fn inf_input_bound(w: &MatrixView<'_>, q: OutputNorm) -> Result<SensitivityBound> {
    let m = w.rows() as f64;
    let n = w.cols() as f64;
    let row_norm = matrix_norm(w, NormPair::InfInf);
    let spectral = matrix_norm(w, NormPair::TwoTwo) * SPECTRAL_SAFETY;
    let value = match q {
        // ‖Wx‖₂ ≤ ‖W‖₂,₂‖x‖₂ ≤ √n‖W‖₂,₂‖x‖∞ and ‖Wx‖₂ ≤ √m‖Wx‖∞ ≤ √m‖W‖∞,∞‖x‖∞
        OutputNorm::L2 => (n.sqrt() * spectral).min(m.sqrt() * row_norm),
        // ‖Wx‖₁ ≤ m‖Wx‖∞ ≤ m‖W‖∞,∞‖x‖∞ and ‖Wx‖₁ ≤ √m‖Wx‖₂ ≤ √(nm)‖W‖₂,₂‖x‖∞
        OutputNorm::L1 => (m * row_norm).min((n * m).sqrt() * spectral),
    };
    SensitivityBound::new(InputNorm::LInf, q, value)
}

/// Pre-noise sensitivity of a single layer for the requested norm pair.
pub fn layer_sensitivity(layer: &LayerSpec, p: InputNorm, q: OutputNorm) -> Result<SensitivityBound> {
    let unsupported = |why: &str| Error::UnsupportedLayer {
        op: "layer_sensitivity",
        layer: format!("{} ({why})", layer.kind_name()),
    };
    match layer {
        LayerSpec::ReLU | LayerSpec::Flatten | LayerSpec::Reshape(_) => {
            // 1-Lipschitz coordinate-wise maps: Δ_{q,q} = 1, and Δ_{1,2} ≤ 1
            // since ‖v‖₂ ≤ ‖v‖₁. No finite dimension-free bound exists from
            // an ∞-norm input.
            match (p, q) {
                (InputNorm::L1, _) | (InputNorm::L2, OutputNorm::L2) => {
                    SensitivityBound::new(p, q, 1.0)
                }
                (InputNorm::L2, OutputNorm::L1) => Err(unsupported("(2,1) not supported")),
                (InputNorm::LInf, _) => Err(unsupported(
                    "∞-norm input requires noise at the input or after one linear layer",
                )),
            }
        }
        LayerSpec::Dense { weights, .. } => {
            // Stored [in, out]; the operator matrix is the transpose.
            let w_math = dense_operator_matrix(weights);
            let view = w_math.as_matrix()?;
            dense_sensitivity(&view, p, q)
        }
        LayerSpec::Conv2D { kernel, geom, .. } => match (p, q) {
            (InputNorm::L1, _) => {
                let v = conv_column_norms(kernel, q.norm_index())?;
                SensitivityBound::new(p, q, v)
            }
            (InputNorm::L2, OutputNorm::L2) => {
                let est = power_iteration_spectral(
                    |x| conv_apply(kernel, geom, x),
                    |y| conv_apply_t(kernel, geom, y),
                    geom.input_len(),
                    POWER_ITER_MAX,
                    POWER_ITER_TOL,
                );
                SensitivityBound::new(p, q, est.value * SPECTRAL_SAFETY)
            }
            (InputNorm::L2, OutputNorm::L1) => Err(unsupported("(2,1) not supported")),
            (InputNorm::LInf, _) => {
                let n = geom.input_len() as f64;
                let m = geom.output_len() as f64;
                let row_norm = conv_row_norm_bound(kernel);
                let spectral = power_iteration_spectral(
                    |x| conv_apply(kernel, geom, x),
                    |y| conv_apply_t(kernel, geom, y),
                    geom.input_len(),
                    POWER_ITER_MAX,
                    POWER_ITER_TOL,
                )
                .value
                    * SPECTRAL_SAFETY;
                let value = match q {
                    OutputNorm::L2 => (n.sqrt() * spectral).min(m.sqrt() * row_norm),
                    OutputNorm::L1 => (m * row_norm).min((n * m).sqrt() * spectral),
                };
                SensitivityBound::new(p, q, value)
            }
        },
        LayerSpec::Softmax => Err(unsupported("softmax before the noise layer is not certified")),
        LayerSpec::Noise(_) => Err(unsupported("noise layer has no deterministic sensitivity")),
    }
}

/// Composed sensitivity of a pre-noise prefix. `input_len` is the flattened
/// input dimension (needed for the ∞-norm identity bound).
pub fn prenoise_sensitivity_of(
    layers: &[LayerSpec],
    input_len: usize,
    p: InputNorm,
    q: OutputNorm,
) -> Result<SensitivityBound> {
    if layers.is_empty() {
        // Noise straight on the input: the pre-noise map is the identity.
        let value = match (p, q) {
            (InputNorm::L1, _) | (InputNorm::L2, OutputNorm::L2) => 1.0,
            (InputNorm::L2, OutputNorm::L1) => {
                return Err(Error::UnsupportedNormPair {
                    p: "2".into(),
                    q: "1".into(),
                })
            }
            // ‖α‖_q ≤ n^{1/q} ‖α‖_∞
            (InputNorm::LInf, OutputNorm::L1) => input_len as f64,
            (InputNorm::LInf, OutputNorm::L2) => (input_len as f64).sqrt(),
        };
        return SensitivityBound::new(p, q, value);
    }
    // First layer converts p -> q, the rest compose at (q, q).
    let mut bound = layer_sensitivity(&layers[0], p, q)?;
    for layer in &layers[1..] {
        let next = layer_sensitivity(layer, bound.q.as_input(), q)?;
        bound = compose(&bound, &next)?;
    }
    Ok(bound)
}

fn dense_sensitivity(w: &MatrixView<'_>, p: InputNorm, q: OutputNorm) -> Result<SensitivityBound> {
    let value = match (p, q) {
        (InputNorm::L1, OutputNorm::L1) => matrix_norm(w, NormPair::OneOne),
        (InputNorm::L1, OutputNorm::L2) => matrix_norm(w, NormPair::OneTwo),
        (InputNorm::L2, OutputNorm::L2) => matrix_norm(w, NormPair::TwoTwo) * SPECTRAL_SAFETY,
        (InputNorm::L2, OutputNorm::L1) => {
            return Err(Error::UnsupportedNormPair {
                p: "2".into(),
                q: "1".into(),
            })
        }
        (InputNorm::LInf, q) => return inf_input_bound(w, q),
    };
    SensitivityBound::new(p, q, value)
}

/// Operator-orientation copy of a dense layer's weights (stored `[in, out]`,
/// operator matrix is `[out, in]`).
pub(crate) fn dense_operator_matrix(weights: &Tensor) -> Tensor {
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    Tensor::new(vec![cols, rows], transpose(weights.data(), rows, cols))
        .expect("transpose preserves length and finiteness")
}

/// Upper bound on the max row 1-norm of the materialized convolution matrix:
/// for each output channel, the 1-norm of all its kernel coefficients.
fn conv_row_norm_bound(kernel: &Tensor) -> f64 {
    let s = kernel.shape();
    let (k_h, k_w, c_in, c_out) = (s[0], s[1], s[2], s[3]);
    let mut best = 0.0f64;
    for co in 0..c_out {
        let mut acc = 0.0;
        for patch in 0..k_h * k_w * c_in {
            acc += kernel.data()[patch * c_out + co].abs();
        }
        best = best.max(acc);
    }
    best
}

pub(crate) fn conv_apply(
    kernel: &Tensor,
    geom: &crate::tensor::Conv2dGeometry,
    x: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; geom.output_len()];
    let mut col = Vec::new();
    crate::tensor::conv2d_forward_into(geom, x, kernel.data(), &mut col, &mut out);
    out
}

pub(crate) fn conv_apply_t(
    kernel: &Tensor,
    geom: &crate::tensor::Conv2dGeometry,
    y: &[f64],
) -> Vec<f64> {
    let mut grad_in = vec![0.0; geom.input_len()];
    let (mut col_grad, mut kernel_t) = (Vec::new(), Vec::new());
    crate::tensor::conv2d_input_grad_into(
        geom,
        kernel.data(),
        y,
        &mut col_grad,
        &mut kernel_t,
        &mut grad_in,
    );
    grad_in
}
