//! Operator norms used as sensitivity bounds.
//!
//! Supported pairs for explicit matrices: (1,1) max column 1-norm,
//! (1,2) max column 2-norm, (2,2) largest singular value via power
//! iteration, (∞,∞) max row 1-norm. Convolutions get their (1,q) norms
//! straight from the kernel coefficients, and their (2,2) norm through the
//! implicit-map power iteration so the convolution matrix is never
//! materialized.

use super::{l2_norm, MatrixView, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Maximum power-iteration rounds. Fixed so sensitivity bounds are
/// reproducible run to run.
pub const POWER_ITER_MAX: usize = 100;
/// Relative convergence tolerance for power iteration.
pub const POWER_ITER_TOL: f64 = 1e-6;

/// Norm index for inputs/outputs of an operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormIndex {
    One,
    Two,
    Inf,
}

impl std::fmt::Display for NormIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormIndex::One => write!(f, "1"),
            NormIndex::Two => write!(f, "2"),
            NormIndex::Inf => write!(f, "inf"),
        }
    }
}

/// The (p, q) operator-norm pairs with direct formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPair {
    OneOne,
    OneTwo,
    TwoTwo,
    InfInf,
}

impl NormPair {
    pub fn from_indices(p: NormIndex, q: NormIndex) -> Result<Self> {
        match (p, q) {
            (NormIndex::One, NormIndex::One) => Ok(NormPair::OneOne),
            (NormIndex::One, NormIndex::Two) => Ok(NormPair::OneTwo),
            (NormIndex::Two, NormIndex::Two) => Ok(NormPair::TwoTwo),
            (NormIndex::Inf, NormIndex::Inf) => Ok(NormPair::InfInf),
            (p, q) => Err(Error::UnsupportedNormPair {
                p: p.to_string(),
                q: q.to_string(),
            }),
        }
    }
}

/// Operator norm of an explicit matrix for a supported (p, q) pair.
///
/// The (2,2) case runs power iteration on `WᵀW`; the estimate converges
/// from below, so callers that need a certified upper bound must apply
/// the safety factor (see `sensitivity`).
pub fn matrix_norm(w: &MatrixView<'_>, pair: NormPair) -> f64 {
    match pair {
        NormPair::OneOne => max_column_norm(w, false),
        NormPair::OneTwo => max_column_norm(w, true),
        NormPair::InfInf => (0..w.rows())
            .map(|i| w.row(i).iter().map(|v| v.abs()).sum())
            .fold(0.0, f64::max),
        NormPair::TwoTwo => {
            let est = power_iteration_spectral(
                |x| w.matvec(x).expect("matvec shape"),
                |y| w.matvec_t(y).expect("matvec_t shape"),
                w.cols(),
                POWER_ITER_MAX,
                POWER_ITER_TOL,
            );
            est.value
        }
    }
}

fn max_column_norm(w: &MatrixView<'_>, euclidean: bool) -> f64 {
    let mut best = 0.0f64;
    for j in 0..w.cols() {
        let mut acc = 0.0;
        for i in 0..w.rows() {
            let v = w.get(i, j);
            acc += if euclidean { v * v } else { v.abs() };
        }
        best = best.max(if euclidean { acc.sqrt() } else { acc });
    }
    best
}

/// Max over input channels of the q-norm of all kernel coefficients that
/// read from that channel. This is the (1, q) operator norm of the
/// materialized convolution matrix whenever some input position sees the
/// full kernel footprint, and an upper bound otherwise (strides or padding
/// can only drop coefficients from a column).
pub fn conv_column_norms(kernel: &Tensor, q: NormIndex) -> Result<f64> {
    let [k_h, k_w, c_in, c_out] = match kernel.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => {
            return Err(Error::shape(format!(
                "conv kernel must be [kH,kW,Cin,Cout], got {s:?}"
            )))
        }
    };
    let euclidean = match q {
        NormIndex::One => false,
        NormIndex::Two => true,
        NormIndex::Inf => {
            return Err(Error::UnsupportedNormPair {
                p: "1".into(),
                q: "inf".into(),
            })
        }
    };
    let data = kernel.data();
    let mut best = 0.0f64;
    for ci in 0..c_in {
        let mut acc = 0.0;
        for kh in 0..k_h {
            for kw in 0..k_w {
                let base = ((kh * k_w + kw) * c_in + ci) * c_out;
                for co in 0..c_out {
                    let v = data[base + co];
                    acc += if euclidean { v * v } else { v.abs() };
                }
            }
        }
        best = best.max(if euclidean { acc.sqrt() } else { acc });
    }
    Ok(best)
}

/// Result of a spectral-norm power iteration.
#[derive(Debug, Clone, Copy)]
pub struct SpectralEstimate {
    /// Largest-singular-value estimate (converges from below).
    pub value: f64,
    /// Whether the relative tolerance was met within the iteration budget.
    pub converged: bool,
    /// Iterations actually used.
    pub iterations: usize,
}

/// Estimate the largest singular value of a linear map given as a pair of
/// mutually adjoint closures. The start vector is drawn from a fixed seed so
/// repeated calls give identical results.
pub fn power_iteration_spectral(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_transpose: impl Fn(&[f64]) -> Vec<f64>,
    dim_in: usize,
    max_iters: usize,
    tol: f64,
) -> SpectralEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITER_SEED);
    let mut v: Vec<f64> = (0..dim_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = l2_norm(&v);
    if nv == 0.0 {
        return SpectralEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    v.iter_mut().for_each(|x| *x /= nv);

    let mut sigma = 0.0;
    for it in 1..=max_iters {
        let u = apply(&v);
        let new_sigma = l2_norm(&u);
        if new_sigma == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
            };
        }
        let w = apply_transpose(&u);
        let nw = l2_norm(&w);
        let done = (new_sigma - sigma).abs() <= tol * new_sigma.max(f64::MIN_POSITIVE);
        sigma = new_sigma;
        if nw == 0.0 || done {
            return SpectralEstimate {
                value: sigma,
                converged: true,
                iterations: it,
            };
        }
        let inv = 1.0 / nw;
        v = w;
        v.iter_mut().for_each(|x| *x *= inv);
    }
    SpectralEstimate {
        value: sigma,
        converged: false,
        iterations: max_iters,
    }
}

/// Fixed, arbitrary seed for power-iteration start vectors.
const POWER_ITER_SEED: u64 = 0x7bf0_31a5_9d2e_11c3;
