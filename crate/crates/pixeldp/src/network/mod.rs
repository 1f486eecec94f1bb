//! Layer-sequence networks with a single calibrated noise layer.
//!
//! A [`NetworkSpec`] is a pure chain of layers (no skip connections), exactly
//! one of which is a [`LayerSpec::Noise`]. The pre-noise prefix has a proved
//! sensitivity bound `prenoise_delta`, and the noise σ is tied to it by the
//! mechanism formula — both are validated at construction and again when a
//! model is loaded from disk. Everything after the noise layer is ordinary
//! post-processing and needs no constraints.

mod exec;
mod serialize;

pub use exec::{GradientBatch, LayerGrads, LossSpec, Mode};
pub use serialize::{load_model, save_model};

use crate::dp::{DPParams, Mechanism, NoiseSpec};
use crate::sensitivity::{
    prenoise_sensitivity_of, InputNorm, OutputNorm, SensitivityBound,
};
use crate::tensor::{Conv2dGeometry, Padding, Tensor};
use crate::{Error, Result};

/// Slack allowed when revalidating that the measured pre-noise sensitivity
/// does not exceed the calibration bound (covers projection tolerance and
/// f32 checkpoint rounding).
pub const DELTA_REVALIDATION_SLACK: f64 = 2e-6;
/// Tolerance for the σ-formula invariant.
pub const SIGMA_MATCH_TOL: f64 = 1e-12;

/// User-facing layer description; geometry and noise σ are resolved when the
/// network is built.
#[derive(Debug, Clone)]
pub enum LayerDef {
    /// Fully connected layer; `weights` stored `[inputs, outputs]`.
    Dense { weights: Tensor, bias: Tensor },
    Conv2D {
        kernel: Tensor,
        stride: usize,
        padding: Padding,
    },
    ReLU,
    Flatten,
    /// Shape adapter (e.g. dense decoder output back to an image). Purely a
    /// relabeling of coordinates; norm-preserving.
    Reshape(Vec<usize>),
    Softmax,
    /// The unique noise layer; σ is computed from the DP parameters and the
    /// pre-noise sensitivity.
    Noise,
}

/// A resolved layer inside a built network.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Dense { weights: Tensor, bias: Tensor },
    Conv2D {
        kernel: Tensor,
        stride: usize,
        padding: Padding,
        geom: Conv2dGeometry,
    },
    ReLU,
    Flatten,
    Reshape(Vec<usize>),
    Softmax,
    Noise(NoiseSpec),
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::ReLU => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape(_) => "reshape",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Noise(_) => "noise",
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. })
    }

    /// Number of stored parameters (weights + biases).
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Dense { weights, bias } => weights.len() + bias.len(),
            LayerSpec::Conv2D { kernel, .. } => kernel.len(),
            _ => 0,
        }
    }
}

/// Post-softmax label scores: entries in [0, 1] summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        let sum: f64 = scores.iter().sum();
        if scores.iter().any(|&s| !(0.0..=1.0 + 1e-9).contains(&s)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!(
                "scores are not a probability distribution (sum = {sum})"
            )));
        }
        Ok(ScoreVector(scores))
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Winning label; ties break to the lowest index for determinism.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.0)
    }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate().skip(1) {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// A feed-forward network with one noise layer and a certified pre-noise
/// sensitivity calibration.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    /// Output shape after each layer (`shapes[i]` = output of layer i).
    shapes: Vec<Vec<usize>>,
    noise_index: usize,
    p: InputNorm,
    dp: DPParams,
    prenoise_delta: SensitivityBound,
}

impl NetworkSpec {
    /// Build a network, calibrating σ to the *measured* pre-noise
    /// sensitivity of the given layers.
    pub fn new(
        input_shape: &[usize],
        defs: Vec<LayerDef>,
        p: InputNorm,
        dp: DPParams,
    ) -> Result<Self> {
        Self::build(input_shape, defs, p, dp, None)
    }

    /// Build a network calibrated for a fixed sensitivity bound
    /// `delta_calibration` (normally 1.0, the value training projections
    /// enforce). The measured sensitivity must not exceed it.
    pub fn with_calibrated_delta(
        input_shape: &[usize],
        defs: Vec<LayerDef>,
        p: InputNorm,
        dp: DPParams,
        delta_calibration: f64,
    ) -> Result<Self> {
        Self::build(input_shape, defs, p, dp, Some(delta_calibration))
    }

    fn build(
        input_shape: &[usize],
        defs: Vec<LayerDef>,
        p: InputNorm,
        dp: DPParams,
        calibration: Option<f64>,
    ) -> Result<Self> {
        dp.validate()?;
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("bad input shape {input_shape:?}")));
        }
        let noise_count = defs
            .iter()
            .filter(|d| matches!(d, LayerDef::Noise))
            .count();
        if noise_count != 1 {
            return Err(Error::InvalidNetwork(format!(
                "expected exactly one noise layer, found {noise_count}"
            )));
        }

        // Resolve shapes and geometry layer by layer.
        let mut layers = Vec::with_capacity(defs.len());
        let mut shapes = Vec::with_capacity(defs.len());
        let mut cur: Vec<usize> = input_shape.to_vec();
        let mut noise_index = 0;
        for (i, def) in defs.into_iter().enumerate() {
            let cur_len: usize = cur.iter().product();
            let resolved = match def {
                LayerDef::Dense { weights, bias } => {
                    let (w_in, w_out) = match weights.shape() {
                        [a, b] => (*a, *b),
                        s => {
                            return Err(Error::shape(format!(
                                "dense weights must be [in, out], got {s:?}"
                            )))
                        }
                    };
                    if bias.len() != w_out {
                        return Err(Error::shape(format!(
                            "dense bias length {} does not match outputs {w_out}",
                            bias.len()
                        )));
                    }
                    if w_in != cur_len {
                        return Err(Error::shape(format!(
                            "layer {i}: dense expects {w_in} inputs, chain provides {cur_len}"
                        )));
                    }
                    cur = vec![w_out];
                    LayerSpec::Dense { weights, bias }
                }
                LayerDef::Conv2D {
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 {
                        return Err(Error::shape(format!(
                            "layer {i}: conv2d needs an [H,W,C] input, chain provides {cur:?}"
                        )));
                    }
                    let geom = Conv2dGeometry::new(&cur, kernel.shape(), stride, padding)?;
                    cur = geom.output_shape().to_vec();
                    LayerSpec::Conv2D {
                        kernel,
                        stride,
                        padding,
                        geom,
                    }
                }
                LayerDef::ReLU => LayerSpec::ReLU,
                LayerDef::Flatten => {
                    cur = vec![cur_len];
                    LayerSpec::Flatten
                }
                LayerDef::Reshape(shape) => {
                    let n: usize = shape.iter().product();
                    if n != cur_len {
                        return Err(Error::shape(format!(
                            "layer {i}: cannot reshape {cur_len} values to {shape:?}"
                        )));
                    }
                    cur = shape.clone();
                    LayerSpec::Reshape(shape)
                }
                LayerDef::Softmax => LayerSpec::Softmax,
                LayerDef::Noise => {
                    noise_index = i;
                    // σ resolved below once the pre-noise sensitivity is known.
                    LayerSpec::Noise(NoiseSpec::new(dp.mechanism, 0.0, cur.clone())?)
                }
            };
            layers.push(resolved);
            shapes.push(cur.clone());
        }

        // Softmax may only appear as the final layer.
        for (i, l) in layers.iter().enumerate() {
            if matches!(l, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(Error::InvalidNetwork(format!(
                    "softmax at layer {i} is not the final layer"
                )));
            }
        }

        let q = mechanism_output_norm(dp.mechanism);
        let input_len: usize = input_shape.iter().product();
        let measured = prenoise_sensitivity_of(&layers[..noise_index], input_len, p, q)?;
        let delta_cal = calibration.unwrap_or(measured.value);
        if measured.value > delta_cal * (1.0 + DELTA_REVALIDATION_SLACK) + 1e-12 {
            return Err(Error::InvalidNetwork(format!(
                "measured pre-noise sensitivity {} exceeds calibration {delta_cal}",
                measured.value
            )));
        }
        let prenoise_delta = SensitivityBound::new(p, q, delta_cal)?;
        let sigma = dp.sigma_for(delta_cal)?;
        if let LayerSpec::Noise(spec) = &mut layers[noise_index] {
            spec.sigma = sigma;
        }

        let net = NetworkSpec {
            layers,
            input_shape: input_shape.to_vec(),
            shapes,
            noise_index,
            p,
            dp,
            prenoise_delta,
        };
        net.audit_chain()?;
        Ok(net)
    }

    /// Re-check the structural invariants: a pure chain with exactly one
    /// noise layer, consistent shapes, σ tied to the calibration bound, and
    /// measured sensitivity within it. The chain structure itself guarantees
    /// the pre-noise input is never read again after the noise layer.
    pub fn audit_chain(&self) -> Result<()> {
        let noise_count = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Noise(_)))
            .count();
        if noise_count != 1 || !matches!(self.layers[self.noise_index], LayerSpec::Noise(_)) {
            return Err(Error::InvalidNetwork(
                "network must contain exactly one noise layer at noise_index".into(),
            ));
        }
        let q = mechanism_output_norm(self.dp.mechanism);
        let input_len: usize = self.input_shape.iter().product();
        let measured =
            prenoise_sensitivity_of(&self.layers[..self.noise_index], input_len, self.p, q)?;
        if measured.value
            > self.prenoise_delta.value * (1.0 + DELTA_REVALIDATION_SLACK) + 1e-12
        {
            return Err(Error::InvalidNetwork(format!(
                "measured pre-noise sensitivity {} exceeds calibration {}",
                measured.value, self.prenoise_delta.value
            )));
        }
        let expect_sigma = self.dp.sigma_for(self.prenoise_delta.value)?;
        if (self.sigma() - expect_sigma).abs() > SIGMA_MATCH_TOL {
            return Err(Error::InvalidNetwork(format!(
                "noise sigma {} does not match mechanism formula {expect_sigma}",
                self.sigma()
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty network")
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Shape of the output of layer `i`.
    pub fn shape_after(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn noise_index(&self) -> usize {
        self.noise_index
    }

    pub fn attack_norm(&self) -> InputNorm {
        self.p
    }

    pub fn dp(&self) -> &DPParams {
        &self.dp
    }

    pub fn prenoise_delta(&self) -> &SensitivityBound {
        &self.prenoise_delta
    }

    pub fn sigma(&self) -> f64 {
        match &self.layers[self.noise_index] {
            LayerSpec::Noise(spec) => spec.sigma,
            _ => unreachable!("noise_index always points at the noise layer"),
        }
    }

    pub(crate) fn noise_spec(&self) -> &NoiseSpec {
        match &self.layers[self.noise_index] {
            LayerSpec::Noise(spec) => spec,
            _ => unreachable!(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.output_len()
    }

    pub fn ends_with_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }
}

pub(crate) fn mechanism_output_norm(m: Mechanism) -> OutputNorm {
    match m {
        Mechanism::Laplace => OutputNorm::L1,
        Mechanism::Gaussian => OutputNorm::L2,
    }
}

/// Stack a classifier on top of a trained noise-carrying autoencoder. The
/// DP guarantee of the autoencoder carries through arbitrary post-processing,
/// so the combined network keeps the autoencoder's noise index, calibration,
/// and σ unchanged.
pub fn stack_autoencoder(ae: &NetworkSpec, classifier: Vec<LayerDef>) -> Result<NetworkSpec> {
    if classifier
        .iter()
        .any(|d| matches!(d, LayerDef::Noise))
    {
        return Err(Error::InvalidNetwork(
            "classifier must not contain a noise layer; the autoencoder provides it".into(),
        ));
    }
    let mut layers = Vec::with_capacity(ae.layers.len() + classifier.len());
    let mut shapes = ae.shapes.clone();
    let mut cur = ae.output_shape().to_vec();
    layers.extend(ae.layers.iter().cloned());
    for (i, def) in classifier.into_iter().enumerate() {
        let cur_len: usize = cur.iter().product();
        let resolved = match def {
            LayerDef::Dense { weights, bias } => {
                let (w_in, w_out) = (weights.shape()[0], weights.shape()[1]);
                if w_in != cur_len {
                    return Err(Error::shape(format!(
                        "classifier layer {i}: dense expects {w_in} inputs, autoencoder provides {cur_len}"
                    )));
                }
                if bias.len() != w_out {
                    return Err(Error::shape("dense bias length mismatch".into()));
                }
                cur = vec![w_out];
                LayerSpec::Dense { weights, bias }
            }
            LayerDef::Conv2D {
                kernel,
                stride,
                padding,
            } => {
                if cur.len() != 3 {
                    return Err(Error::shape(format!(
                        "classifier layer {i}: conv2d needs [H,W,C], got {cur:?}"
                    )));
                }
                let geom = Conv2dGeometry::new(&cur, kernel.shape(), stride, padding)?;
                cur = geom.output_shape().to_vec();
                LayerSpec::Conv2D {
                    kernel,
                    stride,
                    padding,
                    geom,
                }
            }
            LayerDef::ReLU => LayerSpec::ReLU,
            LayerDef::Flatten => {
                cur = vec![cur_len];
                LayerSpec::Flatten
            }
            LayerDef::Reshape(shape) => {
                let n: usize = shape.iter().product();
                if n != cur_len {
                    return Err(Error::shape(format!(
                        "classifier layer {i}: cannot reshape {cur_len} values to {shape:?}"
                    )));
                }
                cur = shape.clone();
                LayerSpec::Reshape(shape)
            }
            LayerDef::Softmax => LayerSpec::Softmax,
            LayerDef::Noise => unreachable!("rejected above"),
        };
        layers.push(resolved);
        shapes.push(cur.clone());
    }
    for (i, l) in layers.iter().enumerate() {
        if matches!(l, LayerSpec::Softmax) && i + 1 != layers.len() {
            return Err(Error::InvalidNetwork(format!(
                "softmax at layer {i} is not the final layer"
            )));
        }
    }
    let net = NetworkSpec {
        layers,
        input_shape: ae.input_shape.clone(),
        shapes,
        noise_index: ae.noise_index,
        p: ae.p,
        dp: ae.dp,
        prenoise_delta: ae.prenoise_delta,
    };
    net.audit_chain()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::DPParams;

    pub(crate) fn identity_dense(n: usize, scale: f64) -> LayerDef {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = scale;
        }
        LayerDef::Dense {
            weights: w,
            bias: Tensor::zeros(&[n]),
        }
    }

    #[test]
    fn builds_noise_at_input_network() {
        let dp = DPParams::laplace(1.0, 0.1).unwrap();
        let net = NetworkSpec::new(
            &[4],
            vec![
                LayerDef::Noise,
                identity_dense(4, 1.0),
                LayerDef::ReLU,
                identity_dense(4, 1.0),
                LayerDef::Softmax,
            ],
            InputNorm::L1,
            dp,
        )
        .unwrap();
        assert_eq!(net.noise_index(), 0);
        assert_eq!(net.prenoise_delta().value, 1.0);
        let expect = crate::dp::laplace_sigma(1.0, 0.1, 1.0).unwrap();
        assert!((net.sigma() - expect).abs() < 1e-15);
        net.audit_chain().unwrap();
    }

    #[test]
    fn rejects_zero_or_two_noise_layers() {
        let dp = DPParams::laplace(1.0, 0.1).unwrap();
        assert!(NetworkSpec::new(&[4], vec![identity_dense(4, 1.0)], InputNorm::L1, dp).is_err());
        assert!(NetworkSpec::new(
            &[4],
            vec![LayerDef::Noise, LayerDef::Noise],
            InputNorm::L1,
            dp
        )
        .is_err());
    }

    #[test]
    fn rejects_interior_softmax() {
        let dp = DPParams::laplace(1.0, 0.1).unwrap();
        assert!(NetworkSpec::new(
            &[4],
            vec![LayerDef::Noise, LayerDef::Softmax, LayerDef::ReLU],
            InputNorm::L1,
            dp
        )
        .is_err());
    }

    #[test]
    fn measured_delta_feeds_sigma() {
        // dense diag(2,2), then ReLU, then noise: Δ_{2,2} = 2
        let dp = DPParams::gaussian(1.0, 0.05, 0.1).unwrap();
        let net = NetworkSpec::new(
            &[2],
            vec![
                identity_dense(2, 2.0),
                LayerDef::ReLU,
                LayerDef::Noise,
                identity_dense(2, 1.0),
                LayerDef::Softmax,
            ],
            InputNorm::L2,
            dp,
        )
        .unwrap();
        assert!((net.prenoise_delta().value - 2.0).abs() < 1e-4);
        let expect = crate::dp::gaussian_sigma(net.prenoise_delta().value, 0.1, 1.0, 0.05).unwrap();
        assert!((net.sigma() - expect).abs() < 1e-15);
    }

    #[test]
    fn calibration_must_dominate_measured() {
        let dp = DPParams::gaussian(1.0, 0.05, 0.1).unwrap();
        let err = NetworkSpec::with_calibrated_delta(
            &[2],
            vec![identity_dense(2, 2.0), LayerDef::Noise, LayerDef::Softmax],
            InputNorm::L2,
            dp,
            1.0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn score_vector_argmax_breaks_ties_low() {
        let s = ScoreVector::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(s.argmax(), 0);
        let s = ScoreVector::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(s.argmax(), 1);
    }
}
