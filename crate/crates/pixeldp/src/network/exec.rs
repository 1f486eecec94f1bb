//! Batched forward and reverse-mode execution.
//!
//! Batches are `[B, len]` tensors, one flattened example per row. Noise draws
//! are tied to substream indices (`first_draw + row`), so results do not
//! depend on how work is split across threads or batches. The noise draw is
//! treated as a constant during differentiation.

use super::{argmax_lowest, LayerSpec, NetworkSpec, ScoreVector};
use crate::dp::sample_noise_into;
use crate::rng::NoiseStream;
use crate::tensor::{
    conv2d_forward_into, conv2d_input_grad_into, conv2d_kernel_grad, gemm_acc, transpose,
    Conv2dGeometry, Tensor,
};
use crate::{Error, Result};
use rayon::prelude::*;

/// Whether a forward pass draws noise. Noisy mode adds one fresh draw per
/// batch row at the noise layer, from substream `first_draw + row`.
#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Deterministic,
    Noisy {
        stream: &'a NoiseStream,
        first_draw: u64,
    },
}

/// Loss attached to the network output.
pub enum LossSpec<'a> {
    /// Cross-entropy over softmax scores; one label per batch row.
    CrossEntropy(&'a [usize]),
    /// Mean squared error against per-row targets `[B, out_len]`.
    SquaredError(&'a Tensor),
}

/// Per-layer parameter gradients (summed over batch rows).
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { d_weights: Tensor, d_bias: Tensor },
    Conv2D { d_kernel: Tensor },
}

/// Result of a reverse-mode pass over a batch.
#[derive(Debug)]
pub struct GradientBatch {
    /// Per-row loss values.
    pub losses: Vec<f64>,
    /// Per-row input gradients, `[B, in_len]`.
    pub grad_input: Tensor,
    /// Parameter gradients summed over rows, aligned with the layer list.
    pub param_grads: Option<Vec<Option<LayerGrads>>>,
}

/// Cached transposes for repeated backward passes over an immutable network
/// (attacks, certification sweeps). Training recomputes them per step since
/// the weights change.
pub struct PreparedBackward {
    dense_w_t: Vec<Option<Tensor>>,
    conv_k_t: Vec<Option<Vec<f64>>>,
}

impl NetworkSpec {
    pub fn prepare_backward(&self) -> PreparedBackward {
        let mut dense_w_t = Vec::with_capacity(self.layers().len());
        let mut conv_k_t = Vec::with_capacity(self.layers().len());
        for layer in self.layers() {
            match layer {
                LayerSpec::Dense { weights, .. } => {
                    let (i, o) = (weights.shape()[0], weights.shape()[1]);
                    dense_w_t.push(Some(
                        Tensor::new(vec![o, i], transpose(weights.data(), i, o))
                            .expect("transpose preserves validity"),
                    ));
                    conv_k_t.push(None);
                }
                LayerSpec::Conv2D { kernel, geom, .. } => {
                    dense_w_t.push(None);
                    conv_k_t.push(Some(transpose(
                        kernel.data(),
                        geom.patch_len(),
                        geom.c_out,
                    )));
                }
                _ => {
                    dense_w_t.push(None);
                    conv_k_t.push(None);
                }
            }
        }
        PreparedBackward { dense_w_t, conv_k_t }
    }

    /// Forward pass over a batch `[B, in_len]` → `[B, out_len]`.
    pub fn forward_batch(&self, xs: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        let b = self.batch_rows(xs)?;
        self.forward_span(0, self.layers().len(), xs.clone(), b, mode)
    }

    /// Forward pass for one example; output has the network's output shape.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<Tensor> {
        if x.len() != self.input_len() {
            return Err(Error::shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_len()
            )));
        }
        let flat = x.clone().reshape(&[1, self.input_len()])?;
        let out = self.forward_span(0, self.layers().len(), flat, 1, mode)?;
        out.reshape(self.output_shape())
    }

    /// Forward to a score vector (requires a softmax head).
    pub fn score(&self, x: &Tensor, mode: Mode<'_>) -> Result<ScoreVector> {
        if !self.ends_with_softmax() {
            return Err(Error::InvalidNetwork(
                "score() requires a softmax output layer".into(),
            ));
        }
        let out = self.forward(x, mode)?;
        out.check_finite()?;
        ScoreVector::new(out.into_data())
    }

    /// `n` independent noisy forward passes for one input, sharing the
    /// deterministic pre-noise prefix. Draw `i` uses substream
    /// `first_draw + i`. Returns `[n, out_len]`.
    pub fn forward_noise_draws(
        &self,
        x: &Tensor,
        n: usize,
        stream: &NoiseStream,
        first_draw: u64,
    ) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::param("need at least one draw".into()));
        }
        if x.len() != self.input_len() {
            return Err(Error::shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_len()
            )));
        }
        let flat = x.clone().reshape(&[1, self.input_len()])?;
        let pre = self.forward_span(0, self.noise_index(), flat, 1, Mode::Deterministic)?;
        let expanded = replicate_rows(&pre, n);
        self.forward_span(
            self.noise_index(),
            self.layers().len(),
            expanded,
            n,
            Mode::Noisy { stream, first_draw },
        )
    }

    /// Reverse-mode pass over a batch: per-row losses, per-row input
    /// gradients, and optionally parameter gradients summed over rows.
    pub fn gradient_batch(
        &self,
        xs: &Tensor,
        loss: &LossSpec<'_>,
        mode: Mode<'_>,
        want_param_grads: bool,
        prepared: Option<&PreparedBackward>,
    ) -> Result<GradientBatch> {
        let b = self.batch_rows(xs)?;
        let n_layers = self.layers().len();
        let (inputs, output) = self.forward_span_cached(0, n_layers, xs.clone(), b, mode)?;
        let (losses, g, backto) = self.loss_head(loss, &inputs, &output, b)?;
        let mut param_grads = if want_param_grads {
            Some(vec![None; n_layers])
        } else {
            None
        };
        let grad_input =
            self.backward_span(0, backto, &inputs, g, b, param_grads.as_mut(), prepared)?;
        Ok(GradientBatch {
            losses,
            grad_input,
            param_grads,
        })
    }

    /// Single-example gradient (loss, input gradient, parameter gradients).
    pub fn gradient(
        &self,
        x: &Tensor,
        loss: &LossSpec<'_>,
        mode: Mode<'_>,
    ) -> Result<(f64, Tensor, Vec<Option<LayerGrads>>)> {
        let flat = x.clone().reshape(&[1, self.input_len()])?;
        let out = self.gradient_batch(&flat, loss, mode, true, None)?;
        let grad_x = out.grad_input.reshape(self.input_shape())?;
        Ok((
            out.losses[0],
            grad_x,
            out.param_grads.expect("requested param grads"),
        ))
    }

    /// Attack workhorse: mean loss over `n_draws` noisy passes and the
    /// gradient of that mean loss with respect to the input. The pre-noise
    /// prefix runs once; per-draw gradients are averaged at the noise layer
    /// (valid since the prefix is shared and differentiation treats the
    /// draws as constants).
    pub fn averaged_input_gradient(
        &self,
        x: &Tensor,
        label: usize,
        n_draws: usize,
        stream: &NoiseStream,
        first_draw: u64,
        prepared: Option<&PreparedBackward>,
    ) -> Result<(f64, Tensor)> {
        if !self.ends_with_softmax() {
            return Err(Error::InvalidNetwork(
                "attack gradients require a softmax head".into(),
            ));
        }
        let flat = x.clone().reshape(&[1, self.input_len()])?;
        let ni = self.noise_index();
        let n_layers = self.layers().len();
        // prefix, cached for the final backward
        let (pre_inputs, pre_out) =
            self.forward_span_cached(0, ni, flat, 1, Mode::Deterministic)?;
        // suffix over n draws
        let expanded = replicate_rows(&pre_out, n_draws);
        let labels = vec![label; n_draws];
        let (suf_inputs, suf_out) = self.forward_span_cached(
            ni,
            n_layers,
            expanded,
            n_draws,
            Mode::Noisy { stream, first_draw },
        )?;
        let (losses, g, backto) =
            self.loss_head(&LossSpec::CrossEntropy(&labels), &suf_inputs, &suf_out, n_draws)?;
        let g_noise = self.backward_span_offset(ni, backto, &suf_inputs, g, n_draws, prepared)?;
        // average the per-draw gradients at the pre-noise boundary
        let len = g_noise.len() / n_draws;
        let mut g_mean = Tensor::zeros(&[1, len]);
        for row in 0..n_draws {
            let src = &g_noise.data()[row * len..(row + 1) * len];
            for (dst, s) in g_mean.data_mut().iter_mut().zip(src) {
                *dst += s;
            }
        }
        let inv = 1.0 / n_draws as f64;
        g_mean.data_mut().iter_mut().for_each(|v| *v *= inv);
        let grad_flat = self.backward_span(0, ni, &pre_inputs, g_mean, 1, None, prepared)?;
        let mean_loss = losses.iter().sum::<f64>() * inv;
        Ok((mean_loss, grad_flat.reshape(self.input_shape())?))
    }

    fn batch_rows(&self, xs: &Tensor) -> Result<usize> {
        let in_len = self.input_len();
        match xs.shape() {
            [b, l] if *l == in_len => Ok(*b),
            s => Err(Error::shape(format!(
                "batch must be [B, {in_len}], got {s:?}"
            ))),
        }
    }

    /// Run layers `start..end` on an owned batch.
    fn forward_span(
        &self,
        start: usize,
        end: usize,
        xs: Tensor,
        b: usize,
        mode: Mode<'_>,
    ) -> Result<Tensor> {
        let mut cur = xs;
        for i in start..end {
            cur = self.apply_layer(i, cur, b, mode)?;
        }
        Ok(cur)
    }

    /// Like `forward_span` but keeps the inputs that backward needs.
    /// `inputs[i - start]` is the input of layer `i` (only for layers whose
    /// backward reads it).
    fn forward_span_cached(
        &self,
        start: usize,
        end: usize,
        xs: Tensor,
        b: usize,
        mode: Mode<'_>,
    ) -> Result<(Vec<Option<Tensor>>, Tensor)> {
        let mut inputs = Vec::with_capacity(end - start);
        let mut cur = xs;
        for i in start..end {
            if layer_backward_needs_input(&self.layers()[i]) {
                inputs.push(Some(cur.clone()));
            } else {
                inputs.push(None);
            }
            cur = self.apply_layer(i, cur, b, mode)?;
        }
        Ok((inputs, cur))
    }

    fn apply_layer(&self, idx: usize, xs: Tensor, b: usize, mode: Mode<'_>) -> Result<Tensor> {
        match &self.layers()[idx] {
            LayerSpec::Dense { weights, bias } => Ok(dense_forward(weights, bias, &xs, b)),
            LayerSpec::Conv2D { kernel, geom, .. } => Ok(conv_forward_batch(kernel, geom, &xs, b)),
            LayerSpec::ReLU => Ok(xs.map(|v| v.max(0.0))),
            LayerSpec::Flatten | LayerSpec::Reshape(_) => Ok(xs),
            LayerSpec::Softmax => softmax_rows(xs, b),
            LayerSpec::Noise(spec) => match mode {
                Mode::Deterministic => Ok(xs),
                Mode::Noisy { stream, first_draw } => Ok(add_noise_rows(
                    spec, xs, b, stream, first_draw,
                )),
            },
        }
    }

    /// Loss values, initial gradient, and the exclusive end of the backward
    /// walk (the softmax layer is fused into cross-entropy).
    fn loss_head(
        &self,
        loss: &LossSpec<'_>,
        inputs: &[Option<Tensor>],
        output: &Tensor,
        b: usize,
    ) -> Result<(Vec<f64>, Tensor, usize)> {
        let n_layers = self.layers().len();
        match loss {
            LossSpec::CrossEntropy(labels) => {
                if !self.ends_with_softmax() {
                    return Err(Error::InvalidNetwork(
                        "cross-entropy requires a softmax output layer".into(),
                    ));
                }
                if labels.len() != b {
                    return Err(Error::shape(format!(
                        "{} labels for a batch of {b}",
                        labels.len()
                    )));
                }
                let k = self.num_classes();
                let logits = inputs
                    .last()
                    .and_then(|t| t.as_ref())
                    .expect("softmax input cached");
                let mut losses = Vec::with_capacity(b);
                for (row, &y) in labels.iter().enumerate() {
                    if y >= k {
                        return Err(Error::param(format!("label {y} out of range (K = {k})")));
                    }
                    let z = &logits.data()[row * k..(row + 1) * k];
                    losses.push(log_sum_exp(z) - z[y]);
                }
                // d loss / d logits = softmax(z) - onehot(y)
                let mut g = output.clone();
                for (row, &y) in labels.iter().enumerate() {
                    g.data_mut()[row * k + y] -= 1.0;
                }
                Ok((losses, g, n_layers - 1))
            }
            LossSpec::SquaredError(targets) => {
                if self.ends_with_softmax() {
                    return Err(Error::InvalidNetwork(
                        "squared-error loss is for reconstruction heads, not softmax".into(),
                    ));
                }
                if targets.len() != output.len() {
                    return Err(Error::shape(format!(
                        "targets have {} values, output has {}",
                        targets.len(),
                        output.len()
                    )));
                }
                let len = output.len() / b;
                let mut losses = Vec::with_capacity(b);
                let mut g = Tensor::zeros(&[b, len]);
                let scale = 2.0 / len as f64;
                for row in 0..b {
                    let o = &output.data()[row * len..(row + 1) * len];
                    let t = &targets.data()[row * len..(row + 1) * len];
                    let mut acc = 0.0;
                    let gr = &mut g.data_mut()[row * len..(row + 1) * len];
                    for j in 0..len {
                        let d = o[j] - t[j];
                        acc += d * d;
                        gr[j] = scale * d;
                    }
                    losses.push(acc / len as f64);
                }
                Ok((losses, g, n_layers))
            }
        }
    }

    fn backward_span(
        &self,
        start: usize,
        end: usize,
        inputs: &[Option<Tensor>],
        g: Tensor,
        b: usize,
        param_grads: Option<&mut Vec<Option<LayerGrads>>>,
        prepared: Option<&PreparedBackward>,
    ) -> Result<Tensor> {
        self.backward_walk(start, end, start, inputs, g, b, param_grads, prepared)
    }

    /// Backward over `span_start..end` where `inputs` was cached starting at
    /// `span_start` (used when the forward span did not start at layer 0).
    fn backward_span_offset(
        &self,
        span_start: usize,
        end: usize,
        inputs: &[Option<Tensor>],
        g: Tensor,
        b: usize,
        prepared: Option<&PreparedBackward>,
    ) -> Result<Tensor> {
        self.backward_walk(span_start, end, span_start, inputs, g, b, None, prepared)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_walk(
        &self,
        start: usize,
        end: usize,
        cache_base: usize,
        inputs: &[Option<Tensor>],
        mut g: Tensor,
        b: usize,
        mut param_grads: Option<&mut Vec<Option<LayerGrads>>>,
        prepared: Option<&PreparedBackward>,
    ) -> Result<Tensor> {
        for i in (start..end).rev() {
            let input = inputs[i - cache_base].as_ref();
            g = match &self.layers()[i] {
                LayerSpec::Dense { weights, bias } => {
                    let x = input.expect("dense input cached");
                    if let Some(pg) = param_grads.as_deref_mut() {
                        accumulate_dense_grads(&mut pg[i], weights, bias, x, &g, b);
                    }
                    dense_backward_input(weights, &g, b, prepared.and_then(|p| p.dense_w_t[i].as_ref()))
                }
                LayerSpec::Conv2D { kernel, geom, .. } => {
                    let x = input.expect("conv input cached");
                    if let Some(pg) = param_grads.as_deref_mut() {
                        accumulate_conv_grads(&mut pg[i], kernel, geom, x, &g, b);
                    }
                    conv_backward_input_batch(
                        kernel,
                        geom,
                        &g,
                        b,
                        prepared.and_then(|p| p.conv_k_t[i].as_deref()),
                    )
                }
                LayerSpec::ReLU => {
                    let x = input.expect("relu input cached");
                    let mut g = g;
                    for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                LayerSpec::Flatten | LayerSpec::Reshape(_) | LayerSpec::Noise(_) => g,
                LayerSpec::Softmax => {
                    return Err(Error::InvalidNetwork(
                        "softmax backward is only defined fused with cross-entropy".into(),
                    ))
                }
            };
        }
        Ok(g)
    }
}

fn layer_backward_needs_input(layer: &LayerSpec) -> bool {
    matches!(
        layer,
        LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. } | LayerSpec::ReLU | LayerSpec::Softmax
    )
}

fn replicate_rows(row: &Tensor, n: usize) -> Tensor {
    let len = row.len();
    let mut out = Tensor::zeros(&[n, len]);
    for r in 0..n {
        out.data_mut()[r * len..(r + 1) * len].copy_from_slice(row.data());
    }
    out
}

fn dense_forward(weights: &Tensor, bias: &Tensor, xs: &Tensor, b: usize) -> Tensor {
    let (w_in, w_out) = (weights.shape()[0], weights.shape()[1]);
    let mut out = Tensor::zeros(&[b, w_out]);
    gemm_acc(out.data_mut(), xs.data(), weights.data(), b, w_in, w_out);
    for row in 0..b {
        let o = &mut out.data_mut()[row * w_out..(row + 1) * w_out];
        for (v, bv) in o.iter_mut().zip(bias.data()) {
            *v += bv;
        }
    }
    out
}

fn dense_backward_input(weights: &Tensor, g: &Tensor, b: usize, w_t: Option<&Tensor>) -> Tensor {
    let (w_in, w_out) = (weights.shape()[0], weights.shape()[1]);
    let owned;
    let w_t_data: &[f64] = match w_t {
        Some(t) => t.data(),
        None => {
            owned = transpose(weights.data(), w_in, w_out);
            &owned
        }
    };
    let mut grad_in = Tensor::zeros(&[b, w_in]);
    gemm_acc(grad_in.data_mut(), g.data(), w_t_data, b, w_out, w_in);
    grad_in
}

fn accumulate_dense_grads(
    slot: &mut Option<LayerGrads>,
    weights: &Tensor,
    bias: &Tensor,
    x: &Tensor,
    g: &Tensor,
    b: usize,
) {
    let (w_in, w_out) = (weights.shape()[0], weights.shape()[1]);
    if slot.is_none() {
        *slot = Some(LayerGrads::Dense {
            d_weights: Tensor::zeros(&[w_in, w_out]),
            d_bias: Tensor::zeros(&[bias.len()]),
        });
    }
    let Some(LayerGrads::Dense { d_weights, d_bias }) = slot.as_mut() else {
        unreachable!()
    };
    // dW += xᵀ · g  (k-dimension = batch rows, ascending)
    let x_t = transpose(x.data(), b, w_in);
    gemm_acc(d_weights.data_mut(), &x_t, g.data(), w_in, b, w_out);
    for row in 0..b {
        let gr = &g.data()[row * w_out..(row + 1) * w_out];
        for (dbv, gv) in d_bias.data_mut().iter_mut().zip(gr) {
            *dbv += gv;
        }
    }
}

/// Fixed chunk count for deterministic parallel reductions over batch rows.
const REDUCE_CHUNKS: usize = 8;

fn conv_forward_batch(kernel: &Tensor, geom: &Conv2dGeometry, xs: &Tensor, b: usize) -> Tensor {
    let (in_len, out_len) = (geom.input_len(), geom.output_len());
    let mut out = Tensor::zeros(&[b, out_len]);
    let work = b * geom.pixels() * geom.patch_len() * geom.c_out;
    if work >= 2_000_000 && b > 1 {
        out.data_mut()
            .par_chunks_mut(out_len)
            .zip(xs.data().par_chunks(in_len))
            .for_each_init(Vec::new, |col, (o, x)| {
                conv2d_forward_into(geom, x, kernel.data(), col, o);
            });
    } else {
        let mut col = Vec::new();
        for row in 0..b {
            conv2d_forward_into(
                geom,
                &xs.data()[row * in_len..(row + 1) * in_len],
                kernel.data(),
                &mut col,
                &mut out.data_mut()[row * out_len..(row + 1) * out_len],
            );
        }
    }
    out
}

fn conv_backward_input_batch(
    kernel: &Tensor,
    geom: &Conv2dGeometry,
    g: &Tensor,
    b: usize,
    kernel_t: Option<&[f64]>,
) -> Tensor {
    let (in_len, out_len) = (geom.input_len(), geom.output_len());
    let owned;
    let k_t: &[f64] = match kernel_t {
        Some(t) => t,
        None => {
            owned = transpose(kernel.data(), geom.patch_len(), geom.c_out);
            &owned
        }
    };
    let mut grad_in = Tensor::zeros(&[b, in_len]);
    let work = b * geom.pixels() * geom.patch_len() * geom.c_out;
    if work >= 2_000_000 && b > 1 {
        grad_in
            .data_mut()
            .par_chunks_mut(in_len)
            .zip(g.data().par_chunks(out_len))
            .for_each_init(
                || (Vec::new(), k_t.to_vec()),
                |(col_grad, kt), (gi, go)| {
                    conv2d_input_grad_into(geom, kernel.data(), go, col_grad, kt, gi);
                },
            );
    } else {
        let (mut col_grad, mut kt) = (Vec::new(), k_t.to_vec());
        for row in 0..b {
            conv2d_input_grad_into(
                geom,
                kernel.data(),
                &g.data()[row * out_len..(row + 1) * out_len],
                &mut col_grad,
                &mut kt,
                &mut grad_in.data_mut()[row * in_len..(row + 1) * in_len],
            );
        }
    }
    grad_in
}

fn accumulate_conv_grads(
    slot: &mut Option<LayerGrads>,
    kernel: &Tensor,
    geom: &Conv2dGeometry,
    x: &Tensor,
    g: &Tensor,
    b: usize,
) {
    if slot.is_none() {
        *slot = Some(LayerGrads::Conv2D {
            d_kernel: Tensor::zeros(kernel.shape()),
        });
    }
    let Some(LayerGrads::Conv2D { d_kernel }) = slot.as_mut() else {
        unreachable!()
    };
    let (in_len, out_len) = (geom.input_len(), geom.output_len());
    // Chunked parallel accumulation with a fixed chunk count, combined in
    // chunk order: deterministic for any thread count.
    let rows_per_chunk = b.div_ceil(REDUCE_CHUNKS);
    let partials: Vec<Vec<f64>> = (0..b.div_ceil(rows_per_chunk))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * rows_per_chunk;
            let hi = ((chunk + 1) * rows_per_chunk).min(b);
            let mut acc = vec![0.0; d_kernel.len()];
            let (mut col, mut col_t) = (Vec::new(), Vec::new());
            for row in lo..hi {
                conv2d_kernel_grad(
                    geom,
                    &x.data()[row * in_len..(row + 1) * in_len],
                    &g.data()[row * out_len..(row + 1) * out_len],
                    &mut col,
                    &mut col_t,
                    &mut acc,
                );
            }
            acc
        })
        .collect();
    for part in partials {
        for (d, p) in d_kernel.data_mut().iter_mut().zip(&part) {
            *d += p;
        }
    }
}

fn softmax_rows(mut xs: Tensor, b: usize) -> Result<Tensor> {
    let len = xs.len() / b;
    for row in 0..b {
        let z = &mut xs.data_mut()[row * len..(row + 1) * len];
        let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        if !m.is_finite() {
            return Err(Error::param("non-finite logits in softmax".into()));
        }
        let mut sum = 0.0;
        for v in z.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in z.iter_mut() {
            *v /= sum;
        }
    }
    Ok(xs)
}

fn add_noise_rows(
    spec: &crate::dp::NoiseSpec,
    mut xs: Tensor,
    b: usize,
    stream: &NoiseStream,
    first_draw: u64,
) -> Tensor {
    let len = xs.len() / b;
    if spec.sigma == 0.0 {
        return xs;
    }
    if b >= 8 {
        xs.data_mut()
            .par_chunks_mut(len)
            .enumerate()
            .for_each_init(
                || vec![0.0; len],
                |buf, (row, data)| {
                    let mut rng = stream.substream(first_draw + row as u64);
                    sample_noise_into(spec, &mut rng, buf);
                    for (v, n) in data.iter_mut().zip(buf.iter()) {
                        *v += n;
                    }
                },
            );
    } else {
        let mut buf = vec![0.0; len];
        for row in 0..b {
            let mut rng = stream.substream(first_draw + row as u64);
            sample_noise_into(spec, &mut rng, &mut buf);
            for (v, n) in xs.data_mut()[row * len..(row + 1) * len]
                .iter_mut()
                .zip(buf.iter())
            {
                *v += n;
            }
        }
    }
    xs
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::DPParams;
    use crate::network::{LayerDef, NetworkSpec};
    use crate::sensitivity::InputNorm;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_dense(i: usize, o: usize, rng: &mut StdRng, scale: f64) -> LayerDef {
        LayerDef::Dense {
            weights: Tensor::new(
                vec![i, o],
                (0..i * o).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
            .unwrap(),
            bias: Tensor::new(vec![o], (0..o).map(|_| rng.gen_range(-0.1..0.1)).collect())
                .unwrap(),
        }
    }

    fn toy_net(seed: u64, sigma_l: f64) -> NetworkSpec {
        let mut rng = StdRng::seed_from_u64(seed);
        let dp = DPParams::gaussian(1.0, 0.05, sigma_l).unwrap();
        NetworkSpec::new(
            &[3, 3, 1],
            vec![
                LayerDef::Conv2D {
                    kernel: Tensor::new(
                        vec![2, 2, 1, 2],
                        (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    )
                    .unwrap(),
                    stride: 1,
                    padding: crate::tensor::Padding::Valid,
                },
                LayerDef::Noise,
                LayerDef::ReLU,
                LayerDef::Flatten,
                random_dense(8, 4, &mut rng, 0.8),
                LayerDef::ReLU,
                random_dense(4, 3, &mut rng, 0.8),
                LayerDef::Softmax,
            ],
            InputNorm::L2,
            dp,
        )
        .unwrap()
    }

    #[test]
    fn zero_sigma_noisy_equals_deterministic() {
        let net = toy_net(31, 0.0);
        let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| i as f64 / 9.0).collect()).unwrap();
        let stream = NoiseStream::new(5);
        let a = net.forward(&x, Mode::Deterministic).unwrap();
        let b = net
            .forward(&x, Mode::Noisy { stream: &stream, first_draw: 0 })
            .unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn zero_weights_give_uniform_scores() {
        let dp = DPParams::laplace(1.0, 0.0).unwrap();
        let net = NetworkSpec::new(
            &[4],
            vec![
                LayerDef::Noise,
                LayerDef::Dense {
                    weights: Tensor::zeros(&[4, 5]),
                    bias: Tensor::zeros(&[5]),
                },
                LayerDef::Softmax,
            ],
            InputNorm::L1,
            dp,
        )
        .unwrap();
        let x = Tensor::new(vec![4], vec![0.3, 0.9, 0.1, 0.5]).unwrap();
        let s = net.score(&x, Mode::Deterministic).unwrap();
        for &v in s.scores() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_reproduces_noisy_output() {
        let net = toy_net(32, 0.5);
        let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| i as f64 / 9.0).collect()).unwrap();
        let stream = NoiseStream::new(77);
        let a = net
            .forward(&x, Mode::Noisy { stream: &stream, first_draw: 3 })
            .unwrap();
        let b = net
            .forward(&x, Mode::Noisy { stream: &stream, first_draw: 3 })
            .unwrap();
        assert_eq!(a.data(), b.data());
        let c = net
            .forward(&x, Mode::Noisy { stream: &stream, first_draw: 4 })
            .unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn scores_are_a_distribution_under_noise() {
        let net = toy_net(33, 1.0);
        let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| i as f64 / 9.0).collect()).unwrap();
        let stream = NoiseStream::new(8);
        for draw in 0..20 {
            let s = net
                .score(&x, Mode::Noisy { stream: &stream, first_draw: draw })
                .unwrap();
            let sum: f64 = s.scores().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(s.scores().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn noise_draws_share_prefix_and_match_full_forward() {
        let net = toy_net(34, 0.5);
        let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| i as f64 / 18.0).collect()).unwrap();
        let stream = NoiseStream::new(9);
        let batch = net.forward_noise_draws(&x, 5, &stream, 100).unwrap();
        for draw in 0..5 {
            let single = net
                .forward(&x, Mode::Noisy { stream: &stream, first_draw: 100 + draw })
                .unwrap();
            let k = single.len();
            assert_eq!(
                &batch.data()[draw as usize * k..(draw as usize + 1) * k],
                single.data()
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = toy_net(35, 0.4);
        let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| 0.1 + i as f64 / 20.0).collect())
            .unwrap();
        let stream = NoiseStream::new(4);
        let mode = Mode::Noisy { stream: &stream, first_draw: 42 };
        let loss_at = |xx: &Tensor| -> f64 {
            let (l, _, _) = net.gradient(xx, &LossSpec::CrossEntropy(&[1]), mode).unwrap();
            l
        };
        let (_, grad_x, param_grads) = net
            .gradient(&x, &LossSpec::CrossEntropy(&[1]), mode)
            .unwrap();
        // input gradient
        let h = 1e-5;
        for idx in [0, 4, 8] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss_at(&xp) - loss_at(&xm)) / (2.0 * h);
            let got = grad_x.data()[idx];
            assert!(
                (got - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                "input grad {idx}: {got} vs {fd}"
            );
        }
        // a dense weight gradient (layer 4) and the conv kernel (layer 0)
        let mut net2 = net.clone();
        for (layer_idx, flat_idx) in [(4usize, 3usize), (0, 2)] {
            let fd = {
                let bump = |n: &mut NetworkSpec, d: f64| match &mut n.layers_mut()[layer_idx] {
                    LayerSpec::Dense { weights, .. } => weights.data_mut()[flat_idx] += d,
                    LayerSpec::Conv2D { kernel, .. } => kernel.data_mut()[flat_idx] += d,
                    _ => unreachable!(),
                };
                bump(&mut net2, h);
                let (lp, _, _) = net2
                    .gradient(&x, &LossSpec::CrossEntropy(&[1]), mode)
                    .unwrap();
                bump(&mut net2, -2.0 * h);
                let (lm, _, _) = net2
                    .gradient(&x, &LossSpec::CrossEntropy(&[1]), mode)
                    .unwrap();
                bump(&mut net2, h);
                (lp - lm) / (2.0 * h)
            };
            let got = match &param_grads[layer_idx] {
                Some(LayerGrads::Dense { d_weights, .. }) => d_weights.data()[flat_idx],
                Some(LayerGrads::Conv2D { d_kernel }) => d_kernel.data()[flat_idx],
                None => unreachable!(),
            };
            assert!(
                (got - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                "param grad layer {layer_idx}[{flat_idx}]: {got} vs {fd}"
            );
        }
    }

    #[test]
    fn zero_net_zero_input_has_zero_gradient() {
        let dp = DPParams::laplace(1.0, 0.0).unwrap();
        let net = NetworkSpec::new(
            &[4],
            vec![
                LayerDef::Noise,
                LayerDef::Dense {
                    weights: Tensor::zeros(&[4, 3]),
                    bias: Tensor::zeros(&[3]),
                },
                LayerDef::Softmax,
            ],
            InputNorm::L1,
            dp,
        )
        .unwrap();
        let x = Tensor::zeros(&[4]);
        let (_, grad_x, _) = net
            .gradient(&x, &LossSpec::CrossEntropy(&[0]), Mode::Deterministic)
            .unwrap();
        assert!(grad_x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_decreases_after_small_step() {
        let net = toy_net(36, 0.0);
        let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| 0.1 + i as f64 / 20.0).collect())
            .unwrap();
        let loss_spec = LossSpec::CrossEntropy(&[2]);
        let (l0, _, grads) = net.gradient(&x, &loss_spec, Mode::Deterministic).unwrap();
        let mut net2 = net.clone();
        let lr = 1e-2;
        for (i, g) in grads.iter().enumerate() {
            match (g, &mut net2.layers_mut()[i]) {
                (Some(LayerGrads::Dense { d_weights, d_bias }), LayerSpec::Dense { weights, bias }) => {
                    for (w, d) in weights.data_mut().iter_mut().zip(d_weights.data()) {
                        *w -= lr * d;
                    }
                    for (b, d) in bias.data_mut().iter_mut().zip(d_bias.data()) {
                        *b -= lr * d;
                    }
                }
                (Some(LayerGrads::Conv2D { d_kernel }), LayerSpec::Conv2D { kernel, .. }) => {
                    for (w, d) in kernel.data_mut().iter_mut().zip(d_kernel.data()) {
                        *w -= lr * d;
                    }
                }
                _ => {}
            }
        }
        let (l1, _, _) = net2.gradient(&x, &loss_spec, Mode::Deterministic).unwrap();
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }

    #[test]
    fn averaged_gradient_matches_manual_average() {
        let net = toy_net(37, 0.6);
        let x = Tensor::new(vec![3, 3, 1], (0..9).map(|i| 0.05 * i as f64).collect()).unwrap();
        let stream = NoiseStream::new(123);
        let n = 4;
        let (mean_loss, grad) = net
            .averaged_input_gradient(&x, 1, n, &stream, 50, None)
            .unwrap();
        // manual: average single-draw losses/grads over the same substreams
        let mut acc = vec![0.0; x.len()];
        let mut loss_acc = 0.0;
        for d in 0..n as u64 {
            let (l, g, _) = net
                .gradient(
                    &x,
                    &LossSpec::CrossEntropy(&[1]),
                    Mode::Noisy { stream: &stream, first_draw: 50 + d },
                )
                .unwrap();
            loss_acc += l;
            for (a, gv) in acc.iter_mut().zip(g.data()) {
                *a += gv;
            }
        }
        let inv = 1.0 / n as f64;
        for (a, g) in acc.iter().zip(grad.data()) {
            assert!((a * inv - g).abs() < 1e-10, "{} vs {}", a * inv, g);
        }
        assert!((loss_acc * inv - mean_loss).abs() < 1e-10);
    }
}
