//! Differential-privacy mechanisms: noise calibration, sampling, and the
//! expected-output stability bounds.
//!
//! Both mechanisms are parameterized by the *standard deviation* σ of the
//! injected noise:
//!
//! - Laplace: σ = √2 · Δ_{p,1} · L / ε, giving (ε, 0)-DP. Note the Laplace
//!   *scale* parameter is b = σ/√2 = Δ·L/ε; most references parameterize by
//!   b, this crate consistently uses σ.
//! - Gaussian: σ = √(2 ln(1.25/δ)) · Δ_{p,2} · L / ε, giving (ε, δ)-DP for
//!   ε ≤ 1.
//!
//! At a fixed σ the guarantee scales linearly with the attack size (group
//! privacy): ε(L') = ε(L) · L'/L. [`epsilon_at`] inverts the σ formulas to
//! account for attacks larger or smaller than the construction bound.

use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Noise distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Laplace,
    Gaussian,
}

/// Differential-privacy parameters of a network.
///
/// `attack_bound` is the construction attack bound L: the p-norm attack size
/// (on [0,1]-scaled pixels) that the noise layer is calibrated for.
/// `attack_bound = 0` is allowed and denotes an undefended network (σ = 0),
/// used for baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPParams {
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub delta: f64,
    pub attack_bound: f64,
}

impl DPParams {
    pub fn laplace(epsilon: f64, attack_bound: f64) -> Result<Self> {
        let p = DPParams {
            mechanism: Mechanism::Laplace,
            epsilon,
            delta: 0.0,
            attack_bound,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(epsilon: f64, delta: f64, attack_bound: f64) -> Result<Self> {
        let p = DPParams {
            mechanism: Mechanism::Gaussian,
            epsilon,
            delta,
            attack_bound,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::param(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.attack_bound >= 0.0) || !self.attack_bound.is_finite() {
            return Err(Error::param(format!(
                "attack bound L must be >= 0, got {}",
                self.attack_bound
            )));
        }
        match self.mechanism {
            Mechanism::Laplace => {
                if self.delta != 0.0 {
                    return Err(Error::param(format!(
                        "Laplace mechanism gives (epsilon, 0)-DP; delta must be 0, got {}",
                        self.delta
                    )));
                }
            }
            Mechanism::Gaussian => {
                if !(self.delta > 0.0 && self.delta < 1.0) {
                    return Err(Error::param(format!(
                        "Gaussian mechanism requires 0 < delta < 1, got {}",
                        self.delta
                    )));
                }
                if self.epsilon > 1.0 {
                    return Err(Error::param(format!(
                        "Gaussian mechanism guarantee only holds for epsilon <= 1, got {}",
                        self.epsilon
                    )));
                }
            }
        }
        Ok(())
    }

    /// Noise standard deviation for a pre-noise sensitivity bound.
    pub fn sigma_for(&self, delta_pq: f64) -> Result<f64> {
        match self.mechanism {
            Mechanism::Laplace => laplace_sigma(delta_pq, self.attack_bound, self.epsilon),
            Mechanism::Gaussian => {
                gaussian_sigma(delta_pq, self.attack_bound, self.epsilon, self.delta)
            }
        }
    }
}

/// A concrete noise layer: mechanism, standard deviation, tensor shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mechanism: Mechanism,
    pub sigma: f64,
    pub shape: Vec<usize>,
}

impl NoiseSpec {
    pub fn new(mechanism: Mechanism, sigma: f64, shape: Vec<usize>) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::param(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseSpec {
            mechanism,
            sigma,
            shape,
        })
    }
}

/// σ = √2 · Δ_{p,1} · L / ε (standard deviation of the Laplace mechanism).
pub fn laplace_sigma(delta_p1: f64, attack_bound: f64, epsilon: f64) -> Result<f64> {
    check_sigma_args(delta_p1, attack_bound, epsilon)?;
    Ok(std::f64::consts::SQRT_2 * delta_p1 * attack_bound / epsilon)
}

/// σ = √(2 ln(1.25/δ)) · Δ_{p,2} · L / ε for ε ≤ 1.
pub fn gaussian_sigma(delta_p2: f64, attack_bound: f64, epsilon: f64, delta: f64) -> Result<f64> {
    check_sigma_args(delta_p2, attack_bound, epsilon)?;
    if epsilon > 1.0 {
        return Err(Error::param(format!(
            "Gaussian mechanism guarantee only holds for epsilon <= 1, got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param(format!("delta must be in (0, 1), got {delta}")));
    }
    Ok((2.0 * (1.25 / delta).ln()).sqrt() * delta_p2 * attack_bound / epsilon)
}

fn check_sigma_args(delta_pq: f64, attack_bound: f64, epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::param(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta_pq >= 0.0) {
        return Err(Error::param(format!("sensitivity must be >= 0, got {delta_pq}")));
    }
    if !(attack_bound >= 0.0) {
        return Err(Error::param(format!("attack bound must be >= 0, got {attack_bound}")));
    }
    Ok(())
}

/// Privacy level implied by a fixed σ against an attack of size `l_attack`
/// (group privacy: ε scales linearly in L at fixed σ).
pub fn epsilon_at(
    sigma: f64,
    delta_pq: f64,
    l_attack: f64,
    mechanism: Mechanism,
    delta: f64,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("epsilon_at requires sigma > 0, got {sigma}")));
    }
    if !(l_attack >= 0.0) {
        return Err(Error::param(format!("attack size must be >= 0, got {l_attack}")));
    }
    match mechanism {
        Mechanism::Laplace => Ok(std::f64::consts::SQRT_2 * delta_pq * l_attack / sigma),
        Mechanism::Gaussian => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::param(format!("delta must be in (0, 1), got {delta}")));
            }
            Ok((2.0 * (1.25 / delta).ln()).sqrt() * delta_pq * l_attack / sigma)
        }
    }
}

/// Fill `out` with one noise draw.
pub fn sample_noise_into(spec: &NoiseSpec, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    if spec.sigma == 0.0 {
        out.fill(0.0);
        return;
    }
    match spec.mechanism {
        Mechanism::Gaussian => {
            for v in out.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = spec.sigma * z;
            }
        }
        Mechanism::Laplace => {
            // Inverse-CDF sampling with scale b = σ/√2 so that the standard
            // deviation is exactly σ.
            let b = spec.sigma / std::f64::consts::SQRT_2;
            for v in out.iter_mut() {
                let u: f64 = rng.gen::<f64>() - 0.5;
                let t = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
                *v = -b * u.signum() * t.ln();
            }
        }
    }
}

/// One noise draw with the spec's shape.
pub fn sample_noise(spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = Tensor::zeros(&spec.shape);
    sample_noise_into(spec, rng, out.data_mut());
    out
}

/// Expected-output stability interval for a bounded signed output in
/// `[a, b]` with `a <= 0 <= b`, split as `E(A) = E(A_+) - E(A_-)`.
///
/// Given estimates `e_plus` of E(A_+(x)) and `e_minus` of E(A_-(x)), returns
/// the (lower, upper) interval for E(A(x + α)) over all ‖α‖_p ≤ 1:
///
/// ```text
/// upper = e^ε·e_plus − e^{−ε}·e_minus + b·δ − e^{−ε}·a·δ
/// lower = e^{−ε}·e_plus − e^ε·e_minus − e^{−ε}·b·δ + a·δ
/// ```
///
/// With `a = 0, b = 1, e_minus = 0` the upper bound reduces to the
/// classification bound `e^ε·Ê + δ`.
pub fn stability_interval_regression(
    e_plus: f64,
    e_minus: f64,
    epsilon: f64,
    delta: f64,
    a: f64,
    b: f64,
) -> Result<(f64, f64)> {
    if !(a <= 0.0 && 0.0 <= b) {
        return Err(Error::param(format!("output range must satisfy a <= 0 <= b, got [{a}, {b}]")));
    }
    if !(0.0..=b).contains(&e_plus) {
        return Err(Error::param(format!("e_plus must be in [0, {b}], got {e_plus}")));
    }
    if !(0.0..=(-a)).contains(&e_minus) {
        return Err(Error::param(format!("e_minus must be in [0, {}], got {e_minus}", -a)));
    }
    if !(epsilon >= 0.0) || !(0.0..1.0).contains(&delta) && delta != 0.0 {
        return Err(Error::param(format!("invalid (epsilon, delta) = ({epsilon}, {delta})")));
    }
    let ep = epsilon.exp();
    let em = (-epsilon).exp();
    let upper = ep * e_plus - em * e_minus + b * delta - em * a * delta;
    let lower = em * e_plus - ep * e_minus - em * b * delta + a * delta;
    Ok((lower, upper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;

    #[test]
    fn laplace_sigma_formula() {
        assert_eq!(laplace_sigma(1.0, 0.0, 1.0).unwrap(), 0.0);
        let s = laplace_sigma(1.0, 0.1, 1.0).unwrap();
        assert!((s - 0.1414213562373095).abs() < 1e-15);
        let s2 = laplace_sigma(2.0, 0.1, 1.0).unwrap();
        assert!((s2 - 2.0 * s).abs() < 1e-15);
        assert!(laplace_sigma(1.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn gaussian_sigma_formula() {
        let s = gaussian_sigma(1.0, 0.1, 1.0, 0.05).unwrap();
        let expect = (2.0f64 * (1.25f64 / 0.05).ln()).sqrt() * 0.1;
        assert!((s - expect).abs() < 1e-15);
        assert!((s - 0.25372725958580117).abs() < 1e-12);
        assert_eq!(gaussian_sigma(1.0, 0.0, 1.0, 0.05).unwrap(), 0.0);
        // delta = 1.25/e^2 makes the log term exactly 2, so sigma = 2 Δ L / ε
        let delta = 1.25 / std::f64::consts::E.powi(2);
        let s = gaussian_sigma(1.0, 0.1, 1.0, delta).unwrap();
        assert!((s - 0.2).abs() < 1e-15);
        assert!(gaussian_sigma(1.0, 0.1, 1.5, 0.05).is_err());
        assert!(gaussian_sigma(1.0, 0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn epsilon_at_inverts_sigma() {
        let s = laplace_sigma(1.0, 0.1, 1.0).unwrap();
        let eps = epsilon_at(s, 1.0, 0.1, Mechanism::Laplace, 0.0).unwrap();
        assert!((eps - 1.0).abs() < 1e-12);
        // group privacy: double the attack, double epsilon
        let e1 = epsilon_at(0.5, 1.0, 0.2, Mechanism::Laplace, 0.0).unwrap();
        let e2 = epsilon_at(0.5, 1.0, 0.4, Mechanism::Laplace, 0.0).unwrap();
        assert!((e2 - 2.0 * e1).abs() < 1e-12);
        // derived example: sigma ≈ 0.25373, Δ=1, δ=0.05, L=0.05 → ε ≈ 0.5
        let s = gaussian_sigma(1.0, 0.1, 1.0, 0.05).unwrap();
        let eps = epsilon_at(s, 1.0, 0.05, Mechanism::Gaussian, 0.05).unwrap();
        assert!((eps - 0.5).abs() < 1e-12);
        assert!(epsilon_at(0.0, 1.0, 0.1, Mechanism::Laplace, 0.0).is_err());
    }

    #[test]
    fn dp_params_invariants() {
        assert!(DPParams::laplace(1.0, 0.1).is_ok());
        assert!(DPParams::gaussian(1.0, 0.05, 0.1).is_ok());
        assert!(DPParams::gaussian(1.2, 0.05, 0.1).is_err());
        assert!(DPParams::gaussian(1.0, 0.0, 0.1).is_err());
        assert!(DPParams::laplace(0.0, 0.1).is_err());
        let mut p = DPParams::laplace(1.0, 0.1).unwrap();
        p.delta = 0.2;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_sigma_noise_is_zero() {
        let spec = NoiseSpec::new(Mechanism::Gaussian, 0.0, vec![4]).unwrap();
        let mut rng = NoiseStream::new(1).substream(0);
        let t = sample_noise(&spec, &mut rng);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_seeds_give_identical_draws() {
        let spec = NoiseSpec::new(Mechanism::Laplace, 1.0, vec![32]).unwrap();
        let stream = NoiseStream::new(7);
        let a = sample_noise(&spec, &mut stream.substream(3));
        let b = sample_noise(&spec, &mut stream.substream(3));
        assert_eq!(a.data(), b.data());
        let c = sample_noise(&spec, &mut stream.substream(4));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn gaussian_sample_moments() {
        let n = 1_000_000usize;
        let spec = NoiseSpec::new(Mechanism::Gaussian, 1.0, vec![n]).unwrap();
        let t = sample_noise(&spec, &mut NoiseStream::new(11).substream(0));
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        let sd = var.sqrt();
        assert!((0.995..=1.005).contains(&sd), "std {sd}");
    }

    #[test]
    fn laplace_sample_moments() {
        let n = 1_000_000usize;
        let spec = NoiseSpec::new(Mechanism::Laplace, 1.0, vec![n]).unwrap();
        let t = sample_noise(&spec, &mut NoiseStream::new(12).substream(0));
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((0.99..=1.01).contains(&sd), "std {sd}");
    }

    #[test]
    fn stability_interval_examples() {
        // no privacy noise: both ends collapse to e_plus - e_minus
        let (lo, hi) = stability_interval_regression(0.5, 0.2, 0.0, 0.0, -1.0, 1.0).unwrap();
        assert!((lo - 0.3).abs() < 1e-15);
        assert!((hi - 0.3).abs() < 1e-15);
        // direct formula evaluation
        let (lo, hi) = stability_interval_regression(0.5, 0.2, 0.1, 0.0, -1.0, 1.0).unwrap();
        let ep = 0.1f64.exp();
        let em = (-0.1f64).exp();
        assert!((hi - (ep * 0.5 - em * 0.2)).abs() < 1e-15);
        assert!((lo - (em * 0.5 - ep * 0.2)).abs() < 1e-15);
        assert!((hi - 0.37162).abs() < 5e-6);
        assert!((lo - 0.23139).abs() < 5e-6);
        // zero expectations: the delta terms remain
        let (lo, hi) = stability_interval_regression(0.0, 0.0, 0.3, 0.1, -1.0, 1.0).unwrap();
        let em = (-0.3f64).exp();
        assert!((hi - (1.0 * 0.1 + em * 0.1)).abs() < 1e-15);
        assert!((lo - (-em * 0.1 - 0.1)).abs() < 1e-15);
        // input validation
        assert!(stability_interval_regression(1.5, 0.0, 0.1, 0.0, -1.0, 1.0).is_err());
        assert!(stability_interval_regression(0.5, 0.0, 0.1, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn reduces_to_classification_bound() {
        // a = 0, b = 1, e_minus = 0 reproduces upper = e^ε Ê + δ and
        // lower = e^{-ε} Ê - e^{-ε} δ exactly.
        for (e, eps, delta) in [(0.4, 0.25, 0.05), (0.9, 1.0, 0.01), (0.1, 0.0, 0.0)] {
            let (lo, hi) = stability_interval_regression(e, 0.0, eps, delta, 0.0, 1.0).unwrap();
            assert_eq!(hi, eps.exp() * e + delta);
            assert_eq!(lo, (-eps).exp() * e - (-eps).exp() * delta);
        }
    }

    /// Empirical check of the expected-output stability bound: a clamped
    /// identity with one noise draw is (ε, δ)-DP for unit attacks, so
    /// E(A(x)) ≤ e^ε Ê(A(x+α)) + δ up to Monte Carlo error.
    #[test]
    fn lemma_stability_empirical() {
        let n = 100_000usize;
        let stream = NoiseStream::new(99);
        for (mech, delta) in [(Mechanism::Laplace, 0.0), (Mechanism::Gaussian, 0.05)] {
            let dp = DPParams {
                mechanism: mech,
                epsilon: 1.0,
                delta,
                attack_bound: 1.0,
            };
            let sigma = dp.sigma_for(1.0).unwrap();
            let spec = NoiseSpec::new(mech, sigma, vec![n]).unwrap();
            let x = 0.3f64;
            let est = |center: f64, sub: u64| -> f64 {
                let noise = sample_noise(&spec, &mut stream.substream(sub));
                noise
                    .data()
                    .iter()
                    .map(|z| (center + z).clamp(0.0, 1.0))
                    .sum::<f64>()
                    / n as f64
            };
            let e_x = est(x, 0);
            let mut alpha_rng = stream.fork(5).substream(0);
            for i in 0..100u64 {
                let alpha: f64 = alpha_rng.gen_range(-1.0..1.0);
                let e_xa = est(x + alpha, i + 1);
                let se = (1.0 + 1.0f64.exp()) * 0.5 / (n as f64).sqrt();
                assert!(
                    e_x <= 1.0f64.exp() * e_xa + delta + 3.0 * se,
                    "{mech:?}: stability bound violated: {e_x} vs {}",
                    1.0f64.exp() * e_xa + delta
                );
            }
        }
    }
}
