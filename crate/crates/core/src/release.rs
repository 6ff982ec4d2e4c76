//! (ε, δ)-differentially private release of Misra-Gries sketches.
//!
//! Every stored counter, dummies included, receives one Laplace(1/ε) variate
//! shared by all counters plus an independent Laplace(1/ε) variate of its
//! own. The shared term hides the case where neighbouring streams differ in
//! every counter by one (one extra decrement-all step); the threshold hides
//! the at most four keys, each with count at most 1, that are stored by only
//! one of the two neighbouring sketches. Dummy keys are dropped afterwards.

use crate::error::{Error, Result};
use crate::mg::{Sketch, StandardSketch};
use crate::noise::{NoiseSource, Scale};
use crate::summary::{ErrorBound, Mechanism, PrivateSummary};

/// Privacy parameters. `beta` only sizes the reported error interval; it
/// has no influence on the mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    epsilon: f64,
    delta: f64,
    beta: f64,
}

impl PrivacyParams {
    pub const DEFAULT_BETA: f64 = 0.05;

    pub fn new(epsilon: f64, delta: f64, beta: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParams(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidParams(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        Ok(Self {
            epsilon,
            delta,
            beta,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub(crate) fn noise_scale(&self) -> Scale {
        Scale(1.0 / self.epsilon)
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParams(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(())
}

/// `1 + 2 ln(3/δ) / ε`.
pub fn threshold_pmg(p: &PrivacyParams) -> f64 {
    1.0 + 2.0 * (3.0 / p.delta).ln() / p.epsilon
}

/// `1 + 2 ln((k+1) / (2δ)) / ε`, for sketches that drop zero counters and so
/// may disagree with a neighbour on up to `k` keys.
pub fn threshold_standard(p: &PrivacyParams, k: usize) -> f64 {
    1.0 + 2.0 * ((k as f64 + 1.0) / (2.0 * p.delta)).ln() / p.epsilon
}

/// Deviation interval for `released(x) - f(x)` that holds simultaneously for
/// all x with probability at least `1 - beta`, and the per-key MSE bound.
pub fn error_bound(p: &PrivacyParams, k: usize, n: u64) -> ErrorBound {
    error_bound_with_threshold(p, k, n, threshold_pmg(p))
}

pub(crate) fn error_bound_with_threshold(
    p: &PrivacyParams,
    k: usize,
    n: u64,
    threshold: f64,
) -> ErrorBound {
    let k1 = k as f64 + 1.0;
    let noise = 2.0 * (k1 / p.beta).ln() / p.epsilon;
    let sketch_err = n as f64 / k1;
    // threshold + 2/ε = 1 + (2 + 2 ln(3/δ))/ε for the approx mechanism
    let mse_base = threshold + 2.0 / p.epsilon + sketch_err;
    ErrorBound {
        beta: p.beta,
        lower: -noise - threshold - sketch_err,
        upper: noise,
        mse: 3.0 * mse_base * mse_base,
    }
}

fn shared_noise_release<N: NoiseSource>(
    counters: impl Iterator<Item = (u64, u64)>,
    is_real: impl Fn(u64) -> bool,
    scale: Scale,
    threshold: f64,
    noise: &mut N,
    summary: &mut PrivateSummary,
) {
    let shared = noise.sample(scale);
    for (key, count) in counters {
        let noisy = count as f64 + shared + noise.sample(scale);
        if noisy >= threshold && is_real(key) {
            summary.insert(key, noisy);
        }
    }
}

/// Releases a zero-retaining sketch. The sketch is marked released and a
/// second call fails with [`Error::AlreadyReleased`].
pub fn privatize_mg<N: NoiseSource>(
    sketch: &mut Sketch,
    params: &PrivacyParams,
    noise: &mut N,
) -> Result<PrivateSummary> {
    privatize_mg_with_threshold(sketch, params, threshold_pmg(params), noise)
}

/// [`privatize_mg`] with an explicit threshold. Only meant for tests that
/// isolate the thresholding logic; any threshold below [`threshold_pmg`]
/// voids the privacy guarantee.
#[doc(hidden)]
pub fn privatize_mg_with_threshold<N: NoiseSource>(
    sketch: &mut Sketch,
    params: &PrivacyParams,
    threshold: f64,
    noise: &mut N,
) -> Result<PrivateSummary> {
    if sketch.entries().count() != sketch.k() {
        return Err(Error::InconsistentSketch(
            "sketch does not hold exactly k counters".into(),
        ));
    }
    sketch.mark_released()?;
    let mut summary = PrivateSummary::new(
        Mechanism::Approx,
        sketch.k(),
        sketch.d(),
        params.epsilon,
        Some(params.delta),
        Some(threshold),
    );
    let d = sketch.d();
    shared_noise_release(
        sketch.entries(),
        |key| key <= d,
        params.noise_scale(),
        threshold,
        noise,
        &mut summary,
    );
    summary.error_bound = Some(error_bound(params, sketch.k(), sketch.n()));
    Ok(summary)
}

/// Releases a standard (zero-dropping) sketch with the raised threshold.
pub fn privatize_standard_mg<N: NoiseSource>(
    sketch: &mut StandardSketch,
    params: &PrivacyParams,
    noise: &mut N,
) -> Result<PrivateSummary> {
    let threshold = threshold_standard(params, sketch.k());
    privatize_standard_mg_with_threshold(sketch, params, threshold, noise)
}

#[doc(hidden)]
pub fn privatize_standard_mg_with_threshold<N: NoiseSource>(
    sketch: &mut StandardSketch,
    params: &PrivacyParams,
    threshold: f64,
    noise: &mut N,
) -> Result<PrivateSummary> {
    if sketch.len() > sketch.k() {
        return Err(Error::InconsistentSketch(
            "standard sketch holds more than k counters".into(),
        ));
    }
    sketch.mark_released()?;
    let mut summary = PrivateSummary::new(
        Mechanism::Standard,
        sketch.k(),
        sketch.d(),
        params.epsilon,
        Some(params.delta),
        Some(threshold),
    );
    if !sketch.is_empty() {
        shared_noise_release(
            sketch.entries(),
            |_| true,
            params.noise_scale(),
            threshold,
            noise,
            &mut summary,
        );
    }
    summary.error_bound = Some(error_bound_with_threshold(
        params,
        sketch.k(),
        sketch.n(),
        threshold,
    ));
    Ok(summary)
}
