//! Seeded noise sources.
//!
//! Two backends are available: continuous Laplace (the default) and the
//! two-sided geometric distribution, the integer analogue obtained by
//! restricting Laplace noise to the integers. Neither is a
//! cryptographically secure sampler; the floating-point Laplace sampler in
//! particular is subject to the usual precision attacks on textbook
//! implementations.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A strictly positive, finite noise scale `b`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Scale(pub(crate) f64);

impl Scale {
    pub fn new(b: f64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidParams(format!(
                "noise scale must be positive and finite, got {b}"
            )));
        }
        Ok(Self(b))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseBackend {
    #[default]
    Laplace,
    Geometric,
}

impl std::str::FromStr for NoiseBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(Self::Laplace),
            "geometric" => Ok(Self::Geometric),
            other => Err(Error::InvalidConfig(format!(
                "unknown noise backend '{other}'"
            ))),
        }
    }
}

/// Anything that can produce a symmetric noise variate at a given scale.
///
/// Release mechanisms are generic over this so tests can substitute
/// [`ZeroNoise`].
pub trait NoiseSource {
    fn sample(&mut self, scale: Scale) -> f64;
}

/// Noise source that always returns 0. Only useful for testing the
/// deterministic parts of a mechanism.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn sample(&mut self, _scale: Scale) -> f64 {
        0.0
    }
}

/// Explicitly seeded noise generator backed by ChaCha20.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    rng: ChaCha20Rng,
    backend: NoiseBackend,
}

impl NoiseSampler {
    pub fn new(seed: u64, backend: NoiseBackend) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            backend,
        }
    }

    pub fn laplace(seed: u64) -> Self {
        Self::new(seed, NoiseBackend::Laplace)
    }

    /// Independent sampler on ChaCha stream `stream` for the same seed.
    /// Lets parallel workers share one seed without overlapping variates.
    pub fn with_stream(seed: u64, stream: u64, backend: NoiseBackend) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, backend }
    }

    pub fn backend(&self) -> NoiseBackend {
        self.backend
    }

    /// Uniform variate in the open interval (0, 1), on a grid of 2^-53.
    pub fn uniform_open(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// One Laplace(b) variate by inverse CDF.
    pub fn laplace_sample(&mut self, scale: Scale) -> f64 {
        let u = self.uniform_open();
        laplace_inverse_cdf(scale.get(), u)
    }

    /// One two-sided geometric variate with `Pr[X = x] ∝ exp(-|x|/b)`,
    /// drawn as the difference of two i.i.d. geometric variables.
    pub fn geometric_sample(&mut self, scale: Scale) -> i64 {
        let log_alpha = -1.0 / scale.get();
        let a = self.one_sided_geometric(log_alpha);
        let b = self.one_sided_geometric(log_alpha);
        a - b
    }

    // Pr[G = g] = (1 - alpha) alpha^g for g >= 0.
    fn one_sided_geometric(&mut self, log_alpha: f64) -> i64 {
        let u = self.uniform_open();
        let g = (u.ln() / log_alpha).floor();
        if g >= i64::MAX as f64 {
            i64::MAX
        } else {
            g as i64
        }
    }
}

impl NoiseSource for NoiseSampler {
    fn sample(&mut self, scale: Scale) -> f64 {
        match self.backend {
            NoiseBackend::Laplace => self.laplace_sample(scale),
            NoiseBackend::Geometric => self.geometric_sample(scale) as f64,
        }
    }
}

/// `-b * sign(u - 1/2) * ln(1 - 2|u - 1/2|)` for `u` in (0, 1).
pub fn laplace_inverse_cdf(b: f64, u: f64) -> f64 {
    let centered = u - 0.5;
    if centered == 0.0 {
        return 0.0;
    }
    -b * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// `Pr[Lap(b) <= x]`.
pub fn laplace_cdf(b: f64, x: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

/// Upper tail `Pr[Lap(b) >= t] = exp(-t/b) / 2` for `t >= 0`.
pub fn laplace_tail(scale: Scale, t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::InvalidParams(format!(
            "tail point must be non-negative, got {t}"
        )));
    }
    Ok(0.5 * (-t / scale.get()).exp())
}

/// `Pr[X = x]` for the two-sided geometric distribution at scale `b`.
pub fn geometric_pmf(scale: Scale, x: i64) -> f64 {
    let alpha = (-1.0 / scale.get()).exp();
    (1.0 - alpha) / (1.0 + alpha) * alpha.powi(x.unsigned_abs().min(i32::MAX as u64) as i32)
}
