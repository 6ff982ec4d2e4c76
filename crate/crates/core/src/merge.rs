//! Merging Misra-Gries sketches and releasing merged sketches.
//!
//! Two sketches merge by adding counters key-wise, subtracting the (k+1)-th
//! largest summed counter from every counter and dropping what is no longer
//! positive. The result keeps the single-sketch guarantee over the combined
//! input: every estimate is within N/(k+1) below the true frequency, for any
//! merge order.
//!
//! Between neighbouring inputs a merged sketch can differ by 1 in up to `k`
//! counters, so releases add noise at scale k/ε.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mg::Sketch;
use crate::noise::{NoiseSource, Scale};
use crate::pure::{check_universe, universe_top_k};
use crate::release::{check_epsilon, PrivacyParams};
use crate::summary::{Mechanism, PrivateSummary};

/// A merged sketch: at most `k` real keys, all with positive counters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedSketch {
    k: usize,
    d: u64,
    n: u64,
    entries: BTreeMap<u64, u64>,
    released: bool,
}

impl MergedSketch {
    /// An empty merged sketch (identity for [`merge`]).
    pub fn empty(k: usize, d: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidConfig("k and d must be at least 1".into()));
        }
        Ok(Self {
            k,
            d,
            n: 0,
            entries: BTreeMap::new(),
            released: false,
        })
    }

    pub fn from_parts(
        k: usize,
        d: u64,
        n: u64,
        entries: impl IntoIterator<Item = (u64, u64)>,
    ) -> Result<Self> {
        let mut m = Self::empty(k, d)?;
        for (key, count) in entries {
            if key == 0 || key > d {
                return Err(Error::InconsistentSketch(format!(
                    "merged key {key} outside [1, {d}]"
                )));
            }
            if count == 0 {
                return Err(Error::InconsistentSketch(format!(
                    "merged key {key} has a zero counter"
                )));
            }
            if m.entries.insert(key, count).is_some() {
                return Err(Error::InconsistentSketch(format!("duplicate key {key}")));
            }
        }
        if m.entries.len() > k {
            return Err(Error::InconsistentSketch(format!(
                "merged sketch holds {} keys but k = {k}",
                m.entries.len()
            )));
        }
        let total: u128 = m.entries.values().map(|&c| c as u128).sum();
        if total > n as u128 {
            return Err(Error::InconsistentSketch(format!(
                "counter sum {total} exceeds stream length {n}"
            )));
        }
        m.n = n;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> u64 {
        self.d
    }

    /// Total length of all merged streams.
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.entries.iter().map(|(&key, &count)| (key, count))
    }

    pub fn estimate(&self, key: u64) -> u64 {
        self.entries.get(&key).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn mark_released(&mut self) -> Result<()> {
        if std::mem::replace(&mut self.released, true) {
            return Err(Error::AlreadyReleased);
        }
        Ok(())
    }
}

impl From<&Sketch> for MergedSketch {
    /// Drops dummies and zero counters.
    fn from(s: &Sketch) -> Self {
        Self {
            k: s.k(),
            d: s.d(),
            n: s.n(),
            entries: s.real_entries().filter(|&(_, c)| c > 0).collect(),
            released: false,
        }
    }
}

/// Merges two sketches of equal capacity and universe.
pub fn merge(a: &MergedSketch, b: &MergedSketch) -> Result<MergedSketch> {
    if a.k != b.k {
        return Err(Error::Mismatch(format!("capacity {} vs {}", a.k, b.k)));
    }
    if a.d != b.d {
        return Err(Error::Mismatch(format!("universe size {} vs {}", a.d, b.d)));
    }
    let mut sums = a.entries.clone();
    for (&key, &count) in &b.entries {
        *sums.entry(key).or_insert(0) += count;
    }
    if sums.len() > a.k {
        let mut values: Vec<u64> = sums.values().copied().collect();
        // (k+1)-th largest == index k in descending order
        let (_, &mut cut, _) = values.select_nth_unstable_by(a.k, |x, y| y.cmp(x));
        sums.retain(|_, count| {
            *count = count.saturating_sub(cut);
            *count > 0
        });
    }
    Ok(MergedSketch {
        k: a.k,
        d: a.d,
        n: a.n + b.n,
        entries: sums,
        released: false,
    })
}

/// Left fold of [`merge`] over `sketches`.
pub fn merge_all<'a>(
    sketches: impl IntoIterator<Item = &'a MergedSketch>,
) -> Result<Option<MergedSketch>> {
    let mut iter = sketches.into_iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first.clone();
    acc.released = false;
    for next in iter {
        acc = merge(&acc, next)?;
    }
    Ok(Some(acc))
}

/// `1 + (k/ε) ln(2k/δ)`: a per-key tail of δ/(4k) at scale k/ε, union-bounded
/// over the at most 2k keys stored by only one of two neighbouring merged
/// sketches (each with count at most 1), gives at most δ/2.
pub fn threshold_merged(p: &PrivacyParams, k: usize) -> f64 {
    let k = k as f64;
    1.0 + (k / p.epsilon()) * (2.0 * k / p.delta()).ln()
}

/// Lap(k/ε) on every item of `[1, d]`, top-k released. Pure ε-DP.
pub fn privatize_merged_universe<N: NoiseSource>(
    m: &mut MergedSketch,
    epsilon: f64,
    max_universe: u64,
    noise: &mut N,
) -> Result<PrivateSummary> {
    check_epsilon(epsilon)?;
    check_universe(m.d, max_universe)?;
    m.mark_released()?;
    let scale = Scale(m.k as f64 / epsilon);
    let top = universe_top_k(m.d, m.k, |u| m.estimate(u) as f64, scale, noise);
    let mut summary = PrivateSummary::new(Mechanism::MergedUniverse, m.k, m.d, epsilon, None, None);
    for (key, count) in top {
        summary.insert(key, count);
    }
    Ok(summary)
}

/// Independent Lap(k/ε) on each stored counter, released when at least
/// [`threshold_merged`].
pub fn privatize_merged_threshold<N: NoiseSource>(
    m: &mut MergedSketch,
    params: &PrivacyParams,
    noise: &mut N,
) -> Result<PrivateSummary> {
    privatize_merged_threshold_with(m, params, threshold_merged(params, m.k), noise)
}

#[doc(hidden)]
pub fn privatize_merged_threshold_with<N: NoiseSource>(
    m: &mut MergedSketch,
    params: &PrivacyParams,
    threshold: f64,
    noise: &mut N,
) -> Result<PrivateSummary> {
    m.mark_released()?;
    let scale = Scale(m.k as f64 / params.epsilon());
    let mut summary = PrivateSummary::new(
        Mechanism::MergedThreshold,
        m.k,
        m.d,
        params.epsilon(),
        Some(params.delta()),
        Some(threshold),
    );
    for (key, count) in m.entries() {
        let noisy = count as f64 + noise.sample(scale);
        if noisy >= threshold {
            summary.insert(key, noisy);
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{laplace_cdf, laplace_tail, NoiseSampler, ZeroNoise};

    fn merged(k: usize, d: u64, pairs: &[(u64, u64)]) -> MergedSketch {
        let n = pairs.iter().map(|p| p.1).sum();
        MergedSketch::from_parts(k, d, n, pairs.iter().copied()).unwrap()
    }

    #[test]
    fn worked_example() {
        let a = merged(2, 3, &[(1, 3), (2, 1)]);
        let b = merged(2, 3, &[(2, 2), (3, 2)]);
        let m = merge(&a, &b).unwrap();
        assert_eq!(m.entries().collect::<Vec<_>>(), vec![(1, 1), (2, 1)]);
        assert_eq!(m.n(), 8);
    }

    #[test]
    fn empty_is_identity_and_small_unions_add() {
        let a = merged(2, 3, &[(1, 3), (2, 1)]);
        let e = MergedSketch::empty(2, 3).unwrap();
        assert_eq!(merge(&a, &e).unwrap(), a);
        assert_eq!(merge(&e, &a).unwrap(), a);
        let b = merged(2, 3, &[(1, 4)]);
        assert_eq!(
            merge(&a, &b).unwrap().entries().collect::<Vec<_>>(),
            vec![(1, 7), (2, 1)]
        );
    }

    #[test]
    fn duplicate_order_statistic() {
        // sums {1:2, 2:2, 3:2}, k=2: third largest is 2, everything drops
        let a = merged(2, 3, &[(1, 2), (2, 1)]);
        let b = merged(2, 3, &[(2, 1), (3, 2)]);
        assert!(merge(&a, &b).unwrap().is_empty());
    }

    #[test]
    fn mismatch_rejected() {
        let a = MergedSketch::empty(2, 3).unwrap();
        assert!(matches!(
            merge(&a, &MergedSketch::empty(3, 3).unwrap()),
            Err(Error::Mismatch(_))
        ));
        assert!(matches!(
            merge(&a, &MergedSketch::empty(2, 4).unwrap()),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn from_sketch_strips_dummies_and_zeros() {
        let s = Sketch::from_stream(3, 4, &[1, 1, 2]).unwrap();
        let m = MergedSketch::from(&s);
        assert_eq!(m.entries().collect::<Vec<_>>(), vec![(1, 2), (2, 1)]);
        let s = Sketch::from_stream(2, 3, &[1, 2, 3]).unwrap();
        assert!(MergedSketch::from(&s).is_empty());
    }

    #[test]
    fn merge_all_folds() {
        let parts = [
            merged(2, 3, &[(1, 3), (2, 1)]),
            merged(2, 3, &[(2, 2), (3, 2)]),
            MergedSketch::empty(2, 3).unwrap(),
        ];
        let m = merge_all(&parts).unwrap().unwrap();
        assert_eq!(m.entries().collect::<Vec<_>>(), vec![(1, 1), (2, 1)]);
        assert!(merge_all(&[]).unwrap().is_none());
    }

    #[test]
    fn merged_threshold_value() {
        let p = PrivacyParams::new(1.0, 0.05, 0.05).unwrap();
        let t = threshold_merged(&p, 2);
        assert!((t - (1.0 + 2.0 * 80f64.ln())).abs() < 1e-12);
        assert!((t - 9.764_06).abs() < 1e-4);
        // per-key tail from a true count of 1 is δ/(4k)
        let tail = laplace_tail(Scale(2.0), t - 1.0).unwrap();
        assert!((tail - 0.05 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_identities() {
        let p = PrivacyParams::new(1.0, 0.05, 0.05).unwrap();
        let mut m = merged(2, 5, &[(2, 40), (4, 30)]);
        let out = privatize_merged_threshold(&mut m, &p, &mut ZeroNoise).unwrap();
        assert_eq!(
            out.entries().collect::<Vec<_>>(),
            vec![(2, 40.0), (4, 30.0)]
        );
        assert!(privatize_merged_threshold(&mut m, &p, &mut ZeroNoise).is_err());

        let mut m = merged(2, 5, &[(2, 4), (4, 3)]);
        let out = privatize_merged_universe(&mut m, 1.0, 100, &mut ZeroNoise).unwrap();
        assert_eq!(out.entries().collect::<Vec<_>>(), vec![(2, 4.0), (4, 3.0)]);
    }

    #[test]
    fn universe_guard() {
        let mut m = MergedSketch::empty(2, 1000).unwrap();
        assert!(matches!(
            privatize_merged_universe(&mut m, 1.0, 10, &mut ZeroNoise),
            Err(Error::UniverseTooLarge { .. })
        ));
    }

    #[test]
    fn universe_release_matches_two_laplace_closed_form() {
        // k=1, d=2, {1:10}: key 1 loses iff X2 - X1 > 10 with X_i ~ Lap(1/ε).
        // Difference of two Lap(b): Pr[D > t] = e^{-t/b} (2 + t/b) / 4.
        let eps: f64 = 0.5;
        let b = 1.0 / eps;
        let t: f64 = 10.0;
        let p_lose = (-t / b).exp() * (2.0 + t / b) / 4.0;
        // cross-check the closed form by numerical convolution
        let steps = 400_000;
        let (lo, hi) = (-60.0, 60.0);
        let h = (hi - lo) / steps as f64;
        let numeric: f64 = (0..steps)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                let density = (-x.abs() / b).exp() / (2.0 * b);
                density * (1.0 - laplace_cdf(b, x + t))
            })
            .sum::<f64>()
            * h;
        assert!((numeric - p_lose).abs() < 1e-6);

        let trials = 200_000;
        let mut noise = NoiseSampler::laplace(31);
        let mut lost = 0u32;
        for _ in 0..trials {
            let mut m = merged(1, 2, &[(1, 10)]);
            let out = privatize_merged_universe(&mut m, eps, 100, &mut noise).unwrap();
            if out.keys().next() == Some(2) {
                lost += 1;
            }
        }
        let se = (p_lose * (1.0 - p_lose) / trials as f64).sqrt();
        assert!((lost as f64 / trials as f64 - p_lose).abs() <= 3.0 * se);
    }

    #[test]
    fn count_one_key_rarely_clears_merged_threshold() {
        let p = PrivacyParams::new(1.0, 0.05, 0.05).unwrap();
        let k = 2;
        let trials = 400_000;
        let mut noise = NoiseSampler::laplace(8);
        let mut hits = 0u32;
        for _ in 0..trials {
            let mut m = merged(k, 4, &[(3, 1)]);
            if !privatize_merged_threshold(&mut m, &p, &mut noise)
                .unwrap()
                .is_empty()
            {
                hits += 1;
            }
        }
        let bound = p.delta() / (4.0 * k as f64);
        let se = (bound * (1.0 - bound) / trials as f64).sqrt();
        assert!(hits as f64 / trials as f64 <= bound + 3.0 * se);
    }

    #[test]
    fn universe_noise_variance() {
        // variance of Lap(k/ε) is 2k²/ε²
        let (k, eps) = (3.0, 0.7);
        let scale = Scale(k / eps);
        let mut noise = NoiseSampler::laplace(12);
        let draws = 1_000_000;
        let xs: Vec<f64> = (0..draws).map(|_| noise.sample(scale)).collect();
        let mean = xs.iter().sum::<f64>() / draws as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let expected = 2.0 * k * k / (eps * eps);
        assert!((var / expected - 1.0).abs() < 0.02);
    }
}
