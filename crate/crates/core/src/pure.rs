//! ε-differentially private release via an offset-corrected sketch.
//!
//! Adding the decrement count γ back to every counter and then subtracting
//! n/(k+1) makes neighbouring sketches agree except for one counter (by 1)
//! and a uniform 1/(k+1) shift, so the ℓ1-sensitivity is at most
//! 1 + k/(k+1) < 2. Noise Lap(2/ε) is then added to every universe item and
//! the top k noisy counts are released.
//!
//! Offsets are kept exact: every stored value is an integer numerator over
//! the common denominator k+1.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mg::Sketch;
use crate::noise::{NoiseSource, Scale};
use crate::release::check_epsilon;
use crate::summary::{Mechanism, PrivateSummary};

/// Default cap on the universe size for mechanisms that touch every item.
pub const DEFAULT_UNIVERSE_CAP: u64 = 1 << 24;

/// Sketch after the offset correction. Counts are `numerator / (k+1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetSketch {
    k: usize,
    d: u64,
    n: u64,
    numerators: BTreeMap<u64, i128>,
    released: bool,
}

impl OffsetSketch {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> u64 {
        self.d
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Common denominator `k + 1`.
    pub fn denominator(&self) -> i128 {
        self.k as i128 + 1
    }

    /// Exact numerator of the count for `key` (0 when absent).
    pub fn numerator(&self, key: u64) -> i128 {
        self.numerators.get(&key).copied().unwrap_or(0)
    }

    pub fn count(&self, key: u64) -> f64 {
        self.numerator(key) as f64 / self.denominator() as f64
    }

    /// Stored `(key, numerator)` pairs in ascending key order.
    pub fn numerators(&self) -> impl Iterator<Item = (u64, i128)> + '_ {
        self.numerators.iter().map(|(&key, &num)| (key, num))
    }

    pub fn len(&self) -> usize {
        self.numerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerators.is_empty()
    }
}

/// `count + γ - n/(k+1)` for each real stored key, dropping negatives.
pub fn postprocess(sketch: &Sketch) -> OffsetSketch {
    let denom = sketch.k() as i128 + 1;
    let gamma = sketch.gamma() as i128;
    let n = sketch.n() as i128;
    let numerators = sketch
        .real_entries()
        .map(|(key, count)| (key, (count as i128 + gamma) * denom - n))
        .filter(|&(_, num)| num >= 0)
        .collect();
    OffsetSketch {
        k: sketch.k(),
        d: sketch.d(),
        n: sketch.n(),
        numerators,
        released: false,
    }
}

/// Draws one noise variate for every item in `[1, d]` (in ascending order)
/// and returns the `k` largest `value(item) + noise`, ties going to the
/// smaller key, sorted by key.
pub(crate) fn universe_top_k<N: NoiseSource>(
    d: u64,
    k: usize,
    value: impl Fn(u64) -> f64,
    scale: Scale,
    noise: &mut N,
) -> Vec<(u64, f64)> {
    let mut noisy: Vec<(u64, f64)> = (1..=d)
        .map(|u| (u, value(u) + noise.sample(scale)))
        .collect();
    let by_rank =
        |a: &(u64, f64), b: &(u64, f64)| -> Ordering { b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)) };
    if noisy.len() > k {
        noisy.select_nth_unstable_by(k, by_rank);
        noisy.truncate(k);
    }
    noisy.sort_unstable_by_key(|&(key, _)| key);
    noisy
}

pub(crate) fn check_universe(d: u64, cap: u64) -> Result<()> {
    if d > cap {
        return Err(Error::UniverseTooLarge { d, cap });
    }
    Ok(())
}

/// Releases the top-k noisy counts over the whole universe with
/// Lap(2/ε) noise. Costs O(d); `d` above `max_universe` is refused.
pub fn privatize_pure<N: NoiseSource>(
    offsets: &mut OffsetSketch,
    epsilon: f64,
    max_universe: u64,
    noise: &mut N,
) -> Result<PrivateSummary> {
    check_epsilon(epsilon)?;
    check_universe(offsets.d, max_universe)?;
    if std::mem::replace(&mut offsets.released, true) {
        return Err(Error::AlreadyReleased);
    }
    let scale = Scale(2.0 / epsilon);
    let top = universe_top_k(offsets.d, offsets.k, |u| offsets.count(u), scale, noise);
    let mut summary =
        PrivateSummary::new(Mechanism::Pure, offsets.k, offsets.d, epsilon, None, None);
    for (key, count) in top {
        summary.insert(key, count);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseSampler, ZeroNoise};

    #[test]
    fn postprocess_traces() {
        let o = postprocess(&Sketch::from_stream(2, 3, &[1, 2, 3]).unwrap());
        assert_eq!(o.numerators().collect::<Vec<_>>(), vec![(1, 0), (2, 0)]);

        let o = postprocess(&Sketch::new(2, 3).unwrap());
        assert!(o.is_empty());

        let o = postprocess(&Sketch::from_stream(2, 3, &[1, 1, 1]).unwrap());
        assert_eq!(o.numerators().collect::<Vec<_>>(), vec![(1, 6)]);
        assert_eq!(o.count(1), 2.0);
    }

    #[test]
    fn postprocess_drops_negatives() {
        // ends at {2:0, 3:1}, γ=2, n=7: key 2 -> (0+2) - 7/3 < 0
        let s = Sketch::from_stream(2, 4, &[1, 2, 2, 3, 3, 3, 4]).unwrap();
        assert_eq!(s.entries().collect::<Vec<_>>(), vec![(2, 0), (3, 1)]);
        assert_eq!(s.gamma(), 2);
        let o = postprocess(&s);
        assert_eq!(o.numerators().collect::<Vec<_>>(), vec![(3, 2)]);
    }

    #[test]
    fn zero_noise_top_k() {
        let s = Sketch::from_stream(2, 4, &[1, 1, 1, 1, 1, 2, 2, 2]).unwrap();
        let mut o = postprocess(&s);
        // n/(k+1) = 8/3 is subtracted from each count
        let out = privatize_pure(&mut o, 1.0, DEFAULT_UNIVERSE_CAP, &mut ZeroNoise).unwrap();
        let keys: Vec<u64> = out.keys().collect();
        assert_eq!(keys, vec![1, 2]);
        assert!((out.count(1) - (5.0 - 8.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn top_k_ties_prefer_smaller_key() {
        let top = universe_top_k(5, 2, |_| 0.0, Scale(1.0), &mut ZeroNoise);
        assert_eq!(top, vec![(1, 0.0), (2, 0.0)]);
        let top = universe_top_k(
            5,
            2,
            |u| if u == 4 { 1.0 } else { 0.0 },
            Scale(1.0),
            &mut ZeroNoise,
        );
        assert_eq!(top, vec![(1, 0.0), (4, 1.0)]);
        let top = universe_top_k(2, 5, |u| u as f64, Scale(1.0), &mut ZeroNoise);
        assert_eq!(top.len(), 2);
    }

    #[test]
    fn empty_sketch_releases_noise_only() {
        let mut o = postprocess(&Sketch::new(2, 3).unwrap());
        let out = privatize_pure(
            &mut o,
            1.0,
            DEFAULT_UNIVERSE_CAP,
            &mut NoiseSampler::laplace(4),
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.keys().all(|k| (1..=3).contains(&k)));
    }

    #[test]
    fn guards() {
        let mut o = postprocess(&Sketch::new(2, 100).unwrap());
        assert!(matches!(
            privatize_pure(&mut o, 1.0, 50, &mut ZeroNoise),
            Err(Error::UniverseTooLarge { d: 100, cap: 50 })
        ));
        assert!(privatize_pure(&mut o, -1.0, 1000, &mut ZeroNoise).is_err());
        privatize_pure(&mut o, 1.0, 1000, &mut ZeroNoise).unwrap();
        assert!(matches!(
            privatize_pure(&mut o, 1.0, 1000, &mut ZeroNoise),
            Err(Error::AlreadyReleased)
        ));
    }

    #[test]
    fn max_noise_magnitude_union_bound() {
        // all d samples of Lap(2/ε) bounded by 2 ln(d/β)/ε w.p. >= 1-β
        let (eps, d, beta) = (1.0, 100u64, 0.05);
        let bound = 2.0 * (d as f64 / beta).ln() / eps;
        let mut noise = NoiseSampler::laplace(17);
        let trials = 10_000;
        let ok = (0..trials)
            .filter(|_| (0..d).all(|_| noise.sample(Scale(2.0 / eps)).abs() <= bound))
            .count();
        assert!(ok as f64 / trials as f64 >= 1.0 - beta);
    }
}
