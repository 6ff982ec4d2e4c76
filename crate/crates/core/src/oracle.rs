//! Brute-force oracles and verification harnesses.
//!
//! Everything here is deliberately naive: exact histograms, a from-scratch
//! textbook Misra-Gries, exhaustive enumeration of short streams and their
//! one-element deletions, and a Monte Carlo auditor that estimates event
//! probabilities of a mechanism on two neighbouring streams. Monte Carlo can
//! only falsify a privacy claim, never certify it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::merge::{merge, MergedSketch};
use crate::mg::Sketch;
use crate::noise::{NoiseBackend, NoiseSampler, NoiseSource, Scale};
use crate::pure::postprocess;
use crate::summary::{Mechanism, PrivateSummary};

/// Upper limit on the number of streams an exhaustive check may visit.
pub const MAX_ENUMERATED_STREAMS: u64 = 50_000_000;

/// Exact frequency counts of a stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExactHistogram {
    counts: BTreeMap<u64, u64>,
    n: u64,
}

impl ExactHistogram {
    pub fn from_stream(items: &[u64], d: u64) -> Result<Self> {
        let mut h = Self::default();
        for (position, &item) in items.iter().enumerate() {
            if item == 0 || item > d {
                return Err(Error::StreamItemOutOfRange { item, d, position });
            }
            *h.counts.entry(item).or_insert(0) += 1;
            h.n += 1;
        }
        Ok(h)
    }

    pub fn count(&self, item: u64) -> u64 {
        self.counts.get(&item).copied().unwrap_or(0)
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn counts(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (k, c))
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (k, c) in other.counts() {
            *out.counts.entry(k).or_insert(0) += c;
        }
        out.n += other.n;
        out
    }
}

/// Textbook Misra-Gries written from scratch: keys whose counter reaches
/// zero are removed immediately.
pub fn canonical_mg(items: &[u64], k: usize, d: u64) -> Result<BTreeMap<u64, u64>> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidConfig("k and d must be at least 1".into()));
    }
    let mut counters: Vec<(u64, u64)> = Vec::with_capacity(k);
    for (position, &x) in items.iter().enumerate() {
        if x == 0 || x > d {
            return Err(Error::StreamItemOutOfRange {
                item: x,
                d,
                position,
            });
        }
        if let Some(slot) = counters.iter_mut().find(|(key, _)| *key == x) {
            slot.1 += 1;
        } else if counters.len() < k {
            counters.push((x, 1));
        } else {
            for slot in counters.iter_mut() {
                slot.1 -= 1;
            }
            counters.retain(|&(_, c)| c > 0);
        }
    }
    Ok(counters.into_iter().collect())
}

/// Calls `visit` on every stream over `[1, d]` of length at most `n_max`,
/// the empty stream included, in lexicographic depth-first order.
pub fn enumerate_streams(d: u64, n_max: usize, mut visit: impl FnMut(&[u64])) -> Result<u64> {
    guard_enumeration(d, n_max, false)?;
    let mut stream = Vec::with_capacity(n_max);
    let mut count = 0;
    fn rec(
        d: u64,
        n_max: usize,
        stream: &mut Vec<u64>,
        count: &mut u64,
        visit: &mut dyn FnMut(&[u64]),
    ) {
        visit(stream);
        *count += 1;
        if stream.len() == n_max {
            return;
        }
        for x in 1..=d {
            stream.push(x);
            rec(d, n_max, stream, count, visit);
            stream.pop();
        }
    }
    rec(d, n_max, &mut stream, &mut count, &mut visit);
    Ok(count)
}

fn guard_enumeration(d: u64, n_max: usize, pairs: bool) -> Result<u64> {
    let mut total: u64 = 0;
    let mut power: u64 = 1;
    for n in 0..=n_max as u64 {
        let term = if pairs {
            power.saturating_mul(n)
        } else {
            power
        };
        total = total.saturating_add(term);
        power = power.saturating_mul(d);
    }
    if total > MAX_ENUMERATED_STREAMS {
        return Err(Error::EnumerationTooLarge(format!(
            "d={d}, n_max={n_max} would visit {total} cases (limit {MAX_ENUMERATED_STREAMS})"
        )));
    }
    Ok(total)
}

/// Two streams where `shorter` is `longer` with the element at
/// `removal_index` deleted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeighborPair {
    pub longer: Vec<u64>,
    pub shorter: Vec<u64>,
    pub removal_index: usize,
}

impl NeighborPair {
    pub fn new(longer: Vec<u64>, removal_index: usize) -> Result<Self> {
        if removal_index >= longer.len() {
            return Err(Error::InvalidConfig(format!(
                "removal index {removal_index} out of bounds for a stream of length {}",
                longer.len()
            )));
        }
        let mut shorter = longer.clone();
        shorter.remove(removal_index);
        Ok(Self {
            longer,
            shorter,
            removal_index,
        })
    }
}

/// Visits every non-empty stream of length at most `n_max` over `[1, d]`
/// together with each of its single-element deletions. Returns the number
/// of pairs, `sum_{n <= n_max} d^n * n`.
pub fn enumerate_neighbor_pairs(
    d: u64,
    n_max: usize,
    mut visit: impl FnMut(&NeighborPair),
) -> Result<u64> {
    guard_enumeration(d, n_max, true)?;
    let mut pairs = 0;
    enumerate_streams(d, n_max, |stream| {
        for i in 0..stream.len() {
            let pair = NeighborPair::new(stream.to_vec(), i).expect("index in bounds");
            visit(&pair);
            pairs += 1;
        }
    })?;
    Ok(pairs)
}

/// Which neighbour is treated as the sketch `(T, c)` in the structure check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(T, c)` from the longer stream, `(T', c')` from the shorter one.
    Forward,
    /// `(T, c)` from the shorter stream; the cases are mirrored.
    Flipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureCase {
    /// The longer stream ran one extra decrement-all step.
    AllMinusOne,
    /// The longer stream has exactly one counter larger by one.
    SingleCounterPlusOne,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeighborStructureReport {
    pub direction: Direction,
    pub intersection_size: usize,
    pub off_intersection_max: u64,
    pub case: StructureCase,
    /// Key whose counter differs, for [`StructureCase::SingleCounterPlusOne`].
    pub key: Option<u64>,
    /// Sketch dumps, filled only on violations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump: Option<String>,
}

fn counter_map(s: &Sketch) -> BTreeMap<u64, u64> {
    s.entries().collect()
}

fn at(map: &BTreeMap<u64, u64>, key: u64) -> i64 {
    map.get(&key).copied().unwrap_or(0) as i64
}

/// Runs the sketch on both streams of `pair` and checks the neighbour
/// structure: at least `k - 2` shared keys, every non-shared counter at most
/// 1, and exactly one of the two counter relations.
pub fn check_neighbor_structure(
    pair: &NeighborPair,
    k: usize,
    d: u64,
    direction: Direction,
) -> Result<NeighborStructureReport> {
    let long = Sketch::from_stream(k, d, &pair.longer)?;
    let short = Sketch::from_stream(k, d, &pair.shorter)?;
    let (t, t_prime) = match direction {
        Direction::Forward => (counter_map(&long), counter_map(&short)),
        Direction::Flipped => (counter_map(&short), counter_map(&long)),
    };
    let keys_t: BTreeSet<u64> = t.keys().copied().collect();
    let keys_tp: BTreeSet<u64> = t_prime.keys().copied().collect();
    let union: BTreeSet<u64> = keys_t.union(&keys_tp).copied().collect();
    let intersection_size = keys_t.intersection(&keys_tp).count();
    let off_intersection_max = keys_t
        .symmetric_difference(&keys_tp)
        .map(|&key| t.get(&key).or(t_prime.get(&key)).copied().unwrap_or(0))
        .max()
        .unwrap_or(0);

    let (all_case, single) = match direction {
        Direction::Forward => {
            // (1) c_i = c'_i - 1 on T', c_j = 0 off T'
            let all = keys_tp.iter().all(|&i| at(&t, i) == at(&t_prime, i) - 1)
                && keys_t.difference(&keys_tp).all(|&j| at(&t, j) == 0);
            // (2) one i in T with c_i = c'_i + 1, equal elsewhere
            let single = single_plus_one(&keys_t, &union, |i| at(&t, i) - at(&t_prime, i));
            (all, single)
        }
        Direction::Flipped => {
            // (1) c_i - 1 = c'_i on T, c'_j = 0 off T
            let all = keys_t.iter().all(|&i| at(&t, i) - 1 == at(&t_prime, i))
                && keys_tp.difference(&keys_t).all(|&j| at(&t_prime, j) == 0);
            // (2) one i in T' with c_i + 1 = c'_i, equal elsewhere
            let single = single_plus_one(&keys_tp, &union, |i| at(&t_prime, i) - at(&t, i));
            (all, single)
        }
    };

    let structural_ok = intersection_size + 2 >= k && off_intersection_max <= 1;
    let (case, key) = match (structural_ok, all_case, single) {
        (true, true, None) => (StructureCase::AllMinusOne, None),
        (true, false, Some(key)) => (StructureCase::SingleCounterPlusOne, Some(key)),
        _ => (StructureCase::Violation, None),
    };
    let dump = (case == StructureCase::Violation).then(|| {
        format!(
            "longer={:?} sketch={:?} gamma={}; shorter={:?} sketch={:?} gamma={}",
            pair.longer,
            counter_map(&long),
            long.gamma(),
            pair.shorter,
            counter_map(&short),
            short.gamma()
        )
    });
    Ok(NeighborStructureReport {
        direction,
        intersection_size,
        off_intersection_max,
        case,
        key,
        dump,
    })
}

// Returns the unique key in `candidates` where `diff` is +1 if every other
// key of `universe` has diff 0.
fn single_plus_one(
    candidates: &BTreeSet<u64>,
    universe: &BTreeSet<u64>,
    diff: impl Fn(u64) -> i64,
) -> Option<u64> {
    let nonzero: Vec<u64> = universe.iter().copied().filter(|&x| diff(x) != 0).collect();
    match nonzero.as_slice() {
        [x] if diff(*x) == 1 && candidates.contains(x) => Some(*x),
        _ => None,
    }
}

/// Outcome of an exhaustive check over one `(d, n_max, k)` grid point.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ExhaustiveReport {
    pub check: String,
    pub d: u64,
    pub n_max: usize,
    pub k: usize,
    pub cases: u64,
    pub violation_count: u64,
    /// First few violations, for inspection.
    pub violations: Vec<String>,
}

impl ExhaustiveReport {
    fn new(check: &str, d: u64, n_max: usize, k: usize) -> Self {
        Self {
            check: check.into(),
            d,
            n_max,
            k,
            ..Default::default()
        }
    }

    fn fail(&mut self, detail: impl FnOnce() -> String) {
        self.violation_count += 1;
        if self.violations.len() < 20 {
            self.violations.push(detail());
        }
    }

    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

/// Estimate accuracy and sketch invariants on every stream: for every item,
/// `f(x) - n/(k+1) <= estimate <= f(x)` and `estimate >= f(x) - gamma`;
/// exactly `k` entries, dummies at zero, `gamma <= floor(n/(k+1))`.
pub fn check_sketch_accuracy(d: u64, n_max: usize, k: usize) -> Result<ExhaustiveReport> {
    guard_enumeration(d, n_max, false)?;
    let mut report = ExhaustiveReport::new("accuracy", d, n_max, k);
    let root = Sketch::new(k, d)?;
    let mut stream = Vec::with_capacity(n_max);
    let mut hist = vec![0u64; d as usize + 1];

    fn rec(
        sketch: &Sketch,
        stream: &mut Vec<u64>,
        hist: &mut Vec<u64>,
        n_max: usize,
        report: &mut ExhaustiveReport,
    ) {
        report.cases += 1;
        let (k, d, n, gamma) = (sketch.k() as u64, sketch.d(), sketch.n(), sketch.gamma());
        for x in 1..=d {
            let f = hist[x as usize];
            let est = sketch.estimate(x).expect("real item");
            // f - n/(k+1) <= est  <=>  (f - est)(k+1) <= n
            let ok = est <= f && (f - est) * (k + 1) <= n && f - est <= gamma;
            if !ok {
                report.fail(|| {
                    format!("stream={stream:?} item={x} f={f} estimate={est} gamma={gamma}")
                });
            }
        }
        let dummies_zero = sketch.entries().all(|(key, c)| key <= d || c == 0);
        if sketch.entries().count() as u64 != k || !dummies_zero || gamma > n / (k + 1) {
            report.fail(|| format!("stream={stream:?} broke a sketch invariant: {sketch:?}"));
        }
        if stream.len() == n_max {
            return;
        }
        for x in 1..=d {
            let mut next = sketch.clone();
            next.update(x).expect("real item");
            stream.push(x);
            hist[x as usize] += 1;
            rec(&next, stream, hist, n_max, report);
            hist[x as usize] -= 1;
            stream.pop();
        }
    }
    rec(&root, &mut stream, &mut hist, n_max, &mut report);
    Ok(report)
}

/// Estimates of the zero-retaining sketch equal those of [`canonical_mg`].
pub fn check_canonical_equivalence(d: u64, n_max: usize, k: usize) -> Result<ExhaustiveReport> {
    let mut report = ExhaustiveReport::new("equivalence", d, n_max, k);
    let mut err = None;
    enumerate_streams(d, n_max, |stream| {
        report.cases += 1;
        let sketch = match Sketch::from_stream(k, d, stream) {
            Ok(s) => s,
            Err(e) => return err = Some(e),
        };
        let canonical = canonical_mg(stream, k, d).expect("valid stream");
        for x in 1..=d {
            let a = sketch.estimate(x).expect("real item");
            let b = canonical.get(&x).copied().unwrap_or(0);
            if a != b {
                report.fail(|| format!("stream={stream:?} item={x} sketch={a} canonical={b}"));
            }
        }
    })?;
    err.map_or(Ok(report), Err)
}

/// Neighbour structure on every pair, in both directions.
pub fn check_neighbor_structure_exhaustive(
    d: u64,
    n_max: usize,
    k: usize,
) -> Result<ExhaustiveReport> {
    let mut report = ExhaustiveReport::new("neighbor_structure", d, n_max, k);
    let mut err = None;
    enumerate_neighbor_pairs(d, n_max, |pair| {
        for direction in [Direction::Forward, Direction::Flipped] {
            report.cases += 1;
            match check_neighbor_structure(pair, k, d, direction) {
                Ok(r) if r.case == StructureCase::Violation => {
                    report.fail(|| format!("{direction:?}: {}", r.dump.unwrap_or_default()))
                }
                Ok(_) => {}
                Err(e) => err = Some(e),
            }
        }
    })?;
    err.map_or(Ok(report), Err)
}

/// Offset-corrected sketches of neighbours: ℓ1 distance over the whole
/// universe at most `1 + k/(k+1)` (in exact arithmetic), the accuracy
/// guarantee preserved, and before the differing `n/(k+1)` shift the two
/// sketches equal or differ by at most 1 in a single counter.
pub fn check_offset_sensitivity(d: u64, n_max: usize, k: usize) -> Result<ExhaustiveReport> {
    let mut report = ExhaustiveReport::new("offset_sensitivity", d, n_max, k);
    let k1 = k as i128 + 1;
    let mut err = None;
    let mut run = |pair: &NeighborPair| -> Result<()> {
        report.cases += 1;
        let long = Sketch::from_stream(k, d, &pair.longer)?;
        let short = Sketch::from_stream(k, d, &pair.shorter)?;
        let (ol, os) = (postprocess(&long), postprocess(&short));
        if !matches!(long.gamma().checked_sub(short.gamma()), Some(0 | 1)) {
            report.fail(|| {
                format!(
                    "gamma {} vs {} pair={:?}/{:?}",
                    long.gamma(),
                    short.gamma(),
                    pair.longer,
                    pair.shorter
                )
            });
        }

        // ℓ1 in units of 1/(k+1): bound is (k+1) + k
        let l1: i128 = (1..=d)
            .map(|x| (ol.numerator(x) - os.numerator(x)).abs())
            .sum();
        if l1 > 2 * k1 - 1 {
            report.fail(|| format!("l1={l1}/{k1} pair={:?}/{:?}", pair.longer, pair.shorter));
        }

        for (stream, o) in [(&pair.longer, &ol), (&pair.shorter, &os)] {
            let hist = ExactHistogram::from_stream(stream, d)?;
            let n = stream.len() as i128;
            for x in 1..=d {
                let f = hist.count(x) as i128 * k1;
                let v = o.numerator(x);
                if v > f || v < f - n {
                    report.fail(|| format!("accuracy stream={stream:?} item={x} value={v}/{k1}"));
                }
            }
        }

        // common shift by the longer length
        let n_long = pair.longer.len() as i128;
        let shifted = |s: &Sketch| -> BTreeMap<u64, i128> {
            s.real_entries()
                .map(|(key, c)| (key, (c as i128 + s.gamma() as i128) * k1 - n_long))
                .filter(|&(_, v)| v >= 0)
                .collect()
        };
        let (sl, ss) = (shifted(&long), shifted(&short));
        let diffs: Vec<i128> = (1..=d)
            .map(|x| sl.get(&x).copied().unwrap_or(0) - ss.get(&x).copied().unwrap_or(0))
            .filter(|&v| v != 0)
            .collect();
        let ok = match diffs.as_slice() {
            [] => true,
            [v] => v.abs() <= k1,
            _ => false,
        };
        if !ok {
            report.fail(|| {
                format!(
                    "common-shift diffs={diffs:?} (units 1/{k1}) pair={:?}/{:?}",
                    pair.longer, pair.shorter
                )
            });
        }
        Ok(())
    };
    enumerate_neighbor_pairs(d, n_max, |pair| {
        if let Err(e) = run(pair) {
            err = Some(e);
        }
    })?;
    err.map_or(Ok(report), Err)
}

// Distinct (merged sketch, histogram) classes of all streams up to n_max.
fn stream_classes(d: u64, n_max: usize, k: usize) -> Result<Vec<(MergedSketch, ExactHistogram)>> {
    let mut seen: BTreeMap<(Vec<(u64, u64)>, ExactHistogram), MergedSketch> = BTreeMap::new();
    let mut err = None;
    enumerate_streams(d, n_max, |stream| {
        match (
            Sketch::from_stream(k, d, stream),
            ExactHistogram::from_stream(stream, d),
        ) {
            (Ok(s), Ok(h)) => {
                let m = MergedSketch::from(&s);
                seen.entry((m.entries().collect(), h)).or_insert(m);
            }
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(seen.into_iter().map(|((_, h), m)| (m, h)).collect())
}

type PairClass = (MergedSketch, ExactHistogram, MergedSketch, ExactHistogram);
type PairKey = (Vec<(u64, u64)>, ExactHistogram, Vec<(u64, u64)>, ExactHistogram);

// Distinct classes of neighbour pairs (longer first).
fn pair_classes(d: u64, n_max: usize, k: usize) -> Result<Vec<PairClass>> {
    let mut seen: BTreeMap<PairKey, PairClass> = BTreeMap::new();
    let mut err = None;
    enumerate_neighbor_pairs(d, n_max, |pair| {
        let build = |s: &[u64]| -> Result<(MergedSketch, ExactHistogram)> {
            Ok((
                MergedSketch::from(&Sketch::from_stream(k, d, s)?),
                ExactHistogram::from_stream(s, d)?,
            ))
        };
        match (build(&pair.longer), build(&pair.shorter)) {
            (Ok((ml, hl)), Ok((ms, hs))) => {
                let key = (
                    ml.entries().collect(),
                    hl.clone(),
                    ms.entries().collect(),
                    hs.clone(),
                );
                seen.entry(key).or_insert((ml, hl, ms, hs));
            }
            (Err(e), _) | (_, Err(e)) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(seen.into_values().collect())
}

fn merged_accuracy_ok(m: &MergedSketch, hist: &ExactHistogram, d: u64) -> bool {
    let k1 = m.k() as u64 + 1;
    (1..=d).all(|x| {
        let (f, est) = (hist.count(x), m.estimate(x));
        est <= f && (f - est) * k1 <= m.n()
    })
}

/// Two-stream merges where one stream is replaced by a neighbour: merged
/// counters differ by exactly 1 on at most `k` keys and agree elsewhere, in
/// both merge orders; merged estimates stay within `N/(k+1)` of the truth.
pub fn check_merge_sensitivity(d: u64, n_max: usize, k: usize) -> Result<ExhaustiveReport> {
    let mut report = ExhaustiveReport::new("merge_sensitivity", d, n_max, k);
    let others = stream_classes(d, n_max, k)?;
    let pairs = pair_classes(d, n_max, k)?;
    for (ml, hl, ms, hs) in &pairs {
        for (m2, h2) in &others {
            for flip in [false, true] {
                report.cases += 1;
                let (a, b) = if flip {
                    (merge(m2, ml)?, merge(m2, ms)?)
                } else {
                    (merge(ml, m2)?, merge(ms, m2)?)
                };
                let mut differing = 0usize;
                let mut bad = false;
                for x in 1..=d {
                    match a.estimate(x).abs_diff(b.estimate(x)) {
                        0 => {}
                        1 => differing += 1,
                        _ => bad = true,
                    }
                }
                if bad || differing > k {
                    report.fail(|| {
                        format!(
                            "merged {:?} vs {:?} (flip={flip})",
                            a.entries().collect::<Vec<_>>(),
                            b.entries().collect::<Vec<_>>()
                        )
                    });
                }
                if !merged_accuracy_ok(&a, &hl.add(h2), d)
                    || !merged_accuracy_ok(&b, &hs.add(h2), d)
                {
                    report.fail(|| {
                        format!(
                            "merged accuracy broken for {:?} / {:?}",
                            a.entries().collect::<Vec<_>>(),
                            b.entries().collect::<Vec<_>>()
                        )
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Single merge step: if `T1' ⊆ T1` and `c1 - c1' ∈ {0,1}` pointwise, then
/// after merging both with a common sketch one of the two merged sketches
/// dominates the other by 0 or 1 on every key. Inputs are neighbour pairs,
/// oriented so the hypothesis holds.
pub fn check_merge_step(d: u64, n_max: usize, k: usize) -> Result<ExhaustiveReport> {
    let mut report = ExhaustiveReport::new("merge_step", d, n_max, k);
    let others = stream_classes(d, n_max, k)?;
    let pairs = pair_classes(d, n_max, k)?;
    let dominates = |big: &MergedSketch, small: &MergedSketch| -> bool {
        small.entries().all(|(key, _)| big.estimate(key) > 0)
            && (1..=d)
                .all(|x| matches!(big.estimate(x).checked_sub(small.estimate(x)), Some(0 | 1)))
    };
    for (ml, _, ms, _) in &pairs {
        let (c1, c1p) = if dominates(ml, ms) {
            (ml, ms)
        } else if dominates(ms, ml) {
            (ms, ml)
        } else {
            report.fail(|| {
                format!(
                    "neighbour sketches not nested: {:?} / {:?}",
                    ml.entries().collect::<Vec<_>>(),
                    ms.entries().collect::<Vec<_>>()
                )
            });
            continue;
        };
        for (m2, _) in &others {
            report.cases += 1;
            let (a, b) = (merge(c1, m2)?, merge(c1p, m2)?);
            if !(dominates(&a, &b) || dominates(&b, &a)) {
                report.fail(|| {
                    format!(
                        "merge step broke nesting: {:?} / {:?}",
                        a.entries().collect::<Vec<_>>(),
                        b.entries().collect::<Vec<_>>()
                    )
                });
            }
        }
    }
    Ok(report)
}

/// Accuracy of three-way merges in both association orders.
pub fn check_merge_orders(d: u64, n_max: usize, k: usize) -> Result<ExhaustiveReport> {
    let mut report = ExhaustiveReport::new("merge_orders", d, n_max, k);
    let classes = stream_classes(d, n_max, k)?;
    for (m1, h1) in &classes {
        for (m2, h2) in &classes {
            let left12 = merge(m1, m2)?;
            let h12 = h1.add(h2);
            for (m3, h3) in &classes {
                report.cases += 1;
                let total = h12.add(h3);
                let left = merge(&left12, m3)?;
                let right = merge(m1, &merge(m2, m3)?)?;
                let swapped = merge(&merge(m3, m1)?, m2)?;
                for m in [&left, &right, &swapped] {
                    if !merged_accuracy_ok(m, &total, d) {
                        report.fail(|| {
                            format!(
                                "order-dependent accuracy failure: {:?}",
                                m.entries().collect::<Vec<_>>()
                            )
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Largest `|released(x) - f(x)|` over the whole universe.
pub fn max_error(summary: &PrivateSummary, oracle: &ExactHistogram) -> f64 {
    (1..=summary.d)
        .map(|x| (summary.count(x) - oracle.count(x) as f64).abs())
        .fold(0.0, f64::max)
}

/// Mean of `(released(x) - f(x))^2` over the universe.
pub fn mean_squared_error(summary: &PrivateSummary, oracle: &ExactHistogram) -> f64 {
    let total: f64 = (1..=summary.d)
        .map(|x| (summary.count(x) - oracle.count(x) as f64).powi(2))
        .sum();
    total / summary.d as f64
}

// ---------------------------------------------------------------------------
// Statistical auditing
// ---------------------------------------------------------------------------

/// Maps a mechanism output to a finite event label.
pub trait EventExtractor {
    fn event(&self, summary: &PrivateSummary) -> String;
}

/// Event = the set of released keys.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeySetEvents;

impl EventExtractor for KeySetEvents {
    fn event(&self, summary: &PrivateSummary) -> String {
        let keys: Vec<String> = summary.keys().map(|k| k.to_string()).collect();
        format!("{{{}}}", keys.join(","))
    }
}

/// Event = each released key with the bin its count falls into.
#[derive(Debug, Clone, Default)]
pub struct BinnedCountEvents {
    /// Ascending cut points; bin `i` holds counts in `[cuts[i-1], cuts[i])`.
    pub cuts: Vec<f64>,
}

impl BinnedCountEvents {
    /// Quartile cut points of `samples`.
    pub fn quartiles(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        let mut cuts = vec![at(0.25), at(0.5), at(0.75)];
        cuts.dedup();
        Self { cuts }
    }
}

/// Quartile bins fitted to released counts from pilot runs on both sides
/// of `pair`, using a noise stream the audit itself does not touch.
pub fn calibrate_bins<M>(
    mechanism: &mut M,
    pair: &NeighborPair,
    pilot_trials: u64,
    seed: u64,
) -> Result<BinnedCountEvents>
where
    M: FnMut(&[u64], &mut NoiseSampler) -> Result<PrivateSummary>,
{
    let mut noise = NoiseSampler::with_stream(seed, 2, NoiseBackend::Laplace);
    let mut samples = Vec::new();
    for _ in 0..pilot_trials {
        for stream in [&pair.longer, &pair.shorter] {
            samples.extend(mechanism(stream, &mut noise)?.entries().map(|(_, c)| c));
        }
    }
    Ok(BinnedCountEvents::quartiles(samples))
}

impl EventExtractor for BinnedCountEvents {
    fn event(&self, summary: &PrivateSummary) -> String {
        let parts: Vec<String> = summary
            .entries()
            .map(|(key, count)| format!("{key}:q{}", self.cuts.partition_point(|&c| c <= count)))
            .collect();
        format!("{{{}}}", parts.join(","))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AuditConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub trials: u64,
    pub seed: u64,
    /// Events with fewer combined hits are excluded.
    pub min_hits: u64,
    /// Slack, in standard errors of the binomial estimates.
    pub slack_se: f64,
}

impl AuditConfig {
    pub fn new(epsilon: f64, delta: f64, trials: u64, seed: u64) -> Self {
        Self {
            epsilon,
            delta,
            trials,
            seed,
            min_hits: 100,
            slack_se: 3.0,
        }
    }
}

/// Per-event audit record. `a` is the longer stream, `b` the shorter.
#[derive(Debug, Clone, Serialize)]
pub struct EventRecord {
    pub event: String,
    pub hits_a: u64,
    pub hits_b: u64,
    pub p_a: f64,
    pub p_b: f64,
    /// `p_a - e^ε p_b - δ` and the mirrored excess; positive means the
    /// inequality is empirically violated before slack.
    pub excess_ab: f64,
    pub excess_ba: f64,
    pub slack_ab: f64,
    pub slack_ba: f64,
    pub excluded: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub epsilon: f64,
    pub delta: f64,
    pub trials: u64,
    pub events: Vec<EventRecord>,
    pub flagged: usize,
    pub excluded: usize,
    /// Largest `ln(p_a / p_b)` (either orientation) over included events
    /// with both probabilities positive.
    pub worst_log_ratio: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.flagged == 0
    }

    /// One JSON object per event, newline-terminated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs `mechanism` `trials` times on each side of `pair` and compares event
/// frequencies against `Pr[M(S) ∈ E] <= e^ε Pr[M(S') ∈ E] + δ` in both
/// directions. An event is flagged when the empirical excess exceeds
/// `slack_se` standard errors.
pub fn dp_audit<M, E>(
    mut mechanism: M,
    pair: &NeighborPair,
    config: &AuditConfig,
    extractor: &E,
) -> Result<AuditReport>
where
    M: FnMut(&[u64], &mut NoiseSampler) -> Result<PrivateSummary>,
    E: EventExtractor + ?Sized,
{
    if config.trials == 0 {
        return Err(Error::InvalidConfig(
            "audit needs at least one trial".into(),
        ));
    }
    let mut tally: HashMap<String, (u64, u64)> = HashMap::new();
    for (side, stream) in [(0u64, &pair.longer), (1, &pair.shorter)] {
        let mut noise = NoiseSampler::with_stream(config.seed, side, NoiseBackend::Laplace);
        for _ in 0..config.trials {
            let out = mechanism(stream, &mut noise)?;
            let slot = tally.entry(extractor.event(&out)).or_default();
            if side == 0 {
                slot.0 += 1;
            } else {
                slot.1 += 1;
            }
        }
    }
    Ok(score_events(tally, config))
}

/// Same as [`dp_audit`] on two fixed inputs that need not be streams.
pub fn score_events(tally: HashMap<String, (u64, u64)>, config: &AuditConfig) -> AuditReport {
    let trials = config.trials as f64;
    let e_eps = config.epsilon.exp();
    let mut events: Vec<EventRecord> = tally
        .into_iter()
        .map(|(event, (hits_a, hits_b))| {
            let (p_a, p_b) = (hits_a as f64 / trials, hits_b as f64 / trials);
            let (var_a, var_b) = (p_a * (1.0 - p_a) / trials, p_b * (1.0 - p_b) / trials);
            let slack_ab = config.slack_se * (var_a + e_eps * e_eps * var_b).sqrt();
            let slack_ba = config.slack_se * (var_b + e_eps * e_eps * var_a).sqrt();
            let excess_ab = p_a - e_eps * p_b - config.delta;
            let excess_ba = p_b - e_eps * p_a - config.delta;
            let excluded = hits_a + hits_b < config.min_hits;
            let flagged = !excluded && (excess_ab > slack_ab || excess_ba > slack_ba);
            EventRecord {
                event,
                hits_a,
                hits_b,
                p_a,
                p_b,
                excess_ab,
                excess_ba,
                slack_ab,
                slack_ba,
                excluded,
                flagged,
            }
        })
        .collect();
    events.sort_by(|x, y| x.event.cmp(&y.event));
    let flagged = events.iter().filter(|e| e.flagged).count();
    let excluded = events.iter().filter(|e| e.excluded).count();
    let worst_log_ratio = events
        .iter()
        .filter(|e| !e.excluded && e.p_a > 0.0 && e.p_b > 0.0)
        .map(|e| (e.p_a / e.p_b).ln().abs())
        .fold(0.0, f64::max);
    AuditReport {
        epsilon: config.epsilon,
        delta: config.delta,
        trials: config.trials,
        events,
        flagged,
        excluded,
        worst_log_ratio,
    }
}

/// A deliberately broken release used to check that the auditor has power:
/// independent Lap(1/ε) per stored real counter, no shared noise, no
/// threshold. Its sensitivity is `k`, not 1.
pub fn broken_release<N: NoiseSource>(
    sketch: &Sketch,
    epsilon: f64,
    noise: &mut N,
) -> PrivateSummary {
    let mut out = PrivateSummary::new(
        Mechanism::Approx,
        sketch.k(),
        sketch.d(),
        epsilon,
        None,
        None,
    );
    let scale = Scale(1.0 / epsilon);
    for (key, count) in sketch.real_entries() {
        out.insert(key, count as f64 + noise.sample(scale));
    }
    out
}

/// Neighbour pairs that realise each structural case with counters near the
/// release threshold `heavy`: one extra decrement-all step, one stored
/// counter larger by one, and a key present in only one sketch.
pub fn worst_case_pairs(k: usize, heavy: u64) -> Vec<(String, u64, NeighborPair)> {
    let d = k as u64 + 2;
    let block = |keys: std::ops::RangeInclusive<u64>| -> Vec<u64> {
        keys.flat_map(|key| std::iter::repeat_n(key, heavy as usize))
            .collect()
    };
    let mut out = Vec::new();

    // k heavy keys then a fresh key: decrement-all on the longer stream
    let mut s = block(1..=k as u64);
    s.push(k as u64 + 1);
    let last = s.len() - 1;
    out.push((
        "decrement_all".into(),
        d,
        NeighborPair::new(s, last).expect("non-empty"),
    ));

    // removing one occurrence of a heavy key
    let s = block(1..=k as u64);
    out.push((
        "single_counter".into(),
        d,
        NeighborPair::new(s, 0).expect("non-empty"),
    ));

    // k-1 heavy keys and a singleton that only the longer stream stores
    let mut s = block(1..=k as u64 - 1);
    s.push(k as u64 + 1);
    let last = s.len() - 1;
    out.push((
        "fresh_singleton".into(),
        d,
        NeighborPair::new(s, last).expect("non-empty"),
    ));

    // early removal that changes which key is later evicted
    if k >= 2 {
        let mut s = vec![k as u64 + 2];
        s.extend(block(1..=k as u64 - 1));
        s.push(k as u64);
        s.push(k as u64 + 1);
        out.push((
            "early_removal".into(),
            d,
            NeighborPair::new(s, 0).expect("non-empty"),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ZeroNoise;
    use crate::release::{privatize_mg, PrivacyParams};

    #[test]
    fn exact_histograms() {
        let h = ExactHistogram::from_stream(&[1, 2, 3], 3).unwrap();
        assert_eq!(h.counts().collect::<Vec<_>>(), vec![(1, 1), (2, 1), (3, 1)]);
        let h = ExactHistogram::from_stream(&[], 3).unwrap();
        assert_eq!((h.n(), h.counts().count()), (0, 0));
        let h = ExactHistogram::from_stream(&[2, 2, 2], 3).unwrap();
        assert_eq!(h.counts().collect::<Vec<_>>(), vec![(2, 3)]);
        assert!(ExactHistogram::from_stream(&[4], 3).is_err());
    }

    #[test]
    fn canonical_traces() {
        assert!(canonical_mg(&[1, 2, 3], 2, 3).unwrap().is_empty());
        assert_eq!(
            canonical_mg(&[1, 1], 1, 3).unwrap(),
            BTreeMap::from([(1, 2)])
        );
    }

    #[test]
    fn enumeration_counts() {
        let mut pairs = Vec::new();
        let n = enumerate_neighbor_pairs(2, 2, |p| pairs.push(p.clone())).unwrap();
        assert_eq!(n, 10);
        let longer: BTreeSet<Vec<u64>> = pairs.iter().map(|p| p.longer.clone()).collect();
        assert_eq!(longer.len(), 6);
        assert!(pairs
            .iter()
            .all(|p| p.longer != p.shorter && p.longer.len() == p.shorter.len() + 1));

        let mut only = Vec::new();
        assert_eq!(
            enumerate_neighbor_pairs(1, 1, |p| only.push(p.clone())).unwrap(),
            1
        );
        assert_eq!(
            (only[0].longer.as_slice(), only[0].shorter.as_slice()),
            (&[1][..], &[][..])
        );

        // brute-force count: sum_{n<=3} 2^n n
        let brute: u64 = (0..=3u32).map(|n| 2u64.pow(n) * n as u64).sum();
        assert_eq!(brute, 34);
        assert_eq!(enumerate_neighbor_pairs(2, 3, |_| {}).unwrap(), brute);
    }

    #[test]
    fn enumeration_guard() {
        assert!(matches!(
            enumerate_streams(10, 12, |_| {}),
            Err(Error::EnumerationTooLarge(_))
        ));
    }

    #[test]
    fn neighbor_structure_examples() {
        let pair = NeighborPair::new(vec![1, 2, 3], 2).unwrap();
        let r = check_neighbor_structure(&pair, 2, 3, Direction::Forward).unwrap();
        assert_eq!(r.case, StructureCase::AllMinusOne);
        assert_eq!(
            check_neighbor_structure(&pair, 2, 3, Direction::Flipped)
                .unwrap()
                .case,
            StructureCase::AllMinusOne
        );

        let pair = NeighborPair::new(vec![1, 1], 1).unwrap();
        let r = check_neighbor_structure(&pair, 2, 3, Direction::Forward).unwrap();
        assert_eq!(
            (r.case, r.key),
            (StructureCase::SingleCounterPlusOne, Some(1))
        );
    }

    #[test]
    fn small_grid_checks_pass() {
        for k in 1..=3 {
            for d in 1..=3 {
                for report in [
                    check_sketch_accuracy(d, 6, k).unwrap(),
                    check_canonical_equivalence(d, 6, k).unwrap(),
                    check_neighbor_structure_exhaustive(d, 5, k).unwrap(),
                    check_offset_sensitivity(d, 5, k).unwrap(),
                ] {
                    assert!(report.passed(), "{report:?}");
                }
            }
        }
    }

    #[test]
    fn merge_checks_small_grid() {
        for k in 1..=2 {
            for d in 1..=3 {
                assert!(check_merge_sensitivity(d, 3, k).unwrap().passed());
                assert!(check_merge_step(d, 3, k).unwrap().passed());
                assert!(check_merge_orders(d, 2, k).unwrap().passed());
            }
        }
    }

    #[test]
    fn error_metrics() {
        let p = PrivacyParams::new(1.0, 0.05, 0.05).unwrap();
        let mut s = Sketch::from_stream(2, 3, &[1, 1, 1]).unwrap();
        let summary =
            crate::release::privatize_mg_with_threshold(&mut s, &p, 0.0, &mut ZeroNoise).unwrap();
        let hist = ExactHistogram::from_stream(&[1, 1, 1], 3).unwrap();
        assert_eq!(max_error(&summary, &hist), 0.0);

        let mut empty = Sketch::new(2, 3).unwrap();
        let none = privatize_mg(&mut empty, &p, &mut ZeroNoise).unwrap();
        let hist = ExactHistogram::from_stream(&[1; 7], 3).unwrap();
        assert_eq!(max_error(&none, &hist), 7.0);
        assert!((mean_squared_error(&none, &hist) - 49.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_never_flag() {
        let pair = NeighborPair {
            longer: vec![1, 1, 2],
            shorter: vec![1, 1, 2],
            removal_index: 0,
        };
        let config = AuditConfig::new(0.0, 0.0, 20_000, 5);
        let report = dp_audit(
            |s, noise| {
                let mut sk = Sketch::from_stream(2, 3, s)?;
                crate::release::privatize_mg_with_threshold(
                    &mut sk,
                    &PrivacyParams::new(1.0, 0.5, 0.5)?,
                    1.5,
                    noise,
                )
            },
            &pair,
            &config,
            &KeySetEvents,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.events);
    }

    #[test]
    fn quartile_cuts() {
        let b = BinnedCountEvents::quartiles((0..100).map(f64::from).collect());
        assert_eq!(b.cuts, vec![25.0, 50.0, 74.0]);
    }

    #[test]
    fn worst_case_pairs_realise_each_case() {
        for k in 1..=3 {
            for (name, d, pair) in worst_case_pairs(k, 9) {
                let r = check_neighbor_structure(&pair, k, d, Direction::Forward).unwrap();
                assert_ne!(r.case, StructureCase::Violation, "{name}");
                match name.as_str() {
                    "decrement_all" => assert_eq!(r.case, StructureCase::AllMinusOne),
                    _ => assert_eq!(r.case, StructureCase::SingleCounterPlusOne, "{name} k={k}"),
                }
            }
        }
    }
}
