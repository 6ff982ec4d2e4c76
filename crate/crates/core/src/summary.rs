//! Released (privatized) summaries and their canonical JSON form.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which release mechanism produced a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    /// Shared plus per-counter noise with a threshold, on the zero-retaining sketch.
    Approx,
    /// Same noise structure on a standard sketch, with the raised threshold.
    Standard,
    /// Offset-corrected sketch with Laplace noise over the whole universe.
    Pure,
    /// Merged sketch, noise over the whole universe.
    MergedUniverse,
    /// Merged sketch, noise on stored counters plus a threshold.
    MergedThreshold,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Approx => "approx",
            Self::Standard => "standard",
            Self::Pure => "pure",
            Self::MergedUniverse => "merged-universe",
            Self::MergedThreshold => "merged-threshold",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approx" => Ok(Self::Approx),
            "standard" => Ok(Self::Standard),
            "pure" => Ok(Self::Pure),
            "merged-universe" => Ok(Self::MergedUniverse),
            "merged-threshold" => Ok(Self::MergedThreshold),
            other => Err(Error::InvalidConfig(format!("unknown mechanism '{other}'"))),
        }
    }
}

/// High-probability interval for `released(x) - f(x)` plus a mean squared
/// error bound, at tail probability `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub beta: f64,
    pub lower: f64,
    pub upper: f64,
    pub mse: f64,
}

impl ErrorBound {
    pub fn contains(&self, deviation: f64) -> bool {
        self.lower <= deviation && deviation <= self.upper
    }
}

/// Noisy key → count map released by one of the mechanisms.
///
/// Keys are always real universe items, at most `k` of them, and iterate
/// (and serialize) in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateSummary {
    pub mechanism: Mechanism,
    pub k: usize,
    pub d: u64,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub threshold: Option<f64>,
    pub error_bound: Option<ErrorBound>,
    entries: BTreeMap<u64, f64>,
}

impl PrivateSummary {
    pub(crate) fn new(
        mechanism: Mechanism,
        k: usize,
        d: u64,
        epsilon: f64,
        delta: Option<f64>,
        threshold: Option<f64>,
    ) -> Self {
        Self {
            mechanism,
            k,
            d,
            epsilon,
            delta,
            threshold,
            error_bound: None,
            entries: BTreeMap::new(),
        }
    }

    pub(crate) fn insert(&mut self, key: u64, count: f64) {
        debug_assert!(key >= 1 && key <= self.d);
        self.entries.insert(key, count);
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.entries.iter().map(|(&key, &count)| (key, count))
    }

    pub fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Released count for `key`, 0 if not released.
    pub fn count(&self, key: u64) -> f64 {
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(&SummaryWire::from(self))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let wire: SummaryWire = serde_json::from_str(text)?;
        wire.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct EntryWire {
    key: u64,
    count: f64,
}

#[derive(Serialize, Deserialize)]
struct SummaryWire {
    mechanism: Mechanism,
    k: usize,
    d: u64,
    epsilon: f64,
    delta: Option<f64>,
    threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_bound: Option<ErrorBound>,
    entries: Vec<EntryWire>,
}

impl From<&PrivateSummary> for SummaryWire {
    fn from(s: &PrivateSummary) -> Self {
        Self {
            mechanism: s.mechanism,
            k: s.k,
            d: s.d,
            epsilon: s.epsilon,
            delta: s.delta,
            threshold: s.threshold,
            error_bound: s.error_bound,
            entries: s
                .entries()
                .map(|(key, count)| EntryWire { key, count })
                .collect(),
        }
    }
}

impl TryFrom<SummaryWire> for PrivateSummary {
    type Error = Error;

    fn try_from(w: SummaryWire) -> Result<Self> {
        if w.entries.len() > w.k {
            return Err(Error::InconsistentSketch(format!(
                "summary holds {} entries but k = {}",
                w.entries.len(),
                w.k
            )));
        }
        if !w.entries.windows(2).all(|p| p[0].key < p[1].key) {
            return Err(Error::InconsistentSketch(
                "summary keys are not strictly ascending".into(),
            ));
        }
        if let Some(bad) = w.entries.iter().find(|e| e.key == 0 || e.key > w.d) {
            return Err(Error::InconsistentSketch(format!(
                "summary key {} outside [1, {}]",
                bad.key, w.d
            )));
        }
        let mut s = PrivateSummary::new(w.mechanism, w.k, w.d, w.epsilon, w.delta, w.threshold);
        s.error_bound = w.error_bound;
        s.entries = w.entries.into_iter().map(|e| (e.key, e.count)).collect();
        Ok(s)
    }
}
