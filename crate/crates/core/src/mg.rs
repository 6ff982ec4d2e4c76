//! Misra-Gries sketches.
//!
//! [`Sketch`] is the zero-retaining variant: it always holds exactly `k`
//! key/counter pairs. Unused slots are filled with dummy keys `d+1..=d+k`,
//! keys whose counter drops to zero stay in place until their slot is needed,
//! and a new key always evicts the *smallest* key with a zero counter. Because
//! dummy ids are larger than every real id, real zero-count keys are evicted
//! before dummies. The sketch also counts how often the decrement-all branch
//! ran (`gamma`), which the pure-DP release needs.
//!
//! [`StandardSketch`] is the textbook variant that removes a key as soon as
//! its counter reaches zero. Both produce identical frequency estimates.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Which of the three update rules handled an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// The item was stored; its counter was incremented.
    Increment,
    /// The item was absent and every counter was positive; all were decremented.
    DecrementAll,
    /// The smallest zero-count key was replaced by the item.
    Replace { evicted: u64 },
}

/// Zero-retaining Misra-Gries sketch over the universe `[1, d]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sketch {
    k: usize,
    d: u64,
    entries: BTreeMap<u64, u64>,
    zero_keys: BTreeSet<u64>,
    gamma: u64,
    n: u64,
    released: bool,
}

impl Sketch {
    /// Creates a sketch holding the `k` dummy keys `d+1..=d+k`, all at zero.
    pub fn new(k: usize, d: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("capacity k must be at least 1".into()));
        }
        if d == 0 {
            return Err(Error::InvalidConfig(
                "universe size d must be at least 1".into(),
            ));
        }
        let top = d
            .checked_add(k as u64)
            .ok_or_else(|| Error::InvalidConfig("d + k overflows a 64-bit id".into()))?;
        let entries: BTreeMap<u64, u64> = (d + 1..=top).map(|key| (key, 0)).collect();
        let zero_keys = entries.keys().copied().collect();
        Ok(Self {
            k,
            d,
            entries,
            zero_keys,
            gamma: 0,
            n: 0,
            released: false,
        })
    }

    /// Rebuilds a sketch from its serialized state, checking every invariant.
    pub fn from_parts(
        k: usize,
        d: u64,
        n: u64,
        gamma: u64,
        entries: impl IntoIterator<Item = (u64, u64)>,
    ) -> Result<Self> {
        let mut sketch = Self::new(k, d)?;
        let mut map = BTreeMap::new();
        for (key, count) in entries {
            if key == 0 || key > d + k as u64 {
                return Err(Error::InconsistentSketch(format!(
                    "key {key} outside [1, {}]",
                    d + k as u64
                )));
            }
            if key > d && count > 0 {
                return Err(Error::InconsistentSketch(format!(
                    "dummy key {key} has non-zero counter {count}"
                )));
            }
            if map.insert(key, count).is_some() {
                return Err(Error::InconsistentSketch(format!("duplicate key {key}")));
            }
        }
        if map.len() != k {
            return Err(Error::InconsistentSketch(format!(
                "expected {k} entries, found {}",
                map.len()
            )));
        }
        let total: u128 = map.values().map(|&c| c as u128).sum();
        if total > n as u128 {
            return Err(Error::InconsistentSketch(format!(
                "counter sum {total} exceeds stream length {n}"
            )));
        }
        if gamma > n / (k as u64 + 1) {
            return Err(Error::InconsistentSketch(format!(
                "gamma {gamma} exceeds floor(n/(k+1)) = {}",
                n / (k as u64 + 1)
            )));
        }
        sketch.zero_keys = map
            .iter()
            .filter(|(_, &c)| c == 0)
            .map(|(&key, _)| key)
            .collect();
        sketch.entries = map;
        sketch.n = n;
        sketch.gamma = gamma;
        Ok(sketch)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> u64 {
        self.d
    }

    /// Number of decrement-all steps executed so far.
    pub fn gamma(&self) -> u64 {
        self.gamma
    }

    /// Number of items processed.
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn is_dummy(&self, key: u64) -> bool {
        key > self.d
    }

    /// All `k` stored pairs in ascending key order, dummies included.
    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.entries.iter().map(|(&key, &count)| (key, count))
    }

    /// Stored pairs restricted to real keys.
    pub fn real_entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.entries().filter(move |&(key, _)| !self.is_dummy(key))
    }

    /// Counter for `key` if it is stored.
    pub fn counter(&self, key: u64) -> Option<u64> {
        self.entries.get(&key).copied()
    }

    pub fn contains(&self, key: u64) -> bool {
        self.entries.contains_key(&key)
    }

    fn check_item(&self, item: u64) -> Result<()> {
        if item == 0 || item > self.d {
            return Err(Error::ItemOutOfRange { item, d: self.d });
        }
        Ok(())
    }

    /// Processes one item.
    pub fn update(&mut self, item: u64) -> Result<Branch> {
        self.check_item(item)?;
        self.n += 1;
        if let Some(count) = self.entries.get_mut(&item) {
            if *count == 0 {
                self.zero_keys.remove(&item);
            }
            *count += 1;
            return Ok(Branch::Increment);
        }
        match self.zero_keys.pop_first() {
            None => {
                for (&key, count) in self.entries.iter_mut() {
                    *count -= 1;
                    if *count == 0 {
                        self.zero_keys.insert(key);
                    }
                }
                self.gamma += 1;
                Ok(Branch::DecrementAll)
            }
            Some(evicted) => {
                self.entries.remove(&evicted);
                self.entries.insert(item, 1);
                Ok(Branch::Replace { evicted })
            }
        }
    }

    /// Folds [`Sketch::update`] over a stream. On failure the error carries
    /// the zero-based stream position; items before it have been applied.
    pub fn process<I>(&mut self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = u64>,
    {
        for (position, item) in items.into_iter().enumerate() {
            self.update(item).map_err(|_| Error::StreamItemOutOfRange {
                item,
                d: self.d,
                position,
            })?;
        }
        Ok(())
    }

    /// Builds a sketch of `items` from scratch.
    pub fn from_stream(k: usize, d: u64, items: &[u64]) -> Result<Self> {
        let mut sketch = Self::new(k, d)?;
        sketch.process(items.iter().copied())?;
        Ok(sketch)
    }

    /// Estimated frequency of `item`: its counter, or 0 when not stored.
    ///
    /// Satisfies `f(x) - n/(k+1) <= estimate <= f(x)` and
    /// `estimate >= f(x) - gamma`.
    pub fn estimate(&self, item: u64) -> Result<u64> {
        self.check_item(item)?;
        Ok(self.counter(item).unwrap_or(0))
    }

    /// Converts to the standard representation by dropping zero counters and
    /// dummies. Estimates are unchanged.
    pub fn to_standard(&self) -> StandardSketch {
        StandardSketch {
            k: self.k,
            d: self.d,
            n: self.n,
            entries: self.real_entries().filter(|&(_, c)| c > 0).collect(),
            released: false,
        }
    }

    pub fn is_released(&self) -> bool {
        self.released
    }

    /// Flags the sketch as released; fails if it already was.
    pub(crate) fn mark_released(&mut self) -> Result<()> {
        if std::mem::replace(&mut self.released, true) {
            return Err(Error::AlreadyReleased);
        }
        Ok(())
    }
}

/// Textbook Misra-Gries: at most `k` keys, zero counters removed at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StandardSketch {
    k: usize,
    d: u64,
    n: u64,
    entries: BTreeMap<u64, u64>,
    released: bool,
}

impl StandardSketch {
    pub fn new(k: usize, d: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("capacity k must be at least 1".into()));
        }
        if d == 0 {
            return Err(Error::InvalidConfig(
                "universe size d must be at least 1".into(),
            ));
        }
        Ok(Self {
            k,
            d,
            n: 0,
            entries: BTreeMap::new(),
            released: false,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> u64 {
        self.d
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.entries.iter().map(|(&key, &count)| (key, count))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn update(&mut self, item: u64) -> Result<()> {
        if item == 0 || item > self.d {
            return Err(Error::ItemOutOfRange { item, d: self.d });
        }
        self.n += 1;
        if let Some(count) = self.entries.get_mut(&item) {
            *count += 1;
        } else if self.entries.len() < self.k {
            self.entries.insert(item, 1);
        } else {
            self.entries.retain(|_, count| {
                *count -= 1;
                *count > 0
            });
        }
        Ok(())
    }

    pub fn process<I>(&mut self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = u64>,
    {
        for (position, item) in items.into_iter().enumerate() {
            self.update(item).map_err(|_| Error::StreamItemOutOfRange {
                item,
                d: self.d,
                position,
            })?;
        }
        Ok(())
    }

    pub fn estimate(&self, item: u64) -> u64 {
        self.entries.get(&item).copied().unwrap_or(0)
    }

    pub(crate) fn mark_released(&mut self) -> Result<()> {
        if std::mem::replace(&mut self.released, true) {
            return Err(Error::AlreadyReleased);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(s: &Sketch) -> Vec<(u64, u64)> {
        s.entries().collect()
    }

    #[test]
    fn new_fills_dummies() {
        let s = Sketch::new(2, 3).unwrap();
        assert_eq!(entries(&s), vec![(4, 0), (5, 0)]);
        assert_eq!((s.gamma(), s.n()), (0, 0));
        assert_eq!(entries(&Sketch::new(1, 1).unwrap()), vec![(2, 0)]);
        assert!(Sketch::new(0, 3).is_err());
        assert!(Sketch::new(2, 0).is_err());
    }

    #[test]
    fn update_branches() {
        let mut s = Sketch::new(2, 3).unwrap();
        assert_eq!(s.update(1).unwrap(), Branch::Replace { evicted: 4 });
        assert_eq!(entries(&s), vec![(1, 1), (5, 0)]);
        assert_eq!(s.update(2).unwrap(), Branch::Replace { evicted: 5 });
        assert_eq!(s.update(3).unwrap(), Branch::DecrementAll);
        assert_eq!(entries(&s), vec![(1, 0), (2, 0)]);
        assert_eq!(s.gamma(), 1);

        let mut s = Sketch::from_parts(2, 3, 3, 0, [(1, 0), (2, 3)]).unwrap();
        assert_eq!(s.update(2).unwrap(), Branch::Increment);
        assert_eq!(entries(&s), vec![(1, 0), (2, 4)]);
    }

    #[test]
    fn rejects_out_of_universe() {
        let mut s = Sketch::new(2, 3).unwrap();
        assert!(matches!(s.update(0), Err(Error::ItemOutOfRange { .. })));
        assert!(matches!(s.update(4), Err(Error::ItemOutOfRange { .. })));
        assert_eq!(s.n(), 0);
        let err = s.process([1, 2, 9]).unwrap_err();
        assert!(matches!(
            err,
            Error::StreamItemOutOfRange {
                position: 2,
                item: 9,
                ..
            }
        ));
    }

    #[test]
    fn process_traces() {
        let s = Sketch::from_stream(2, 3, &[1, 2, 3]).unwrap();
        assert_eq!(entries(&s), vec![(1, 0), (2, 0)]);
        assert_eq!((s.gamma(), s.n()), (1, 3));

        let s = Sketch::from_stream(2, 3, &[]).unwrap();
        assert_eq!(s, Sketch::new(2, 3).unwrap());

        let s = Sketch::from_stream(2, 4, &[1, 1, 2, 3, 4]).unwrap();
        assert_eq!(entries(&s), vec![(1, 1), (4, 1)]);
        assert_eq!((s.gamma(), s.n()), (1, 5));
    }

    #[test]
    fn estimates() {
        let s = Sketch::from_stream(2, 3, &[1, 2, 3]).unwrap();
        assert_eq!(s.estimate(1).unwrap(), 0);
        assert_eq!(s.estimate(3).unwrap(), 0);
        let s = Sketch::from_stream(2, 3, &[1, 1, 1]).unwrap();
        assert_eq!(s.estimate(1).unwrap(), 3);
        assert!(s.estimate(4).is_err());
    }

    #[test]
    fn evicts_smallest_zero_key() {
        let mut s = Sketch::from_stream(3, 5, &[1, 2]).unwrap();
        s.update(3).unwrap();
        assert_eq!(entries(&s), vec![(1, 1), (2, 1), (3, 1)]);
        s.update(4).unwrap();
        assert_eq!(entries(&s), vec![(1, 0), (2, 0), (3, 0)]);
        assert_eq!(s.update(5).unwrap(), Branch::Replace { evicted: 1 });
    }

    #[test]
    fn from_parts_validates() {
        assert!(Sketch::from_parts(2, 3, 3, 1, [(1, 0), (2, 0)]).is_ok());
        assert!(Sketch::from_parts(2, 3, 3, 1, [(1, 0)]).is_err());
        assert!(Sketch::from_parts(2, 3, 3, 0, [(1, 0), (4, 1)]).is_err());
        assert!(Sketch::from_parts(2, 3, 1, 0, [(1, 2), (4, 0)]).is_err());
        assert!(Sketch::from_parts(2, 3, 3, 2, [(1, 0), (2, 0)]).is_err());
        assert!(Sketch::from_parts(2, 3, 3, 0, [(1, 0), (9, 0)]).is_err());
    }

    #[test]
    fn standard_removes_zeros() {
        let mut s = StandardSketch::new(2, 3).unwrap();
        s.process([1, 2, 3]).unwrap();
        assert!(s.is_empty());
        let mut s = StandardSketch::new(1, 3).unwrap();
        s.process([1, 1]).unwrap();
        assert_eq!(s.entries().collect::<Vec<_>>(), vec![(1, 2)]);
    }

    #[test]
    fn to_standard_strips_zeros_and_dummies() {
        let s = Sketch::from_stream(3, 4, &[1, 1, 2]).unwrap();
        let std = s.to_standard();
        assert_eq!(std.entries().collect::<Vec<_>>(), vec![(1, 2), (2, 1)]);
        assert_eq!(std.n(), 3);
    }
}
