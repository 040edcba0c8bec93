//! Sets of indices stored as sorted, disjoint, non-adjacent half-open ranges.
//!
//! Operator sets (robot/server assignments, transfer sets) and tensor row
//! regions are almost always a handful of contiguous runs, so a run-length
//! representation keeps set algebra cheap and maps one-to-one onto fragment
//! messages.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RangeSet {
    runs: Vec<(usize, usize)>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_range(r: Range<usize>) -> Self {
        let mut s = Self::new();
        s.insert(r);
        s
    }

    /// `{0, 1, ..., n-1}`
    pub fn full(n: usize) -> Self {
        Self::from_range(0..n)
    }

    pub fn from_indices<I: IntoIterator<Item = usize>>(it: I) -> Self {
        let mut s = Self::new();
        for i in it {
            s.insert(i..i + 1);
        }
        s
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Number of indices in the set.
    pub fn len(&self) -> usize {
        self.runs.iter().map(|(a, b)| b - a).sum()
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.runs.iter().map(|&(a, b)| a..b)
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges().flatten()
    }

    pub fn min(&self) -> Option<usize> {
        self.runs.first().map(|r| r.0)
    }

    /// One past the largest element.
    pub fn end(&self) -> Option<usize> {
        self.runs.last().map(|r| r.1)
    }

    /// Smallest single range containing the whole set.
    pub fn hull(&self) -> Option<Range<usize>> {
        Some(self.min()?..self.end()?)
    }

    pub fn contains(&self, i: usize) -> bool {
        let idx = self.runs.partition_point(|&(_, b)| b <= i);
        idx < self.runs.len() && self.runs[idx].0 <= i
    }

    pub fn contains_range(&self, r: Range<usize>) -> bool {
        if r.is_empty() {
            return true;
        }
        let idx = self.runs.partition_point(|&(_, b)| b <= r.start);
        idx < self.runs.len() && self.runs[idx].0 <= r.start && self.runs[idx].1 >= r.end
    }

    pub fn insert(&mut self, r: Range<usize>) {
        if r.is_empty() {
            return;
        }
        let (mut a, mut b) = (r.start, r.end);
        // first run that could touch [a, b)
        let lo = self.runs.partition_point(|&(_, e)| e < a);
        let mut hi = lo;
        while hi < self.runs.len() && self.runs[hi].0 <= b {
            a = a.min(self.runs[hi].0);
            b = b.max(self.runs[hi].1);
            hi += 1;
        }
        self.runs.splice(lo..hi, std::iter::once((a, b)));
    }

    pub fn union(&self, other: &RangeSet) -> RangeSet {
        let mut out = self.clone();
        for r in other.ranges() {
            out.insert(r);
        }
        out
    }

    pub fn union_with(&mut self, other: &RangeSet) {
        for r in other.ranges() {
            self.insert(r);
        }
    }

    pub fn intersection(&self, other: &RangeSet) -> RangeSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.runs.len() && j < other.runs.len() {
            let (a0, a1) = self.runs[i];
            let (b0, b1) = other.runs[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                out.push((lo, hi));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        RangeSet { runs: out }
    }

    pub fn difference(&self, other: &RangeSet) -> RangeSet {
        let mut out = Vec::new();
        let mut j = 0;
        for &(a0, a1) in &self.runs {
            let mut cur = a0;
            while j < other.runs.len() && other.runs[j].1 <= cur {
                j += 1;
            }
            let mut k = j;
            while k < other.runs.len() && other.runs[k].0 < a1 {
                let (b0, b1) = other.runs[k];
                if b0 > cur {
                    out.push((cur, b0));
                }
                cur = cur.max(b1);
                if cur >= a1 {
                    break;
                }
                k += 1;
            }
            if cur < a1 {
                out.push((cur, a1));
            }
        }
        RangeSet { runs: out }
    }

    pub fn is_subset(&self, other: &RangeSet) -> bool {
        self.ranges().all(|r| other.contains_range(r))
    }

    pub fn intersects(&self, other: &RangeSet) -> bool {
        !self.intersection(other).is_empty()
    }
}

impl From<Range<usize>> for RangeSet {
    fn from(r: Range<usize>) -> Self {
        RangeSet::from_range(r)
    }
}

impl fmt::Debug for RangeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for RangeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, (a, b)) in self.runs.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}..{}", a, b)?;
        }
        write!(f, "}}")
    }
}

impl Serialize for RangeSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.runs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RangeSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let runs: Vec<(usize, usize)> = Vec::deserialize(d)?;
        let mut s = RangeSet::new();
        for (a, b) in runs {
            if a > b {
                return Err(serde::de::Error::custom(format!(
                    "inverted range {}..{}",
                    a, b
                )));
            }
            s.insert(a..b);
        }
        Ok(s)
    }
}
