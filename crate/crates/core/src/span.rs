use std::fmt;

use serde::{Deserialize, Serialize};

/// A contiguous token range, zero-based and end-inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end, "span ({start}, {end}) is reversed");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

/// Groups of items addressed by contiguous ranges, e.g. the inside tokens of
/// every span, or the candidate set of every retained span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    items: Vec<usize>,
    item_extent: usize,
}

impl Segments {
    /// One segment per span holding the token indices `start..=end`.
    pub fn for_spans(spans: &[Span], n_tokens: usize) -> Self {
        let mut offsets = Vec::with_capacity(spans.len() + 1);
        let mut items = Vec::new();
        offsets.push(0);
        for s in spans {
            debug_assert!(s.end < n_tokens);
            items.extend(s.start..=s.end);
            offsets.push(items.len());
        }
        Self { offsets, items, item_extent: n_tokens }
    }

    /// `n` segments, each ranging over all `n` items.
    pub fn complete(n: usize) -> Self {
        let offsets = (0..=n).map(|s| s * n).collect();
        let items = (0..n).cycle().take(n * n).collect();
        Self { offsets, items, item_extent: n }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of (segment, item) pairs.
    pub fn total(&self) -> usize {
        self.items.len()
    }

    /// Extent of the item axis the segments index into.
    pub fn item_extent(&self) -> usize {
        self.item_extent
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn item(&self, t: usize) -> usize {
        self.items[t]
    }
}
