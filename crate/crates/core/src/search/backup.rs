//! Top-k value backup kept in a min-heap.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Total(f64);

impl Eq for Total {}

impl PartialOrd for Total {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Total {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Keeps the `k` largest values inserted so far. The smallest retained value
/// sits at the top of the heap, so each insertion costs `O(log k)`.
#[derive(Clone, Debug)]
pub struct ValueBackup {
    heap: BinaryHeap<Reverse<Total>>,
    k: usize,
    max: f64,
}

impl ValueBackup {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "backup size must be positive");
        ValueBackup { heap: BinaryHeap::with_capacity(k + 1), k, max: f64::NEG_INFINITY }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn insert(&mut self, v: f64) {
        if v.is_nan() {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Reverse(Total(v)));
        } else if let Some(Reverse(Total(min))) = self.heap.peek() {
            if v <= *min {
                return;
            }
            self.heap.pop();
            self.heap.push(Reverse(Total(v)));
        }
        self.max = self.max.max(v);
    }

    pub fn max(&self) -> Option<f64> {
        (!self.is_empty()).then_some(self.max)
    }

    pub fn min(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse(Total(v))| *v)
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_empty())
            .then(|| self.heap.iter().map(|Reverse(Total(v))| v).sum::<f64>() / self.heap.len() as f64)
    }

    /// Retained values, descending.
    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.heap.iter().map(|Reverse(Total(v))| *v).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keeps_largest() {
        let mut b = ValueBackup::new(3);
        assert!(b.is_empty());
        for v in [0.5, -1.0, 2.0, 0.1, 3.0, 0.4] {
            b.insert(v);
        }
        assert_eq!(b.values(), vec![3.0, 2.0, 0.5]);
        assert_eq!(b.max(), Some(3.0));
        assert_eq!(b.min(), Some(0.5));
        assert!((b.mean().unwrap() - 5.5 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matches_sorted_prefix(values in proptest::collection::vec(-10.0..10.0f64, 0..60), k in 1usize..12) {
            let mut b = ValueBackup::new(k);
            for &v in &values {
                b.insert(v);
            }
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted.truncate(k);
            prop_assert_eq!(b.values(), sorted);
        }
    }
}
