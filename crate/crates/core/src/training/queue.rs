use std::collections::VecDeque;

use crate::error::{Result, TigrError};
use crate::numerics::{Real, Tensor};

/// FIFO ring of target projections used as negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue<T = f32> {
    pub capacity: usize,
    pub dim: usize,
    entries: VecDeque<Vec<T>>,
}

impl<T: Real> NegativeQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends every row of `batch`, evicting the oldest entries beyond
    /// capacity.
    pub fn enqueue(&mut self, batch: &Tensor<T>) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(TigrError::Dimension {
                op: "enqueue",
                lhs: batch.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for r in 0..batch.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(batch.row(r).to_vec());
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Entries as a `len × dim` tensor, oldest first; `None` when empty.
    pub fn to_tensor(&self) -> Option<Tensor<T>> {
        if self.entries.is_empty() {
            return None;
        }
        let data: Vec<T> = self.entries.iter().flatten().copied().collect();
        Tensor::new(vec![self.entries.len(), self.dim], data).ok()
    }

    pub fn cast<U: Real>(&self) -> NegativeQueue<U> {
        NegativeQueue {
            capacity: self.capacity,
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|e| e.iter().map(|v| U::from_f64(v.as_f64())).collect())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(from: usize, n: usize) -> Tensor<f32> {
        let data = (from..from + n).flat_map(|t| [t as f32, 0.0]).collect();
        Tensor::new(vec![n, 2], data).unwrap()
    }

    #[test]
    fn fill_level_is_min_of_steps_and_capacity() {
        let (b, cap) = (3, 10);
        let mut q = NegativeQueue::<f32>::new(cap, 2);
        for s in 1..=6 {
            q.enqueue(&tagged(s * b, b)).unwrap();
            assert_eq!(q.len(), (s * b).min(cap));
        }
    }

    #[test]
    fn fifo_eviction() {
        let (b, cap) = (4, 8);
        let mut q = NegativeQueue::<f32>::new(cap, 2);
        let mut next = 0;
        while next < cap + b {
            q.enqueue(&tagged(next, b)).unwrap();
            next += b;
        }
        let tags: Vec<usize> = q.iter().map(|e| e[0] as usize).collect();
        assert!((0..b).all(|t| !tags.contains(&t)));
        assert_eq!(tags, (b..cap + b).collect::<Vec<_>>());
    }

    #[test]
    fn width_checked() {
        let mut q = NegativeQueue::<f32>::new(4, 3);
        assert!(q.enqueue(&tagged(0, 1)).is_err());
        assert!(q.to_tensor().is_none());
    }
}
