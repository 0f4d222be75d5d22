//! FIFO memory bank of momentum-encoder projections, gated by sample weight.

use std::collections::VecDeque;

use crate::tensor::{l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub projection: Vec<f64>,
    pub class_id: usize,
    /// `None` when the sample carried no learned weight.
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory bank capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    /// Enqueues, in batch order, every sample whose weight exceeds `t_mb`
    /// (unweighted samples always pass), evicting the oldest entries beyond
    /// capacity. Returns the number admitted.
    pub fn update(&mut self, projections: &Matrix, class_ids: &[usize], weights: &[Option<f64>], t_mb: f64) -> usize {
        assert_eq!(projections.rows(), class_ids.len());
        assert_eq!(projections.rows(), weights.len());
        let mut admitted = 0;
        for (r, (&class_id, &weight)) in class_ids.iter().zip(weights).enumerate() {
            if weight.is_some_and(|w| w <= t_mb) {
                continue;
            }
            let row = projections.row(r);
            let norm = l2_norm(row);
            if norm == 0.0 || !norm.is_finite() {
                continue;
            }
            self.entries.push_back(BankEntry {
                projection: row.iter().map(|v| v / norm).collect(),
                class_id,
                weight,
            });
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
            admitted += 1;
        }
        admitted
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}
