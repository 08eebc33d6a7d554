use std::cmp::Reverse;
use std::collections::BTreeMap;

use ordered_float::OrderedFloat;

/// A partial sequence and its log priority.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub log_priority: f64,
    pub tokens: Vec<usize>,
}

/// Max-priority queue with a capacity bound. Equal priorities pop in
/// insertion order; when full, the lowest-priority (latest among equals)
/// entry is evicted.
#[derive(Debug, Clone)]
pub struct PriorityQueue {
    entries: BTreeMap<(Reverse<OrderedFloat<f64>>, u64), Vec<usize>>,
    capacity: usize,
    inserted: u64,
}

impl PriorityQueue {
    pub fn new(capacity: usize) -> Self {
        PriorityQueue { entries: BTreeMap::new(), capacity: capacity.max(1), inserted: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, c: Candidate) {
        let key = (Reverse(OrderedFloat(c.log_priority)), self.inserted);
        self.inserted += 1;
        if self.entries.len() >= self.capacity {
            let worst = *self.entries.keys().next_back().expect("non-empty when full");
            if key > worst {
                return;
            }
            self.entries.remove(&worst);
        }
        self.entries.insert(key, c.tokens);
    }

    pub fn pop(&mut self) -> Option<Candidate> {
        let ((Reverse(OrderedFloat(p)), _), tokens) = self.entries.pop_first()?;
        Some(Candidate { log_priority: p, tokens })
    }

    pub fn peek_priority(&self) -> Option<f64> {
        self.entries.keys().next().map(|(Reverse(p), _)| p.0)
    }
}
