//! Fixed-capacity exemplar memory with reservoir and class-balanced updates.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferPolicy {
    #[default]
    Reservoir,
    ClassBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    Stored,
    Replaced { slot: usize },
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    policy: BufferPolicy,
    entries: Vec<(T, usize)>,
    stream_count: u64,
    per_class_counts: BTreeMap<usize, usize>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize, policy: BufferPolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(config_err("buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            policy,
            entries: Vec::with_capacity(capacity),
            stream_count: 0,
            per_class_counts: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stream_count(&self) -> u64 {
        self.stream_count
    }

    pub fn entries(&self) -> &[(T, usize)] {
        &self.entries
    }

    pub fn per_class_counts(&self) -> &BTreeMap<usize, usize> {
        &self.per_class_counts
    }

    /// Offers one stream sample. While filling, every sample is stored; once
    /// full, the sample is kept with probability `capacity / stream_count`
    /// and replaces either a uniformly random slot (reservoir) or a uniformly
    /// random entry of a most-represented class (class-balanced).
    pub fn offer<R: Rng + ?Sized>(&mut self, item: T, class: usize, rng: &mut R) -> Offer {
        self.stream_count += 1;
        if self.entries.len() < self.capacity {
            self.entries.push((item, class));
            *self.per_class_counts.entry(class).or_insert(0) += 1;
            return Offer::Stored;
        }
        let j = rng.random_range(0..self.stream_count);
        if j >= self.capacity as u64 {
            return Offer::Rejected;
        }
        let slot = match self.policy {
            BufferPolicy::Reservoir => j as usize,
            BufferPolicy::ClassBalanced => self.balanced_victim(rng),
        };
        let old = self.entries[slot].1;
        self.decrement(old);
        self.entries[slot] = (item, class);
        *self.per_class_counts.entry(class).or_insert(0) += 1;
        Offer::Replaced { slot }
    }

    fn decrement(&mut self, class: usize) {
        if let Some(n) = self.per_class_counts.get_mut(&class) {
            *n -= 1;
            if *n == 0 {
                self.per_class_counts.remove(&class);
            }
        }
    }

    fn balanced_victim<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let top = self.per_class_counts.values().copied().max().unwrap_or(0);
        let largest: Vec<usize> = self
            .per_class_counts
            .iter()
            .filter(|(_, &n)| n == top)
            .map(|(&c, _)| c)
            .collect();
        let class = largest[rng.random_range(0..largest.len())];
        let k = rng.random_range(0..top);
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.1 == class)
            .nth(k)
            .map(|(i, _)| i)
            .expect("class count matches entries")
    }

    /// `k` slot indices drawn uniformly with replacement; empty when the
    /// buffer holds nothing.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        if self.entries.is_empty() {
            return Vec::new();
        }
        (0..k)
            .map(|_| rng.random_range(0..self.entries.len()))
            .collect()
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<(T, usize)> {
        self.sample_indices(k, rng)
            .into_iter()
            .map(|i| self.entries[i].clone())
            .collect()
    }
}

impl ReplayBuffer<Vec<f64>> {
    /// Draws `k` stored images as a network-ready batch.
    pub fn sample_tensor_batch<R: Rng + ?Sized>(
        &self,
        k: usize,
        shape: [usize; 3],
        rng: &mut R,
    ) -> Result<Batch> {
        let idx = self.sample_indices(k, rng);
        Batch::from_samples(
            shape,
            idx.iter()
                .map(|&i| (self.entries[i].0.as_slice(), self.entries[i].1)),
        )
    }
}
