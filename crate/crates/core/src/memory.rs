//! Bounded client caches `M_m^(t)`.
//!
//! A [`MemoryState`] is generic over its payload and the update rules only see
//! the [`SampleMeta`] exposed through [`Tagged`], so eviction can never depend
//! on features or labels.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, SampleMeta};

pub trait Tagged {
    fn meta(&self) -> SampleMeta;
}

impl Tagged for SampleMeta {
    fn meta(&self) -> SampleMeta {
        *self
    }
}

impl Tagged for Example {
    fn meta(&self) -> SampleMeta {
        self.meta
    }
}

impl<T: Tagged> Tagged for Arc<T> {
    fn meta(&self) -> SampleMeta {
        (**self).meta()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryRule {
    /// Evict the oldest samples to make room for the new batch.
    Fifo,
    /// Keep only the batch received this round.
    ReplaceAll,
    /// Never evict; arrivals that do not fit are dropped.
    KeepAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot<T> {
    pub item: T,
    /// Consecutive rounds this sample has been in memory, including the
    /// current one.
    pub residence: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T> {
    capacity: usize,
    slots: Vec<Slot<T>>,
}

impl<T: Tagged> MemoryState<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidInput("memory capacity must be at least 1".into()));
        }
        Ok(MemoryState {
            capacity,
            slots: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Contents in insertion order.
    pub fn slots(&self) -> &[Slot<T>] {
        &self.slots
    }

    pub fn items(&self) -> impl Iterator<Item = &T> {
        self.slots.iter().map(|s| &s.item)
    }

    /// `I_m^(t)`: global indices of the current contents.
    pub fn index_set(&self) -> BTreeSet<usize> {
        self.slots.iter().map(|s| s.item.meta().global_index).collect()
    }

    pub fn update(&mut self, rule: MemoryRule, mut batch: Vec<T>) -> Result<()> {
        if batch.len() > self.capacity {
            return Err(Error::CapacityExceeded {
                batch: batch.len(),
                capacity: self.capacity,
            });
        }
        // Samples of one batch share an insertion round; order them by index.
        batch.sort_by_key(|x| x.meta().global_index);
        let fresh = batch.into_iter().map(|item| Slot { item, residence: 1 });
        match rule {
            MemoryRule::ReplaceAll => {
                self.slots.clear();
                self.slots.extend(fresh);
            }
            MemoryRule::Fifo => {
                self.age();
                let incoming: Vec<_> = fresh.collect();
                let overflow = (self.slots.len() + incoming.len()).saturating_sub(self.capacity);
                self.slots.drain(..overflow);
                self.slots.extend(incoming);
            }
            MemoryRule::KeepAll => {
                self.age();
                let room = self.capacity - self.slots.len();
                self.slots.extend(fresh.take(room));
            }
        }
        debug_assert!(self.slots.len() <= self.capacity);
        Ok(())
    }

    fn age(&mut self) {
        for s in &mut self.slots {
            s.residence += 1;
        }
    }
}
