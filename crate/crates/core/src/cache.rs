//! Least-recently-used cache bounded by a byte budget.

use std::hash::Hash;
use std::sync::Arc;

use lru::LruCache;

pub struct ByteLru<K: Hash + Eq, V> {
    budget: usize,
    resident: usize,
    entries: LruCache<K, (Arc<V>, usize)>,
}

impl<K: Hash + Eq, V> ByteLru<K, V> {
    pub fn new(budget: usize) -> Self {
        ByteLru {
            budget,
            resident: 0,
            entries: LruCache::unbounded(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn resident_bytes(&self) -> usize {
        self.resident
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.entries.contains(key)
    }

    pub fn get(&mut self, key: &K) -> Option<Arc<V>> {
        self.entries.get(key).map(|(v, _)| v.clone())
    }

    /// Inserts and evicts least-recently-used entries until the budget holds.
    /// Values larger than the whole budget are returned but not retained.
    pub fn insert(&mut self, key: K, value: Arc<V>, bytes: usize) -> Arc<V> {
        if bytes > self.budget {
            return value;
        }
        if let Some((_, old)) = self.entries.pop(&key) {
            self.resident -= old;
        }
        while self.resident + bytes > self.budget {
            match self.entries.pop_lru() {
                Some((_, (_, b))) => self.resident -= b,
                None => break,
            }
        }
        self.resident += bytes;
        self.entries.put(key, (value.clone(), bytes));
        value
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.resident = 0;
    }
}
