//! Whole-volume LRU cache bounded by a byte budget.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use voxstream::cache::ByteLru;
use voxstream::volume::{DenseVolume, SliceVolume};

use crate::dataset::EnsembleDataset;
use crate::error::{Error, Result};

/// Volumes are keyed by path and held as `f32`. Concurrent misses on the
/// same volume wait for a single load.
pub struct VolumeCache {
    lru: Mutex<ByteLru<PathBuf, DenseVolume>>,
    loading: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
    disk_reads: AtomicU64,
}

impl VolumeCache {
    pub fn new(budget: usize) -> Self {
        VolumeCache {
            lru: Mutex::new(ByteLru::new(budget)),
            loading: Mutex::new(HashMap::new()),
            disk_reads: AtomicU64::new(0),
        }
    }

    pub fn budget(&self) -> usize {
        self.lru.lock().unwrap().budget()
    }

    pub fn resident_bytes(&self) -> usize {
        self.lru.lock().unwrap().resident_bytes()
    }

    /// Volumes loaded from disk so far.
    pub fn disk_reads(&self) -> u64 {
        self.disk_reads.load(Ordering::Relaxed)
    }

    pub fn get(&self, dataset: &EnsembleDataset, member: &str, step: usize, field: &str) -> Result<Arc<DenseVolume>> {
        let v = dataset.volume(member, step, field)?;
        self.get_path(dataset.volume_path(v))
    }

    pub fn get_path(&self, path: PathBuf) -> Result<Arc<DenseVolume>> {
        if let Some(hit) = self.lru.lock().unwrap().get(&path) {
            return Ok(hit);
        }
        let gate = self.loading.lock().unwrap().entry(path.clone()).or_default().clone();
        let _guard = gate.lock().unwrap();
        if let Some(hit) = self.lru.lock().unwrap().get(&path) {
            return Ok(hit);
        }
        let result = self.load(&path);
        self.loading.lock().unwrap().remove(&path);
        result
    }

    fn load(&self, path: &PathBuf) -> Result<Arc<DenseVolume>> {
        let vol = SliceVolume::open(path)?;
        let meta = vol.meta();
        let bytes = meta.voxels() * meta.channels * std::mem::size_of::<f32>();
        let budget = self.budget();
        if bytes > budget {
            return Err(Error::Config(format!(
                "volume cache budget {budget} B cannot hold {} ({bytes} B)",
                path.display()
            )));
        }
        let dense = Arc::new(vol.read_dense()?);
        self.disk_reads.fetch_add(1, Ordering::Relaxed);
        let mut lru = self.lru.lock().unwrap();
        let out = lru.insert(path.clone(), dense, bytes);
        debug_assert!(lru.resident_bytes() <= lru.budget());
        Ok(out)
    }
}
