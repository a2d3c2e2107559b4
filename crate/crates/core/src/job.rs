use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Cancellation flag plus monotone progress in `[0, 1]`, shared between a
/// long-running operation and whoever polls it.
#[derive(Debug, Default)]
pub struct JobControl {
    cancelled: AtomicBool,
    progress_bits: AtomicU64,
}

impl JobControl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.cancelled.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::SeqCst)
    }

    pub fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Cancelled)
        } else {
            Ok(())
        }
    }

    pub fn progress(&self) -> f64 {
        f64::from_bits(self.progress_bits.load(Ordering::SeqCst))
    }

    /// Never moves progress backwards.
    pub fn set_progress(&self, p: f64) {
        let p = p.clamp(0.0, 1.0);
        let mut cur = self.progress_bits.load(Ordering::SeqCst);
        while f64::from_bits(cur) < p {
            match self.progress_bits.compare_exchange(cur, p.to_bits(), Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
    }
}
