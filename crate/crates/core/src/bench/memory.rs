use std::sync::atomic::{AtomicUsize, Ordering};

/// Library-level allocation accounting with a monotone high-water mark.
#[derive(Debug, Default)]
pub struct MemTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        let now = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn free(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Restarts the high-water mark from the current live bytes.
    pub fn reset_peak(&self) {
        self.peak.store(self.live(), Ordering::SeqCst);
    }
}
