//! Two-epoch grace mechanism protecting store traversals.
//!
//! Readers register in the counter for the current epoch; the single
//! writer flips the epoch and waits for the previous epoch's counter to
//! drain before reclaiming anything a traversal might still reference.
//! Entering is two atomic ops and never blocks; the wait is on the
//! writer side only.

use std::sync::atomic::{AtomicUsize, Ordering};

#[derive(Debug, Default)]
pub struct EpochGate {
    epoch: AtomicUsize,
    counts: [AtomicUsize; 2],
}

/// Proof of registration; dropping it without `leave` would leak a
/// reader slot, so it is consumed by [`ReadGuard`]'s drop.
#[derive(Debug)]
pub(crate) struct Ticket {
    parity: usize,
}

impl EpochGate {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn enter(&self) -> Ticket {
        loop {
            let e = self.epoch.load(Ordering::Acquire);
            let parity = e & 1;
            self.counts[parity].fetch_add(1, Ordering::AcqRel);
            if self.epoch.load(Ordering::Acquire) == e {
                return Ticket { parity };
            }
            // the writer flipped between our load and increment; undo
            // and re-register under the new epoch
            self.counts[parity].fetch_sub(1, Ordering::AcqRel);
        }
    }

    pub(crate) fn leave(&self, t: Ticket) {
        self.counts[t.parity].fetch_sub(1, Ordering::Release);
    }

    /// Writer side: after this returns, no reader that entered before
    /// the call is still inside. Callers must serialize among
    /// themselves.
    pub fn synchronize(&self) {
        let e = self.epoch.fetch_add(1, Ordering::AcqRel);
        let old = e & 1;
        let mut spins = 0u32;
        while self.counts[old].load(Ordering::Acquire) != 0 {
            spins += 1;
            if spins < 64 {
                std::hint::spin_loop();
            } else if spins < 1024 {
                std::thread::yield_now();
            } else {
                std::thread::sleep(std::time::Duration::from_micros(50));
            }
        }
    }
}
