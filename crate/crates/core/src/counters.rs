//! Instrumentation counters for train-only code paths.
//!
//! `fuse_stage` and the token-matching loss bump these on every call. The
//! evaluation path is required to leave them untouched (fusion and matching
//! costs exist only at pre-training), which the trainer and acceptance
//! suite verify by snapshotting around the retrieval pass.

use std::sync::atomic::{AtomicU64, Ordering};

pub static FUSION_CALLS: AtomicU64 = AtomicU64::new(0);
pub static TOKEN_LOSS_CALLS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Snapshot {
    pub fusion_calls: u64,
    pub token_loss_calls: u64,
}

pub fn snapshot() -> Snapshot {
    Snapshot {
        fusion_calls: FUSION_CALLS.load(Ordering::Relaxed),
        token_loss_calls: TOKEN_LOSS_CALLS.load(Ordering::Relaxed),
    }
}

impl Snapshot {
    /// Counter increments since this snapshot was taken.
    pub fn delta(&self) -> Snapshot {
        let now = snapshot();
        Snapshot {
            fusion_calls: now.fusion_calls - self.fusion_calls,
            token_loss_calls: now.token_loss_calls - self.token_loss_calls,
        }
    }
}

pub(crate) fn count_fusion() {
    FUSION_CALLS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn count_token_loss() {
    TOKEN_LOSS_CALLS.fetch_add(1, Ordering::Relaxed);
}
