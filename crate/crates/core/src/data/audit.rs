use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::volume::Volume;

/// Counts every read of ground-truth volumes.
#[derive(Debug, Default)]
pub struct AccessAudit {
    hr_reads: AtomicUsize,
}

impl AccessAudit {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn hr_reads(&self) -> usize {
        self.hr_reads.load(Ordering::SeqCst)
    }

    pub fn record_hr_read(&self) {
        self.hr_reads.fetch_add(1, Ordering::SeqCst);
    }
}

/// A ground-truth volume that can only be reached through an audited read.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    volume: Volume,
    audit: Arc<AccessAudit>,
}

impl GroundTruth {
    pub fn new(volume: Volume, audit: Arc<AccessAudit>) -> Self {
        GroundTruth { volume, audit }
    }

    pub fn read(&self) -> &Volume {
        self.audit.record_hr_read();
        &self.volume
    }

    pub fn shape(&self) -> [usize; 3] {
        self.volume.shape()
    }
}

/// A test volume: the sparse input any method may use, and the audited
/// dense ground truth only evaluation may read.
#[derive(Debug, Clone)]
pub struct TestCase {
    pub id: String,
    pub lr: Volume,
    pub hr: GroundTruth,
}
