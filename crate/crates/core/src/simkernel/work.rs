//! Deterministic cost bookkeeping.
//!
//! Every kernel reports the floating point operations it performed; the
//! reported elapsed time is that count at a fixed throughput, which makes
//! timings reproducible across machines and worker counts. Real wall time is
//! recorded separately.

use serde::{Deserialize, Serialize};

/// Modeled throughput in operations per second.
pub const FLOPS_PER_SECOND: f64 = 1.0e9;
/// Fixed start-up cost (input parsing, allocation), counted as I/O.
pub const STARTUP_FLOPS: f64 = 2.0e6;
/// Timestep bookkeeping per accepted step.
pub const STEP_OVERHEAD_FLOPS: f64 = 5.0e3;

#[derive(Debug, Clone, Default)]
pub struct WorkClock {
    pub assembly: f64,
    pub linear_solve: f64,
    pub wells: f64,
    pub io: f64,
    pub other: f64,
    peak_bytes: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelTimings {
    pub assembly: f64,
    pub linear_solve: f64,
    pub well_management: f64,
    pub io: f64,
}

impl KernelTimings {
    pub fn total(&self) -> f64 {
        self.assembly + self.linear_solve + self.well_management + self.io
    }
}

impl WorkClock {
    pub fn note_memory(&mut self, bytes: f64) {
        if bytes > self.peak_bytes {
            self.peak_bytes = bytes;
        }
    }

    pub fn peak_bytes(&self) -> f64 {
        self.peak_bytes
    }

    pub fn elapsed_s(&self) -> f64 {
        (self.assembly + self.linear_solve + self.wells + self.io + self.other) / FLOPS_PER_SECOND
    }

    pub fn kernels(&self) -> KernelTimings {
        KernelTimings {
            assembly: self.assembly / FLOPS_PER_SECOND,
            linear_solve: self.linear_solve / FLOPS_PER_SECOND,
            well_management: self.wells / FLOPS_PER_SECOND,
            io: self.io / FLOPS_PER_SECOND,
        }
    }
}
