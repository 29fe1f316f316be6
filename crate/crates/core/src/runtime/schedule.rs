//! When parameter servers synchronise their workers.

use serde::{Deserialize, Serialize};

/// `⌈(ΔT0/2)·tanh(2t/ΔT0 − 2) + ΔT0/2⌉`: the number of epochs between
/// synchronisations at epoch `t` (1-based). Starts at 1 and grows towards
/// `delta_t0`.
pub fn schedule_interval(delta_t0: usize, t: usize) -> usize {
    let d = delta_t0.max(1) as f64;
    let t = t.max(1) as f64;
    let v = (d / 2.0) * (2.0 * t / d - 2.0).tanh() + d / 2.0;
    (v.ceil() as usize).clamp(1, delta_t0.max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncSchedule {
    EveryEpoch,
    /// Tanh-growing interval starting from 1 and saturating at `delta_t0`.
    SemiAsync { delta_t0: usize },
}

impl SyncSchedule {
    pub fn interval(self, epoch: usize) -> usize {
        match self {
            SyncSchedule::EveryEpoch => 1,
            SyncSchedule::SemiAsync { delta_t0 } => schedule_interval(delta_t0, epoch),
        }
    }

    /// Whether epoch `t` ends with a synchronisation.
    pub fn syncs_at(self, epoch: usize) -> bool {
        epoch % self.interval(epoch) == 0
    }
}
