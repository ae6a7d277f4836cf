use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{InstanceId, Time};

/// Default slowness threshold for the straggler stub, in percent.
pub const DEFAULT_THETA: f64 = 50.0;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub processed: u64,
    pub busy_time: Time,
    pub queue_depth: usize,
    /// Packets per scope projection (hex), over the whole run.
    pub load: BTreeMap<String, u64>,
}

impl InstanceStats {
    /// Mean per-packet service time, if anything was processed.
    pub fn mean_service(&self) -> Option<f64> {
        (self.processed > 0).then(|| self.busy_time as f64 / self.processed as f64)
    }

    /// Packets per simulated second over `window`.
    pub fn rate(&self, window: Time) -> f64 {
        if window == 0 {
            return 0.0;
        }
        self.processed as f64 * 1e9 / window as f64
    }
}

/// Instances whose mean service time is at least `theta` percent above the
/// median of their vertex.
pub fn stragglers(stats: &BTreeMap<InstanceId, InstanceStats>, theta: f64) -> Vec<InstanceId> {
    let mut means: Vec<(InstanceId, f64)> = stats
        .iter()
        .filter_map(|(i, s)| s.mean_service().map(|m| (*i, m)))
        .collect();
    if means.len() < 2 {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = means.iter().map(|(_, m)| *m).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    means.retain(|(_, m)| *m >= median * (1.0 + theta / 100.0));
    means.into_iter().map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(processed: u64, busy: Time) -> InstanceStats {
        InstanceStats {
            processed,
            busy_time: busy,
            ..InstanceStats::default()
        }
    }

    #[test]
    fn idle_vertex_has_zero_rate() {
        assert_eq!(InstanceStats::default().rate(1_000_000_000), 0.0);
        assert!(stragglers(&BTreeMap::new(), DEFAULT_THETA).is_empty());
    }

    #[test]
    fn load_split_is_proportional() {
        let a = st(10, 0).rate(1_000_000_000);
        let b = st(30, 0).rate(1_000_000_000);
        assert_eq!(a / (a + b), 0.25);
    }

    #[test]
    fn slow_instance_is_flagged() {
        let mut m = BTreeMap::new();
        m.insert(InstanceId(1), st(100, 100_000));
        m.insert(InstanceId(2), st(100, 160_000));
        m.insert(InstanceId(3), st(100, 101_000));
        assert_eq!(stragglers(&m, DEFAULT_THETA), vec![InstanceId(2)]);
        assert!(stragglers(&m, 70.0).is_empty());
    }
}
