//! Scheduled failures and elastic-scaling actions.

use serde::{Deserialize, Serialize};

use crate::model::Time;

/// Where inside the processing of a packet a crash lands.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashPoint {
    /// State updates computed but not yet pushed to the store.
    BeforeStatePush,
    /// Updates pushed, packet not yet forwarded.
    BeforeForward,
    /// Updates pushed and packet forwarded.
    AfterStatePush,
    /// Packet forwarded (or output by the last NF), delete request not yet
    /// sent.
    BeforeDelete,
}

impl CrashPoint {
    /// Crash offset from the start of a packet with service time `s`.
    pub fn offset(self, s: Time) -> Time {
        match self {
            CrashPoint::BeforeStatePush => s / 4,
            CrashPoint::BeforeForward => 3 * s / 4,
            CrashPoint::AfterStatePush | CrashPoint::BeforeDelete => s + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "when", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    At { time: Time },
    /// While the instance processes its `count`-th packet.
    AfterProcessed { count: u64, point: CrashPoint },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum Fault {
    Instance {
        instance: u16,
        #[serde(flatten)]
        trigger: Trigger,
    },
    Root {
        root: u16,
        time: Time,
    },
    Shard {
        shard: u16,
        time: Time,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Starts a clone of a straggler; the faster of the two survives.
    Clone { instance: u16, time: Time },
    /// Moves `flows` flows from `from` to `to` (a new instance when absent).
    Handover {
        from: u16,
        #[serde(default)]
        to: Option<u16>,
        flows: usize,
        time: Time,
    },
}

/// Extra per-packet service delay, drawn uniformly per packet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Straggler {
    pub instance: u16,
    pub min: Time,
    pub max: Time,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_points_are_ordered_within_service() {
        let s = 8_000;
        let pts = [
            CrashPoint::BeforeStatePush,
            CrashPoint::BeforeForward,
            CrashPoint::AfterStatePush,
        ];
        let offs: Vec<Time> = pts.iter().map(|p| p.offset(s)).collect();
        assert!(offs.windows(2).all(|w| w[0] < w[1]), "{offs:?}");
        assert!(offs[0] < s / 2 && offs[1] > s / 2 && offs[2] > s);
        assert_eq!(CrashPoint::BeforeDelete.offset(s), offs[2]);
    }

    #[test]
    fn fault_toml_shape() {
        #[derive(Deserialize)]
        struct W {
            fault: Vec<Fault>,
        }
        let w: W = toml::from_str(
            r#"
            [[fault]]
            target = "instance"
            instance = 1
            when = "after_processed"
            count = 40
            point = "before_forward"

            [[fault]]
            target = "root"
            root = 0
            time = 5000
            "#,
        )
        .unwrap();
        assert_eq!(w.fault.len(), 2);
        assert!(matches!(
            w.fault[0],
            Fault::Instance {
                trigger: Trigger::AfterProcessed { count: 40, .. },
                ..
            }
        ));
    }
}
