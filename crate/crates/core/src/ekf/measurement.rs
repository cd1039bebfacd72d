use serde::{Deserialize, Serialize};

use crate::geometry::NodeId;

/// Power-difference threshold of the NLOS rule, in dB.
pub const NLOS_POWER_GAP_DB: f64 = 10.0;

/// One peer-to-peer UWB range with the channel power readings that come
/// with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub node_i: NodeId,
    pub node_j: NodeId,
    pub range: f64,
    pub rx_power_dbm: f64,
    pub first_path_power_dbm: f64,
}

impl RangeMeasurement {
    /// Builds a measurement with the endpoints in canonical (ascending) order.
    pub fn new(a: NodeId, b: NodeId, range: f64, rx_power_dbm: f64, first_path_power_dbm: f64) -> Self {
        let (node_i, node_j) = if a <= b { (a, b) } else { (b, a) };
        Self {
            node_i,
            node_j,
            range,
            rx_power_dbm,
            first_path_power_dbm,
        }
    }

    /// A measurement whose power readings mark it line-of-sight.
    pub fn los(a: NodeId, b: NodeId, range: f64) -> Self {
        Self::new(a, b, range, -80.0, -82.0)
    }

    pub fn involves(&self, id: NodeId) -> bool {
        self.node_i == id || self.node_j == id
    }

    pub fn other(&self, id: NodeId) -> Option<NodeId> {
        if self.node_i == id {
            Some(self.node_j)
        } else if self.node_j == id {
            Some(self.node_i)
        } else {
            None
        }
    }

    pub fn is_los(&self) -> bool {
        nlos_gate(self) == Link::Los
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Link {
    Los,
    Nlos,
}

/// Received power minus first-path power above 10 dB flags the channel NLOS.
pub fn nlos_gate(m: &RangeMeasurement) -> Link {
    if m.rx_power_dbm - m.first_path_power_dbm > NLOS_POWER_GAP_DB {
        Link::Nlos
    } else {
        Link::Los
    }
}

/// All ranges collected during one sampling interval.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeSet {
    pub timestamp: f64,
    pub measurements: Vec<RangeMeasurement>,
}

impl RangeSet {
    pub fn new(timestamp: f64, measurements: Vec<RangeMeasurement>) -> Self {
        Self {
            timestamp,
            measurements,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    /// Line-of-sight measurements only.
    pub fn los(&self) -> impl Iterator<Item = &RangeMeasurement> {
        self.measurements.iter().filter(|m| m.is_los())
    }

    pub fn los_set(&self) -> RangeSet {
        RangeSet::new(self.timestamp, self.los().copied().collect())
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<&RangeMeasurement> {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        self.measurements.iter().find(|m| m.node_i == i && m.node_j == j)
    }

    /// Ids of every node that appears in the set, ascending.
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self
            .measurements
            .iter()
            .flat_map(|m| [m.node_i, m.node_j])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// True when no unordered pair is measured twice.
    pub fn pairs_unique(&self) -> bool {
        let mut pairs: Vec<(NodeId, NodeId)> = self.measurements.iter().map(|m| (m.node_i, m.node_j)).collect();
        pairs.sort_unstable();
        pairs.windows(2).all(|w| w[0] != w[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_gap(gap: f64) -> RangeMeasurement {
        RangeMeasurement::new(0, 1, 3.0, -80.0, -80.0 - gap)
    }

    #[test]
    fn gate_rule_of_thumb() {
        assert_eq!(nlos_gate(&with_gap(12.0)), Link::Nlos);
        assert_eq!(nlos_gate(&with_gap(5.0)), Link::Los);
        assert_eq!(nlos_gate(&with_gap(10.0)), Link::Los);
    }

    #[test]
    fn canonical_order_and_lookup() {
        let m = RangeMeasurement::los(4, 2, 1.0);
        assert_eq!((m.node_i, m.node_j), (2, 4));
        let set = RangeSet::new(0.0, vec![m, with_gap(20.0)]);
        assert!(set.get(4, 2).is_some());
        assert_eq!(set.los().count(), 1);
        assert_eq!(set.node_ids(), vec![0, 1, 2, 4]);
        assert!(set.pairs_unique());
    }

    proptest! {
        #[test]
        fn gate_depends_only_on_power_difference(
            rx in -110.0..-40.0f64, gap in -5.0..30.0f64, offset in -50.0..50.0f64
        ) {
            // integer-valued offsets keep the subtraction exact
            let offset = offset.round();
            let rx = rx.round();
            let gap = gap.round();
            let a = RangeMeasurement::new(0, 1, 1.0, rx, rx - gap);
            let b = RangeMeasurement::new(0, 1, 1.0, rx + offset, rx - gap + offset);
            prop_assert_eq!(nlos_gate(&a), nlos_gate(&b));
        }
    }
}
