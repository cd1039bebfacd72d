use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};

use super::{step_rng, Purpose, SensorSpec, World};
use crate::ekf::{RangeMeasurement, RangeSet};
use crate::geometry::{pairwise_range, NodeId, Vec2};

/// One range per unordered pair of `nodes`, in id order.
///
/// Pairs with a wall between them get a positive exponential bias and a
/// power gap above `nlos_power_gap_db`; the others get Gaussian noise and a
/// gap at or below it.
pub fn sample_uwb_ranges_with<R: Rng>(nodes: &[(NodeId, Vec2)], world: &World, spec: &SensorSpec, timestamp: f64, rng: &mut R) -> RangeSet {
    let mut sorted = nodes.to_vec();
    sorted.sort_by_key(|n| n.0);
    let noise = (spec.uwb_sigma_n > 0.0).then(|| Normal::new(0.0, spec.uwb_sigma_n).expect("validated sigma"));
    let bias = (spec.nlos_bias_mean > 0.0).then(|| Exp::new(1.0 / spec.nlos_bias_mean).expect("validated bias"));
    let mut out = Vec::with_capacity(sorted.len() * sorted.len().saturating_sub(1) / 2);
    for a in 0..sorted.len() {
        for b in a + 1..sorted.len() {
            let (ia, pa) = sorted[a];
            let (ib, pb) = sorted[b];
            let d = pairwise_range(&pa, &pb);
            let rx = -60.0 - 20.0 * d.max(0.1).log10();
            let n = noise.map_or(0.0, |n| n.sample(rng));
            let (range, gap) = if world.line_of_sight(&pa, &pb) {
                (d + n, rng.random_range(0.5..0.8 * spec.nlos_power_gap_db))
            } else {
                let bias = bias.map_or(0.0, |e| e.sample(rng));
                (d + n + bias, spec.nlos_power_gap_db + rng.random_range(1.0..10.0))
            };
            out.push(RangeMeasurement::new(ia, ib, range.max(0.0), rx, rx - gap));
        }
    }
    RangeSet::new(timestamp, out)
}

/// Ranges at simulation step `step`, reproducible from the sensor seed.
pub fn sample_uwb_ranges(nodes: &[(NodeId, Vec2)], world: &World, spec: &SensorSpec, step: u64, timestamp: f64) -> RangeSet {
    let mut rng = step_rng(spec.rng_seed, step, Purpose::Uwb);
    sample_uwb_ranges_with(nodes, world, spec, timestamp, &mut rng)
}
