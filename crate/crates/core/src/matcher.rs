//! Joint refinement of robot pose, heading and beacon positions against the
//! occupancy map and the UWB ranges.
//!
//! The parameter vector is `[p_0, p_1, .., p_N, theta]`: two coordinates per
//! node (robot first, beacons in state order) followed by the robot heading.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ekf::{Belief, RangeSet};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, pairwise_range, rigid_transform, rotation, NodeId, Pose2, Vec2};
use crate::map::{scan_endpoints, GridPyramid, OccupancyGrid, Scan};
use crate::par::{self, Execution};

/// Tuning of the fused Gauss-Newton matcher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub gamma: f64,
    pub iterations_per_level: usize,
    /// Scale of the Levenberg term, relative to the mean diagonal of the normal matrix.
    pub damping: f64,
    /// Per-iteration limits on each position component (m) and on the heading (rad).
    pub step_clamp: (f64, f64),
    pub max_halvings: usize,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gamma: 0.65,
            iterations_per_level: 5,
            damping: 1e-6,
            step_clamp: (0.3, 0.2),
            max_halvings: 4,
            execution: Execution::default(),
        }
    }
}

impl FusionConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.damping >= 0.0) {
            return Err(Error::Config("gamma and damping must be non-negative".into()));
        }
        if !(self.step_clamp.0 > 0.0 && self.step_clamp.1 > 0.0) {
            return Err(Error::Config("step clamp must be positive".into()));
        }
        Ok(())
    }
}

/// Point of linearization for the matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchState {
    pub robot_pose: Pose2,
    pub beacon_positions: Vec<Vec2>,
    pub beacon_ids: Vec<NodeId>,
    /// Frozen parameter indices, sorted.
    pub gauge_mask: Vec<usize>,
}

impl MatchState {
    /// Builds the state from a belief, freezing `anchor_a.x`, `anchor_a.y` and `anchor_b.y`.
    pub fn from_belief(belief: &Belief, heading: f64, anchors: (NodeId, NodeId)) -> Result<Self> {
        let s = &belief.state;
        let ka = s.index_of(anchors.0).filter(|k| *k > 0).ok_or(Error::UnknownNode(anchors.0))?;
        let kb = s.index_of(anchors.1).filter(|k| *k > 0).ok_or(Error::UnknownNode(anchors.1))?;
        let mut gauge_mask = vec![2 * ka, 2 * ka + 1, 2 * kb + 1];
        gauge_mask.sort_unstable();
        Ok(Self {
            robot_pose: Pose2::from_parts(s.positions[0], heading),
            beacon_positions: s.positions[1..].to_vec(),
            beacon_ids: s.beacon_ids.clone(),
            gauge_mask,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.beacon_positions.len() + 1
    }

    pub fn dim(&self) -> usize {
        2 * self.n_nodes() + 1
    }

    pub fn theta_index(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn position(&self, k: usize) -> Vec2 {
        if k == 0 {
            self.robot_pose.position()
        } else {
            self.beacon_positions[k - 1]
        }
    }

    fn node_index(&self, id: NodeId) -> Option<usize> {
        if id == crate::geometry::ROBOT_ID {
            Some(0)
        } else {
            self.beacon_ids.iter().position(|b| *b == id).map(|k| k + 1)
        }
    }

    /// The state moved by `offset`. The heading is left unnormalized so that
    /// offsets compose additively.
    pub fn shifted(&self, offset: &MatchOffset) -> MatchState {
        let mut out = self.clone();
        let p = self.robot_pose.position() + offset.d_positions[0];
        out.robot_pose = Pose2::from_parts(p, self.robot_pose.theta);
        out.robot_pose.theta = self.robot_pose.theta + offset.d_theta;
        for (b, d) in out.beacon_positions.iter_mut().zip(&offset.d_positions[1..]) {
            *b += d;
        }
        out
    }

    /// Offset that takes `self` to `other`; both must describe the same nodes.
    pub fn offset_to(&self, other: &MatchState) -> MatchOffset {
        let d_positions = (0..self.n_nodes()).map(|k| other.position(k) - self.position(k)).collect();
        MatchOffset {
            d_positions,
            d_theta: other.robot_pose.theta - self.robot_pose.theta,
        }
    }
}

/// Increment of every node position and of the robot heading.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOffset {
    pub d_positions: Vec<Vec2>,
    pub d_theta: f64,
}

impl MatchOffset {
    pub fn zero(n_nodes: usize) -> Self {
        Self {
            d_positions: vec![Vec2::zeros(); n_nodes],
            d_theta: 0.0,
        }
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let n = (x.len() - 1) / 2;
        Self {
            d_positions: (0..n).map(|k| Vec2::new(x[2 * k], x[2 * k + 1])).collect(),
            d_theta: x[2 * n],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.d_positions.len();
        let mut x = DVector::zeros(2 * n + 1);
        for (k, d) in self.d_positions.iter().enumerate() {
            x[2 * k] = d.x;
            x[2 * k + 1] = d.y;
        }
        x[2 * n] = self.d_theta;
        x
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            d_positions: self.d_positions.iter().map(|d| d * s).collect(),
            d_theta: self.d_theta * s,
        }
    }
}

/// LOS range constraint between two matcher nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeTerm {
    pub a: usize,
    pub b: usize,
    pub range: f64,
}

/// Range constraints of `ranges` whose nodes are both in the state.
pub fn range_terms(ms: &MatchState, ranges: &RangeSet) -> Vec<RangeTerm> {
    ranges
        .los()
        .filter_map(|m| {
            Some(RangeTerm {
                a: ms.node_index(m.node_i)?,
                b: ms.node_index(m.node_j)?,
                range: m.range,
            })
        })
        .collect()
}

/// Sums over scan endpoints: upper triangle of `J J^T`, `J (1 - G)` and the cost.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct LidarSums {
    h: [f64; 6],
    m: [f64; 3],
    cost: f64,
}

impl LidarSums {
    fn merge(&mut self, o: &LidarSums) {
        for k in 0..6 {
            self.h[k] += o.h[k];
        }
        for k in 0..3 {
            self.m[k] += o.m[k];
        }
        self.cost += o.cost;
    }
}

fn lidar_sums(pose: &Pose2, endpoints: &[Vec2], grid: &OccupancyGrid, exec: Execution, with_terms: bool) -> LidarSums {
    let (s, c) = pose.theta.sin_cos();
    let t = pose.position();
    par::chunked_fold(
        exec,
        endpoints,
        LidarSums::default(),
        |acc, e| {
            let w = Vec2::new(c * e.x - s * e.y + t.x, s * e.x + c * e.y + t.y);
            let g = grid.sample_or_unknown(&w);
            let r = 1.0 - g.value;
            acc.cost += 0.5 * r * r;
            if with_terms {
                let dth = g.gradient.x * (-s * e.x - c * e.y) + g.gradient.y * (c * e.x - s * e.y);
                let j = [g.gradient.x, g.gradient.y, dth];
                acc.h[0] += j[0] * j[0];
                acc.h[1] += j[0] * j[1];
                acc.h[2] += j[0] * j[2];
                acc.h[3] += j[1] * j[1];
                acc.h[4] += j[1] * j[2];
                acc.h[5] += j[2] * j[2];
                for k in 0..3 {
                    acc.m[k] += j[k] * r;
                }
            }
        },
        |a, b| a.merge(b),
    )
}

fn range_cost(ms: &MatchState, terms: &[RangeTerm]) -> f64 {
    terms
        .iter()
        .map(|t| {
            let r = pairwise_range(&ms.position(t.a), &ms.position(t.b)) - t.range;
            0.5 * r * r
        })
        .sum()
}

/// Objective terms: the LiDAR part and the unweighted range part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub lidar: f64,
    pub range: f64,
}

impl ObjectiveParts {
    pub fn total(&self, gamma: f64) -> f64 {
        self.lidar + gamma * self.range
    }
}

fn objective_parts(
    ms: &MatchState,
    endpoints: &[Vec2],
    grid: &OccupancyGrid,
    terms: &[RangeTerm],
    exec: Execution,
) -> ObjectiveParts {
    ObjectiveParts {
        lidar: lidar_sums(&ms.robot_pose, endpoints, grid, exec, false).cost,
        range: range_cost(ms, terms),
    }
}

/// Fused cost `1/2 sum (1 - G(f_i))^2 + gamma/2 sum (h - r)^2` at the given state.
pub fn fused_objective(ms: &MatchState, scan: &Scan, grid: &OccupancyGrid, ranges: &RangeSet, cfg: &FusionConfig) -> f64 {
    let endpoints = scan_endpoints(scan);
    let terms = range_terms(ms, ranges);
    objective_parts(ms, &endpoints, grid, &terms, cfg.execution).total(cfg.gamma)
}

/// Gauss-Newton quantities of both residual families.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalTerms {
    pub h_lid: DMatrix<f64>,
    pub h_uwb: DMatrix<f64>,
    pub m_lid: DVector<f64>,
    pub m_uwb: DVector<f64>,
    pub gauge_mask: Vec<usize>,
    pub objective: ObjectiveParts,
}

impl NormalTerms {
    /// Gradient of the fused objective with respect to the offset.
    pub fn gradient(&self, gamma: f64) -> DVector<f64> {
        -(&self.m_lid - &self.m_uwb * gamma)
    }
}

fn normal_terms_from(
    ms: &MatchState,
    endpoints: &[Vec2],
    grid: &OccupancyGrid,
    terms: &[RangeTerm],
    exec: Execution,
) -> NormalTerms {
    let d = ms.dim();
    let ti = ms.theta_index();
    let mut h_lid = DMatrix::zeros(d, d);
    let mut m_lid = DVector::zeros(d);
    let sums = lidar_sums(&ms.robot_pose, endpoints, grid, exec, true);
    let idx = [0, 1, ti];
    let mut u = 0;
    for a in 0..3 {
        for b in a..3 {
            h_lid[(idx[a], idx[b])] = sums.h[u];
            h_lid[(idx[b], idx[a])] = sums.h[u];
            u += 1;
        }
        m_lid[idx[a]] = sums.m[a];
    }

    let mut h_uwb = DMatrix::zeros(d, d);
    let mut m_uwb = DVector::zeros(d);
    let mut range = 0.0;
    for t in terms {
        let diff = ms.position(t.a) - ms.position(t.b);
        let h = diff.norm();
        let res = h - t.range;
        range += 0.5 * res * res;
        if h <= 1e-9 {
            continue;
        }
        let g = diff / h;
        let grad = [(2 * t.a, g.x), (2 * t.a + 1, g.y), (2 * t.b, -g.x), (2 * t.b + 1, -g.y)];
        for &(i, gi) in &grad {
            m_uwb[i] += gi * res;
            for &(j, gj) in &grad {
                h_uwb[(i, j)] += gi * gj;
            }
        }
    }

    for &k in &ms.gauge_mask {
        for h in [&mut h_lid, &mut h_uwb] {
            h.row_mut(k).fill(0.0);
            h.column_mut(k).fill(0.0);
            h[(k, k)] = 1.0;
        }
        m_lid[k] = 0.0;
        m_uwb[k] = 0.0;
    }

    NormalTerms {
        h_lid,
        h_uwb,
        m_lid,
        m_uwb,
        gauge_mask: ms.gauge_mask.clone(),
        objective: ObjectiveParts { lidar: sums.cost, range },
    }
}

/// Normal-equation blocks at the current state.
pub fn normal_equation_terms(
    ms: &MatchState,
    scan: &Scan,
    grid: &OccupancyGrid,
    ranges: &RangeSet,
    cfg: &FusionConfig,
) -> NormalTerms {
    let endpoints = scan_endpoints(scan);
    let terms = range_terms(ms, ranges);
    normal_terms_from(ms, &endpoints, grid, &terms, cfg.execution)
}

/// Solves `(H_lid + gamma H_uwb + lambda I) x = M_lid - gamma M_uwb`, clamps and
/// zeroes the frozen entries.
pub fn solve_offset(terms: &NormalTerms, cfg: &FusionConfig) -> Result<MatchOffset> {
    let d = terms.h_lid.nrows();
    let mut a = &terms.h_lid + &terms.h_uwb * cfg.gamma;
    let rhs = &terms.m_lid - &terms.m_uwb * cfg.gamma;
    let lambda = cfg.damping * a.trace() / d as f64;
    for k in 0..d {
        a[(k, k)] += lambda;
    }
    let mut x = match a.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => a.lu().solve(&rhs).ok_or(Error::SingularSystem)?,
    };
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let (cp, ct) = cfg.step_clamp;
    for k in 0..d - 1 {
        x[k] = x[k].clamp(-cp, cp);
    }
    x[d - 1] = x[d - 1].clamp(-ct, ct);
    for &k in &terms.gauge_mask {
        x[k] = 0.0;
    }
    Ok(MatchOffset::from_vector(&x))
}

/// Diagnostics of one [`match_scan`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub offset: MatchOffset,
    pub refined: MatchState,
    /// Fused objective at the finest level before and after matching.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub accepted_steps: usize,
    pub singular: bool,
    /// Mean occupancy of the scan endpoints at the refined pose, finest level.
    pub mean_hit_occupancy: Option<f64>,
}

/// Coarse-to-fine Gauss-Newton refinement of `initial`.
///
/// A step is kept only if the fused objective at its level does not grow;
/// otherwise it is halved up to `max_halvings` times and then dropped, which
/// ends that level.
pub fn match_scan(
    initial: &MatchState,
    scan: &Scan,
    pyramid: &GridPyramid,
    ranges: &RangeSet,
    cfg: &FusionConfig,
) -> MatchReport {
    let endpoints = scan_endpoints(scan);
    let terms = range_terms(initial, ranges);
    let exec = cfg.execution;
    let finest = pyramid.finest();
    let initial_objective = objective_parts(initial, &endpoints, finest, &terms, exec).total(cfg.gamma);

    let mut state = initial.clone();
    let mut accepted_steps = 0;
    let mut singular = false;

    'levels: for grid in pyramid.levels().iter().rev() {
        for _ in 0..cfg.iterations_per_level {
            let nt = normal_terms_from(&state, &endpoints, grid, &terms, exec);
            let current = nt.objective.total(cfg.gamma);
            let step = match solve_offset(&nt, cfg) {
                Ok(s) => s,
                Err(_) => {
                    singular = true;
                    break 'levels;
                }
            };
            if step.norm() < 1e-12 {
                break;
            }
            let mut trial = step;
            let mut accepted = false;
            for _ in 0..=cfg.max_halvings {
                let candidate = state.shifted(&trial);
                if objective_parts(&candidate, &endpoints, grid, &terms, exec).total(cfg.gamma) <= current {
                    state = candidate;
                    accepted = true;
                    break;
                }
                trial = trial.scaled(0.5);
            }
            if !accepted {
                break;
            }
            accepted_steps += 1;
        }
    }

    if singular {
        state = initial.clone();
    }
    state.robot_pose.theta = initial.robot_pose.theta + normalize_angle(state.robot_pose.theta - initial.robot_pose.theta);
    let final_objective = objective_parts(&state, &endpoints, finest, &terms, exec).total(cfg.gamma);
    let mean_hit_occupancy = mean_occupancy(&state.robot_pose, &endpoints, finest);
    MatchReport {
        offset: initial.offset_to(&state),
        refined: state,
        initial_objective,
        final_objective,
        accepted_steps,
        singular,
        mean_hit_occupancy,
    }
}

/// Mean occupancy read at the scan endpoints placed by `pose`, over the
/// endpoints that land on observed cells. `None` when fewer than
/// `MIN_KNOWN_FRACTION` of them do, as in unexplored space.
pub fn mean_occupancy(pose: &Pose2, endpoints: &[Vec2], grid: &OccupancyGrid) -> Option<f64> {
    let mut sum = 0.0;
    let mut known = 0usize;
    for e in endpoints {
        let w = rigid_transform(pose, e);
        if let Some((i, j)) = grid.cell_of(&w) {
            if grid.log_odds(i, j) != 0.0 {
                sum += grid.sample_or_unknown(&w).value;
                known += 1;
            }
        }
    }
    (known > 0 && known as f64 >= MIN_KNOWN_FRACTION * endpoints.len() as f64).then(|| sum / known as f64)
}

pub const MIN_KNOWN_FRACTION: f64 = 0.2;

/// Shifts every position by its offset and turns the robot velocity by the
/// heading offset. The covariance is left as is.
pub fn apply_correction(belief: &Belief, offset: &MatchOffset) -> Result<Belief> {
    let n = belief.state.n_nodes();
    if offset.d_positions.len() != n {
        return Err(Error::Config(format!(
            "offset covers {} nodes, belief has {n}",
            offset.d_positions.len()
        )));
    }
    let mut out = belief.clone();
    for (p, d) in out.state.positions.iter_mut().zip(&offset.d_positions) {
        *p += d;
    }
    out.state.velocities[0] = rotation(offset.d_theta) * belief.state.velocities[0];
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ekf::RangeMeasurement;
    use crate::geometry::StateVector;
    use crate::map::{build_pyramid, LogOddsParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(robot: Pose2, beacons: &[(NodeId, Vec2)], anchors: (NodeId, NodeId)) -> MatchState {
        let mut gauge_mask = Vec::new();
        for (k, (id, _)) in beacons.iter().enumerate() {
            if *id == anchors.0 {
                gauge_mask.extend([2 * (k + 1), 2 * (k + 1) + 1]);
            }
            if *id == anchors.1 {
                gauge_mask.push(2 * (k + 1) + 1);
            }
        }
        gauge_mask.sort_unstable();
        MatchState {
            robot_pose: robot,
            beacon_positions: beacons.iter().map(|b| b.1).collect(),
            beacon_ids: beacons.iter().map(|b| b.0).collect(),
            gauge_mask,
        }
    }

    fn three_beacons(robot: Pose2) -> MatchState {
        state(
            robot,
            &[(1, Vec2::new(0.0, 0.0)), (2, Vec2::new(4.0, 0.0)), (3, Vec2::new(1.5, 3.0))],
            (1, 2),
        )
    }

    fn exact_ranges(ms: &MatchState) -> RangeSet {
        let ids: Vec<NodeId> = std::iter::once(0).chain(ms.beacon_ids.iter().copied()).collect();
        let mut v = Vec::new();
        for a in 0..ids.len() {
            for b in a + 1..ids.len() {
                v.push(RangeMeasurement::los(ids[a], ids[b], pairwise_range(&ms.position(a), &ms.position(b))));
            }
        }
        RangeSet::new(0.0, v)
    }

    fn random_grid(rng: &mut ChaCha8Rng) -> OccupancyGrid {
        let mut g = OccupancyGrid::new(0.1, Vec2::new(-3.0, -3.0), 60, 60, LogOddsParams::default()).unwrap();
        for i in 0..60 {
            for j in 0..60 {
                g.set_log_odds(i, j, rng.random_range(-4.0..4.0));
            }
        }
        g
    }

    fn random_scan(rng: &mut ChaCha8Rng, n: usize) -> Scan {
        let bearings: Vec<f64> = (0..n).map(|i| -2.3 + 4.6 * i as f64 / n as f64).collect();
        let ranges: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..2.0)).collect();
        Scan::new(bearings, ranges, 30.0, vec![true; n]).unwrap()
    }

    /// Grid with Γ = 1 on every cell centre, so any interior endpoint reads 1.
    fn solid_grid() -> OccupancyGrid {
        let mut g = OccupancyGrid::new(0.1, Vec2::new(-5.0, -5.0), 100, 100, LogOddsParams::default()).unwrap();
        for i in 0..100 {
            for j in 0..100 {
                g.set_probability_unclamped(i, j, 1.0);
            }
        }
        g
    }

    #[test]
    fn perfect_inputs_have_zero_cost() {
        let ms = three_beacons(Pose2::new(1.0, 1.0, 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scan = random_scan(&mut rng, 50);
        let cost = fused_objective(&ms, &scan, &solid_grid(), &exact_ranges(&ms), &FusionConfig::default());
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn single_range_residual_hand_value() {
        let ms = three_beacons(Pose2::new(1.0, 1.0, 0.0));
        let mut ranges = exact_ranges(&ms);
        ranges.measurements[0].range += 0.2;
        let cost = fused_objective(&ms, &Scan::empty(), &solid_grid(), &ranges, &FusionConfig::default());
        assert!((cost - 0.013).abs() < 1e-12, "{cost}");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cost = fused_objective(&ms, &random_scan(&mut rng, 30), &solid_grid(), &ranges, &FusionConfig::default());
        assert!((cost - 0.013).abs() < 1e-12, "{cost}");
    }

    #[test]
    fn zero_gamma_is_pure_lidar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = random_grid(&mut rng);
        let scan = random_scan(&mut rng, 80);
        let ms = three_beacons(Pose2::new(0.2, -0.1, 0.5));
        let mut ranges = exact_ranges(&ms);
        for m in &mut ranges.measurements {
            m.range += 0.3;
        }
        let cfg = FusionConfig::with_gamma(0.0);
        let fused = fused_objective(&ms, &scan, &grid, &ranges, &cfg);
        let lidar = fused_objective(&ms, &scan, &grid, &RangeSet::new(0.0, vec![]), &cfg);
        assert_eq!(fused, lidar);
        assert!(lidar > 0.0);
    }

    #[test]
    fn nlos_ranges_are_ignored() {
        let ms = three_beacons(Pose2::new(1.0, 1.0, 0.0));
        let mut ranges = exact_ranges(&ms);
        ranges.measurements[0].range += 1.0;
        ranges.measurements[0].rx_power_dbm = -70.0;
        ranges.measurements[0].first_path_power_dbm = -85.0;
        assert_eq!(fused_objective(&ms, &Scan::empty(), &solid_grid(), &ranges, &FusionConfig::default()), 0.0);
    }

    #[test]
    fn no_scan_means_no_lidar_terms() {
        let ms = three_beacons(Pose2::new(1.0, 1.0, 0.0));
        let t = normal_equation_terms(&ms, &Scan::empty(), &solid_grid(), &exact_ranges(&ms), &FusionConfig::default());
        for k in 0..ms.dim() {
            assert_eq!(t.m_lid[k], 0.0);
            for j in 0..ms.dim() {
                if !(j == k && ms.gauge_mask.contains(&k)) {
                    assert_eq!(t.h_lid[(k, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn hessians_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let grid = random_grid(&mut rng);
            let scan = random_scan(&mut rng, 60);
            let ms = three_beacons(Pose2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.3));
            let mut ranges = exact_ranges(&ms);
            for m in &mut ranges.measurements {
                m.range += rng.random_range(-0.3..0.3);
            }
            let t = normal_equation_terms(&ms, &scan, &grid, &ranges, &FusionConfig::default());
            for h in [&t.h_lid, &t.h_uwb] {
                assert_eq!(h, &h.transpose());
                assert!(h.symmetric_eigenvalues().min() >= -1e-9);
            }
        }
    }

    #[test]
    fn range_hessian_matches_finite_difference_jacobian() {
        // 2-beacon toy: residual Jacobian by central differences, then J^T J
        let ms = state(
            Pose2::new(0.7, 1.9, 0.0),
            &[(1, Vec2::new(0.0, 0.0)), (2, Vec2::new(3.0, 0.0))],
            (1, 2),
        );
        let mut ranges = exact_ranges(&ms);
        ranges.measurements[1].range -= 0.15;
        let terms = range_terms(&ms, &ranges);
        let d = ms.dim();
        let h = 1e-6;
        let mut jac = DMatrix::zeros(terms.len(), d);
        for k in 0..d - 1 {
            let mut dx = DVector::zeros(d);
            dx[k] = h;
            let plus = ms.shifted(&MatchOffset::from_vector(&dx));
            let minus = ms.shifted(&MatchOffset::from_vector(&-dx));
            for (r, t) in terms.iter().enumerate() {
                let f = |s: &MatchState| pairwise_range(&s.position(t.a), &s.position(t.b)) - t.range;
                jac[(r, k)] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
        }
        let oracle = jac.transpose() * &jac;
        let nt = normal_equation_terms(&ms, &Scan::empty(), &solid_grid(), &ranges, &FusionConfig::default());
        for i in 0..d {
            for j in 0..d {
                if ms.gauge_mask.contains(&i) || ms.gauge_mask.contains(&j) {
                    continue;
                }
                assert!((nt.h_uwb[(i, j)] - oracle[(i, j)]).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    fn fd_gradient(ms: &MatchState, scan: &Scan, grid: &OccupancyGrid, ranges: &RangeSet, cfg: &FusionConfig) -> DVector<f64> {
        let d = ms.dim();
        let h = 1e-7;
        DVector::from_iterator(
            d,
            (0..d).map(|k| {
                let mut dx = DVector::zeros(d);
                dx[k] = h;
                let plus = fused_objective(&ms.shifted(&MatchOffset::from_vector(&dx)), scan, grid, ranges, cfg);
                let minus = fused_objective(&ms.shifted(&MatchOffset::from_vector(&-dx)), scan, grid, ranges, cfg);
                (plus - minus) / (2.0 * h)
            }),
        )
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = FusionConfig::default();
        for _ in 0..100 {
            let grid = random_grid(&mut rng);
            let scan = random_scan(&mut rng, 40);
            let ms = three_beacons(Pose2::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.0..3.0),
            ));
            let mut ranges = exact_ranges(&ms);
            for m in &mut ranges.measurements {
                m.range += rng.random_range(-0.3..0.3);
            }
            let nt = normal_equation_terms(&ms, &scan, &grid, &ranges, &cfg);
            let an = nt.gradient(cfg.gamma);
            let fd = fd_gradient(&ms, &scan, &grid, &ranges, &cfg);
            for k in 0..ms.dim() {
                if ms.gauge_mask.contains(&k) {
                    continue;
                }
                assert!((an[k] - fd[k]).abs() <= 1e-4 * an.amax().max(1e-3), "k={k}: {} vs {}", an[k], fd[k]);
            }
        }
    }

    #[test]
    fn stationary_point_gives_zero_offset() {
        let d = 9;
        let terms = NormalTerms {
            h_lid: DMatrix::identity(d, d),
            h_uwb: DMatrix::identity(d, d),
            m_lid: DVector::zeros(d),
            m_uwb: DVector::zeros(d),
            gauge_mask: vec![2, 3, 5],
            objective: ObjectiveParts { lidar: 0.0, range: 0.0 },
        };
        let off = solve_offset(&terms, &FusionConfig::default()).unwrap();
        assert_eq!(off.norm(), 0.0);
    }

    #[test]
    fn pure_range_step_moves_beacon_along_gradient() {
        // robot and anchors fixed far from the free beacon; only the
        // robot-to-beacon-3 range is inconsistent, by +0.1 m
        let mut ms = three_beacons(Pose2::new(1.5, 1.0, 0.0));
        ms.gauge_mask = vec![0, 1, 2, 3, 4, 5, 6, 8];
        let mut ranges = RangeSet::new(0.0, vec![]);
        let r0 = pairwise_range(&ms.position(0), &ms.position(3));
        ranges.measurements.push(RangeMeasurement::los(0, 3, r0 + 0.1));
        let cfg = FusionConfig {
            gamma: 1.0,
            damping: 0.0,
            ..FusionConfig::default()
        };
        let nt = normal_equation_terms(&ms, &Scan::empty(), &solid_grid(), &ranges, &cfg);
        let off = solve_offset(&nt, &cfg).unwrap();
        // beacon 3 sits straight above the robot; 1D Gauss-Newton: dy = +0.1
        assert!((off.d_positions[3] - Vec2::new(0.0, 0.1)).norm() < 1e-12);
        let after = ms.shifted(&off);
        assert!((pairwise_range(&after.position(0), &after.position(3)) - (r0 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn gauge_entries_stay_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let grid = random_grid(&mut rng);
            let scan = random_scan(&mut rng, 30);
            let ms = three_beacons(Pose2::new(0.3, 0.2, rng.random_range(-3.0..3.0)));
            let mut ranges = exact_ranges(&ms);
            for m in &mut ranges.measurements {
                m.range += rng.random_range(-0.5..0.5);
            }
            let cfg = FusionConfig::with_gamma(rng.random_range(0.0..5.0));
            let off = solve_offset(&normal_equation_terms(&ms, &scan, &grid, &ranges, &cfg), &cfg).unwrap();
            assert_eq!(off.d_positions[1], Vec2::zeros());
            assert_eq!(off.d_positions[2].y, 0.0);
        }
    }

    #[test]
    fn small_gamma_approaches_lidar_only_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = random_grid(&mut rng);
        let scan = random_scan(&mut rng, 200);
        let ms = three_beacons(Pose2::new(0.1, 0.1, 0.2));
        let mut ranges = exact_ranges(&ms);
        for m in &mut ranges.measurements {
            m.range += rng.random_range(-0.2..0.2);
        }
        let step = |g: f64| {
            let cfg = FusionConfig::with_gamma(g);
            solve_offset(&normal_equation_terms(&ms, &scan, &grid, &ranges, &cfg), &cfg)
                .unwrap()
                .to_vector()
        };
        let base = step(0.0);
        let e3 = (step(1e-3) - &base).norm();
        let e6 = (step(1e-6) - &base).norm();
        assert!(e6 < e3);
        // damping is tiny, so beacon rows shrink roughly in proportion to gamma
        assert!(e6 < 1e-2 * e3, "{e6} vs {e3}");
        assert!(e6 < 1e-3);
        for k in 3..base.len() - 1 {
            assert_eq!(base[k], 0.0);
        }
    }

    #[test]
    fn clamp_limits_each_component() {
        let d = 7;
        let mut m = DVector::zeros(d);
        m[0] = 10.0;
        m[6] = -10.0;
        let terms = NormalTerms {
            h_lid: DMatrix::identity(d, d),
            h_uwb: DMatrix::zeros(d, d),
            m_lid: m,
            m_uwb: DVector::zeros(d),
            gauge_mask: vec![],
            objective: ObjectiveParts { lidar: 0.0, range: 0.0 },
        };
        let off = solve_offset(&terms, &FusionConfig::default()).unwrap();
        assert_eq!(off.d_positions[0].x, 0.3);
        assert_eq!(off.d_theta, -0.2);
    }

    /// Square room with a few interior boxes, mapped from its true pose.
    fn room_scene() -> (GridPyramid, Scan, Pose2) {
        let mut walls: Vec<(Vec2, Vec2)> = Vec::new();
        let mut rect = |x0: f64, y0: f64, x1: f64, y1: f64| {
            let c = [Vec2::new(x0, y0), Vec2::new(x1, y0), Vec2::new(x1, y1), Vec2::new(x0, y1)];
            for k in 0..4 {
                walls.push((c[k], c[(k + 1) % 4]));
            }
        };
        rect(-4.0, -3.0, 4.0, 3.0);
        rect(1.0, 1.0, 1.6, 1.5);
        rect(-2.5, -2.0, -1.8, -1.2);
        rect(2.0, -2.2, 2.4, -1.0);
        let cast = |pose: &Pose2| {
            let n = 721;
            let bearings: Vec<f64> = (0..n).map(|i| -2.35 + 4.7 * i as f64 / (n - 1) as f64).collect();
            let ranges: Vec<f64> = bearings
                .iter()
                .map(|b| {
                    let dir = Vec2::new((pose.theta + b).cos(), (pose.theta + b).sin());
                    walls
                        .iter()
                        .filter_map(|(a, c)| {
                            let e = c - a;
                            let den = dir.x * e.y - dir.y * e.x;
                            if den.abs() < 1e-12 {
                                return None;
                            }
                            let w = a - pose.position();
                            let t = (w.x * e.y - w.y * e.x) / den;
                            let u = (w.x * dir.y - w.y * dir.x) / den;
                            (t > 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            Scan::new(bearings, ranges, 30.0, vec![true; n]).unwrap()
        };
        let finest = OccupancyGrid::covering(Vec2::new(-5.0, -4.0), Vec2::new(5.0, 4.0), 0.05, LogOddsParams::default()).unwrap();
        let mut pyr = build_pyramid(finest, 3).unwrap();
        for p in [Pose2::new(0.0, 0.0, 0.0), Pose2::new(-1.0, 1.0, 1.0), Pose2::new(1.0, -1.0, -2.0)] {
            for _ in 0..3 {
                pyr.integrate_scan(&p, &cast(&p));
            }
        }
        let truth = Pose2::new(0.2, 0.1, 0.3);
        (pyr, cast(&truth), truth)
    }

    #[test]
    fn recovers_grid_search_minimizer() {
        let (pyr, scan, truth) = room_scene();
        let grid = pyr.finest();
        let no_ranges = RangeSet::new(0.0, vec![]);
        let cfg = FusionConfig::with_gamma(0.0);
        let robot_only = |p: Pose2| state(p, &[(1, Vec2::new(0.0, 0.0)), (2, Vec2::new(1.0, 0.0))], (1, 2));

        // brute-force oracle: 5 mm / 0.05 deg lattice around the true pose
        let mut best = (f64::INFINITY, truth);
        for i in -10..=10 {
            for j in -10..=10 {
                for k in -10..=10 {
                    let p = Pose2::new(
                        truth.x + 0.005 * i as f64,
                        truth.y + 0.005 * j as f64,
                        truth.theta + (0.05 * k as f64).to_radians(),
                    );
                    let c = fused_objective(&robot_only(p), &scan, grid, &no_ranges, &cfg);
                    if c < best.0 {
                        best = (c, p);
                    }
                }
            }
        }

        let start = Pose2::new(truth.x + 0.1, truth.y + 0.1, truth.theta + 2f64.to_radians());
        let fine_only = build_pyramid(grid.clone(), 1).unwrap();
        let cfg = FusionConfig {
            iterations_per_level: 10,
            ..cfg
        };
        let report = match_scan(&robot_only(start), &scan, &fine_only, &no_ranges, &cfg);
        let got = report.refined.robot_pose;
        assert!((got.position() - best.1.position()).norm() <= 0.02, "{got:?} vs {:?}", best.1);
        assert!((got.theta - best.1.theta).abs().to_degrees() <= 0.5);
    }

    #[test]
    fn coarse_to_fine_recovers_injected_error() {
        let (pyr, scan, truth) = room_scene();
        let ms = state(
            Pose2::new(truth.x - 0.14, truth.y + 0.14, truth.theta - 3f64.to_radians()),
            &[(1, Vec2::new(0.0, 0.0)), (2, Vec2::new(1.0, 0.0))],
            (1, 2),
        );
        let report = match_scan(&ms, &scan, &pyr, &RangeSet::new(0.0, vec![]), &FusionConfig::default());
        let got = report.refined.robot_pose;
        assert!((got.position() - truth.position()).norm() <= 0.05, "{got:?}");
        assert!((got.theta - truth.theta).abs().to_degrees() <= 1.0);
        assert!(report.final_objective <= report.initial_objective);
    }

    #[test]
    fn aligned_inputs_give_negligible_offset() {
        let ms = three_beacons(Pose2::new(1.0, 1.0, 0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scan = random_scan(&mut rng, 100);
        let pyr = build_pyramid(solid_grid(), 1).unwrap();
        let report = match_scan(&ms, &scan, &pyr, &exact_ranges(&ms), &FusionConfig::default());
        assert!(report.offset.norm() < 1e-6);
    }

    #[test]
    fn finest_objective_never_increases() {
        let (pyr, scan, truth) = room_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let ms = three_beacons(Pose2::new(
                truth.x + rng.random_range(-0.2..0.2),
                truth.y + rng.random_range(-0.2..0.2),
                truth.theta + rng.random_range(-0.1..0.1),
            ));
            let mut ranges = exact_ranges(&ms);
            for m in &mut ranges.measurements {
                m.range += rng.random_range(-0.2..0.2);
            }
            let fine = build_pyramid(pyr.finest().clone(), 1).unwrap();
            let report = match_scan(&ms, &scan, &fine, &ranges, &FusionConfig::default());
            assert!(report.final_objective <= report.initial_objective);
        }
    }

    fn belief(v0: Vec2) -> Belief {
        let s = StateVector::new(
            vec![Vec2::new(1.0, 2.0), Vec2::zeros(), Vec2::new(4.0, 0.0)],
            vec![v0, Vec2::zeros(), Vec2::zeros()],
            vec![1, 2],
        )
        .unwrap();
        Belief::new(s, DMatrix::identity(12, 12), 0.0).unwrap()
    }

    #[test]
    fn zero_correction_is_identity() {
        let b = belief(Vec2::new(0.8, 0.1));
        assert_eq!(apply_correction(&b, &MatchOffset::zero(3)).unwrap(), b);
    }

    #[test]
    fn correction_moves_only_target_beacon() {
        let b = belief(Vec2::new(0.8, 0.1));
        let mut off = MatchOffset::zero(3);
        off.d_positions[2] = Vec2::new(0.1, -0.05);
        let c = apply_correction(&b, &off).unwrap();
        assert_eq!(c.state.positions[0], b.state.positions[0]);
        assert_eq!(c.state.positions[1], b.state.positions[1]);
        assert_eq!(c.state.positions[2], Vec2::new(4.1, -0.05));
        assert_eq!(c.covariance, b.covariance);
    }

    #[test]
    fn correction_dimension_mismatch() {
        assert!(apply_correction(&belief(Vec2::zeros()), &MatchOffset::zero(2)).is_err());
    }

    proptest! {
        #[test]
        fn correction_preserves_speed(vx in -3.0..3.0f64, vy in -3.0..3.0f64, dth in -3.2..3.2f64) {
            let b = belief(Vec2::new(vx, vy));
            let mut off = MatchOffset::zero(3);
            off.d_theta = dth;
            let c = apply_correction(&b, &off).unwrap();
            prop_assert!((c.state.velocities[0].norm() - b.state.velocities[0].norm()).abs() < 1e-12);
        }
    }
}
