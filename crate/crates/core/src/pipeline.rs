//! One SLAM session: bootstrap, EKF, beacon lifecycle, matching, correction
//! and map integration, step by step.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ekf::{
    add_beacon, bootstrap_geometry, gauge_fix, predict, remove_beacon, update, Belief, BeaconPrior, MotionModel,
    RangeSet, SensorNoise,
};
use crate::error::{Error, Result};
use crate::geometry::{heading_from_velocity, normalize_angle, NodeId, Pose2, Vec2, ROBOT_ID};
use crate::map::{build_pyramid, GridPyramid, LogOddsParams, OccupancyGrid, Scan, FINEST_RESOLUTION, PYRAMID_LEVELS};
use crate::matcher::{apply_correction, match_scan, FusionConfig, MatchState};
use crate::par::Execution;

/// Which parts of the fusion run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Match and feed the result back into the filter.
    #[default]
    Full,
    /// No matching; the map is built at the filter pose.
    NoMatch,
    /// Match for the map only; the filter is never corrected.
    NoCorrection,
    /// Near-zero range weight with correction. The matcher starts from its own
    /// previous pose, like a stand-alone scan matcher.
    LidarOnlyMatch,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoMatch, Ablation::NoCorrection, Ablation::LidarOnlyMatch];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMatch => "no_match",
            Ablation::NoCorrection => "no_correction",
            Ablation::LidarOnlyMatch => "lidar_only_match",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

/// Range weight used by [`Ablation::LidarOnlyMatch`].
pub const LIDAR_ONLY_GAMMA: f64 = 1e-6;

/// Map layout of a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub resolution: f64,
    pub levels: usize,
    /// Space kept around the bootstrap constellation, meters.
    pub margin: f64,
    pub log_odds: LogOddsParams,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            resolution: FINEST_RESOLUTION,
            levels: PYRAMID_LEVELS,
            margin: 10.0,
            log_odds: LogOddsParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub motion: MotionModel,
    pub noise: SensorNoise,
    pub fusion: FusionConfig,
    pub ablation: Ablation,
    pub beacon_prior: BeaconPrior,
    pub map: MapConfig,
    /// Steps after bootstrap before the first scan is used.
    pub warmup_steps: usize,
    /// Mean speed over the heading window that counts as moving, m/s.
    pub start_speed: f64,
    /// Steps of steady motion whose displacement gives the first heading.
    pub heading_window: usize,
    /// Largest rms spread across the direction of travel, per meter of
    /// displacement, for that run to count as straight.
    pub straightness: f64,
    /// Largest heading difference between the two halves of that run, rad.
    pub max_bend: f64,
    /// Steps without any range before a beacon is dropped.
    pub drop_after: usize,
    /// Beacons that must share line of sight with the robot and each other
    /// before the first layout is built.
    pub min_bootstrap_beacons: usize,
    /// Steps the bootstrap may keep failing before the run is abandoned.
    pub bootstrap_patience: usize,
    /// Matches whose endpoints read a lower mean occupancy are discarded.
    pub min_hit_occupancy: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            motion: MotionModel::default(),
            noise: SensorNoise::default(),
            fusion: FusionConfig::default(),
            ablation: Ablation::Full,
            beacon_prior: BeaconPrior::default(),
            map: MapConfig::default(),
            warmup_steps: 20,
            start_speed: 0.5,
            heading_window: 80,
            straightness: 0.02,
            max_bend: 0.05,
            drop_after: 10,
            min_bootstrap_beacons: 3,
            bootstrap_patience: 100,
            min_hit_occupancy: 0.6,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.min_bootstrap_beacons < 2 {
            return Err(Error::Config("bootstrap needs at least two beacons".into()));
        }
        if self.map.levels == 0 || !(self.map.resolution > 0.0) {
            return Err(Error::Config("map needs a positive resolution and at least one level".into()));
        }
        Ok(())
    }
}

/// Wall-clock cost of each stage of one step, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub predict: f64,
    pub update: f64,
    pub gauge: f64,
    pub lifecycle: f64,
    pub matching: f64,
    pub correct: f64,
    pub integrate: f64,
    pub total: f64,
}

/// Session output after one step, in the anchor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub robot: Pose2,
    pub robot_velocity: Vec2,
    pub beacons: Vec<(NodeId, Vec2)>,
    pub anchors: (NodeId, NodeId),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub step: usize,
    pub estimate: Option<Estimate>,
    pub matched: bool,
    pub integrated: bool,
    /// A match was discarded by the occupancy gate.
    pub gated: bool,
    pub singular_update: bool,
    pub joined: Vec<NodeId>,
    pub dropped: Vec<NodeId>,
    pub timing: StepTiming,
}

/// State carried between steps.
#[derive(Debug, Clone)]
pub struct SlamSession {
    cfg: SessionConfig,
    belief: Option<Belief>,
    anchors: Option<(NodeId, NodeId)>,
    joined_at: BTreeMap<NodeId, usize>,
    missing: BTreeMap<NodeId, usize>,
    pyramid: Option<GridPyramid>,
    heading: Option<f64>,
    /// Pose of the last integrated scan.
    scan_pose: Option<Pose2>,
    /// Recent robot positions while waiting to start mapping.
    track: VecDeque<Vec2>,
    mapping: bool,
    bootstrap_step: Option<usize>,
    failed_bootstraps: usize,
    step: usize,
}

impl SlamSession {
    pub fn new(cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            belief: None,
            anchors: None,
            joined_at: BTreeMap::new(),
            missing: BTreeMap::new(),
            pyramid: None,
            heading: None,
            scan_pose: None,
            track: VecDeque::new(),
            mapping: false,
            bootstrap_step: None,
            failed_bootstraps: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn belief(&self) -> Option<&Belief> {
        self.belief.as_ref()
    }

    pub fn anchors(&self) -> Option<(NodeId, NodeId)> {
        self.anchors
    }

    pub fn pyramid(&self) -> Option<&GridPyramid> {
        self.pyramid.as_ref()
    }

    pub fn execution(&self) -> Execution {
        self.cfg.fusion.execution
    }

    /// Advances the session by one step of sensor data.
    pub fn step(&mut self, ranges: &RangeSet, scan: &Scan) -> Result<StepReport> {
        let t_start = Instant::now();
        let mut report = StepReport {
            step: self.step,
            ..StepReport::default()
        };
        self.step += 1;

        let belief = match self.belief.take() {
            None => {
                self.try_bootstrap(ranges, report.step)?;
                report.estimate = self.estimate();
                report.timing.total = ms(t_start);
                return Ok(report);
            }
            Some(b) => b,
        };
        let anchors = self.anchors.expect("anchors set with belief");

        let t = Instant::now();
        let predicted = predict(&belief, &self.cfg.motion);
        report.timing.predict = ms(t);

        let t = Instant::now();
        let updated = match update(&predicted, ranges, &self.cfg.noise) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("step {}: {e}; keeping the prediction", report.step);
                report.singular_update = true;
                predicted
            }
        };
        report.timing.update = ms(t);

        let t = Instant::now();
        // the per-step fix only undoes the update's drift of the anchors, so
        // quantities already in the anchor frame stay as they are
        let (fixed, _) = gauge_fix(&updated, anchors.0, anchors.1)?;
        report.timing.gauge = ms(t);

        let t = Instant::now();
        let mut belief = self.lifecycle(fixed, ranges, &mut report)?;
        report.timing.lifecycle = ms(t);
        let anchors = self.anchors.expect("anchors survive lifecycle");

        let vel_angle = heading_from_velocity(&belief.state.velocities[0]).ok();
        if vel_angle.is_some() {
            self.heading = vel_angle;
        }
        if !self.mapping {
            self.observe_start(&belief, report.step);
        }

        if self.mapping {
            if let Some(heading) = self.heading {
                let ekf_pose = Pose2::from_parts(belief.state.positions[0], heading);
                let mut map_pose = ekf_pose;
                let have_map = self.pyramid.is_some();
                if self.pyramid.is_none() {
                    self.pyramid = Some(self.new_pyramid(&belief)?);
                }

                if have_map && self.cfg.ablation != Ablation::NoMatch {
                    let t = Instant::now();
                    let lidar_only = self.cfg.ablation == Ablation::LidarOnlyMatch;
                    let mut fusion = self.cfg.fusion;
                    if lidar_only {
                        fusion.gamma = LIDAR_ONLY_GAMMA;
                    }
                    let base = MatchState::from_belief(&belief, heading, anchors)?;
                    let mut starts = Vec::with_capacity(2);
                    match (lidar_only, self.scan_pose) {
                        (true, Some(p)) => {
                            let mut s = base.clone();
                            s.robot_pose = p;
                            starts.push(s);
                        }
                        (false, Some(p)) if normalize_angle(p.theta - heading).abs() > 1e-3 => {
                            // the previous matched heading is the better guess on
                            // straights, the velocity direction in turns
                            let mut s = base.clone();
                            s.robot_pose.theta = heading + normalize_angle(p.theta - heading);
                            starts.push(base.clone());
                            starts.push(s);
                        }
                        _ => starts.push(base.clone()),
                    }
                    let pyramid = self.pyramid.as_ref().unwrap();
                    let rep = starts
                        .iter()
                        .map(|s| match_scan(s, scan, pyramid, ranges, &fusion))
                        .min_by(|x, y| x.final_objective.total_cmp(&y.final_objective))
                        .unwrap();
                    report.timing.matching = ms(t);
                    report.matched = !rep.singular;

                    if rep.mean_hit_occupancy.is_some_and(|m| m < self.cfg.min_hit_occupancy) {
                        report.gated = true;
                        log::debug!(
                            "step {}: match discarded, mean endpoint occupancy {:.3?}",
                            report.step,
                            rep.mean_hit_occupancy
                        );
                    } else {
                        map_pose = rep.refined.robot_pose;
                        map_pose.theta = normalize_angle(map_pose.theta);
                        if self.cfg.ablation != Ablation::NoCorrection {
                            let t = Instant::now();
                            let offset = base.offset_to(&rep.refined);
                            belief = apply_correction(&belief, &offset)?;
                            report.timing.correct = ms(t);
                        }
                    }
                }

                if !report.gated {
                    let t = Instant::now();
                    let exec = self.execution();
                    self.pyramid.as_mut().unwrap().integrate_scan_with(exec, &map_pose, scan);
                    report.timing.integrate = ms(t);
                    report.integrated = true;
                    if self.cfg.ablation != Ablation::NoCorrection {
                        self.heading = Some(map_pose.theta);
                    }
                    self.scan_pose = Some(map_pose);
                }
            }
        }

        self.belief = Some(belief);
        report.estimate = self.estimate();
        report.timing.total = ms(t_start);
        Ok(report)
    }

    /// Tracks the robot until it has moved steadily along a straight line
    /// for `heading_window` steps, then takes the heading of that run and
    /// starts mapping.
    fn observe_start(&mut self, belief: &Belief, step: usize) {
        self.track.push_back(belief.state.positions[0]);
        if self.track.len() > self.cfg.heading_window {
            self.track.pop_front();
        }
        let since = step - self.bootstrap_step.unwrap_or(step);
        let n = self.track.len();
        if since < self.cfg.warmup_steps || n < self.cfg.heading_window.max(2) {
            return;
        }
        let span = (self.track[n - 1] - self.track[0]).norm();
        if span < self.cfg.start_speed * self.cfg.motion.delta * (n - 1) as f64 {
            return;
        }
        let track = self.track.make_contiguous();
        let Some(h) = straight_heading(track, self.cfg.straightness * span) else {
            return;
        };
        let (a, b) = track.split_at(n / 2);
        match (straight_heading(a, f64::INFINITY), straight_heading(b, f64::INFINITY)) {
            (Some(ha), Some(hb)) if normalize_angle(ha - hb).abs() <= self.cfg.max_bend => {
                self.heading = Some(h);
                self.mapping = true;
                log::info!("step {step}: mapping starts");
            }
            _ => {}
        }
    }

    fn estimate(&self) -> Option<Estimate> {
        let b = self.belief.as_ref()?;
        let v = b.state.velocities[0];
        Some(Estimate {
            robot: Pose2::from_parts(b.state.positions[0], self.heading.unwrap_or_else(|| v.y.atan2(v.x))),
            robot_velocity: v,
            beacons: b.state.beacon_ids.iter().copied().zip(b.state.positions[1..].iter().copied()).collect(),
            anchors: self.anchors?,
        })
    }

    fn new_pyramid(&self, belief: &Belief) -> Result<GridPyramid> {
        let mut lo = belief.state.positions[0];
        let mut hi = lo;
        for p in &belief.state.positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let m = Vec2::repeat(self.cfg.map.margin);
        let res = self.cfg.map.resolution;
        let coarsest = res * (1u64 << (self.cfg.map.levels - 1)) as f64;
        // snap so that every level tiles the same extent
        let lo = ((lo - m) / coarsest).map(f64::floor) * coarsest;
        let hi = ((hi + m) / coarsest).map(f64::ceil) * coarsest;
        let w = ((hi.x - lo.x) / res).round() as usize;
        let h = ((hi.y - lo.y) / res).round() as usize;
        build_pyramid(OccupancyGrid::new(res, lo, w, h, self.cfg.map.log_odds)?, self.cfg.map.levels)
    }

    /// Re-expresses everything kept in the anchor frame after the anchors change.
    fn follow_frame(&mut self, frame: &crate::geometry::GaugeFrame) {
        if let Some(h) = self.heading.as_mut() {
            *h = frame.apply_heading(*h);
        }
        for p in self.track.iter_mut() {
            *p = frame.apply_point(p);
        }
        if let Some(p) = self.scan_pose.as_mut() {
            *p = Pose2::from_parts(frame.apply_point(&p.position()), frame.apply_heading(p.theta));
        }
        if let Some(pyr) = self.pyramid.as_ref() {
            self.pyramid = Some(pyr.resampled(frame));
        }
    }

    fn try_bootstrap(&mut self, ranges: &RangeSet, step: usize) -> Result<()> {
        let min = self.cfg.min_bootstrap_beacons;
        let result = largest_los_clique(ranges).and_then(|(ids, table)| {
            if ids.len() < min + 1 {
                return Err(Error::DegenerateGeometry(format!(
                    "{} beacons in line of sight, need {min}",
                    ids.len() - 1
                )));
            }
            let state = bootstrap_geometry(&table, &ids)?;
            let d = state.dim();
            let n = state.n_nodes();
            let mut cov = DMatrix::zeros(d, d);
            let (sp, sv) = (self.cfg.beacon_prior.position_std, self.cfg.beacon_prior.velocity_std);
            for k in 0..2 * n {
                cov[(k, k)] = sp * sp;
                cov[(2 * n + k, 2 * n + k)] = sv * sv;
            }
            let anchors = (state.beacon_ids[0], state.beacon_ids[1]);
            Ok((Belief::new(state, cov, ranges.timestamp)?, anchors))
        });
        match result {
            Ok((belief, anchors)) => {
                for id in &belief.state.beacon_ids {
                    self.joined_at.insert(*id, step);
                }
                log::info!(
                    "step {step}: bootstrapped {} beacons, anchors {} and {}",
                    belief.state.n_beacons(),
                    anchors.0,
                    anchors.1
                );
                self.belief = Some(belief);
                self.anchors = Some(anchors);
                self.bootstrap_step = Some(step);
                Ok(())
            }
            Err(e) => {
                self.failed_bootstraps += 1;
                log::debug!("step {step}: bootstrap failed: {e}");
                if self.failed_bootstraps > self.cfg.bootstrap_patience {
                    Err(Error::Scenario(format!(
                        "no usable bootstrap geometry within {} steps ({e})",
                        self.cfg.bootstrap_patience
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Drops silent beacons, promotes a new anchor when needed and adds
    /// newcomers that have enough line-of-sight ranges.
    fn lifecycle(&mut self, mut belief: Belief, ranges: &RangeSet, report: &mut StepReport) -> Result<Belief> {
        let heard = ranges.node_ids();
        let present: Vec<NodeId> = belief.state.beacon_ids.clone();
        for id in &present {
            if heard.contains(id) {
                self.missing.remove(id);
            } else {
                *self.missing.entry(*id).or_insert(0) += 1;
            }
        }
        let silent: Vec<NodeId> = present
            .iter()
            .copied()
            .filter(|id| self.missing.get(id).copied().unwrap_or(0) >= self.cfg.drop_after)
            .collect();
        for id in silent {
            let mut anchors = self.anchors.unwrap();
            if id == anchors.0 || id == anchors.1 {
                let keep = if id == anchors.0 { anchors.1 } else { anchors.0 };
                let successor = belief
                    .state
                    .beacon_ids
                    .iter()
                    .copied()
                    .filter(|b| *b != id && *b != keep && !self.missing.contains_key(b))
                    .min_by_key(|b| (self.joined_at.get(b).copied().unwrap_or(usize::MAX), *b));
                let Some(successor) = successor else {
                    log::warn!("beacon {id} silent but no beacon can replace it as anchor");
                    continue;
                };
                anchors = if id == anchors.0 { (successor, keep) } else { (keep, successor) };
                let (refixed, frame) = gauge_fix(&belief, anchors.0, anchors.1)?;
                log::info!("anchor {id} lost; anchors now {} and {}", anchors.0, anchors.1);
                belief = refixed;
                self.anchors = Some(anchors);
                self.follow_frame(&frame);
            }
            belief = remove_beacon(&belief, id, self.anchors.unwrap())?;
            self.missing.remove(&id);
            self.joined_at.remove(&id);
            report.dropped.push(id);
        }

        for id in heard {
            if id == ROBOT_ID || belief.state.index_of(id).is_some() {
                continue;
            }
            let initial: Vec<_> = ranges.measurements.iter().filter(|m| m.involves(id)).copied().collect();
            match add_beacon(&belief, id, &initial, &self.cfg.beacon_prior) {
                Ok(b) => {
                    belief = b;
                    self.joined_at.insert(id, report.step);
                    report.joined.push(id);
                    log::info!("step {}: beacon {id} joined", report.step);
                }
                Err(e) => log::debug!("step {}: beacon {id} queued: {e}", report.step),
            }
        }
        Ok(belief)
    }
}

/// Direction of travel along a roughly straight run of positions: the
/// principal axis of the points, oriented from first to last. `None` if the
/// points spread more than `tolerance` meters (rms) across that axis.
pub fn straight_heading(track: &[Vec2], tolerance: f64) -> Option<f64> {
    if track.len() < 2 {
        return None;
    }
    let n = track.len() as f64;
    let mean = track.iter().sum::<Vec2>() / n;
    let mut cov = nalgebra::Matrix2::zeros();
    for p in track {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov / n);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    if eig.eigenvalues[minor].max(0.0).sqrt() > tolerance {
        return None;
    }
    let mut axis: Vec2 = eig.eigenvectors.column(major).into();
    if axis.dot(&(track[track.len() - 1] - track[0])) < 0.0 {
        axis = -axis;
    }
    (eig.eigenvalues[major] > 0.0).then(|| axis.y.atan2(axis.x))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// The largest set of nodes containing the robot and at least two beacons
/// whose pairwise ranges are all present and line-of-sight.
pub fn largest_los_clique(ranges: &RangeSet) -> Result<(Vec<NodeId>, DMatrix<f64>)> {
    let beacons: Vec<NodeId> = ranges.node_ids().into_iter().filter(|id| *id != ROBOT_ID).collect();
    if beacons.len() < 2 {
        return Err(Error::DegenerateGeometry(format!("{} beacons heard", beacons.len())));
    }
    if beacons.len() > 16 {
        return Err(Error::Config("bootstrap search supports at most 16 beacons".into()));
    }
    let los = |a: NodeId, b: NodeId| ranges.get(a, b).filter(|m| m.is_los()).map(|m| m.range);
    let mut best: Option<Vec<NodeId>> = None;
    for mask in 1u32..(1 << beacons.len()) {
        if mask.count_ones() < 2 {
            continue;
        }
        let mut ids = vec![ROBOT_ID];
        ids.extend((0..beacons.len()).filter(|k| mask & (1 << k) != 0).map(|k| beacons[k]));
        let complete = (0..ids.len()).all(|i| (i + 1..ids.len()).all(|j| los(ids[i], ids[j]).is_some()));
        // masks grow in lexicographic order of bits, so ties keep the lowest ids
        if complete && best.as_ref().is_none_or(|b| ids.len() > b.len()) {
            best = Some(ids);
        }
    }
    let ids = best.ok_or_else(|| Error::DegenerateGeometry("no complete line-of-sight subset".into()))?;
    let n = ids.len();
    let table = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { los(ids[i], ids[j]).unwrap() });
    Ok((ids, table))
}
