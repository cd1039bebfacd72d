use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NodeId, Pose2, Vec2};

/// Timed robot waypoints, linearly interpolated. The robot faces its
/// direction of travel and keeps its last heading while standing still.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryScript {
    pub waypoints: Vec<(f64, Vec2)>,
    /// Nominal cruise speed, m/s.
    pub speed: f64,
    headings: Vec<f64>,
}

impl TrajectoryScript {
    pub fn new(waypoints: Vec<(f64, Vec2)>, speed: f64) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::Config("trajectory needs at least one waypoint".into()));
        }
        if waypoints.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Config("waypoint times must be strictly increasing".into()));
        }
        // stationary segments keep the previous heading, or the first one before any motion
        let mut headings: Vec<f64> = waypoints
            .windows(2)
            .map(|w| {
                let d = w[1].1 - w[0].1;
                if d.norm() > 1e-9 {
                    d.y.atan2(d.x)
                } else {
                    f64::NAN
                }
            })
            .collect();
        let mut last = headings.iter().copied().find(|h| !h.is_nan()).unwrap_or(0.0);
        for h in headings.iter_mut() {
            if h.is_nan() {
                *h = last;
            } else {
                last = *h;
            }
        }
        Ok(Self {
            waypoints,
            speed,
            headings,
        })
    }

    /// Constant-speed traversal of `path` after `start_delay` seconds at rest.
    ///
    /// Corners are replaced by circular arcs of `corner_radius` (0 keeps them
    /// sharp). A closed path is traversed `loops` times and returns to its start.
    pub fn from_path(path: &[Vec2], closed: bool, loops: usize, speed: f64, corner_radius: f64, start_delay: f64) -> Result<Self> {
        if path.len() < 2 || !(speed > 0.0) {
            return Err(Error::Config("path needs two points and a positive speed".into()));
        }
        let mut pts: Vec<Vec2> = Vec::new();
        if closed {
            // start where the first corner's arc ends, on the first straight
            let groups = round_corners(path, true, corner_radius);
            let (first, rest) = groups.split_first().unwrap();
            let mut ring = vec![*first.last().unwrap()];
            ring.extend(rest.iter().flatten());
            ring.extend(&first[..first.len() - 1]);
            for _ in 0..loops.max(1) {
                pts.extend(ring.iter().copied());
            }
            pts.push(ring[0]);
        } else {
            pts = round_corners(path, false, corner_radius).concat();
        }
        pts.dedup_by(|a, b| (*a - *b).norm() < 1e-9);
        let mut t = 0.0;
        let mut waypoints = Vec::with_capacity(pts.len() + 1);
        if start_delay > 0.0 {
            waypoints.push((0.0, pts[0]));
            t = start_delay;
        }
        waypoints.push((t, pts[0]));
        for w in pts.windows(2) {
            t += (w[1] - w[0]).norm() / speed;
            waypoints.push((t, w[1]));
        }
        Self::new(waypoints, speed)
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.last().unwrap().0
    }

    fn segment(&self, t: f64) -> Option<usize> {
        if self.waypoints.len() < 2 || t < self.waypoints[0].0 || t >= self.duration() {
            return None;
        }
        Some(self.waypoints.partition_point(|w| w.0 <= t) - 1)
    }

    /// True pose and velocity at time `t`.
    pub fn sample(&self, t: f64) -> (Pose2, Vec2) {
        match self.segment(t) {
            Some(k) => {
                let (t0, p0) = self.waypoints[k];
                let (t1, p1) = self.waypoints[k + 1];
                let v = (p1 - p0) / (t1 - t0);
                let p = p0 + v * (t - t0);
                (Pose2::from_parts(p, self.headings[k]), v)
            }
            None => {
                let (p, h) = if t < self.waypoints[0].0 {
                    (self.waypoints[0].1, self.headings.first().copied().unwrap_or(0.0))
                } else {
                    (self.waypoints.last().unwrap().1, self.headings.last().copied().unwrap_or(0.0))
                };
                (Pose2::from_parts(p, h), Vec2::zeros())
            }
        }
    }
}

/// Points replacing each vertex of `path`: the vertex itself or an arc.
fn round_corners(path: &[Vec2], closed: bool, r: f64) -> Vec<Vec<Vec2>> {
    let n = path.len();
    if r <= 0.0 || n < 3 {
        return path.iter().map(|p| vec![*p]).collect();
    }
    let mut out = Vec::new();
    for k in 0..n {
        let interior = closed || (k > 0 && k + 1 < n);
        if !interior {
            out.push(vec![path[k]]);
            continue;
        }
        let prev = path[(k + n - 1) % n];
        let next = path[(k + 1) % n];
        let v = path[k];
        let (l1, l2) = ((v - prev).norm(), (next - v).norm());
        let d1 = (v - prev) / l1;
        let d2 = (next - v) / l2;
        let phi = (d1.x * d2.y - d1.y * d2.x).atan2(d1.dot(&d2));
        if phi.abs() < 1e-6 {
            out.push(vec![v]);
            continue;
        }
        let half_t = (phi.abs() / 2.0).tan();
        let rr = r.min(0.5 * l1.min(l2) / half_t);
        let tangent = rr * half_t;
        let p1 = v - d1 * tangent;
        let normal = Vec2::new(-d1.y, d1.x) * phi.signum();
        let centre = p1 + normal * rr;
        let a0 = (p1.y - centre.y).atan2(p1.x - centre.x);
        let pieces = ((phi.abs() / 5f64.to_radians()).ceil() as usize).max(1);
        out.push(
            (0..=pieces)
                .map(|s| {
                    let a = a0 + phi * s as f64 / pieces as f64;
                    centre + Vec2::new(a.cos(), a.sin()) * rr
                })
                .collect(),
        );
    }
    out
}

/// What happens to a beacon at an event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum BeaconAction {
    Place { x: f64, y: f64 },
    PowerOn,
    PowerOff,
    /// Timed waypoints `[t, x, y]`, absolute times.
    MoveAlong { waypoints: Vec<[f64; 3]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeaconEvent {
    pub time: f64,
    pub id: NodeId,
    #[serde(flatten)]
    pub action: BeaconAction,
}

/// Ground truth of one beacon at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconTruth {
    pub id: NodeId,
    pub position: Vec2,
    pub velocity: Vec2,
    pub powered: bool,
}

/// Scripted placement, power and motion of every beacon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeaconScript {
    pub events: Vec<BeaconEvent>,
}

impl BeaconScript {
    pub fn new(mut events: Vec<BeaconEvent>) -> Result<Self> {
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.id.cmp(&b.id)));
        for e in &events {
            if e.id == crate::geometry::ROBOT_ID {
                return Err(Error::Config("beacon id 0 is reserved for the robot".into()));
            }
            if let BeaconAction::MoveAlong { waypoints } = &e.action {
                if waypoints.is_empty() || waypoints.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                    return Err(Error::Config(format!("beacon {} move_along needs increasing times", e.id)));
                }
            }
        }
        Ok(Self { events })
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.events.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// State of every beacon that has been placed by time `t`, by id.
    pub fn state_at(&self, t: f64) -> Vec<BeaconTruth> {
        self.ids().into_iter().filter_map(|id| self.beacon_at(id, t)).collect()
    }

    fn beacon_at(&self, id: NodeId, t: f64) -> Option<BeaconTruth> {
        let mut pos: Option<Vec2> = None;
        let mut vel = Vec2::zeros();
        let mut powered = false;
        for e in self.events.iter().filter(|e| e.id == id && e.time <= t) {
            vel = Vec2::zeros();
            match &e.action {
                BeaconAction::Place { x, y } => pos = Some(Vec2::new(*x, *y)),
                BeaconAction::PowerOn => powered = true,
                BeaconAction::PowerOff => powered = false,
                BeaconAction::MoveAlong { waypoints } => {
                    let (p, v) = interpolate(waypoints, t);
                    pos = Some(p);
                    vel = v;
                }
            }
        }
        pos.map(|position| BeaconTruth {
            id,
            position,
            velocity: vel,
            powered,
        })
    }

    /// Events with time in `(t0, t1]`.
    pub fn events_between(&self, t0: f64, t1: f64) -> Vec<BeaconEvent> {
        self.events.iter().filter(|e| e.time > t0 && e.time <= t1).cloned().collect()
    }
}

fn interpolate(w: &[[f64; 3]], t: f64) -> (Vec2, Vec2) {
    let at = |k: usize| Vec2::new(w[k][1], w[k][2]);
    if t <= w[0][0] {
        return (at(0), Vec2::zeros());
    }
    let last = w.len() - 1;
    if t >= w[last][0] {
        return (at(last), Vec2::zeros());
    }
    let k = w.partition_point(|p| p[0] <= t) - 1;
    let v = (at(k + 1) - at(k)) / (w[k + 1][0] - w[k][0]);
    (at(k) + v * (t - w[k][0]), v)
}
