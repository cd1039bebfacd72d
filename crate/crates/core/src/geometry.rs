//! Planar primitives shared by the filter, the map and the matcher.

use std::f64::consts::PI;

use nalgebra::{DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A planar vector in meters (positions) or meters per second (velocities).
pub type Vec2 = Vector2<f64>;

/// Identifier of a UWB node. The robot is always [`ROBOT_ID`].
pub type NodeId = u32;

pub const ROBOT_ID: NodeId = 0;

/// Below this speed the velocity direction is not trusted as a heading.
pub const SPEED_EPSILON: f64 = 0.05;

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Robot pose in the map frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn from_parts(p: Vec2, theta: f64) -> Self {
        Self::new(p.x, p.y, theta)
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Maps a sensor-frame point into the frame the pose is expressed in.
pub fn rigid_transform(pose: &Pose2, point: &Vec2) -> Vec2 {
    rotation(pose.theta) * point + pose.position()
}

/// Euclidean distance between two nodes.
pub fn pairwise_range(a: &Vec2, b: &Vec2) -> f64 {
    (a - b).norm()
}

/// Four-quadrant direction of a velocity vector.
pub fn heading_from_velocity(v: &Vec2) -> Result<f64> {
    let speed = v.norm();
    if speed <= SPEED_EPSILON {
        return Err(Error::StationaryRobot { speed });
    }
    Ok(normalize_angle(v.y.atan2(v.x)))
}

/// Positions and velocities of the robot (index 0) and the live beacons.
///
/// The flattened layout is `[p_0, .., p_N, v_0, .., v_N]`, two scalars per
/// node and block, which matches the block structure of the motion model.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub beacon_ids: Vec<NodeId>,
}

impl StateVector {
    pub fn new(positions: Vec<Vec2>, velocities: Vec<Vec2>, beacon_ids: Vec<NodeId>) -> Result<Self> {
        if positions.len() != velocities.len() || positions.len() != beacon_ids.len() + 1 {
            return Err(Error::Config(format!(
                "state has {} positions, {} velocities and {} beacon ids",
                positions.len(),
                velocities.len(),
                beacon_ids.len()
            )));
        }
        let mut sorted = beacon_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.first() == Some(&ROBOT_ID) {
            return Err(Error::Config("beacon ids must be unique and non-zero".into()));
        }
        Ok(Self {
            positions,
            velocities,
            beacon_ids,
        })
    }

    pub fn n_beacons(&self) -> usize {
        self.beacon_ids.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn dim(&self) -> usize {
        4 * self.n_nodes()
    }

    /// Node index of `id` (0 for the robot).
    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        if id == ROBOT_ID {
            return Some(0);
        }
        self.beacon_ids.iter().position(|&b| b == id).map(|k| k + 1)
    }

    pub fn id_at(&self, index: usize) -> NodeId {
        if index == 0 {
            ROBOT_ID
        } else {
            self.beacon_ids[index - 1]
        }
    }

    pub fn position_of(&self, id: NodeId) -> Option<Vec2> {
        self.index_of(id).map(|k| self.positions[k])
    }

    /// Flat index of the x position of node `k`.
    pub fn pos_index(&self, k: usize) -> usize {
        2 * k
    }

    /// Flat index of the x velocity of node `k`.
    pub fn vel_index(&self, k: usize) -> usize {
        2 * self.n_nodes() + 2 * k
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let n = self.n_nodes();
        let mut x = DVector::zeros(4 * n);
        for k in 0..n {
            x[2 * k] = self.positions[k].x;
            x[2 * k + 1] = self.positions[k].y;
            x[2 * n + 2 * k] = self.velocities[k].x;
            x[2 * n + 2 * k + 1] = self.velocities[k].y;
        }
        x
    }

    pub fn set_flat(&mut self, x: &DVector<f64>) {
        let n = self.n_nodes();
        assert_eq!(x.len(), 4 * n, "flat state dimension mismatch");
        for k in 0..n {
            self.positions[k] = Vec2::new(x[2 * k], x[2 * k + 1]);
            self.velocities[k] = Vec2::new(x[2 * n + 2 * k], x[2 * n + 2 * k + 1]);
        }
    }
}

/// A planar similarity without scale: optional mirror about the x axis,
/// then rotation, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaugeFrame {
    pub rotation: f64,
    pub translation: Vec2,
    pub anchor_a: NodeId,
    pub anchor_b: NodeId,
    pub reflection: bool,
}

impl GaugeFrame {
    /// The frame that puts `pa` at the origin and `pb` on the positive x axis.
    pub fn from_anchors(anchor_a: NodeId, anchor_b: NodeId, pa: Vec2, pb: Vec2) -> Result<Self> {
        if anchor_a == anchor_b {
            return Err(Error::AnchorsCoincident(anchor_a, anchor_b));
        }
        let d = pb - pa;
        if d.norm() <= 1e-6 {
            return Err(Error::AnchorsCoincident(anchor_a, anchor_b));
        }
        let rotation = -d.y.atan2(d.x);
        let translation = -(self::rotation(rotation) * pa);
        Ok(Self {
            rotation,
            translation,
            anchor_a,
            anchor_b,
            reflection: false,
        })
    }

    pub fn linear(&self) -> Matrix2<f64> {
        let r = rotation(self.rotation);
        if self.reflection {
            r * Matrix2::new(1.0, 0.0, 0.0, -1.0)
        } else {
            r
        }
    }

    pub fn apply_point(&self, p: &Vec2) -> Vec2 {
        self.linear() * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec2) -> Vec2 {
        self.linear() * v
    }

    /// Maps a point of the target frame back to the source frame.
    pub fn invert_point(&self, p: &Vec2) -> Vec2 {
        self.linear().transpose() * (p - self.translation)
    }

    /// Heading in the target frame of a heading given in the source frame.
    pub fn apply_heading(&self, theta: f64) -> f64 {
        let v = self.apply_vector(&Vec2::new(theta.cos(), theta.sin()));
        v.y.atan2(v.x)
    }
}
