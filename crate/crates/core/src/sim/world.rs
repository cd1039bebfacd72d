use serde::{Deserialize, Serialize};

use super::SensorSpec;
use crate::error::{Error, Result};
use crate::geometry::{Pose2, Vec2};
use crate::map::Scan;
use crate::par::{self, Execution};

/// Wall segment between two points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }
}

/// Axis-aligned bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: Vec2,
    pub max: Vec2,
}

impl Extent {
    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

/// Planar world made of wall segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub segments: Vec<Segment>,
    pub extent: Extent,
}

impl World {
    pub fn new(segments: Vec<Segment>, extent: Extent) -> Result<Self> {
        for s in &segments {
            let finite = s.a.iter().chain(s.b.iter()).all(|v| v.is_finite());
            if !finite || (s.b - s.a).norm() <= 0.0 {
                return Err(Error::Config(format!("bad wall segment {:?} -> {:?}", s.a, s.b)));
            }
        }
        if !(extent.max.x > extent.min.x && extent.max.y > extent.min.y) {
            return Err(Error::Config("world extent is empty".into()));
        }
        Ok(Self { segments, extent })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "workshop" => Ok(Self::workshop()),
            "corridor" => Ok(Self::corridor()),
            "square_room" => Ok(Self::square_room(6.0)),
            _ => Err(Error::Config(format!("unknown builtin world '{name}'"))),
        }
    }

    /// 12 x 19 m hall with machines, shelving and a pillar.
    pub fn workshop() -> Self {
        let mut b = Builder::default();
        b.rect(0.0, 0.0, 12.0, 19.0);
        b.rect(5.2, 4.0, 6.8, 5.2);
        b.rect(3.0, 8.5, 3.8, 10.0);
        b.rect(8.3, 8.0, 9.0, 9.5);
        b.rect(6.0, 10.0, 6.4, 10.4);
        b.rect(5.3, 13.0, 6.7, 14.5);
        b.rect(0.0, 6.0, 0.8, 9.0);
        b.rect(11.2, 10.0, 12.0, 12.5);
        b.rect(3.0, 0.0, 4.2, 0.7);
        b.seg(5.0, 19.0, 5.0, 17.6);
        b.seg(8.0, 19.0, 8.0, 18.2);
        b.seg(12.0, 4.0, 11.3, 4.0);
        b.build(Extent {
            min: Vec2::new(0.0, 0.0),
            max: Vec2::new(12.0, 19.0),
        })
    }

    /// Straight 2 m wide corridor whose walls run far beyond LiDAR range in
    /// both directions; the robot covers 22.7 m between x = 0 and x = 22.7.
    pub fn corridor() -> Self {
        let mut b = Builder::default();
        b.seg(-40.0, -1.0, 62.7, -1.0);
        b.seg(-40.0, 1.0, 62.7, 1.0);
        b.build(Extent {
            min: Vec2::new(-40.0, -1.0),
            max: Vec2::new(62.7, 1.0),
        })
    }

    /// Empty square room of side `side` centred on the origin.
    pub fn square_room(side: f64) -> Self {
        let h = side / 2.0;
        let mut b = Builder::default();
        b.rect(-h, -h, h, h);
        b.build(Extent {
            min: Vec2::new(-h, -h),
            max: Vec2::new(h, h),
        })
    }

    /// Distance along the ray to the nearest wall, if any.
    pub fn ray_hit(&self, origin: &Vec2, dir: &Vec2) -> Option<f64> {
        self.segments
            .iter()
            .filter_map(|s| ray_segment(origin, dir, s))
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
    }

    /// True when the straight line between `a` and `b` touches no wall.
    pub fn line_of_sight(&self, a: &Vec2, b: &Vec2) -> bool {
        !self.segments.iter().any(|s| segments_intersect(a, b, &s.a, &s.b))
    }
}

#[derive(Default)]
struct Builder {
    segments: Vec<Segment>,
}

impl Builder {
    fn seg(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        self.segments.push(Segment::new(Vec2::new(x0, y0), Vec2::new(x1, y1)));
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        self.seg(x0, y0, x1, y0);
        self.seg(x1, y0, x1, y1);
        self.seg(x1, y1, x0, y1);
        self.seg(x0, y1, x0, y0);
    }

    fn build(self, extent: Extent) -> World {
        World {
            segments: self.segments,
            extent,
        }
    }
}

fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Parameter `t > 0` at which `origin + t dir` meets the segment.
pub fn ray_segment(origin: &Vec2, dir: &Vec2, s: &Segment) -> Option<f64> {
    let e = s.b - s.a;
    let den = cross(dir, &e);
    if den.abs() < 1e-15 {
        return None;
    }
    let w = s.a - origin;
    let t = cross(&w, &e) / den;
    let u = cross(&w, dir) / den;
    (t > 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

fn orient(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    cross(&(b - a), &(c - a))
}

fn on_segment(a: &Vec2, b: &Vec2, p: &Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, touching counts.
pub fn segments_intersect(p1: &Vec2, p2: &Vec2, q1: &Vec2, q2: &Vec2) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Beam bearings of the scanner, evenly spread over the field of view.
pub fn beam_bearings(spec: &SensorSpec) -> Vec<f64> {
    let n = spec.lidar_beams;
    if n == 1 {
        return vec![0.0];
    }
    let start = -spec.lidar_fov / 2.0;
    let step = spec.lidar_fov / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Noise-free scan; beams without a wall within range are invalid.
pub fn raycast_exact(world: &World, pose: &Pose2, spec: &SensorSpec, exec: Execution) -> Scan {
    let bearings = beam_bearings(spec);
    let origin = pose.position();
    let hits: Vec<Option<f64>> = par::map(exec, &bearings, |b| {
        let a = pose.theta + b;
        world.ray_hit(&origin, &Vec2::new(a.cos(), a.sin())).filter(|t| *t <= spec.lidar_max_range)
    });
    let valid: Vec<bool> = hits.iter().map(|h| h.is_some()).collect();
    let ranges = hits.iter().map(|h| h.unwrap_or(spec.lidar_max_range)).collect();
    Scan {
        bearings,
        ranges,
        max_range: spec.lidar_max_range,
        valid,
    }
}

/// Scan with Gaussian range noise drawn from `rng`, beam by beam in order.
pub fn raycast_with<R: rand::Rng>(world: &World, pose: &Pose2, spec: &SensorSpec, exec: Execution, rng: &mut R) -> Scan {
    let mut scan = raycast_exact(world, pose, spec, exec);
    if spec.lidar_noise_std > 0.0 {
        let normal = rand_distr::Normal::new(0.0, spec.lidar_noise_std).expect("validated noise std");
        for (r, ok) in scan.ranges.iter_mut().zip(&scan.valid) {
            if *ok {
                let noisy: f64 = *r + rand_distr::Distribution::sample(&normal, rng);
                *r = noisy.clamp(1e-3, spec.lidar_max_range);
            }
        }
    }
    scan
}

/// Scan at simulation step `step`, reproducible from the sensor seed.
pub fn raycast(world: &World, pose: &Pose2, spec: &SensorSpec, step: u64) -> Scan {
    let mut rng = super::step_rng(spec.rng_seed, step, super::Purpose::Lidar);
    raycast_with(world, pose, spec, Execution::default(), &mut rng)
}
