use serde::{Deserialize, Serialize};

use super::scan::{scan_endpoints, Scan};
use crate::error::{Error, Result};
use crate::geometry::{rigid_transform, GaugeFrame, Pose2, Vec2};

/// Log-odds increments and clamps of the cell update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogOddsParams {
    pub l_occ: f64,
    pub l_free: f64,
    pub l_min: f64,
    pub l_max: f64,
}

impl Default for LogOddsParams {
    fn default() -> Self {
        Self {
            l_occ: 0.85,
            l_free: -0.4,
            l_min: -4.0,
            l_max: 4.0,
        }
    }
}

pub fn probability(log_odds: f64) -> f64 {
    1.0 / (1.0 + (-log_odds).exp())
}

/// Occupancy value and gradient at a continuous map point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancySample {
    pub value: f64,
    pub gradient: Vec2,
}

impl OccupancySample {
    pub const UNKNOWN: OccupancySample = OccupancySample {
        value: 0.5,
        gradient: Vec2::new(0.0, 0.0),
    };
}

/// Square-cell occupancy grid backed by log-odds.
///
/// Cell `(i, j)` covers `[origin + (i, j) * resolution, origin + (i + 1, j + 1) * resolution)`.
/// Interpolation treats the cell centres as lattice points.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    resolution: f64,
    origin: Vec2,
    width: usize,
    height: usize,
    log_odds: Vec<f64>,
    prob: Vec<f64>,
    stamp: Vec<u32>,
    scan_counter: u32,
    params: LogOddsParams,
}

impl OccupancyGrid {
    pub fn new(resolution: f64, origin: Vec2, width: usize, height: usize, params: LogOddsParams) -> Result<Self> {
        if !(resolution > 0.0) || width < 2 || height < 2 {
            return Err(Error::Config(format!(
                "grid needs positive resolution and at least 2x2 cells (got {resolution}, {width}x{height})"
            )));
        }
        let n = width * height;
        Ok(Self {
            resolution,
            origin,
            width,
            height,
            log_odds: vec![0.0; n],
            prob: vec![0.5; n],
            stamp: vec![0; n],
            scan_counter: 0,
            params,
        })
    }

    /// A grid covering the axis-aligned box `[min, max]`.
    pub fn covering(min: Vec2, max: Vec2, resolution: f64, params: LogOddsParams) -> Result<Self> {
        let w = ((max.x - min.x) / resolution).ceil() as usize;
        let h = ((max.y - min.y) / resolution).ceil() as usize;
        Self::new(resolution, min, w, h, params)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn params(&self) -> &LogOddsParams {
        &self.params
    }

    /// World-space size of the covered area.
    pub fn extent(&self) -> Vec2 {
        Vec2::new(self.width as f64, self.height as f64) * self.resolution
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn log_odds(&self, i: usize, j: usize) -> f64 {
        self.log_odds[self.idx(i, j)]
    }

    pub fn cell_probability(&self, i: usize, j: usize) -> f64 {
        self.prob[self.idx(i, j)]
    }

    pub fn set_log_odds(&mut self, i: usize, j: usize, l: f64) {
        let k = self.idx(i, j);
        let l = l.clamp(self.params.l_min, self.params.l_max);
        self.log_odds[k] = l;
        self.prob[k] = probability(l);
    }

    /// Sets a cell's probability without clamping. Test scenes only.
    #[doc(hidden)]
    pub fn set_probability_unclamped(&mut self, i: usize, j: usize, p: f64) {
        let k = self.idx(i, j);
        self.prob[k] = p;
        self.log_odds[k] = (p / (1.0 - p)).ln();
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_of(&self, p: &Vec2) -> Option<(usize, usize)> {
        let (i, j) = self.cell_coords(p);
        self.in_bounds(i, j).then_some((i as usize, j as usize))
    }

    fn cell_coords(&self, p: &Vec2) -> (i64, i64) {
        let u = (p.x - self.origin.x) / self.resolution;
        let v = (p.y - self.origin.y) / self.resolution;
        (u.floor() as i64, v.floor() as i64)
    }

    fn in_bounds(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new(i as f64 + 0.5, j as f64 + 0.5) * self.resolution
    }

    /// Bilinear occupancy value and its analytic gradient.
    #[inline]
    pub fn sample(&self, p: &Vec2) -> Result<OccupancySample> {
        let u = (p.x - self.origin.x) / self.resolution - 0.5;
        let v = (p.y - self.origin.y) / self.resolution - 0.5;
        if !(u >= 0.0 && v >= 0.0) {
            return Err(Error::OutOfMap);
        }
        let (i0, j0) = (u.floor(), v.floor());
        let (fx, fy) = (u - i0, v - j0);
        let (i0, j0) = (i0 as usize, j0 as usize);
        if i0 + 1 >= self.width || j0 + 1 >= self.height {
            return Err(Error::OutOfMap);
        }
        let k = j0 * self.width + i0;
        let g00 = self.prob[k];
        let g10 = self.prob[k + 1];
        let g01 = self.prob[k + self.width];
        let g11 = self.prob[k + self.width + 1];
        let value = fy * (fx * g11 + (1.0 - fx) * g01) + (1.0 - fy) * (fx * g10 + (1.0 - fx) * g00);
        let inv = 1.0 / self.resolution;
        let gradient = Vec2::new(
            inv * (fy * (g11 - g01) + (1.0 - fy) * (g10 - g00)),
            inv * (fx * (g11 - g10) + (1.0 - fx) * (g01 - g00)),
        );
        Ok(OccupancySample { value, gradient })
    }

    /// Like [`sample`](Self::sample), but points outside the interior read as unknown.
    #[inline]
    pub fn sample_or_unknown(&self, p: &Vec2) -> OccupancySample {
        self.sample(p).unwrap_or(OccupancySample::UNKNOWN)
    }

    /// Folds one scan taken from `robot_pose` into the grid.
    ///
    /// Each touched cell changes at most once per scan, and a cell hit by any
    /// beam endpoint is marked occupied even if another beam passes through it.
    pub fn integrate_scan(&mut self, robot_pose: &Pose2, scan: &Scan) {
        if !(robot_pose.x.is_finite() && robot_pose.y.is_finite() && robot_pose.theta.is_finite()) {
            log::warn!("skipping scan integration at non-finite pose");
            return;
        }
        self.scan_counter += 1;
        let occupied_mark = 2 * self.scan_counter;
        let free_mark = occupied_mark + 1;

        let endpoints: Vec<(i64, i64)> = scan_endpoints(scan)
            .iter()
            .map(|e| self.cell_coords(&rigid_transform(robot_pose, e)))
            .collect();
        let l = self.params;

        for &(i, j) in &endpoints {
            if self.in_bounds(i, j) {
                let k = self.idx(i as usize, j as usize);
                if self.stamp[k] < occupied_mark {
                    self.stamp[k] = occupied_mark;
                    self.bump(k, l.l_occ);
                }
            }
        }

        let start = self.cell_coords(&robot_pose.position());
        for &end in &endpoints {
            let mut was_inside = false;
            for (i, j) in LineCells::new(start, end) {
                if (i, j) == end {
                    break;
                }
                if !self.in_bounds(i, j) {
                    if was_inside {
                        break;
                    }
                    continue;
                }
                was_inside = true;
                let k = self.idx(i as usize, j as usize);
                if self.stamp[k] < occupied_mark {
                    self.stamp[k] = free_mark;
                    self.bump(k, l.l_free);
                }
            }
        }
    }

    fn bump(&mut self, k: usize, delta: f64) {
        let l = (self.log_odds[k] + delta).clamp(self.params.l_min, self.params.l_max);
        self.log_odds[k] = l;
        self.prob[k] = probability(l);
    }

    /// Same geometry, content carried over from a frame that `frame` maps into
    /// this one (nearest cell; cells with no source stay unknown).
    pub fn resampled(&self, frame: &GaugeFrame) -> OccupancyGrid {
        let mut out = OccupancyGrid::new(self.resolution, self.origin, self.width, self.height, self.params)
            .expect("geometry already validated");
        for j in 0..self.height {
            for i in 0..self.width {
                let src = frame.invert_point(&self.cell_center(i, j));
                if let Some((si, sj)) = self.cell_of(&src) {
                    let k = out.idx(i, j);
                    let s = self.idx(si, sj);
                    out.log_odds[k] = self.log_odds[s];
                    out.prob[k] = self.prob[s];
                }
            }
        }
        out
    }

    /// Number of cells whose log-odds are non-zero.
    pub fn known_cells(&self) -> usize {
        self.log_odds.iter().filter(|l| **l != 0.0).count()
    }
}

/// Continuous occupancy at `p`.
pub fn occupancy_at(grid: &OccupancyGrid, p: &Vec2) -> Result<f64> {
    grid.sample(p).map(|s| s.value)
}

/// Spatial gradient of [`occupancy_at`], in 1/m.
pub fn occupancy_gradient(grid: &OccupancyGrid, p: &Vec2) -> Result<Vec2> {
    grid.sample(p).map(|s| s.gradient)
}

/// Grid cells on the discrete line between two cells, both ends included.
struct LineCells {
    x: i64,
    y: i64,
    end: (i64, i64),
    dx: i64,
    dy: i64,
    sx: i64,
    sy: i64,
    err: i64,
    done: bool,
}

impl LineCells {
    fn new(start: (i64, i64), end: (i64, i64)) -> Self {
        let dx = (end.0 - start.0).abs();
        let dy = -(end.1 - start.1).abs();
        Self {
            x: start.0,
            y: start.1,
            end,
            dx,
            dy,
            sx: if start.0 < end.0 { 1 } else { -1 },
            sy: if start.1 < end.1 { 1 } else { -1 },
            err: dx + dy,
            done: false,
        }
    }
}

impl Iterator for LineCells {
    type Item = (i64, i64);

    fn next(&mut self) -> Option<(i64, i64)> {
        if self.done {
            return None;
        }
        let out = (self.x, self.y);
        if out == self.end {
            self.done = true;
            return Some(out);
        }
        let e2 = 2 * self.err;
        if e2 >= self.dy {
            self.err += self.dy;
            self.x += self.sx;
        }
        if e2 <= self.dx {
            self.err += self.dx;
            self.y += self.sy;
        }
        Some(out)
    }
}
