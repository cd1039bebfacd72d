use super::grid::OccupancyGrid;
use super::scan::Scan;
use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::par::{self, Execution};

/// Occupancy grids over one extent at doubling cell sizes. Level 0 is finest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPyramid {
    levels: Vec<OccupancyGrid>,
}

impl GridPyramid {
    pub fn levels(&self) -> &[OccupancyGrid] {
        &self.levels
    }

    pub fn level(&self, k: usize) -> &OccupancyGrid {
        &self.levels[k]
    }

    pub fn finest(&self) -> &OccupancyGrid {
        &self.levels[0]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Every level carried into the frame that `frame` maps to.
    pub fn resampled(&self, frame: &crate::geometry::GaugeFrame) -> GridPyramid {
        GridPyramid {
            levels: self.levels.iter().map(|g| g.resampled(frame)).collect(),
        }
    }

    /// Integrates the scan into every level independently.
    pub fn integrate_scan(&mut self, pose: &Pose2, scan: &Scan) {
        self.integrate_scan_with(Execution::default(), pose, scan);
    }

    pub fn integrate_scan_with(&mut self, exec: Execution, pose: &Pose2, scan: &Scan) {
        par::for_each_mut(exec, &mut self.levels, |g| g.integrate_scan(pose, scan));
    }
}

/// Builds `levels` empty grids whose cell size doubles per level, all covering
/// the finest grid's extent. Existing content of `finest` is kept at level 0.
pub fn build_pyramid(finest: OccupancyGrid, levels: usize) -> Result<GridPyramid> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let extent = finest.extent();
    let mut out = Vec::with_capacity(levels);
    for k in 1..levels {
        let res = finest.resolution() * (1u64 << k) as f64;
        let w = (extent.x / res - 1e-9).ceil() as usize;
        let h = (extent.y / res - 1e-9).ceil() as usize;
        out.push(OccupancyGrid::new(res, finest.origin(), w.max(2), h.max(2), *finest.params())?);
    }
    out.insert(0, finest);
    Ok(GridPyramid { levels: out })
}
