//! Occupancy grids, their pyramid and LiDAR scans.

mod grid;
mod pgm;
mod pyramid;
mod scan;

pub use grid::{occupancy_at, occupancy_gradient, probability, LogOddsParams, OccupancyGrid, OccupancySample};
pub use pgm::{
    decode_pgm, encode_pgm, map_header, pgm_value, write_map, Pgm, PGM_FREE, PGM_OCCUPIED, PGM_UNKNOWN,
    UNKNOWN_BAND,
};
pub use pyramid::{build_pyramid, GridPyramid};
pub use scan::{scan_endpoints, Scan};

/// Default finest cell size in meters.
pub const FINEST_RESOLUTION: f64 = 0.05;
/// Default pyramid depth.
pub const PYRAMID_LEVELS: usize = 3;
