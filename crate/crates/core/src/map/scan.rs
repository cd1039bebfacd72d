use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// One LiDAR sweep in the sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub bearings: Vec<f64>,
    pub ranges: Vec<f64>,
    pub max_range: f64,
    pub valid: Vec<bool>,
}

impl Scan {
    pub fn new(bearings: Vec<f64>, ranges: Vec<f64>, max_range: f64, valid: Vec<bool>) -> Result<Self> {
        if bearings.len() != ranges.len() || bearings.len() != valid.len() {
            return Err(Error::Config("scan arrays differ in length".into()));
        }
        for (r, ok) in ranges.iter().zip(&valid) {
            if *ok && !(*r > 0.0 && *r <= max_range) {
                return Err(Error::Config(format!("valid beam with range {r} outside (0, {max_range}]")));
            }
        }
        Ok(Self {
            bearings,
            ranges,
            max_range,
            valid,
        })
    }

    pub fn empty() -> Self {
        Self {
            bearings: Vec::new(),
            ranges: Vec::new(),
            max_range: 1.0,
            valid: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.bearings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bearings.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Beam endpoints of the valid beams, in the sensor frame.
pub fn scan_endpoints(scan: &Scan) -> Vec<Vec2> {
    scan.bearings
        .iter()
        .zip(&scan.ranges)
        .zip(&scan.valid)
        .filter(|(_, ok)| **ok)
        .map(|((b, r), _)| {
            let (s, c) = b.sin_cos();
            Vec2::new(r * c, r * s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn endpoints_of_valid_beams() {
        let scan = Scan::new(vec![0.0, FRAC_PI_2, 1.0], vec![2.0, 3.0, 5.0], 10.0, vec![true, true, false]).unwrap();
        let e = scan_endpoints(&scan);
        assert_eq!(e.len(), 2);
        assert_abs_diff_eq!(e[0], Vec2::new(2.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(e[1], Vec2::new(0.0, 3.0), epsilon = 1e-15);
    }

    #[test]
    fn rejects_inconsistent_scans() {
        assert!(Scan::new(vec![0.0], vec![], 10.0, vec![true]).is_err());
        assert!(Scan::new(vec![0.0], vec![11.0], 10.0, vec![true]).is_err());
        assert!(Scan::new(vec![0.0], vec![11.0], 10.0, vec![false]).is_ok());
    }
}
