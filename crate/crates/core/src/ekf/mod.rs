//! Cooperative range-only extended Kalman filter over the robot and the
//! beacons, expressed in a frame pinned to two anchor beacons.

mod bootstrap;
mod gauge;
mod measurement;

pub use bootstrap::{add_beacon, bootstrap_geometry, multilaterate, remove_beacon, BeaconPrior};
pub use gauge::gauge_fix;
pub use measurement::{nlos_gate, Link, RangeMeasurement, RangeSet, NLOS_POWER_GAP_DB};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pairwise_range, NodeId, StateVector};

/// Constant-velocity model driven by white acceleration noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    /// Sampling interval in seconds.
    pub delta: f64,
    /// Process-noise scale.
    pub sigma_w: f64,
}

impl MotionModel {
    pub fn new(delta: f64, sigma_w: f64) -> Result<Self> {
        if !(delta > 0.0) || !(sigma_w >= 0.0) {
            return Err(Error::Config(format!("invalid motion model delta={delta} sigma_w={sigma_w}")));
        }
        Ok(Self { delta, sigma_w })
    }
}

impl Default for MotionModel {
    fn default() -> Self {
        Self {
            delta: 0.1,
            sigma_w: 0.1,
        }
    }
}

/// Standard deviation of the additive range noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorNoise {
    pub sigma_n: f64,
}

impl SensorNoise {
    pub fn new(sigma_n: f64) -> Result<Self> {
        if !(sigma_n > 0.0) {
            return Err(Error::Config(format!("sigma_n must be positive, got {sigma_n}")));
        }
        Ok(Self { sigma_n })
    }
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self { sigma_n: 0.1 }
    }
}

/// Mean and covariance of the joint robot/beacon state.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub state: StateVector,
    pub covariance: DMatrix<f64>,
    pub timestamp: f64,
}

impl Belief {
    pub fn new(state: StateVector, covariance: DMatrix<f64>, timestamp: f64) -> Result<Self> {
        let d = state.dim();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Config(format!(
                "covariance is {}x{}, state dimension is {d}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(Self {
            state,
            covariance,
            timestamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.state.dim()
    }

    /// Largest absolute difference between the covariance and its transpose.
    pub fn asymmetry(&self) -> f64 {
        let p = &self.covariance;
        (p - p.transpose()).amax()
    }

    /// Smallest eigenvalue of the symmetrized covariance.
    pub fn min_eigenvalue(&self) -> f64 {
        let p = &self.covariance;
        let sym = (p + p.transpose()) * 0.5;
        sym.symmetric_eigenvalues().min()
    }
}

/// Transition `F`, noise gain `G` and process covariance `Q = sigma_w^2 G G^T`
/// for `n_beacons` beacons plus the robot.
pub fn build_transition(n_beacons: usize, model: &MotionModel) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let half = 2 * (n_beacons + 1);
    let d = model.delta;
    let mut f = DMatrix::identity(2 * half, 2 * half);
    let mut g = DMatrix::zeros(2 * half, half);
    for i in 0..half {
        f[(i, half + i)] = d;
        g[(i, i)] = d;
        g[(half + i, i)] = 1.0;
    }
    let q = &g * g.transpose() * (model.sigma_w * model.sigma_w);
    (f, g, q)
}

/// Propagates the belief one sampling interval.
pub fn predict(belief: &Belief, model: &MotionModel) -> Belief {
    let (f, _, q) = build_transition(belief.state.n_beacons(), model);
    let x = &f * belief.state.to_flat();
    let mut state = belief.state.clone();
    state.set_flat(&x);
    let covariance = &f * &belief.covariance * f.transpose() + q;
    Belief {
        state,
        covariance,
        timestamp: belief.timestamp + model.delta,
    }
}

/// Jacobian of the pairwise ranges with respect to the flat state.
pub fn measurement_jacobian(state: &StateVector, pairs: &[(NodeId, NodeId)]) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(pairs.len(), state.dim());
    for (row, &(a, b)) in pairs.iter().enumerate() {
        let i = state.index_of(a).ok_or(Error::UnknownNode(a))?;
        let j = state.index_of(b).ok_or(Error::UnknownNode(b))?;
        let diff = state.positions[i] - state.positions[j];
        let dist = diff.norm();
        if dist <= 1e-9 {
            return Err(Error::DegenerateRange(a, b));
        }
        let u = diff / dist;
        let (ci, cj) = (state.pos_index(i), state.pos_index(j));
        h[(row, ci)] = u.x;
        h[(row, ci + 1)] = u.y;
        h[(row, cj)] = -u.x;
        h[(row, cj + 1)] = -u.y;
    }
    Ok(h)
}

/// Pairs of a range set the filter can use: line-of-sight, both nodes live,
/// and not coincident in the current estimate.
pub fn usable_measurements<'a>(state: &StateVector, ranges: &'a RangeSet) -> Vec<&'a RangeMeasurement> {
    ranges
        .los()
        .filter(|m| match (state.position_of(m.node_i), state.position_of(m.node_j)) {
            (Some(a), Some(b)) => {
                if pairwise_range(&a, &b) > 1e-9 {
                    true
                } else {
                    log::debug!("dropping degenerate pair ({}, {})", m.node_i, m.node_j);
                    false
                }
            }
            _ => false,
        })
        .collect()
}

/// EKF measurement update with every usable line-of-sight range.
pub fn update(belief: &Belief, ranges: &RangeSet, noise: &SensorNoise) -> Result<Belief> {
    let used = usable_measurements(&belief.state, ranges);
    if used.is_empty() {
        return Ok(belief.clone());
    }
    let pairs: Vec<(NodeId, NodeId)> = used.iter().map(|m| (m.node_i, m.node_j)).collect();
    let h = measurement_jacobian(&belief.state, &pairs)?;
    let p = &belief.covariance;

    let innovation = DVector::from_iterator(
        used.len(),
        used.iter().map(|m| {
            let a = belief.state.position_of(m.node_i).unwrap();
            let b = belief.state.position_of(m.node_j).unwrap();
            m.range - pairwise_range(&a, &b)
        }),
    );

    let pht = p * h.transpose();
    let mut s = &h * &pht;
    for k in 0..used.len() {
        s[(k, k)] += noise.sigma_n * noise.sigma_n;
    }
    let chol = s.cholesky().ok_or(Error::SingularInnovation)?;
    // K = P H^T S^-1, computed as (S^-1 H P)^T since S and P are symmetric
    let gain = chol.solve(&pht.transpose()).transpose();
    if !gain.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularInnovation);
    }

    let x = belief.state.to_flat() + &gain * innovation;
    let mut state = belief.state.clone();
    state.set_flat(&x);

    let d = belief.dim();
    let mut covariance = (DMatrix::identity(d, d) - &gain * &h) * p;
    symmetrize(&mut covariance);
    Ok(Belief {
        state,
        covariance,
        timestamp: belief.timestamp,
    })
}

pub(crate) fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Normalized estimation error squared of `estimate` against `truth`.
pub fn nees(estimate: &DVector<f64>, covariance: &DMatrix<f64>, truth: &DVector<f64>) -> Option<f64> {
    let e = estimate - truth;
    let chol = covariance.clone().cholesky()?;
    Some(e.dot(&chol.solve(&e)))
}

/// Two-sided 95% acceptance band for the run-averaged NEES of `runs`
/// independent runs of a `dim`-dimensional state.
pub fn nees_band(dim: usize, runs: usize) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let dof = (dim * runs) as f64;
    let chi = ChiSquared::new(dof).expect("positive degrees of freedom");
    (chi.inverse_cdf(0.025) / runs as f64, chi.inverse_cdf(0.975) / runs as f64)
}
