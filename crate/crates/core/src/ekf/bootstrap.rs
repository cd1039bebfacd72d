//! Initial layout from a complete range table, and the bookkeeping for
//! beacons that join or leave the network.

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{Belief, RangeMeasurement};
use crate::error::{Error, Result};
use crate::geometry::{GaugeFrame, NodeId, StateVector, Vec2, ROBOT_ID};

/// Prior standard deviations given to a freshly initialized beacon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeaconPrior {
    pub position_std: f64,
    pub velocity_std: f64,
}

impl Default for BeaconPrior {
    fn default() -> Self {
        Self {
            position_std: 1.0,
            velocity_std: 0.5,
        }
    }
}

/// Classical multidimensional scaling of a complete distance table,
/// returned in the anchor frame.
///
/// `ids[k]` names row/column `k` of `table`; the robot id must be present.
/// The two lowest beacon ids become the anchors and the mirror ambiguity is
/// resolved by putting the third-lowest beacon (or the robot, with only two
/// beacons) on the positive-y side.
pub fn bootstrap_geometry(table: &DMatrix<f64>, ids: &[NodeId]) -> Result<StateVector> {
    let n = ids.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!("{n} nodes, need at least 3")));
    }
    if table.nrows() != n || table.ncols() != n {
        return Err(Error::Config("range table does not match id list".into()));
    }
    if !ids.contains(&ROBOT_ID) {
        return Err(Error::Config("range table lacks the robot".into()));
    }
    for i in 0..n {
        for j in 0..n {
            let d = table[(i, j)];
            if !d.is_finite() || d < 0.0 || (d - table[(j, i)]).abs() > 1e-9 {
                return Err(Error::Config("range table must be complete, symmetric and non-negative".into()));
            }
        }
    }

    // double-centred squared distances
    let d2 = table.map(|d| d * d);
    let row_mean: Vec<f64> = (0..n).map(|i| d2.row(i).sum() / n as f64).collect();
    let total_mean = row_mean.iter().sum::<f64>() / n as f64;
    let gram = DMatrix::from_fn(n, n, |i, j| -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + total_mean));

    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if l1 <= 1e-12 || l2 <= 1e-4 * l1 {
        return Err(Error::DegenerateGeometry(format!(
            "centred Gram matrix has rank < 2 (eigenvalues {l1:.3e}, {l2:.3e})"
        )));
    }
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    let coords: Vec<Vec2> = (0..n)
        .map(|i| Vec2::new(eig.eigenvectors[(i, order[0])] * s1, eig.eigenvectors[(i, order[1])] * s2))
        .collect();

    let mut beacons: Vec<(NodeId, Vec2)> = ids
        .iter()
        .zip(&coords)
        .filter(|(&id, _)| id != ROBOT_ID)
        .map(|(&id, &p)| (id, p))
        .collect();
    beacons.sort_by_key(|(id, _)| *id);
    let robot = coords[ids.iter().position(|&id| id == ROBOT_ID).unwrap()];

    let (a, pa) = beacons[0];
    let (b, pb) = beacons[1];
    let mut frame = GaugeFrame::from_anchors(a, b, pa, pb)?;
    let third = beacons.get(2).map(|(_, p)| *p).unwrap_or(robot);
    if frame.apply_point(&third).y < 0.0 {
        // mirror about the anchor axis
        frame.reflection = true;
        frame.rotation = -frame.rotation;
        frame.translation = Vector2::new(frame.translation.x, -frame.translation.y);
    }
    let separation = (pb - pa).norm();

    let mut positions = vec![frame.apply_point(&robot)];
    positions.extend(beacons.iter().map(|(_, p)| frame.apply_point(p)));
    positions[1] = Vec2::zeros();
    positions[2] = Vec2::new(separation, 0.0);
    let nn = positions.len();
    StateVector::new(positions, vec![Vec2::zeros(); nn], beacons.iter().map(|(id, _)| *id).collect())
}

/// Least-squares position from ranges to known points.
pub fn multilaterate(refs: &[(Vec2, f64)]) -> Result<Vec2> {
    if refs.len() < 3 {
        return Err(Error::DegenerateGeometry(format!("{} references, need 3", refs.len())));
    }
    let (p0, r0) = refs[0];
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for &(p, r) in &refs[1..] {
        let row = 2.0 * (p - p0);
        let rhs = p.norm_squared() - p0.norm_squared() - r * r + r0 * r0;
        ata += row * row.transpose();
        atb += row * rhs;
    }
    let scale = ata.trace().max(1e-12);
    if ata.determinant() <= 1e-8 * scale * scale {
        return Err(Error::DegenerateGeometry("reference nodes are collinear".into()));
    }
    let mut x = ata.try_inverse().unwrap() * atb;

    // Gauss-Newton polish on the range residuals
    for _ in 0..20 {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for &(p, r) in refs {
            let d = x - p;
            let dist = d.norm();
            if dist < 1e-9 {
                continue;
            }
            let u = d / dist;
            jtj += u * u.transpose();
            jtr += u * (dist - r);
        }
        let Some(inv) = jtj.try_inverse() else { break };
        let step = inv * jtr;
        x -= step;
        if step.norm() < 1e-12 {
            break;
        }
    }
    Ok(x)
}

/// Grows the belief by one beacon, initialized by multilateration against
/// the nodes it has line-of-sight ranges to.
pub fn add_beacon(belief: &Belief, id: NodeId, initial_ranges: &[RangeMeasurement], prior: &BeaconPrior) -> Result<Belief> {
    let s = &belief.state;
    if id == ROBOT_ID || s.index_of(id).is_some() {
        return Err(Error::DuplicateBeacon(id));
    }
    let refs: Vec<(Vec2, f64)> = initial_ranges
        .iter()
        .filter(|m| m.is_los())
        .filter_map(|m| m.other(id).and_then(|o| s.position_of(o)).map(|p| (p, m.range)))
        .collect();
    if refs.len() < 3 {
        return Err(Error::InsufficientRanges {
            id,
            have: refs.len(),
            need: 3,
        });
    }
    let position = multilaterate(&refs)?;

    let n_old = s.n_nodes();
    let mut positions = s.positions.clone();
    let mut velocities = s.velocities.clone();
    let mut ids = s.beacon_ids.clone();
    positions.push(position);
    velocities.push(Vec2::zeros());
    ids.push(id);
    let state = StateVector::new(positions, velocities, ids)?;

    // old flat index -> new flat index; positions keep their slots, velocities shift by 2
    let remap = |i: usize| if i < 2 * n_old { i } else { i + 2 };
    let d_old = 4 * n_old;
    let d_new = d_old + 4;
    let mut p = DMatrix::zeros(d_new, d_new);
    for i in 0..d_old {
        for j in 0..d_old {
            p[(remap(i), remap(j))] = belief.covariance[(i, j)];
        }
    }
    let (pi, vi) = (state.pos_index(n_old), state.vel_index(n_old));
    let pv = prior.position_std * prior.position_std;
    let vv = prior.velocity_std * prior.velocity_std;
    p[(pi, pi)] = pv;
    p[(pi + 1, pi + 1)] = pv;
    p[(vi, vi)] = vv;
    p[(vi + 1, vi + 1)] = vv;

    Belief::new(state, p, belief.timestamp)
}

/// Drops a beacon and its rows and columns of the covariance.
pub fn remove_beacon(belief: &Belief, id: NodeId, anchors: (NodeId, NodeId)) -> Result<Belief> {
    if id == anchors.0 || id == anchors.1 {
        return Err(Error::AnchorRemoval(id));
    }
    let s = &belief.state;
    let k = match s.index_of(id) {
        Some(k) if k > 0 => k,
        _ => return Err(Error::UnknownNode(id)),
    };
    let n = s.n_nodes();
    let mut positions = s.positions.clone();
    let mut velocities = s.velocities.clone();
    let mut ids = s.beacon_ids.clone();
    positions.remove(k);
    velocities.remove(k);
    ids.remove(k - 1);
    let state = StateVector::new(positions, velocities, ids)?;

    let drop = [2 * k, 2 * k + 1, 2 * n + 2 * k, 2 * n + 2 * k + 1];
    let keep: Vec<usize> = (0..4 * n).filter(|i| !drop.contains(i)).collect();
    let p = DMatrix::from_fn(keep.len(), keep.len(), |i, j| belief.covariance[(keep[i], keep[j])]);
    Belief::new(state, p, belief.timestamp)
}
