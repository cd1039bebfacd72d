use nalgebra::DMatrix;

use super::Belief;
use crate::error::{Error, Result};
use crate::geometry::{GaugeFrame, NodeId, Vec2};

/// Re-expresses the belief in the frame where `anchor_a` sits at the origin
/// and `anchor_b` on the positive x axis. Anchor velocities are zeroed and
/// the covariance is rotated block by block.
pub fn gauge_fix(belief: &Belief, anchor_a: NodeId, anchor_b: NodeId) -> Result<(Belief, GaugeFrame)> {
    let s = &belief.state;
    let ia = s.index_of(anchor_a).ok_or(Error::UnknownNode(anchor_a))?;
    let ib = s.index_of(anchor_b).ok_or(Error::UnknownNode(anchor_b))?;
    let pa = s.positions[ia];
    let pb = s.positions[ib];
    let frame = GaugeFrame::from_anchors(anchor_a, anchor_b, pa, pb)?;
    let separation = (pb - pa).norm();

    let mut state = s.clone();
    for p in state.positions.iter_mut() {
        *p = frame.apply_point(p);
    }
    for v in state.velocities.iter_mut() {
        *v = frame.apply_vector(v);
    }
    state.positions[ia] = Vec2::zeros();
    state.positions[ib] = Vec2::new(separation, 0.0);
    state.velocities[ia] = Vec2::zeros();
    state.velocities[ib] = Vec2::zeros();

    let covariance = if frame.rotation == 0.0 {
        belief.covariance.clone()
    } else {
        let r = frame.linear();
        let d = belief.dim();
        let mut b = DMatrix::zeros(d, d);
        for blk in 0..d / 2 {
            b.fixed_view_mut::<2, 2>(2 * blk, 2 * blk).copy_from(&r);
        }
        let mut p = &b * &belief.covariance * b.transpose();
        super::symmetrize(&mut p);
        p
    };

    Ok((
        Belief {
            state,
            covariance,
            timestamp: belief.timestamp,
        },
        frame,
    ))
}
