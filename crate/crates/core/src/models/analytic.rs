//! Hand-crafted collision-avoidance barrier and its min-norm safety filter.

use crate::comms::RobotId;
use crate::dynamics::{saturate, ControlInput, DynamicsKind, InputBounds, StateDiff};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::BarrierFn;

/// Value and gradient (w.r.t. the robot's own position) of
/// `h = min_j ||p_i - p_j|| - d_coll`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticValue<F> {
    pub h: F,
    pub grad: [F; 2],
    pub argmin: RobotId,
}

/// Ties on the minimum go to the lowest robot id.
pub fn analytic_cbf<F: Scalar>(w: &[(RobotId, StateDiff<F>)], d_coll: F) -> Result<AnalyticValue<F>> {
    if w.is_empty() {
        return Err(Error::Empty("analytic barrier over no neighbors"));
    }
    let mut best: Option<(F, RobotId, [F; 2])> = None;
    for (j, d) in w {
        let dp = d.dp();
        let dist = d.distance();
        if dist.is_zero() {
            return Err(Error::Degenerate("coincident robot positions"));
        }
        let better = match best {
            None => true,
            Some((bd, bj, _)) => dist < bd || (dist == bd && *j < bj),
        };
        if better {
            best = Some((dist, *j, [dp[0] / dist, dp[1] / dist]));
        }
    }
    let (dist, argmin, grad) = best.unwrap();
    Ok(AnalyticValue {
        h: dist - d_coll,
        grad,
        argmin,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticCbf<F> {
    pub d_coll: F,
}

impl<F: Scalar> BarrierFn<F> for AnalyticCbf<F> {
    fn value(&self, w: &[(RobotId, StateDiff<F>)]) -> Result<F> {
        Ok(analytic_cbf(w, self.d_coll)?.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterOutcome<F> {
    pub u: ControlInput<F>,
    /// The barrier constraint was active and `u_ref` was projected.
    pub projected: bool,
    /// Saturation moved the input back outside the constraint half-space.
    pub saturation_violation: bool,
}

/// Closest input to `u_ref` with `a . u >= -alpha h`, then saturated.
pub fn min_norm_filter<F: Scalar>(
    u_ref: ControlInput<F>,
    h: F,
    a: [F; 2],
    alpha: F,
    bounds: &InputBounds<F>,
) -> Result<FilterOutcome<F>> {
    let a2 = a[0] * a[0] + a[1] * a[1];
    if a2.is_zero() {
        return Err(Error::Degenerate("zero barrier gradient"));
    }
    let rhs = -alpha * h;
    let lhs = a[0] * u_ref.0[0] + a[1] * u_ref.0[1];
    let (raw, projected) = if lhs >= rhs {
        (u_ref, false)
    } else {
        let k = (rhs - lhs) / a2;
        (ControlInput([u_ref.0[0] + k * a[0], u_ref.0[1] + k * a[1]]), true)
    };
    let u = saturate(raw, DynamicsKind::SingleIntegrator, bounds)?;
    let slack = a[0] * u.0[0] + a[1] * u.0[1] - rhs;
    let tol = F::lit(1e-12) * (F::one() + rhs.abs());
    let saturation_violation = u != raw && slack < -tol;
    if saturation_violation {
        log::debug!("saturation broke the barrier constraint by {}", -slack);
    }
    Ok(FilterOutcome {
        u,
        projected,
        saturation_violation,
    })
}
