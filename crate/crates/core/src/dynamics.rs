//! Robot kinematics: single integrator and Dubins car, forward-Euler stepping,
//! box saturation of inputs and the goal-reaching nominal controllers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{norm, wrap_angle, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    SingleIntegrator,
    DubinsCar,
}

impl DynamicsKind {
    /// Length of the feature vector of a [`StateDiff`] for this model.
    pub fn diff_dim(self) -> usize {
        match self {
            DynamicsKind::SingleIntegrator => 2,
            DynamicsKind::DubinsCar => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DynamicsKind::SingleIntegrator => "single_integrator",
            DynamicsKind::DubinsCar => "dubins_car",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RobotState<F> {
    SingleIntegrator { p: [F; 2] },
    DubinsCar { p: [F; 2], v: F, theta: F },
}

impl<F: Scalar> RobotState<F> {
    pub fn at_rest(kind: DynamicsKind, p: [F; 2]) -> Self {
        match kind {
            DynamicsKind::SingleIntegrator => RobotState::SingleIntegrator { p },
            DynamicsKind::DubinsCar => RobotState::DubinsCar {
                p,
                v: F::zero(),
                theta: F::zero(),
            },
        }
    }

    pub fn kind(&self) -> DynamicsKind {
        match self {
            RobotState::SingleIntegrator { .. } => DynamicsKind::SingleIntegrator,
            RobotState::DubinsCar { .. } => DynamicsKind::DubinsCar,
        }
    }

    pub fn position(&self) -> [F; 2] {
        match *self {
            RobotState::SingleIntegrator { p } | RobotState::DubinsCar { p, .. } => p,
        }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            RobotState::SingleIntegrator { p } => p.iter().all(|x| x.is_finite()),
            RobotState::DubinsCar { p, v, theta } => {
                p.iter().all(|x| x.is_finite()) && v.is_finite() && theta.is_finite()
            }
        }
    }

    pub fn distance_to(&self, other: &Self) -> F {
        let (a, b) = (self.position(), other.position());
        norm(&[a[0] - b[0], a[1] - b[1]])
    }
}

/// Two-component control input. Velocity command for the single integrator,
/// (acceleration, angular rate) for the Dubins car.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlInput<F>(pub [F; 2]);

impl<F: Scalar> ControlInput<F> {
    pub fn zero() -> Self {
        ControlInput([F::zero(); 2])
    }

    pub fn norm(&self) -> F {
        norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| x.is_zero())
    }
}

impl<F: Scalar> std::ops::Add for ControlInput<F> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        ControlInput([self.0[0] + rhs.0[0], self.0[1] + rhs.0[1]])
    }
}

impl<F: Scalar> std::ops::Sub for ControlInput<F> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        ControlInput([self.0[0] - rhs.0[0], self.0[1] - rhs.0[1]])
    }
}

/// Relative state `x_a ⊖ x_b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateDiff<F> {
    SingleIntegrator { dp: [F; 2] },
    DubinsCar { dp: [F; 2], dv: F, dtheta: F },
}

impl<F: Scalar> StateDiff<F> {
    pub fn zero(kind: DynamicsKind) -> Self {
        match kind {
            DynamicsKind::SingleIntegrator => StateDiff::SingleIntegrator { dp: [F::zero(); 2] },
            DynamicsKind::DubinsCar => StateDiff::DubinsCar {
                dp: [F::zero(); 2],
                dv: F::zero(),
                dtheta: F::zero(),
            },
        }
    }

    pub fn kind(&self) -> DynamicsKind {
        match self {
            StateDiff::SingleIntegrator { .. } => DynamicsKind::SingleIntegrator,
            StateDiff::DubinsCar { .. } => DynamicsKind::DubinsCar,
        }
    }

    pub fn dp(&self) -> [F; 2] {
        match *self {
            StateDiff::SingleIntegrator { dp } | StateDiff::DubinsCar { dp, .. } => dp,
        }
    }

    /// Distance between the two robots.
    pub fn distance(&self) -> F {
        norm(&self.dp())
    }

    /// Flat feature vector, `[dx, dy]` or `[dx, dy, dv, dtheta]`.
    pub fn features(&self) -> Vec<F> {
        match *self {
            StateDiff::SingleIntegrator { dp } => dp.to_vec(),
            StateDiff::DubinsCar { dp, dv, dtheta } => vec![dp[0], dp[1], dv, dtheta],
        }
    }

    /// Inverse of [`StateDiff::features`]; re-wraps the heading component.
    pub fn from_features(kind: DynamicsKind, f: &[F]) -> Result<Self> {
        if f.len() != kind.diff_dim() {
            return Err(Error::Shape(format!(
                "state diff for {kind:?} needs {} features, got {}",
                kind.diff_dim(),
                f.len()
            )));
        }
        Ok(match kind {
            DynamicsKind::SingleIntegrator => StateDiff::SingleIntegrator { dp: [f[0], f[1]] },
            DynamicsKind::DubinsCar => StateDiff::DubinsCar {
                dp: [f[0], f[1]],
                dv: f[2],
                dtheta: wrap_angle(f[3]),
            },
        })
    }

    /// Euclidean norm over all components.
    pub fn norm(&self) -> F {
        norm(&self.features())
    }

    /// `self ⊖ other`, componentwise with heading wrapped.
    pub fn minus(&self, other: &Self) -> Result<Self> {
        match (*self, *other) {
            (StateDiff::SingleIntegrator { dp: a }, StateDiff::SingleIntegrator { dp: b }) => {
                Ok(StateDiff::SingleIntegrator {
                    dp: [a[0] - b[0], a[1] - b[1]],
                })
            }
            (
                StateDiff::DubinsCar { dp: a, dv: va, dtheta: ta },
                StateDiff::DubinsCar { dp: b, dv: vb, dtheta: tb },
            ) => Ok(StateDiff::DubinsCar {
                dp: [a[0] - b[0], a[1] - b[1]],
                dv: va - vb,
                dtheta: wrap_angle(ta - tb),
            }),
            _ => Err(Error::VariantMismatch {
                expected: self.kind(),
            }),
        }
    }
}

/// `a ⊖ b`.
pub fn state_diff<F: Scalar>(a: &RobotState<F>, b: &RobotState<F>) -> Result<StateDiff<F>> {
    match (*a, *b) {
        (RobotState::SingleIntegrator { p: pa }, RobotState::SingleIntegrator { p: pb }) => {
            Ok(StateDiff::SingleIntegrator {
                dp: [pa[0] - pb[0], pa[1] - pb[1]],
            })
        }
        (
            RobotState::DubinsCar { p: pa, v: va, theta: ta },
            RobotState::DubinsCar { p: pb, v: vb, theta: tb },
        ) => Ok(StateDiff::DubinsCar {
            dp: [pa[0] - pb[0], pa[1] - pb[1]],
            dv: va - vb,
            dtheta: wrap_angle(ta - tb),
        }),
        _ => Err(Error::VariantMismatch { expected: a.kind() }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBounds<F> {
    /// Per-axis speed limit of the single integrator.
    pub speed: F,
    /// Dubins acceleration limit.
    pub accel: F,
    /// Dubins angular rate limit.
    pub omega: F,
}

impl<F: Scalar> Default for InputBounds<F> {
    fn default() -> Self {
        InputBounds {
            speed: F::lit(0.4),
            accel: F::lit(10.0),
            omega: F::lit(100.0),
        }
    }
}

impl<F: Scalar> InputBounds<F> {
    /// Symmetric box `[-b_k, b_k]` for each input component.
    pub fn bounds(&self, kind: DynamicsKind) -> [F; 2] {
        match kind {
            DynamicsKind::SingleIntegrator => [self.speed, self.speed],
            DynamicsKind::DubinsCar => [self.accel, self.omega],
        }
    }
}

pub fn saturate<F: Scalar>(
    input: ControlInput<F>,
    kind: DynamicsKind,
    bounds: &InputBounds<F>,
) -> Result<ControlInput<F>> {
    if input.0.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("control input"));
    }
    let b = bounds.bounds(kind);
    Ok(ControlInput([
        input.0[0].max(-b[0]).min(b[0]),
        input.0[1].max(-b[1]).min(b[1]),
    ]))
}

/// One forward-Euler step.
pub fn step<F: Scalar>(
    kind: DynamicsKind,
    state: &RobotState<F>,
    input: &ControlInput<F>,
    ts: F,
) -> Result<RobotState<F>> {
    let u = input.0;
    let next = match (kind, *state) {
        (DynamicsKind::SingleIntegrator, RobotState::SingleIntegrator { p }) => {
            RobotState::SingleIntegrator {
                p: [p[0] + ts * u[0], p[1] + ts * u[1]],
            }
        }
        (DynamicsKind::DubinsCar, RobotState::DubinsCar { p, v, theta }) => RobotState::DubinsCar {
            p: [p[0] + ts * v * theta.cos(), p[1] + ts * v * theta.sin()],
            v: v + ts * u[0],
            theta: wrap_angle(theta + ts * u[1]),
        },
        _ => return Err(Error::VariantMismatch { expected: kind }),
    };
    if !next.is_finite() {
        return Err(Error::NonFinite("robot state"));
    }
    Ok(next)
}

/// Gains of the goal-reaching nominal controllers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalGains<F> {
    pub kp: F,
    pub kv: F,
    pub kd: F,
    pub v_max: F,
    pub ktheta: F,
    pub goal_tol: F,
}

impl<F: Scalar> Default for NominalGains<F> {
    fn default() -> Self {
        NominalGains {
            kp: F::lit(4.0),
            kv: F::lit(5.0),
            kd: F::lit(2.0),
            v_max: F::lit(1.0),
            ktheta: F::lit(10.0),
            goal_tol: F::lit(0.02),
        }
    }
}

/// Straight-line goal reaching. The result is already saturated.
pub fn nominal_control<F: Scalar>(
    state: &RobotState<F>,
    goal: [F; 2],
    gains: &NominalGains<F>,
    bounds: &InputBounds<F>,
) -> Result<ControlInput<F>> {
    let p = state.position();
    let e = [goal[0] - p[0], goal[1] - p[1]];
    let dist = norm(&e);
    if dist <= gains.goal_tol {
        return Ok(ControlInput::zero());
    }
    let raw = match *state {
        RobotState::SingleIntegrator { .. } => ControlInput([gains.kp * e[0], gains.kp * e[1]]),
        RobotState::DubinsCar { v, theta, .. } => {
            let v_ref = gains.v_max.min(gains.kd * dist);
            let bearing = e[1].atan2(e[0]);
            ControlInput([
                gains.kv * (v_ref - v),
                gains.ktheta * wrap_angle(bearing - theta),
            ])
        }
    };
    saturate(raw, state.kind(), bounds)
}
