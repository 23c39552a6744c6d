//! Closed-loop multi-robot simulation: placement, sensing through the
//! channel, controller dispatch and integration.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::comms::{perfect_local_data, Channel, LocalData, RobotId, Step};
use crate::config::ScenarioConfig;
use crate::dynamics::{
    nominal_control, saturate, state_diff, step, ControlInput, DynamicsKind, RobotState, StateDiff,
};
use crate::error::{Error, Result};
use crate::models::{analytic_cbf, heuristic_control, min_norm_filter, Models};
use crate::rng::{self, Domain};

/// How each robot turns its local data into an input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    NominalOnly,
    /// Learned correction fed the freshest received relative states as if current.
    Gnn,
    #[serde(alias = "gnn+predictor")]
    GnnPredictor,
    Heuristic,
    AnalyticBaseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::NominalOnly,
        Mode::Gnn,
        Mode::GnnPredictor,
        Mode::Heuristic,
        Mode::AnalyticBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NominalOnly => "nominal-only",
            Mode::Gnn => "gnn",
            Mode::GnnPredictor => "gnn+predictor",
            Mode::Heuristic => "heuristic",
            Mode::AnalyticBaseline => "analytic-baseline",
        }
    }

    pub fn needs_models(self) -> bool {
        matches!(self, Mode::Gnn | Mode::GnnPredictor | Mode::Heuristic)
    }

    /// Checks that the mode can drive the given dynamics.
    pub fn check(self, kind: DynamicsKind) -> Result<()> {
        if self == Mode::AnalyticBaseline && kind != DynamicsKind::SingleIntegrator {
            return Err(Error::Config("analytic-baseline supports single-integrator dynamics only".into()));
        }
        Ok(())
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "gnn-predictor" && *m == Mode::GnnPredictor))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Constants used by the filtering modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub alpha: f64,
    pub eps: f64,
    pub phi: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams { alpha: 1.0, eps: 0.02, phi: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub starts: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
}

fn far_enough(p: [f64; 2], others: &[[f64; 2]], d: f64) -> bool {
    others
        .iter()
        .all(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() >= d)
}

/// Uniform starts and goals, each point redrawn until it is at least `d_safe`
/// from the points already placed.
pub fn sample_placement<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Placement> {
    let lo = cfg.workspace[0] + cfg.spawn_margin;
    let hi = cfg.workspace[1] - cfg.spawn_margin;
    let draw = |rng: &mut R| -> Result<Vec<[f64; 2]>> {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(cfg.robots);
        for _ in 0..cfg.robots {
            let mut tries = 0;
            loop {
                let p = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
                if far_enough(p, &pts, cfg.d_safe) {
                    pts.push(p);
                    break;
                }
                tries += 1;
                if tries > 100_000 {
                    return Err(Error::Config(format!("cannot place {} robots in the workspace", cfg.robots)));
                }
            }
        }
        Ok(pts)
    };
    let starts = draw(rng)?;
    let goals = draw(rng)?;
    Ok(Placement { starts, goals })
}

/// Per-robot result of one control decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub u_ref: ControlInput<f64>,
    pub u_corr: ControlInput<f64>,
    pub applied: ControlInput<f64>,
    pub saturation_violation: bool,
}

pub struct World {
    pub cfg: ScenarioConfig,
    pub states: Vec<RobotState<f64>>,
    pub goals: Vec<[f64; 2]>,
    pub prev_inputs: Vec<ControlInput<f64>>,
    pub t: Step,
    channel: Option<Channel<f64>>,
}

impl World {
    /// Robots start at rest. Channel streams are keyed by `(seed, episode)`.
    pub fn new(cfg: &ScenarioConfig, placement: Placement, seed: u64, episode: u64) -> Self {
        let kind = cfg.dynamics;
        let channel = (!cfg.perfect_info).then(|| Channel::new(cfg.robots, cfg.channel(), seed, episode));
        World {
            cfg: cfg.clone(),
            states: placement.starts.iter().map(|&p| RobotState::at_rest(kind, p)).collect(),
            goals: placement.goals,
            prev_inputs: vec![ControlInput::zero(); cfg.robots],
            t: 0,
            channel,
        }
    }

    /// Samples a placement from the `(seed, episode)` placement stream.
    pub fn random(cfg: &ScenarioConfig, seed: u64, episode: u64) -> Result<Self> {
        let mut r = rng::stream(seed, Domain::Placement, episode, 0);
        let placement = sample_placement(cfg, &mut r)?;
        Ok(World::new(cfg, placement, seed, episode))
    }

    pub fn kind(&self) -> DynamicsKind {
        self.cfg.dynamics
    }

    /// Local data at the current step. Under delays this advances the channel
    /// and must be called once per step.
    pub fn observe(&mut self) -> Result<LocalData<f64>> {
        match &mut self.channel {
            None => perfect_local_data(&self.states, &self.prev_inputs, self.cfg.comm_radius),
            Some(ch) => Ok(ch.advance(&self.states, &self.prev_inputs, self.t)?.0),
        }
    }

    pub fn channel(&self) -> Option<&Channel<f64>> {
        self.channel.as_ref()
    }

    pub fn nominal(&self) -> Result<Vec<ControlInput<f64>>> {
        self.states
            .iter()
            .zip(&self.goals)
            .map(|(s, g)| nominal_control(s, *g, &self.cfg.gains, &self.cfg.bounds))
            .collect()
    }

    /// Exact relative states of every robot within communication range.
    pub fn true_neighbors(&self, i: RobotId) -> Result<Vec<(RobotId, StateDiff<f64>)>> {
        let mut out = Vec::new();
        for (j, s) in self.states.iter().enumerate() {
            if j != i && self.states[i].distance_to(s) <= self.cfg.comm_radius {
                out.push((j, state_diff(&self.states[i], s)?));
            }
        }
        Ok(out)
    }

    /// Saturates, integrates one step and advances time.
    pub fn apply(&mut self, inputs: &[ControlInput<f64>]) -> Result<()> {
        let kind = self.kind();
        for (i, u) in inputs.iter().enumerate() {
            let u = saturate(*u, kind, &self.cfg.bounds)?;
            self.states[i] = step(kind, &self.states[i], &u, self.cfg.ts)?;
            self.prev_inputs[i] = u;
        }
        self.t += 1;
        Ok(())
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        min_pairwise_distance(&self.states)
    }

    pub fn goal_distances(&self) -> Vec<f64> {
        self.states
            .iter()
            .zip(&self.goals)
            .map(|(s, g)| {
                let p = s.position();
                ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
            })
            .collect()
    }

    pub fn all_at_goal(&self) -> bool {
        self.goal_distances().iter().all(|d| *d <= self.cfg.gains.goal_tol)
    }
}

pub fn min_pairwise_distance(states: &[RobotState<f64>]) -> f64 {
    let mut m = f64::INFINITY;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            m = m.min(states[i].distance_to(&states[j]));
        }
    }
    m
}

/// Corrective input of one robot under `mode`.
fn corrective(
    mode: Mode,
    models: Option<&Models<f64>>,
    cfg: &ScenarioConfig,
    data: &LocalData<f64>,
    i: RobotId,
    u_ref: ControlInput<f64>,
    ctl: &ControlParams,
) -> Result<(ControlInput<f64>, bool)> {
    let need = || models.ok_or(Error::Config(format!("mode {mode} needs a checkpoint")));
    let none = ControlInput::zero();
    if !data.has_neighbors(i) {
        return Ok((none, false));
    }
    Ok(match mode {
        Mode::NominalOnly => (none, false),
        Mode::Gnn => (need()?.corrective(&data.latest_diffs(i), u_ref)?, false),
        Mode::GnnPredictor if cfg.perfect_info => (need()?.corrective(&data.latest_diffs(i), u_ref)?, false),
        Mode::GnnPredictor => {
            let m = need()?;
            (m.corrective(&m.predict_all(&data.per_robot[i])?, u_ref)?, false)
        }
        Mode::Heuristic => {
            let out = heuristic_control(need()?, &data.per_robot[i], u_ref, ctl.phi, ctl.eps, ctl.alpha, cfg.ts)?;
            (out.output, false)
        }
        Mode::AnalyticBaseline => {
            let v = analytic_cbf(&data.latest_diffs(i), cfg.d_coll)?;
            let f = min_norm_filter(u_ref, v.h, v.grad, ctl.alpha, &cfg.bounds)?;
            (f.u - u_ref, f.saturation_violation)
        }
    })
}

/// Inputs of every robot for the current step.
pub fn decide(
    mode: Mode,
    models: Option<&Models<f64>>,
    world: &World,
    data: &LocalData<f64>,
    ctl: &ControlParams,
) -> Result<Vec<Decision>> {
    mode.check(world.kind())?;
    let u_refs = world.nominal()?;
    u_refs
        .into_iter()
        .enumerate()
        .map(|(i, u_ref)| {
            let (u_corr, saturation_violation) = corrective(mode, models, &world.cfg, data, i, u_ref, ctl)?;
            let applied = saturate(u_ref + u_corr, world.kind(), &world.cfg.bounds)?;
            Ok(Decision { u_ref, u_corr, applied, saturation_violation })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_respects_separation() {
        let cfg = ScenarioConfig { robots: 20, ..Default::default() };
        for ep in 0..20 {
            let p = sample_placement(&cfg, &mut rng::stream(5, Domain::Test, ep, 0)).unwrap();
            for pts in [&p.starts, &p.goals] {
                assert_eq!(pts.len(), 20);
                for (k, a) in pts.iter().enumerate() {
                    assert!(a.iter().all(|c| (0.1..=2.9).contains(c)));
                    assert!(far_enough(*a, &pts[..k], 0.2));
                }
            }
        }
        let crowded = ScenarioConfig { robots: 1000, ..Default::default() };
        assert!(sample_placement(&crowded, &mut rng::stream(5, Domain::Test, 0, 0)).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
        assert!(Mode::AnalyticBaseline.check(DynamicsKind::DubinsCar).is_err());
    }

    #[test]
    fn lone_robot_reaches_goal() {
        let cfg = ScenarioConfig { robots: 1, ..Default::default() };
        let mut w = World::new(&cfg, Placement { starts: vec![[0.5, 0.5]], goals: vec![[2.0, 1.0]] }, 0, 0);
        for _ in 0..cfg.max_steps {
            let data = w.observe().unwrap();
            let d = decide(Mode::AnalyticBaseline, None, &w, &data, &ControlParams::default()).unwrap();
            assert_eq!(d[0].u_corr, ControlInput::zero());
            w.apply(&[d[0].applied]).unwrap();
        }
        assert!(w.all_at_goal());
    }

    #[test]
    fn learned_modes_need_models() {
        let cfg = ScenarioConfig { robots: 2, ..Default::default() };
        let mut w = World::new(&cfg, Placement { starts: vec![[0.5, 0.5], [0.8, 0.5]], goals: vec![[2.0, 1.0], [0.2, 0.2]] }, 0, 0);
        let data = w.observe().unwrap();
        assert!(decide(Mode::Gnn, None, &w, &data, &ControlParams::default()).is_err());
    }
}
