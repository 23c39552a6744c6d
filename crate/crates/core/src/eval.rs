//! Monte Carlo evaluation: episodes, safety rate, aggregate metrics and
//! sweeps over team size, delay coefficient and controller mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::Step;
use crate::config::ScenarioConfig;
use crate::dynamics::{ControlInput, RobotState};
use crate::error::{Error, Result};
use crate::models::Models;
use crate::sim::{decide, ControlParams, Mode, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub collided: bool,
    pub first_collision: Option<Step>,
    /// Steps until each robot first came within the goal tolerance, or the deadline.
    pub steps_to_goal: Vec<Step>,
    pub final_goal_dist: Vec<f64>,
    /// Minimum pairwise distance after every step.
    pub min_dist_trace: Vec<f64>,
    /// Steps on which saturation pushed a filtered input out of the barrier half-space.
    pub saturation_violations: u64,
    pub steps: Step,
}

impl EpisodeResult {
    pub fn min_distance(&self) -> f64 {
        self.min_dist_trace.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One robot at one step, for trajectory dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajRecord {
    pub t: Step,
    pub id: usize,
    pub p: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    pub u_ref: [f64; 2],
    pub u_corr: [f64; 2],
    pub aoi_max: Option<Step>,
}

fn check_models(mode: Mode, models: Option<&Models<f64>>, scenario: &ScenarioConfig) -> Result<()> {
    mode.check(scenario.dynamics)?;
    if mode.needs_models() {
        let m = models.ok_or_else(|| Error::Config(format!("mode {mode} needs a checkpoint")))?;
        if m.kind != scenario.dynamics {
            return Err(Error::Config(format!(
                "checkpoint is for {} dynamics, scenario uses {}",
                m.kind.name(),
                scenario.dynamics.name()
            )));
        }
    }
    Ok(())
}

/// Deterministic rollout from the placement and delay streams of `(seed, key)`.
pub fn run_episode(
    models: Option<&Models<f64>>,
    scenario: &ScenarioConfig,
    mode: Mode,
    ctl: &ControlParams,
    seed: u64,
    key: u64,
    mut dump: Option<&mut Vec<TrajRecord>>,
) -> Result<EpisodeResult> {
    check_models(mode, models, scenario)?;
    let mut world = World::random(scenario, seed, key)?;
    let n = scenario.robots;
    let tol = scenario.gains.goal_tol;
    let mut steps_to_goal: Vec<Option<Step>> = world
        .goal_distances()
        .iter()
        .map(|d| (*d <= tol).then_some(0))
        .collect();
    let mut res = EpisodeResult {
        collided: false,
        first_collision: None,
        steps_to_goal: Vec::new(),
        final_goal_dist: Vec::new(),
        min_dist_trace: Vec::new(),
        saturation_violations: 0,
        steps: 0,
    };
    while world.t < scenario.max_steps && !world.all_at_goal() {
        let data = world.observe()?;
        let ds = decide(mode, models, &world, &data, ctl)?;
        if let Some(out) = dump.as_deref_mut() {
            for (i, d) in ds.iter().enumerate() {
                let (v, theta) = match world.states[i] {
                    RobotState::DubinsCar { v, theta, .. } => (Some(v), Some(theta)),
                    RobotState::SingleIntegrator { .. } => (None, None),
                };
                out.push(TrajRecord {
                    t: world.t,
                    id: i,
                    p: world.states[i].position(),
                    v,
                    theta,
                    u_ref: d.u_ref.0,
                    u_corr: d.u_corr.0,
                    aoi_max: data.max_aoi(i),
                });
            }
        }
        if ds.iter().any(|d| d.saturation_violation) {
            res.saturation_violations += 1;
        }
        let applied: Vec<ControlInput<f64>> = ds.iter().map(|d| d.applied).collect();
        world.apply(&applied)?;
        let m = world.min_pairwise_distance();
        res.min_dist_trace.push(m);
        if m < scenario.d_coll && !res.collided {
            res.collided = true;
            res.first_collision = Some(world.t);
        }
        for (k, d) in world.goal_distances().iter().enumerate() {
            if steps_to_goal[k].is_none() && *d <= tol {
                steps_to_goal[k] = Some(world.t);
            }
        }
    }
    res.steps = world.t;
    res.steps_to_goal = steps_to_goal.into_iter().map(|s| s.unwrap_or(scenario.max_steps)).collect();
    res.final_goal_dist = world.goal_distances();
    debug_assert_eq!(res.final_goal_dist.len(), n);
    Ok(res)
}

/// Fraction of episodes without any collision.
pub fn safety_rate(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("safety rate over no episodes"));
    }
    Ok(results.iter().filter(|r| !r.collided).count() as f64 / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub safety_rate: f64,
    pub mean_traj_len: f64,
    pub mean_goal_dist: f64,
    pub mean_min_dist: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-robot quantities are averaged within each episode, then over episodes.
pub fn aggregate_metrics(results: &[EpisodeResult]) -> Result<Metrics> {
    let safety_rate = safety_rate(results)?;
    Ok(Metrics {
        episodes: results.len(),
        safety_rate,
        mean_traj_len: mean(results.iter().map(|r| mean(r.steps_to_goal.iter().map(|&s| s as f64)))),
        mean_goal_dist: mean(results.iter().map(|r| mean(r.final_goal_dist.iter().copied()))),
        mean_min_dist: mean(results.iter().map(|r| {
            let m = r.min_distance();
            if m.is_finite() { m } else { 0.0 }
        })),
    })
}

/// Cross product of team sizes, delay coefficients and modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub robots: Vec<usize>,
    pub c_del: Vec<f64>,
    pub modes: Vec<Mode>,
    pub episodes: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.robots.is_empty() || self.c_del.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("sweep needs nonempty robots, c_del and modes lists".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("sweep needs at least one episode per cell".into()));
        }
        if self.robots.contains(&0) || self.c_del.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("robots must be positive and c_del nonnegative".into()));
        }
        Ok(())
    }

    /// Cells in output order, with their index.
    pub fn cells(&self) -> Vec<(u64, usize, f64, Mode)> {
        let mut out = Vec::new();
        for &r in &self.robots {
            for &c in &self.c_del {
                for &m in &self.modes {
                    out.push((out.len() as u64, r, c, m));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: String,
    #[serde(rename = "R")]
    pub robots: usize,
    pub c_del: f64,
    pub episodes: usize,
    pub safety_rate: f64,
    pub mean_traj_len: f64,
    pub mean_goal_dist: f64,
    pub mean_min_dist: f64,
    pub seed: u64,
}

/// Episode `e` of cell `c` uses stream key `c << 32 | e`.
pub fn episode_key(cell: u64, episode: u64) -> u64 {
    (cell << 32) | episode
}

/// Scenario of one sweep cell. A zero delay coefficient means perfect information.
pub fn cell_scenario(base: &ScenarioConfig, robots: usize, c_del: f64) -> ScenarioConfig {
    ScenarioConfig { robots, c_del, perfect_info: c_del == 0.0, ..base.clone() }
}

/// Runs the episodes of one cell, in parallel when `parallel` is set.
pub fn run_cell(
    models: Option<&Models<f64>>,
    scenario: &ScenarioConfig,
    mode: Mode,
    ctl: &ControlParams,
    seed: u64,
    cell: u64,
    episodes: usize,
    parallel: bool,
) -> Result<Vec<EpisodeResult>> {
    check_models(mode, models, scenario)?;
    let one = |e: usize| run_episode(models, scenario, mode, ctl, seed, episode_key(cell, e as u64), None);
    if parallel {
        (0..episodes).into_par_iter().map(one).collect()
    } else {
        (0..episodes).map(one).collect()
    }
}

/// Every cell of `spec`. `lookup(mode, c_del)` supplies the parameters of
/// learned modes.
pub fn sweep<'m>(
    spec: &SweepSpec,
    base: &ScenarioConfig,
    ctl: &ControlParams,
    lookup: &dyn Fn(Mode, f64) -> Result<Option<&'m Models<f64>>>,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let cells = spec.cells();
    // Resolve every checkpoint before running anything.
    let mut models = Vec::with_capacity(cells.len());
    for &(_, r, c, m) in &cells {
        let sc = cell_scenario(base, r, c);
        let mo = if m.needs_models() { lookup(m, c)? } else { None };
        check_models(m, mo, &sc)?;
        models.push((sc, mo));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (&(idx, r, c, m), (sc, mo)) in cells.iter().zip(&models) {
        let res = run_cell(*mo, sc, m, ctl, spec.seed, idx, spec.episodes, parallel)?;
        let mt = aggregate_metrics(&res)?;
        log::info!("{m} R={r} c_del={c}: safety rate {:.3}", mt.safety_rate);
        rows.push(SweepRow {
            mode: m.name().to_string(),
            robots: r,
            c_del: c,
            episodes: mt.episodes,
            safety_rate: mt.safety_rate,
            mean_traj_len: mt.mean_traj_len,
            mean_goal_dist: mt.mean_goal_dist,
            mean_min_dist: mt.mean_min_dist,
            seed: spec.seed,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(collided: bool, steps: Vec<Step>) -> EpisodeResult {
        EpisodeResult {
            collided,
            first_collision: None,
            final_goal_dist: vec![0.0; steps.len()],
            steps_to_goal: steps,
            min_dist_trace: vec![0.5],
            saturation_violations: 0,
            steps: 500,
        }
    }

    #[test]
    fn safety_rate_arithmetic() {
        let mut v: Vec<_> = (0..100).map(|k| ep(k < 7, vec![1])).collect();
        assert!((safety_rate(&v).unwrap() - 0.93).abs() < 1e-15);
        v.iter_mut().for_each(|r| r.collided = false);
        assert_eq!(safety_rate(&v).unwrap(), 1.0);
        v.iter_mut().for_each(|r| r.collided = true);
        assert_eq!(safety_rate(&v).unwrap(), 0.0);
        assert!(safety_rate(&[]).is_err());
    }

    #[test]
    fn trajectory_length_means() {
        let m = aggregate_metrics(&[ep(false, vec![100, 300])]).unwrap();
        assert_eq!(m.mean_traj_len, 200.0);
        let m = aggregate_metrics(&[ep(false, vec![120]), ep(false, vec![500])]).unwrap();
        assert_eq!(m.mean_traj_len, 310.0);
        assert!(aggregate_metrics(&[]).is_err());
    }

    #[test]
    fn single_robot_reaches_goal_safely() {
        let sc = ScenarioConfig { robots: 1, ..Default::default() };
        for mode in [Mode::NominalOnly, Mode::AnalyticBaseline] {
            let r = run_episode(None, &sc, mode, &ControlParams::default(), 3, 0, None).unwrap();
            assert!(!r.collided);
            assert!(r.final_goal_dist[0] <= 0.02);
            assert!(r.steps_to_goal[0] < 500);
        }
    }

    #[test]
    fn episodes_are_deterministic() {
        let sc = ScenarioConfig { robots: 6, c_del: 0.5, perfect_info: false, ..Default::default() };
        let a = run_episode(None, &sc, Mode::AnalyticBaseline, &ControlParams::default(), 1, 4, None).unwrap();
        let b = run_episode(None, &sc, Mode::AnalyticBaseline, &ControlParams::default(), 1, 4, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_cell_count_and_parallel_equivalence() {
        let spec = SweepSpec {
            robots: vec![6],
            c_del: vec![0.0],
            modes: vec![Mode::NominalOnly, Mode::AnalyticBaseline],
            episodes: 8,
            seed: 2,
        };
        let base = ScenarioConfig::default();
        let none = |_: Mode, _: f64| Ok(None);
        let serial = sweep(&spec, &base, &ControlParams::default(), &none, false).unwrap();
        assert_eq!(serial.len(), 2);
        let parallel = sweep(&spec, &base, &ControlParams::default(), &none, true).unwrap();
        assert_eq!(serial, parallel);
        let bad = SweepSpec { modes: vec![], ..spec.clone() };
        assert!(sweep(&bad, &base, &ControlParams::default(), &none, false).is_err());
        let learned = SweepSpec { modes: vec![Mode::Gnn], ..spec };
        assert!(sweep(&learned, &base, &ControlParams::default(), &none, false).is_err());
    }
}
