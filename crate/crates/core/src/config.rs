//! Scenario and training configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::comms::ChannelConfig;
use crate::dynamics::{DynamicsKind, InputBounds, NominalGains};
use crate::error::{Error, Result};
use crate::models::{NetConfig, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub dynamics: DynamicsKind,
    /// Square workspace `[lo, hi]^2`.
    pub workspace: [f64; 2],
    /// Starts and goals are drawn this far inside the workspace.
    pub spawn_margin: f64,
    pub robots: usize,
    pub comm_radius: f64,
    pub d_coll: f64,
    pub d_safe: f64,
    pub ts: f64,
    pub bounds: InputBounds<f64>,
    pub gains: NominalGains<f64>,
    pub c_del: f64,
    pub delta_max: u64,
    pub perfect_info: bool,
    pub erasure_prob: f64,
    pub max_steps: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            dynamics: DynamicsKind::SingleIntegrator,
            workspace: [0.0, 3.0],
            spawn_margin: 0.1,
            robots: 6,
            comm_radius: 1.0,
            d_coll: 0.1,
            d_safe: 0.2,
            ts: 0.03,
            bounds: InputBounds::default(),
            gains: NominalGains::default(),
            c_del: 0.0,
            delta_max: 5,
            perfect_info: true,
            erasure_prob: 0.0,
            max_steps: 500,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.robots < 1 {
            return fail("robots must be at least 1");
        }
        if !(self.ts > 0.0) {
            return fail("ts must be positive");
        }
        if !(self.d_coll > 0.0 && self.d_safe > self.d_coll) {
            return fail("need 0 < d_coll < d_safe");
        }
        if !(self.comm_radius >= self.d_coll) {
            return fail("comm_radius must be at least d_coll");
        }
        let [lo, hi] = self.workspace;
        if !(hi - lo > 2.0 * self.spawn_margin && self.spawn_margin >= 0.0) {
            return fail("workspace too small for the spawn margin");
        }
        if !(self.c_del >= 0.0 && self.c_del.is_finite()) {
            return fail("c_del must be a finite nonnegative number");
        }
        if !(0.0..1.0).contains(&self.erasure_prob) {
            return fail("erasure_prob must be in [0, 1)");
        }
        let b = &self.bounds;
        if !(b.speed > 0.0 && b.accel > 0.0 && b.omega > 0.0) {
            return fail("input bounds must be positive");
        }
        if self.max_steps == 0 {
            return fail("max_steps must be positive");
        }
        Ok(())
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig {
            comm_radius: self.comm_radius,
            c_del: self.c_del,
            delta_max: self.delta_max,
            erasure_prob: self.erasure_prob,
        }
    }
}

/// Which parameter groups a run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// CBF and controller under perfect information, alternation otherwise.
    Auto,
    CbfController,
    Predictor,
}

/// Action used during training rollouts when exploitation is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutPolicy {
    Learned,
    Nominal,
}

/// What the alternation period counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlternationUnit {
    UpdateEvents,
    DescentSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub w_safe: f64,
    pub w_unsafe: f64,
    pub w_der: f64,
    pub w_contr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Margin multiplier of the switching heuristic.
    pub phi: f64,
    pub steps: u64,
    pub delta_train: u64,
    pub n_desc: u64,
    pub alternation_period: u64,
    pub alternation_unit: AlternationUnit,
    pub first_group: ParamGroup,
    pub mode: TrainMode,
    pub rollout_policy: RolloutPolicy,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub epsilon_min: f64,
    pub epsilon_floor_after: u64,
    /// Checkpoint every this many update events; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Parameters to start from, e.g. a perfect-information run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w_safe: 1.0,
            w_unsafe: 1.0,
            w_der: 0.7,
            w_contr: 0.001,
            alpha: 1.0,
            eps: 0.02,
            phi: 1.0,
            steps: 50_000,
            delta_train: 512,
            n_desc: 10,
            alternation_period: 10,
            alternation_unit: AlternationUnit::UpdateEvents,
            first_group: ParamGroup::CbfController,
            mode: TrainMode::Auto,
            rollout_policy: RolloutPolicy::Learned,
            lr: 1e-3,
            batch_size: 64,
            buffer_capacity: 50_000,
            epsilon_min: 0.01,
            epsilon_floor_after: 100,
            checkpoint_every: 0,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        let weights = [self.w_safe, self.w_unsafe, self.w_der, self.w_contr, self.phi];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return fail("loss weights and phi must be finite and nonnegative");
        }
        if !(self.eps > 0.0) || !(self.alpha > 0.0) {
            return fail("eps and alpha must be positive");
        }
        if self.delta_train == 0 || self.n_desc == 0 || self.alternation_period == 0 {
            return fail("delta_train, n_desc and alternation_period must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return fail("batch_size and buffer_capacity must be positive");
        }
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_min) {
            return fail("epsilon_min must be in [0, 1]");
        }
        Ok(())
    }

    /// Exploration probability at global step `t` (1-based).
    pub fn epsilon(&self, t: u64) -> f64 {
        let e = 1.0 / t.max(1) as f64;
        if t > self.epsilon_floor_after {
            e.max(self.epsilon_min)
        } else {
            e
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub net: NetConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        self.net.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a file. A relative `init_checkpoint` is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.train.init_checkpoint, path.parent()) {
            if p.is_relative() {
                cfg.train.init_checkpoint = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_schedule() {
        let t = TrainConfig::default();
        assert_eq!(t.epsilon(4), 0.25);
        assert_eq!(t.epsilon(1), 1.0);
        assert_eq!(t.epsilon(100), 0.01);
        assert_eq!(t.epsilon(1000), 0.01);
        let mut no_floor = t.clone();
        no_floor.epsilon_min = 0.0;
        assert_eq!(no_floor.epsilon(1000), 0.001);
    }

    #[test]
    fn toml_round_trip() {
        let mut c = Config::default();
        c.scenario.dynamics = DynamicsKind::DubinsCar;
        c.scenario.c_del = 1.5;
        c.train.init_checkpoint = Some("a/b.json".into());
        let text = c.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn validation() {
        assert!(Config::from_toml("[scenario]\nrobots = 0\n").is_err());
        assert!(Config::from_toml("[scenario]\ncomm_radius = 0.05\n").is_err());
        assert!(Config::from_toml("[scenario]\nts = 0.0\n").is_err());
        assert!(Config::from_toml("[train]\neps = 0.0\n").is_err());
        assert!(Config::from_toml("[train]\nw_der = -1.0\n").is_err());
        assert!(Config::from_toml("[train]\nbogus = 1\n").is_err());
    }
}
