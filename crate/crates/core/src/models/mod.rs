//! Learned distributed barrier function, GNN corrective controller and the
//! recurrent AoI-aware predictor, plus the analytic baseline.

mod analytic;
mod checkpoint;
mod label;

pub use analytic::{analytic_cbf, min_norm_filter, AnalyticCbf, AnalyticValue, FilterOutcome};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use label::{Label, SafetyLabeler};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    attentional_aggregate, Activation, AttentionParams, MlpParams, ParamStore, RecurrentParams,
    Tape, Var,
};
use crate::comms::{RelativeDataset, RobotId};
use crate::dynamics::{ControlInput, DynamicsKind, StateDiff};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::scalar::{wrap_angle, Scalar};

/// A barrier function over one robot's neighborhood.
pub trait BarrierFn<F: Scalar> {
    fn value(&self, w: &[(RobotId, StateDiff<F>)]) -> Result<F>;
}

/// `(h(t + ts) - h(t)) / ts` over the same neighborhood at both times.
pub fn fd_cbf_derivative<F: Scalar, B: BarrierFn<F> + ?Sized>(
    barrier: &B,
    w_now: &[(RobotId, StateDiff<F>)],
    w_next: &[(RobotId, StateDiff<F>)],
    ts: F,
) -> Result<F> {
    let ids = |w: &[(RobotId, StateDiff<F>)]| {
        let mut v: Vec<RobotId> = w.iter().map(|(j, _)| *j).collect();
        v.sort_unstable();
        v
    };
    if ids(w_now) != ids(w_next) {
        return Err(Error::Shape("neighborhood changed between the two time steps".into()));
    }
    Ok((barrier.value(w_next)? - barrier.value(w_now)?) / ts)
}

/// Network sizes. Defaults are desk scale; the full-scale presets use
/// 2048-wide message MLPs, 128-wide attention, (512, 128, 32) heads and a
/// four-layer recurrent backbone of width 256.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub phi_hidden: Vec<usize>,
    pub message_dim: usize,
    pub attention_hidden: Vec<usize>,
    pub gamma_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub node_feature_dim: usize,
    pub head_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            phi_hidden: vec![64, 64],
            message_dim: 32,
            attention_hidden: vec![32, 32],
            gamma_hidden: vec![64, 64],
            feature_dim: 32,
            node_feature_dim: 4,
            head_hidden: vec![64, 32, 16],
            embed_dim: 32,
            rnn_hidden: 64,
            rnn_layers: 1,
            dropout: 0.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.message_dim, self.feature_dim, self.node_feature_dim, self.embed_dim, self.rnn_hidden, self.rnn_layers];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

/// One message-passing round with attentional aggregation:
/// `f_i = gamma(1, attend_j phi(w_ij))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnLayer {
    phi: MlpParams,
    attention: AttentionParams,
    gamma: MlpParams,
    node_feature_dim: usize,
}

impl GnnLayer {
    fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        edge_dim: usize,
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Self {
        GnnLayer {
            phi: MlpParams::new(
                store,
                &format!("{name}.phi"),
                &dims(edge_dim, &cfg.phi_hidden, cfg.message_dim),
                Activation::Relu,
                Activation::Relu,
                rng,
            ),
            attention: AttentionParams::new(store, &format!("{name}.att"), cfg.message_dim, &cfg.attention_hidden, rng),
            gamma: MlpParams::new(
                store,
                &format!("{name}.gamma"),
                &dims(cfg.node_feature_dim + cfg.message_dim, &cfg.gamma_hidden, cfg.feature_dim),
                Activation::Relu,
                Activation::Relu,
                rng,
            ),
            node_feature_dim: cfg.node_feature_dim,
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, edges: &[Var]) -> Result<Var> {
        if edges.is_empty() {
            return Err(Error::Empty("message passing over no neighbors"));
        }
        let messages: Vec<Var> = edges.iter().map(|&e| self.phi.forward(tape, e)).collect();
        let agg = attentional_aggregate(tape, &messages, &self.attention)?;
        let ones = tape.constant(vec![F::one(); self.node_feature_dim]);
        let x = tape.concat(&[ones, agg]);
        Ok(self.gamma.forward(tape, x))
    }
}

/// `h_theta(w_i) = m_h(GNN(w_i))`, tanh output.
#[derive(Clone, Debug, PartialEq)]
pub struct CbfModel {
    gnn: GnnLayer,
    head: MlpParams,
}

impl CbfModel {
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, edges: &[Var]) -> Result<Var> {
        let f = self.gnn.forward(tape, edges)?;
        Ok(self.head.forward(tape, f))
    }
}

/// `pi_xi(w_i) = m_pi(GNN(w_i), u_ref)`, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerModel {
    gnn: GnnLayer,
    head: MlpParams,
}

impl ControllerModel {
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, edges: &[Var], u_ref: Var) -> Result<Var> {
        let f = self.gnn.forward(tape, edges)?;
        let x = tape.concat(&[f, u_ref]);
        Ok(self.head.forward(tape, x))
    }
}

/// Recurrent map from a relative dataset to the current relative state.
///
/// Each entry is embedded from `(dx, du, aoi / delta_max, aoi * ts * du)`;
/// the output head adds a correction to the freshest `dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel {
    embed: MlpParams,
    rnn: RecurrentParams,
    head: MlpParams,
    kind: DynamicsKind,
    delta_max: u64,
    ts: f64,
    dropout: f64,
}

impl PredictorModel {
    fn input_dim(kind: DynamicsKind) -> usize {
        kind.diff_dim() + 2 + 1 + 2
    }

    fn entry_features<F: Scalar>(&self, dx: &StateDiff<F>, du: &ControlInput<F>, aoi: u64) -> Vec<F> {
        let mut x = dx.features();
        x.extend_from_slice(&du.0);
        let a = aoi as f64;
        x.push(F::lit(a / self.delta_max.max(1) as f64));
        let lag = F::lit(a * self.ts);
        x.push(lag * du.0[0]);
        x.push(lag * du.0[1]);
        x
    }

    /// Differentiable prediction; output is the feature vector of `w_hat`.
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, F>,
        dataset: &RelativeDataset<F>,
        dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let latest = dataset
            .latest()
            .ok_or(Error::Empty("prediction from an empty dataset"))?;
        let inputs: Vec<Var> = dataset
            .entries
            .iter()
            .map(|e| {
                let x = tape.constant(self.entry_features(&e.dx, &e.du, e.aoi));
                self.embed.forward(tape, x)
            })
            .collect();
        let dropout = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => Some((F::lit(self.dropout), rng)),
            _ => None,
        };
        let h = self.rnn.forward(tape, &inputs, dropout)?;
        let delta = self.head.forward(tape, h);
        Ok(tape.offset(delta, &latest.dx.features()))
    }

    pub fn kind(&self) -> DynamicsKind {
        self.kind
    }

    pub fn delta_max(&self) -> u64 {
        self.delta_max
    }

    /// Rescales AoI features for a scenario with different timing.
    pub fn set_timing(&mut self, delta_max: u64, ts: f64) {
        self.delta_max = delta_max;
        self.ts = ts;
    }
}

/// Every learned component, sharing one parameter store. Parameter names are
/// prefixed `cbf.`, `ctrl.` and `pred.`.
#[derive(Clone, Debug)]
pub struct Models<F> {
    pub store: ParamStore<F>,
    pub cbf: CbfModel,
    pub controller: ControllerModel,
    pub predictor: PredictorModel,
    pub kind: DynamicsKind,
    pub net: NetConfig,
}

/// Parameter groups trained together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    CbfController,
    Predictor,
}

impl ParamGroup {
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            ParamGroup::CbfController => &["cbf.", "ctrl."],
            ParamGroup::Predictor => &["pred."],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::CbfController => "cbf_ctrl",
            ParamGroup::Predictor => "pred",
        }
    }
}

fn sorted<F: Scalar>(w: &[(RobotId, StateDiff<F>)]) -> Vec<(RobotId, StateDiff<F>)> {
    let mut v = w.to_vec();
    v.sort_by_key(|(j, _)| *j);
    v
}

impl<F: Scalar> Models<F> {
    /// Fresh parameters; initialization is a pure function of `seed`.
    pub fn new(kind: DynamicsKind, net: &NetConfig, delta_max: u64, ts: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Domain::Init, 0, 0);
        let mut store = ParamStore::new();
        let d = kind.diff_dim();
        let cbf = CbfModel {
            gnn: GnnLayer::new(&mut store, "cbf.gnn", d, net, &mut rng),
            head: MlpParams::new(&mut store, "cbf.head", &dims(net.feature_dim, &net.head_hidden, 1), Activation::Relu, Activation::Tanh, &mut rng),
        };
        let controller = ControllerModel {
            gnn: GnnLayer::new(&mut store, "ctrl.gnn", d, net, &mut rng),
            head: MlpParams::new(&mut store, "ctrl.head", &dims(net.feature_dim + 2, &net.head_hidden, 2), Activation::Relu, Activation::Identity, &mut rng),
        };
        let predictor = PredictorModel {
            embed: MlpParams::new(&mut store, "pred.embed", &[PredictorModel::input_dim(kind), net.embed_dim], Activation::Tanh, Activation::Tanh, &mut rng),
            rnn: RecurrentParams::new(&mut store, "pred.rnn", net.embed_dim, net.rnn_hidden, net.rnn_layers, &mut rng),
            head: MlpParams::new(&mut store, "pred.head", &[net.rnn_hidden, d], Activation::Identity, Activation::Identity, &mut rng),
            kind,
            delta_max,
            ts,
            dropout: net.dropout,
        };
        Models {
            store,
            cbf,
            controller,
            predictor,
            kind,
            net: net.clone(),
        }
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<crate::autodiff::ParamId> {
        group
            .prefixes()
            .iter()
            .flat_map(|p| self.store.ids_with_prefix(p).collect::<Vec<_>>())
            .collect()
    }

    /// Edge constants for a neighborhood, in robot-id order.
    pub fn edge_vars(tape: &mut Tape<'_, F>, w: &[(RobotId, StateDiff<F>)]) -> Vec<Var> {
        sorted(w).iter().map(|(_, d)| tape.constant(d.features())).collect()
    }

    /// `h_theta(w_i)` in `(-1, 1)`.
    pub fn cbf_value(&self, w: &[(RobotId, StateDiff<F>)]) -> Result<F> {
        let mut tape = Tape::new(&self.store);
        let edges = Self::edge_vars(&mut tape, w);
        let h = self.cbf.forward(&mut tape, &edges)?;
        Ok(tape.scalar(h))
    }

    /// Learned correction; zero for an empty neighborhood.
    pub fn corrective(&self, w: &[(RobotId, StateDiff<F>)], u_ref: ControlInput<F>) -> Result<ControlInput<F>> {
        if w.is_empty() {
            return Ok(ControlInput::zero());
        }
        let mut tape = Tape::new(&self.store);
        let edges = Self::edge_vars(&mut tape, w);
        let u = tape.constant(u_ref.0.to_vec());
        let out = self.controller.forward(&mut tape, &edges, u)?;
        let v = tape.value(out);
        Ok(ControlInput([v[0], v[1]]))
    }

    /// Estimate of the current relative state from a nonempty dataset.
    pub fn predict(&self, dataset: &RelativeDataset<F>) -> Result<StateDiff<F>> {
        let mut tape = Tape::new(&self.store);
        let out = self
            .predictor
            .forward::<F, rand_chacha::ChaCha8Rng>(&mut tape, dataset, None)?;
        StateDiff::from_features(self.kind, tape.value(out))
    }

    /// Predicted neighborhood `w_hat_i` from per-neighbor datasets.
    pub fn predict_all(&self, data: &[(RobotId, RelativeDataset<F>)]) -> Result<Vec<(RobotId, StateDiff<F>)>> {
        data.iter()
            .filter(|(_, d)| !d.is_empty())
            .map(|(j, d)| Ok((*j, self.predict(d)?)))
            .collect()
    }
}

impl<F: Scalar> BarrierFn<F> for Models<F> {
    fn value(&self, w: &[(RobotId, StateDiff<F>)]) -> Result<F> {
        self.cbf_value(w)
    }
}

/// Intermediate values of the switching rule, for inspection and logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeuristicOutcome<F> {
    pub output: ControlInput<F>,
    pub corrective: ControlInput<F>,
    pub h_now: F,
    pub h_next: F,
    pub h_dot: F,
    /// The estimated barrier condition held with margin and the correction was dropped.
    pub suppressed: bool,
}

/// Applies the learned correction only when the estimated barrier condition
/// `h_dot + alpha h >= phi eps` fails. `w_hat(t+1)` comes from the same data
/// aged by one step.
pub fn heuristic_control<F: Scalar>(
    models: &Models<F>,
    data: &[(RobotId, RelativeDataset<F>)],
    u_ref: ControlInput<F>,
    phi: F,
    eps: F,
    alpha: F,
    ts: F,
) -> Result<HeuristicOutcome<F>> {
    let w_now = models.predict_all(data)?;
    if w_now.is_empty() {
        return Ok(HeuristicOutcome {
            output: ControlInput::zero(),
            corrective: ControlInput::zero(),
            h_now: F::zero(),
            h_next: F::zero(),
            h_dot: F::zero(),
            suppressed: false,
        });
    }
    let aged: Vec<(RobotId, RelativeDataset<F>)> = data.iter().map(|(j, d)| (*j, d.aged(1))).collect();
    let w_next = models.predict_all(&aged)?;
    let h_now = models.cbf_value(&w_now)?;
    let h_next = models.cbf_value(&w_next)?;
    let h_dot = (h_next - h_now) / ts;
    let corrective = models.corrective(&w_now, u_ref)?;
    let suppressed = h_dot + alpha * h_now >= phi * eps;
    Ok(HeuristicOutcome {
        output: if suppressed { ControlInput::zero() } else { corrective },
        corrective,
        h_now,
        h_next,
        h_dot,
        suppressed,
    })
}

/// Relative state one Euler step later for the given inputs of the two robots,
/// built on the tape so gradients reach the inputs.
pub fn successor_diff<F: Scalar>(
    tape: &mut Tape<'_, F>,
    kind: DynamicsKind,
    w: &StateDiff<F>,
    states: (&crate::dynamics::RobotState<F>, &crate::dynamics::RobotState<F>),
    u_i: Var,
    u_j: Var,
    ts: F,
) -> Var {
    use crate::dynamics::RobotState;
    let du = tape.sub(u_i, u_j);
    let step = tape.scale(du, ts);
    match kind {
        DynamicsKind::SingleIntegrator => tape.offset(step, &w.features()),
        DynamicsKind::DubinsCar => {
            // Positions move with the current speed and heading only.
            let (RobotState::DubinsCar { p: _, v: vi, theta: ti }, RobotState::DubinsCar { p: _, v: vj, theta: tj }) = states else {
                unreachable!("successor_diff called with mismatched states")
            };
            let f = w.features();
            let dpx = f[0] + ts * (*vi * ti.cos() - *vj * tj.cos());
            let dpy = f[1] + ts * (*vi * ti.sin() - *vj * tj.sin());
            let raw_theta = f[3] + tape.value(step)[1];
            let shift = wrap_angle(raw_theta) - raw_theta;
            let zeros = tape.constant(vec![F::zero(); 2]);
            let full = tape.concat(&[zeros, step]);
            tape.offset(full, &[dpx, dpy, f[2], f[3] + shift])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::RelativeMessage;

    fn w(id: RobotId, x: f64, y: f64) -> (RobotId, StateDiff<f64>) {
        (id, StateDiff::SingleIntegrator { dp: [x, y] })
    }

    fn models() -> Models<f64> {
        Models::new(DynamicsKind::SingleIntegrator, &NetConfig::default(), 5, 0.03, 3)
    }

    #[test]
    fn cbf_in_range_and_invariant() {
        let m = models();
        let a = [w(0, 0.3, 0.1), w(4, -0.2, 0.5), w(2, 0.05, -0.9)];
        let h = m.cbf_value(&a).unwrap();
        assert!(h.abs() < 1.0);
        let b = [a[2], a[0], a[1]];
        assert_eq!(h, m.cbf_value(&b).unwrap());
        assert_eq!(h, m.cbf_value(&a).unwrap());
        assert!(m.cbf_value(&[]).is_err());
    }

    #[test]
    fn corrective_zero_without_neighbors() {
        let m = models();
        assert_eq!(m.corrective(&[], ControlInput([0.4, 0.1])).unwrap(), ControlInput::zero());
        let a = [w(1, 0.3, 0.1), w(0, -0.2, 0.5)];
        let u = ControlInput([0.4, -0.1]);
        assert_eq!(m.corrective(&a, u).unwrap(), m.corrective(&[a[1], a[0]], u).unwrap());
    }

    #[test]
    fn init_is_deterministic() {
        let (a, b) = (models(), models());
        assert_eq!(a.store, b.store);
        let c = Models::<f64>::new(DynamicsKind::SingleIntegrator, &NetConfig::default(), 5, 0.03, 4);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn predictor_shapes() {
        for kind in [DynamicsKind::SingleIntegrator, DynamicsKind::DubinsCar] {
            let m = Models::<f64>::new(kind, &NetConfig::default(), 5, 0.03, 1);
            let ds = RelativeDataset {
                entries: vec![
                    RelativeMessage { dx: StateDiff::zero(kind), du: ControlInput([0.1, 0.0]), aoi: 3 },
                    RelativeMessage { dx: StateDiff::zero(kind), du: ControlInput([0.1, 0.2]), aoi: 1 },
                ],
            };
            let p = m.predict(&ds).unwrap();
            assert_eq!(p.kind(), kind);
            assert_eq!(p, m.predict(&ds).unwrap());
            assert!(m.predict(&RelativeDataset::default()).is_err());
        }
    }

    #[test]
    fn fd_derivative_arithmetic() {
        struct Table;
        impl BarrierFn<f64> for Table {
            fn value(&self, w: &[(RobotId, StateDiff<f64>)]) -> Result<f64> {
                Ok(if w[0].1.dp()[0] > 0.5 { 0.26 } else { 0.2 })
            }
        }
        let now = [w(0, 0.4, 0.0)];
        let next = [w(0, 0.6, 0.0)];
        assert!((fd_cbf_derivative(&Table, &now, &next, 0.03).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(fd_cbf_derivative(&Table, &now, &now, 0.03).unwrap(), 0.0);
        assert!(fd_cbf_derivative(&Table, &now, &[w(1, 0.6, 0.0)], 0.03).is_err());
    }

    #[test]
    fn heuristic_limits() {
        let m = models();
        let data = vec![(
            1,
            RelativeDataset {
                entries: vec![RelativeMessage {
                    dx: StateDiff::SingleIntegrator { dp: [0.3, 0.1] },
                    du: ControlInput([0.2, 0.0]),
                    aoi: 1,
                }],
            },
        )];
        let u = ControlInput([0.4, 0.0]);
        let out = heuristic_control(&m, &data, u, 1e6, 0.02, 1.0, 0.03).unwrap();
        assert!(!out.suppressed);
        assert_eq!(out.output, out.corrective);
        let none = heuristic_control(&m, &[], u, 1.0, 0.02, 1.0, 0.03).unwrap();
        assert_eq!(none.output, ControlInput::zero());
    }
}
