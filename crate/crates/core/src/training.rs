//! Replay buffer, barrier/controller/predictor losses and the on-policy
//! training loop with alternating parameter groups.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Gradients, Tape, Var};
use crate::comms::{LocalData, RobotId};
use crate::config::{AlternationUnit, Config, RolloutPolicy, TrainConfig, TrainMode};
use crate::dynamics::{saturate, state_diff, ControlInput, DynamicsKind, InputBounds, RobotState, StateDiff};
use crate::error::{Error, Result};
use crate::models::{successor_diff, Checkpoint, Label, Models, ParamGroup, SafetyLabeler};
use crate::rng::{self, Domain, SimRng};
use crate::scalar::wrap_angle;
use crate::sim::{decide, ControlParams, Mode, World};

/// One stored snapshot of the whole team.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub kind: DynamicsKind,
    pub states: Vec<RobotState<f64>>,
    pub u_ref: Vec<ControlInput<f64>>,
    pub data: LocalData<f64>,
    /// Per-robot tags from true distances within communication range.
    pub labels: Vec<Label>,
    /// Datasets are exact singletons and bypass the predictor.
    pub perfect_info: bool,
}

impl Sample {
    /// Labels are computed here, once.
    pub fn new(
        kind: DynamicsKind,
        states: Vec<RobotState<f64>>,
        u_ref: Vec<ControlInput<f64>>,
        data: LocalData<f64>,
        perfect_info: bool,
        labeler: &SafetyLabeler<f64>,
        comm_radius: f64,
    ) -> Result<Self> {
        let mut labels = Vec::with_capacity(states.len());
        for (i, si) in states.iter().enumerate() {
            let mut w = Vec::new();
            for (j, sj) in states.iter().enumerate() {
                if j != i && si.distance_to(sj) <= comm_radius {
                    w.push((j, state_diff(si, sj)?));
                }
            }
            labels.push(labeler.label(&w));
        }
        Ok(Sample { kind, states, u_ref, data, labels, perfect_info })
    }

    pub fn robots(&self) -> usize {
        self.states.len()
    }

    /// Unsafe if any robot is unsafe, Safe if all are safe, else Boundary.
    pub fn class(&self) -> Label {
        if self.labels.contains(&Label::Unsafe) {
            Label::Unsafe
        } else if self.labels.iter().all(|l| *l == Label::Safe) {
            Label::Safe
        } else {
            Label::Boundary
        }
    }

    /// Exact `w_ij` for every neighbor `j` robot `i` holds data about.
    pub fn true_diffs(&self, i: RobotId) -> Result<Vec<(RobotId, StateDiff<f64>)>> {
        self.data
            .neighbors(i)
            .map(|j| Ok((j, state_diff(&self.states[i], &self.states[j])?)))
            .collect()
    }

    /// What robot `i`'s networks consume: exact data under perfect
    /// information, predictions otherwise.
    pub fn inputs(&self, models: &Models<f64>, i: RobotId) -> Result<Vec<(RobotId, StateDiff<f64>)>> {
        if self.perfect_info {
            Ok(self.data.latest_diffs(i))
        } else {
            models.predict_all(&self.data.per_robot[i])
        }
    }
}

/// FIFO buffer with per-class indices for balanced draws.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<(Sample, Label)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, s: Sample) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        let c = s.class();
        self.items.push_back((s, c));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, k: usize) -> &Sample {
        &self.items[k].0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.items.iter().map(|(s, _)| s)
    }

    pub fn count(&self, class: Label) -> usize {
        self.items.iter().filter(|(_, c)| *c == class).count()
    }

    fn indices_of(&self, class: Label) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| *c == class)
            .map(|(k, _)| k)
            .collect()
    }
}

fn pick<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let n = n.min(pool.len());
    sample_indices(rng, pool.len(), n).into_iter().map(|k| pool[k]).collect()
}

/// Half unsafe and half safe snapshots when possible, otherwise every unsafe
/// one topped up with safe ones; boundary snapshots fill what is left.
pub fn balanced_sample<R: Rng + ?Sized>(buffer: &ReplayBuffer, size: usize, rng: &mut R) -> Vec<usize> {
    let unsafe_pool = buffer.indices_of(Label::Unsafe);
    let safe_pool = buffer.indices_of(Label::Safe);
    let boundary_pool = buffer.indices_of(Label::Boundary);
    if unsafe_pool.is_empty() {
        log::warn!("no unsafe samples in the buffer, drawing safe ones only");
    }
    let n_unsafe = unsafe_pool.len().min(size / 2);
    let n_safe = safe_pool.len().min(size - n_unsafe);
    let n_boundary = boundary_pool.len().min(size - n_unsafe - n_safe);
    let extra_unsafe = (size - n_unsafe - n_safe - n_boundary).min(unsafe_pool.len() - n_unsafe);
    let mut out = pick(&unsafe_pool, n_unsafe + extra_unsafe, rng);
    out.extend(pick(&safe_pool, n_safe, rng));
    out.extend(pick(&boundary_pool, n_boundary, rng));
    out
}

pub fn uniform_sample<R: Rng + ?Sized>(buffer: &ReplayBuffer, size: usize, rng: &mut R) -> Vec<usize> {
    let n = size.min(buffer.len());
    sample_indices(rng, buffer.len(), n).into_vec()
}

/// Loss weights and barrier constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_safe: f64,
    pub w_unsafe: f64,
    pub w_der: f64,
    pub w_contr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(t: &TrainConfig) -> Self {
        LossWeights {
            w_safe: t.w_safe,
            w_unsafe: t.w_unsafe,
            w_der: t.w_der,
            w_contr: t.w_contr,
            alpha: t.alpha,
            eps: t.eps,
        }
    }
}

/// Tape nodes of one robot's terms; `None` for robots without neighbors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotTerms {
    pub cbf: Option<Var>,
    pub contr: Option<Var>,
}

fn sum_or_zero(tape: &mut Tape<'_, f64>, v: &[Var]) -> Var {
    if v.is_empty() {
        tape.constant(vec![0.0])
    } else {
        tape.sum_n(v)
    }
}

/// Barrier and control terms of every robot in one sample.
///
/// The barrier value and the correction read the network inputs of
/// [`Sample::inputs`]; the finite-difference derivative uses the true relative
/// states now and one step later, where every robot applies
/// `sat(u_ref + pi)` recomputed on the tape.
pub fn robot_terms(
    tape: &mut Tape<'_, f64>,
    models: &Models<f64>,
    sample: &Sample,
    w: &LossWeights,
    bounds: &InputBounds<f64>,
    ts: f64,
) -> Result<Vec<RobotTerms>> {
    let n = sample.robots();
    let kind = sample.kind;
    let b = bounds.bounds(kind);
    let (lo, hi) = ([-b[0], -b[1]], b);
    let mut pis: Vec<Option<Var>> = Vec::with_capacity(n);
    let mut hs: Vec<Option<Var>> = Vec::with_capacity(n);
    let mut us: Vec<Var> = Vec::with_capacity(n);
    for i in 0..n {
        let u_ref = sample.u_ref[i];
        if !sample.data.has_neighbors(i) {
            pis.push(None);
            hs.push(None);
            us.push(tape.constant(saturate(u_ref, kind, bounds)?.0.to_vec()));
            continue;
        }
        let inp = sample.inputs(models, i)?;
        let edges = Models::edge_vars(tape, &inp);
        let ur = tape.constant(u_ref.0.to_vec());
        let pi = models.controller.forward(tape, &edges, ur)?;
        let h = models.cbf.forward(tape, &edges)?;
        let raw = tape.offset(pi, &u_ref.0);
        us.push(tape.clamp(raw, &lo, &hi));
        pis.push(Some(pi));
        hs.push(Some(h));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (Some(pi), Some(h)) = (pis[i], hs[i]) else {
            out.push(RobotTerms { cbf: None, contr: None });
            continue;
        };
        let now = sample.true_diffs(i)?;
        let h_now = if sample.perfect_info {
            h
        } else {
            let e = Models::edge_vars(tape, &now);
            models.cbf.forward(tape, &e)?
        };
        let next: Vec<Var> = now
            .iter()
            .map(|(j, d)| successor_diff(tape, kind, d, (&sample.states[i], &sample.states[*j]), us[i], us[*j], ts))
            .collect();
        let h_next = models.cbf.forward(tape, &next)?;
        let dh = tape.sub(h_next, h_now);
        let h_dot = tape.scale(dh, 1.0 / ts);
        // eps - h_dot - alpha h
        let a = tape.scale(h, w.alpha);
        let s = tape.add(h_dot, a);
        let neg = tape.scale(s, -1.0);
        let arg = tape.offset(neg, &[w.eps]);
        let der = tape.hinge(arg);
        let mut terms = vec![tape.scale(der, w.w_der)];
        match sample.labels[i] {
            Label::Safe => {
                let neg = tape.scale(h, -1.0);
                let arg = tape.offset(neg, &[w.eps]);
                let t = tape.hinge(arg);
                terms.push(tape.scale(t, w.w_safe));
            }
            Label::Unsafe => {
                let arg = tape.offset(h, &[w.eps]);
                let t = tape.hinge(arg);
                terms.push(tape.scale(t, w.w_unsafe));
            }
            Label::Boundary => {}
        }
        let cbf = tape.sum_n(&terms);
        let nrm = tape.norm(pi);
        let contr = tape.scale(nrm, w.w_contr);
        out.push(RobotTerms { cbf: Some(cbf), contr: Some(contr) });
    }
    Ok(out)
}

/// Barrier and control parts of a loss, as tape nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossNodes {
    pub cbf: Var,
    pub contr: Var,
    pub total: Var,
}

/// `(1/R) sum_i (L_cbf,i + L_contr,i)` for one sample.
pub fn sample_loss(
    tape: &mut Tape<'_, f64>,
    models: &Models<f64>,
    sample: &Sample,
    w: &LossWeights,
    bounds: &InputBounds<f64>,
    ts: f64,
) -> Result<LossNodes> {
    let terms = robot_terms(tape, models, sample, w, bounds, ts)?;
    let cbfs: Vec<Var> = terms.iter().filter_map(|t| t.cbf).collect();
    let contrs: Vec<Var> = terms.iter().filter_map(|t| t.contr).collect();
    let r = 1.0 / sample.robots() as f64;
    let c = sum_or_zero(tape, &cbfs);
    let cbf = tape.scale(c, r);
    let c = sum_or_zero(tape, &contrs);
    let contr = tape.scale(c, r);
    let total = tape.add(cbf, contr);
    Ok(LossNodes { cbf, contr, total })
}

/// Mean of [`sample_loss`] over a nonempty batch.
pub fn batch_loss(
    tape: &mut Tape<'_, f64>,
    models: &Models<f64>,
    batch: &[&Sample],
    w: &LossWeights,
    bounds: &InputBounds<f64>,
    ts: f64,
) -> Result<LossNodes> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut parts = Vec::with_capacity(batch.len());
    for s in batch {
        parts.push(sample_loss(tape, models, s, w, bounds, ts)?);
    }
    let k = 1.0 / batch.len() as f64;
    let mut mean = |sel: fn(&LossNodes) -> Var| {
        let v: Vec<Var> = parts.iter().map(sel).collect();
        let s = tape.sum_n(&v);
        tape.scale(s, k)
    };
    let cbf = mean(|p| p.cbf);
    let contr = mean(|p| p.contr);
    let total = mean(|p| p.total);
    Ok(LossNodes { cbf, contr, total })
}

/// `||w_hat - w|| / ||w||` as a tape node; `None` when `||w||` is negligible.
pub fn relative_error(tape: &mut Tape<'_, f64>, w_hat: Var, w: &StateDiff<f64>) -> Option<Var> {
    let n = w.norm();
    if n < 1e-9 {
        return None;
    }
    let f = w.features();
    let mut neg = f.iter().map(|x| -x).collect::<Vec<_>>();
    if w.kind() == DynamicsKind::DubinsCar {
        // Wrap the heading error; the shift is locally constant.
        let raw = tape.value(w_hat)[3] - f[3];
        neg[3] += wrap_angle(raw) - raw;
    }
    let d = tape.offset(w_hat, &neg);
    let e = tape.norm(d);
    Some(tape.scale(e, 1.0 / n))
}

/// Predictor loss of one sample and the number of pairs it sums over.
pub fn sample_pred_loss<R: Rng + ?Sized>(
    tape: &mut Tape<'_, f64>,
    models: &Models<f64>,
    sample: &Sample,
    mut dropout: Option<&mut R>,
) -> Result<(Var, usize)> {
    let mut terms = Vec::new();
    for i in 0..sample.robots() {
        for (j, ds) in &sample.data.per_robot[i] {
            let w = state_diff(&sample.states[i], &sample.states[*j])?;
            if w.norm() < 1e-9 {
                continue;
            }
            let w_hat = models.predictor.forward(tape, ds, dropout.as_deref_mut())?;
            if let Some(t) = relative_error(tape, w_hat, &w) {
                terms.push(t);
            }
        }
    }
    let n = terms.len();
    Ok((sum_or_zero(tape, &terms), n))
}

/// `(1/S) sum_s L_pred`.
pub fn batch_pred_loss<R: Rng + ?Sized>(
    tape: &mut Tape<'_, f64>,
    models: &Models<f64>,
    batch: &[&Sample],
    mut dropout: Option<&mut R>,
) -> Result<(Var, usize)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut parts = Vec::with_capacity(batch.len());
    let mut pairs = 0;
    for s in batch {
        let (v, n) = sample_pred_loss(tape, models, s, dropout.as_deref_mut())?;
        parts.push(v);
        pairs += n;
    }
    let s = tape.sum_n(&parts);
    Ok((tape.scale(s, 1.0 / batch.len() as f64), pairs))
}

/// Mean relative prediction error over every usable pair of the samples.
pub fn mean_prediction_error<'a>(models: &Models<f64>, samples: impl IntoIterator<Item = &'a Sample>) -> Result<Option<f64>> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        for i in 0..s.robots() {
            for (j, ds) in &s.data.per_robot[i] {
                let w = state_diff(&s.states[i], &s.states[*j])?;
                if w.norm() < 1e-9 {
                    continue;
                }
                let w_hat = models.predict(ds)?;
                sum += w_hat.minus(&w)?.norm() / w.norm();
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Which group each descent step trains.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub alternate: bool,
    pub first: ParamGroup,
    pub period: u64,
    pub unit: AlternationUnit,
    pub n_desc: u64,
}

impl Schedule {
    pub fn from_config(cfg: &Config) -> Self {
        let t = &cfg.train;
        let (alternate, first) = match t.mode {
            TrainMode::Auto if cfg.scenario.perfect_info => (false, ParamGroup::CbfController),
            TrainMode::Auto => (true, t.first_group),
            TrainMode::CbfController => (false, ParamGroup::CbfController),
            TrainMode::Predictor => (false, ParamGroup::Predictor),
        };
        Schedule { alternate, first, period: t.alternation_period, unit: t.alternation_unit, n_desc: t.n_desc }
    }

    /// Group for the `k`-th descent step of the run (0-based).
    pub fn group(&self, k: u64) -> ParamGroup {
        if !self.alternate {
            return self.first;
        }
        let block = match self.unit {
            AlternationUnit::UpdateEvents => k / self.n_desc / self.period,
            AlternationUnit::DescentSteps => k / self.period,
        };
        match (block % 2 == 0, self.first) {
            (true, g) => g,
            (false, ParamGroup::CbfController) => ParamGroup::Predictor,
            (false, ParamGroup::Predictor) => ParamGroup::CbfController,
        }
    }
}

/// One line of the training log, written after every update event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub global_step: u64,
    pub event: u64,
    pub group: String,
    pub loss_cbf: Option<f64>,
    pub loss_contr: Option<f64>,
    pub loss_pred: Option<f64>,
    pub unsafe_fraction: f64,
    pub epsilon_t: f64,
}

pub struct TrainOutput {
    pub models: Models<f64>,
    pub log: Vec<LogRow>,
    pub steps: u64,
    pub episodes: u64,
    pub descent_steps: u64,
}

/// Fresh parameters, or those of `cfg.train.init_checkpoint`.
pub fn initial_models(cfg: &Config, seed: u64) -> Result<Models<f64>> {
    let s = &cfg.scenario;
    match &cfg.train.init_checkpoint {
        None => Ok(Models::new(s.dynamics, &cfg.net, s.delta_max, s.ts, seed)),
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ck.check_kind(s.dynamics).map_err(|e| Error::Config(e.to_string()))?;
            if ck.meta.net != cfg.net {
                return Err(Error::Config("init checkpoint network sizes differ from the config".into()));
            }
            let mut m: Models<f64> = ck.to_models()?;
            m.predictor.set_timing(s.delta_max, s.ts);
            Ok(m)
        }
    }
}

struct Trainer<'c> {
    cfg: &'c Config,
    weights: LossWeights,
    schedule: Schedule,
    adam: Adam<f64>,
    sampling: SimRng,
    descents: u64,
}

impl Trainer<'_> {
    fn update(&mut self, models: &mut Models<f64>, buffer: &ReplayBuffer, event: u64, step: u64) -> Result<LogRow> {
        let t = &self.cfg.train;
        let s = &self.cfg.scenario;
        let group = self.schedule.group(self.descents);
        let (mut cbf, mut contr, mut pred, mut unsafe_frac) = (0.0, 0.0, 0.0, 0.0);
        let mut counts = [0u64; 2];
        for _ in 0..t.n_desc {
            let g = self.schedule.group(self.descents);
            let idx = match g {
                ParamGroup::CbfController => balanced_sample(buffer, t.batch_size, &mut self.sampling),
                ParamGroup::Predictor => uniform_sample(buffer, t.batch_size, &mut self.sampling),
            };
            let batch: Vec<&Sample> = idx.iter().map(|&k| buffer.get(k)).collect();
            unsafe_frac += batch.iter().filter(|s| s.class() == Label::Unsafe).count() as f64 / batch.len() as f64;
            let grads: Gradients<f64> = {
                let mut tape = Tape::new(&models.store);
                let out = match g {
                    ParamGroup::CbfController => {
                        let l = batch_loss(&mut tape, models, &batch, &self.weights, &s.bounds, s.ts)?;
                        cbf += tape.scalar(l.cbf);
                        contr += tape.scalar(l.contr);
                        counts[0] += 1;
                        l.total
                    }
                    ParamGroup::Predictor => {
                        let (l, _) = batch_pred_loss(&mut tape, models, &batch, Some(&mut self.sampling))?;
                        pred += tape.scalar(l);
                        counts[1] += 1;
                        l
                    }
                };
                tape.backward(out)
                    .map_err(|e| Error::Numeric(format!("update event {event} ({}): {e}", g.name())))?
                    .params
            };
            let ids = models.group_ids(g);
            self.adam.step(&mut models.store, &grads, &ids)?;
            if !models.store.all_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after update event {event}")));
            }
            self.descents += 1;
        }
        let mean = |v: f64, c: u64| (c > 0).then(|| v / c as f64);
        Ok(LogRow {
            global_step: step,
            event,
            group: group.name().to_string(),
            loss_cbf: mean(cbf, counts[0]),
            loss_contr: mean(contr, counts[0]),
            loss_pred: mean(pred, counts[1]),
            unsafe_fraction: unsafe_frac / t.n_desc as f64,
            epsilon_t: t.epsilon(step),
        })
    }
}

/// Runs `cfg.train.steps` simulation steps of on-policy training.
///
/// `on_checkpoint(models, event, step)` is called every
/// `checkpoint_every` update events.
pub fn run_training(
    cfg: &Config,
    models: Models<f64>,
    seed: u64,
    on_checkpoint: &mut dyn FnMut(&Models<f64>, u64, u64) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut models = models;
    let t = &cfg.train;
    let s = &cfg.scenario;
    if models.kind != s.dynamics {
        return Err(Error::Config("model dynamics differ from the scenario".into()));
    }
    let labeler = SafetyLabeler::new(s.d_coll, s.d_safe)?;
    let mut trainer = Trainer {
        cfg,
        weights: LossWeights::from(t),
        schedule: Schedule::from_config(cfg),
        adam: Adam::new(AdamConfig { lr: t.lr, ..AdamConfig::default() }, &models.store),
        sampling: rng::stream(seed, Domain::Sampling, 0, 0),
        descents: 0,
    };
    let mut explore = rng::stream(seed, Domain::Exploration, 0, 0);
    let ctl = ControlParams { alpha: t.alpha, eps: t.eps, phi: t.phi };
    let policy = if s.perfect_info { Mode::Gnn } else { Mode::GnnPredictor };
    let mut buffer = ReplayBuffer::new(t.buffer_capacity);
    let mut log = Vec::new();
    let (mut step, mut episode, mut event) = (0u64, 0u64, 0u64);
    'outer: while step < t.steps {
        let mut world = World::random(s, seed, episode)?;
        episode += 1;
        for _ in 0..s.max_steps {
            let data = world.observe()?;
            step += 1;
            let greedy = explore.gen::<f64>() >= t.epsilon(step);
            let mode = if greedy && t.rollout_policy == RolloutPolicy::Learned { policy } else { Mode::NominalOnly };
            let decisions = decide(mode, Some(&models), &world, &data, &ctl)?;
            let u_ref: Vec<_> = decisions.iter().map(|d| d.u_ref).collect();
            let applied: Vec<_> = decisions.iter().map(|d| d.applied).collect();
            buffer.push(Sample::new(s.dynamics, world.states.clone(), u_ref, data, s.perfect_info, &labeler, s.comm_radius)?);
            world.apply(&applied)?;
            if step % t.delta_train == 0 {
                event += 1;
                let row = trainer.update(&mut models, &buffer, event, step)?;
                log::info!(
                    "event {event} step {step} {} cbf {:?} contr {:?} pred {:?}",
                    row.group, row.loss_cbf, row.loss_contr, row.loss_pred
                );
                log.push(row);
                if t.checkpoint_every > 0 && event % t.checkpoint_every == 0 {
                    on_checkpoint(&models, event, step)?;
                }
            }
            if step >= t.steps {
                break 'outer;
            }
            if world.all_at_goal() {
                break;
            }
        }
    }
    Ok(TrainOutput { models, log, steps: step, episodes: episode, descent_steps: trainer.descents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::{RelativeDataset, RelativeMessage};

    fn si(x: f64, y: f64) -> RobotState<f64> {
        RobotState::SingleIntegrator { p: [x, y] }
    }

    fn sample_with(labels: Vec<Label>) -> Sample {
        let n = labels.len();
        Sample {
            kind: DynamicsKind::SingleIntegrator,
            states: (0..n).map(|k| si(k as f64, 0.0)).collect(),
            u_ref: vec![ControlInput::zero(); n],
            data: LocalData { per_robot: vec![Vec::new(); n] },
            labels,
            perfect_info: true,
        }
    }

    fn buffer(safe: usize, unsafe_: usize, boundary: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(10_000);
        for _ in 0..safe {
            b.push(sample_with(vec![Label::Safe]));
        }
        for _ in 0..unsafe_ {
            b.push(sample_with(vec![Label::Unsafe]));
        }
        for _ in 0..boundary {
            b.push(sample_with(vec![Label::Boundary]));
        }
        b
    }

    fn classes(b: &ReplayBuffer, idx: &[usize]) -> [usize; 3] {
        let mut c = [0; 3];
        for &k in idx {
            c[match b.get(k).class() {
                Label::Unsafe => 0,
                Label::Safe => 1,
                Label::Boundary => 2,
            }] += 1;
        }
        c
    }

    #[test]
    fn balanced_sampling_examples() {
        let mut r = rng::stream(0, Domain::Test, 0, 0);
        let b = buffer(100, 5, 0);
        assert_eq!(classes(&b, &balanced_sample(&b, 32, &mut r)), [5, 27, 0]);
        let b = buffer(50, 50, 0);
        assert_eq!(classes(&b, &balanced_sample(&b, 32, &mut r)), [16, 16, 0]);
        let b = buffer(50, 0, 0);
        assert_eq!(classes(&b, &balanced_sample(&b, 32, &mut r)), [0, 32, 0]);
        let b = buffer(3, 40, 10);
        assert_eq!(classes(&b, &balanced_sample(&b, 32, &mut r)), [19, 3, 10]);
        let idx = balanced_sample(&b, 32, &mut r);
        let mut u = idx.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), idx.len());
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = ReplayBuffer::new(3);
        for k in 0..5 {
            b.push(sample_with(vec![if k < 2 { Label::Unsafe } else { Label::Safe }]));
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.count(Label::Unsafe), 0);
    }

    #[test]
    fn labels_use_true_distances() {
        let states = vec![si(0.0, 0.0), si(0.05, 0.0), si(2.0, 2.0)];
        let s = Sample::new(
            DynamicsKind::SingleIntegrator,
            states,
            vec![ControlInput::zero(); 3],
            LocalData { per_robot: vec![Vec::new(); 3] },
            true,
            &SafetyLabeler::default(),
            1.0,
        )
        .unwrap();
        assert_eq!(s.labels, vec![Label::Unsafe, Label::Unsafe, Label::Safe]);
        assert_eq!(s.class(), Label::Unsafe);
    }

    #[test]
    fn schedule_alternates_by_events() {
        let mut cfg = Config::default();
        cfg.scenario.perfect_info = false;
        let s = Schedule::from_config(&cfg);
        assert_eq!(s.group(0), ParamGroup::CbfController);
        assert_eq!(s.group(99), ParamGroup::CbfController);
        assert_eq!(s.group(100), ParamGroup::Predictor);
        assert_eq!(s.group(200), ParamGroup::CbfController);
        cfg.train.alternation_unit = AlternationUnit::DescentSteps;
        let s = Schedule::from_config(&cfg);
        assert_eq!(s.group(10), ParamGroup::Predictor);
        cfg.scenario.perfect_info = true;
        let s = Schedule::from_config(&cfg);
        assert_eq!(s.group(100), ParamGroup::CbfController);
    }

    #[test]
    fn pred_loss_zero_for_exact_prediction() {
        // Zero predictor weights leave the residual path, which returns the
        // freshest dx; with aoi 0 that is exact.
        let mut m = Models::<f64>::new(DynamicsKind::SingleIntegrator, &Default::default(), 5, 0.03, 0);
        for id in m.store.ids_with_prefix("pred.head").collect::<Vec<_>>() {
            m.store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let states = vec![si(0.0, 0.0), si(0.3, 0.4)];
        let ds = |d: [f64; 2]| RelativeDataset {
            entries: vec![RelativeMessage { dx: StateDiff::SingleIntegrator { dp: d }, du: ControlInput::zero(), aoi: 0 }],
        };
        let s = Sample {
            kind: DynamicsKind::SingleIntegrator,
            states,
            u_ref: vec![ControlInput::zero(); 2],
            data: LocalData { per_robot: vec![vec![(1, ds([-0.3, -0.4]))], vec![(0, ds([0.3, 0.4]))]] },
            labels: vec![Label::Safe; 2],
            perfect_info: false,
        };
        let mut tape = Tape::new(&m.store);
        let (l, n) = sample_pred_loss::<SimRng>(&mut tape, &m, &s, None).unwrap();
        assert_eq!(n, 2);
        assert!(tape.scalar(l).abs() < 1e-15);
        assert_eq!(mean_prediction_error(&m, [&s]).unwrap(), Some(0.0));
    }
}
