//! Slotted broadcast channel with disk connectivity and Poisson delays.
//!
//! Each step every robot broadcasts `{x_j(t), u_j(t-1), t}` to all robots within
//! the communication radius. The message reaches every receiver after the same
//! random number of steps, drawn once per sender per step. Receivers keep the
//! messages whose age-of-information (AoI) does not exceed `delta_max` and turn
//! them into relative messages using their own state history.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dynamics::{state_diff, ControlInput, RobotState, StateDiff};
use crate::error::{Error, Result};
use crate::rng::{self, Domain, SimRng};
use crate::scalar::Scalar;

pub type RobotId = usize;
/// Discrete time index.
pub type Step = u64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message<F> {
    pub sender: RobotId,
    pub state: RobotState<F>,
    /// Input applied at `timestamp - 1`, zero at the first step.
    pub prev_input: ControlInput<F>,
    pub timestamp: Step,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InFlight<F> {
    pub message: Message<F>,
    pub receiver: RobotId,
    pub delivery_step: Step,
}

impl<F> InFlight<F> {
    pub fn delay(&self) -> Step {
        self.delivery_step - self.message.timestamp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeMessage<F> {
    /// `x_i(t') ⊖ x_j(t')`
    pub dx: StateDiff<F>,
    /// `u_i(t'-1) - u_j(t'-1)`
    pub du: ControlInput<F>,
    /// `t - t'`
    pub aoi: Step,
}

/// Relative messages from one sender, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeDataset<F> {
    pub entries: Vec<RelativeMessage<F>>,
}

impl<F: Scalar> RelativeDataset<F> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Freshest entry (smallest AoI).
    pub fn latest(&self) -> Option<&RelativeMessage<F>> {
        self.entries.last()
    }

    /// Same data seen one step later.
    pub fn aged(&self, steps: Step) -> Self {
        RelativeDataset {
            entries: self
                .entries
                .iter()
                .map(|e| RelativeMessage { aoi: e.aoi + steps, ..*e })
                .collect(),
        }
    }
}

/// Poisson delay with mean `c_del * neighbor_count`, in steps.
pub fn sample_delay<R: Rng + ?Sized>(neighbor_count: usize, c_del: f64, rng: &mut R) -> Step {
    let mean = c_del * neighbor_count as f64;
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive finite Poisson mean");
    dist.sample(rng) as Step
}

/// Ring buffer of a robot's own `(t, x(t), u(t-1))`.
#[derive(Clone, Debug)]
pub struct SelfHistory<F> {
    depth: usize,
    entries: VecDeque<(Step, RobotState<F>, ControlInput<F>)>,
}

impl<F: Scalar> SelfHistory<F> {
    pub fn new(depth: usize) -> Self {
        SelfHistory {
            depth: depth.max(1),
            entries: VecDeque::with_capacity(depth.max(1)),
        }
    }

    pub fn push(&mut self, t: Step, state: RobotState<F>, prev_input: ControlInput<F>) {
        if self.entries.len() == self.depth {
            self.entries.pop_front();
        }
        self.entries.push_back((t, state, prev_input));
    }

    pub fn get(&self, t: Step) -> Option<(&RobotState<F>, &ControlInput<F>)> {
        let (first, ..) = self.entries.front()?;
        let idx = t.checked_sub(*first)? as usize;
        self.entries
            .get(idx)
            .filter(|e| e.0 == t)
            .map(|(_, s, u)| (s, u))
    }
}

/// Turns the messages robot `receiver` holds from one sender into its relative
/// dataset at step `t`. Messages older than `delta_max` are skipped.
pub fn build_relative_dataset<'a, F: Scalar>(
    receiver: RobotId,
    t: Step,
    inbox: impl IntoIterator<Item = &'a Message<F>>,
    history: &SelfHistory<F>,
    delta_max: Step,
) -> Result<RelativeDataset<F>> {
    let mut entries: Vec<(Step, RelativeMessage<F>)> = Vec::new();
    for msg in inbox {
        let tp = msg.timestamp;
        if tp > t || t - tp > delta_max {
            continue;
        }
        let (x_i, u_i) = history
            .get(tp)
            .ok_or(Error::MissingHistory { robot: receiver, step: tp })?;
        entries.push((
            tp,
            RelativeMessage {
                dx: state_diff(x_i, &msg.state)?,
                du: *u_i - msg.prev_input,
                aoi: t - tp,
            },
        ));
    }
    entries.sort_by_key(|(tp, _)| *tp);
    entries.dedup_by_key(|(tp, _)| *tp);
    Ok(RelativeDataset {
        entries: entries.into_iter().map(|(_, e)| e).collect(),
    })
}

/// What every robot knows about its neighbors at one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalData<F> {
    /// `per_robot[i]` lists `(j, D_{i<-j})` for nonempty datasets, sorted by `j`.
    pub per_robot: Vec<Vec<(RobotId, RelativeDataset<F>)>>,
}

impl<F: Scalar> LocalData<F> {
    pub fn robots(&self) -> usize {
        self.per_robot.len()
    }

    pub fn neighbors(&self, i: RobotId) -> impl Iterator<Item = RobotId> + '_ {
        self.per_robot[i].iter().map(|(j, _)| *j)
    }

    pub fn has_neighbors(&self, i: RobotId) -> bool {
        !self.per_robot[i].is_empty()
    }

    /// Freshest relative state per neighbor, used as if it were current.
    pub fn latest_diffs(&self, i: RobotId) -> Vec<(RobotId, StateDiff<F>)> {
        self.per_robot[i]
            .iter()
            .filter_map(|(j, d)| d.latest().map(|e| (*j, e.dx)))
            .collect()
    }

    pub fn max_aoi(&self, i: RobotId) -> Option<Step> {
        self.per_robot[i]
            .iter()
            .filter_map(|(_, d)| d.entries.first().map(|e| e.aoi))
            .max()
    }
}

/// Directed message-passing graph; edge `(i, j)` means `i` holds data from `j`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Graph {
    pub in_neighbors: Vec<Vec<RobotId>>,
}

impl Graph {
    pub fn edges(&self) -> Vec<(RobotId, RobotId)> {
        self.in_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, js)| js.iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn has_edge(&self, i: RobotId, j: RobotId) -> bool {
        self.in_neighbors.get(i).is_some_and(|js| js.contains(&j))
    }
}

pub fn graph_snapshot<F: Scalar>(data: &LocalData<F>) -> Graph {
    Graph {
        in_neighbors: data
            .per_robot
            .iter()
            .map(|v| v.iter().filter(|(_, d)| !d.is_empty()).map(|(j, _)| *j).collect())
            .collect(),
    }
}

fn in_range<F: Scalar>(a: &RobotState<F>, b: &RobotState<F>, radius: F) -> bool {
    a.distance_to(b) <= radius
}

/// Perfect information: every robot in range is known exactly, with AoI zero.
pub fn perfect_local_data<F: Scalar>(
    states: &[RobotState<F>],
    prev_inputs: &[ControlInput<F>],
    comm_radius: F,
) -> Result<LocalData<F>> {
    let n = states.len();
    let mut per_robot = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::new();
        for j in 0..n {
            if i != j && in_range(&states[i], &states[j], comm_radius) {
                row.push((
                    j,
                    RelativeDataset {
                        entries: vec![RelativeMessage {
                            dx: state_diff(&states[i], &states[j])?,
                            du: prev_inputs[i] - prev_inputs[j],
                            aoi: 0,
                        }],
                    },
                ));
            }
        }
        per_robot.push(row);
    }
    Ok(LocalData { per_robot })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub comm_radius: f64,
    pub c_del: f64,
    pub delta_max: Step,
    #[serde(default)]
    pub erasure_prob: f64,
}

/// Channel statistics, used to check conservation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub enqueued: u64,
    pub delivered: u64,
    pub erased: u64,
}

pub struct Channel<F> {
    cfg: ChannelConfig,
    queue: BTreeMap<Step, Vec<InFlight<F>>>,
    delay_rngs: Vec<SimRng>,
    erasure_rng: SimRng,
    histories: Vec<SelfHistory<F>>,
    /// `inbox[i][j]` holds messages from `j` keyed by timestamp.
    inbox: Vec<Vec<BTreeMap<Step, Message<F>>>>,
    stats: ChannelStats,
}

impl<F: Scalar> Channel<F> {
    /// Delay streams are `(seed, episode, robot)`.
    pub fn new(robots: usize, cfg: ChannelConfig, seed: u64, episode: u64) -> Self {
        Channel {
            cfg,
            queue: BTreeMap::new(),
            delay_rngs: (0..robots)
                .map(|r| rng::stream(seed, Domain::Delay, episode, r as u64))
                .collect(),
            erasure_rng: rng::stream(seed, Domain::Erasure, episode, 0),
            histories: (0..robots)
                .map(|_| SelfHistory::new(cfg.delta_max as usize + 2))
                .collect(),
            inbox: vec![vec![BTreeMap::new(); robots]; robots],
            stats: ChannelStats::default(),
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn in_flight(&self) -> usize {
        self.queue.values().map(Vec::len).sum()
    }

    /// Every robot transmits `I_j(t)` to the robots in range.
    /// Returns the newly enqueued messages.
    pub fn broadcast(
        &mut self,
        states: &[RobotState<F>],
        prev_inputs: &[ControlInput<F>],
        t: Step,
    ) -> Vec<InFlight<F>> {
        let n = states.len();
        let radius = F::lit(self.cfg.comm_radius);
        let mut sent = Vec::new();
        for j in 0..n {
            let receivers: Vec<RobotId> = (0..n)
                .filter(|&i| i != j && in_range(&states[i], &states[j], radius))
                .collect();
            if receivers.is_empty() {
                continue;
            }
            let delay = sample_delay(receivers.len(), self.cfg.c_del, &mut self.delay_rngs[j]);
            let message = Message {
                sender: j,
                state: states[j],
                prev_input: prev_inputs[j],
                timestamp: t,
            };
            for i in receivers {
                if self.cfg.erasure_prob > 0.0 && self.erasure_rng.gen::<f64>() < self.cfg.erasure_prob
                {
                    self.stats.erased += 1;
                    continue;
                }
                let flight = InFlight {
                    message,
                    receiver: i,
                    delivery_step: t + delay,
                };
                self.queue.entry(flight.delivery_step).or_default().push(flight);
                self.stats.enqueued += 1;
                sent.push(flight);
            }
        }
        sent
    }

    /// Removes and returns the messages due at step `t`, grouped by receiver.
    pub fn deliver(&mut self, t: Step) -> Vec<Vec<Message<F>>> {
        let mut out = vec![Vec::new(); self.inbox.len()];
        // Nothing is ever scheduled in the past, but drain it anyway.
        let due: Vec<Step> = self.queue.range(..=t).map(|(k, _)| *k).collect();
        for k in due {
            for f in self.queue.remove(&k).unwrap_or_default() {
                self.stats.delivered += 1;
                out[f.receiver].push(f.message);
            }
        }
        out
    }

    /// Full step of the channel at time `t`: record own history, broadcast,
    /// deliver, prune, and build every relative dataset.
    pub fn advance(
        &mut self,
        states: &[RobotState<F>],
        prev_inputs: &[ControlInput<F>],
        t: Step,
    ) -> Result<(LocalData<F>, Vec<InFlight<F>>)> {
        for (i, h) in self.histories.iter_mut().enumerate() {
            h.push(t, states[i], prev_inputs[i]);
        }
        let sent = self.broadcast(states, prev_inputs, t);
        let delivered = self.deliver(t);
        let dmax = self.cfg.delta_max;
        for (i, msgs) in delivered.into_iter().enumerate() {
            for m in msgs {
                if t - m.timestamp <= dmax {
                    self.inbox[i][m.sender].insert(m.timestamp, m);
                }
            }
        }
        let mut per_robot = Vec::with_capacity(self.inbox.len());
        for (i, row) in self.inbox.iter_mut().enumerate() {
            let mut out = Vec::new();
            for (j, msgs) in row.iter_mut().enumerate() {
                msgs.retain(|tp, _| t - *tp <= dmax);
                if msgs.is_empty() {
                    continue;
                }
                let ds = build_relative_dataset(i, t, msgs.values(), &self.histories[i], dmax)?;
                out.push((j, ds));
            }
            per_robot.push(out);
        }
        Ok((LocalData { per_robot }, sent))
    }
}
