use proptest::prelude::*;

use swarmcbf_core::comms::{perfect_local_data, Channel, ChannelConfig, LocalData};
use swarmcbf_core::dynamics::{state_diff, ControlInput, RobotState};

fn si(p: (f64, f64)) -> RobotState<f64> {
    RobotState::SingleIntegrator { p: [p.0, p.1] }
}

type Walk = Vec<Vec<(f64, f64)>>;

fn walk(robots: usize, steps: usize) -> impl Strategy<Value = (Vec<(f64, f64)>, Walk)> {
    (
        prop::collection::vec((0.0..2.0f64, 0.0..2.0f64), robots),
        prop::collection::vec(prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), robots), steps),
    )
}

fn run(
    cfg: ChannelConfig,
    start: &[(f64, f64)],
    moves: &Walk,
    seed: u64,
) -> (Vec<LocalData<f64>>, Vec<Vec<RobotState<f64>>>, Channel<f64>) {
    let mut ch = Channel::new(start.len(), cfg, seed, 0);
    let mut states: Vec<RobotState<f64>> = start.iter().map(|&p| si(p)).collect();
    let mut prev = vec![ControlInput::zero(); start.len()];
    let (mut seen, mut history) = (Vec::new(), Vec::new());
    for (t, mv) in moves.iter().enumerate() {
        let (data, _) = ch.advance(&states, &prev, t as u64).unwrap();
        seen.push(data);
        history.push(states.clone());
        for (k, &(ux, uy)) in mv.iter().enumerate() {
            let p = states[k].position();
            states[k] = si(((p[0] + 0.05 * ux).clamp(0.0, 2.0), (p[1] + 0.05 * uy).clamp(0.0, 2.0)));
            prev[k] = ControlInput([ux, uy]);
        }
    }
    (seen, history, ch)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perfect_info_degenerates_to_current_state((start, moves) in walk(5, 20), dmax in 0u64..6) {
        let cfg = ChannelConfig { comm_radius: 1.0, c_del: 0.0, delta_max: dmax, erasure_prob: 0.0 };
        let (seen, history, _) = run(cfg, &start, &moves, 3);
        for (data, states) in seen.iter().zip(&history) {
            for i in 0..states.len() {
                for (j, ds) in &data.per_robot[i] {
                    let last = ds.latest().unwrap();
                    if states[i].distance_to(&states[*j]) <= 1.0 {
                        prop_assert_eq!(last.aoi, 0);
                        prop_assert_eq!(last.dx, state_diff(&states[i], &states[*j]).unwrap());
                    } else {
                        // Left range: only older messages remain until pruned.
                        prop_assert!(last.aoi >= 1 && last.aoi <= dmax);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_is_deterministic((start, moves) in walk(4, 25), c_del in 0.0..1.5f64, seed: u64) {
        let cfg = ChannelConfig { comm_radius: 1.0, c_del, delta_max: 5, erasure_prob: 0.0 };
        let (a, _, _) = run(cfg, &start, &moves, seed);
        let (b, _, _) = run(cfg, &start, &moves, seed);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn datasets_are_bounded_and_ordered((start, moves) in walk(5, 30), c_del in 0.0..1.5f64, dmax in 1u64..8) {
        let cfg = ChannelConfig { comm_radius: 1.0, c_del, delta_max: dmax, erasure_prob: 0.0 };
        let (seen, _, mut ch) = run(cfg, &start, &moves, 9);
        for data in &seen {
            for row in &data.per_robot {
                for (_, ds) in row {
                    prop_assert!(!ds.is_empty());
                    prop_assert!(ds.entries.iter().all(|e| e.aoi <= dmax));
                    // Oldest first, one entry per source step.
                    prop_assert!(ds.entries.windows(2).all(|w| w[0].aoi > w[1].aoi));
                }
            }
        }
        ch.deliver(u64::MAX);
        let st = ch.stats();
        prop_assert_eq!(st.enqueued, st.delivered);
    }
}

#[test]
fn perfect_local_data_matches_zero_delay_channel() {
    let states = vec![si((0.0, 0.0)), si((0.5, 0.0)), si((2.0, 2.0))];
    let prev = vec![ControlInput([0.1, 0.0]), ControlInput([0.0, -0.2]), ControlInput::zero()];
    let cfg = ChannelConfig { comm_radius: 1.0, c_del: 0.0, delta_max: 0, erasure_prob: 0.0 };
    let mut ch = Channel::new(3, cfg, 1, 0);
    let (data, _) = ch.advance(&states, &prev, 0).unwrap();
    let exact = perfect_local_data(&states, &prev, 1.0).unwrap();
    assert_eq!(data, exact);
    assert!(!data.has_neighbors(2));
}
