mod common;

use std::cell::RefCell;

use common::oracles::{batch_of, input, tabular_ddqn, td_gradcheck};
use common::{random_model, scene};
use fliplearn::agent::*;
use fliplearn::env::{Action, Observation, RewardConfig, Scene, AGENTS, FRAME_LEN};
use fliplearn::error::Result;
use fliplearn::superpixel::SeedsParams;
use fliplearn_nn::loss::RegressionLoss;
use fliplearn_nn::{Network, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn obs_with(tag: u8, channels: usize) -> Observation {
    let mut data = vec![0u8; channels * FRAME_LEN];
    data[0] = tag;
    Observation { channels, data }
}

/// Q-table keyed by the first byte of the observation; records which
/// states it was asked about.
struct Table {
    q: Vec<[[f64; 2]; AGENTS]>,
    calls: RefCell<Vec<u8>>,
}

impl QFunction for Table {
    fn q_batch(&self, states: &[&Observation]) -> Result<Vec<[[f64; 2]; AGENTS]>> {
        Ok(states
            .iter()
            .map(|s| {
                self.calls.borrow_mut().push(s.data[0]);
                self.q[s.data[0] as usize]
            })
            .collect())
    }
}

#[test]
fn greedy_selection_and_ties() {
    let t = Table {
        q: vec![[[1.2, 0.3], [0.0, 0.0]]],
        calls: RefCell::new(Vec::new()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let o = obs_with(0, 6);
    assert_eq!(select_action(&t, &o, 0, 0.0, &mut rng).unwrap(), Action::Erase);
    assert_eq!(select_action(&t, &o, 1, 0.0, &mut rng).unwrap(), Action::Pass);
    assert!(select_action(&t, &o, 0, 1.5, &mut rng).is_err());
}

#[test]
fn full_exploration_is_a_fair_coin() {
    let t = Table {
        q: vec![[[9.0, 0.0], [9.0, 0.0]]],
        calls: RefCell::new(Vec::new()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let o = obs_with(0, 6);
    let erase = (0..10_000)
        .filter(|_| select_action(&t, &o, 0, 1.0, &mut rng).unwrap() == Action::Erase)
        .count();
    let f = erase as f64 / 10_000.0;
    assert!((f - 0.5).abs() <= 0.02, "{f}");
}

fn chi_square(counts: &[usize], probs: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = n as f64 * p;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn prioritized_sampling_follows_priorities() {
    let mut b = ReplayBuffer::new(8, Sampling::Prioritized).unwrap();
    for i in 0..3 {
        b.push(i);
    }
    b.update_priorities(&[0, 1, 2], &[2.0 - PRIORITY_FLOOR, 1.0 - PRIORITY_FLOOR, -(1.0 - PRIORITY_FLOOR)]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 3];
    for _ in 0..2500 {
        for s in b.sample(3, &mut rng).unwrap() {
            counts[s] += 1;
        }
    }
    let n = 7500.0;
    let expect = [0.5, 0.25, 0.25];
    for (c, e) in counts.iter().zip(expect) {
        assert!((*c as f64 / n - e).abs() <= 0.02, "{counts:?}");
    }
    // Critical value of chi-square with 2 degrees of freedom at p = 0.01.
    assert!(chi_square(&counts, &expect) < 9.21);
    assert!((0..3).all(|s| b.priority(s) > 0.0));
}

#[test]
fn new_items_get_max_priority() {
    let mut b = ReplayBuffer::new(4, Sampling::Prioritized).unwrap();
    b.push('a');
    b.update_priorities(&[0], &[5.0]);
    b.push('b');
    assert_eq!(b.priority(1), 5.0 + PRIORITY_FLOOR);
}

#[test]
fn uniform_sampling_is_flat() {
    let mut b = ReplayBuffer::new(4, Sampling::Uniform).unwrap();
    for i in 0..4 {
        b.push(i);
    }
    b.update_priorities(&[0], &[100.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut counts = [0usize; 4];
    for _ in 0..2500 {
        for s in b.sample(4, &mut rng).unwrap() {
            counts[s] += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
    }
    assert!(chi_square(&counts, &[0.25; 4]) < 11.34);
}

#[test]
fn targets_decouple_selection_from_evaluation() {
    // State 1: current prefers erase for agent 0 and pass for agent 1; the
    // target network disagrees on both.
    let current = Table {
        q: vec![[[0.0; 2]; 2], [[5.0, 1.0], [1.0, 5.0]]],
        calls: RefCell::new(Vec::new()),
    };
    let target = Table {
        q: vec![[[0.0; 2]; 2], [[2.0, 10.0], [10.0, 3.0]]],
        calls: RefCell::new(Vec::new()),
    };
    let t = |agent, done, r| Transition {
        s: obs_with(0, 6),
        a: Action::Erase,
        r,
        s2: obs_with(1, 6),
        done,
        agent,
    };
    let batch = [t(0, false, 0.0), t(1, false, 1.0), t(0, true, 1.0)];
    let refs: Vec<&Transition> = batch.iter().collect();
    let y = q_targets(&refs, &current, &target, 0.9).unwrap();
    assert!((y[0] - 1.8).abs() < 1e-12);
    assert!((y[1] - (1.0 + 0.9 * 3.0)).abs() < 1e-12);
    assert_eq!(y[2], 1.0);
    // Both networks were consulted on the next states only.
    assert_eq!(*current.calls.borrow(), vec![1, 1, 1]);
    assert_eq!(*target.calls.borrow(), vec![1, 1, 1]);
}

#[test]
fn tabular_ddqn_reaches_value_iteration_fixed_point() {
    let (cur, q_star) = tabular_ddqn();
    for s in 0..2 {
        for a in 0..2 {
            assert!((cur[s][a] - q_star[s][a]).abs() < 1e-3, "{cur:?} vs {q_star:?}");
        }
    }
}

#[test]
fn trunk_gradient_is_the_sum_of_head_contributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = QNetwork::new(6, &mut rng).unwrap();
    let mut net: Network<f64> = q.network().cast();
    let batch = batch_of(&mut rng, 4);
    let refs: Vec<&Transition> = batch.iter().collect();
    let targets: Vec<f64> = (0..4).map(|i| [0.3, -1.2, 2.5, 0.0][i]).collect();
    let loss = RegressionLoss::Huber { delta: 1.0 };
    let x = input(&refs);

    let outs = net.forward(&x).unwrap();
    let (_, _, grads) = td_head_grads(&outs, &refs, &targets, loss);
    let analytic = net.backward(&grads.iter().cloned().map(Some).collect::<Vec<_>>()).unwrap().params;

    // Trunk gradient is the sum of the two heads' contributions.
    let mut per_head = Vec::new();
    for h in 0..AGENTS {
        net.forward(&x).unwrap();
        let only: Vec<Option<Tensor<f64>>> = (0..AGENTS).map(|k| (k == h).then(|| grads[k].clone())).collect();
        per_head.push(net.backward(&only).unwrap().params);
    }
    for i in net.trunk_param_range() {
        let sum = per_head[0][i] + per_head[1][i];
        assert!((analytic[i] - sum).abs() <= 1e-12 * (1.0 + sum.abs()), "trunk param {i}");
    }
    for h in 0..AGENTS {
        for i in net.head_param_range(1 - h) {
            assert_eq!(per_head[h][i], 0.0);
        }
    }
}

#[test]
fn td_loss_gradient_matches_finite_differences() {
    let report = td_gradcheck(8);
    assert!(report.passed(), "{report:?}");
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        steps: 60,
        batch_size: 4,
        sync_interval: 5,
        capacity: 50,
        validate_every: 0,
        ..TrainConfig::default()
    }
}

fn tiny_scenes() -> Vec<Scene> {
    let coarse = SeedsParams {
        superpixels: 6,
        ..SeedsParams::coarse()
    };
    [1u64, 2]
        .iter()
        .map(|&s| {
            let sc = scene(s, coarse);
            Scene {
                image: sc.phantom.image,
                background: sc.background,
                map: sc.map,
                conditioning: None,
            }
        })
        .collect()
}

#[test]
fn target_matches_current_right_after_sync() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = TrainConfig {
        lr: 1e-3,
        ..tiny_config()
    };
    let mut learner = Learner::new(QNetwork::new(6, &mut rng).unwrap(), &cfg);
    let batch = batch_of(&mut rng, 4);
    let refs: Vec<&Transition> = batch.iter().collect();
    for i in 1..=10 {
        learner.learn(&refs).unwrap();
        let same = learner.target.network().params() == learner.current.network().params();
        assert_eq!(same, i % cfg.sync_interval == 0, "iteration {i}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let scenes = tiny_scenes();
    let model = random_model(3);
    let cfg = TrainConfig {
        lr: 0.0,
        ..tiny_config()
    };
    let initial = QNetwork::new(6, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let out = train(&scenes, &model, RewardConfig::default(), &cfg, None).unwrap();
    assert!(out.log.last().unwrap().iteration > 0);
    assert_eq!(out.qnet.network().params(), initial.network().params());
}

#[test]
fn training_is_deterministic() {
    let scenes = tiny_scenes();
    let model = random_model(3);
    let cfg = TrainConfig {
        lr: 1e-3,
        ..tiny_config()
    };
    let a = train(&scenes, &model, RewardConfig::default(), &cfg, None).unwrap();
    let b = train(&scenes, &model, RewardConfig::default(), &cfg, None).unwrap();
    assert_eq!(training_log_csv(&a.log), training_log_csv(&b.log));
    assert_eq!(a.qnet.network().params(), b.qnet.network().params());
}
