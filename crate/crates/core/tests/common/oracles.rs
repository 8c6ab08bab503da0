//! Independent reference implementations shared by the unit suites and
//! the acceptance run.

use fliplearn::agent::{ddqn_target, td_head_grads, QNetwork, Transition};
use fliplearn::env::{Action, Observation, FRAME_LEN};
use fliplearn::imaging::{generate_phantom, BoundingBox, GrayImage, Mask, PhantomSampler};
use fliplearn::metrics::boundary_pixels;
use fliplearn_nn::gradcheck::{self, GradCheckReport};
use fliplearn_nn::loss::RegressionLoss;
use fliplearn_nn::{Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Optimal transport cost by successive shortest paths on the bipartite
/// flow network, ground cost |i - j|.
pub fn transport_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    // Nodes: 0 source, 1..=n supply, n+1..=2n demand, 2n+1 sink.
    let nodes = 2 * n + 2;
    let sink = nodes - 1;
    let mut edges: Vec<(usize, usize, f64, f64)> = Vec::new(); // from, to, cap, cost
    let add = |edges: &mut Vec<(usize, usize, f64, f64)>, u: usize, v: usize, cap: f64, cost: f64| {
        edges.push((u, v, cap, cost));
        edges.push((v, u, 0.0, -cost));
    };
    for i in 0..n {
        add(&mut edges, 0, 1 + i, a[i], 0.0);
        add(&mut edges, 1 + n + i, sink, b[i], 0.0);
        for j in 0..n {
            add(&mut edges, 1 + i, 1 + n + j, f64::INFINITY, (i as f64 - j as f64).abs());
        }
    }
    let mut total = 0.0;
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for (k, &(u, v, cap, cost)) in edges.iter().enumerate() {
                if cap > 1e-15 && dist[u] + cost < dist[v] - 1e-12 {
                    dist[v] = dist[u] + cost;
                    prev[v] = k;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            return total;
        }
        let mut flow = f64::INFINITY;
        let mut v = sink;
        while v != 0 {
            let k = prev[v];
            flow = flow.min(edges[k].2);
            v = edges[k].0;
        }
        let mut v = sink;
        while v != 0 {
            let k = prev[v];
            edges[k].2 -= flow;
            edges[k ^ 1].2 += flow;
            v = edges[k].0;
        }
        total += flow * dist[sink];
    }
}

pub fn random_hist<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut h = vec![0.0; n];
        h[rng.random_range(0..n)] = 1.0;
        return h;
    }
    raw.iter().map(|v| v / s).collect()
}

pub fn brute_force(pred: &Mask, gt: &Mask) -> (f64, f64) {
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    let nearest = |p: (usize, usize), set: &[(usize, usize)]| {
        set.iter()
            .map(|&q| {
                let dx = p.0 as f64 - q.0 as f64;
                let dy = p.1 as f64 - q.1 as f64;
                dx * dx + dy * dy
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut hd = 0.0f64;
    let mut total = 0.0;
    for &p in &bp {
        let d = nearest(p, &bg);
        hd = hd.max(d);
        total += d;
    }
    for &g in &bg {
        let d = nearest(g, &bp);
        hd = hd.max(d);
        total += d;
    }
    (hd, total / (bp.len() + bg.len()) as f64)
}

pub fn random_mask<R: Rng>(rng: &mut R, w: usize, h: usize) -> Mask {
    let density = rng.random_range(0.05..0.7);
    let mut m = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if rng.random::<f64>() < density {
                m.set(x, y, true);
            }
        }
    }
    if m.is_empty() {
        m.set(rng.random_range(0..w), rng.random_range(0..h), true);
    }
    m
}

pub fn halves() -> GrayImage {
    let data = (0..32 * 32).map(|i| if i % 32 < 13 { 50 } else { 200 }).collect();
    GrayImage::new(32, 32, data).unwrap()
}

pub fn halves_edges() -> Vec<(usize, usize)> {
    (0..32).flat_map(|y| [(12, y), (13, y)]).collect()
}

pub fn phantom_region(seed: u64) -> (GrayImage, BoundingBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = PhantomSampler::default();
    loop {
        let profile = sampler.profile(&mut rng);
        let spec = sampler.sample(&mut rng, &profile, 8);
        if let Ok(p) = generate_phantom(&spec) {
            return (p.image.crop(&p.bbox), p.bbox);
        }
    }
}

/// Runs the double-DQN update with a lagging target table on a fixed
/// 2-state/2-action MDP; returns the learned table and value iteration's Q*.
pub fn tabular_ddqn() -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    // next[s][a], reward[s][a]
    let next = [[1usize, 0], [0, 1]];
    let reward = [[1.0, 0.0], [-1.0, 0.5]];
    let gamma = 0.9;
    let mut q_star = [[0.0f64; 2]; 2];
    for _ in 0..2000 {
        let mut n = q_star;
        for s in 0..2 {
            for a in 0..2 {
                let v = q_star[next[s][a]][0].max(q_star[next[s][a]][1]);
                n[s][a] = reward[s][a] + gamma * v;
            }
        }
        q_star = n;
    }
    let mut cur = [[0.0f64; 2]; 2];
    let mut tgt = cur;
    let alpha = 0.5;
    for sweep in 1..=3000 {
        for s in 0..2 {
            for a in 0..2 {
                let s2 = next[s][a];
                let y = ddqn_target(reward[s][a], false, gamma, cur[s2], tgt[s2]);
                cur[s][a] += alpha * (y - cur[s][a]);
            }
        }
        if sweep % 5 == 0 {
            tgt = cur;
        }
    }
    (cur, q_star)
}

pub fn random_obs<R: Rng>(rng: &mut R, channels: usize) -> Observation {
    Observation {
        channels,
        data: (0..channels * FRAME_LEN).map(|_| rng.random()).collect(),
    }
}

pub fn batch_of<R: Rng>(rng: &mut R, n: usize) -> Vec<Transition> {
    (0..n)
        .map(|i| Transition {
            s: random_obs(rng, 6),
            a: if i % 3 == 0 { Action::Erase } else { Action::Pass },
            r: rng.random_range(-2.0..1.0),
            s2: random_obs(rng, 6),
            done: i % 4 == 0,
            agent: i % 2,
        })
        .collect()
}

pub fn input(batch: &[&Transition]) -> Tensor<f64> {
    let mut x = Vec::new();
    for t in batch {
        x.extend(t.s.data.iter().map(|&v| v as f64 / 255.0));
    }
    Tensor::new(vec![batch.len(), 6, 64, 64], x).unwrap()
}

/// Finite-difference check of the two-head TD loss gradient on a random
/// batch, at 60 random parameters plus the first 10 of each head.
pub fn td_gradcheck(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = QNetwork::new(6, &mut rng).unwrap();
    let mut net: Network<f64> = q.network().cast();
    let batch = batch_of(&mut rng, 4);
    let refs: Vec<&Transition> = batch.iter().collect();
    let targets = [0.3, -1.2, 2.5, 0.0];
    let loss = RegressionLoss::Huber { delta: 1.0 };
    let x = input(&refs);

    let outs = net.forward(&x).unwrap();
    let (_, _, grads) = td_head_grads(&outs, &refs, &targets, loss);
    let analytic = net.backward(&grads.iter().cloned().map(Some).collect::<Vec<_>>()).unwrap().params;

    let n = net.num_params();
    let mut indices: Vec<usize> = (0..60).map(|_| rng.random_range(0..n)).collect();
    indices.extend(net.head_param_range(0).take(10));
    indices.extend(net.head_param_range(1).take(10));
    let point = net.params().to_vec();
    // A small step keeps the probes off the ReLU and Huber kinks.
    gradcheck::check(&point, &analytic, indices, 1e-6, 1e-4, 1e-9, |p| {
        let mut probe = net.clone();
        probe.set_params(p).unwrap();
        let outs = probe.predict(&x).unwrap();
        td_head_grads(&outs, &refs, &targets, loss).0
    })
}
