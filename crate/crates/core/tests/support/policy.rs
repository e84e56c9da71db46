//! Shared fixtures for the policy gradient and masking checks.
#![allow(dead_code)]

use hcgl::csi::{CsiConfig, CsiState, TaskSpec};
use hcgl::ecg::{build_targets, EcgTopology};
use hcgl::mappo::TrainConfig;
use hcgl::policy::{
    action_indices, sample_of, ActMode, GraphBatch, LossScale, LossTargets, NodeRepresentations,
    Policy, PolicyDims,
};
use hcgl_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_AGENTS: usize = 6;
pub const N_CLUSTERS: usize = 4;

pub fn env_config(n_agents: usize) -> CsiConfig {
    let mut c = CsiConfig::for_task(TaskSpec {
        n_agents,
        k_threshold: 1,
        m_invaders: 2,
    });
    c.n_bases = 2;
    c
}

pub fn random_topology(rng: &mut ChaCha8Rng) -> EcgTopology {
    let c = env_config(N_AGENTS);
    let targets = build_targets(c.primitive_set, c.m_invaders, c.n_bases, true);
    EcgTopology::random(rng, N_AGENTS, N_CLUSTERS, &targets).unwrap()
}

pub fn policy(d: usize, rng: &mut ChaCha8Rng) -> Policy {
    let topo = random_topology(rng);
    Policy::new(PolicyDims::for_task(&env_config(N_AGENTS), &topo, d), rng)
}

/// `count` random states; with `fan_out` > 1 the topologies are extended
/// and the environment holds `N_AGENTS · fan_out` agents.
pub fn states(
    p: &Policy,
    fan_out: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(NodeRepresentations, EcgTopology)> {
    let cfg = env_config(N_AGENTS * fan_out);
    (0..count)
        .map(|_| {
            let mut topo = random_topology(rng);
            if fan_out > 1 {
                topo = topo.extend(fan_out).unwrap();
            }
            let mut env = CsiState::reset(&cfg, rng);
            for _ in 0..rng.gen_range(0..30) {
                let acts: Vec<usize> = (0..cfg.n_agents).map(|_| rng.gen_range(0..6)).collect();
                if env.step(&acts, &cfg).unwrap().done {
                    break;
                }
            }
            (p.prepare(&env, &topo, &cfg), topo)
        })
        .collect()
}

pub fn batch(p: &Policy, s: &[(NodeRepresentations, EcgTopology)]) -> GraphBatch {
    let samples: Vec<_> = s.iter().map(|(r, t)| sample_of(r, t)).collect();
    GraphBatch::new(&p.dims, &samples).unwrap()
}

pub fn loss_value(
    p: &Policy,
    params: &[Tensor],
    b: &GraphBatch,
    t: &LossTargets,
    scale: LossScale,
) -> f64 {
    let mut tape = Tape::new(params);
    let (l, _) = p
        .loss_on(&mut tape, b, t, &TrainConfig::default().coefs(), scale)
        .unwrap();
    tape.value(l).item()
}

/// Max relative error between the analytic gradient of the full training
/// loss and central differences, over every parameter entry.
pub fn full_loss_gradcheck(seed: u64, fan_out: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = policy(8, &mut rng);
    if fan_out > 1 {
        p = p.surgery_for_extension(fan_out, &mut rng).unwrap();
    }
    let s = states(&p, fan_out, 3, &mut rng);
    let b = batch(&p, &s);
    let mut rngs: Vec<ChaCha8Rng> = (0..b.len())
        .map(|i| ChaCha8Rng::seed_from_u64(seed ^ i as u64))
        .collect();
    let decisions = p.act_batch(&b, &mut rngs, ActMode::Sample).unwrap();
    let mut learned: Vec<bool> = (0..b.len()).map(|_| rng.gen_bool(0.8)).collect();
    learned[0] = true;
    let targets = LossTargets {
        actions: decisions
            .iter()
            .map(|d| action_indices(&d.action))
            .collect(),
        old_log_prob: decisions
            .iter()
            .map(|d| d.log_prob() + rng.gen_range(-0.5..0.5))
            .collect(),
        old_value: decisions
            .iter()
            .map(|d| d.value + rng.gen_range(-0.5..0.5))
            .collect(),
        advantage: (0..b.len()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        returns: (0..b.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        learned: learned.clone(),
    };
    let scale = LossScale {
        policy_count: learned.iter().filter(|&&l| l).count() as f64,
        sample_count: b.len() as f64,
    };
    let analytic = {
        let mut tape = Tape::new(&p.params);
        let (l, _) = p
            .loss_on(
                &mut tape,
                &b,
                &targets,
                &TrainConfig::default().coefs(),
                scale,
            )
            .unwrap();
        tape.backward(l).unwrap()
    };
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut probe = p.params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..probe.len() {
        for j in 0..probe[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = loss_value(&p, &probe, &b, &targets, scale);
            probe[i].data_mut()[j] = orig - h;
            let down = loss_value(&p, &probe, &b, &targets, scale);
            probe[i].data_mut()[j] = orig;
            let a = analytic.get(i).map_or(0.0, |g| g.data()[j]);
            let mut err = rel(a, (up - down) / (2.0 * h));
            if err >= 1e-3 {
                // A ReLU or clip kink inside [x-h, x+h] spoils the central
                // difference; the analytic value must then match one side.
                let mid = loss_value(&p, &probe, &b, &targets, scale);
                err = rel(a, (up - mid) / h).min(rel(a, (mid - down) / h));
            }
            worst = worst.max(err);
        }
    }
    worst
}
