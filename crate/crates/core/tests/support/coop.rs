//! Brute-force and geometric oracles for the coop controllers.
#![allow(dead_code)]

use hcgl::coop::{translate, CoopCommand};
use hcgl::csi::{CsiConfig, CsiState, PrimitiveSet, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type V = [f64; 3];

pub fn d(a: V, b: V) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn cfg(n: usize, k: usize, m: usize) -> CsiConfig {
    CsiConfig::for_task(TaskSpec {
        n_agents: n,
        k_threshold: k,
        m_invaders: m,
    })
}

pub fn brute_force(dir: V, set: PrimitiveSet) -> usize {
    let s = 1.0 / 3f64.sqrt();
    let mut cands: Vec<V> = vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    if set == PrimitiveSet::Fourteen {
        for x in [s, -s] {
            for y in [s, -s] {
                for z in [s, -s] {
                    cands.push([x, y, z]);
                }
            }
        }
    }
    let score = |u: &V| dir[0] * u[0] + dir[1] * u[1] + dir[2] * u[2];
    let best = cands.iter().map(score).fold(f64::MIN, f64::max);
    cands.iter().position(|u| score(u) == best).unwrap()
}

pub fn random_cluster(rng: &mut ChaCha8Rng, min_sep: f64) -> Vec<V> {
    loop {
        let n = rng.gen_range(2..7);
        let pts: Vec<V> = (0..n)
            .map(|_| {
                [
                    rng.gen_range(20.0..80.0),
                    rng.gen_range(20.0..80.0),
                    rng.gen_range(20.0..80.0),
                ]
            })
            .collect();
        let ok = (0..n).all(|i| (i + 1..n).all(|j| d(pts[i], pts[j]) > min_sep));
        if ok {
            return pts;
        }
    }
}

pub fn one_step(command: CoopCommand, pts: &[V]) -> Vec<V> {
    let c = cfg(pts.len(), 1, 1);
    let mut s = CsiState::reset(&c, &mut ChaCha8Rng::seed_from_u64(0));
    s.agent_pos = pts.to_vec();
    let ids: Vec<usize> = (0..pts.len()).collect();
    let acts = translate(command, &ids, &s, &c).unwrap();
    let dirs = c.primitive_set.directions();
    acts.iter()
        .map(|&(i, a)| [0, 1, 2].map(|k| pts[i][k] + dirs[a][k] * c.v_def))
        .collect()
}

pub fn centroid_spread(pts: &[V]) -> f64 {
    let n = pts.len() as f64;
    let c = [0, 1, 2].map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n);
    pts.iter().map(|p| d(*p, c)).sum()
}

pub fn min_pairwise(pts: &[V]) -> f64 {
    let mut m = f64::MAX;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            m = m.min(d(pts[i], pts[j]));
        }
    }
    m
}
