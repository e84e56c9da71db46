//! Cooperative Swarm Interception: defenders, invaders and bases in a
//! clamped cubic arena with a sparse terminal team reward.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsiError {
    #[error("malformed task name {name:?}: {field} {reason}")]
    TaskName {
        name: String,
        field: &'static str,
        reason: String,
    },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("expected {expected} agent actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent {agent} chose action {action}, outside the {set:?} primitive set")]
    ActionOutOfRange {
        agent: usize,
        action: usize,
        set: PrimitiveSet,
    },
    #[error("the episode has already terminated")]
    EpisodeOver,
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub(crate) fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len().max(1) as f64;
    let s = points.iter().fold([0.0; 3], |acc, p| add(acc, *p));
    scale(s, 1.0 / n)
}

/// The per-agent primitive action space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrimitiveSet {
    None,
    Six,
    Fourteen,
}

impl PrimitiveSet {
    pub fn len(self) -> usize {
        match self {
            PrimitiveSet::None => 0,
            PrimitiveSet::Six => 6,
            PrimitiveSet::Fourteen => 14,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// Unit direction of every action id, in id order: `+x, −x, +y, −y, +z, −z`,
    /// then (for `Fourteen`) the eight normalized corner diagonals with sign
    /// patterns enumerated `+++`, `++−`, `+−+`, … `−−−`.
    pub fn directions(self) -> Vec<Vec3> {
        let mut dirs = Vec::with_capacity(self.len());
        if self.len() >= 6 {
            for axis in 0..3 {
                for sign in [1.0, -1.0] {
                    let mut d = [0.0; 3];
                    d[axis] = sign;
                    dirs.push(d);
                }
            }
        }
        if self.len() == 14 {
            let s = 1.0 / 3f64.sqrt();
            for bits in 0..8u32 {
                let sign = |b: u32| if bits & (4 >> b) == 0 { s } else { -s };
                dirs.push([sign(0), sign(1), sign(2)]);
            }
        }
        dirs
    }
}

impl FromStr for PrimitiveSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "0" => Ok(PrimitiveSet::None),
            "six" | "6" => Ok(PrimitiveSet::Six),
            "fourteen" | "14" => Ok(PrimitiveSet::Fourteen),
            other => Err(format!("unknown primitive set {other:?}")),
        }
    }
}

/// `CSI-N/k/m`: defenders, trackers needed to turn an invader back, invaders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_agents: usize,
    pub k_threshold: usize,
    pub m_invaders: usize,
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CSI-{}/{}/{}",
            self.n_agents, self.k_threshold, self.m_invaders
        )
    }
}

pub fn parse_task_name(name: &str) -> Result<TaskSpec, CsiError> {
    let err = |field: &'static str, reason: String| CsiError::TaskName {
        name: name.to_string(),
        field,
        reason,
    };
    let body = name
        .trim()
        .strip_prefix("CSI-")
        .ok_or_else(|| err("prefix", "must be \"CSI-\"".into()))?;
    let parts: Vec<&str> = body.split('/').collect();
    if parts.len() != 3 {
        return Err(err(
            "layout",
            format!("expected N/k/m, found {} fields", parts.len()),
        ));
    }
    let fields = ["N", "k", "m"];
    let mut values = [0usize; 3];
    for (i, part) in parts.iter().enumerate() {
        let v: usize = part
            .parse()
            .map_err(|_| err(fields[i], format!("{part:?} is not a non-negative integer")))?;
        if v == 0 {
            return Err(err(fields[i], "must be at least 1".into()));
        }
        values[i] = v;
    }
    Ok(TaskSpec {
        n_agents: values[0],
        k_threshold: values[1],
        m_invaders: values[2],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsiConfig {
    pub n_agents: usize,
    pub k_threshold: usize,
    pub m_invaders: usize,
    pub n_bases: usize,
    pub world_extent: f64,
    pub v_def: f64,
    pub v_inv: f64,
    pub r_track: f64,
    pub r_destroy: f64,
    pub slow_fraction: f64,
    pub slow_count: usize,
    pub t_max: usize,
    pub primitive_set: PrimitiveSet,
    pub seed: u64,
}

impl Default for CsiConfig {
    fn default() -> Self {
        Self::for_task(TaskSpec {
            n_agents: 27,
            k_threshold: 3,
            m_invaders: 9,
        })
    }
}

impl CsiConfig {
    pub fn for_task(task: TaskSpec) -> Self {
        Self {
            n_agents: task.n_agents,
            k_threshold: task.k_threshold,
            m_invaders: task.m_invaders,
            n_bases: 4,
            world_extent: 100.0,
            v_def: 1.0,
            v_inv: 0.7,
            r_track: 5.0,
            r_destroy: 2.0,
            slow_fraction: 0.5,
            slow_count: task.k_threshold.div_ceil(2),
            t_max: 200,
            primitive_set: PrimitiveSet::Six,
            seed: 0,
        }
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            n_agents: self.n_agents,
            k_threshold: self.k_threshold,
            m_invaders: self.m_invaders,
        }
    }

    // comparisons are negated so that NaN fields fail
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), CsiError> {
        let fail = |m: &str| Err(CsiError::Config(m.to_string()));
        if self.n_agents == 0 || self.m_invaders == 0 || self.n_bases == 0 {
            return fail("n_agents, m_invaders and n_bases must be at least 1");
        }
        if !(self.k_threshold >= self.slow_count && self.slow_count >= 1) {
            return fail("need k_threshold >= slow_count >= 1");
        }
        if !(self.slow_fraction > 0.0 && self.slow_fraction <= 1.0) {
            return fail("slow_fraction must lie in (0, 1]");
        }
        if !(self.v_def > self.v_inv * self.slow_fraction) {
            return fail("v_def must exceed v_inv * slow_fraction");
        }
        if !(self.r_track > 0.0 && self.r_destroy >= 0.0 && self.world_extent > 0.0) {
            return fail("r_track and world_extent must be positive, r_destroy non-negative");
        }
        if self.t_max == 0 {
            return fail("t_max must be at least 1");
        }
        Ok(())
    }

    /// Length of one agent observation vector.
    pub fn observation_len(&self) -> usize {
        3 + 4 * self.m_invaders + 4 * self.n_bases
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvaderStatus {
    Active,
    Neutralized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsiState {
    pub t: usize,
    pub agent_pos: Vec<Vec3>,
    pub invader_pos: Vec<Vec3>,
    pub invader_target: Vec<usize>,
    pub invader_status: Vec<InvaderStatus>,
    /// Unit retreat direction, fixed at the moment an invader is turned back.
    pub invader_heading: Vec<Vec3>,
    pub base_pos: Vec<Vec3>,
    pub base_alive: Vec<bool>,
    pub done: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub bases_destroyed: usize,
    pub invaders_neutralized: usize,
    pub trackers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

fn clamp_to_arena(p: Vec3, extent: f64) -> Vec3 {
    [
        p[0].clamp(0.0, extent),
        p[1].clamp(0.0, extent),
        p[2].clamp(0.0, extent),
    ]
}

/// Moves `from` toward `to` by at most `speed` without overshooting.
fn approach(from: Vec3, to: Vec3, speed: f64) -> Vec3 {
    let d = sub(to, from);
    let len = norm(d);
    if len <= speed || len == 0.0 {
        to
    } else {
        add(from, scale(d, speed / len))
    }
}

fn place_bases<R: Rng + ?Sized>(config: &CsiConfig, rng: &mut R) -> Vec<Vec3> {
    let e = config.world_extent;
    let min_sep = e / 4.0;
    let (lo, hi) = (0.15 * e, 0.85 * e);
    for _ in 0..10_000 {
        let mut bases: Vec<Vec3> = Vec::with_capacity(config.n_bases);
        let mut ok = true;
        for _ in 0..config.n_bases {
            let p = [rng.gen_range(lo..hi), rng.gen_range(lo..hi), 0.0];
            if bases.iter().any(|b| dist(*b, p) < min_sep) {
                ok = false;
                break;
            }
            bases.push(p);
        }
        if ok {
            return bases;
        }
    }
    // Too many bases for rejection sampling: fall back to a square grid,
    // whose spacing shrinks below the separation only past 16 bases.
    let side = (config.n_bases as f64).sqrt().ceil() as usize;
    let step = (hi - lo) / side.max(2).saturating_sub(1).max(1) as f64;
    (0..config.n_bases)
        .map(|i| {
            [
                lo + step * (i % side) as f64,
                lo + step * (i / side) as f64,
                0.0,
            ]
        })
        .collect()
}

impl CsiState {
    /// Fresh episode. Bases sit on the `z = 0` face, defenders in a box
    /// around the base centroid, invaders on the `z = extent` face.
    pub fn reset<R: Rng + ?Sized>(config: &CsiConfig, rng: &mut R) -> Self {
        let e = config.world_extent;
        let base_pos = place_bases(config, rng);
        let c = centroid(&base_pos);
        let half = e / 10.0;
        let agent_pos = (0..config.n_agents)
            .map(|_| {
                clamp_to_arena(
                    [
                        c[0] + rng.gen_range(-half..half),
                        c[1] + rng.gen_range(-half..half),
                        rng.gen_range(0.0..half),
                    ],
                    e,
                )
            })
            .collect();
        let mut invader_pos = Vec::with_capacity(config.m_invaders);
        let mut invader_target = Vec::with_capacity(config.m_invaders);
        for _ in 0..config.m_invaders {
            invader_pos.push([rng.gen_range(0.0..e), rng.gen_range(0.0..e), e]);
            invader_target.push(rng.gen_range(0..config.n_bases));
        }
        Self {
            t: 0,
            agent_pos,
            invader_pos,
            invader_target,
            invader_status: vec![InvaderStatus::Active; config.m_invaders],
            invader_heading: vec![[0.0; 3]; config.m_invaders],
            base_alive: vec![true; base_pos.len()],
            base_pos,
            done: false,
        }
    }

    pub fn active_invaders(&self) -> usize {
        self.invader_status
            .iter()
            .filter(|s| **s == InvaderStatus::Active)
            .count()
    }

    pub fn base_centroid(&self) -> Vec3 {
        centroid(&self.base_pos)
    }

    /// Agents within tracking range of each invader.
    pub fn trackers(&self, config: &CsiConfig) -> Vec<usize> {
        self.invader_pos
            .iter()
            .map(|ip| {
                self.agent_pos
                    .iter()
                    .filter(|ap| dist(**ap, *ip) <= config.r_track)
                    .count()
            })
            .collect()
    }

    /// Advances one step. `actions[i]` is agent `i`'s primitive action id.
    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, actions: &[usize], config: &CsiConfig) -> Result<StepOutcome, CsiError> {
        if self.done {
            return Err(CsiError::EpisodeOver);
        }
        if actions.len() != self.agent_pos.len() {
            return Err(CsiError::ActionCount {
                expected: self.agent_pos.len(),
                got: actions.len(),
            });
        }
        let dirs = config.primitive_set.directions();
        for (agent, &a) in actions.iter().enumerate() {
            if a >= dirs.len() {
                return Err(CsiError::ActionOutOfRange {
                    agent,
                    action: a,
                    set: config.primitive_set,
                });
            }
        }
        let e = config.world_extent;
        for (p, &a) in self.agent_pos.iter_mut().zip(actions) {
            *p = clamp_to_arena(add(*p, scale(dirs[a], config.v_def)), e);
        }

        let trackers = self.trackers(config);
        let home = self.base_centroid();
        for j in 0..self.invader_pos.len() {
            let target = self.base_pos[self.invader_target[j]];
            match self.invader_status[j] {
                InvaderStatus::Active => {
                    if trackers[j] >= config.k_threshold {
                        self.invader_status[j] = InvaderStatus::Neutralized;
                        let away = sub(self.invader_pos[j], target);
                        let len = norm(away);
                        self.invader_heading[j] = if len > 0.0 {
                            scale(away, 1.0 / len)
                        } else {
                            [0.0, 0.0, 1.0]
                        };
                        self.retreat(j, home, config);
                    } else {
                        let speed = if trackers[j] >= config.slow_count {
                            config.v_inv * config.slow_fraction
                        } else {
                            config.v_inv
                        };
                        self.invader_pos[j] =
                            clamp_to_arena(approach(self.invader_pos[j], target, speed), e);
                    }
                }
                InvaderStatus::Neutralized => self.retreat(j, home, config),
            }
        }

        let mut destroyed = 0;
        for j in 0..self.invader_pos.len() {
            if self.invader_status[j] != InvaderStatus::Active {
                continue;
            }
            let b = self.invader_target[j];
            if self.base_alive[b] && dist(self.invader_pos[j], self.base_pos[b]) <= config.r_destroy
            {
                self.base_alive[b] = false;
                destroyed += 1;
            }
        }

        let neutralized = self.invader_pos.len() - self.active_invaders();
        let info = StepInfo {
            bases_destroyed: self.base_alive.iter().filter(|a| !**a).count(),
            invaders_neutralized: neutralized,
            trackers,
        };
        let (reward, done) = if destroyed > 0 {
            (-1.0, true)
        } else if self.t + 1 >= config.t_max || self.active_invaders() == 0 {
            (1.0, true)
        } else {
            (0.0, false)
        };
        self.t += 1;
        self.done = done;
        Ok(StepOutcome { reward, done, info })
    }

    fn retreat(&mut self, j: usize, home: Vec3, config: &CsiConfig) {
        if dist(self.invader_pos[j], home) >= config.world_extent {
            return;
        }
        let next = add(
            self.invader_pos[j],
            scale(self.invader_heading[j], config.v_inv),
        );
        self.invader_pos[j] = clamp_to_arena(next, config.world_extent);
    }

    /// Own position, then per invader (relative position, active flag), then
    /// per base (relative position, alive flag); lengths scaled by the arena
    /// extent.
    pub fn observe(&self, agent: usize, config: &CsiConfig) -> Vec<f64> {
        let e = config.world_extent;
        let me = self.agent_pos[agent];
        let mut obs = Vec::with_capacity(config.observation_len());
        obs.extend(me.iter().map(|x| x / e));
        for (p, s) in self.invader_pos.iter().zip(&self.invader_status) {
            obs.extend(sub(*p, me).iter().map(|x| x / e));
            obs.push(if *s == InvaderStatus::Active {
                1.0
            } else {
                0.0
            });
        }
        for (p, alive) in self.base_pos.iter().zip(&self.base_alive) {
            obs.extend(sub(*p, me).iter().map(|x| x / e));
            obs.push(if *alive { 1.0 } else { 0.0 });
        }
        obs
    }

    /// One line of the optional trajectory dump.
    pub fn trajectory_record(&self, reward: f64) -> serde_json::Value {
        serde_json::json!({
            "t": self.t,
            "agent_pos": self.agent_pos,
            "invader_pos": self.invader_pos,
            "invader_status": self.invader_status,
            "reward": reward,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(n: usize, k: usize, m: usize) -> CsiConfig {
        CsiConfig::for_task(TaskSpec {
            n_agents: n,
            k_threshold: k,
            m_invaders: m,
        })
    }

    #[test]
    fn parses_task_names() {
        let t = parse_task_name("CSI-54/6/9").unwrap();
        assert_eq!((t.n_agents, t.k_threshold, t.m_invaders), (54, 6, 9));
        let t = parse_task_name("CSI-27/3/9").unwrap();
        assert_eq!((t.n_agents, t.k_threshold, t.m_invaders), (27, 3, 9));
        let t = parse_task_name("CSI-1/1/1").unwrap();
        assert_eq!((t.n_agents, t.k_threshold, t.m_invaders), (1, 1, 1));
        assert_eq!(t.to_string(), "CSI-1/1/1");
    }

    #[test]
    fn parse_errors_name_the_field() {
        match parse_task_name("CSI-54/x/9") {
            Err(CsiError::TaskName { field, .. }) => assert_eq!(field, "k"),
            other => panic!("{other:?}"),
        }
        match parse_task_name("SCI-54/6/9") {
            Err(CsiError::TaskName { field, .. }) => assert_eq!(field, "prefix"),
            other => panic!("{other:?}"),
        }
        assert!(parse_task_name("CSI-54/6").is_err());
        assert!(parse_task_name("CSI-0/1/1").is_err());
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = config(12, 2, 3);
        let a = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn single_base_is_every_invaders_target() {
        let mut cfg = config(6, 1, 5);
        cfg.n_bases = 1;
        let s = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(s.invader_target.iter().all(|&t| t == 0));
    }

    #[test]
    fn bases_are_separated_and_on_the_floor() {
        let cfg = config(6, 1, 5);
        for seed in 0..50 {
            let s = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            for (i, a) in s.base_pos.iter().enumerate() {
                assert_eq!(a[2], 0.0);
                for b in &s.base_pos[i + 1..] {
                    assert!(dist(*a, *b) >= cfg.world_extent / 4.0);
                }
            }
        }
    }

    fn quiet_state(cfg: &CsiConfig) -> CsiState {
        let mut s = CsiState::reset(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        s.base_pos = vec![[50.0, 50.0, 0.0]; cfg.n_bases];
        s.base_pos[0] = [10.0, 10.0, 0.0];
        for (i, b) in s.base_pos.iter_mut().enumerate().skip(1) {
            *b = [10.0 + 30.0 * i as f64, 80.0, 0.0];
        }
        s
    }

    #[test]
    fn threshold_trackers_neutralize() {
        let mut cfg = config(2, 2, 1);
        cfg.n_bases = 1;
        let mut s = quiet_state(&cfg);
        s.invader_pos = vec![[50.0, 50.0, 50.0]];
        s.invader_target = vec![0];
        s.agent_pos = vec![[50.0, 50.0, 47.0], [50.0, 50.0, 53.0]];
        // +x then -x keeps both inside r_track
        let out = s.step(&[0, 1], &cfg).unwrap();
        assert_eq!(s.invader_status[0], InvaderStatus::Neutralized);
        assert_eq!(out.info.trackers, vec![2]);
        // the lone invader is gone, so the team wins
        assert!(out.done);
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn untracked_invader_destroys_base() {
        let mut cfg = config(1, 1, 1);
        cfg.n_bases = 1;
        let mut s = quiet_state(&cfg);
        let d = cfg.v_inv + cfg.r_destroy - 0.1;
        s.invader_pos = vec![[10.0, 10.0, d]];
        s.invader_target = vec![0];
        s.agent_pos = vec![[90.0, 90.0, 90.0]];
        let out = s.step(&[0], &cfg).unwrap();
        assert!(out.done);
        assert_eq!(out.reward, -1.0);
        assert!(!s.base_alive[0]);
        assert!(matches!(s.step(&[0], &cfg), Err(CsiError::EpisodeOver)));
    }

    #[test]
    fn all_neutralized_before_t_max_wins() {
        let mut cfg = config(2, 1, 2);
        cfg.n_bases = 1;
        let mut s = quiet_state(&cfg);
        s.invader_pos = vec![[40.0, 40.0, 60.0], [70.0, 70.0, 60.0]];
        s.invader_target = vec![0, 0];
        s.agent_pos = vec![[40.0, 40.0, 58.0], [70.0, 70.0, 58.0]];
        let out = s.step(&[4, 4], &cfg).unwrap();
        assert!(out.done && s.t < cfg.t_max);
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn slowed_invader_moves_at_reduced_speed() {
        let mut cfg = config(3, 3, 1);
        cfg.n_bases = 1;
        assert_eq!(cfg.slow_count, 2);
        let mut s = quiet_state(&cfg);
        s.invader_pos = vec![[10.0, 10.0, 60.0]];
        s.invader_target = vec![0];
        s.agent_pos = vec![[10.0, 11.0, 61.0], [10.0, 9.0, 61.0], [90.0, 90.0, 90.0]];
        // agents move -z to stay near the invader
        s.step(&[5, 5, 0], &cfg).unwrap();
        assert_eq!(s.invader_status[0], InvaderStatus::Active);
        assert!((s.invader_pos[0][2] - (60.0 - cfg.v_inv * cfg.slow_fraction)).abs() < 1e-12);
    }

    #[test]
    fn agent_is_clamped_at_the_wall() {
        let mut cfg = config(1, 1, 1);
        cfg.n_bases = 1;
        let mut s = quiet_state(&cfg);
        s.invader_pos = vec![[50.0, 50.0, 100.0]];
        s.agent_pos = vec![[100.0, 20.0, 20.0]];
        s.step(&[0], &cfg).unwrap();
        assert_eq!(s.agent_pos[0], [100.0, 20.0, 20.0]);
    }

    #[test]
    fn episode_succeeds_at_t_max() {
        let mut cfg = config(1, 1, 1);
        cfg.t_max = 3;
        let mut s = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut last = None;
        for _ in 0..3 {
            last = Some(s.step(&[0], &cfg).unwrap());
        }
        let out = last.unwrap();
        assert!(out.done);
        assert_eq!(out.reward, 1.0);
    }

    #[test]
    fn observation_layout() {
        let mut cfg = config(2, 1, 9);
        cfg.n_bases = 4;
        assert_eq!(cfg.observation_len(), 55);
        let mut s = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        s.agent_pos[0] = s.base_pos[2];
        s.invader_status[4] = InvaderStatus::Neutralized;
        let obs = s.observe(0, &cfg);
        assert_eq!(obs.len(), 55);
        let base2 = 3 + 4 * 9 + 4 * 2;
        assert_eq!(&obs[base2..base2 + 4], &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(obs[3 + 4 * 4 + 3], 0.0);
        assert!(obs.iter().all(|x| x.is_finite() && x.abs() <= 1.0));
    }

    #[test]
    fn wrong_action_count_is_rejected() {
        let cfg = config(3, 1, 1);
        let mut s = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            s.step(&[0, 0], &cfg),
            Err(CsiError::ActionCount { .. })
        ));
        assert!(matches!(
            s.step(&[0, 0, 6], &cfg),
            Err(CsiError::ActionOutOfRange { .. })
        ));
    }

    #[test]
    fn fourteen_directions_are_unit() {
        let dirs = PrimitiveSet::Fourteen.directions();
        assert_eq!(dirs.len(), 14);
        for d in &dirs {
            assert!((norm(*d) - 1.0).abs() < 1e-12);
        }
        assert_eq!(dirs[6], [1.0 / 3f64.sqrt(); 3]);
        assert!(PrimitiveSet::None.directions().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(config(27, 3, 9).validate().is_ok());
        let mut c = config(27, 3, 9);
        c.v_def = 0.3;
        assert!(c.validate().is_err());
        let mut c = config(27, 3, 9);
        c.slow_count = 4;
        assert!(c.validate().is_err());
    }
}
