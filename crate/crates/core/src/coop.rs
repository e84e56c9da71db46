//! Knowledge-based cooperative actions and their translation into
//! per-agent primitive actions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi::{self, CsiConfig, CsiState, InvaderStatus, PrimitiveSet, Vec3};

/// Defenders closer than this to their base hold position.
pub const DEFEND_RADIUS: f64 = 6.0;

/// Width of a cooperative target's raw representation before padding:
/// kind one-hot (4), anchor position (3), live flag (1).
pub const COOP_REPR_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoopError {
    #[error("cooperative actions need a primitive action set to translate into")]
    NoPrimitives,
    #[error("cluster has no members")]
    EmptyCluster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoopCommand {
    Intercept(usize),
    Defend(usize),
    Gather,
    Scatter,
}

impl CoopCommand {
    fn tag(self) -> usize {
        match self {
            CoopCommand::Intercept(_) => 0,
            CoopCommand::Defend(_) => 1,
            CoopCommand::Gather => 2,
            CoopCommand::Scatter => 3,
        }
    }

    /// Raw target-node representation, zero padded to `width`.
    ///
    /// Intercept and Defend anchor at the invader / base position (scaled by
    /// the arena extent) with the entity's live flag; Gather and Scatter have
    /// no anchor and are always live. Dead or out-of-range entities read as
    /// a zero anchor with flag 0.
    pub fn raw_repr(self, env: &CsiState, config: &CsiConfig, width: usize) -> Vec<f64> {
        let mut r = vec![0.0; width.max(COOP_REPR_LEN)];
        r[self.tag()] = 1.0;
        let e = config.world_extent;
        let (anchor, live) = match self {
            CoopCommand::Intercept(j) => match env.invader_pos.get(j) {
                Some(p) => (*p, env.invader_status[j] == InvaderStatus::Active),
                None => ([0.0; 3], false),
            },
            CoopCommand::Defend(b) => match env.base_pos.get(b) {
                Some(p) => (*p, env.base_alive[b]),
                None => ([0.0; 3], false),
            },
            CoopCommand::Gather | CoopCommand::Scatter => ([0.0; 3], true),
        };
        for i in 0..3 {
            r[4 + i] = anchor[i] / e;
        }
        r[7] = if live { 1.0 } else { 0.0 };
        r.truncate(width.max(COOP_REPR_LEN));
        r
    }
}

/// Where the controller wants `agent_pos` to go; not normalized.
///
/// `members` are the positions of every agent in the cluster, including the
/// agent itself.
pub fn desired_direction(
    command: CoopCommand,
    agent_pos: Vec3,
    members: &[Vec3],
    env: &CsiState,
) -> Vec3 {
    match command {
        CoopCommand::Gather => csi::sub(csi::centroid(members), agent_pos),
        CoopCommand::Scatter => {
            let nearest = members
                .iter()
                .filter(|p| **p != agent_pos)
                .min_by(|a, b| csi::dist(**a, agent_pos).total_cmp(&csi::dist(**b, agent_pos)));
            match nearest {
                Some(p) => csi::sub(agent_pos, *p),
                None => [0.0; 3],
            }
        }
        CoopCommand::Intercept(j) => match (env.invader_pos.get(j), env.invader_status.get(j)) {
            (Some(p), Some(InvaderStatus::Active)) => csi::sub(*p, agent_pos),
            _ => [0.0; 3],
        },
        CoopCommand::Defend(b) => match (env.base_pos.get(b), env.base_alive.get(b)) {
            (Some(p), Some(true)) if csi::dist(*p, agent_pos) > DEFEND_RADIUS => {
                csi::sub(*p, agent_pos)
            }
            _ => [0.0; 3],
        },
    }
}

/// Primitive action whose unit direction best aligns with `direction`;
/// ties (including the zero vector) go to the lowest action id.
pub fn discretize(direction: Vec3, set: PrimitiveSet) -> Result<usize, CoopError> {
    let dirs = set.directions();
    if dirs.is_empty() {
        return Err(CoopError::NoPrimitives);
    }
    let mut best = 0;
    let mut best_dot = csi::dot(direction, dirs[0]);
    for (i, d) in dirs.iter().enumerate().skip(1) {
        let v = csi::dot(direction, *d);
        if v > best_dot {
            best = i;
            best_dot = v;
        }
    }
    Ok(best)
}

/// Per-member primitive actions for a cluster executing `command`.
pub fn translate(
    command: CoopCommand,
    member_ids: &[usize],
    env: &CsiState,
    config: &CsiConfig,
) -> Result<Vec<(usize, usize)>, CoopError> {
    if member_ids.is_empty() {
        return Err(CoopError::EmptyCluster);
    }
    let members: Vec<Vec3> = member_ids.iter().map(|&i| env.agent_pos[i]).collect();
    member_ids
        .iter()
        .zip(&members)
        .map(|(&id, &pos)| {
            let dir = desired_direction(command, pos, &members, env);
            Ok((id, discretize(dir, config.primitive_set)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi::TaskSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(n: usize) -> (CsiState, CsiConfig) {
        let cfg = CsiConfig::for_task(TaskSpec {
            n_agents: n,
            k_threshold: 1,
            m_invaders: 2,
        });
        (
            CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)),
            cfg,
        )
    }

    #[test]
    fn gather_points_at_the_centroid() {
        let (s, _) = env(2);
        let members = [[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        assert_eq!(
            desired_direction(CoopCommand::Gather, members[0], &members, &s),
            [2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn scatter_on_a_singleton_holds() {
        let (s, _) = env(1);
        let p = [3.0, 3.0, 3.0];
        assert_eq!(
            desired_direction(CoopCommand::Scatter, p, &[p], &s),
            [0.0; 3]
        );
    }

    #[test]
    fn intercepting_a_neutralized_invader_holds() {
        let (mut s, _) = env(1);
        s.invader_status[1] = InvaderStatus::Neutralized;
        assert_eq!(
            desired_direction(CoopCommand::Intercept(1), [1.0; 3], &[[1.0; 3]], &s),
            [0.0; 3]
        );
        assert_eq!(
            desired_direction(CoopCommand::Intercept(7), [1.0; 3], &[[1.0; 3]], &s),
            [0.0; 3]
        );
        assert_eq!(
            desired_direction(CoopCommand::Defend(99), [1.0; 3], &[[1.0; 3]], &s),
            [0.0; 3]
        );
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize([1.0, 0.1, 0.0], PrimitiveSet::Six).unwrap(), 0);
        assert_eq!(discretize([0.0, 0.0, 0.0], PrimitiveSet::Six).unwrap(), 0);
        assert_eq!(discretize([0.0, -2.0, 0.5], PrimitiveSet::Six).unwrap(), 3);
        // (1,1,1): the +++ diagonal scores √3, every axis only 1
        assert_eq!(
            discretize([1.0, 1.0, 1.0], PrimitiveSet::Fourteen).unwrap(),
            6
        );
        assert_eq!(
            discretize([1.0, 0.0, 0.0], PrimitiveSet::None),
            Err(CoopError::NoPrimitives)
        );
    }

    #[test]
    fn gather_translates_to_opposite_moves() {
        let (mut s, cfg) = env(2);
        s.agent_pos = vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let out = translate(CoopCommand::Gather, &[0, 1], &s, &cfg).unwrap();
        assert_eq!(out, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn intercept_from_below_climbs() {
        let (mut s, cfg) = env(3);
        s.agent_pos = vec![[50.0, 50.0, 5.0]; 3];
        s.invader_pos[0] = [50.0, 51.0, 80.0];
        let out = translate(CoopCommand::Intercept(0), &[0, 1, 2], &s, &cfg).unwrap();
        assert!(out.iter().all(|&(_, a)| a == 4));
    }

    #[test]
    fn defend_inside_the_ring_dithers() {
        let (mut s, cfg) = env(1);
        s.agent_pos = vec![csi::add(s.base_pos[0], [1.0, 1.0, 1.0])];
        let out = translate(CoopCommand::Defend(0), &[0], &s, &cfg).unwrap();
        assert_eq!(out, vec![(0, 0)]);
    }

    #[test]
    fn repr_layout() {
        let (s, cfg) = env(1);
        let r = CoopCommand::Intercept(0).raw_repr(&s, &cfg, 11);
        assert_eq!(r.len(), 11);
        assert_eq!(&r[..4], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r[4], s.invader_pos[0][0] / cfg.world_extent);
        assert_eq!(r[7], 1.0);
        assert!(r[8..].iter().all(|x| *x == 0.0));
        assert_eq!(
            CoopCommand::Gather.raw_repr(&s, &cfg, 8),
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]
        );
    }
}
