//! The three-layer cooperation graph (agents → clusters → targets) and
//! the operator actions that rewire it.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coop::{self, CoopCommand, CoopError};
use crate::csi::{CsiConfig, CsiState, PrimitiveSet};

/// Candidate topologies drawn when choosing the frozen initial topology.
pub const DEFAULT_INIT_CANDIDATES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EcgError {
    #[error("{layer} index {index} out of range (size {size})")]
    OutOfRange {
        layer: &'static str,
        index: usize,
        size: usize,
    },
    #[error("a topology needs at least one cluster and one target")]
    Empty,
    #[error("fan-out must be at least 2, got {0}")]
    FanOut(usize),
    #[error("topology is already extended")]
    AlreadyExtended,
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("topology JSON: {0}")]
    Json(String),
    #[error(transparent)]
    Coop(#[from] CoopError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetKind {
    Primitive(usize),
    Cooperative(CoopCommand),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetNode {
    pub id: usize,
    pub kind: TargetKind,
}

/// Rolls whether interference replaces this step's operator actions.
pub fn interference_fires<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.gen::<f64>() < p
}

/// Target layer: every primitive action, then one Intercept per invader,
/// then one Defend per base (when `coop` is on).
pub fn build_targets(
    primitives: PrimitiveSet,
    m_invaders: usize,
    n_bases: usize,
    coop: bool,
) -> Vec<TargetNode> {
    let mut kinds: Vec<TargetKind> = (0..primitives.len()).map(TargetKind::Primitive).collect();
    if coop {
        kinds.extend((0..m_invaders).map(|j| TargetKind::Cooperative(CoopCommand::Intercept(j))));
        kinds.extend((0..n_bases).map(|b| TargetKind::Cooperative(CoopCommand::Defend(b))));
    }
    kinds
        .into_iter()
        .enumerate()
        .map(|(id, kind)| TargetNode { id, kind })
        .collect()
}

/// Static lower layer created by [`EcgTopology::extend`]: former agent node
/// `i` becomes secondary cluster `i` owning `groups[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extension {
    pub fan_out: usize,
    pub groups: Vec<Vec<usize>>,
}

/// One joint operator decision: move the lowest-indexed agent of
/// `src_cluster` to `dst_cluster`, and the lowest-indexed cluster on
/// `src_target` to `dst_target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorAction {
    pub src_cluster: usize,
    pub dst_cluster: usize,
    pub src_target: usize,
    pub dst_target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionMasks {
    pub cluster_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcgTopology {
    /// Nodes in the agent layer. After extension these are secondary clusters.
    pub n_agents: usize,
    pub n_clusters: usize,
    pub targets: Vec<TargetNode>,
    pub agent_to_cluster: Vec<usize>,
    pub cluster_to_target: Vec<usize>,
    pub extension: Option<Extension>,
}

impl EcgTopology {
    pub fn new(
        n_clusters: usize,
        targets: Vec<TargetNode>,
        agent_to_cluster: Vec<usize>,
        cluster_to_target: Vec<usize>,
    ) -> Result<Self, EcgError> {
        let t = Self {
            n_agents: agent_to_cluster.len(),
            n_clusters,
            targets,
            agent_to_cluster,
            cluster_to_target,
            extension: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    /// Number of environment agents the graph drives.
    pub fn env_agent_count(&self) -> usize {
        match &self.extension {
            Some(ext) => ext.groups.iter().map(Vec::len).sum(),
            None => self.n_agents,
        }
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), EcgError> {
        if self.n_clusters == 0 || self.targets.is_empty() {
            return Err(EcgError::Empty);
        }
        if self.agent_to_cluster.len() != self.n_agents {
            return Err(EcgError::Invalid(format!(
                "{} agent edges for {} agent nodes",
                self.agent_to_cluster.len(),
                self.n_agents
            )));
        }
        if self.cluster_to_target.len() != self.n_clusters {
            return Err(EcgError::Invalid(format!(
                "{} cluster edges for {} clusters",
                self.cluster_to_target.len(),
                self.n_clusters
            )));
        }
        for &c in &self.agent_to_cluster {
            if c >= self.n_clusters {
                return Err(EcgError::OutOfRange {
                    layer: "cluster",
                    index: c,
                    size: self.n_clusters,
                });
            }
        }
        for &t in &self.cluster_to_target {
            if t >= self.targets.len() {
                return Err(EcgError::OutOfRange {
                    layer: "target",
                    index: t,
                    size: self.targets.len(),
                });
            }
        }
        let mut seen_coop = false;
        for (i, node) in self.targets.iter().enumerate() {
            if node.id != i {
                return Err(EcgError::Invalid(format!(
                    "target at position {i} has id {}",
                    node.id
                )));
            }
            match node.kind {
                TargetKind::Primitive(_) if seen_coop => {
                    return Err(EcgError::Invalid(
                        "primitive targets must precede cooperative ones".into(),
                    ))
                }
                TargetKind::Primitive(_) => {}
                TargetKind::Cooperative(_) => seen_coop = true,
            }
        }
        if let Some(ext) = &self.extension {
            if ext.groups.len() != self.n_agents {
                return Err(EcgError::Invalid(
                    "extension groups do not match agent nodes".into(),
                ));
            }
            let total = self.env_agent_count();
            let mut hit = vec![false; total];
            for &a in ext.groups.iter().flatten() {
                if a >= total || hit[a] {
                    return Err(EcgError::Invalid(
                        "extension groups do not partition the agents".into(),
                    ));
                }
                hit[a] = true;
            }
        }
        Ok(())
    }

    fn check_action(&self, a: &OperatorAction) -> Result<(), EcgError> {
        for (idx, size, layer) in [
            (a.src_cluster, self.n_clusters, "cluster"),
            (a.dst_cluster, self.n_clusters, "cluster"),
            (a.src_target, self.targets.len(), "target"),
            (a.dst_target, self.targets.len(), "target"),
        ] {
            if idx >= size {
                return Err(EcgError::OutOfRange {
                    layer,
                    index: idx,
                    size,
                });
            }
        }
        Ok(())
    }

    /// Applies `action` in place; returns whether the cluster pair and the
    /// target pair each took effect. Invalid pairs (empty source, same
    /// node) leave their layer untouched.
    pub fn apply_in_place(&mut self, action: &OperatorAction) -> Result<[bool; 2], EcgError> {
        self.check_action(action)?;
        let mut applied = [false, false];
        if action.src_cluster != action.dst_cluster {
            if let Some(agent) = self
                .agent_to_cluster
                .iter()
                .position(|&c| c == action.src_cluster)
            {
                self.agent_to_cluster[agent] = action.dst_cluster;
                applied[0] = true;
            }
        }
        if action.src_target != action.dst_target {
            if let Some(cluster) = self
                .cluster_to_target
                .iter()
                .position(|&t| t == action.src_target)
            {
                self.cluster_to_target[cluster] = action.dst_target;
                applied[1] = true;
            }
        }
        Ok(applied)
    }

    pub fn apply(&self, action: &OperatorAction) -> Result<(EcgTopology, [bool; 2]), EcgError> {
        let mut next = self.clone();
        let flags = next.apply_in_place(action)?;
        Ok((next, flags))
    }

    pub fn action_masks(&self) -> ActionMasks {
        let mut cluster_mask = vec![false; self.n_clusters];
        for &c in &self.agent_to_cluster {
            cluster_mask[c] = true;
        }
        let mut target_mask = vec![false; self.targets.len()];
        for &t in &self.cluster_to_target {
            target_mask[t] = true;
        }
        ActionMasks {
            cluster_mask,
            target_mask,
        }
    }

    /// Agent-layer nodes currently in each cluster.
    pub fn cluster_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_clusters];
        for (a, &c) in self.agent_to_cluster.iter().enumerate() {
            members[c].push(a);
        }
        members
    }

    /// Environment agents in each cluster (through the static lower layer
    /// when extended).
    pub fn cluster_env_members(&self) -> Vec<Vec<usize>> {
        let nodes = self.cluster_members();
        match &self.extension {
            None => nodes,
            Some(ext) => nodes
                .into_iter()
                .map(|ns| {
                    ns.iter()
                        .flat_map(|&n| ext.groups[n].iter().copied())
                        .collect()
                })
                .collect(),
        }
    }

    /// One primitive action id per environment agent.
    pub fn resolve_agent_actions(
        &self,
        env: &CsiState,
        config: &CsiConfig,
    ) -> Result<Vec<usize>, EcgError> {
        let mut actions = vec![0usize; self.env_agent_count()];
        for (c, members) in self.cluster_env_members().into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            match self.targets[self.cluster_to_target[c]].kind {
                TargetKind::Primitive(id) => {
                    for a in members {
                        actions[a] = id;
                    }
                }
                TargetKind::Cooperative(cmd) => {
                    for (a, id) in coop::translate(cmd, &members, env, config)? {
                        actions[a] = id;
                    }
                }
            }
        }
        Ok(actions)
    }

    /// Shannon entropy (nats) of agents over clusters plus clusters over targets.
    pub fn entropy(&self) -> f64 {
        fn h(counts: &[usize], total: usize) -> f64 {
            let n = total as f64;
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum()
        }
        let mut per_cluster = vec![0usize; self.n_clusters];
        for &c in &self.agent_to_cluster {
            per_cluster[c] += 1;
        }
        let mut per_target = vec![0usize; self.targets.len()];
        for &t in &self.cluster_to_target {
            per_target[t] += 1;
        }
        let ha = if self.n_agents == 0 {
            0.0
        } else {
            h(&per_cluster, self.n_agents)
        };
        ha + h(&per_target, self.n_clusters)
    }

    /// Every agent and every cluster on an independently uniform parent.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_agents: usize,
        n_clusters: usize,
        targets: &[TargetNode],
    ) -> Result<Self, EcgError> {
        if n_clusters == 0 || targets.is_empty() {
            return Err(EcgError::Empty);
        }
        let agent_to_cluster = (0..n_agents)
            .map(|_| rng.gen_range(0..n_clusters))
            .collect();
        let cluster_to_target = (0..n_clusters)
            .map(|_| rng.gen_range(0..targets.len()))
            .collect();
        Self::new(
            n_clusters,
            targets.to_vec(),
            agent_to_cluster,
            cluster_to_target,
        )
    }

    /// Highest-entropy topology among `candidates` random draws; ties keep
    /// the earliest draw.
    pub fn select_initial<R: Rng + ?Sized>(
        rng: &mut R,
        candidates: usize,
        n_agents: usize,
        n_clusters: usize,
        targets: &[TargetNode],
    ) -> Result<Self, EcgError> {
        let mut best = Self::random(rng, n_agents, n_clusters, targets)?;
        let mut best_h = best.entropy();
        for _ in 1..candidates.max(1) {
            let t = Self::random(rng, n_agents, n_clusters, targets)?;
            let h = t.entropy();
            if h > best_h {
                best = t;
                best_h = h;
            }
        }
        Ok(best)
    }

    /// A uniformly random (unmasked) operator action.
    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> OperatorAction {
        OperatorAction {
            src_cluster: rng.gen_range(0..self.n_clusters),
            dst_cluster: rng.gen_range(0..self.n_clusters),
            src_target: rng.gen_range(0..self.targets.len()),
            dst_target: rng.gen_range(0..self.targets.len()),
        }
    }

    /// Applies a fake random operator action; returns it for logging.
    pub fn interfere<R: Rng + ?Sized>(&self, rng: &mut R) -> (EcgTopology, OperatorAction) {
        let fake = self.random_action(rng);
        let (next, _) = self.apply(&fake).expect("random action is in range");
        (next, fake)
    }

    /// Turns every agent node into a secondary cluster owning `fan_out`
    /// fresh agents. Clusters, targets and their edges are kept.
    pub fn extend(&self, fan_out: usize) -> Result<EcgTopology, EcgError> {
        if fan_out < 2 {
            return Err(EcgError::FanOut(fan_out));
        }
        if self.extension.is_some() {
            return Err(EcgError::AlreadyExtended);
        }
        let groups = (0..self.n_agents)
            .map(|i| (fan_out * i..fan_out * i + fan_out).collect())
            .collect();
        let mut next = self.clone();
        next.extension = Some(Extension { fan_out, groups });
        next.validate()?;
        Ok(next)
    }

    /// Graphviz rendering: agents red at the bottom, clusters blue in the
    /// middle, targets green on top.
    pub fn to_dot(&self) -> String {
        let mut s =
            String::from("digraph ecg {\n  rankdir=BT;\n  node [style=filled, fontcolor=white];\n");
        let agent_label = if self.extension.is_some() { "s" } else { "a" };
        s.push_str("  { rank=min;");
        for a in 0..self.n_agents {
            let _ = write!(s, " {agent_label}{a} [color=red];");
        }
        s.push_str(" }\n  { rank=same;");
        for c in 0..self.n_clusters {
            let _ = write!(s, " c{c} [color=blue];");
        }
        s.push_str(" }\n  { rank=max;");
        for t in &self.targets {
            let _ = write!(
                s,
                " t{} [color=darkgreen, label=\"{}\"];",
                t.id,
                target_label(t.kind)
            );
        }
        s.push_str(" }\n");
        for (a, c) in self.agent_to_cluster.iter().enumerate() {
            let _ = writeln!(s, "  {agent_label}{a} -> c{c};");
        }
        for (c, t) in self.cluster_to_target.iter().enumerate() {
            let _ = writeln!(s, "  c{c} -> t{t};");
        }
        s.push_str("}\n");
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let doc = TopologyDoc {
            n_agents: self.n_agents,
            n_clusters: self.n_clusters,
            targets: self.targets.iter().map(TargetDoc::from).collect(),
            agent_to_cluster: self.agent_to_cluster.clone(),
            cluster_to_target: self.cluster_to_target.clone(),
            extension: self.extension.clone(),
        };
        serde_json::to_value(doc).expect("topology serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, EcgError> {
        let doc: TopologyDoc =
            serde_json::from_value(value.clone()).map_err(|e| EcgError::Json(e.to_string()))?;
        let targets = doc
            .targets
            .iter()
            .map(TargetDoc::to_node)
            .collect::<Result<Vec<_>, _>>()?;
        let t = Self {
            n_agents: doc.n_agents,
            n_clusters: doc.n_clusters,
            targets,
            agent_to_cluster: doc.agent_to_cluster,
            cluster_to_target: doc.cluster_to_target,
            extension: doc.extension,
        };
        t.validate()?;
        Ok(t)
    }
}

fn target_label(kind: TargetKind) -> String {
    const AXES: [&str; 6] = ["+x", "-x", "+y", "-y", "+z", "-z"];
    match kind {
        TargetKind::Primitive(id) if id < 6 => AXES[id].to_string(),
        TargetKind::Primitive(id) => format!("diag{}", id - 6),
        TargetKind::Cooperative(CoopCommand::Intercept(j)) => format!("intercept{j}"),
        TargetKind::Cooperative(CoopCommand::Defend(b)) => format!("defend{b}"),
        TargetKind::Cooperative(CoopCommand::Gather) => "gather".into(),
        TargetKind::Cooperative(CoopCommand::Scatter) => "scatter".into(),
    }
}

#[derive(Serialize, Deserialize)]
struct TopologyDoc {
    n_agents: usize,
    n_clusters: usize,
    targets: Vec<TargetDoc>,
    agent_to_cluster: Vec<usize>,
    cluster_to_target: Vec<usize>,
    extension: Option<Extension>,
}

#[derive(Serialize, Deserialize)]
struct TargetDoc {
    id: usize,
    kind: String,
    params: serde_json::Value,
}

impl From<&TargetNode> for TargetDoc {
    fn from(t: &TargetNode) -> Self {
        use serde_json::json;
        let (kind, params) = match t.kind {
            TargetKind::Primitive(a) => ("primitive", json!({ "action_id": a })),
            TargetKind::Cooperative(CoopCommand::Intercept(j)) => {
                ("intercept", json!({ "invader": j }))
            }
            TargetKind::Cooperative(CoopCommand::Defend(b)) => ("defend", json!({ "base": b })),
            TargetKind::Cooperative(CoopCommand::Gather) => ("gather", json!({})),
            TargetKind::Cooperative(CoopCommand::Scatter) => ("scatter", json!({})),
        };
        Self {
            id: t.id,
            kind: kind.into(),
            params,
        }
    }
}

impl TargetDoc {
    fn to_node(&self) -> Result<TargetNode, EcgError> {
        let field = |name: &str| {
            self.params
                .get(name)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| {
                    EcgError::Json(format!("target {} lacks integer param {name:?}", self.id))
                })
        };
        let kind = match self.kind.as_str() {
            "primitive" => TargetKind::Primitive(field("action_id")?),
            "intercept" => TargetKind::Cooperative(CoopCommand::Intercept(field("invader")?)),
            "defend" => TargetKind::Cooperative(CoopCommand::Defend(field("base")?)),
            "gather" => TargetKind::Cooperative(CoopCommand::Gather),
            "scatter" => TargetKind::Cooperative(CoopCommand::Scatter),
            other => return Err(EcgError::Json(format!("unknown target kind {other:?}"))),
        };
        Ok(TargetNode { id: self.id, kind })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csi::TaskSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_targets() -> Vec<TargetNode> {
        vec![
            TargetNode {
                id: 0,
                kind: TargetKind::Primitive(0),
            },
            TargetNode {
                id: 1,
                kind: TargetKind::Primitive(1),
            },
        ]
    }

    fn small() -> EcgTopology {
        EcgTopology::new(2, two_targets(), vec![0, 0, 1], vec![0, 1]).unwrap()
    }

    fn act(sc: usize, dc: usize, st: usize, dt: usize) -> OperatorAction {
        OperatorAction {
            src_cluster: sc,
            dst_cluster: dc,
            src_target: st,
            dst_target: dt,
        }
    }

    #[test]
    fn moves_lowest_agent_and_lowest_cluster() {
        let (next, flags) = small().apply(&act(0, 1, 0, 1)).unwrap();
        assert_eq!(flags, [true, true]);
        assert_eq!(next.agent_to_cluster, vec![1, 0, 1]);
        assert_eq!(next.cluster_to_target, vec![1, 1]);
    }

    #[test]
    fn same_cluster_pair_is_a_no_op() {
        let t = small();
        let (next, flags) = t.apply(&act(0, 0, 0, 1)).unwrap();
        assert!(!flags[0]);
        assert_eq!(next.agent_to_cluster, t.agent_to_cluster);
    }

    #[test]
    fn empty_source_cluster_is_a_no_op() {
        let t = EcgTopology::new(2, two_targets(), vec![0, 0, 0], vec![0, 1]).unwrap();
        let (next, flags) = t.apply(&act(1, 0, 1, 1)).unwrap();
        assert_eq!(flags, [false, false]);
        assert_eq!(next, t);
    }

    #[test]
    fn out_of_range_action_is_rejected() {
        assert!(matches!(
            small().apply(&act(2, 0, 0, 0)),
            Err(EcgError::OutOfRange {
                layer: "cluster",
                ..
            })
        ));
        assert!(small().apply(&act(0, 0, 0, 2)).is_err());
    }

    #[test]
    fn masks_track_occupancy() {
        let t = EcgTopology::new(3, two_targets(), vec![0, 0, 0], vec![0, 0, 1]).unwrap();
        assert_eq!(t.action_masks().cluster_mask, vec![true, false, false]);
        let t = EcgTopology::new(3, two_targets(), vec![2, 0, 1], vec![0, 0, 1]).unwrap();
        assert_eq!(t.action_masks().cluster_mask, vec![true, true, true]);
        let targets = build_targets(PrimitiveSet::Six, 9, 4, true);
        let t = EcgTopology::new(14, targets, vec![0; 5], vec![5; 14]).unwrap();
        let m = t.action_masks().target_mask;
        assert!(m.iter().enumerate().all(|(i, &x)| x == (i == 5)));
    }

    #[test]
    fn entropy_examples() {
        let t = EcgTopology::new(3, two_targets(), vec![1; 6], vec![0, 0, 0]).unwrap();
        assert_eq!(t.entropy(), 0.0);
        let t = EcgTopology::new(2, two_targets(), vec![0, 1, 0, 1], vec![0, 1]).unwrap();
        assert!((t.entropy() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let targets = build_targets(PrimitiveSet::Six, 0, 0, false);
        let t =
            EcgTopology::new(3, targets, (0..9).map(|i| i % 3).collect(), vec![0, 2, 4]).unwrap();
        assert!((t.entropy() - (3f64.ln() + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn random_topology_properties() {
        let targets = build_targets(PrimitiveSet::Six, 3, 2, true);
        let t = EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(1), 20, 1, &targets).unwrap();
        assert!(t.agent_to_cluster.iter().all(|&c| c == 0));
        let a = EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(7), 20, 6, &targets).unwrap();
        let b = EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(7), 20, 6, &targets).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(7), 20, 0, &targets),
            Err(EcgError::Empty)
        );
        assert_eq!(
            EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(7), 20, 3, &[]),
            Err(EcgError::Empty)
        );
    }

    #[test]
    fn single_candidate_selection_equals_one_draw() {
        let targets = build_targets(PrimitiveSet::Six, 3, 2, true);
        let a = EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(3), 12, 6, &targets).unwrap();
        let b = EcgTopology::select_initial(&mut ChaCha8Rng::seed_from_u64(3), 1, 12, 6, &targets)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn doubly_invalid_interference_changes_nothing() {
        // one cluster and one target: every random action is a same-node pick
        let targets = vec![TargetNode {
            id: 0,
            kind: TargetKind::Primitive(0),
        }];
        let t = EcgTopology::new(1, targets, vec![0, 0], vec![0]).unwrap();
        let (next, fake) = t.interfere(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(fake, act(0, 0, 0, 0));
        assert_eq!(next, t);
    }

    #[test]
    fn extension_sizes() {
        let targets = build_targets(PrimitiveSet::Six, 9, 4, true);
        let base =
            EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(0), 27, 14, &targets).unwrap();
        let ext = base.extend(2).unwrap();
        assert_eq!(ext.env_agent_count(), 54);
        assert_eq!(ext.n_agents, 27);
        assert_eq!(ext.n_clusters, 14);
        assert_eq!(ext.targets, base.targets);
        assert_eq!(base.extend(8).unwrap().env_agent_count(), 216);
        assert_eq!(base.extend(1), Err(EcgError::FanOut(1)));
        assert_eq!(ext.extend(2), Err(EcgError::AlreadyExtended));
    }

    #[test]
    fn resolve_broadcasts_primitives_and_covers_every_agent() {
        let mut cfg = CsiConfig::for_task(TaskSpec {
            n_agents: 3,
            k_threshold: 1,
            m_invaders: 1,
        });
        cfg.n_bases = 1;
        let env = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let targets = build_targets(PrimitiveSet::Six, 1, 1, true);
        let t = EcgTopology::new(2, targets.clone(), vec![0, 0, 0], vec![2, 0]).unwrap();
        assert_eq!(t.resolve_agent_actions(&env, &cfg).unwrap(), vec![2, 2, 2]);

        let ext = t.extend(2).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.n_agents = 6;
        let env2 = CsiState::reset(&cfg2, &mut ChaCha8Rng::seed_from_u64(0));
        let acts = ext.resolve_agent_actions(&env2, &cfg2).unwrap();
        assert_eq!(acts, vec![2; 6]);
    }

    #[test]
    fn resolve_translates_cooperative_targets() {
        let mut cfg = CsiConfig::for_task(TaskSpec {
            n_agents: 2,
            k_threshold: 1,
            m_invaders: 1,
        });
        cfg.n_bases = 1;
        let mut env = CsiState::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        env.agent_pos = vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let targets = vec![TargetNode {
            id: 0,
            kind: TargetKind::Cooperative(CoopCommand::Gather),
        }];
        let t = EcgTopology::new(1, targets, vec![0, 0], vec![0]).unwrap();
        assert_eq!(t.resolve_agent_actions(&env, &cfg).unwrap(), vec![0, 1]);
    }

    #[test]
    fn json_round_trip_and_dot() {
        let targets = build_targets(PrimitiveSet::Fourteen, 2, 2, true);
        let t = EcgTopology::random(&mut ChaCha8Rng::seed_from_u64(4), 5, 3, &targets)
            .unwrap()
            .extend(2)
            .unwrap();
        let back = EcgTopology::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let dot = t.to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(
            dot.contains("color=red")
                && dot.contains("color=blue")
                && dot.contains("color=darkgreen")
        );
        assert_eq!(dot.matches(" -> ").count(), 5 + 3);
    }

    #[test]
    fn import_rejects_broken_topologies() {
        let mut v = small().to_json();
        v["agent_to_cluster"] = serde_json::json!([0, 5, 1]);
        assert!(EcgTopology::from_json(&v).is_err());
        let mut v = small().to_json();
        v["targets"][0]["kind"] = serde_json::json!("teleport");
        assert!(EcgTopology::from_json(&v).is_err());
    }

    #[test]
    fn target_layout() {
        let t = build_targets(PrimitiveSet::Six, 9, 4, true);
        assert_eq!(t.len(), 19);
        assert_eq!(
            t[6].kind,
            TargetKind::Cooperative(CoopCommand::Intercept(0))
        );
        assert_eq!(t[15].kind, TargetKind::Cooperative(CoopCommand::Defend(0)));
        assert!(build_targets(PrimitiveSet::None, 9, 4, false).is_empty());
    }
}
