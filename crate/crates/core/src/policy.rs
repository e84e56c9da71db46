//! Shared policy network of the four graph operators.
//!
//! Cluster nodes are the attention queries: each cluster attends to its
//! member agents (Attention-AC) and to its connected target
//! (Attention-CT). The per-cluster embeddings feed a shared vector `z`,
//! a value head and four sequentially conditioned operator heads. Three
//! attention decoders reconstruct the raw node representations from the
//! cluster embeddings.

use std::fs;
use std::io::{self, Write as _};
use std::path::Path;

use hcgl_tensor::{Adam, AttentionMask, Tape, Tensor, TensorError, Var, MASK_LOGIT};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coop::COOP_REPR_LEN;
use crate::csi::{CsiConfig, CsiState};
use crate::ecg::{ActionMasks, EcgTopology, OperatorAction, TargetKind};

pub const DEFAULT_HIDDEN: usize = 64;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const NORM_EPS: f64 = 1e-8;
const NORM_CLIP: f64 = 10.0;
const HEAD_INIT_GAIN: f64 = 0.01;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{layer}: {source}")]
    Layer {
        layer: &'static str,
        #[source]
        source: TensorError,
    },
    #[error("input does not match the network: {0}")]
    Shape(String),
    #[error("merge attention already present")]
    AlreadyExtended,
    #[error("every cluster is empty; operator 1 has nothing to pick")]
    FullyMasked,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

trait LayerContext<T> {
    fn layer(self, layer: &'static str) -> Result<T, PolicyError>;
}

impl<T> LayerContext<T> for Result<T, TensorError> {
    fn layer(self, layer: &'static str) -> Result<T, PolicyError> {
        self.map_err(|source| PolicyError::Layer { layer, source })
    }
}

/// Everything that fixes parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    /// Agent-layer nodes (secondary clusters after extension).
    pub n_agent_nodes: usize,
    /// Environment agents behind each agent node; 1 before extension.
    pub fan_out: usize,
    pub d_obs: usize,
    pub n_clusters: usize,
    pub n_targets: usize,
    /// Width of a raw target representation.
    pub d_raw: usize,
    pub d: usize,
}

impl PolicyDims {
    pub fn new(
        n_agents: usize,
        d_obs: usize,
        n_clusters: usize,
        n_targets: usize,
        d: usize,
    ) -> Self {
        Self {
            n_agent_nodes: n_agents,
            fan_out: 1,
            d_obs,
            n_clusters,
            n_targets,
            d_raw: n_targets.max(COOP_REPR_LEN),
            d,
        }
    }

    pub fn for_task(config: &CsiConfig, topology: &EcgTopology, d: usize) -> Self {
        let mut dims = Self::new(
            topology.n_agents,
            config.observation_len(),
            topology.n_clusters,
            topology.n_targets(),
            d,
        );
        dims.fan_out = topology.extension.as_ref().map_or(1, |e| e.fan_out);
        dims
    }

    pub fn n_env_agents(&self) -> usize {
        self.n_agent_nodes * self.fan_out
    }
}

/// Raw node representations of one graph state. Cluster representations
/// are the identity (one-hot per cluster) and are not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRepresentations {
    /// One observation row per environment agent, members of agent node
    /// `i` at rows `i*g .. i*g+g`.
    pub agent_reps: Tensor,
    pub target_reps: Tensor,
}

impl NodeRepresentations {
    pub fn build(env: &CsiState, topology: &EcgTopology, config: &CsiConfig) -> Self {
        let n = topology.env_agent_count();
        let d_obs = config.observation_len();
        let mut agents = Vec::with_capacity(n * d_obs);
        for a in 0..n {
            agents.extend(env.observe(a, config));
        }
        let d_raw = topology.n_targets().max(COOP_REPR_LEN);
        let mut targets = Vec::with_capacity(topology.n_targets() * d_raw);
        for t in &topology.targets {
            match t.kind {
                TargetKind::Primitive(_) => {
                    let mut row = vec![0.0; d_raw];
                    row[t.id] = 1.0;
                    targets.extend(row);
                }
                TargetKind::Cooperative(cmd) => targets.extend(cmd.raw_repr(env, config, d_raw)),
            }
        }
        Self {
            agent_reps: Tensor::new(vec![n, d_obs], agents).expect("observation rows"),
            target_reps: Tensor::new(vec![topology.n_targets(), d_raw], targets)
                .expect("target rows"),
        }
    }

    pub fn cluster_reps(n_clusters: usize) -> Tensor {
        Tensor::eye(n_clusters)
    }

    pub fn is_finite(&self) -> bool {
        self.agent_reps.is_finite() && self.target_reps.is_finite()
    }
}

/// Running mean and variance of agent observations (parallel Welford).
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl Normalizer {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2.0 {
            return vec![1.0; self.mean.len()];
        }
        self.m2.iter().map(|m| m / self.count).collect()
    }

    /// Merges `other` into `self`.
    pub fn merge(&mut self, other: &Normalizer) {
        if other.count == 0.0 {
            return;
        }
        let n = self.count + other.count;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / n;
            self.m2[i] += other.m2[i] + delta * delta * self.count * other.count / n;
        }
        self.count = n;
    }

    pub fn observe_rows(&mut self, rows: &[f64]) {
        let w = self.mean.len();
        for row in rows.chunks(w) {
            self.count += 1.0;
            for ((&x, mean), m2) in row.iter().zip(&mut self.mean).zip(&mut self.m2) {
                let delta = x - *mean;
                *mean += delta / self.count;
                *m2 += delta * (x - *mean);
            }
        }
    }

    pub fn normalize_rows(&self, rows: &mut [f64]) {
        let w = self.mean.len();
        let std: Vec<f64> = self
            .variance()
            .iter()
            .map(|v| (v + NORM_EPS).sqrt())
            .collect();
        for row in rows.chunks_mut(w) {
            for i in 0..w {
                row[i] = ((row[i] - self.mean[i]) / std[i]).clamp(-NORM_CLIP, NORM_CLIP);
            }
        }
    }
}

/// One graph state as the network sees it: representations with agent
/// rows already normalized, plus the topology edges.
#[derive(Clone, Copy, Debug)]
pub struct GraphSample<'a> {
    pub reps: &'a NodeRepresentations,
    pub agent_to_cluster: &'a [usize],
    pub cluster_to_target: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Argmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorDecision {
    pub action: OperatorAction,
    pub log_probs: [f64; 4],
    pub value: f64,
    pub entropy: [f64; 4],
}

impl OperatorDecision {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

pub fn action_indices(a: &OperatorAction) -> [usize; 4] {
    [a.src_cluster, a.dst_cluster, a.src_target, a.dst_target]
}

/// Stacked inputs for `B` graph states.
pub struct GraphBatch {
    size: usize,
    agents: Tensor,
    targets: Tensor,
    ac_mask: Vec<bool>,
    ct_mask: Vec<bool>,
    gate: Tensor,
    cluster_mask: Tensor,
    target_mask: Tensor,
    agent_target: Tensor,
}

impl GraphBatch {
    pub fn new(dims: &PolicyDims, samples: &[GraphSample<'_>]) -> Result<Self, PolicyError> {
        let b = samples.len();
        if b == 0 {
            return Err(PolicyError::Shape("empty batch".into()));
        }
        let (na, nk, nt, g) = (
            dims.n_agent_nodes,
            dims.n_clusters,
            dims.n_targets,
            dims.fan_out,
        );
        let ne = dims.n_env_agents();
        let mut agents = Vec::with_capacity(b * ne * dims.d_obs);
        let mut targets = Vec::with_capacity(b * nt * dims.d_raw);
        let mut ac_mask = vec![false; b * nk * na];
        let mut ct_mask = vec![false; b * nk * nt];
        let mut gate = vec![0.0; b * nk * dims.d];
        let mut cluster_mask = vec![MASK_LOGIT; b * nk];
        let mut target_mask = vec![MASK_LOGIT; b * nt];
        let mut agent_target = vec![0.0; b * na * dims.d_obs];
        for (s, sample) in samples.iter().enumerate() {
            let r = sample.reps;
            if r.agent_reps.shape() != [ne, dims.d_obs] || r.target_reps.shape() != [nt, dims.d_raw]
            {
                return Err(PolicyError::Shape(format!(
                    "sample {s}: agent reps {:?}, target reps {:?}; network expects [{ne}, {}] and [{nt}, {}]",
                    r.agent_reps.shape(),
                    r.target_reps.shape(),
                    dims.d_obs,
                    dims.d_raw
                )));
            }
            if sample.agent_to_cluster.len() != na || sample.cluster_to_target.len() != nk {
                return Err(PolicyError::Shape(format!(
                    "sample {s}: topology with {} agent nodes and {} clusters; network expects {na} and {nk}",
                    sample.agent_to_cluster.len(),
                    sample.cluster_to_target.len()
                )));
            }
            agents.extend_from_slice(r.agent_reps.data());
            targets.extend_from_slice(r.target_reps.data());
            for (a, &c) in sample.agent_to_cluster.iter().enumerate() {
                if c >= nk {
                    return Err(PolicyError::Shape(format!(
                        "agent edge to cluster {c} of {nk}"
                    )));
                }
                ac_mask[(s * nk + c) * na + a] = true;
                cluster_mask[s * nk + c] = 0.0;
                gate[(s * nk + c) * dims.d..(s * nk + c + 1) * dims.d].fill(1.0);
            }
            for (c, &t) in sample.cluster_to_target.iter().enumerate() {
                if t >= nt {
                    return Err(PolicyError::Shape(format!(
                        "cluster edge to target {t} of {nt}"
                    )));
                }
                ct_mask[(s * nk + c) * nt + t] = true;
                target_mask[s * nt + t] = 0.0;
            }
            let rows = r.agent_reps.data();
            for a in 0..na {
                let dst =
                    &mut agent_target[(s * na + a) * dims.d_obs..(s * na + a + 1) * dims.d_obs];
                for m in 0..g {
                    let src = &rows[(a * g + m) * dims.d_obs..(a * g + m + 1) * dims.d_obs];
                    for (d, x) in dst.iter_mut().zip(src) {
                        *d += x / g as f64;
                    }
                }
            }
        }
        let t = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).expect("batch layout");
        Ok(Self {
            size: b,
            agents: t(vec![b * ne, dims.d_obs], agents),
            targets: t(vec![b * nt, dims.d_raw], targets),
            ac_mask,
            ct_mask,
            gate: t(vec![b * nk, dims.d], gate),
            cluster_mask: t(vec![b, nk], cluster_mask),
            target_mask: t(vec![b, nt], target_mask),
            agent_target: t(vec![b * na, dims.d_obs], agent_target),
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct AttnBlock {
    wq: usize,
    wk: usize,
    wv: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Decoder {
    query: usize,
    wk: usize,
    wv: usize,
    out: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Merge {
    query: usize,
    wk: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    proj_a: Linear,
    proj_c: Linear,
    proj_t: Linear,
    att_ac: AttnBlock,
    att_ct: AttnBlock,
    trunk: Linear,
    flat: Linear,
    value: Linear,
    heads: [Linear; 4],
    ae: [Decoder; 3],
    merge: Option<Merge>,
}

struct Builder<'r, R: Rng + ?Sized> {
    rng: &'r mut R,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, gain: f64) -> usize {
        let bound = gain / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));
        self.push(name, t)
    }

    fn push(&mut self, name: &str, t: Tensor) -> usize {
        self.names.push(name.to_string());
        self.params.push(t);
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, gain: f64) -> Linear {
        Linear {
            w: self.uniform(&format!("{name}.w"), i, o, i, gain),
            b: self.push(&format!("{name}.b"), Tensor::zeros(&[1, o])),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnBlock {
        AttnBlock {
            wq: self.uniform(&format!("{name}.wq"), d, d, d, 1.0),
            wk: self.uniform(&format!("{name}.wk"), d, d, d, 1.0),
            wv: self.uniform(&format!("{name}.wv"), d, d, d, 1.0),
        }
    }

    fn decoder(&mut self, name: &str, slots: usize, d: usize, out: usize) -> Decoder {
        Decoder {
            query: self.uniform(&format!("{name}.query"), slots, d, slots, 1.0),
            wk: self.uniform(&format!("{name}.wk"), d, d, d, 1.0),
            wv: self.uniform(&format!("{name}.wv"), d, d, d, 1.0),
            out: self.linear(&format!("{name}.out"), d, out, 1.0),
        }
    }

    fn merge(&mut self, d: usize) -> Merge {
        Merge {
            query: self.uniform("merge.query", 1, d, d, 1.0),
            wk: self.uniform("merge.wk", d, d, d, 1.0),
        }
    }
}

/// Weights, their names and the observation normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub dims: PolicyDims,
    pub params: Vec<Tensor>,
    pub names: Vec<String>,
    pub normalizer: Normalizer,
    layout: Layout,
}

/// Tape handles produced by [`Policy::encode_on`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub e_h: Var,
    pub z: Var,
}

/// Per-sample losses are summed and divided by these counts, so chunks of
/// one minibatch can be differentiated separately and their gradients
/// added.
#[derive(Clone, Copy, Debug)]
pub struct LossScale {
    pub policy_count: f64,
    pub sample_count: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossCoefs {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub ae_coef: f64,
    /// Heads that contribute to the log-probability and entropy.
    pub active_heads: [bool; 4],
}

/// Per-sample training targets, aligned with a [`GraphBatch`].
#[derive(Clone, Debug, Default)]
pub struct LossTargets {
    pub actions: Vec<[usize; 4]>,
    pub old_log_prob: Vec<f64>,
    pub old_value: Vec<f64>,
    pub advantage: Vec<f64>,
    pub returns: Vec<f64>,
    /// False on interference steps.
    pub learned: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub ae: f64,
    pub total: f64,
}

impl LossReport {
    pub fn add_scaled(&mut self, other: &LossReport, w: f64) {
        self.policy += w * other.policy;
        self.value += w * other.value;
        self.entropy += w * other.entropy;
        self.ae += w * other.ae;
        self.total += w * other.total;
    }
}

fn column(values: impl IntoIterator<Item = f64>) -> Tensor {
    let data: Vec<f64> = values.into_iter().collect();
    Tensor::new(vec![data.len(), 1], data).expect("column")
}

fn one_hot(indices: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * width];
    for (r, &i) in indices.iter().enumerate() {
        data[r * width + i] = 1.0;
    }
    Tensor::new(vec![indices.len(), width], data).expect("one-hot")
}

fn tile_index(n: usize, times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..n).collect()
}

/// Entropy of each row of a log-probability matrix.
fn row_entropies(logp: &Tensor) -> Vec<f64> {
    logp.data()
        .chunks(logp.cols())
        .map(|row| {
            -row.iter()
                .map(|&l| if l.exp() > 0.0 { l.exp() * l } else { 0.0 })
                .sum::<f64>()
        })
        .collect()
}

fn choose<R: Rng + ?Sized>(logp: &[f64], mode: ActMode, rng: &mut R) -> usize {
    match mode {
        ActMode::Argmax => {
            let mut best = 0;
            for (i, &l) in logp.iter().enumerate() {
                if l > logp[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &l) in logp.iter().enumerate() {
                let p = l.exp();
                if p > 0.0 {
                    acc += p;
                    last = i;
                    if u < acc {
                        return i;
                    }
                }
            }
            last
        }
    }
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(dims: PolicyDims, rng: &mut R) -> Self {
        let d = dims.d;
        let (nk, nt) = (dims.n_clusters, dims.n_targets);
        let mut b = Builder {
            rng,
            names: Vec::new(),
            params: Vec::new(),
        };
        let proj_a = b.linear("proj_a", dims.d_obs, d, 1.0);
        let proj_c = b.linear("proj_c", nk, d, 1.0);
        let proj_t = b.linear("proj_t", dims.d_raw, d, 1.0);
        let att_ac = b.attn("att_ac", d);
        let att_ct = b.attn("att_ct", d);
        let trunk = b.linear("trunk", 2 * d, d, 1.0);
        let flat = b.linear("flat", nk * d, d, 1.0);
        let value = b.linear("value", d, 1, 1.0);
        let heads = [
            b.linear("op1", d, nk, HEAD_INIT_GAIN),
            b.linear("op2", d + nk, nk, HEAD_INIT_GAIN),
            b.linear("op3", d + 2 * nk, nt, HEAD_INIT_GAIN),
            b.linear("op4", d + 2 * nk + nt, nt, HEAD_INIT_GAIN),
        ];
        let ae = [
            b.decoder("ae_a", dims.n_agent_nodes, d, dims.d_obs),
            b.decoder("ae_c", nk, d, nk),
            b.decoder("ae_t", nt, d, dims.d_raw),
        ];
        let merge = (dims.fan_out > 1).then(|| b.merge(d));
        let Builder { names, params, .. } = b;
        Self {
            dims,
            params,
            names,
            normalizer: Normalizer::new(dims.d_obs),
            layout: Layout {
                proj_a,
                proj_c,
                proj_t,
                att_ac,
                att_ct,
                trunk,
                flat,
                value,
                heads,
                ae,
                merge,
            },
        }
    }

    pub fn has_merge(&self) -> bool {
        self.layout.merge.is_some()
    }

    /// Raw representations with agent rows normalized by the running statistics.
    pub fn prepare(
        &self,
        env: &CsiState,
        topology: &EcgTopology,
        config: &CsiConfig,
    ) -> NodeRepresentations {
        let mut reps = NodeRepresentations::build(env, topology, config);
        self.normalizer.normalize_rows(reps.agent_reps.data_mut());
        reps
    }

    fn lin(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        l: Linear,
        layer: &'static str,
    ) -> Result<Var, PolicyError> {
        tape.linear(x, tape.param(l.w), tape.param(l.b))
            .layer(layer)
    }

    /// Cluster embeddings `e_h` `[B*n_k, d]` and the shared vector `z` `[B, d]`.
    pub fn encode_on(
        &self,
        tape: &mut Tape<'_>,
        batch: &GraphBatch,
    ) -> Result<Encoded, PolicyError> {
        let dims = &self.dims;
        let lay = &self.layout;
        let b = batch.size;
        let (nk, d) = (dims.n_clusters, dims.d);

        let x_a = tape.constant(batch.agents.clone()).layer("input")?;
        let mut emb_a = self.lin(tape, x_a, lay.proj_a, "proj-agents")?;
        if let Some(m) = lay.merge {
            let keys = tape
                .matmul(emb_a, tape.param(m.wk))
                .layer("merge-attention")?;
            let q = tape
                .gather_rows(tape.param(m.query), vec![0; b * dims.n_agent_nodes])
                .layer("merge-attention")?;
            emb_a = tape
                .attention(q, keys, emb_a, b * dims.n_agent_nodes, &AttentionMask::None)
                .layer("merge-attention")?;
        }

        let eye = tape.constant(Tensor::eye(nk)).layer("input")?;
        let emb_c = self.lin(tape, eye, lay.proj_c, "proj-clusters")?;
        let x_t = tape.constant(batch.targets.clone()).layer("input")?;
        let emb_t = self.lin(tape, x_t, lay.proj_t, "proj-targets")?;

        // Cluster queries are identical across the batch: project once, tile.
        let tile = tile_index(nk, b);
        let q_ac = tape
            .matmul(emb_c, tape.param(lay.att_ac.wq))
            .layer("attention-ac")?;
        let q_ac = tape.gather_rows(q_ac, tile.clone()).layer("attention-ac")?;
        let k_ac = tape
            .matmul(emb_a, tape.param(lay.att_ac.wk))
            .layer("attention-ac")?;
        let v_ac = tape
            .matmul(emb_a, tape.param(lay.att_ac.wv))
            .layer("attention-ac")?;
        let ac = tape
            .attention(
                q_ac,
                k_ac,
                v_ac,
                b,
                &AttentionMask::Pairs(batch.ac_mask.clone()),
            )
            .layer("attention-ac")?;
        // an empty cluster has no keys; its attention output is zeroed
        let gate = tape.constant(batch.gate.clone()).layer("attention-ac")?;
        let ac = tape.mul(ac, gate).layer("attention-ac")?;

        let q_ct = tape
            .matmul(emb_c, tape.param(lay.att_ct.wq))
            .layer("attention-ct")?;
        let q_ct = tape.gather_rows(q_ct, tile).layer("attention-ct")?;
        let k_ct = tape
            .matmul(emb_t, tape.param(lay.att_ct.wk))
            .layer("attention-ct")?;
        let v_ct = tape
            .matmul(emb_t, tape.param(lay.att_ct.wv))
            .layer("attention-ct")?;
        let ct = tape
            .attention(
                q_ct,
                k_ct,
                v_ct,
                b,
                &AttentionMask::Pairs(batch.ct_mask.clone()),
            )
            .layer("attention-ct")?;

        let cat = tape.concat_cols(&[ac, ct]).layer("trunk")?;
        let h = self.lin(tape, cat, lay.trunk, "trunk")?;
        let e_h = tape.relu(h).layer("trunk")?;
        let flat = tape.reshape(e_h, &[b, nk * d]).layer("shared-embedding")?;
        let z = self.lin(tape, flat, lay.flat, "shared-embedding")?;
        let z = tape.relu(z).layer("shared-embedding")?;
        Ok(Encoded { e_h, z })
    }

    pub fn value_on(&self, tape: &mut Tape<'_>, z: Var) -> Result<Var, PolicyError> {
        self.lin(tape, z, self.layout.value, "value-head")
    }

    /// Log-probabilities of head `i` `[B, n_i]` given the one-hot prefix of
    /// earlier choices.
    fn head_on(
        &self,
        tape: &mut Tape<'_>,
        i: usize,
        z: Var,
        prefix: &[Var],
        batch: &GraphBatch,
    ) -> Result<Var, PolicyError> {
        const NAMES: [&str; 4] = ["op1-head", "op2-head", "op3-head", "op4-head"];
        let input = if prefix.is_empty() {
            z
        } else {
            let mut parts = vec![z];
            parts.extend_from_slice(prefix);
            tape.concat_cols(&parts).layer(NAMES[i])?
        };
        let mut logits = self.lin(tape, input, self.layout.heads[i], NAMES[i])?;
        let mask = match i {
            0 => Some(&batch.cluster_mask),
            2 => Some(&batch.target_mask),
            _ => None,
        };
        if let Some(m) = mask {
            let m = tape.constant(m.clone()).layer(NAMES[i])?;
            logits = tape.add(logits, m).layer(NAMES[i])?;
        }
        tape.log_softmax_rows(logits).layer(NAMES[i])
    }

    fn head_width(&self, i: usize) -> usize {
        if i < 2 {
            self.dims.n_clusters
        } else {
            self.dims.n_targets
        }
    }

    /// Log-probability matrices of all four heads under teacher forcing by `actions`.
    pub fn heads_on(
        &self,
        tape: &mut Tape<'_>,
        z: Var,
        batch: &GraphBatch,
        actions: &[[usize; 4]],
    ) -> Result<[Var; 4], PolicyError> {
        let mut prefix = Vec::with_capacity(3);
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            out.push(self.head_on(tape, i, z, &prefix, batch)?);
            if i < 3 {
                let idx: Vec<usize> = actions.iter().map(|a| a[i]).collect();
                prefix.push(
                    tape.constant(one_hot(&idx, self.head_width(i)))
                        .layer("conditioning")?,
                );
            }
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Reconstructions `(agents, clusters, targets)` and `L_ae` (mean of the three MSEs).
    pub fn reconstruct_on(
        &self,
        tape: &mut Tape<'_>,
        e_h: Var,
        batch: &GraphBatch,
    ) -> Result<([Var; 3], Var), PolicyError> {
        let b = batch.size;
        let dims = &self.dims;
        let slots = [dims.n_agent_nodes, dims.n_clusters, dims.n_targets];
        let targets = [
            batch.agent_target.clone(),
            Tensor::from_fn(b * dims.n_clusters, dims.n_clusters, |r, c| {
                if r % dims.n_clusters == c {
                    1.0
                } else {
                    0.0
                }
            }),
            batch.targets.clone(),
        ];
        let mut recon = Vec::with_capacity(3);
        let mut mse = Vec::with_capacity(3);
        for ((dec, n), target) in self.layout.ae.iter().zip(slots).zip(targets) {
            let codes = tape.constant(Tensor::eye(n)).layer("attention-ae")?;
            let q = tape
                .matmul(codes, tape.param(dec.query))
                .layer("attention-ae")?;
            let q = tape
                .gather_rows(q, tile_index(n, b))
                .layer("attention-ae")?;
            let k = tape.matmul(e_h, tape.param(dec.wk)).layer("attention-ae")?;
            let v = tape.matmul(e_h, tape.param(dec.wv)).layer("attention-ae")?;
            let att = tape
                .attention(q, k, v, b, &AttentionMask::None)
                .layer("attention-ae")?;
            let out = self.lin(tape, att, dec.out, "attention-ae")?;
            let t = tape.constant(target).layer("attention-ae")?;
            let diff = tape.sub(out, t).layer("attention-ae")?;
            let sq = tape.mul(diff, diff).layer("attention-ae")?;
            mse.push(tape.mean(sq).layer("attention-ae")?);
            recon.push(out);
        }
        let s = tape.add(mse[0], mse[1]).layer("attention-ae")?;
        let s = tape.add(s, mse[2]).layer("attention-ae")?;
        let l = tape.scale(s, 1.0 / 3.0).layer("attention-ae")?;
        Ok(([recon[0], recon[1], recon[2]], l))
    }

    /// Picks all four operator actions for each sample, one head at a time.
    pub fn act_batch<R: Rng>(
        &self,
        batch: &GraphBatch,
        rngs: &mut [R],
        mode: ActMode,
    ) -> Result<Vec<OperatorDecision>, PolicyError> {
        if rngs.len() != batch.size {
            return Err(PolicyError::Shape(format!(
                "{} rngs for {} samples",
                rngs.len(),
                batch.size
            )));
        }
        if batch
            .cluster_mask
            .data()
            .chunks(self.dims.n_clusters)
            .any(|r| r.iter().all(|&m| m != 0.0))
        {
            return Err(PolicyError::FullyMasked);
        }
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, batch)?;
        let v = self.value_on(&mut tape, enc.z)?;
        let values = tape.value(v).data().to_vec();
        let mut chosen = vec![[0usize; 4]; batch.size];
        let mut log_probs = vec![[0.0; 4]; batch.size];
        let mut entropy = vec![[0.0; 4]; batch.size];
        let mut prefix = Vec::with_capacity(3);
        for i in 0..4 {
            let lp = self.head_on(&mut tape, i, enc.z, &prefix, batch)?;
            let lpv = tape.value(lp);
            let ent = row_entropies(lpv);
            for (s, rng) in rngs.iter_mut().enumerate() {
                let row = lpv.row(s);
                let a = choose(row, mode, rng);
                chosen[s][i] = a;
                log_probs[s][i] = row[a];
                entropy[s][i] = ent[s];
            }
            if i < 3 {
                let idx: Vec<usize> = chosen.iter().map(|c| c[i]).collect();
                prefix.push(
                    tape.constant(one_hot(&idx, self.head_width(i)))
                        .layer("conditioning")?,
                );
            }
        }
        Ok((0..batch.size)
            .map(|s| OperatorDecision {
                action: OperatorAction {
                    src_cluster: chosen[s][0],
                    dst_cluster: chosen[s][1],
                    src_target: chosen[s][2],
                    dst_target: chosen[s][3],
                },
                log_probs: log_probs[s],
                value: values[s],
                entropy: entropy[s],
            })
            .collect())
    }

    /// Single-state convenience around [`Policy::act_batch`]; `reps` must already be normalized.
    pub fn act<R: Rng>(
        &self,
        reps: &NodeRepresentations,
        topology: &EcgTopology,
        rng: &mut R,
        mode: ActMode,
    ) -> Result<OperatorDecision, PolicyError> {
        let batch = GraphBatch::new(&self.dims, &[sample_of(reps, topology)])?;
        let mut d = self.act_batch(&batch, std::slice::from_mut(rng), mode)?;
        Ok(d.pop().expect("one decision"))
    }

    /// Cluster embeddings `[n_k, d]` for a single normalized state.
    pub fn encode(
        &self,
        reps: &NodeRepresentations,
        topology: &EcgTopology,
    ) -> Result<Tensor, PolicyError> {
        let batch = GraphBatch::new(&self.dims, &[sample_of(reps, topology)])?;
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, &batch)?;
        Ok(tape.value(enc.e_h).clone())
    }

    pub fn value(
        &self,
        reps: &NodeRepresentations,
        topology: &EcgTopology,
    ) -> Result<f64, PolicyError> {
        let batch = GraphBatch::new(&self.dims, &[sample_of(reps, topology)])?;
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, &batch)?;
        let v = self.value_on(&mut tape, enc.z)?;
        Ok(tape.value(v).item())
    }

    /// Reconstructed `(agents, clusters, targets)` and `L_ae` for one normalized state.
    pub fn reconstruct(
        &self,
        reps: &NodeRepresentations,
        topology: &EcgTopology,
    ) -> Result<([Tensor; 3], f64), PolicyError> {
        let batch = GraphBatch::new(&self.dims, &[sample_of(reps, topology)])?;
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, &batch)?;
        let (r, l) = self.reconstruct_on(&mut tape, enc.e_h, &batch)?;
        let v = |x: Var| tape.value(x).clone();
        Ok(([v(r[0]), v(r[1]), v(r[2])], tape.value(l).item()))
    }

    /// Log-probability vectors of the four heads when earlier heads chose `prefix`.
    pub fn conditional_log_probs(
        &self,
        reps: &NodeRepresentations,
        topology: &EcgTopology,
        prefix: [usize; 3],
    ) -> Result<[Vec<f64>; 4], PolicyError> {
        let batch = GraphBatch::new(&self.dims, &[sample_of(reps, topology)])?;
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, &batch)?;
        let lp = self.heads_on(
            &mut tape,
            enc.z,
            &batch,
            &[[prefix[0], prefix[1], prefix[2], 0]],
        )?;
        Ok(lp.map(|v| tape.value(v).data().to_vec()))
    }

    /// Clipped PPO loss with value clipping, entropy bonus and reconstruction
    /// term on one batch chunk.
    pub fn loss_on(
        &self,
        tape: &mut Tape<'_>,
        batch: &GraphBatch,
        targets: &LossTargets,
        coefs: &LossCoefs,
        scale: LossScale,
    ) -> Result<(Var, LossReport), PolicyError> {
        let n = batch.size;
        if [
            targets.actions.len(),
            targets.old_log_prob.len(),
            targets.old_value.len(),
            targets.advantage.len(),
            targets.returns.len(),
            targets.learned.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(PolicyError::Shape(
                "loss targets do not match the batch".into(),
            ));
        }
        let enc = self.encode_on(tape, batch)?;
        let heads = self.heads_on(tape, enc.z, batch, &targets.actions)?;

        let mut logp: Option<Var> = None;
        let mut ent: Option<Var> = None;
        for (i, &lp) in heads.iter().enumerate() {
            if !coefs.active_heads[i] {
                continue;
            }
            let idx: Vec<usize> = targets.actions.iter().map(|a| a[i]).collect();
            let picked = tape.pick_cols(lp, idx).layer("policy-loss")?;
            let p = tape.exp(lp).layer("entropy")?;
            let plogp = tape.mul(p, lp).layer("entropy")?;
            let h = tape.sum_rows(plogp).layer("entropy")?;
            let h = tape.scale(h, -1.0).layer("entropy")?;
            logp = Some(match logp {
                None => picked,
                Some(acc) => tape.add(acc, picked).layer("policy-loss")?,
            });
            ent = Some(match ent {
                None => h,
                Some(acc) => tape.add(acc, h).layer("entropy")?,
            });
        }
        let (logp, ent) = match (logp, ent) {
            (Some(l), Some(e)) => (l, e),
            _ => return Err(PolicyError::Shape("no active operator heads".into())),
        };

        let learned = tape
            .constant(column(targets.learned.iter().map(|&l| {
                if l {
                    1.0
                } else {
                    0.0
                }
            })))
            .layer("policy-loss")?;
        let old = tape
            .constant(column(targets.old_log_prob.iter().copied()))
            .layer("policy-loss")?;
        let adv = tape
            .constant(column(targets.advantage.iter().copied()))
            .layer("policy-loss")?;
        let diff = tape.sub(logp, old).layer("policy-loss")?;
        let ratio = tape.exp(diff).layer("policy-loss")?;
        let surr1 = tape.mul(ratio, adv).layer("policy-loss")?;
        let clipped = tape
            .clamp(ratio, 1.0 - coefs.clip_eps, 1.0 + coefs.clip_eps)
            .layer("policy-loss")?;
        let surr2 = tape.mul(clipped, adv).layer("policy-loss")?;
        let surr = tape.minimum(surr1, surr2).layer("policy-loss")?;
        let surr = tape.mul(surr, learned).layer("policy-loss")?;
        let surr = tape.sum(surr).layer("policy-loss")?;
        let policy_denom = scale.policy_count.max(1.0);
        let policy = tape.scale(surr, -1.0 / policy_denom).layer("policy-loss")?;

        let ent = tape.mul(ent, learned).layer("entropy")?;
        let ent = tape.sum(ent).layer("entropy")?;
        let entropy = tape.scale(ent, 1.0 / policy_denom).layer("entropy")?;

        let v = self.value_on(tape, enc.z)?;
        let old_v = tape
            .constant(column(targets.old_value.iter().copied()))
            .layer("value-loss")?;
        let ret = tape
            .constant(column(targets.returns.iter().copied()))
            .layer("value-loss")?;
        let dv = tape.sub(v, old_v).layer("value-loss")?;
        let dv = tape
            .clamp(dv, -coefs.clip_eps, coefs.clip_eps)
            .layer("value-loss")?;
        let v_clip = tape.add(old_v, dv).layer("value-loss")?;
        let e1 = tape.sub(v, ret).layer("value-loss")?;
        let e1 = tape.mul(e1, e1).layer("value-loss")?;
        let e2 = tape.sub(v_clip, ret).layer("value-loss")?;
        let e2 = tape.mul(e2, e2).layer("value-loss")?;
        let ve = tape.maximum(e1, e2).layer("value-loss")?;
        let ve = tape.sum(ve).layer("value-loss")?;
        let value = tape
            .scale(ve, 1.0 / scale.sample_count)
            .layer("value-loss")?;

        let (_, ae) = self.reconstruct_on(tape, enc.e_h, batch)?;
        let ae = tape
            .scale(ae, n as f64 / scale.sample_count)
            .layer("attention-ae")?;

        let t = tape.scale(value, coefs.value_coef).layer("total-loss")?;
        let total = tape.add(policy, t).layer("total-loss")?;
        let t = tape
            .scale(entropy, -coefs.entropy_coef)
            .layer("total-loss")?;
        let total = tape.add(total, t).layer("total-loss")?;
        let t = tape.scale(ae, coefs.ae_coef).layer("total-loss")?;
        let total = tape.add(total, t).layer("total-loss")?;

        let report = LossReport {
            policy: tape.value(policy).item(),
            value: tape.value(value).item(),
            entropy: tape.value(entropy).item(),
            ae: tape.value(ae).item(),
            total: tape.value(total).item(),
        };
        Ok((total, report))
    }

    /// Adds a randomly initialized merge attention in front of Attention-AC
    /// so every agent node can stand for `fan_out` agents. All existing
    /// tensors are kept as they are.
    pub fn surgery_for_extension<R: Rng + ?Sized>(
        &self,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Policy, PolicyError> {
        if self.layout.merge.is_some() || self.dims.fan_out != 1 {
            return Err(PolicyError::AlreadyExtended);
        }
        let mut next = self.clone();
        let mut b = Builder {
            rng,
            names: std::mem::take(&mut next.names),
            params: std::mem::take(&mut next.params),
        };
        next.layout.merge = Some(b.merge(self.dims.d));
        next.names = b.names;
        next.params = b.params;
        next.dims.fan_out = fan_out;
        Ok(next)
    }

    /// Bytes written by [`Policy::save`]: an 8-byte little-endian header
    /// length, a JSON header, then every tensor as little-endian `f64`.
    pub fn save(
        &self,
        path: &Path,
        optimizer: Option<&Adam>,
        meta: &serde_json::Value,
    ) -> Result<(), PolicyError> {
        let mut tensors: Vec<(String, &Tensor)> =
            self.names.iter().cloned().zip(self.params.iter()).collect();
        let norm_mean = Tensor::new(vec![1, self.dims.d_obs], self.normalizer.mean.clone())
            .expect("normalizer");
        let norm_m2 =
            Tensor::new(vec![1, self.dims.d_obs], self.normalizer.m2.clone()).expect("normalizer");
        tensors.push(("normalizer.mean".into(), &norm_mean));
        tensors.push(("normalizer.m2".into(), &norm_m2));
        if let Some(opt) = optimizer {
            let (m, v) = opt.moments();
            for (name, t) in self.names.iter().zip(m) {
                tensors.push((format!("adam.m.{name}"), t));
            }
            for (name, t) in self.names.iter().zip(v) {
                tensors.push((format!("adam.v.{name}"), t));
            }
        }
        let mut offset = 0usize;
        let mut manifest = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            manifest.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * 8;
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dims: self.dims,
            normalizer_count: self.normalizer.count,
            optimizer: optimizer.map(|o| OptimizerHeader {
                lr: o.lr,
                step: o.steps_taken(),
            }),
            tensors: manifest,
            meta: meta.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| PolicyError::Format(e.to_string()))?;
        let mut bytes = Vec::with_capacity(8 + header.len() + offset);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for (_, t) in &tensors {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, PolicyError> {
        let bytes = fs::read(path)?;
        let fmt = |m: &str| PolicyError::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(fmt("truncated header"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(fmt(&format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let blob = &bytes[8 + hlen..];
        let mut by_name = std::collections::HashMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = blob
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| fmt(&format!("tensor {} runs past the end of the file", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| fmt(&err.to_string()))?;
            by_name.insert(e.name.clone(), t);
        }

        let mut policy = Policy::new(header.dims, &mut rand::rngs::mock::StepRng::new(0, 0));
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor, PolicyError> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| fmt(&format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(fmt(&format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        for i in 0..policy.params.len() {
            let shape = policy.params[i].shape().to_vec();
            policy.params[i] = take(&policy.names[i].clone(), &shape)?;
        }
        let d_obs = header.dims.d_obs;
        policy.normalizer = Normalizer {
            count: header.normalizer_count,
            mean: take("normalizer.mean", &[1, d_obs])?.into_data(),
            m2: take("normalizer.m2", &[1, d_obs])?.into_data(),
        };
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let mut m = Vec::with_capacity(policy.params.len());
                let mut v = Vec::with_capacity(policy.params.len());
                for (name, p) in policy.names.iter().zip(&policy.params) {
                    m.push(take(&format!("adam.m.{name}"), p.shape())?);
                    v.push(take(&format!("adam.v.{name}"), p.shape())?);
                }
                Some(Adam::from_state(o.lr, o.step, m, v))
            }
        };
        Ok(Checkpoint {
            policy,
            optimizer,
            meta: header.meta,
        })
    }

    /// Order-sensitive checksum over the named tensors.
    pub fn checksum(&self, names: &[String]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for name in names {
            if let Some(i) = self.names.iter().position(|n| n == name) {
                for x in self.params[i].data() {
                    for byte in x.to_bits().to_le_bytes() {
                        h ^= byte as u64;
                        h = h.wrapping_mul(0x100000001b3);
                    }
                }
            }
        }
        h
    }

    /// Zeroes every weight (test helper for closed-form checks).
    pub fn zero_params(&mut self) {
        for p in &mut self.params {
            p.data_mut().fill(0.0);
        }
    }

    pub fn head_param_index(&self, head: usize) -> (usize, usize) {
        let l = self.layout.heads[head];
        (l.w, l.b)
    }

    pub fn merge_param_names(&self) -> Vec<String> {
        match self.layout.merge {
            None => Vec::new(),
            Some(m) => vec![self.names[m.query].clone(), self.names[m.wk].clone()],
        }
    }
}

pub fn sample_of<'a>(reps: &'a NodeRepresentations, topology: &'a EcgTopology) -> GraphSample<'a> {
    GraphSample {
        reps,
        agent_to_cluster: &topology.agent_to_cluster,
        cluster_to_target: &topology.cluster_to_target,
    }
}

pub fn masks_match(masks: &ActionMasks, decision: &OperatorDecision) -> bool {
    masks.cluster_mask[decision.action.src_cluster] && masks.target_mask[decision.action.src_target]
}

pub struct Checkpoint {
    pub policy: Policy,
    pub optimizer: Option<Adam>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dims: PolicyDims,
    normalizer_count: f64,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}
