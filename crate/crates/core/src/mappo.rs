//! MAPPO over the four graph operators: lockstep episode collection with
//! interference, GAE, and clipped PPO updates with the reconstruction loss.

use std::fs::{self, OpenOptions};
use std::io::{self, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use hcgl_tensor::{Adam, Gradients, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csi::{CsiConfig, CsiError, CsiState};
use crate::ecg::{interference_fires, EcgError, EcgTopology};
use crate::policy::{
    action_indices, ActMode, GraphBatch, GraphSample, LossCoefs, LossReport, LossScale,
    LossTargets, NodeRepresentations, Normalizer, Policy, PolicyError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] CsiError),
    #[error(transparent)]
    Graph(#[from] EcgError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(
        "non-finite loss at update {update}, epoch {epoch}, minibatch {minibatch}: {report:?}"
    )]
    NonFiniteLoss {
        update: usize,
        epoch: usize,
        minibatch: usize,
        report: LossReport,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_chunk() -> usize {
    256
}

fn all_heads() -> [bool; 4] {
    [true; 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub ppo_epochs: usize,
    pub entropy_coef: f64,
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub ae_coef: f64,
    pub grad_clip_norm: f64,
    pub p_interference: f64,
    pub batch_episodes: usize,
    pub minibatches: usize,
    /// Samples per forward/backward pass inside a minibatch; only bounds memory.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default = "all_heads")]
    pub active_heads: [bool; 4],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            ppo_epochs: 16,
            entropy_coef: 0.01,
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_coef: 0.5,
            ae_coef: 0.1,
            grad_clip_norm: 10.0,
            p_interference: 0.005,
            batch_episodes: 128,
            minibatches: 4,
            chunk_size: default_chunk(),
            active_heads: all_heads(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("lr", self.lr),
            ("clip_eps", self.clip_eps),
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("ae_coef", self.ae_coef),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.p_interference) {
            return Err(TrainError::Config(format!(
                "p_interference must lie in [0, 1], got {}",
                self.p_interference
            )));
        }
        for (name, v) in [
            ("ppo_epochs", self.ppo_epochs),
            ("batch_episodes", self.batch_episodes),
            ("minibatches", self.minibatches),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.active_heads.iter().any(|&h| h) {
            return Err(TrainError::Config(
                "at least one operator head must be active".into(),
            ));
        }
        Ok(())
    }

    pub fn coefs(&self) -> LossCoefs {
        LossCoefs {
            clip_eps: self.clip_eps,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            ae_coef: self.ae_coef,
            active_heads: self.active_heads,
        }
    }
}

/// Seed of training episode `index` under master seed `seed`.
pub fn episode_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(1_000_000).wrapping_add(index)
}

/// Evaluation episodes draw from a stream disjoint from training.
pub fn eval_episode_seed(seed: u64, index: u64) -> u64 {
    episode_seed(seed, index) ^ (1 << 63)
}

#[derive(Clone, Debug)]
pub struct RolloutStep {
    /// Agent rows normalized with the statistics in force during collection.
    pub reps: NodeRepresentations,
    pub agent_to_cluster: Vec<usize>,
    pub cluster_to_target: Vec<usize>,
    pub action: [usize; 4],
    pub log_probs: [f64; 4],
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    pub interfered: bool,
}

impl RolloutStep {
    pub fn sample(&self) -> GraphSample<'_> {
        GraphSample {
            reps: &self.reps,
            agent_to_cluster: &self.agent_to_cluster,
            cluster_to_target: &self.cluster_to_target,
        }
    }
}

/// Steps of every episode, episode after episode.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub steps: Vec<RolloutStep>,
    pub episode_returns: Vec<f64>,
    pub successes: Vec<bool>,
    /// Statistics of the raw observations seen, merged into the policy after the update.
    pub observed: Option<Normalizer>,
}

impl RolloutBatch {
    pub fn success_rate(&self) -> f64 {
        if self.successes.is_empty() {
            return 0.0;
        }
        self.successes.iter().filter(|&&s| s).count() as f64 / self.successes.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            return 0.0;
        }
        self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
    }

    pub fn interference_count(&self) -> usize {
        self.steps.iter().filter(|s| s.interfered).count()
    }
}

pub struct EpisodeRunner<'a> {
    pub policy: &'a Policy,
    pub env: &'a CsiConfig,
    pub initial: &'a EcgTopology,
    pub mode: ActMode,
    pub p_interference: f64,
    /// Keep per-step records; evaluation only needs outcomes.
    pub record: bool,
}

struct Live {
    rng: ChaCha8Rng,
    env: CsiState,
    topo: EcgTopology,
    steps: Vec<RolloutStep>,
    ret: f64,
    success: bool,
    done: bool,
}

impl EpisodeRunner<'_> {
    /// Runs one episode per seed in lockstep, batching the network over
    /// live episodes. Results are in seed order.
    pub fn run(&self, seeds: &[u64]) -> Result<RolloutBatch, TrainError> {
        let mut live: Vec<Live> = seeds
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let env = CsiState::reset(self.env, &mut rng);
                Live {
                    rng,
                    env,
                    topo: self.initial.clone(),
                    steps: Vec::new(),
                    ret: 0.0,
                    success: false,
                    done: false,
                }
            })
            .collect();
        let mut observed = Normalizer::new(self.env.observation_len());
        loop {
            let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done).collect();
            if active.is_empty() {
                break;
            }
            let mut reps = Vec::with_capacity(active.len());
            for &i in &active {
                let mut r = NodeRepresentations::build(&live[i].env, &live[i].topo, self.env);
                if self.record {
                    observed.observe_rows(r.agent_reps.data());
                }
                self.policy
                    .normalizer
                    .normalize_rows(r.agent_reps.data_mut());
                reps.push(r);
            }
            let mut flagged = Vec::with_capacity(active.len());
            let mut rngs = Vec::with_capacity(active.len());
            for &i in &active {
                let l = &mut live[i];
                flagged.push(interference_fires(&mut l.rng, self.p_interference));
                rngs.push(l.rng.clone());
            }
            let decisions = {
                let samples: Vec<GraphSample<'_>> = active
                    .iter()
                    .zip(&reps)
                    .map(|(&i, r)| GraphSample {
                        reps: r,
                        agent_to_cluster: &live[i].topo.agent_to_cluster,
                        cluster_to_target: &live[i].topo.cluster_to_target,
                    })
                    .collect();
                let batch = GraphBatch::new(&self.policy.dims, &samples)?;
                self.policy.act_batch(&batch, &mut rngs, self.mode)?
            };
            for (((&i, r), (d, rng)), flag) in active
                .iter()
                .zip(reps)
                .zip(decisions.into_iter().zip(rngs))
                .zip(flagged)
            {
                let l = &mut live[i];
                l.rng = rng;
                let (action, log_probs) = if flag {
                    (l.topo.random_action(&mut l.rng), [0.0; 4])
                } else {
                    (d.action, d.log_probs)
                };
                let before_a = l.topo.agent_to_cluster.clone();
                let before_c = l.topo.cluster_to_target.clone();
                l.topo.apply_in_place(&action)?;
                let agent_actions = l.topo.resolve_agent_actions(&l.env, self.env)?;
                let out = l.env.step(&agent_actions, self.env)?;
                l.ret += out.reward;
                if out.done {
                    l.done = true;
                    l.success = out.reward > 0.0;
                }
                if self.record {
                    l.steps.push(RolloutStep {
                        reps: r,
                        agent_to_cluster: before_a,
                        cluster_to_target: before_c,
                        action: action_indices(&action),
                        log_probs,
                        value: d.value,
                        reward: out.reward,
                        done: out.done,
                        interfered: flag,
                    });
                }
            }
        }
        let mut batch = RolloutBatch {
            observed: self.record.then_some(observed),
            ..RolloutBatch::default()
        };
        for l in live {
            batch.steps.extend(l.steps);
            batch.episode_returns.push(l.ret);
            batch.successes.push(l.success);
        }
        Ok(batch)
    }
}

/// Collects `config.batch_episodes` training episodes starting at global
/// episode index `first_episode`.
pub fn collect(
    policy: &Policy,
    env: &CsiConfig,
    initial: &EcgTopology,
    config: &TrainConfig,
    seed: u64,
    first_episode: u64,
) -> Result<RolloutBatch, TrainError> {
    let seeds: Vec<u64> = (0..config.batch_episodes as u64)
        .map(|e| episode_seed(seed, first_episode + e))
        .collect();
    EpisodeRunner {
        policy,
        env,
        initial,
        mode: ActMode::Sample,
        p_interference: config.p_interference,
        record: true,
    }
    .run(&seeds)
}

/// Greedy, interference-free success rate over `episodes` evaluation episodes.
pub fn evaluate(
    policy: &Policy,
    env: &CsiConfig,
    initial: &EcgTopology,
    seed: u64,
    episodes: usize,
) -> Result<f64, TrainError> {
    let seeds: Vec<u64> = (0..episodes as u64)
        .map(|e| eval_episode_seed(seed, e))
        .collect();
    let batch = EpisodeRunner {
        policy,
        env,
        initial,
        mode: ActMode::Argmax,
        p_interference: 0.0,
        record: false,
    }
    .run(&seeds)?;
    Ok(batch.success_rate())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gae {
    pub raw_advantages: Vec<f64>,
    /// Zero mean, unit variance over the batch.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// GAE(γ, λ) over episode-major steps; a `done` step bootstraps from 0.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Gae {
    let n = rewards.len();
    let mut raw = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        raw[t] = delta + gamma * lambda * live * next_adv;
        next_adv = raw[t];
        next_value = values[t];
    }
    let returns = raw.iter().zip(values).map(|(a, v)| a + v).collect();
    let mean = raw.iter().sum::<f64>() / n.max(1) as f64;
    let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n.max(1) as f64;
    let std = var.sqrt();
    let advantages = raw
        .iter()
        .map(|a| if std > 1e-12 { (a - mean) / std } else { 0.0 })
        .collect();
    Gae {
        raw_advantages: raw,
        advantages,
        returns,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub loss: LossReport,
    pub grad_norm: f64,
    /// Largest |ρ − 1| over the first minibatch, before any step.
    pub initial_ratio_dev: f64,
}

/// Summed log-probability of the active heads for each step under `policy`.
pub fn log_probs_of(
    policy: &Policy,
    steps: &[&RolloutStep],
    active: [bool; 4],
) -> Result<Vec<f64>, TrainError> {
    let samples: Vec<GraphSample<'_>> = steps.iter().map(|s| s.sample()).collect();
    let batch = GraphBatch::new(&policy.dims, &samples)?;
    let mut tape = Tape::new(&policy.params);
    let enc = policy.encode_on(&mut tape, &batch)?;
    let actions: Vec<[usize; 4]> = steps.iter().map(|s| s.action).collect();
    let heads = policy.heads_on(&mut tape, enc.z, &batch, &actions)?;
    Ok((0..steps.len())
        .map(|r| {
            (0..4)
                .filter(|&i| active[i])
                .map(|i| tape.value(heads[i]).row(r)[actions[r][i]])
                .sum()
        })
        .collect())
}

fn old_log_prob(step: &RolloutStep, active: [bool; 4]) -> f64 {
    (0..4)
        .filter(|&i| active[i])
        .map(|i| step.log_probs[i])
        .sum()
}

/// `ppo_epochs` passes of clipped PPO over shuffled minibatches of `batch`.
/// The rollout's observation statistics are merged into the policy's
/// normalizer afterwards.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut Policy,
    optimizer: &mut Adam,
    batch: &RolloutBatch,
    config: &TrainConfig,
    rng: &mut R,
    update: usize,
) -> Result<UpdateReport, TrainError> {
    let n = batch.steps.len();
    if n == 0 {
        return Err(TrainError::Config("empty rollout batch".into()));
    }
    let rewards: Vec<f64> = batch.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = batch.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = batch.steps.iter().map(|s| s.done).collect();
    let gae = compute_gae(&rewards, &values, &dones, config.gamma, config.gae_lambda);
    let coefs = config.coefs();

    let mut order: Vec<usize> = (0..n).collect();
    let mb_count = config.minibatches.min(n);
    let mut report = UpdateReport::default();
    let mut steps_taken = 0usize;
    for epoch in 0..config.ppo_epochs {
        order.shuffle(rng);
        for mb in 0..mb_count {
            let lo = mb * n / mb_count;
            let hi = (mb + 1) * n / mb_count;
            let idx = &order[lo..hi];
            let scale = LossScale {
                policy_count: idx.iter().filter(|&&i| !batch.steps[i].interfered).count() as f64,
                sample_count: idx.len() as f64,
            };
            let mut grads = Gradients {
                params: vec![None; policy.params.len()],
            };
            let mut mb_report = LossReport::default();
            for chunk in idx.chunks(config.chunk_size) {
                let samples: Vec<GraphSample<'_>> =
                    chunk.iter().map(|&i| batch.steps[i].sample()).collect();
                let gb = GraphBatch::new(&policy.dims, &samples)?;
                let targets = LossTargets {
                    actions: chunk.iter().map(|&i| batch.steps[i].action).collect(),
                    old_log_prob: chunk
                        .iter()
                        .map(|&i| old_log_prob(&batch.steps[i], config.active_heads))
                        .collect(),
                    old_value: chunk.iter().map(|&i| values[i]).collect(),
                    advantage: chunk.iter().map(|&i| gae.advantages[i]).collect(),
                    returns: chunk.iter().map(|&i| gae.returns[i]).collect(),
                    learned: chunk.iter().map(|&i| !batch.steps[i].interfered).collect(),
                };
                if epoch == 0 && mb == 0 {
                    let steps: Vec<&RolloutStep> = chunk.iter().map(|&i| &batch.steps[i]).collect();
                    let new = log_probs_of(policy, &steps, config.active_heads)?;
                    for (j, lp) in new.iter().enumerate() {
                        if targets.learned[j] {
                            let dev = ((lp - targets.old_log_prob[j]).exp() - 1.0).abs();
                            report.initial_ratio_dev = report.initial_ratio_dev.max(dev);
                        }
                    }
                }
                let mut tape = Tape::new(&policy.params);
                let (loss, r) = match policy.loss_on(&mut tape, &gb, &targets, &coefs, scale) {
                    Ok(x) => x,
                    Err(PolicyError::Layer {
                        source: hcgl_tensor::TensorError::NonFinite { .. },
                        ..
                    }) => {
                        return Err(TrainError::NonFiniteLoss {
                            update,
                            epoch,
                            minibatch: mb,
                            report: mb_report,
                        })
                    }
                    Err(e) => return Err(e.into()),
                };
                mb_report.add_scaled(&r, 1.0);
                let g = tape.backward(loss).map_err(|source| PolicyError::Layer {
                    layer: "backward",
                    source,
                })?;
                grads.accumulate(&g, 1.0);
            }
            if !mb_report.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    update,
                    epoch,
                    minibatch: mb,
                    report: mb_report,
                });
            }
            let norm = grads.clip_global_norm(config.grad_clip_norm);
            optimizer.step(&mut policy.params, &grads);
            report.loss.add_scaled(&mb_report, 1.0);
            report.grad_norm += norm;
            steps_taken += 1;
        }
    }
    let w = 1.0 / steps_taken as f64;
    let mut mean = LossReport::default();
    mean.add_scaled(&report.loss, w);
    report.loss = mean;
    report.grad_norm *= w;
    if let Some(obs) = &batch.observed {
        policy.normalizer.merge(obs);
    }
    Ok(report)
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: usize,
    pub episodes: u64,
    pub success_rate: f64,
    pub mean_return: f64,
    #[serde(rename = "L_policy")]
    pub l_policy: f64,
    #[serde(rename = "L_value")]
    pub l_value: f64,
    #[serde(rename = "L_ae")]
    pub l_ae: f64,
    pub entropy: f64,
    pub interference_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_success: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub env: CsiConfig,
    pub topology: EcgTopology,
    pub train: TrainConfig,
    pub seed: u64,
    /// Stop once this many updates have completed in total.
    pub updates: usize,
    /// Evaluate every this many updates; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Periodic checkpoint interval; 0 keeps only `latest` and `best`.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

/// Everything that must survive a restart.
pub struct TrainState {
    pub policy: Policy,
    pub optimizer: Adam,
    pub update: usize,
    pub episodes: u64,
    pub best_eval: Option<f64>,
}

impl TrainState {
    pub fn fresh(policy: Policy, lr: f64) -> Self {
        let optimizer = Adam::new(&policy.params, lr);
        Self {
            policy,
            optimizer,
            update: 0,
            episodes: 0,
            best_eval: None,
        }
    }

    pub fn meta(&self, setup: &TrainSetup) -> serde_json::Value {
        serde_json::json!({
            "update": self.update,
            "episodes": self.episodes,
            "best_eval": self.best_eval,
            "seed": setup.seed,
            "topology": setup.topology.to_json(),
            "env": setup.env,
            "train": setup.train,
        })
    }

    pub fn save(&self, setup: &TrainSetup, path: &Path) -> Result<(), TrainError> {
        self.policy
            .save(path, Some(&self.optimizer), &self.meta(setup))?;
        Ok(())
    }

    /// Restores policy, optimizer and counters from a training checkpoint.
    pub fn resume(path: &Path) -> Result<(Self, serde_json::Value), TrainError> {
        let ck = Policy::load(path)?;
        let meta = ck.meta;
        let field = |k: &str| meta.get(k).and_then(serde_json::Value::as_u64);
        let optimizer = ck.optimizer.ok_or_else(|| {
            TrainError::Config(format!("{} has no optimizer state", path.display()))
        })?;
        let state = Self {
            policy: ck.policy,
            optimizer,
            update: field("update").unwrap_or(0) as usize,
            episodes: field("episodes").unwrap_or(0),
            best_eval: meta.get("best_eval").and_then(serde_json::Value::as_f64),
        };
        Ok((state, meta))
    }
}

fn shuffle_rng(seed: u64, update: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 32) | update as u64);
    rng
}

/// Alternates collection and PPO updates until `setup.updates` is reached.
/// Appends one JSON line per update to `metrics.jsonl` in the output
/// directory and calls `on_update` with the same record.
pub fn train(
    setup: &TrainSetup,
    state: &mut TrainState,
    mut on_update: impl FnMut(&UpdateMetrics),
) -> Result<(), TrainError> {
    setup.train.validate()?;
    let mut metrics_out = match &setup.out_dir {
        Some(dir) => {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck).map_err(io_err(&ck))?;
            let path = dir.join("metrics.jsonl");
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            Some((path, BufWriter::new(f)))
        }
        None => None,
    };
    state.optimizer.lr = setup.train.lr;
    while state.update < setup.updates {
        let batch = collect(
            &state.policy,
            &setup.env,
            &setup.topology,
            &setup.train,
            setup.seed,
            state.episodes,
        )?;
        let mut rng = shuffle_rng(setup.seed, state.update);
        let report = ppo_update(
            &mut state.policy,
            &mut state.optimizer,
            &batch,
            &setup.train,
            &mut rng,
            state.update,
        )?;
        state.update += 1;
        state.episodes += setup.train.batch_episodes as u64;

        let eval_success = if setup.eval_every > 0 && state.update.is_multiple_of(setup.eval_every)
        {
            Some(evaluate(
                &state.policy,
                &setup.env,
                &setup.topology,
                setup.seed,
                setup.eval_episodes,
            )?)
        } else {
            None
        };
        let metrics = UpdateMetrics {
            update: state.update,
            episodes: state.episodes,
            success_rate: batch.success_rate(),
            mean_return: batch.mean_return(),
            l_policy: report.loss.policy,
            l_value: report.loss.value,
            l_ae: report.loss.ae,
            entropy: report.loss.entropy,
            interference_count: batch.interference_count(),
            eval_success,
        };
        let improved = match (eval_success, state.best_eval) {
            (Some(e), Some(b)) => e > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_eval = eval_success;
        }
        if let Some((path, w)) = &mut metrics_out {
            let line = serde_json::to_string(&metrics).expect("metrics serialize");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(io_err(path))?;
        }
        if let Some(dir) = &setup.out_dir {
            let ck = dir.join("checkpoints");
            if improved {
                state.save(setup, &ck.join("best.bin"))?;
            }
            if setup.checkpoint_every > 0 && state.update.is_multiple_of(setup.checkpoint_every) {
                state.save(setup, &ck.join(format!("update_{:06}.bin", state.update)))?;
            }
            state.save(setup, &ck.join("latest.bin"))?;
        }
        on_update(&metrics);
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<UpdateMetrics>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Two-armed contextual bandit on the operator-1 head: two nonempty
/// clusters, every agent row carries the context sign, and reward 1 means
/// operator 1 picked the cluster named by the context.
pub mod bandit {
    use super::*;
    use crate::ecg::{TargetKind, TargetNode};
    use crate::policy::PolicyDims;

    pub struct Bandit {
        pub topology: EcgTopology,
        pub contexts: [NodeRepresentations; 2],
    }

    impl Bandit {
        pub fn new() -> Self {
            let targets = (0..2)
                .map(|id| TargetNode {
                    id,
                    kind: TargetKind::Primitive(id),
                })
                .collect();
            let topology =
                EcgTopology::new(2, targets, vec![0, 1], vec![0, 1]).expect("bandit topology");
            let ctx = |sign: f64| NodeRepresentations {
                agent_reps: Tensor::from_fn(2, 3, |_, c| if c == 0 { sign } else { 0.0 }),
                target_reps: Tensor::from_fn(2, 8, |r, c| if r == c { 1.0 } else { 0.0 }),
            };
            Self {
                topology,
                contexts: [ctx(-1.0), ctx(1.0)],
            }
        }

        pub fn dims(&self, d: usize) -> PolicyDims {
            PolicyDims::new(2, 3, 2, 2, d)
        }

        /// One-step episodes with uniformly drawn contexts.
        pub fn collect<R: Rng>(
            &self,
            policy: &Policy,
            episodes: usize,
            rng: &mut R,
        ) -> Result<RolloutBatch, TrainError> {
            let ctxs: Vec<usize> = (0..episodes).map(|_| rng.gen_range(0..2)).collect();
            let samples: Vec<GraphSample<'_>> = ctxs
                .iter()
                .map(|&c| GraphSample {
                    reps: &self.contexts[c],
                    agent_to_cluster: &self.topology.agent_to_cluster,
                    cluster_to_target: &self.topology.cluster_to_target,
                })
                .collect();
            let batch = GraphBatch::new(&policy.dims, &samples)?;
            let mut rngs: Vec<ChaCha8Rng> = (0..episodes)
                .map(|_| ChaCha8Rng::seed_from_u64(rng.gen()))
                .collect();
            let decisions = policy.act_batch(&batch, &mut rngs, ActMode::Sample)?;
            let mut out = RolloutBatch::default();
            for (c, d) in ctxs.into_iter().zip(decisions) {
                let reward = if d.action.src_cluster == c { 1.0 } else { 0.0 };
                out.steps.push(RolloutStep {
                    reps: self.contexts[c].clone(),
                    agent_to_cluster: self.topology.agent_to_cluster.clone(),
                    cluster_to_target: self.topology.cluster_to_target.clone(),
                    action: action_indices(&d.action),
                    log_probs: d.log_probs,
                    value: d.value,
                    reward,
                    done: true,
                    interfered: false,
                });
                out.episode_returns.push(reward);
                out.successes.push(reward > 0.0);
            }
            Ok(out)
        }

        /// Fraction of the two contexts where the greedy op1 choice is correct.
        pub fn greedy_accuracy(&self, policy: &Policy) -> Result<f64, TrainError> {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut correct = 0;
            for (c, reps) in self.contexts.iter().enumerate() {
                let d = policy.act(reps, &self.topology, &mut rng, ActMode::Argmax)?;
                if d.action.src_cluster == c {
                    correct += 1;
                }
            }
            Ok(correct as f64 / 2.0)
        }
    }

    impl Default for Bandit {
        fn default() -> Self {
            Self::new()
        }
    }

    /// Greedy accuracy after each of `updates` PPO updates.
    pub fn run(seed: u64, updates: usize, config: &TrainConfig) -> Result<Vec<f64>, TrainError> {
        let bandit = Bandit::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = Policy::new(bandit.dims(crate::policy::DEFAULT_HIDDEN), &mut rng);
        let mut adam = Adam::new(&policy.params, config.lr);
        let mut acc = Vec::with_capacity(updates);
        for u in 0..updates {
            let batch = bandit.collect(&policy, config.batch_episodes, &mut rng)?;
            ppo_update(&mut policy, &mut adam, &batch, config, &mut rng, u)?;
            acc.push(bandit.greedy_accuracy(&policy)?);
        }
        Ok(acc)
    }

    pub fn config() -> TrainConfig {
        TrainConfig {
            active_heads: [true, false, false, false],
            p_interference: 0.0,
            ..TrainConfig::default()
        }
    }
}
