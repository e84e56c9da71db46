//! Run configuration and the training, evaluation, transfer, ablation,
//! oracle and topology-export commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hcgl_tensor::Adam;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::coop::CoopCommand;
use crate::csi::{
    self, parse_task_name, CsiConfig, CsiError, CsiState, InvaderStatus, PrimitiveSet,
};
use crate::ecg::{
    build_targets, EcgError, EcgTopology, OperatorAction, TargetKind, DEFAULT_INIT_CANDIDATES,
};
use crate::mappo::{
    self, eval_episode_seed, TrainConfig, TrainError, TrainSetup, TrainState, UpdateMetrics,
};
use crate::policy::{ActMode, Policy, PolicyDims, PolicyError, DEFAULT_HIDDEN};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at {path}: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] CsiError),
    #[error(transparent)]
    Graph(#[from] EcgError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config { .. }
                | ExperimentError::Train(TrainError::Config(_))
                | ExperimentError::Env(CsiError::Config(_) | CsiError::TaskName { .. })
        )
    }
}

fn config_err(path: &str, msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub n_clusters: usize,
    pub primitive_set: PrimitiveSet,
    /// Adds one Intercept per invader and one Defend per base to the target layer.
    pub coop: bool,
    /// Overrides of any environment field except the three fixed by `task`.
    pub env: Map<String, Value>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub eval_episodes: usize,
    pub updates: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub init_candidates: usize,
    pub hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "CSI-27/3/9".into(),
            n_clusters: 14,
            primitive_set: PrimitiveSet::Six,
            coop: true,
            env: Map::new(),
            train: TrainConfig::default(),
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            eval_episodes: 100,
            updates: 2000,
            eval_every: 10,
            checkpoint_every: 100,
            init_candidates: DEFAULT_INIT_CANDIDATES,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl RunConfig {
    /// The small task used for workstation-scale runs: CSI-12/2/3 with two
    /// bases and six clusters.
    pub fn desk_scale() -> Self {
        let mut env = Map::new();
        env.insert("n_bases".into(), Value::from(2));
        Self {
            task: "CSI-12/2/3".into(),
            n_clusters: 6,
            env,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let v: Value =
            serde_json::from_str(text).map_err(|e| config_err("<root>", e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self, ExperimentError> {
        let cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| config_err("<root>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(&path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Applies dotted `key=value` overrides; values parse as JSON, falling
    /// back to a plain string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self, ExperimentError> {
        let mut v = self.to_value();
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| config_err(s, "override must look like key=value"))?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let parts: Vec<&str> = key.split('.').collect();
            let mut node = &mut v;
            for (i, p) in parts.iter().enumerate() {
                let obj = node.as_object_mut().ok_or_else(|| {
                    config_err(key, format!("{} is not an object", parts[..i].join(".")))
                })?;
                if i + 1 == parts.len() {
                    obj.insert(p.to_string(), value.clone());
                    break;
                }
                node = obj
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()));
            }
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        parse_task_name(&self.task).map_err(|e| config_err("task", e.to_string()))?;
        if self.n_clusters == 0 {
            return Err(config_err("n_clusters", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "must not be empty"));
        }
        if self.hidden == 0 {
            return Err(config_err("hidden", "must be at least 1"));
        }
        if self.init_candidates == 0 {
            return Err(config_err("init_candidates", "must be at least 1"));
        }
        self.train
            .validate()
            .map_err(|e| config_err("train", e.to_string()))?;
        self.env_config()?;
        if self.targets()?.is_empty() {
            return Err(config_err(
                "primitive_set",
                "no targets: enable coop or choose a primitive set",
            ));
        }
        Ok(())
    }

    pub fn env_config(&self) -> Result<CsiConfig, ExperimentError> {
        let task = parse_task_name(&self.task).map_err(|e| config_err("task", e.to_string()))?;
        let mut base = serde_json::to_value(CsiConfig::for_task(task)).expect("env serializes");
        let obj = base.as_object_mut().expect("env is an object");
        for (k, v) in &self.env {
            if matches!(k.as_str(), "n_agents" | "k_threshold" | "m_invaders") {
                return Err(config_err(&format!("env.{k}"), "set through task"));
            }
            if !obj.contains_key(k) {
                return Err(config_err(&format!("env.{k}"), "unknown environment field"));
            }
            obj.insert(k.clone(), v.clone());
        }
        // Without primitive targets the agents still move on the six axes;
        // the coop controllers translate into that space.
        let movement = match self.primitive_set {
            PrimitiveSet::None => PrimitiveSet::Six,
            p => p,
        };
        obj.insert(
            "primitive_set".into(),
            serde_json::to_value(movement).expect("enum"),
        );
        let cfg: CsiConfig =
            serde_json::from_value(base).map_err(|e| config_err("env", e.to_string()))?;
        cfg.validate()
            .map_err(|e| config_err("env", e.to_string()))?;
        Ok(cfg)
    }

    pub fn targets(&self) -> Result<Vec<crate::ecg::TargetNode>, ExperimentError> {
        let task = parse_task_name(&self.task).map_err(|e| config_err("task", e.to_string()))?;
        let n_bases = self
            .env
            .get("n_bases")
            .and_then(Value::as_u64)
            .map_or(CsiConfig::for_task(task).n_bases, |v| v as usize);
        Ok(build_targets(
            self.primitive_set,
            task.m_invaders,
            n_bases,
            self.coop,
        ))
    }

    /// The frozen episode-start topology for `seed`.
    pub fn initial_topology(&self, seed: u64) -> Result<EcgTopology, ExperimentError> {
        let env = self.env_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(EcgTopology::select_initial(
            &mut rng,
            self.init_candidates,
            env.n_agents,
            self.n_clusters,
            &self.targets()?,
        )?)
    }

    pub fn fresh_policy(
        &self,
        seed: u64,
        topology: &EcgTopology,
    ) -> Result<Policy, ExperimentError> {
        let env = self.env_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(Policy::new(
            PolicyDims::for_task(&env, topology, self.hidden),
            &mut rng,
        ))
    }

    pub fn train_setup(
        &self,
        seed: u64,
        topology: EcgTopology,
        out_dir: Option<PathBuf>,
    ) -> Result<TrainSetup, ExperimentError> {
        Ok(TrainSetup {
            env: self.env_config()?,
            topology,
            train: self.train.clone(),
            seed,
            updates: self.updates,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            checkpoint_every: self.checkpoint_every,
            out_dir,
        })
    }
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub updates: usize,
    pub best_eval: Option<f64>,
    pub last: Option<UpdateMetrics>,
}

/// Trains one policy per seed under `out_dir/seed_<s>/`. With `resume`,
/// a seed directory holding `checkpoints/latest.bin` continues from it.
pub fn cmd_train(
    config: &RunConfig,
    resume: Option<&Path>,
    mut on_update: impl FnMut(u64, &UpdateMetrics),
) -> Result<Vec<TrainSummary>, ExperimentError> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let dir = seed_dir(&config.out_dir, seed);
        let (topology, mut state) = match resume {
            Some(path) => {
                let (state, meta) = TrainState::resume(path)?;
                let topo = meta.get("topology").ok_or_else(|| {
                    ExperimentError::Incompatible("checkpoint has no topology".into())
                })?;
                (EcgTopology::from_json(topo)?, state)
            }
            None => {
                let topology = config.initial_topology(seed)?;
                let policy = config.fresh_policy(seed, &topology)?;
                (topology, TrainState::fresh(policy, config.train.lr))
            }
        };
        if resume.is_none() {
            // a fresh run starts a fresh metrics stream
            let _ = fs::remove_file(dir.join("metrics.jsonl"));
        }
        let setup = config.train_setup(seed, topology, Some(dir.clone()))?;
        write_run_files(config, &setup, &dir)?;
        let mut last = None;
        mappo::train(&setup, &mut state, |m| {
            on_update(seed, m);
            last = Some(m.clone());
        })?;
        out.push(TrainSummary {
            seed,
            updates: state.update,
            best_eval: state.best_eval,
            last,
        });
    }
    Ok(out)
}

fn write_run_files(
    config: &RunConfig,
    setup: &TrainSetup,
    dir: &Path,
) -> Result<(), ExperimentError> {
    let resolved = serde_json::json!({
        "run": config.to_value(),
        "env": setup.env,
    });
    write_file(
        &dir.join("config.json"),
        serde_json::to_string_pretty(&resolved)
            .expect("json")
            .as_bytes(),
    )?;
    let manifest = serde_json::json!({
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": setup.seed,
        "task": config.task,
        "checkpoint_format": crate::policy::CHECKPOINT_FORMAT_VERSION,
    });
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .expect("json")
            .as_bytes(),
    )?;
    write_file(
        &dir.join("topology_init.json"),
        serde_json::to_string_pretty(&setup.topology.to_json())
            .expect("json")
            .as_bytes(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
}

impl EvalReport {
    pub fn from_rates(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n.max(1.0);
        let std = if per_seed.len() > 1 {
            (per_seed
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / (n - 1.0))
                .sqrt()
        } else {
            0.0
        };
        Self {
            per_seed,
            mean,
            std,
        }
    }
}

fn checkpoint_topology(meta: &Value) -> Result<EcgTopology, ExperimentError> {
    let t = meta
        .get("topology")
        .ok_or_else(|| ExperimentError::Incompatible("checkpoint has no topology".into()))?;
    Ok(EcgTopology::from_json(t)?)
}

fn check_compatible(
    policy: &Policy,
    env: &CsiConfig,
    topology: &EcgTopology,
) -> Result<(), ExperimentError> {
    let want = PolicyDims::for_task(env, topology, policy.dims.d);
    if topology.env_agent_count() != env.n_agents {
        return Err(ExperimentError::Incompatible(format!(
            "checkpoint topology drives {} agents, task {} has {}",
            topology.env_agent_count(),
            env.task(),
            env.n_agents
        )));
    }
    if want != policy.dims {
        return Err(ExperimentError::Incompatible(format!(
            "network dims {:?} do not fit task {} (needs {:?})",
            policy.dims,
            env.task(),
            want
        )));
    }
    Ok(())
}

/// Greedy evaluation of a checkpoint on `config`'s task, one success rate per seed.
pub fn cmd_eval(checkpoint: &Path, config: &RunConfig) -> Result<EvalReport, ExperimentError> {
    config.validate()?;
    let ck = Policy::load(checkpoint)?;
    let topology = checkpoint_topology(&ck.meta)?;
    let env = config.env_config()?;
    check_compatible(&ck.policy, &env, &topology)?;
    let rates = config
        .seeds
        .iter()
        .map(|&s| mappo::evaluate(&ck.policy, &env, &topology, s, config.eval_episodes))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport::from_rates(rates))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub source_task: String,
    pub target_task: String,
    pub fan_out: usize,
    pub zero_shot: EvalReport,
    pub retrain: Option<TrainSummary>,
}

pub const SURGERY_SEEDS: u64 = 3;

/// Extends a trained policy to a task `fan_out` times larger.
///
/// Zero-shot success is averaged over [`SURGERY_SEEDS`] random merge
/// initializations; the first one then retrains for `config.updates`
/// updates (skipped when 0).
pub fn cmd_transfer(
    checkpoint: &Path,
    config: &RunConfig,
    fan_out: usize,
    mut on_update: impl FnMut(&UpdateMetrics),
) -> Result<TransferReport, ExperimentError> {
    config.validate()?;
    let ck = Policy::load(checkpoint)?;
    let source_env: CsiConfig = serde_json::from_value(
        ck.meta
            .get("env")
            .cloned()
            .ok_or_else(|| ExperimentError::Incompatible("checkpoint has no env".into()))?,
    )
    .map_err(|e| ExperimentError::Incompatible(e.to_string()))?;
    let target_env = config.env_config()?;
    let (s, t) = (source_env.task(), target_env.task());
    if fan_out < 1
        || t.n_agents != s.n_agents * fan_out
        || t.k_threshold != s.k_threshold * fan_out
        || t.m_invaders != s.m_invaders
    {
        return Err(config_err(
            "task",
            format!(
                "{t} is not {s} scaled by {fan_out} (agents and threshold scale, invaders stay)"
            ),
        ));
    }
    let source_topology = checkpoint_topology(&ck.meta)?;
    let (topology, seeds_policies) = if fan_out == 1 {
        // nothing to merge: evaluate the source network as is
        (source_topology, vec![ck.policy.clone()])
    } else {
        let topology = source_topology.extend(fan_out)?;
        let mut v = Vec::new();
        for s in 0..SURGERY_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rng.set_stream(3);
            v.push(ck.policy.surgery_for_extension(fan_out, &mut rng)?);
        }
        (topology, v)
    };
    let mut rates = Vec::new();
    for p in &seeds_policies {
        check_compatible(p, &target_env, &topology)?;
        let per = config
            .seeds
            .iter()
            .map(|&s| mappo::evaluate(p, &target_env, &topology, s, config.eval_episodes))
            .collect::<Result<Vec<_>, _>>()?;
        rates.push(per.iter().sum::<f64>() / per.len() as f64);
    }
    let zero_shot = EvalReport::from_rates(rates);

    let retrain = if config.updates > 0 {
        let policy = seeds_policies.into_iter().next().expect("one surgery");
        let mut optimizer = match ck.optimizer {
            Some(o) => {
                let mut o = Adam::from_state(
                    config.train.lr,
                    o.steps_taken(),
                    o.moments().0.to_vec(),
                    o.moments().1.to_vec(),
                );
                o.extend_for(&policy.params[o.moments().0.len()..]);
                o
            }
            None => Adam::new(&policy.params, config.train.lr),
        };
        optimizer.lr = config.train.lr;
        let mut state = TrainState {
            policy,
            optimizer,
            update: 0,
            episodes: 0,
            best_eval: None,
        };
        let seed = config.seeds[0];
        let dir = config.out_dir.join("transfer");
        let _ = fs::remove_file(dir.join("metrics.jsonl"));
        let mut run = config.clone();
        run.n_clusters = topology.n_clusters;
        let setup = run.train_setup(seed, topology, Some(dir.clone()))?;
        write_run_files(&run, &setup, &dir)?;
        let mut last = None;
        mappo::train(&setup, &mut state, |m| {
            on_update(m);
            last = Some(m.clone());
        })?;
        Some(TrainSummary {
            seed,
            updates: state.update,
            best_eval: state.best_eval,
            last,
        })
    } else {
        None
    };
    Ok(TransferReport {
        source_task: s.to_string(),
        target_task: t.to_string(),
        fan_out,
        zero_shot,
        retrain,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sweep {
    Clusters(Vec<usize>),
    Primitives(Vec<PrimitiveSet>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub success: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,seed,success\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.setting, r.seed, r.success);
    }
    s
}

/// Trains every setting of the sweep on every seed; success is the best
/// evaluation reached (the final evaluation when `eval_every` is 0).
pub fn cmd_ablate(
    config: &RunConfig,
    sweep: &Sweep,
    mut on_update: impl FnMut(&str, u64, &UpdateMetrics),
) -> Result<Vec<AblationRow>, ExperimentError> {
    config.validate()?;
    let settings: Vec<(String, RunConfig)> = match sweep {
        Sweep::Clusters(ks) => ks
            .iter()
            .map(|&k| {
                let mut c = config.clone();
                c.n_clusters = k;
                (format!("clusters={k}"), c)
            })
            .collect(),
        Sweep::Primitives(ps) => ps
            .iter()
            .map(|&p| {
                let mut c = config.clone();
                c.primitive_set = p;
                (format!("primitives={p:?}"), c)
            })
            .collect(),
    };
    let mut rows = Vec::new();
    for (name, mut c) in settings {
        c.out_dir = config.out_dir.join(name.replace('=', "_"));
        c.validate()?;
        let summaries = cmd_train(&c, None, |seed, m| on_update(&name, seed, m))?;
        for s in summaries {
            let success = match s.best_eval {
                Some(b) => b,
                None => {
                    let ck =
                        Policy::load(&seed_dir(&c.out_dir, s.seed).join("checkpoints/latest.bin"))?;
                    let topo = checkpoint_topology(&ck.meta)?;
                    mappo::evaluate(&ck.policy, &c.env_config()?, &topo, s.seed, c.eval_episodes)?
                }
            };
            rows.push(AblationRow {
                setting: name.clone(),
                seed: s.seed,
                success,
            });
        }
    }
    write_file(
        &config.out_dir.join("ablation.csv"),
        ablation_csv(&rows).as_bytes(),
    )?;
    Ok(rows)
}

/// Scripted operator policy: one cluster per active invader, agents spread
/// evenly over the invaders (⌈N/m⌉ each), always moving the
/// agent closest to a short-handed invader. Idle clusters defend the base
/// most invaders are heading for.
pub fn oracle_action(topology: &EcgTopology, env: &CsiState, config: &CsiConfig) -> OperatorAction {
    let quota = config.n_agents.div_ceil(config.m_invaders.max(1));
    let intercept_of = |t: usize| match topology.targets[t].kind {
        TargetKind::Cooperative(CoopCommand::Intercept(j))
            if env.invader_status[j] == InvaderStatus::Active =>
        {
            Some(j)
        }
        _ => None,
    };
    let find_target = |kind: TargetKind| topology.targets.iter().position(|t| t.kind == kind);
    let members = topology.cluster_members();
    let mut per_target = vec![0usize; topology.n_targets()];
    for &t in &topology.cluster_to_target {
        per_target[t] += 1;
    }

    // Cluster layer: cover an uncovered active invader, else park an idle
    // nonempty cluster on Defend.
    let uncovered = (0..config.m_invaders)
        .filter(|&j| env.invader_status[j] == InvaderStatus::Active)
        .filter_map(|j| find_target(TargetKind::Cooperative(CoopCommand::Intercept(j))))
        .find(|&t| per_target[t] == 0);
    let spare = |c: usize| {
        let t = topology.cluster_to_target[c];
        intercept_of(t).is_none() || per_target[t] >= 2
    };
    let (src_target, dst_target) = if let Some(dst) = uncovered {
        // prefer clusters that are empty or off-task; the operator moves the
        // lowest cluster on the chosen source target
        (0..topology.n_clusters)
            .filter(|&c| spare(c))
            .min_by_key(|&c| {
                (
                    !members[c].is_empty(),
                    intercept_of(topology.cluster_to_target[c]).is_some(),
                    c,
                )
            })
            .map_or((0, 0), |c| (topology.cluster_to_target[c], dst))
    } else {
        let mut threat = vec![0usize; env.base_pos.len()];
        for j in 0..config.m_invaders {
            if env.invader_status[j] == InvaderStatus::Active {
                threat[env.invader_target[j]] += 1;
            }
        }
        let base = (0..threat.len())
            .rev()
            .max_by_key(|&b| threat[b])
            .unwrap_or(0);
        let defend = find_target(TargetKind::Cooperative(CoopCommand::Defend(base)));
        let idle = (0..topology.n_clusters).find(|&c| {
            let t = topology.cluster_to_target[c];
            !members[c].is_empty() && intercept_of(t).is_none() && Some(t) != defend
        });
        match (idle, defend) {
            (Some(c), Some(d)) => (topology.cluster_to_target[c], d),
            _ => (0, 0),
        }
    };

    // Agent layer: move one agent from a surplus cluster to a short-handed invader.
    let mut load = vec![0usize; config.m_invaders];
    for (c, m) in members.iter().enumerate() {
        if let Some(j) = intercept_of(topology.cluster_to_target[c]) {
            load[j] += m.len();
        }
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for (src, m) in members.iter().enumerate() {
        let Some(&agent) = m.first() else { continue };
        let surplus = match intercept_of(topology.cluster_to_target[src]) {
            None => true,
            Some(j) => load[j] > quota,
        };
        if !surplus {
            continue;
        }
        let pos = env.agent_pos[agent];
        for dst in 0..topology.n_clusters {
            if dst == src {
                continue;
            }
            let Some(j) = intercept_of(topology.cluster_to_target[dst]) else {
                continue;
            };
            if load[j] >= quota {
                continue;
            }
            let d = csi::dist(pos, env.invader_pos[j]);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, src, dst));
            }
        }
    }
    let (src_cluster, dst_cluster) = best.map_or((0, 0), |(_, s, d)| (s, d));
    OperatorAction {
        src_cluster,
        dst_cluster,
        src_target,
        dst_target,
    }
}

/// Success rate of [`oracle_action`] over `config.eval_episodes` episodes of
/// the first seed's evaluation stream.
pub fn cmd_oracle(config: &RunConfig) -> Result<f64, ExperimentError> {
    config.validate()?;
    let env_cfg = config.env_config()?;
    let seed = config.seeds[0];
    let topology = config.initial_topology(seed)?;
    let mut wins = 0usize;
    for e in 0..config.eval_episodes as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_episode_seed(seed, e));
        let mut env = CsiState::reset(&env_cfg, &mut rng);
        let mut topo = topology.clone();
        loop {
            let a = oracle_action(&topo, &env, &env_cfg);
            topo.apply_in_place(&a)?;
            let actions = topo.resolve_agent_actions(&env, &env_cfg)?;
            let out = env.step(&actions, &env_cfg)?;
            if out.done {
                if out.reward > 0.0 {
                    wins += 1;
                }
                break;
            }
        }
    }
    Ok(wins as f64 / config.eval_episodes.max(1) as f64)
}

/// Replays one greedy episode and writes DOT and JSON snapshots of the
/// graph at each requested step. Steps past the end are returned as skipped.
pub fn cmd_export_topology(
    checkpoint: &Path,
    config: &RunConfig,
    episode_seed: u64,
    steps: &[usize],
    out_dir: &Path,
) -> Result<(Vec<PathBuf>, Vec<usize>), ExperimentError> {
    let ck = Policy::load(checkpoint)?;
    let topology = checkpoint_topology(&ck.meta)?;
    let env_cfg = config.env_config()?;
    check_compatible(&ck.policy, &env_cfg, &topology)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let mut env = CsiState::reset(&env_cfg, &mut rng);
    let mut topo = topology;
    let last = steps.iter().copied().max().unwrap_or(0);
    let mut written = Vec::new();
    let mut t = 0usize;
    loop {
        if steps.contains(&t) {
            let dot = out_dir.join(format!("topology_step{t}.dot"));
            let json = out_dir.join(format!("topology_step{t}.json"));
            write_file(&dot, topo.to_dot().as_bytes())?;
            write_file(
                &json,
                serde_json::to_string_pretty(&topo.to_json())
                    .expect("json")
                    .as_bytes(),
            )?;
            written.push(dot);
            written.push(json);
        }
        if t >= last || env.done {
            break;
        }
        let reps = ck.policy.prepare(&env, &topo, &env_cfg);
        let d = ck.policy.act(&reps, &topo, &mut rng, ActMode::Argmax)?;
        topo.apply_in_place(&d.action)?;
        let actions = topo.resolve_agent_actions(&env, &env_cfg)?;
        env.step(&actions, &env_cfg)?;
        t += 1;
    }
    let skipped = steps.iter().copied().filter(|&s| s > t).collect();
    Ok((written, skipped))
}
