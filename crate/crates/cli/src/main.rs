use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hcgl::csi::PrimitiveSet;
use hcgl::experiment::{self, ExperimentError, RunConfig, Sweep};
use hcgl::mappo::UpdateMetrics;

#[derive(Parser)]
#[command(
    name = "hcgl",
    version,
    about = "Train and evaluate cooperation-graph operator policies on CSI tasks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the workstation preset (CSI-12/2/3, 2 bases, 6 clusters).
    #[arg(long, global = true)]
    desk: bool,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Task name such as CSI-27/3/9.
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.lr=3e-4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print only results, not per-update progress.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy per seed.
    Train {
        /// Continue from this checkpoint instead of a fresh policy.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy success rate of a checkpoint, mean ± std over seeds.
    Eval,
    /// Extend a checkpoint to a task `fan_out` times larger, then retrain.
    Transfer {
        #[arg(long)]
        fan_out: usize,
    },
    /// Train a sweep of cluster counts or primitive sets.
    Ablate {
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "primitives",
            required_unless_present = "primitives"
        )]
        clusters: Vec<usize>,
        /// Comma separated: none, six, fourteen.
        #[arg(long, value_delimiter = ',')]
        primitives: Vec<PrimitiveSet>,
    },
    /// Success rate of the scripted operator policy.
    Oracle,
    /// Replay one greedy episode and dump the graph at the given steps.
    ExportTopology {
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0,20,90,130")]
        steps: Vec<usize>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, ExperimentError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if common.desk => RunConfig::desk_scale(),
        None => RunConfig::default(),
    };
    if let Some(task) = &common.task {
        config.task = task.clone();
    }
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.with_overrides(&common.sets)
}

fn checkpoint(common: &Common) -> Result<&PathBuf, ExperimentError> {
    common
        .checkpoint
        .as_ref()
        .ok_or_else(|| ExperimentError::Config {
            path: "--checkpoint".into(),
            msg: "required for this command".into(),
        })
}

fn progress(quiet: bool, tag: &str, m: &UpdateMetrics) {
    if quiet {
        return;
    }
    let eval = m
        .eval_success
        .map(|e| format!(" eval {e:.3}"))
        .unwrap_or_default();
    eprintln!(
        "{tag}update {:>5}  success {:.3}  return {:+.3}  L_pi {:+.4}  L_v {:.4}  L_ae {:.4}  H {:.3}{eval}",
        m.update, m.success_rate, m.mean_return, m.l_policy, m.l_value, m.l_ae, m.entropy
    );
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let common = &cli.common;
    let config = resolve(common)?;
    if !common.quiet {
        eprintln!(
            "{}",
            serde_json::to_string_pretty(&config.to_value()).expect("config serializes")
        );
    }
    let quiet = common.quiet;
    match cli.command {
        Command::Train { resume } => {
            let summaries = experiment::cmd_train(&config, resume.as_deref(), |seed, m| {
                progress(quiet, &format!("[seed {seed}] "), m)
            })?;
            for s in summaries {
                let best = s.best_eval.map_or("-".to_string(), |b| format!("{b:.3}"));
                println!("seed {}: {} updates, best eval {best}", s.seed, s.updates);
            }
        }
        Command::Eval => {
            let report = experiment::cmd_eval(checkpoint(common)?, &config)?;
            for (seed, rate) in config.seeds.iter().zip(&report.per_seed) {
                println!("seed {seed}: {rate:.3}");
            }
            println!("success {:.2} ± {:.2}", report.mean, report.std);
        }
        Command::Transfer { fan_out } => {
            let report = experiment::cmd_transfer(checkpoint(common)?, &config, fan_out, |m| {
                progress(quiet, "", m)
            })?;
            println!(
                "{} -> {} (g={}): zero-shot {:.2} ± {:.2}",
                report.source_task,
                report.target_task,
                report.fan_out,
                report.zero_shot.mean,
                report.zero_shot.std
            );
            if let Some(best) = report.retrain.and_then(|r| r.best_eval) {
                println!("after retraining: {best:.3}");
            }
        }
        Command::Ablate {
            clusters,
            primitives,
        } => {
            let sweep = if clusters.is_empty() {
                Sweep::Primitives(primitives)
            } else {
                Sweep::Clusters(clusters)
            };
            let rows = experiment::cmd_ablate(&config, &sweep, |setting, seed, m| {
                progress(quiet, &format!("[{setting} seed {seed}] "), m)
            })?;
            print!("{}", experiment::ablation_csv(&rows));
        }
        Command::Oracle => {
            println!("{:.3}", experiment::cmd_oracle(&config)?);
        }
        Command::ExportTopology {
            episode_seed,
            steps,
        } => {
            let out = config.out_dir.clone();
            let (written, skipped) = experiment::cmd_export_topology(
                checkpoint(common)?,
                &config,
                episode_seed,
                &steps,
                &out,
            )?;
            for s in skipped {
                eprintln!("warning: episode ended before step {s}, skipped");
            }
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
