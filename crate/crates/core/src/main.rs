//! Command-line driver: data generation, the two training stages,
//! evaluation, the schedule ablation, mechanism diagnostics, and manifest
//! verification. Exit codes: 0 success, 1 runtime failure, 2 usage/config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use wamgate::backbone::{self, BackboneConfig};
use wamgate::config::RunConfig;
use wamgate::env::{self, DemoDataset};
use wamgate::gpn;
use wamgate::grpo;
use wamgate::manifest::{RunManifest, MANIFEST_NAME};
use wamgate::params::ParamSet;
use wamgate::sched::{self, ChunkTrace, GatePolicy, SchedConfig};
use wamgate::stage1;
use wamgate::stats::fmt_float;
use wamgate::Error;

#[derive(Parser)]
#[command(
    name = "wamgate",
    version,
    about = "Joint video-action flow-matching policy with a learned per-frame denoising schedule"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstration episodes for the toy environment.
    GenData(GenDataArgs),
    /// Stage 1: train the video-action backbone on demonstrations.
    TrainBackbone(TrainBackboneArgs),
    /// Stage 2: train the gating policy with the backbone frozen.
    TrainGpn(TrainGpnArgs),
    /// Evaluate a policy stack: success rate per task.
    Eval(EvalArgs),
    /// Four-arm schedule ablation over two stage-1 checkpoints.
    Ablate(AblateArgs),
    /// Bin action-to-video attention against frame noise level.
    ProbeAttention(ProbeArgs),
    /// Export learned-schedule trajectories and per-task residual summaries.
    ExportSchedules(ExportArgs),
    /// Re-hash the artifacts listed in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBackboneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the configured number of optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Train with one shared scalar timestep per sample (baseline arm).
    #[arg(long)]
    shared_times: bool,
    /// Override the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainGpnArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (default: alongside the checkpoint).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Shared,
    Handcrafted,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Gating-policy checkpoint; evaluated with deterministic gating.
    #[arg(long, conflicts_with = "policy")]
    gpn: Option<PathBuf>,
    /// Fixed baseline policy when no checkpoint is given.
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    /// Episodes per task (default: eval.episodes_per_task from the config).
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-task results CSV.
    #[arg(long, default_value = "eval_results.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Stage-1 checkpoint trained with shared scalar timesteps.
    #[arg(long)]
    backbone_shared: PathBuf,
    /// Stage-1 checkpoint trained with independent per-latent timesteps.
    #[arg(long)]
    backbone_df: PathBuf,
    #[arg(long)]
    gpn: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    gpn: PathBuf,
    /// Episodes per task used to gather traces.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Path to a run manifest (or a directory containing one).
    #[arg(long)]
    manifest: PathBuf,
}

enum CliError {
    /// Bad usage or configuration: exit 2.
    Usage(String),
    /// Legitimate runtime failure: exit 1.
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => CliError::Usage(format!("{e}")),
            other => CliError::Runtime(format!("{other}")),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainBackbone(a) => train_backbone(a),
        Command::TrainGpn(a) => train_gpn(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::ProbeAttention(a) => probe_attention(a),
        Command::ExportSchedules(a) => export_schedules(a),
        Command::Verify(a) => verify(a),
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    RunConfig::load(path).map_err(|e| CliError::Usage(format!("{e}")))
}

fn load_backbone_checked(
    path: &Path,
    cfg: &RunConfig,
) -> CliResult<(BackboneConfig, ParamSet)> {
    let (bb_cfg, ps) = backbone::load_backbone(path)?;
    if bb_cfg != cfg.backbone {
        return Err(CliError::Usage(format!(
            "backbone checkpoint {} was trained under a different backbone config",
            path.display()
        )));
    }
    Ok((bb_cfg, ps))
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

/// Directory that holds an output file, for manifest placement.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Manifest path for a command whose primary output is a single file:
/// a sibling `<out>.manifest.json`, so several commands can share a
/// directory without clobbering each other's manifests.
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

// ---- gen-data ----

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    ensure_dir(&a.out)?;
    let ds = env::generate_demos(&cfg.env, cfg.data.episodes, cfg.data.noise_scale, cfg.data.seed)?;
    let succ = ds.episodes.iter().filter(|e| e.success).count();
    println!(
        "generated {} episodes ({} successful) across {} tasks",
        ds.episodes.len(),
        succ,
        cfg.env.t_tasks
    );
    ds.save_dir(&a.out)?;
    let mut m = RunManifest::new("gen-data", &cfg.hash()?);
    m.record_seed("data", cfg.data.seed);
    let echo = a.out.join("config_echo.json");
    wamgate::checkpoint::atomic_write(&echo, cfg.to_json()?.as_bytes())?;
    m.add_artifact(&a.out, &echo)?;
    m.add_artifact(&a.out, &a.out.join("manifest.json"))?;
    for i in 0..ds.episodes.len() {
        m.add_artifact(&a.out, &a.out.join(format!("ep{i:05}.bin")))?;
    }
    let mpath = m.finish(&a.out)?;
    println!("dataset written to {}; manifest {}", a.out.display(), mpath.display());
    Ok(())
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> CliResult<DemoDataset> {
    let ds = DemoDataset::load_dir(dir)?;
    if ds.env_config_hash != cfg.env.config_hash() {
        return Err(CliError::Usage(format!(
            "dataset in {} was generated under a different environment config",
            dir.display()
        )));
    }
    Ok(ds)
}

// ---- train-backbone ----

fn train_backbone(a: TrainBackboneArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let mut s1 = cfg.stage1.clone();
    if let Some(steps) = a.steps {
        s1.steps = steps;
    }
    if let Some(seed) = a.seed {
        s1.seed = seed;
    }
    s1.shared_times |= a.shared_times;

    let mut ps = backbone::init_params(&cfg.backbone, s1.seed, false)?;
    let n_eps = ds.episodes.len();
    let held = stage1::collect_samples(&ds, cfg.backbone.f_frames, n_eps.saturating_sub(s1.holdout_episodes)..n_eps);
    let eval_seed = s1.seed ^ 0x5eed;
    let loss0 = if held.is_empty() {
        f64::NAN
    } else {
        stage1::eval_loss(&cfg.backbone, &ps, &held, s1.shared_times, eval_seed)?
    };
    println!(
        "training backbone: {} steps, batch {}, {} train episodes, {} held out (initial held-out loss {:.4})",
        s1.steps,
        s1.batch_size,
        n_eps - s1.holdout_episodes,
        s1.holdout_episodes,
        loss0
    );
    if s1.steps > 0 {
        stage1::train_stage1(&cfg.backbone, &s1, &ds, &mut ps, |m| {
            println!("step {:5}  loss {:.5}  grad-norm {:.4}", m.step, m.loss, m.grad_norm);
        })?;
    }
    let loss1 = if held.is_empty() {
        f64::NAN
    } else {
        stage1::eval_loss(&cfg.backbone, &ps, &held, s1.shared_times, eval_seed)?
    };
    println!("held-out loss: {loss0:.4} -> {loss1:.4}");

    backbone::save_backbone(&a.out, &cfg.backbone, &ps)?;
    let root = parent_dir(&a.out);
    let mut m = RunManifest::new("train-backbone", &cfg.hash()?);
    m.record_seed("stage1", s1.seed);
    m.add_artifact(&root, &a.out)?;
    let mpath = m.finish_to(&sibling_manifest(&a.out))?;
    println!("checkpoint {} ; manifest {}", a.out.display(), mpath.display());
    Ok(())
}

// ---- train-gpn ----

fn train_gpn(a: TrainGpnArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let (bb_cfg, bb_ps) = load_backbone_checked(&a.backbone, &cfg)?;
    let fp_before = bb_ps.fingerprint();
    let mut gpn_ps = gpn::init_params(&cfg.gpn, cfg.grpo.seed, false)?;
    println!(
        "training gating policy: {} epochs x {} episodes (groups of {}), {} inner epochs",
        cfg.grpo.epochs, cfg.grpo.episodes_per_epoch, cfg.grpo.group_size, cfg.grpo.inner_epochs
    );
    let metrics = grpo::train_stage2(
        &cfg.env,
        &bb_cfg,
        &bb_ps,
        &cfg.gpn,
        &mut gpn_ps,
        &cfg.grpo,
        |m| {
            println!(
                "epoch {:3} task {}  reward {:.3}  loss {:+.5}  beta {:.5}  r {:.3}  sigma {:.3}",
                m.epoch, m.task_id, m.mean_reward, m.loss, m.entropy_beta, m.mean_r, m.mean_sigma
            );
            if m.stall {
                eprintln!(
                    "warning: epoch {} earned zero reward everywhere (sparse-reward stall)",
                    m.epoch
                );
            }
        },
    )?;
    if bb_ps.fingerprint() != fp_before {
        return Err(CliError::Runtime("frozen backbone changed".into()));
    }
    println!("backbone fingerprint unchanged: {}", &fp_before[..16]);

    gpn::save_gpn(&a.out, &cfg.gpn, &gpn_ps)?;
    let metrics_path = a.metrics.unwrap_or_else(|| {
        let mut p = a.out.clone();
        p.set_extension("metrics.csv");
        p
    });
    let mut csv = String::from("epoch,task,mean_reward,loss,entropy_beta,mean_r,mean_sigma\n");
    for m in &metrics {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.epoch,
            m.task_id,
            fmt_float(m.mean_reward),
            fmt_float(m.loss),
            fmt_float(m.entropy_beta),
            fmt_float(m.mean_r),
            fmt_float(m.mean_sigma)
        ));
    }
    wamgate::checkpoint::atomic_write(&metrics_path, csv.as_bytes())?;

    let root = parent_dir(&a.out);
    let mut m = RunManifest::new("train-gpn", &cfg.hash()?);
    m.record_seed("grpo", cfg.grpo.seed);
    m.add_artifact(&root, &a.out)?;
    if parent_dir(&metrics_path) == root {
        m.add_artifact(&root, &metrics_path)?;
    }
    let mpath = m.finish_to(&sibling_manifest(&a.out))?;
    println!(
        "gating checkpoint {} ; metrics {} ; manifest {}",
        a.out.display(),
        metrics_path.display(),
        mpath.display()
    );
    Ok(())
}

// ---- eval ----

struct ArmResult {
    per_task: Vec<f64>,
    mean: f64,
}

/// Success rate per task for one policy, over `episodes` seeded episodes
/// per task. Episode seeds depend only on (seed, task, index), so two arms
/// evaluated with the same seed see identical initial conditions.
fn evaluate_policy(
    cfg: &RunConfig,
    bb_cfg: &BackboneConfig,
    bb_ps: &ParamSet,
    policy: &GatePolicy,
    episodes: usize,
    seed: u64,
) -> CliResult<ArmResult> {
    let sched_cfg = SchedConfig {
        k_steps: cfg.grpo.k_steps,
    };
    let per_task = sched::success_rates(&cfg.env, bb_cfg, bb_ps, &sched_cfg, policy, episodes, seed)?;
    let mean = if per_task.is_empty() {
        0.0
    } else {
        per_task.iter().sum::<f64>() / per_task.len() as f64
    };
    Ok(ArmResult { per_task, mean })
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let (bb_cfg, bb_ps) = load_backbone_checked(&a.backbone, &cfg)?;
    let episodes = a.episodes.unwrap_or(cfg.eval.episodes_per_task);
    let seed = a.seed.unwrap_or(cfg.eval.seed);

    let gpn_loaded = match &a.gpn {
        Some(p) => {
            let (gcfg, gps) = gpn::load_gpn(p)?;
            if gcfg != cfg.gpn {
                return Err(CliError::Usage(
                    "gating checkpoint was trained under a different gpn config".into(),
                ));
            }
            Some((gcfg, gps))
        }
        None => None,
    };
    let (policy, label) = match (&gpn_loaded, a.policy) {
        (Some((gcfg, gps)), _) => (
            GatePolicy::Learned {
                cfg: gcfg,
                params: gps,
                deterministic: true,
            },
            "learned",
        ),
        (None, Some(PolicyKind::Handcrafted)) => (GatePolicy::HandCrafted, "handcrafted"),
        (None, Some(PolicyKind::Shared)) | (None, None) => (GatePolicy::SharedT, "shared"),
    };

    let mut csv = String::from("policy,task,episodes,success_rate\n");
    if episodes == 0 {
        println!("no episodes requested; writing empty table");
    } else {
        let res = evaluate_policy(&cfg, &bb_cfg, &bb_ps, &policy, episodes, seed)?;
        for (task, rate) in res.per_task.iter().enumerate() {
            println!("task {task}: success rate {rate:.3} over {episodes} episodes");
            csv.push_str(&format!("{label},{task},{episodes},{}\n", fmt_float(*rate)));
        }
        println!("mean success rate: {:.3} ({label})", res.mean);
        csv.push_str(&format!("{label},mean,{episodes},{}\n", fmt_float(res.mean)));
    }
    wamgate::checkpoint::atomic_write(&a.out, csv.as_bytes())?;
    let root = parent_dir(&a.out);
    let mut m = RunManifest::new("eval", &cfg.hash()?);
    m.record_seed("eval", seed);
    m.add_artifact(&root, &a.out)?;
    m.finish_to(&sibling_manifest(&a.out))?;
    println!("results written to {}", a.out.display());
    Ok(())
}

// ---- ablate ----

fn ablate(a: AblateArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let (bb_cfg_a, bb_a) = load_backbone_checked(&a.backbone_shared, &cfg)?;
    let (bb_cfg_b, bb_b) = load_backbone_checked(&a.backbone_df, &cfg)?;
    let (gcfg, gps) = gpn::load_gpn(&a.gpn)?;
    if gcfg != cfg.gpn {
        return Err(CliError::Usage(
            "gating checkpoint was trained under a different gpn config".into(),
        ));
    }
    let episodes = a.episodes.unwrap_or(cfg.eval.episodes_per_task);
    let seed = a.seed.unwrap_or(cfg.eval.seed);

    let learned = GatePolicy::Learned {
        cfg: &gcfg,
        params: &gps,
        deterministic: true,
    };
    let arms: Vec<(&str, &BackboneConfig, &ParamSet, &GatePolicy)> = vec![
        ("shared_t", &bb_cfg_a, &bb_a, &GatePolicy::SharedT),
        ("stage1", &bb_cfg_b, &bb_b, &GatePolicy::SharedT),
        ("handcrafted", &bb_cfg_b, &bb_b, &GatePolicy::HandCrafted),
        ("full", &bb_cfg_b, &bb_b, &learned),
    ];

    let mut csv = String::from("arm,");
    for t in 0..cfg.env.t_tasks {
        csv.push_str(&format!("task{t},"));
    }
    csv.push_str("mean\n");
    for (name, bc, bp, policy) in arms {
        let res = evaluate_policy(&cfg, bc, bp, policy, episodes, seed)?;
        print!("{name:>12}:");
        csv.push_str(name);
        for rate in &res.per_task {
            print!("  {rate:.3}");
            csv.push_str(&format!(",{}", fmt_float(*rate)));
        }
        println!("  | mean {:.3}", res.mean);
        csv.push_str(&format!(",{}\n", fmt_float(res.mean)));
    }
    wamgate::checkpoint::atomic_write(&a.out, csv.as_bytes())?;
    let root = parent_dir(&a.out);
    let mut m = RunManifest::new("ablate", &cfg.hash()?);
    m.record_seed("eval", seed);
    m.add_artifact(&root, &a.out)?;
    m.finish_to(&sibling_manifest(&a.out))?;
    println!("ablation table written to {}", a.out.display());
    Ok(())
}

// ---- probe-attention ----

fn probe_attention(a: ProbeArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let (bb_cfg, bb_ps) = load_backbone_checked(&a.backbone, &cfg)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let seed = a.seed.unwrap_or(cfg.eval.seed);
    let table = backbone::attention_probe(&bb_cfg, &bb_ps, &ds, a.bins, seed)?;

    let group_names = ["early", "middle", "late"];
    let mut csv = String::from("group,bin,t_lo,t_hi,mean_attention,std_attention,count,spearman_rho\n");
    for (g, name) in group_names.iter().enumerate() {
        let rho = table.group_spearman(g)?;
        for (b, stat) in table.groups[g].iter().enumerate() {
            csv.push_str(&format!(
                "{name},{b},{},{},{},{},{},{}\n",
                fmt_float(b as f64 / a.bins as f64),
                fmt_float((b + 1) as f64 / a.bins as f64),
                fmt_float(stat.mean),
                fmt_float(stat.std),
                stat.count,
                fmt_float(rho)
            ));
        }
        println!("{name:>6} layers: Spearman rho(t, attention) = {rho:+.3}");
    }
    let rho = table.overall_spearman()?;
    for (b, stat) in table.overall.iter().enumerate() {
        csv.push_str(&format!(
            "overall,{b},{},{},{},{},{},{}\n",
            fmt_float(b as f64 / a.bins as f64),
            fmt_float((b + 1) as f64 / a.bins as f64),
            fmt_float(stat.mean),
            fmt_float(stat.std),
            stat.count,
            fmt_float(rho)
        ));
    }
    println!("overall: Spearman rho(t, attention) = {rho:+.3}");
    wamgate::checkpoint::atomic_write(&a.out, csv.as_bytes())?;
    let root = parent_dir(&a.out);
    let mut m = RunManifest::new("probe-attention", &cfg.hash()?);
    m.record_seed("probe", seed);
    m.add_artifact(&root, &a.out)?;
    m.finish_to(&sibling_manifest(&a.out))?;
    println!("probe table written to {}", a.out.display());
    Ok(())
}

// ---- export-schedules ----

fn export_schedules(a: ExportArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let (bb_cfg, bb_ps) = load_backbone_checked(&a.backbone, &cfg)?;
    let (gcfg, gps) = gpn::load_gpn(&a.gpn)?;
    if gcfg != cfg.gpn {
        return Err(CliError::Usage(
            "gating checkpoint was trained under a different gpn config".into(),
        ));
    }
    ensure_dir(&a.out)?;
    let episodes = a.episodes.unwrap_or(cfg.eval.episodes_per_task);
    let seed = a.seed.unwrap_or(cfg.eval.seed);
    let policy = GatePolicy::Learned {
        cfg: &gcfg,
        params: &gps,
        deterministic: true,
    };
    let sched_cfg = SchedConfig {
        k_steps: cfg.grpo.k_steps,
    };
    let mut traces: Vec<ChunkTrace> = Vec::new();
    let mut chunk_counter = 0usize;
    for task in 0..cfg.env.t_tasks {
        let rollouts: Vec<_> = (0..episodes)
            .into_par_iter()
            .map(|i| {
                let ep_seed = env::derive_seed(seed, &[task as u64, i as u64]);
                sched::rollout_episode(
                    &cfg.env, &bb_cfg, &bb_ps, &sched_cfg, &policy, task, ep_seed,
                )
            })
            .collect::<wamgate::Result<Vec<_>>>()?;
        for ep in rollouts {
            for traj in &ep.trajectories {
                traces.push(ChunkTrace {
                    task_id: task,
                    chunk_index: chunk_counter,
                    times_history: traj.times_history.clone(),
                    success: ep.reward == 1,
                });
                chunk_counter += 1;
            }
        }
    }
    let trace_path = a.out.join("schedule_trace.csv");
    let summary_path = a.out.join("schedule_summary.csv");
    sched::export_schedule_traces(&traces, &trace_path, &summary_path)?;
    let mut m = RunManifest::new("export-schedules", &cfg.hash()?);
    m.record_seed("eval", seed);
    m.add_artifact(&a.out, &trace_path)?;
    m.add_artifact(&a.out, &summary_path)?;
    let mpath = m.finish(&a.out)?;
    println!(
        "{} chunk traces over {} tasks written to {}; manifest {}",
        traces.len(),
        cfg.env.t_tasks,
        a.out.display(),
        mpath.display()
    );
    Ok(())
}

// ---- verify ----

fn verify(a: VerifyArgs) -> CliResult<()> {
    let (manifest_path, root) = if a.manifest.is_dir() {
        (a.manifest.join(MANIFEST_NAME), a.manifest.clone())
    } else {
        (a.manifest.clone(), parent_dir(&a.manifest))
    };
    let m = RunManifest::load(&manifest_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", manifest_path.display())))?;
    m.verify(&root)?;
    println!(
        "ok: {} artifacts verified against {}",
        m.artifacts.len(),
        manifest_path.display()
    );
    Ok(())
}
