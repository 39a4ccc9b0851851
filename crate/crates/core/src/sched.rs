//! The denoising scheduler: couples the frozen video–action backbone with a
//! gating policy that decides, at every denoising step, how large a time
//! decrement each video frame takes. The action token follows a fixed
//! linear clock and is never gated.
//!
//! Step ordering per denoising step k:
//! 1. the policy observes the current latents and times and emits per-frame
//!    relative scales r ∈ (0,2)^F;
//! 2. each frame's time decreases by δt·r_f, clamped at zero (a frame at
//!    t = 0 is frozen); the action clock moves to (K−k−1)/K;
//! 3. the backbone predicts velocities at the updated times;
//! 4. states take an Euler step with each frame's effective decrement.

use std::path::Path;

use crate::autodiff::Array;
use crate::backbone::{self, BackboneConfig, ChunkState};
use crate::env::{self, ActionChunk, EnvConfig, EnvState, Frame};
use crate::flow::{euler_update, TimestepVector};
use crate::gpn::{self, GatingState, GPNConfig};
use crate::params::ParamSet;
use crate::rng::{self, Rng};
use crate::stats::fmt_float;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SchedConfig {
    /// Number of denoising steps K.
    pub k_steps: usize,
}

impl Default for SchedConfig {
    fn default() -> Self {
        SchedConfig { k_steps: 10 }
    }
}

/// Remaining-time threshold below which a frame counts as fully denoised:
/// the step absorbs the residue and the frame's time becomes exactly zero.
/// This keeps the r ≡ 1 reduction landing on t = 0 despite the rounding
/// error accumulated by repeated subtraction of 1/K.
pub const TIME_SNAP: f64 = 1e-9;

/// Nominal per-step time decrement of the underlying scalar schedule
/// (linear: δt = 1/K for every step).
pub fn nominal_decrement(k: usize, k_steps: usize) -> Result<f64> {
    if k_steps == 0 || k >= k_steps {
        return Err(Error::Config(format!(
            "step {k} out of range for K = {k_steps}"
        )));
    }
    Ok(1.0 / k_steps as f64)
}

/// Hand-crafted monotone schedule shape: r_f = 2(F − f + 1)/(F + 1) for
/// f = 1..F. Decreasing in f, mean exactly 1 (earlier frames denoise faster).
pub fn handcrafted_shape(f_frames: usize) -> Vec<f64> {
    (1..=f_frames)
        .map(|f| 2.0 * (f_frames - f + 1) as f64 / (f_frames + 1) as f64)
        .collect()
}

/// How per-frame relative scales are produced at each step.
pub enum GatePolicy<'a> {
    /// r ≡ 1: every latent follows the scalar schedule.
    SharedT,
    /// The fixed monotone shape from [`handcrafted_shape`].
    HandCrafted,
    /// An arbitrary constant r vector (diagnostics and tests).
    Fixed(Vec<f64>),
    /// The gating policy network; `deterministic` uses the squashed mean,
    /// otherwise r is sampled and its log-density recorded.
    Learned {
        cfg: &'a GPNConfig,
        params: &'a ParamSet,
        deterministic: bool,
    },
}

struct GateDecision {
    r: Vec<f64>,
    u: Option<Vec<f64>>,
    log_prob: Option<f64>,
    log_prob_frames: Option<Vec<f64>>,
}

impl GatePolicy<'_> {
    fn decide(&self, state: &GatingState, rng: &mut Rng) -> Result<GateDecision> {
        let f = state.times.video_t.len();
        match self {
            GatePolicy::SharedT => Ok(GateDecision {
                r: vec![1.0; f],
                u: None,
                log_prob: None,
                log_prob_frames: None,
            }),
            GatePolicy::HandCrafted => Ok(GateDecision {
                r: handcrafted_shape(f),
                u: None,
                log_prob: None,
                log_prob_frames: None,
            }),
            GatePolicy::Fixed(r) => {
                if r.len() != f {
                    return Err(Error::Shape("fixed gate length".into()));
                }
                Ok(GateDecision {
                    r: r.clone(),
                    u: None,
                    log_prob: None,
                    log_prob_frames: None,
                })
            }
            GatePolicy::Learned {
                cfg,
                params,
                deterministic,
            } => {
                if *deterministic {
                    Ok(GateDecision {
                        r: gpn::deterministic_action(cfg, params, state)?,
                        u: None,
                        log_prob: None,
                        log_prob_frames: None,
                    })
                } else {
                    let act = gpn::sample(cfg, params, state, rng)?;
                    Ok(GateDecision {
                        r: act.r,
                        u: Some(act.u),
                        log_prob: Some(act.log_prob),
                        log_prob_frames: Some(act.log_prob_frames),
                    })
                }
            }
        }
    }
}

/// Everything the Stage-2 learner needs to recompute one gating decision:
/// the exact policy input, the sampled pre-squash action, and its
/// per-frame log-densities at sampling time.
#[derive(Clone, Debug)]
pub struct GateStepRecord {
    pub state: GatingState,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub log_prob_frames: Vec<f64>,
}

/// One step's public log entry.
#[derive(Clone, Debug)]
pub struct GateStepLog {
    pub r: Vec<f64>,
    pub log_prob: Option<f64>,
}

/// Per-chunk record of the full denoising run.
#[derive(Clone, Debug)]
pub struct DenoiseTrajectory {
    /// K+1 entries: times before step 0, then after each step.
    pub times_history: Vec<TimestepVector>,
    /// K entries.
    pub steps: Vec<GateStepLog>,
}

#[derive(Clone, Debug)]
pub struct ScheduleState {
    pub obs: Array,
    pub task_id: usize,
    pub video: Vec<Array>,
    pub action: Array,
    pub times: TimestepVector,
    pub k: usize,
    pub trajectory: DenoiseTrajectory,
}

impl ScheduleState {
    /// Fresh chunk at t = 1: video and action start as standard Gaussian
    /// noise (video frames drawn first, then the action, row-major).
    pub fn init(cfg: &BackboneConfig, obs: &Frame, task_id: usize, rng: &mut Rng) -> Result<Self> {
        let draw = |shape: &[usize], rng: &mut Rng| -> Array {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng::normal(rng))
                .collect();
            Array::from_vec(shape, data).expect("shape/len agree")
        };
        let video = (0..cfg.f_frames)
            .map(|_| draw(&[cfg.img, cfg.img], rng))
            .collect();
        let action = draw(&[cfg.chunk_h, 2], rng);
        let times = TimestepVector::shared(cfg.f_frames, 1.0);
        Ok(ScheduleState {
            obs: obs.pixels.clone(),
            task_id,
            video,
            action,
            times: times.clone(),
            k: 0,
            trajectory: DenoiseTrajectory {
                times_history: vec![times],
                steps: Vec::new(),
            },
        })
    }

    fn gating_state(&self) -> GatingState {
        let mut latents = Vec::with_capacity(self.video.len() + 1);
        latents.push(self.obs.clone());
        latents.extend(self.video.iter().cloned());
        GatingState {
            latents,
            times: self.times.clone(),
        }
    }
}

/// One denoising step of Algorithm order: gate → advance times → query the
/// frozen backbone at the new times → Euler-update the states.
pub fn step(
    bb_cfg: &BackboneConfig,
    bb_params: &ParamSet,
    sched: &SchedConfig,
    policy: &GatePolicy,
    state: &mut ScheduleState,
    rng: &mut Rng,
    mut record: Option<&mut Vec<GateStepRecord>>,
) -> Result<()> {
    let k = state.k;
    let dt = nominal_decrement(k, sched.k_steps)?;
    let gating_input = state.gating_state();
    let decision = policy.decide(&gating_input, rng)?;

    // advance per-frame times with the clamp; remember the (possibly
    // snapped) per-frame decrements for the matching state update
    let mut new_video_t = Vec::with_capacity(state.times.video_t.len());
    let mut dt_frames = Vec::with_capacity(state.times.video_t.len());
    for (f, &t) in state.times.video_t.iter().enumerate() {
        let nominal = dt * decision.r[f];
        let dt_f = if t - nominal < TIME_SNAP { t } else { nominal };
        dt_frames.push(dt_f);
        new_video_t.push(t - dt_f.min(t));
    }
    // the action follows the fixed global clock exactly
    let new_action_t = (sched.k_steps - (k + 1)) as f64 / sched.k_steps as f64;
    let new_times = TimestepVector {
        video_t: new_video_t,
        action_t: new_action_t,
    };

    // frozen backbone at the post-update times, current states
    let chunk_state = ChunkState {
        obs: &state.obs,
        video: state.video.iter().collect(),
        action: &state.action,
        times: &new_times,
    };
    let (pred, _) = backbone::predict(bb_cfg, bb_params, &chunk_state, state.task_id)?;

    for f in 0..state.video.len() {
        let (x, t_after) = euler_update(
            &state.video[f],
            &pred.video_vel[f],
            state.times.video_t[f],
            dt_frames[f],
        )?;
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("video latent {f} at step {k}")));
        }
        debug_assert_eq!(t_after, new_times.video_t[f]);
        state.video[f] = x;
    }
    let (a, _) = euler_update(&state.action, &pred.action_vel, state.times.action_t, dt)?;
    if !a.all_finite() {
        return Err(Error::NonFinite(format!("action latent at step {k}")));
    }
    state.action = a;

    if let (Some(rec), Some(u), Some(lpf)) = (
        record.as_deref_mut(),
        decision.u.as_ref(),
        decision.log_prob_frames.as_ref(),
    ) {
        rec.push(GateStepRecord {
            state: gating_input,
            r: decision.r.clone(),
            u: u.clone(),
            log_prob_frames: lpf.clone(),
        });
    }
    state.trajectory.steps.push(GateStepLog {
        r: decision.r,
        log_prob: decision.log_prob,
    });
    state.trajectory.times_history.push(new_times.clone());
    state.times = new_times;
    state.k += 1;
    Ok(())
}

/// Denoise one chunk from pure noise: K steps, returning the executed-ready
/// action, the imagined frames (possibly with residual noise), and the log.
pub fn run_denoise(
    bb_cfg: &BackboneConfig,
    bb_params: &ParamSet,
    sched: &SchedConfig,
    policy: &GatePolicy,
    obs: &Frame,
    task_id: usize,
    a_max: f64,
    rng: &mut Rng,
    mut record: Option<&mut Vec<GateStepRecord>>,
) -> Result<(ActionChunk, Vec<Frame>, DenoiseTrajectory)> {
    let mut state = ScheduleState::init(bb_cfg, obs, task_id, rng)?;
    for _ in 0..sched.k_steps {
        step(
            bb_cfg,
            bb_params,
            sched,
            policy,
            &mut state,
            rng,
            record.as_deref_mut(),
        )?;
    }
    debug_assert_eq!(state.times.action_t, 0.0);
    let chunk = ActionChunk::from_raw(state.action.clone(), bb_cfg.chunk_h, a_max)?;
    let frames = state
        .video
        .into_iter()
        .map(|pixels| Frame { pixels })
        .collect();
    Ok((chunk, frames, state.trajectory))
}

// ---- episode rollout ----

/// Outcome of running the policy stack on one environment episode.
pub struct EpisodeRollout {
    pub reward: u8,
    pub task_id: usize,
    /// One trajectory per chunk.
    pub trajectories: Vec<DenoiseTrajectory>,
    /// Gating records across all chunks, in execution order (learned
    /// sampled policies only).
    pub gate_records: Vec<GateStepRecord>,
    pub final_state: EnvState,
}

/// Roll out one full episode: at each chunk, render the observation, denoise
/// an action chunk, and execute it in the environment.
pub fn rollout_episode(
    env_cfg: &EnvConfig,
    bb_cfg: &BackboneConfig,
    bb_params: &ParamSet,
    sched: &SchedConfig,
    policy: &GatePolicy,
    task_id: usize,
    episode_seed: u64,
) -> Result<EpisodeRollout> {
    if bb_cfg.img != env_cfg.img
        || bb_cfg.f_frames != env_cfg.f_frames
        || bb_cfg.chunk_h != env_cfg.chunk_h
        || bb_cfg.t_tasks != env_cfg.t_tasks
    {
        return Err(Error::Config(
            "backbone and environment dimensions disagree".into(),
        ));
    }
    let mut env_state = env::reset(env_cfg, task_id, episode_seed)?;
    let mut rng = rng::stream(episode_seed, "rollout", &[task_id as u64]);
    let mut trajectories = Vec::with_capacity(env_cfg.chunks_per_episode);
    let mut gate_records = Vec::new();
    let mut states = vec![env_state];
    for _ in 0..env_cfg.chunks_per_episode {
        let obs = env::render(env_cfg, &env_state);
        let (chunk, _imagined, traj) = run_denoise(
            bb_cfg,
            bb_params,
            sched,
            policy,
            &obs,
            task_id,
            env_cfg.a_max,
            &mut rng,
            Some(&mut gate_records),
        )?;
        let (next, _, chunk_states) = env::step_chunk_traced(env_cfg, &env_state, &chunk)?;
        states.extend(chunk_states);
        env_state = next;
        trajectories.push(traj);
    }
    let reward = env::episode_reward(env_cfg, &states)?;
    Ok(EpisodeRollout {
        reward,
        task_id,
        trajectories,
        gate_records,
        final_state: env_state,
    })
}

/// Per-task success rates: `episodes` rollouts per task, per-episode seeds
/// derived from (seed, task, index), episodes evaluated in parallel. The
/// derivation makes results independent of worker scheduling and lets two
/// policies be compared on identical initial conditions.
pub fn success_rates(
    env_cfg: &EnvConfig,
    bb_cfg: &BackboneConfig,
    bb_params: &ParamSet,
    sched: &SchedConfig,
    policy: &GatePolicy,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    (0..env_cfg.t_tasks)
        .map(|task| {
            let wins: usize = (0..episodes)
                .into_par_iter()
                .map(|i| {
                    let ep_seed = env::derive_seed(seed, &[task as u64, i as u64]);
                    rollout_episode(env_cfg, bb_cfg, bb_params, sched, policy, task, ep_seed)
                        .map(|ep| ep.reward as usize)
                })
                .try_reduce(|| 0, |a, b| Ok(a + b))?;
            Ok(if episodes == 0 {
                0.0
            } else {
                wins as f64 / episodes as f64
            })
        })
        .collect()
}

// ---- trace export ----

/// One chunk's schedule trace, annotated for export.
#[derive(Clone, Debug)]
pub struct ChunkTrace {
    pub task_id: usize,
    pub chunk_index: usize,
    pub times_history: Vec<TimestepVector>,
    /// Episode-level success of the episode this chunk belongs to.
    pub success: bool,
}

/// Write (a) a per-chunk trace CSV (`chunk, task, step, frame, t`; one row
/// per step × frame, including the k = 0 row) and (b) a per-task summary CSV
/// (`task, frame, mean_final_t, std_final_t, success_rate`), tasks sorted by
/// success rate.
pub fn export_schedule_traces(
    traces: &[ChunkTrace],
    trace_path: &Path,
    summary_path: &Path,
) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Config("no traces to export".into()));
    }
    let mut trace_csv = String::from("chunk,task,step,frame,t\n");
    for tr in traces {
        for (k, times) in tr.times_history.iter().enumerate() {
            for (f, t) in times.video_t.iter().enumerate() {
                trace_csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    tr.chunk_index,
                    tr.task_id,
                    k,
                    f + 1,
                    fmt_float(*t)
                ));
            }
        }
    }
    crate::checkpoint::atomic_write(trace_path, trace_csv.as_bytes())?;

    // per-task, per-frame aggregation of the final-step residual noise level
    let f_frames = traces[0].times_history[0].video_t.len();
    let max_task = traces.iter().map(|t| t.task_id).max().unwrap_or(0);
    let mut final_t: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); f_frames]; max_task + 1];
    let mut success: Vec<Vec<f64>> = vec![Vec::new(); max_task + 1];
    for tr in traces {
        let last = tr.times_history.last().expect("non-empty history");
        for f in 0..f_frames {
            final_t[tr.task_id][f].push(last.video_t[f]);
        }
        success[tr.task_id].push(if tr.success { 1.0 } else { 0.0 });
    }
    let mut order: Vec<usize> = (0..=max_task).filter(|&t| !success[t].is_empty()).collect();
    order.sort_by(|&a, &b| {
        crate::stats::mean(&success[a])
            .partial_cmp(&crate::stats::mean(&success[b]))
            .expect("finite rates")
    });
    let mut summary_csv = String::from("task,frame,mean_final_t,std_final_t,success_rate\n");
    for &task in &order {
        let rate = crate::stats::mean(&success[task]);
        for f in 0..f_frames {
            summary_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                task,
                f + 1,
                fmt_float(crate::stats::mean(&final_t[task][f])),
                fmt_float(crate::stats::pop_std(&final_t[task][f])),
                fmt_float(rate)
            ));
        }
    }
    crate::checkpoint::atomic_write(summary_path, summary_csv.as_bytes())?;
    Ok(())
}
