//! Stage-1 training: fit the joint video–action backbone to flow-matching
//! velocity targets under independently sampled per-latent timesteps (or a
//! single shared scalar per sample, for the shared-schedule baseline arm).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, NodeId, Tape};
use crate::backbone::{self, BackboneConfig, ChunkState};
use crate::env::{ChunkSample, DemoDataset};
use crate::flow::{self, NoisedChunk, TimestepVector};
use crate::optim::AdamW;
use crate::params::{Bound, ParamSet};
use crate::rng::{self, Rng};
use crate::{Error, Result};
use rand::RngCore;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// When set, each sample uses one scalar t for every frame and the
    /// action (the shared-schedule training baseline); otherwise every
    /// latent draws its own timestep.
    pub shared_times: bool,
    /// Trailing episodes reserved for held-out evaluation.
    pub holdout_episodes: usize,
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            shared_times: false,
            holdout_episodes: 32,
            log_every: 50,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// One training example: a noised chunk plus its velocity targets.
pub struct Stage1Example {
    pub noised: NoisedChunk,
    pub task_id: usize,
    /// ε − x per video frame, pixel space.
    pub video_target: Vec<Array>,
    /// ε − x for the action chunk.
    pub action_target: Array,
}

/// Draw timesteps and noise for one clean chunk sample and compute the
/// velocity targets.
pub fn make_example(
    sample: &ChunkSample,
    task_id: usize,
    shared_times: bool,
    rng: &mut Rng,
) -> Result<Stage1Example> {
    let f_frames = sample.video.len();
    let times = if shared_times {
        let t = rng::uniform_open_closed(rng);
        TimestepVector {
            video_t: vec![t; f_frames],
            action_t: t,
        }
    } else {
        flow::sample_independent_times(f_frames, rng)
    };
    let noised = flow::noise_chunk(sample.obs, sample.video, sample.action, &times, rng)?;
    let video_target = (0..f_frames)
        .map(|f| flow::fm_target(&sample.video[f].pixels, &noised.eps_video[f]))
        .collect::<Result<Vec<_>>>()?;
    let action_target = flow::fm_target(&sample.action.deltas, &noised.eps_action)?;
    Ok(Stage1Example {
        noised,
        task_id,
        video_target,
        action_target,
    })
}

/// Mean squared error between the backbone's predicted velocities and the
/// flow-matching targets, averaged over every video and action element in
/// the batch. Differentiable w.r.t. whatever `bound` exposes.
pub fn stage1_loss(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    ps: &ParamSet,
    bound: &Bound,
    batch: &[Stage1Example],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Train("empty stage-1 batch".into()));
    }
    let mut total: Option<NodeId> = None;
    let mut n_elems = 0usize;
    for ex in batch {
        let state = ChunkState::of_noised(&ex.noised);
        let seq = backbone::embed(tape, cfg, ps, bound, &state, ex.task_id)?;
        let nodes = backbone::forward(tape, cfg, ps, bound, &seq)?;

        let target_refs: Vec<&Array> = ex.video_target.iter().collect();
        let video_target = backbone::patchify_stack(&target_refs, cfg.patch_size)?;
        let vt = tape.constant(video_target);
        let dv = tape.sub(nodes.video_patch_vel, vt)?;
        let dv2 = tape.mul(dv, dv)?;
        let sv = tape.sum(dv2)?;

        let at = tape.constant(ex.action_target.clone());
        let da = tape.sub(nodes.action_vel, at)?;
        let da2 = tape.mul(da, da)?;
        let sa = tape.sum(da2)?;

        let s = tape.add(sv, sa)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
        n_elems += ex.video_target.iter().map(|a| a.len()).sum::<usize>()
            + ex.action_target.len();
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / n_elems as f64)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("stage-1 loss = {v}")));
    }
    Ok(loss)
}

/// All chunk samples of a dataset slice, tagged with their task ids.
pub fn collect_samples(
    dataset: &DemoDataset,
    f_frames: usize,
    range: std::ops::Range<usize>,
) -> Vec<(ChunkSample<'_>, usize)> {
    dataset.episodes[range]
        .iter()
        .flat_map(|ep| {
            ep.chunk_samples(f_frames)
                .into_iter()
                .map(move |s| (s, ep.task_id))
        })
        .collect()
}

/// Deterministic held-out loss: noise draws come from a fixed stream, so
/// two calls with the same seed are bit-identical and comparable across
/// checkpoints of the same model.
pub fn eval_loss(
    cfg: &BackboneConfig,
    ps: &ParamSet,
    samples: &[(ChunkSample<'_>, usize)],
    shared_times: bool,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Train("empty evaluation set".into()));
    }
    let mut rng = rng::stream(seed, "stage1-eval", &[]);
    let mut total = 0.0;
    let mut count = 0usize;
    // small sub-batches keep the tape footprint bounded
    for chunk in samples.chunks(8) {
        let examples = chunk
            .iter()
            .map(|(s, task)| make_example(s, *task, shared_times, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::inference();
        let bound = ps.bind_frozen(&mut tape);
        let loss = stage1_loss(&mut tape, cfg, ps, &bound, &examples)?;
        let n: usize = examples
            .iter()
            .map(|e| {
                e.video_target.iter().map(|a| a.len()).sum::<usize>() + e.action_target.len()
            })
            .sum();
        total += tape.value(loss).item() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Metrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Optimize the backbone in place on the training split of `dataset`;
/// returns per-`log_every` metrics (always including the final step).
pub fn train_stage1(
    bb_cfg: &BackboneConfig,
    cfg: &Stage1Config,
    dataset: &DemoDataset,
    ps: &mut ParamSet,
    mut on_log: impl FnMut(&Stage1Metrics),
) -> Result<Vec<Stage1Metrics>> {
    cfg.validate()?;
    let n_eps = dataset.episodes.len();
    if cfg.holdout_episodes >= n_eps {
        return Err(Error::Config(format!(
            "holdout ({}) must leave at least one training episode of {n_eps}",
            cfg.holdout_episodes
        )));
    }
    let train = collect_samples(dataset, bb_cfg.f_frames, 0..n_eps - cfg.holdout_episodes);
    if train.is_empty() {
        return Err(Error::Train("no training samples".into()));
    }
    let mut rng = rng::stream(cfg.seed, "stage1-train", &[]);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.grad_clip);
    let mut metrics = Vec::new();
    for step in 0..cfg.steps {
        let examples = (0..cfg.batch_size)
            .map(|_| {
                let idx = (rng.next_u64() % train.len() as u64) as usize;
                let (s, task) = &train[idx];
                make_example(s, *task, cfg.shared_times, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let loss = stage1_loss(&mut tape, bb_cfg, ps, &bound, &examples)?;
        let loss_v = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = ps.collect_grads(&tape, &bound);
        let stats = opt.step(ps, &grads)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let m = Stage1Metrics {
                step,
                loss: loss_v,
                grad_norm: stats.grad_norm,
            };
            on_log(&m);
            metrics.push(m);
        }
    }
    Ok(metrics)
}
