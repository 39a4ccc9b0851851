//! Rectified-flow noising and the heterogeneous-step Euler update.
//!
//! Every latent (each future video frame, and the action chunk as one unit)
//! carries its own timestep t ∈ [0,1]; the straight path x_t = (1−t)·x + t·ε
//! interpolates between data (t = 0) and standard Gaussian noise (t = 1).
//! The observation frame is pinned at t = 0 and never noised or updated.

use crate::autodiff::Array;
use crate::env::{ActionChunk, Frame};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Per-latent timesteps of one chunk. The observation's timestep is
/// identically zero and therefore not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepVector {
    /// One timestep per future video frame, `t_1 .. t_F`.
    pub video_t: Vec<f64>,
    pub action_t: f64,
}

impl TimestepVector {
    /// The pinned observation timestep.
    pub const OBS_T: f64 = 0.0;

    pub fn validate(&self) -> Result<()> {
        let ok = self
            .video_t
            .iter()
            .chain(std::iter::once(&self.action_t))
            .all(|t| t.is_finite() && (0.0..=1.0).contains(t));
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("timesteps out of [0,1]: {self:?}")))
        }
    }

    /// All latents share timestep `t` (the homogeneous special case).
    pub fn shared(f_frames: usize, t: f64) -> Self {
        TimestepVector {
            video_t: vec![t; f_frames],
            action_t: t,
        }
    }
}

/// A training input: clean observation plus noised future frames and action.
#[derive(Clone, Debug)]
pub struct NoisedChunk {
    pub obs: Frame,
    /// Noised future frames, one per timestep in `times.video_t`.
    pub video: Vec<Frame>,
    /// Noised action values, `[H, 2]`. Stored as a raw array because noised
    /// values lie outside the environment's action box.
    pub action: Array,
    pub times: TimestepVector,
    pub eps_video: Vec<Array>,
    pub eps_action: Array,
}

/// Draw one timestep per latent, i.i.d. Uniform(0,1]: video frames first
/// (in frame order), then the action.
pub fn sample_independent_times(f_frames: usize, rng: &mut Rng) -> TimestepVector {
    let video_t = (0..f_frames).map(|_| rng::uniform_open_closed(rng)).collect();
    let action_t = rng::uniform_open_closed(rng);
    TimestepVector { video_t, action_t }
}

fn interpolate(clean: &Array, eps: &Array, t: f64) -> Array {
    let data = clean
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| (1.0 - t) * x + t * e)
        .collect();
    Array::from_vec(clean.shape(), data).expect("same shape")
}

/// Noise a clean chunk at the given per-latent timesteps. Gaussian draws are
/// made per video frame in frame order (row-major within a frame), then for
/// the action (row-major), so equal seeds give bit-identical results.
pub fn noise_chunk(
    obs: &Frame,
    video: &[Frame],
    action: &ActionChunk,
    times: &TimestepVector,
    rng: &mut Rng,
) -> Result<NoisedChunk> {
    if video.len() != times.video_t.len() {
        return Err(Error::Shape(format!(
            "{} video frames but {} video timesteps",
            video.len(),
            times.video_t.len()
        )));
    }
    times.validate()?;
    let mut eps_video = Vec::with_capacity(video.len());
    let mut noised_video = Vec::with_capacity(video.len());
    for (frame, &t) in video.iter().zip(&times.video_t) {
        let eps = draw_like(&frame.pixels, rng);
        noised_video.push(Frame {
            pixels: interpolate(&frame.pixels, &eps, t),
        });
        eps_video.push(eps);
    }
    let eps_action = draw_like(&action.deltas, rng);
    let noised_action = interpolate(&action.deltas, &eps_action, times.action_t);
    Ok(NoisedChunk {
        obs: obs.clone(),
        video: noised_video,
        action: noised_action,
        times: times.clone(),
        eps_video,
        eps_action,
    })
}

fn draw_like(a: &Array, rng: &mut Rng) -> Array {
    let data = (0..a.len()).map(|_| rng::normal(rng)).collect();
    Array::from_vec(a.shape(), data).expect("shape matches length")
}

/// Flow-matching velocity target for the straight path: ε − x.
pub fn fm_target(clean: &Array, eps: &Array) -> Result<Array> {
    if clean.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "target shapes differ: {:?} vs {:?}",
            clean.shape(),
            eps.shape()
        )));
    }
    let data = eps.data().iter().zip(clean.data()).map(|(e, x)| e - x).collect();
    Array::from_vec(clean.shape(), data)
}

/// One Euler step of the reverse flow for a single latent.
///
/// The requested decrement is clamped so the timestep never crosses zero
/// (`eff = min(Δt, t)`); a latent at t = 0 is frozen and returned unchanged.
/// Returns the updated state and the new timestep `t − eff`.
pub fn euler_update(x: &Array, v_pred: &Array, t: f64, dt: f64) -> Result<(Array, f64)> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::Config(format!("invalid step size {dt}")));
    }
    if x.shape() != v_pred.shape() {
        return Err(Error::Shape(format!(
            "state {:?} vs velocity {:?}",
            x.shape(),
            v_pred.shape()
        )));
    }
    if t == 0.0 {
        return Ok((x.clone(), 0.0));
    }
    let eff = dt.min(t);
    let data = x
        .data()
        .iter()
        .zip(v_pred.data())
        .map(|(xi, vi)| xi - eff * vi)
        .collect();
    Ok((Array::from_vec(x.shape(), data)?, t - eff))
}
