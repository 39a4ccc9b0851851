//! Deterministic 2-D manipulation toy environment.
//!
//! An agent dot moves on the unit square toward a task-dependent target dot;
//! both are rendered as truncated Gaussian blobs on a small grayscale frame.
//! Episodes are short chunk sequences with a single binary reward at the end.
//! A proportional-controller expert generates the demonstration corpus for
//! Stage-1 training.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Array;
use crate::checkpoint::{atomic_write, read_array, read_string, read_u64, write_array, write_string};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Frame height and width in pixels.
    pub img: usize,
    pub t_tasks: usize,
    /// Predicted future frames per chunk.
    pub f_frames: usize,
    /// Micro-steps (low-level actions) per chunk.
    pub chunk_h: usize,
    pub chunks_per_episode: usize,
    /// Per-component action bound.
    pub a_max: f64,
    /// Success radius for reach tasks and the press zone.
    pub rho: f64,
    /// Consecutive in-zone micro-steps required by the press task.
    pub dwell_min: usize,
    /// Proportional gain of the demonstration expert.
    pub expert_kp: f64,
    pub agent_sigma_px: f64,
    pub agent_amp: f64,
    pub target_sigma_px: f64,
    pub target_amp: f64,
    /// Blob cutoff radius in pixels; keeps rendering local.
    pub trunc_radius_px: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            img: 16,
            t_tasks: 3,
            f_frames: 2,
            chunk_h: 4,
            chunks_per_episode: 5,
            a_max: 0.15,
            rho: 0.08,
            dwell_min: 2,
            expert_kp: 1.0,
            agent_sigma_px: 0.9,
            agent_amp: 1.0,
            target_sigma_px: 1.3,
            target_amp: 0.55,
            trunc_radius_px: 3.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img < 8 {
            return Err(Error::Config("img must be >= 8".into()));
        }
        if self.t_tasks == 0 || self.t_tasks > 3 {
            return Err(Error::Config("t_tasks must be in 1..=3".into()));
        }
        if self.f_frames == 0 || self.chunk_h == 0 || self.chunk_h % self.f_frames != 0 {
            return Err(Error::Config(
                "chunk_h must be a positive multiple of f_frames".into(),
            ));
        }
        if self.chunks_per_episode == 0 {
            return Err(Error::Config("chunks_per_episode must be positive".into()));
        }
        if !(self.a_max > 0.0 && self.rho > 0.0) {
            return Err(Error::Config("a_max and rho must be positive".into()));
        }
        Ok(())
    }

    /// Total micro-steps in one episode.
    pub fn episode_steps(&self) -> usize {
        self.chunk_h * self.chunks_per_episode
    }

    /// Stable hash of the environment configuration (dataset compatibility key).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("EnvConfig serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub agent_pos: [f64; 2],
    pub target_pos: [f64; 2],
    pub task_id: usize,
    /// Micro-steps taken since reset.
    pub step_count: usize,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[img, img]` grayscale, values in `[0, 1]`, row-major (row = y).
    pub pixels: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    /// `[H, 2]` per-step position deltas, each component in `[-a_max, a_max]`.
    pub deltas: Array,
}

impl ActionChunk {
    /// Build from raw values, clamping into the action box; non-finite input
    /// is an error.
    pub fn from_raw(deltas: Array, h: usize, a_max: f64) -> Result<Self> {
        if deltas.shape() != [h, 2] {
            return Err(Error::Shape(format!(
                "action chunk shape {:?}, want [{h}, 2]",
                deltas.shape()
            )));
        }
        if !deltas.all_finite() {
            return Err(Error::Env("non-finite action".into()));
        }
        let mut d = deltas;
        for v in d.data_mut() {
            *v = v.clamp(-a_max, a_max);
        }
        Ok(ActionChunk { deltas: d })
    }

    pub fn zeros(h: usize) -> Self {
        ActionChunk {
            deltas: Array::zeros(&[h, 2]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DemoEpisode {
    /// Initial observation followed by `f_frames` frames per chunk.
    pub frames: Vec<Frame>,
    pub actions: Vec<ActionChunk>,
    pub task_id: usize,
    pub success: bool,
}

/// One Stage-1 training sample: an observation, the chunk's future frames,
/// and the chunk's actions.
pub struct ChunkSample<'a> {
    pub obs: &'a Frame,
    pub video: &'a [Frame],
    pub action: &'a ActionChunk,
}

impl DemoEpisode {
    /// Split the episode into per-chunk training samples.
    pub fn chunk_samples(&self, f_frames: usize) -> Vec<ChunkSample<'_>> {
        (0..self.actions.len())
            .map(|c| ChunkSample {
                obs: &self.frames[c * f_frames],
                video: &self.frames[c * f_frames + 1..=c * f_frames + f_frames],
                action: &self.actions[c],
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DemoDataset {
    pub episodes: Vec<DemoEpisode>,
    pub env_config_hash: String,
}

// ---- dynamics ----

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn sample_in(rng: &mut Rng, lo: [f64; 2], hi: [f64; 2]) -> [f64; 2] {
    use rand::Rng as _;
    [
        lo[0] + (hi[0] - lo[0]) * rng.random::<f64>(),
        lo[1] + (hi[1] - lo[1]) * rng.random::<f64>(),
    ]
}

pub fn reset(cfg: &EnvConfig, task_id: usize, seed: u64) -> Result<EnvState> {
    if task_id >= cfg.t_tasks {
        return Err(Error::Env(format!(
            "task {task_id} out of range (t_tasks = {})",
            cfg.t_tasks
        )));
    }
    let mut r = rng::stream(seed, "env-reset", &[task_id as u64]);
    // Per-task geometry: reach-right starts left of center and targets the
    // right half, reach-left mirrors it, and the press task targets the
    // center box from a ring around it (never so close that the dwell is
    // satisfied at spawn, never so far that the episode cannot finish).
    let (agent, target) = match task_id {
        0 => (
            sample_in(&mut r, [0.25, 0.30], [0.40, 0.70]),
            sample_in(&mut r, [0.55, 0.30], [0.70, 0.70]),
        ),
        1 => (
            sample_in(&mut r, [0.60, 0.30], [0.75, 0.70]),
            sample_in(&mut r, [0.30, 0.30], [0.45, 0.70]),
        ),
        _ => {
            let target = sample_in(&mut r, [0.40, 0.40], [0.60, 0.60]);
            let agent = loop {
                let a = sample_in(&mut r, [0.15, 0.15], [0.85, 0.85]);
                let d = dist(a, target);
                if (0.20..=0.50).contains(&d) {
                    break a;
                }
            };
            (agent, target)
        }
    };
    Ok(EnvState {
        agent_pos: agent,
        target_pos: target,
        task_id,
        step_count: 0,
        rng_seed: seed,
    })
}

pub fn render(cfg: &EnvConfig, state: &EnvState) -> Frame {
    let n = cfg.img;
    let scale = (n - 1) as f64;
    let mut pixels = Array::zeros(&[n, n]);
    let blobs = [
        (state.target_pos, cfg.target_sigma_px, cfg.target_amp),
        (state.agent_pos, cfg.agent_sigma_px, cfg.agent_amp),
    ];
    for (pos, sigma, amp) in blobs {
        let cx = pos[0] * scale;
        let cy = pos[1] * scale;
        let r2max = cfg.trunc_radius_px * cfg.trunc_radius_px;
        let y0 = ((cy - cfg.trunc_radius_px).floor().max(0.0)) as usize;
        let y1 = ((cy + cfg.trunc_radius_px).ceil().min(scale)) as usize;
        let x0 = ((cx - cfg.trunc_radius_px).floor().max(0.0)) as usize;
        let x1 = ((cx + cfg.trunc_radius_px).ceil().min(scale)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 > r2max {
                    continue;
                }
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                let p = &mut pixels.data_mut()[y * n + x];
                // blobs combine by max so overlap never saturates oddly
                if v > *p {
                    *p = v.min(1.0);
                }
            }
        }
    }
    Frame { pixels }
}

/// Execute one chunk and additionally return the per-chunk future frames
/// (rendered every `chunk_h / f_frames` micro-steps) and every intermediate
/// state (for reward evaluation).
pub fn step_chunk_traced(
    cfg: &EnvConfig,
    state: &EnvState,
    chunk: &ActionChunk,
) -> Result<(EnvState, Vec<Frame>, Vec<EnvState>)> {
    if chunk.deltas.shape() != [cfg.chunk_h, 2] {
        return Err(Error::Shape(format!(
            "chunk shape {:?}, want [{}, 2]",
            chunk.deltas.shape(),
            cfg.chunk_h
        )));
    }
    if !chunk.deltas.all_finite() {
        return Err(Error::Env("non-finite action".into()));
    }
    let stride = cfg.chunk_h / cfg.f_frames;
    let mut cur = *state;
    let mut frames = Vec::with_capacity(cfg.f_frames);
    let mut states = Vec::with_capacity(cfg.chunk_h);
    for h in 0..cfg.chunk_h {
        let dx = chunk.deltas.data()[2 * h].clamp(-cfg.a_max, cfg.a_max);
        let dy = chunk.deltas.data()[2 * h + 1].clamp(-cfg.a_max, cfg.a_max);
        cur.agent_pos[0] = (cur.agent_pos[0] + dx).clamp(0.0, 1.0);
        cur.agent_pos[1] = (cur.agent_pos[1] + dy).clamp(0.0, 1.0);
        cur.step_count += 1;
        states.push(cur);
        if (h + 1) % stride == 0 {
            frames.push(render(cfg, &cur));
        }
    }
    Ok((cur, frames, states))
}

/// Execute one chunk; returns the new state and the final rendered frame.
pub fn step_chunk(cfg: &EnvConfig, state: &EnvState, chunk: &ActionChunk) -> Result<(EnvState, Frame)> {
    let (next, mut frames, _) = step_chunk_traced(cfg, state, chunk)?;
    let last = frames.pop().expect("f_frames >= 1");
    Ok((next, last))
}

/// Binary episodic reward over the full micro-step trajectory
/// (initial state first).
pub fn episode_reward(cfg: &EnvConfig, trajectory: &[EnvState]) -> Result<u8> {
    let last = trajectory
        .last()
        .ok_or_else(|| Error::Env("empty trajectory".into()))?;
    let ok = match last.task_id {
        2 => {
            // press: a run of at least dwell_min consecutive in-zone steps
            let mut run = 0usize;
            let mut best = 0usize;
            for s in trajectory.iter().skip(1) {
                if dist(s.agent_pos, s.target_pos) <= cfg.rho {
                    run += 1;
                    best = best.max(run);
                } else {
                    run = 0;
                }
            }
            best >= cfg.dwell_min
        }
        _ => dist(last.agent_pos, last.target_pos) <= cfg.rho,
    };
    Ok(u8::from(ok))
}

/// One proportional-controller expert chunk from the given position:
/// velocity toward the target, clipped to the action box, plus Gaussian
/// jitter of scale `noise_scale` (re-clamped by the chunk constructor).
pub fn expert_chunk(
    cfg: &EnvConfig,
    state: &EnvState,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<ActionChunk> {
    let mut pos = state.agent_pos;
    let mut deltas = Vec::with_capacity(cfg.chunk_h * 2);
    for _ in 0..cfg.chunk_h {
        let mut d = [0.0f64; 2];
        for c in 0..2 {
            let toward = cfg.expert_kp * (state.target_pos[c] - pos[c]);
            d[c] = toward.clamp(-cfg.a_max, cfg.a_max) + noise_scale * rng::normal(rng);
        }
        // track the clamped execution so later steps aim from the true position
        for c in 0..2 {
            let applied = d[c].clamp(-cfg.a_max, cfg.a_max);
            pos[c] = (pos[c] + applied).clamp(0.0, 1.0);
            deltas.push(d[c]);
        }
    }
    ActionChunk::from_raw(
        Array::from_vec(&[cfg.chunk_h, 2], deltas)?,
        cfg.chunk_h,
        cfg.a_max,
    )
}

/// Derive a 64-bit sub-seed from a root seed and coordinates.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in parts {
        h.update([0xa5]);
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Run one full expert episode; returns None when the expert failed the task.
fn expert_episode(
    cfg: &EnvConfig,
    task: usize,
    ep_seed: u64,
    noise_scale: f64,
) -> Result<Option<DemoEpisode>> {
    let state0 = reset(cfg, task, ep_seed)?;
    let mut noise_rng = rng::stream(ep_seed, "expert-jitter", &[]);
    let mut frames = vec![render(cfg, &state0)];
    let mut actions = Vec::with_capacity(cfg.chunks_per_episode);
    let mut states = vec![state0];
    let mut cur = state0;
    for _ in 0..cfg.chunks_per_episode {
        let chunk = expert_chunk(cfg, &cur, noise_scale, &mut noise_rng)?;
        let (next, chunk_frames, chunk_states) = step_chunk_traced(cfg, &cur, &chunk)?;
        frames.extend(chunk_frames);
        states.extend(chunk_states);
        actions.push(chunk);
        cur = next;
    }
    if episode_reward(cfg, &states)? == 1 {
        Ok(Some(DemoEpisode {
            frames,
            actions,
            task_id: task,
            success: true,
        }))
    } else {
        Ok(None)
    }
}

/// Generate `n` expert demonstrations, tasks round-robin, resampling failures.
/// Errors if the expert cannot fill the dataset within `10 n` attempts.
pub fn generate_demos(cfg: &EnvConfig, n: usize, noise_scale: f64, seed: u64) -> Result<DemoDataset> {
    if n == 0 {
        return Err(Error::Env("demo count must be positive".into()));
    }
    cfg.validate()?;
    let mut episodes = Vec::with_capacity(n);
    let mut attempts_total = 0usize;
    for i in 0..n {
        let task = i % cfg.t_tasks;
        let mut attempt = 0u64;
        let episode = loop {
            attempts_total += 1;
            if attempts_total > 10 * n {
                return Err(Error::Env(format!(
                    "expert success rate too low: {} attempts for {} demos \
                     (environment misconfigured?)",
                    attempts_total, n
                )));
            }
            let ep_seed = derive_seed(seed, &[i as u64, attempt]);
            if let Some(ep) = expert_episode(cfg, task, ep_seed, noise_scale)? {
                break ep;
            }
            attempt += 1;
        };
        episodes.push(episode);
    }
    Ok(DemoDataset {
        episodes,
        env_config_hash: cfg.config_hash(),
    })
}

// ---- dataset persistence ----

const DEMO_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DemoManifest {
    version: u32,
    n_episodes: usize,
    env_config_hash: String,
    episodes: Vec<DemoManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct DemoManifestEntry {
    file: String,
    task_id: usize,
    success: bool,
    sha256: String,
}

impl DemoDataset {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.episodes.len());
        for (i, ep) in self.episodes.iter().enumerate() {
            let file = format!("ep{i:05}.bin");
            let bytes = encode_episode(ep)?;
            let digest = hex::encode(Sha256::digest(&bytes));
            atomic_write(&dir.join(&file), &bytes)?;
            entries.push(DemoManifestEntry {
                file,
                task_id: ep.task_id,
                success: ep.success,
                sha256: digest,
            });
        }
        let manifest = DemoManifest {
            version: DEMO_VERSION,
            n_episodes: self.episodes.len(),
            env_config_hash: self.env_config_hash.clone(),
            episodes: entries,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        atomic_write(&dir.join("manifest.json"), json.as_bytes())?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: DemoManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != DEMO_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset version {}",
                manifest.version
            )));
        }
        let mut episodes = Vec::with_capacity(manifest.n_episodes);
        for entry in &manifest.episodes {
            let bytes = std::fs::read(dir.join(&entry.file))?;
            let digest = hex::encode(Sha256::digest(&bytes));
            if digest != entry.sha256 {
                return Err(Error::Dataset(format!(
                    "episode file {} corrupt (hash mismatch)",
                    entry.file
                )));
            }
            let ep = decode_episode(&bytes)?;
            if ep.task_id != entry.task_id || ep.success != entry.success {
                return Err(Error::Dataset(format!(
                    "episode file {} disagrees with manifest",
                    entry.file
                )));
            }
            episodes.push(ep);
        }
        Ok(DemoDataset {
            episodes,
            env_config_hash: manifest.env_config_hash,
        })
    }
}

fn encode_episode(ep: &DemoEpisode) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DEMO_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ep.task_id as u64).to_le_bytes());
    buf.push(u8::from(ep.success));
    write_string(&mut buf, "frames");
    buf.extend_from_slice(&(ep.frames.len() as u64).to_le_bytes());
    for f in &ep.frames {
        write_array(&mut buf, &f.pixels);
    }
    write_string(&mut buf, "actions");
    buf.extend_from_slice(&(ep.actions.len() as u64).to_le_bytes());
    for a in &ep.actions {
        write_array(&mut buf, &a.deltas);
    }
    Ok(buf)
}

fn decode_episode(bytes: &[u8]) -> Result<DemoEpisode> {
    let mut r = bytes;
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)
        .map_err(|_| Error::Dataset("truncated episode".into()))?;
    if u32::from_le_bytes(vb) != DEMO_VERSION {
        return Err(Error::Dataset("bad episode version".into()));
    }
    let task_id = read_u64(&mut r)? as usize;
    let mut sb = [0u8; 1];
    r.read_exact(&mut sb)
        .map_err(|_| Error::Dataset("truncated episode".into()))?;
    let success = sb[0] != 0;
    let tag = read_string(&mut r)?;
    if tag != "frames" {
        return Err(Error::Dataset("missing frames section".into()));
    }
    let n_frames = read_u64(&mut r)? as usize;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        frames.push(Frame {
            pixels: read_array(&mut r)?,
        });
    }
    let tag = read_string(&mut r)?;
    if tag != "actions" {
        return Err(Error::Dataset("missing actions section".into()));
    }
    let n_actions = read_u64(&mut r)? as usize;
    let mut actions = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        actions.push(ActionChunk {
            deltas: read_array(&mut r)?,
        });
    }
    if !r.is_empty() {
        return Err(Error::Dataset("trailing bytes in episode".into()));
    }
    Ok(DemoEpisode {
        frames,
        actions,
        task_id,
        success,
    })
}
