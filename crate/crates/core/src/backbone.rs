//! Joint video–action denoiser: a Mixture-of-Transformers where all tokens
//! share self-attention but each modality owns its feed-forward expert.
//!
//! Token layout (contiguous, in this order):
//! `[ task | obs patches | frame-1 patches | … | frame-F patches | action steps ]`.
//! Every token carries a timestep; conditioning is adaptive layer-norm with
//! zero-initialized modulation and velocity heads, so an untrained model
//! predicts exactly zero velocity.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, NodeId, Tape};
use crate::checkpoint;
use crate::flow::{NoisedChunk, TimestepVector};
use crate::params::{Bound, ParamSet};
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub img: usize,
    /// Action steps per chunk.
    pub chunk_h: usize,
    /// Predicted video frames per chunk.
    pub f_frames: usize,
    pub t_tasks: usize,
    pub ffn_mult: usize,
    /// Skip the attention sublayer entirely (diagnostic configs only); the
    /// model becomes a per-token MLP stack, isolating the FFN routing.
    pub skip_attention: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            patch_size: 4,
            img: 16,
            chunk_h: 4,
            f_frames: 2,
            t_tasks: 3,
            ffn_mult: 4,
            skip_attention: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.img % self.patch_size != 0 {
            return Err(Error::Config("img must be divisible by patch_size".into()));
        }
        if self.n_layers == 0 || self.f_frames == 0 || self.chunk_h == 0 || self.t_tasks == 0 {
            return Err(Error::Config("all backbone dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        let g = self.img / self.patch_size;
        g * g
    }

    /// Total sequence length: task + obs + F frames + H action steps.
    pub fn n_tokens(&self) -> usize {
        1 + self.tokens_per_frame() * (1 + self.f_frames) + self.chunk_h
    }

    /// Tokens routed through the video expert (task, obs, video frames).
    fn video_expert_rows(&self) -> usize {
        1 + self.tokens_per_frame() * (1 + self.f_frames)
    }

    fn frame_token_start(&self, f: usize) -> usize {
        1 + self.tokens_per_frame() * (1 + f)
    }

    fn action_token_start(&self) -> usize {
        self.video_expert_rows()
    }

    /// Distinct timestep slots: slot 0 for task+obs (t = 0), one per video
    /// frame, one for the action.
    fn n_time_slots(&self) -> usize {
        self.f_frames + 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Task,
    Obs,
    Video(usize),
    Action(usize),
}

/// Embedded input sequence plus per-token timestep metadata.
pub struct TokenSequence {
    /// `[N, d_model]` token embeddings on the tape.
    pub tokens: NodeId,
    /// Per-token index into `slot_times`.
    pub slots: Arc<Vec<usize>>,
    /// Timestep of each slot: `[0, t_1, …, t_F, t_a]`.
    pub slot_times: Vec<f64>,
    pub tags: Vec<Modality>,
}

impl TokenSequence {
    /// The timestep attached to each token.
    pub fn token_times(&self) -> Vec<f64> {
        self.slots.iter().map(|&s| self.slot_times[s]).collect()
    }
}

/// Borrowed view of one chunk's denoising state.
pub struct ChunkState<'a> {
    pub obs: &'a Array,
    pub video: Vec<&'a Array>,
    pub action: &'a Array,
    pub times: &'a TimestepVector,
}

impl<'a> ChunkState<'a> {
    pub fn of_noised(chunk: &'a NoisedChunk) -> ChunkState<'a> {
        ChunkState {
            obs: &chunk.obs.pixels,
            video: chunk.video.iter().map(|f| &f.pixels).collect(),
            action: &chunk.action,
            times: &chunk.times,
        }
    }
}

/// Final velocity estimates in input coordinates.
#[derive(Clone, Debug)]
pub struct VelocityPrediction {
    /// One `[img, img]` array per video frame.
    pub video_vel: Vec<Array>,
    /// `[H, 2]`.
    pub action_vel: Array,
}

/// Per-layer mean attention mass from action-token queries to each video
/// frame's keys (and to everything else combined). Empty when the layer has
/// no attention sublayer.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AttentionRecord {
    pub per_layer: Vec<LayerAttention>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerAttention {
    pub frame_mass: Vec<f64>,
    pub other_mass: f64,
}

/// Tape outputs of one forward pass (patch-space video velocities).
pub struct ForwardNodes {
    /// `[F · tokens_per_frame, patch²]`.
    pub video_patch_vel: NodeId,
    /// `[H, 2]`.
    pub action_vel: NodeId,
    pub attention: AttentionRecord,
}

// ---- parameter construction ----

fn normal_array(shape: &[usize], std: f64, rng: &mut Rng) -> Array {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| std * rng::normal(rng))
        .collect();
    Array::from_vec(shape, data).expect("shape/len agree")
}

/// Create the backbone parameter set.
///
/// With `raw_init = false` (canonical), all modulation projections and both
/// velocity heads start at zero, so the initial model is the zero-velocity
/// function. `raw_init = true` draws every parameter from N(0, 0.02²) —
/// used by gradient checks that need signal through every pathway.
pub fn init_params(cfg: &BackboneConfig, seed: u64, raw_init: bool) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "backbone-init", &[]);
    let mut ps = ParamSet::new();
    let d = cfg.d_model;
    let p2 = cfg.patch_size * cfg.patch_size;
    let ff = cfg.ffn_mult * d;
    let std = 0.02;
    let reg = |ps: &mut ParamSet, name: &str, shape: &[usize], zero: bool, rng: &mut Rng| {
        let v = if zero && !raw_init {
            Array::zeros(shape)
        } else {
            normal_array(shape, std, rng)
        };
        ps.register(name, v).expect("unique param names");
    };

    reg(&mut ps, "type_embed", &[3, d], false, &mut rng);
    reg(&mut ps, "patch_proj", &[p2, d], false, &mut rng);
    reg(&mut ps, "patch_bias", &[d], true, &mut rng);
    reg(&mut ps, "action_proj", &[2, d], false, &mut rng);
    reg(&mut ps, "action_bias", &[d], true, &mut rng);
    reg(&mut ps, "frame_pos", &[cfg.f_frames + 1, d], false, &mut rng);
    reg(&mut ps, "spatial_pos", &[cfg.tokens_per_frame(), d], false, &mut rng);
    reg(&mut ps, "action_pos", &[cfg.chunk_h, d], false, &mut rng);
    reg(&mut ps, "task_embed", &[cfg.t_tasks, d], false, &mut rng);
    reg(&mut ps, "time_w1", &[d, d], false, &mut rng);
    reg(&mut ps, "time_b1", &[d], true, &mut rng);
    reg(&mut ps, "time_w2", &[d, d], false, &mut rng);
    reg(&mut ps, "time_b2", &[d], true, &mut rng);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        for w in ["wq", "wk", "wv", "wo"] {
            reg(&mut ps, &p(w), &[d, d], false, &mut rng);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            reg(&mut ps, &p(b), &[d], true, &mut rng);
        }
        reg(&mut ps, &p("mod_w"), &[d, 6 * d], true, &mut rng);
        reg(&mut ps, &p("mod_b"), &[6 * d], true, &mut rng);
        for expert in ["video", "action"] {
            reg(&mut ps, &p(&format!("ffn_{expert}_w1")), &[d, ff], false, &mut rng);
            reg(&mut ps, &p(&format!("ffn_{expert}_b1")), &[ff], true, &mut rng);
            reg(&mut ps, &p(&format!("ffn_{expert}_w2")), &[ff, d], false, &mut rng);
            reg(&mut ps, &p(&format!("ffn_{expert}_b2")), &[d], true, &mut rng);
        }
    }
    reg(&mut ps, "final_mod_w", &[d, 2 * d], true, &mut rng);
    reg(&mut ps, "final_mod_b", &[2 * d], true, &mut rng);
    reg(&mut ps, "video_head_w", &[d, p2], true, &mut rng);
    reg(&mut ps, "video_head_b", &[p2], true, &mut rng);
    reg(&mut ps, "action_head_w", &[d, 2], true, &mut rng);
    reg(&mut ps, "action_head_b", &[2], true, &mut rng);
    Ok(ps)
}

fn pnode(ps: &ParamSet, bound: &Bound, name: &str) -> NodeId {
    bound.node(ps.by_name(name).unwrap_or_else(|| panic!("missing param {name}")))
}

// ---- patch <-> pixel ----

/// Split an `[img, img]` frame into row-major `p × p` patches, each flattened
/// row-major: output `[ (img/p)², p² ]`.
pub fn patchify(pixels: &Array, p: usize) -> Result<Array> {
    let img = pixels.cols();
    if pixels.shape() != [img, img] || img % p != 0 {
        return Err(Error::Shape(format!(
            "cannot patchify {:?} with patch {p}",
            pixels.shape()
        )));
    }
    let g = img / p;
    let mut out = Vec::with_capacity(img * img);
    for py in 0..g {
        for px in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    out.push(pixels.data()[(py * p + dy) * img + (px * p + dx)]);
                }
            }
        }
    }
    Array::from_vec(&[g * g, p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Array, img: usize, p: usize) -> Result<Array> {
    let g = img / p;
    if patches.shape() != [g * g, p * p] {
        return Err(Error::Shape(format!(
            "cannot unpatchify {:?} to {img}x{img} with patch {p}",
            patches.shape()
        )));
    }
    let mut out = vec![0.0; img * img];
    for (t, patch) in patches.data().chunks(p * p).enumerate() {
        let (py, px) = (t / g, t % g);
        for dy in 0..p {
            for dx in 0..p {
                out[(py * p + dy) * img + (px * p + dx)] = patch[dy * p + dx];
            }
        }
    }
    Array::from_vec(&[img, img], out)
}

/// Patchify a list of frames and stack them: `[F · tokens_per_frame, p²]`.
pub fn patchify_stack(frames: &[&Array], p: usize) -> Result<Array> {
    let mut parts = Vec::new();
    let mut rows = 0;
    for f in frames {
        let pf = patchify(f, p)?;
        rows += pf.rows();
        parts.extend_from_slice(pf.data());
    }
    let cols = p * p;
    Array::from_vec(&[rows, cols], parts)
}

// ---- embedding ----

/// Sinusoidal features of one timestep, dimension `d` (cos half then sin
/// half), with t scaled so the full frequency range is exercised on [0,1].
pub(crate) fn time_features(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for i in 0..half {
        let freq = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
        out.push((1000.0 * t * freq).cos());
    }
    for i in 0..half {
        let freq = (-(10_000.0f64).ln() * i as f64 / half as f64).exp();
        out.push((1000.0 * t * freq).sin());
    }
    out
}

pub fn embed(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    ps: &ParamSet,
    bound: &Bound,
    state: &ChunkState,
    task_id: usize,
) -> Result<TokenSequence> {
    cfg.validate()?;
    if task_id >= cfg.t_tasks {
        return Err(Error::Config(format!("task {task_id} out of range")));
    }
    if state.video.len() != cfg.f_frames || state.times.video_t.len() != cfg.f_frames {
        return Err(Error::Shape(format!(
            "expected {} video frames, got {} (times {})",
            cfg.f_frames,
            state.video.len(),
            state.times.video_t.len()
        )));
    }
    if state.action.shape() != [cfg.chunk_h, 2] {
        return Err(Error::Shape(format!(
            "action state shape {:?}",
            state.action.shape()
        )));
    }
    let tpf = cfg.tokens_per_frame();
    let patch_proj = pnode(ps, bound, "patch_proj");
    let patch_bias = pnode(ps, bound, "patch_bias");
    let type_embed = pnode(ps, bound, "type_embed");
    let frame_pos = pnode(ps, bound, "frame_pos");
    let spatial_pos = pnode(ps, bound, "spatial_pos");

    // A frame block: patches → linear proj → + spatial + frame + type rows.
    let frame_block = |tape: &mut Tape, pixels: &Array, frame_slot: usize, ty: usize| -> Result<NodeId> {
        let patches = tape.constant(patchify(pixels, cfg.patch_size)?);
        let mut x = tape.matmul(patches, patch_proj)?;
        x = tape.add_rows(x, patch_bias)?;
        x = tape.add(x, spatial_pos)?;
        let fp = tape.gather_rows(frame_pos, Arc::new(vec![frame_slot; tpf]))?;
        x = tape.add(x, fp)?;
        let te = tape.gather_rows(type_embed, Arc::new(vec![ty; tpf]))?;
        tape.add(x, te)
    };

    let mut parts = Vec::with_capacity(2 + cfg.f_frames + 1);
    let task_embed = pnode(ps, bound, "task_embed");
    parts.push(tape.gather_rows(task_embed, Arc::new(vec![task_id]))?);
    parts.push(frame_block(tape, state.obs, 0, 0)?);
    for (f, frame) in state.video.iter().enumerate() {
        parts.push(frame_block(tape, frame, f + 1, 1)?);
    }
    // action tokens: per-step linear projection of the 2-D action
    let action_proj = pnode(ps, bound, "action_proj");
    let action_bias = pnode(ps, bound, "action_bias");
    let a = tape.constant(state.action.clone());
    let mut at = tape.matmul(a, action_proj)?;
    at = tape.add_rows(at, action_bias)?;
    at = tape.add(at, pnode(ps, bound, "action_pos"))?;
    let te = tape.gather_rows(type_embed, Arc::new(vec![2; cfg.chunk_h]))?;
    at = tape.add(at, te)?;
    parts.push(at);

    let tokens = tape.concat(0, &parts)?;

    let mut slots = Vec::with_capacity(cfg.n_tokens());
    let mut tags = Vec::with_capacity(cfg.n_tokens());
    slots.push(0);
    tags.push(Modality::Task);
    for _ in 0..tpf {
        slots.push(0);
        tags.push(Modality::Obs);
    }
    for f in 0..cfg.f_frames {
        for _ in 0..tpf {
            slots.push(f + 1);
            tags.push(Modality::Video(f));
        }
    }
    for h in 0..cfg.chunk_h {
        slots.push(cfg.f_frames + 1);
        tags.push(Modality::Action(h));
    }
    let mut slot_times = Vec::with_capacity(cfg.n_time_slots());
    slot_times.push(TimestepVector::OBS_T);
    slot_times.extend_from_slice(&state.times.video_t);
    slot_times.push(state.times.action_t);

    Ok(TokenSequence {
        tokens,
        slots: Arc::new(slots),
        slot_times,
        tags,
    })
}

// ---- forward ----

struct Conditioning {
    /// `[n_slots, d]` conditioning vectors on the tape.
    cond: NodeId,
}

fn build_conditioning(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    ps: &ParamSet,
    bound: &Bound,
    slot_times: &[f64],
) -> Result<Conditioning> {
    let d = cfg.d_model;
    let mut feats = Vec::with_capacity(slot_times.len() * d);
    for &t in slot_times {
        feats.extend(time_features(t, d));
    }
    let f = tape.constant(Array::from_vec(&[slot_times.len(), d], feats)?);
    let w1 = pnode(ps, bound, "time_w1");
    let b1 = pnode(ps, bound, "time_b1");
    let w2 = pnode(ps, bound, "time_w2");
    let b2 = pnode(ps, bound, "time_b2");
    let mut c = tape.matmul(f, w1)?;
    c = tape.add_rows(c, b1)?;
    c = tape.silu(c)?;
    c = tape.matmul(c, w2)?;
    c = tape.add_rows(c, b2)?;
    Ok(Conditioning { cond: c })
}

/// Gathered per-token modulation split into `[N, d]` chunks.
fn modulation(
    tape: &mut Tape,
    cond: &Conditioning,
    w: NodeId,
    b: NodeId,
    slots: &Arc<Vec<usize>>,
    n_chunks: usize,
    d: usize,
) -> Result<Vec<NodeId>> {
    let mut m = tape.matmul(cond.cond, w)?;
    m = tape.add_rows(m, b)?;
    let per_token = tape.gather_rows(m, slots.clone())?;
    (0..n_chunks)
        .map(|k| tape.slice_cols(per_token, k * d, d))
        .collect()
}

fn multi_head_attention(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    ps: &ParamSet,
    bound: &Bound,
    layer: usize,
    x: NodeId,
) -> Result<(NodeId, LayerAttention)> {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let p = |s: &str| format!("layer{layer}.{s}");
    let q = {
        let w = pnode(ps, bound, &p("wq"));
        let b = pnode(ps, bound, &p("bq"));
        let t = tape.matmul(x, w)?;
        tape.add_rows(t, b)?
    };
    let k = {
        let w = pnode(ps, bound, &p("wk"));
        let b = pnode(ps, bound, &p("bk"));
        let t = tape.matmul(x, w)?;
        tape.add_rows(t, b)?
    };
    let v = {
        let w = pnode(ps, bound, &p("wv"));
        let b = pnode(ps, bound, &p("bv"));
        let t = tape.matmul(x, w)?;
        tape.add_rows(t, b)?
    };
    let tpf = cfg.tokens_per_frame();
    let a_start = cfg.action_token_start();
    let mut frame_mass = vec![0.0; cfg.f_frames];
    let mut other_mass = 0.0;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let mut scores = tape.matmul_tb(qh, kh)?;
        scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = tape.softmax_rows(scores)?;
        // diagnostic: mean attention mass of action queries into each frame
        let pv = tape.value(probs);
        let n = pv.cols();
        for row in a_start..a_start + cfg.chunk_h {
            let r = &pv.data()[row * n..(row + 1) * n];
            let mut assigned = 0.0;
            for f in 0..cfg.f_frames {
                let s0 = cfg.frame_token_start(f);
                let m: f64 = r[s0..s0 + tpf].iter().sum();
                frame_mass[f] += m;
                assigned += m;
            }
            other_mass += r.iter().sum::<f64>() - assigned;
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    let denom = (cfg.n_heads * cfg.chunk_h) as f64;
    for m in &mut frame_mass {
        *m /= denom;
    }
    other_mass /= denom;
    let cat = tape.concat(1, &heads)?;
    let wo = pnode(ps, bound, &p("wo"));
    let bo = pnode(ps, bound, &p("bo"));
    let out = tape.matmul(cat, wo)?;
    let out = tape.add_rows(out, bo)?;
    Ok((
        out,
        LayerAttention {
            frame_mass,
            other_mass,
        },
    ))
}

/// Modality-routed FFN: rows `[0, video_expert_rows)` go through the video
/// expert, the rest through the action expert. Token order is preserved.
fn routed_ffn(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    ps: &ParamSet,
    bound: &Bound,
    layer: usize,
    x: NodeId,
) -> Result<NodeId> {
    let vrows = cfg.video_expert_rows();
    let total = cfg.n_tokens();
    let expert = |tape: &mut Tape, part: NodeId, name: &str| -> Result<NodeId> {
        let p = |s: &str| format!("layer{layer}.ffn_{name}_{s}");
        let w1 = pnode(ps, bound, &p("w1"));
        let b1 = pnode(ps, bound, &p("b1"));
        let w2 = pnode(ps, bound, &p("w2"));
        let b2 = pnode(ps, bound, &p("b2"));
        let mut h = tape.matmul(part, w1)?;
        h = tape.add_rows(h, b1)?;
        h = tape.gelu(h)?;
        h = tape.matmul(h, w2)?;
        tape.add_rows(h, b2)
    };
    let xv = tape.slice_rows(x, 0, vrows)?;
    let xa = tape.slice_rows(x, vrows, total - vrows)?;
    let yv = expert(tape, xv, "video")?;
    let ya = expert(tape, xa, "action")?;
    tape.concat(0, &[yv, ya])
}

const LN_EPS: f64 = 1e-6;

pub fn forward(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    ps: &ParamSet,
    bound: &Bound,
    seq: &TokenSequence,
) -> Result<ForwardNodes> {
    let d = cfg.d_model;
    let cond = build_conditioning(tape, cfg, ps, bound, &seq.slot_times)?;
    let mut h = seq.tokens;
    let mut per_layer = Vec::new();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let mw = pnode(ps, bound, &p("mod_w"));
        let mb = pnode(ps, bound, &p("mod_b"));
        let m = modulation(tape, &cond, mw, mb, &seq.slots, 6, d)?;
        let (shift1, scale1, gate1, shift2, scale2, gate2) =
            (m[0], m[1], m[2], m[3], m[4], m[5]);
        if !cfg.skip_attention {
            let ln1 = tape.layer_norm_rows(h, LN_EPS)?;
            let s1 = tape.add_scalar(scale1, 1.0)?;
            let mut x1 = tape.mul(ln1, s1)?;
            x1 = tape.add(x1, shift1)?;
            let (attn, rec) = multi_head_attention(tape, cfg, ps, bound, l, x1)?;
            let gated = tape.mul(gate1, attn)?;
            h = tape.add(h, gated)?;
            per_layer.push(rec);
        }
        let ln2 = tape.layer_norm_rows(h, LN_EPS)?;
        let s2 = tape.add_scalar(scale2, 1.0)?;
        let mut x2 = tape.mul(ln2, s2)?;
        x2 = tape.add(x2, shift2)?;
        let ffn = routed_ffn(tape, cfg, ps, bound, l, x2)?;
        let gated = tape.mul(gate2, ffn)?;
        h = tape.add(h, gated)?;
    }
    // final adaptive norm + zero-init heads
    let ln = tape.layer_norm_rows(h, LN_EPS)?;
    let fw = pnode(ps, bound, "final_mod_w");
    let fb = pnode(ps, bound, "final_mod_b");
    let m = modulation(tape, &cond, fw, fb, &seq.slots, 2, d)?;
    let (shift, scale) = (m[0], m[1]);
    let s = tape.add_scalar(scale, 1.0)?;
    let mut out = tape.mul(ln, s)?;
    out = tape.add(out, shift)?;

    let tpf = cfg.tokens_per_frame();
    let video = tape.slice_rows(out, 1 + tpf, tpf * cfg.f_frames)?;
    let vw = pnode(ps, bound, "video_head_w");
    let vb = pnode(ps, bound, "video_head_b");
    let mut video_patch_vel = tape.matmul(video, vw)?;
    video_patch_vel = tape.add_rows(video_patch_vel, vb)?;

    let action = tape.slice_rows(out, cfg.action_token_start(), cfg.chunk_h)?;
    let aw = pnode(ps, bound, "action_head_w");
    let ab = pnode(ps, bound, "action_head_b");
    let mut action_vel = tape.matmul(action, aw)?;
    action_vel = tape.add_rows(action_vel, ab)?;

    Ok(ForwardNodes {
        video_patch_vel,
        action_vel,
        attention: AttentionRecord { per_layer },
    })
}

/// Inference-mode forward pass: returns per-frame velocities in pixel space.
pub fn predict(
    cfg: &BackboneConfig,
    ps: &ParamSet,
    state: &ChunkState,
    task_id: usize,
) -> Result<(VelocityPrediction, AttentionRecord)> {
    let mut tape = Tape::inference();
    let bound = ps.bind_frozen(&mut tape);
    let seq = embed(&mut tape, cfg, ps, &bound, state, task_id)?;
    let nodes = forward(&mut tape, cfg, ps, &bound, &seq)?;
    let tpf = cfg.tokens_per_frame();
    let patches = tape.value(nodes.video_patch_vel);
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut video_vel = Vec::with_capacity(cfg.f_frames);
    for f in 0..cfg.f_frames {
        let sub = Array::from_vec(
            &[tpf, p2],
            patches.data()[f * tpf * p2..(f + 1) * tpf * p2].to_vec(),
        )?;
        video_vel.push(unpatchify(&sub, cfg.img, cfg.patch_size)?);
    }
    let action_vel = tape.value(nodes.action_vel).clone();
    Ok((
        VelocityPrediction {
            video_vel,
            action_vel,
        },
        nodes.attention,
    ))
}

// ---- checkpointing ----

pub fn save_backbone(path: &Path, cfg: &BackboneConfig, ps: &ParamSet) -> Result<()> {
    let cfg_json = serde_json::to_string(cfg)?;
    checkpoint::save(path, &cfg_json, ps)
}

pub fn load_backbone(path: &Path) -> Result<(BackboneConfig, ParamSet)> {
    let (cfg_json, arrays) = checkpoint::load(path)?;
    let cfg: BackboneConfig = serde_json::from_str(&cfg_json)
        .map_err(|e| Error::Checkpoint(format!("bad backbone config in checkpoint: {e}")))?;
    let mut ps = init_params(&cfg, 0, false)?;
    let mut by_name: BTreeMap<String, Array> = arrays.into_iter().collect();
    for (name, _) in init_params(&cfg, 0, false)?.iter() {
        let arr = by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing {name}")))?;
        let id = ps.by_name(name).expect("registered above");
        ps.set(id, arr)?;
    }
    if !by_name.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} unexpected arrays",
            by_name.len()
        )));
    }
    Ok((cfg, ps))
}

// ---- attention probe ----

#[derive(Clone, Debug, Serialize)]
pub struct BinStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Binned (timestep → action→frame attention) table, overall and split into
/// early/middle/late layer thirds.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeTable {
    pub bins: usize,
    /// `3 × bins`.
    pub groups: Vec<Vec<BinStat>>,
    pub overall: Vec<BinStat>,
    /// Raw pooled (t_f, mass) pairs across all layers.
    #[serde(skip)]
    pub pairs: Vec<(f64, f64)>,
    /// Raw (t_f, mass) pairs per layer-group (early/middle/late thirds).
    #[serde(skip)]
    pub group_pairs: Vec<Vec<(f64, f64)>>,
}

impl ProbeTable {
    /// Rank correlation between timestep and attention mass over raw pairs.
    pub fn overall_spearman(&self) -> Result<f64> {
        let (ts, ms): (Vec<f64>, Vec<f64>) = self.pairs.iter().copied().unzip();
        crate::stats::spearman_rho(&ts, &ms)
    }

    /// Rank correlation within one layer-group.
    pub fn group_spearman(&self, group: usize) -> Result<f64> {
        let pairs = self
            .group_pairs
            .get(group)
            .ok_or_else(|| Error::Config(format!("no layer group {group}")))?;
        let (ts, ms): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        crate::stats::spearman_rho(&ts, &ms)
    }
}

fn bin_stats(pairs: &[(f64, f64)], bins: usize) -> Vec<BinStat> {
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for &(t, m) in pairs {
        let b = ((t * bins as f64) as usize).min(bins - 1);
        acc[b].push(m);
    }
    acc.into_iter()
        .map(|xs| BinStat {
            mean: crate::stats::mean(&xs),
            std: crate::stats::pop_std(&xs),
            count: xs.len(),
        })
        .collect()
}

/// Probe action→video attention as a function of each frame's noise level.
/// Every chunk sample in the dataset is noised at freshly drawn independent
/// timesteps and run through the (frozen) backbone once.
pub fn attention_probe(
    cfg: &BackboneConfig,
    ps: &ParamSet,
    dataset: &crate::env::DemoDataset,
    bins: usize,
    seed: u64,
) -> Result<ProbeTable> {
    if bins < 2 {
        return Err(Error::Config("probe needs bins >= 2".into()));
    }
    if cfg.skip_attention {
        return Err(Error::Config("cannot probe attention of an attention-free config".into()));
    }
    let mut rng = rng::stream(seed, "attention-probe", &[]);
    let mut group_pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 3];
    let mut all_pairs = Vec::new();
    for ep in &dataset.episodes {
        for sample in ep.chunk_samples(cfg.f_frames) {
            let times = crate::flow::sample_independent_times(cfg.f_frames, &mut rng);
            let chunk =
                crate::flow::noise_chunk(sample.obs, sample.video, sample.action, &times, &mut rng)?;
            let (_, record) = predict(cfg, ps, &ChunkState::of_noised(&chunk), ep.task_id)?;
            for (l, layer) in record.per_layer.iter().enumerate() {
                let group = (l * 3) / cfg.n_layers;
                for f in 0..cfg.f_frames {
                    let pair = (times.video_t[f], layer.frame_mass[f]);
                    group_pairs[group].push(pair);
                    all_pairs.push(pair);
                }
            }
        }
    }
    Ok(ProbeTable {
        bins,
        groups: group_pairs.iter().map(|ps| bin_stats(ps, bins)).collect(),
        overall: bin_stats(&all_pairs, bins),
        pairs: all_pairs,
        group_pairs,
    })
}
