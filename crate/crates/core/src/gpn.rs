//! Gating Policy Network: looks at the partially denoised video frames (plus
//! the clean observation and the per-frame timesteps) and emits a
//! squashed-Gaussian distribution over per-frame relative denoising scales
//! r ∈ (0,2)^F. r_f = 1 reproduces the shared schedule; r_f < 1 slows a
//! frame down, r_f > 1 speeds it up.
//!
//! Per-frame pipeline: strided conv encoder → pooled per-frame token →
//! channel-attention reweighting → gated fusion with the observation token →
//! small pre-norm transformer over the frame tokens → concat with a timestep
//! embedding → attention-pooled summary → actor MLP → μ. The log-std is a
//! learned state-independent vector clamped to [−5, 2].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar, softplus_scalar, Array, NodeId, Tape};
use crate::backbone::time_features;
use crate::checkpoint;
use crate::flow::TimestepVector;
use crate::params::{Bound, ParamSet};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const LOGSTD_LO: f64 = -5.0;
pub const LOGSTD_HI: f64 = 2.0;
const LN_EPS: f64 = 1e-6;
const GN_EPS: f64 = 1e-5;
const LN_2PI: f64 = 1.8378770664093453; // ln(2π)

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GPNConfig {
    /// Per-latent token width D.
    pub token_dim: usize,
    /// Channels of the first conv; the second conv doubles this.
    pub conv_channels: usize,
    pub gn_groups: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub logstd_init: f64,
    pub img: usize,
    pub f_frames: usize,
}

impl Default for GPNConfig {
    fn default() -> Self {
        GPNConfig {
            token_dim: 64,
            conv_channels: 8,
            gn_groups: 4,
            encoder_layers: 3,
            encoder_heads: 8,
            logstd_init: -0.5,
            img: 16,
            f_frames: 2,
        }
    }
}

impl GPNConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.token_dim;
        if d == 0 || d % self.encoder_heads != 0 || d % 4 != 0 || d % 2 != 0 {
            return Err(Error::Config(
                "token_dim must be a positive multiple of 4 and of encoder_heads".into(),
            ));
        }
        let c1 = self.conv_channels;
        if c1 == 0 || c1 % self.gn_groups != 0 || (2 * c1) % self.gn_groups != 0 {
            return Err(Error::Config(
                "conv_channels and 2*conv_channels must be divisible by gn_groups".into(),
            ));
        }
        if self.img < 8 {
            return Err(Error::Config(
                "img must be >= 8 (two stride-2 convs need at least 8 pixels)".into(),
            ));
        }
        if self.f_frames == 0 || self.encoder_layers == 0 {
            return Err(Error::Config("f_frames and encoder_layers must be positive".into()));
        }
        Ok(())
    }
}

/// What the gating policy observes at one denoising step: the clean
/// observation followed by the F current video latents, and the timestep
/// vector. Only `times.video_t` conditions the policy; the action timestep
/// is deliberately not an input.
#[derive(Clone, Debug)]
pub struct GatingState {
    /// F+1 arrays of shape `[img, img]`, observation first.
    pub latents: Vec<Array>,
    pub times: TimestepVector,
}

impl GatingState {
    pub fn validate(&self, cfg: &GPNConfig) -> Result<()> {
        if self.latents.len() != cfg.f_frames + 1 {
            return Err(Error::Shape(format!(
                "gating state has {} latents, want {}",
                self.latents.len(),
                cfg.f_frames + 1
            )));
        }
        for l in &self.latents {
            if l.shape() != [cfg.img, cfg.img] {
                return Err(Error::Shape(format!("latent shape {:?}", l.shape())));
            }
        }
        if self.times.video_t.len() != cfg.f_frames {
            return Err(Error::Shape("times/frames mismatch".into()));
        }
        Ok(())
    }
}

/// A sampled gating decision.
#[derive(Clone, Debug)]
pub struct GatingAction {
    /// Per-frame relative scales in (0,2).
    pub r: Vec<f64>,
    /// Pre-squash Gaussian draws, r = 2·sigmoid(u).
    pub u: Vec<f64>,
    /// Joint log-density of r (sum over frames).
    pub log_prob: f64,
    /// Per-frame log-densities (they sum to `log_prob`).
    pub log_prob_frames: Vec<f64>,
}

// ---- parameters ----

fn normal_array(shape: &[usize], std: f64, rng: &mut Rng) -> Array {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| std * rng::normal(rng))
        .collect();
    Array::from_vec(shape, data).expect("shape/len agree")
}

/// Create the GPN parameter set. Canonical init (`raw_init = false`) zeroes
/// the final actor layer so the starting policy is exactly r ≡ 1 in the
/// deterministic sense (μ = 0); `raw_init = true` randomizes everything for
/// gradient checks.
pub fn init_params(cfg: &GPNConfig, seed: u64, raw_init: bool) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "gpn-init", &[]);
    let mut ps = ParamSet::new();
    let d = cfg.token_dim;
    let c1 = cfg.conv_channels;
    let c2 = 2 * c1;
    let f = cfg.f_frames;
    let std = 0.05;
    let reg = |ps: &mut ParamSet, name: &str, shape: &[usize], mode: Init, rng: &mut Rng| {
        let v = match mode {
            Init::Random => normal_array(shape, std, rng),
            Init::Zero if raw_init => normal_array(shape, std, rng),
            Init::Zero => Array::zeros(shape),
            Init::Ones => Array::filled(shape, 1.0),
            Init::Const(c) => Array::filled(shape, c),
        };
        ps.register(name, v).expect("unique param names");
    };
    #[derive(Clone, Copy)]
    enum Init {
        Random,
        Zero,
        Ones,
        Const(f64),
    }

    reg(&mut ps, "conv1_w", &[c1, 1, 3, 3], Init::Random, &mut rng);
    reg(&mut ps, "conv1_b", &[c1], Init::Zero, &mut rng);
    reg(&mut ps, "gn1_g", &[c1], Init::Ones, &mut rng);
    reg(&mut ps, "gn1_b", &[c1], Init::Zero, &mut rng);
    reg(&mut ps, "conv2_w", &[c2, c1, 3, 3], Init::Random, &mut rng);
    reg(&mut ps, "conv2_b", &[c2], Init::Zero, &mut rng);
    reg(&mut ps, "gn2_g", &[c2], Init::Ones, &mut rng);
    reg(&mut ps, "gn2_b", &[c2], Init::Zero, &mut rng);
    reg(&mut ps, "pool_att_w", &[1, c2], Init::Random, &mut rng);
    reg(&mut ps, "enc_proj_w", &[3 * c2, d], Init::Random, &mut rng);
    reg(&mut ps, "enc_proj_b", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "chatt_w1", &[d, d / 4], Init::Random, &mut rng);
    reg(&mut ps, "chatt_b1", &[d / 4], Init::Zero, &mut rng);
    reg(&mut ps, "chatt_w2", &[d / 4, d], Init::Random, &mut rng);
    reg(&mut ps, "chatt_b2", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "fuse_wg", &[2 * d, d], Init::Random, &mut rng);
    reg(&mut ps, "fuse_bg", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "fuse_wv", &[d, d], Init::Random, &mut rng);
    reg(&mut ps, "frame_pos", &[f, d], Init::Random, &mut rng);
    for l in 0..cfg.encoder_layers {
        let p = |s: &str| format!("enc{l}.{s}");
        reg(&mut ps, &p("ln1_g"), &[d], Init::Ones, &mut rng);
        reg(&mut ps, &p("ln1_b"), &[d], Init::Zero, &mut rng);
        for w in ["wq", "wk", "wv", "wo"] {
            reg(&mut ps, &p(w), &[d, d], Init::Random, &mut rng);
        }
        for b in ["bq", "bk", "bv", "bo"] {
            reg(&mut ps, &p(b), &[d], Init::Zero, &mut rng);
        }
        reg(&mut ps, &p("ln2_g"), &[d], Init::Ones, &mut rng);
        reg(&mut ps, &p("ln2_b"), &[d], Init::Zero, &mut rng);
        reg(&mut ps, &p("ffn_w1"), &[d, 4 * d], Init::Random, &mut rng);
        reg(&mut ps, &p("ffn_b1"), &[4 * d], Init::Zero, &mut rng);
        reg(&mut ps, &p("ffn_w2"), &[4 * d, d], Init::Random, &mut rng);
        reg(&mut ps, &p("ffn_b2"), &[d], Init::Zero, &mut rng);
    }
    reg(&mut ps, "enc_ln_g", &[d], Init::Ones, &mut rng);
    reg(&mut ps, "enc_ln_b", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "time_w1", &[d, d], Init::Random, &mut rng);
    reg(&mut ps, "time_b1", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "time_w2", &[d, d], Init::Random, &mut rng);
    reg(&mut ps, "time_b2", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "comb_ln_g", &[2 * d], Init::Ones, &mut rng);
    reg(&mut ps, "comb_ln_b", &[2 * d], Init::Zero, &mut rng);
    reg(&mut ps, "comb_w", &[2 * d, d], Init::Random, &mut rng);
    reg(&mut ps, "comb_b", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "score_w1", &[d, d / 4], Init::Random, &mut rng);
    reg(&mut ps, "score_b1", &[d / 4], Init::Zero, &mut rng);
    reg(&mut ps, "score_w2", &[d / 4, 1], Init::Random, &mut rng);
    reg(&mut ps, "score_b2", &[1], Init::Zero, &mut rng);
    reg(&mut ps, "actor_w1", &[(f + 1) * d, d], Init::Random, &mut rng);
    reg(&mut ps, "actor_b1", &[d], Init::Zero, &mut rng);
    reg(&mut ps, "actor_w2", &[d, d], Init::Random, &mut rng);
    reg(&mut ps, "actor_b2", &[d], Init::Zero, &mut rng);
    // zero final layer: the fresh policy must start at μ = 0 (r = 1)
    reg(&mut ps, "actor_w3", &[d, f], Init::Zero, &mut rng);
    reg(&mut ps, "actor_b3", &[f], Init::Zero, &mut rng);
    reg(&mut ps, "logstd", &[1, f], Init::Const(cfg.logstd_init), &mut rng);
    Ok(ps)
}

fn pnode(ps: &ParamSet, bound: &Bound, name: &str) -> NodeId {
    bound.node(ps.by_name(name).unwrap_or_else(|| panic!("missing param {name}")))
}

// ---- encoder ----

fn identity_perm(len: usize) -> Arc<Vec<usize>> {
    Arc::new((0..len).collect())
}

/// Encode one `[img, img]` latent into a D-dim token (as a `[1, D]` row).
fn encode_one(
    tape: &mut Tape,
    cfg: &GPNConfig,
    ps: &ParamSet,
    bound: &Bound,
    latent: NodeId,
) -> Result<NodeId> {
    let img = cfg.img;
    let c2 = 2 * cfg.conv_channels;
    let x = tape.permute(latent, identity_perm(img * img), &[1, img, img])?;
    let mut h = tape.conv2d(
        x,
        pnode(ps, bound, "conv1_w"),
        pnode(ps, bound, "conv1_b"),
        2,
        1,
    )?;
    h = tape.group_norm(
        h,
        pnode(ps, bound, "gn1_g"),
        pnode(ps, bound, "gn1_b"),
        cfg.gn_groups,
        GN_EPS,
    )?;
    h = tape.silu(h)?;
    h = tape.conv2d(
        h,
        pnode(ps, bound, "conv2_w"),
        pnode(ps, bound, "conv2_b"),
        2,
        1,
    )?;
    h = tape.group_norm(
        h,
        pnode(ps, bound, "gn2_g"),
        pnode(ps, bound, "gn2_b"),
        cfg.gn_groups,
        GN_EPS,
    )?;
    h = tape.silu(h)?;
    let spatial = tape.value(h).shape()[1] * tape.value(h).shape()[2];
    // three pooling branches over the spatial positions
    let mean_p = tape.mean_pool_spatial(h)?;
    let max_p = tape.max_pool_spatial(h)?;
    let flat = tape.permute(h, identity_perm(c2 * spatial), &[c2, spatial])?;
    let mut scores = tape.matmul(pnode(ps, bound, "pool_att_w"), flat)?;
    scores = tape.softmax_rows(scores)?;
    let att_p = tape.matmul_tb(scores, flat)?;
    let pooled = tape.concat(1, &[mean_p, max_p, att_p])?;
    let proj = tape.matmul(pooled, pnode(ps, bound, "enc_proj_w"))?;
    tape.add_rows(proj, pnode(ps, bound, "enc_proj_b"))
}

/// Encode all latents: returns `[F+1, D]`, observation token first.
pub fn encode_latents(
    tape: &mut Tape,
    cfg: &GPNConfig,
    ps: &ParamSet,
    bound: &Bound,
    latent_nodes: &[NodeId],
) -> Result<NodeId> {
    if latent_nodes.len() != cfg.f_frames + 1 {
        return Err(Error::Shape(format!(
            "need {} latents, got {}",
            cfg.f_frames + 1,
            latent_nodes.len()
        )));
    }
    let tokens: Vec<NodeId> = latent_nodes
        .iter()
        .map(|&l| encode_one(tape, cfg, ps, bound, l))
        .collect::<Result<_>>()?;
    tape.concat(0, &tokens)
}

/// Gated residual fusion of the observation token into each frame token:
/// `f_f + sigmoid(W_g [f_f; x_0] + b_g) ⊙ (W_v x_0)`.
pub fn gated_fusion(
    tape: &mut Tape,
    ps: &ParamSet,
    bound: &Bound,
    frame_tokens: NodeId,
    obs_token: NodeId,
) -> Result<NodeId> {
    let f = tape.value(frame_tokens).rows();
    let obs_rep = tape.gather_rows(obs_token, Arc::new(vec![0; f]))?;
    let both = tape.concat(1, &[frame_tokens, obs_rep])?;
    let mut gate = tape.matmul(both, pnode(ps, bound, "fuse_wg"))?;
    gate = tape.add_rows(gate, pnode(ps, bound, "fuse_bg"))?;
    gate = tape.sigmoid(gate)?;
    let value = tape.matmul(obs_token, pnode(ps, bound, "fuse_wv"))?;
    let value_rep = tape.gather_rows(value, Arc::new(vec![0; f]))?;
    let update = tape.mul(gate, value_rep)?;
    tape.add(frame_tokens, update)
}

fn layer_norm_affine(
    tape: &mut Tape,
    x: NodeId,
    g: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let n = tape.layer_norm_rows(x, LN_EPS)?;
    let s = tape.mul_rows(n, g)?;
    tape.add_rows(s, b)
}

fn encoder_attention(
    tape: &mut Tape,
    cfg: &GPNConfig,
    ps: &ParamSet,
    bound: &Bound,
    layer: usize,
    x: NodeId,
) -> Result<NodeId> {
    let d = cfg.token_dim;
    let dh = d / cfg.encoder_heads;
    let p = |s: &str| format!("enc{layer}.{s}");
    let lin = |tape: &mut Tape, w: &str, b: &str| -> Result<NodeId> {
        let t = tape.matmul(x, pnode(ps, bound, &p(w)))?;
        tape.add_rows(t, pnode(ps, bound, &p(b)))
    };
    let q = lin(tape, "wq", "bq")?;
    let k = lin(tape, "wk", "bk")?;
    let v = lin(tape, "wv", "bv")?;
    let mut heads = Vec::with_capacity(cfg.encoder_heads);
    for h in 0..cfg.encoder_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let mut s = tape.matmul_tb(qh, kh)?;
        s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let pr = tape.softmax_rows(s)?;
        heads.push(tape.matmul(pr, vh)?);
    }
    let cat = tape.concat(1, &heads)?;
    let o = tape.matmul(cat, pnode(ps, bound, &p("wo")))?;
    tape.add_rows(o, pnode(ps, bound, &p("bo")))
}

/// Tape handles produced by one policy forward pass.
pub struct PolicyNodes {
    /// `[1, F]` pre-squash mean.
    pub mu: NodeId,
    /// `[1, F]` clamped log standard deviation.
    pub logstd: NodeId,
    /// `[1, F]` standard deviation.
    pub sigma: NodeId,
    /// `[1, F]` attention-pooling weights over frames (diagnostic).
    pub pool_w: NodeId,
}

/// Full differentiable policy pass from externally supplied latent nodes
/// (constants during rollouts, leaves in probe tests).
pub fn policy_forward_nodes(
    tape: &mut Tape,
    cfg: &GPNConfig,
    ps: &ParamSet,
    bound: &Bound,
    latent_nodes: &[NodeId],
    video_t: &[f64],
) -> Result<PolicyNodes> {
    cfg.validate()?;
    if video_t.len() != cfg.f_frames {
        return Err(Error::Shape("video_t length".into()));
    }
    let d = cfg.token_dim;
    let f = cfg.f_frames;
    let tokens = encode_latents(tape, cfg, ps, bound, latent_nodes)?;
    let obs_token = tape.slice_rows(tokens, 0, 1)?;
    let mut frames = tape.slice_rows(tokens, 1, f)?;

    // channel attention: per-token sigmoid reweighting of the D channels
    let mut ca = tape.matmul(frames, pnode(ps, bound, "chatt_w1"))?;
    ca = tape.add_rows(ca, pnode(ps, bound, "chatt_b1"))?;
    ca = tape.silu(ca)?;
    ca = tape.matmul(ca, pnode(ps, bound, "chatt_w2"))?;
    ca = tape.add_rows(ca, pnode(ps, bound, "chatt_b2"))?;
    ca = tape.sigmoid(ca)?;
    frames = tape.mul(frames, ca)?;

    frames = gated_fusion(tape, ps, bound, frames, obs_token)?;
    frames = tape.add(frames, pnode(ps, bound, "frame_pos"))?;

    // pre-norm transformer over the F frame tokens
    let mut x = frames;
    for l in 0..cfg.encoder_layers {
        let p = |s: &str| format!("enc{l}.{s}");
        let a_in = layer_norm_affine(
            tape,
            x,
            pnode(ps, bound, &p("ln1_g")),
            pnode(ps, bound, &p("ln1_b")),
        )?;
        let a = encoder_attention(tape, cfg, ps, bound, l, a_in)?;
        x = tape.add(x, a)?;
        let m_in = layer_norm_affine(
            tape,
            x,
            pnode(ps, bound, &p("ln2_g")),
            pnode(ps, bound, &p("ln2_b")),
        )?;
        let mut m = tape.matmul(m_in, pnode(ps, bound, &p("ffn_w1")))?;
        m = tape.add_rows(m, pnode(ps, bound, &p("ffn_b1")))?;
        m = tape.gelu(m)?;
        m = tape.matmul(m, pnode(ps, bound, &p("ffn_w2")))?;
        m = tape.add_rows(m, pnode(ps, bound, &p("ffn_b2")))?;
        x = tape.add(x, m)?;
    }
    let z = layer_norm_affine(
        tape,
        x,
        pnode(ps, bound, "enc_ln_g"),
        pnode(ps, bound, "enc_ln_b"),
    )?;

    // parallel timestep pathway
    let mut feats = Vec::with_capacity(f * d);
    for &t in video_t {
        feats.extend(time_features(t, d));
    }
    let tf = tape.constant(Array::from_vec(&[f, d], feats)?);
    let mut e = tape.matmul(tf, pnode(ps, bound, "time_w1"))?;
    e = tape.add_rows(e, pnode(ps, bound, "time_b1"))?;
    e = tape.silu(e)?;
    e = tape.matmul(e, pnode(ps, bound, "time_w2"))?;
    e = tape.add_rows(e, pnode(ps, bound, "time_b2"))?;

    // h_f = proj(norm([z_f; e_f]))
    let ze = tape.concat(1, &[z, e])?;
    let zen = layer_norm_affine(
        tape,
        ze,
        pnode(ps, bound, "comb_ln_g"),
        pnode(ps, bound, "comb_ln_b"),
    )?;
    let mut h = tape.matmul(zen, pnode(ps, bound, "comb_w"))?;
    h = tape.add_rows(h, pnode(ps, bound, "comb_b"))?;

    // attention pooling over frames: g = Σ_f w_f h_f
    let mut s = tape.matmul(h, pnode(ps, bound, "score_w1"))?;
    s = tape.add_rows(s, pnode(ps, bound, "score_b1"))?;
    s = tape.gelu(s)?;
    s = tape.matmul(s, pnode(ps, bound, "score_w2"))?;
    s = tape.add_rows(s, pnode(ps, bound, "score_b2"))?;
    let s_row = tape.permute(s, identity_perm(f), &[1, f])?;
    let pool_w = tape.softmax_rows(s_row)?;
    let g = tape.matmul(pool_w, h)?;

    // actor MLP on [g; h_1; …; h_F]
    let mut actor_in_parts = vec![g];
    for i in 0..f {
        actor_in_parts.push(tape.slice_rows(h, i, 1)?);
    }
    let actor_in = tape.concat(1, &actor_in_parts)?;
    let mut a = tape.matmul(actor_in, pnode(ps, bound, "actor_w1"))?;
    a = tape.add_rows(a, pnode(ps, bound, "actor_b1"))?;
    a = tape.gelu(a)?;
    a = tape.matmul(a, pnode(ps, bound, "actor_w2"))?;
    a = tape.add_rows(a, pnode(ps, bound, "actor_b2"))?;
    a = tape.gelu(a)?;
    a = tape.matmul(a, pnode(ps, bound, "actor_w3"))?;
    let mu = tape.add_rows(a, pnode(ps, bound, "actor_b3"))?;
    if !tape.value(mu).all_finite() {
        return Err(Error::NonFinite("policy mean".into()));
    }

    let logstd_raw = pnode(ps, bound, "logstd");
    let logstd = tape.clamp(logstd_raw, LOGSTD_LO, LOGSTD_HI)?;
    let sigma = tape.exp(logstd)?;
    Ok(PolicyNodes {
        mu,
        logstd,
        sigma,
        pool_w,
    })
}

/// Policy forward pass on a [`GatingState`] (latents entered as constants).
pub fn policy_forward(
    tape: &mut Tape,
    cfg: &GPNConfig,
    ps: &ParamSet,
    bound: &Bound,
    state: &GatingState,
) -> Result<PolicyNodes> {
    state.validate(cfg)?;
    let latent_nodes: Vec<NodeId> = state
        .latents
        .iter()
        .map(|l| tape.constant(l.clone()))
        .collect();
    policy_forward_nodes(tape, cfg, ps, bound, &latent_nodes, &state.times.video_t)
}

/// Per-frame log-density node `[1, F]` of relative scales with pre-squash
/// values `u` (held constant; gradients flow into μ and logσ).
pub fn log_prob_node(tape: &mut Tape, nodes: &PolicyNodes, u: &[f64]) -> Result<NodeId> {
    let f = u.len();
    let u_arr = Array::from_vec(&[1, f], u.to_vec())?;
    let u_node = tape.constant(u_arr);
    // log N(u; μ, σ²) = −logσ − ½ln2π − (u−μ)²/(2σ²)
    let diff = tape.sub(u_node, nodes.mu)?;
    let d2 = tape.mul(diff, diff)?;
    let s2 = tape.mul(nodes.sigma, nodes.sigma)?;
    let q = tape.div(d2, s2)?;
    let qh = tape.scale(q, -0.5)?;
    let nls = tape.neg(nodes.logstd)?;
    let mut lp = tape.add(nls, qh)?;
    lp = tape.add_scalar(lp, -0.5 * LN_2PI)?;
    // − log|dr/du| = −(u − 2 softplus(u)) − ln 2
    let sp = tape.softplus(u_node)?;
    let sp2 = tape.scale(sp, 2.0)?;
    let neg_u = tape.neg(u_node)?;
    let jac = tape.add(sp2, neg_u)?;
    lp = tape.add(lp, jac)?;
    tape.add_scalar(lp, -std::f64::consts::LN_2)
}

/// Policy entropy node (pre-squash Gaussian): Σ_f (½ln(2πe) + logσ_f).
pub fn entropy_node(tape: &mut Tape, nodes: &PolicyNodes) -> Result<NodeId> {
    let f = tape.value(nodes.logstd).len() as f64;
    let s = tape.sum(nodes.logstd)?;
    tape.add_scalar(s, f * 0.5 * (LN_2PI + 1.0))
}

// ---- value-level API ----

/// Exact scalar log-density of one frame's relative scale given (μ, σ, u).
pub fn log_prob_scalar(mu: f64, sigma: f64, u: f64) -> f64 {
    let z = (u - mu) / sigma;
    -sigma.ln() - 0.5 * LN_2PI - 0.5 * z * z - (u - 2.0 * softplus_scalar(u))
        - std::f64::consts::LN_2
}

/// Mean/σ of the pre-squash Gaussian, evaluated without recording.
pub fn policy_eval(cfg: &GPNConfig, ps: &ParamSet, state: &GatingState) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::inference();
    let bound = ps.bind_frozen(&mut tape);
    let nodes = policy_forward(&mut tape, cfg, ps, &bound, state)?;
    let mu = tape.value(nodes.mu).data().to_vec();
    let sigma = tape.value(nodes.sigma).data().to_vec();
    Ok((mu, sigma))
}

/// Draw r ~ π(·|state); the returned action stores u and its exact joint
/// log-density.
pub fn sample(cfg: &GPNConfig, ps: &ParamSet, state: &GatingState, rng: &mut Rng) -> Result<GatingAction> {
    let (mu, sigma) = policy_eval(cfg, ps, state)?;
    let mut r = Vec::with_capacity(mu.len());
    let mut u = Vec::with_capacity(mu.len());
    let mut lp_frames = Vec::with_capacity(mu.len());
    for f in 0..mu.len() {
        let uf = mu[f] + sigma[f] * rng::normal(rng);
        let rf = 2.0 * sigmoid_scalar(uf);
        let lp = log_prob_scalar(mu[f], sigma[f], uf);
        if !uf.is_finite() || !lp.is_finite() {
            return Err(Error::NonFinite("gating sample".into()));
        }
        u.push(uf);
        r.push(rf);
        lp_frames.push(lp);
    }
    Ok(GatingAction {
        r,
        u,
        log_prob: lp_frames.iter().sum(),
        log_prob_frames: lp_frames,
    })
}

/// Joint log-density of a given r ∈ (0,2)^F under the current policy.
pub fn log_prob(cfg: &GPNConfig, ps: &ParamSet, state: &GatingState, r: &[f64]) -> Result<f64> {
    let (mu, sigma) = policy_eval(cfg, ps, state)?;
    if r.len() != mu.len() {
        return Err(Error::Shape("r length".into()));
    }
    let mut total = 0.0;
    for f in 0..r.len() {
        if !(r[f] > 0.0 && r[f] < 2.0) {
            return Err(Error::Config(format!(
                "relative scale {} outside the open interval (0,2)",
                r[f]
            )));
        }
        let u = (r[f] / (2.0 - r[f])).ln(); // logit(r/2)
        total += log_prob_scalar(mu[f], sigma[f], u);
    }
    Ok(total)
}

/// Mode of the squashed policy: r_f = 2·sigmoid(μ_f).
pub fn deterministic_action(cfg: &GPNConfig, ps: &ParamSet, state: &GatingState) -> Result<Vec<f64>> {
    let (mu, _) = policy_eval(cfg, ps, state)?;
    Ok(mu.iter().map(|m| 2.0 * sigmoid_scalar(*m)).collect())
}

// ---- checkpointing ----

pub fn save_gpn(path: &Path, cfg: &GPNConfig, ps: &ParamSet) -> Result<()> {
    checkpoint::save(path, &serde_json::to_string(cfg)?, ps)
}

pub fn load_gpn(path: &Path) -> Result<(GPNConfig, ParamSet)> {
    let (cfg_json, arrays) = checkpoint::load(path)?;
    let cfg: GPNConfig = serde_json::from_str(&cfg_json)
        .map_err(|e| Error::Checkpoint(format!("bad gating-policy config in checkpoint: {e}")))?;
    let mut ps = init_params(&cfg, 0, false)?;
    let mut by_name: BTreeMap<String, Array> = arrays.into_iter().collect();
    let names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let arr = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint missing {name}")))?;
        let id = ps.by_name(&name).expect("registered");
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
