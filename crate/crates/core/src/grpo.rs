//! Stage-2 trainer: group-relative policy optimization of the gating policy
//! against binary episode reward, with the backbone frozen. Episodes are
//! collected in groups under a frozen policy snapshot; advantages are
//! reward deviations normalized by the group's population standard
//! deviation; updates maximize a per-(step, frame) clipped importance-ratio
//! surrogate plus a decaying entropy bonus. No value network, no KL term.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, NodeId, Tape};
use crate::backbone::BackboneConfig;
use crate::env::{self, EnvConfig};
use crate::gpn::{self, GPNConfig};
use crate::optim::AdamW;
use crate::params::{Bound, ParamSet};
use crate::sched::{self, GatePolicy, GateStepRecord, SchedConfig};
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub inner_epochs: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub entropy_beta0: f64,
    pub entropy_decay: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub workers: usize,
    pub seed: u64,
    pub adv_eps: f64,
    pub weight_decay: f64,
    pub k_steps: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            inner_epochs: 4,
            lr: 1e-4,
            grad_clip: 1.0,
            entropy_beta0: 0.01,
            entropy_decay: 0.999,
            epochs: 50,
            episodes_per_epoch: 8,
            workers: 8,
            seed: 42,
            adv_eps: 1e-8,
            weight_decay: 0.01,
            k_steps: 10,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(0.0 < self.clip_eps && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must lie in (0,1)".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("grad_clip", self.grad_clip),
            ("entropy_beta0", self.entropy_beta0),
            ("entropy_decay", self.entropy_decay),
            ("adv_eps", self.adv_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.inner_epochs == 0 || self.epochs == 0 || self.workers == 0 || self.k_steps == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if self.episodes_per_epoch == 0 || self.episodes_per_epoch % self.group_size != 0 {
            return Err(Error::Config(
                "episodes_per_epoch must be a positive multiple of group_size".into(),
            ));
        }
        Ok(())
    }
}

/// One collected episode under the frozen snapshot: gating decisions with
/// their sampling-time log-densities, plus the episode's binary reward.
#[derive(Clone, Debug)]
pub struct RolloutRecord {
    pub episode_index: usize,
    pub task_id: usize,
    pub seed: u64,
    pub reward: u8,
    /// chunks_per_episode × K gating decisions, in execution order; empty
    /// for gate-free debug policies.
    pub steps: Vec<GateStepRecord>,
}

/// Roll out one group of episodes on a single task under the given policy
/// snapshot. Per-episode seeds make the result independent of worker
/// scheduling.
pub fn collect_group(
    env_cfg: &EnvConfig,
    bb_cfg: &BackboneConfig,
    bb_params: &ParamSet,
    sched_cfg: &SchedConfig,
    policy: &GatePolicy,
    task_id: usize,
    seeds: &[u64],
) -> Result<Vec<RolloutRecord>> {
    if seeds.len() < 2 {
        return Err(Error::Config("a group needs at least two episodes".into()));
    }
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let ep = sched::rollout_episode(
                env_cfg, bb_cfg, bb_params, sched_cfg, policy, task_id, seed,
            )?;
            Ok(RolloutRecord {
                episode_index: i,
                task_id,
                seed,
                reward: ep.reward,
                steps: ep.gate_records,
            })
        })
        .collect()
}

/// Group-relative advantages: Â_i = (r_i − r̄) / (popstd({r}) + adv_eps).
pub fn advantages(rewards: &[f64], adv_eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Train("advantage group needs at least 2 rewards".into()));
    }
    let mean = crate::stats::mean(rewards);
    let std = crate::stats::pop_std(rewards);
    Ok(rewards.iter().map(|r| (r - mean) / (std + adv_eps)).collect())
}

/// Closed-form entropy of the pre-squash Gaussian: Σ_f ½ ln(2πe σ_f²).
pub fn entropy_scalar(sigmas: &[f64]) -> f64 {
    sigmas
        .iter()
        .map(|s| 0.5 * (LN_2PI + 1.0) + s.ln())
        .sum()
}

/// Episodes with their attached advantages, ready for the surrogate.
pub struct GrpoBatch<'a> {
    pub episodes: Vec<(&'a RolloutRecord, f64)>,
}

/// Differentiable GRPO objective (to minimize): the negative of the clipped
/// surrogate plus β times the mean per-step policy entropy.
///
/// Per (episode, step, frame): ρ = exp(logπ_new − logπ_old);
/// min(ρ·Â, clamp(ρ, 1−ε, 1+ε)·Â), summed over frames and steps and
/// averaged over episodes.
pub fn surrogate_loss(
    tape: &mut Tape,
    cfg: &GPNConfig,
    ps: &ParamSet,
    bound: &Bound,
    batch: &GrpoBatch,
    clip_eps: f64,
    beta: f64,
) -> Result<NodeId> {
    if batch.episodes.is_empty() {
        return Err(Error::Train("empty GRPO batch".into()));
    }
    let mut surr_total: Option<NodeId> = None;
    let mut ent_total: Option<NodeId> = None;
    let mut n_steps = 0usize;
    for (record, adv) in &batch.episodes {
        if record.steps.is_empty() {
            return Err(Error::Train(
                "episode without gating records cannot train the policy".into(),
            ));
        }
        let mut ep_sum: Option<NodeId> = None;
        for rec in &record.steps {
            let latents: Vec<NodeId> = rec
                .state
                .latents
                .iter()
                .map(|a| tape.constant(a.clone()))
                .collect();
            let nodes = gpn::policy_forward_nodes(
                tape,
                cfg,
                ps,
                bound,
                &latents,
                &rec.state.times.video_t,
            )?;
            let lp_new = gpn::log_prob_node(tape, &nodes, &rec.u)?;
            let lp_old = tape.constant(Array::from_vec(
                &[1, rec.log_prob_frames.len()],
                rec.log_prob_frames.clone(),
            )?);
            let dlp = tape.sub(lp_new, lp_old)?;
            let ratio = tape.exp(dlp)?;
            if !tape.value(ratio).all_finite() {
                return Err(Error::NonFinite(
                    "importance ratio (stale snapshot or density bug)".into(),
                ));
            }
            let unclipped = tape.scale(ratio, *adv)?;
            let clipped_ratio = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)?;
            let clipped = tape.scale(clipped_ratio, *adv)?;
            let pessimistic = tape.minimum(unclipped, clipped)?;
            let s = tape.sum(pessimistic)?;
            ep_sum = Some(match ep_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            let h = gpn::entropy_node(tape, &nodes)?;
            ent_total = Some(match ent_total {
                Some(acc) => tape.add(acc, h)?,
                None => h,
            });
            n_steps += 1;
        }
        let ep_sum = ep_sum.expect("non-empty steps");
        surr_total = Some(match surr_total {
            Some(acc) => tape.add(acc, ep_sum)?,
            None => ep_sum,
        });
    }
    let surr = tape.scale(surr_total.expect("non-empty batch"), 1.0 / batch.episodes.len() as f64)?;
    let ent = tape.scale(ent_total.expect("non-empty batch"), beta / n_steps as f64)?;
    let objective = tape.add(surr, ent)?;
    tape.neg(objective)
}

/// Entropy coefficient after `updates` optimizer steps.
pub fn beta_after(beta0: f64, decay: f64, updates: u32) -> f64 {
    (beta0 * decay.powi(updates as i32)).max(0.0)
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_id: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub entropy_beta: f64,
    pub mean_r: f64,
    pub mean_sigma: f64,
    /// True when no episode in the epoch earned reward (sparse-reward stall).
    pub stall: bool,
}

/// Mean policy noise scale implied by the learned log-std parameter.
fn current_mean_sigma(cfg: &GPNConfig, ps: &ParamSet) -> Result<f64> {
    let id = ps
        .by_name("logstd")
        .ok_or_else(|| Error::Train("missing logstd".into()))?;
    let v = ps.get(id);
    let mean: f64 = v
        .data()
        .iter()
        .map(|l| l.clamp(gpn::LOGSTD_LO, gpn::LOGSTD_HI).exp())
        .sum::<f64>()
        / v.len() as f64;
    let _ = cfg;
    Ok(mean)
}

/// Train the gating policy with the backbone frozen. Each epoch collects
/// `episodes_per_epoch` episodes (in groups of `group_size`, all on task
/// `epoch mod T`), then runs `inner_epochs` whole-batch updates.
pub fn train_stage2(
    env_cfg: &EnvConfig,
    bb_cfg: &BackboneConfig,
    bb_params: &ParamSet,
    gpn_cfg: &GPNConfig,
    gpn_params: &mut ParamSet,
    cfg: &GrpoConfig,
    mut on_log: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let backbone_fingerprint = bb_params.fingerprint();
    let sched_cfg = SchedConfig {
        k_steps: cfg.k_steps,
    };
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.grad_clip);
    let mut beta = cfg.entropy_beta0;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let task_id = epoch % env_cfg.t_tasks;
        let n_groups = cfg.episodes_per_epoch / cfg.group_size;
        let mut batch_records: Vec<(RolloutRecord, f64)> = Vec::new();
        for g in 0..n_groups {
            let seeds: Vec<u64> = (0..cfg.group_size)
                .map(|i| env::derive_seed(cfg.seed, &[epoch as u64, g as u64, i as u64]))
                .collect();
            let policy = GatePolicy::Learned {
                cfg: gpn_cfg,
                params: gpn_params,
                deterministic: false,
            };
            let records = collect_group(
                env_cfg, bb_cfg, bb_params, &sched_cfg, &policy, task_id, &seeds,
            )?;
            let rewards: Vec<f64> = records.iter().map(|r| r.reward as f64).collect();
            let advs = advantages(&rewards, cfg.adv_eps)?;
            batch_records.extend(records.into_iter().zip(advs));
        }
        let mean_reward = batch_records
            .iter()
            .map(|(r, _)| r.reward as f64)
            .sum::<f64>()
            / batch_records.len() as f64;
        let mean_r = {
            let (mut s, mut n) = (0.0, 0usize);
            for (rec, _) in &batch_records {
                for step in &rec.steps {
                    s += step.r.iter().sum::<f64>();
                    n += step.r.len();
                }
            }
            s / n.max(1) as f64
        };

        let mut last_loss = f64::NAN;
        for _ in 0..cfg.inner_epochs {
            let batch = GrpoBatch {
                episodes: batch_records.iter().map(|(r, a)| (r, *a)).collect(),
            };
            let mut tape = Tape::new();
            let bound = gpn_params.bind(&mut tape);
            let loss = surrogate_loss(
                &mut tape, gpn_cfg, gpn_params, &bound, &batch, cfg.clip_eps, beta,
            )?;
            last_loss = tape.value(loss).item();
            tape.backward(loss)?;
            let grads = gpn_params.collect_grads(&tape, &bound);
            opt.step(gpn_params, &grads)?;
            beta = (beta * cfg.entropy_decay).max(0.0);
        }

        if bb_params.fingerprint() != backbone_fingerprint {
            return Err(Error::Verify(
                "frozen backbone changed during stage-2 training".into(),
            ));
        }
        let m = EpochMetrics {
            epoch,
            task_id,
            mean_reward,
            loss: last_loss,
            entropy_beta: beta,
            mean_r,
            mean_sigma: current_mean_sigma(gpn_cfg, gpn_params)?,
            stall: mean_reward == 0.0,
        };
        on_log(&m);
        metrics.push(m);
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone;
    use crate::rng;

    fn tiny_bb() -> (BackboneConfig, ParamSet) {
        let cfg = BackboneConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            patch_size: 8,
            ..BackboneConfig::default()
        };
        let ps = backbone::init_params(&cfg, 21, true).unwrap();
        (cfg, ps)
    }

    fn tiny_gpn(seed: u64) -> (GPNConfig, ParamSet) {
        let cfg = GPNConfig {
            token_dim: 8,
            conv_channels: 4,
            gn_groups: 2,
            encoder_layers: 1,
            encoder_heads: 2,
            ..GPNConfig::default()
        };
        let ps = gpn::init_params(&cfg, seed, true).unwrap();
        (cfg, ps)
    }

    fn small_batch(
        env_cfg: &EnvConfig,
        bb: &(BackboneConfig, ParamSet),
        gp: &(GPNConfig, ParamSet),
        n: usize,
    ) -> Vec<RolloutRecord> {
        let sched_cfg = SchedConfig { k_steps: 4 };
        let policy = GatePolicy::Learned {
            cfg: &gp.0,
            params: &gp.1,
            deterministic: false,
        };
        let seeds: Vec<u64> = (0..n as u64).map(|i| 300 + i).collect();
        collect_group(env_cfg, &bb.0, &bb.1, &sched_cfg, &policy, 0, &seeds).unwrap()
    }

    #[test]
    fn advantages_match_hand_computed_case() {
        let mut rewards = vec![0.0; 8];
        rewards[0] = 1.0;
        let a = advantages(&rewards, 1e-8).unwrap();
        assert!((a[0] - 2.6458).abs() < 1e-4, "{}", a[0]);
        for v in &a[1..] {
            assert!((v + 0.37796).abs() < 1e-4, "{v}");
        }
        assert!(a.iter().sum::<f64>().abs() < 1e-9, "advantages sum to zero");
        // equal rewards: zero numerator
        let z = advantages(&[1.0; 8], 1e-8).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        // translation invariance
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 5.0).collect();
        let b = advantages(&shifted, 1e-8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn entropy_closed_form_oracles() {
        let h = entropy_scalar(&[1.0, 1.0]);
        assert!((h - 2.83788).abs() < 1e-4, "{h}");
        let h_floor = entropy_scalar(&[(-5.0f64).exp()]);
        assert!((h_floor + 3.58106).abs() < 1e-4, "{h_floor}");
        // strictly increasing in each σ
        assert!(entropy_scalar(&[0.5, 1.0]) < entropy_scalar(&[0.6, 1.0]));
        assert!(entropy_scalar(&[0.5, 1.0]) < entropy_scalar(&[0.5, 1.1]));
    }

    #[test]
    fn beta_decay_oracle() {
        let b = beta_after(0.01, 0.999, 100);
        assert!((b - 0.009048).abs() < 1e-6, "{b}");
        assert_eq!(beta_after(0.01, 0.999, 0), 0.01);
    }

    #[test]
    fn collect_group_shapes_and_determinism() {
        let env_cfg = EnvConfig::default();
        let bb = tiny_bb();
        let gp = tiny_gpn(22);
        let records = small_batch(&env_cfg, &bb, &gp, 3);
        assert_eq!(records.len(), 3);
        for r in &records {
            assert_eq!(r.steps.len(), env_cfg.chunks_per_episode * 4);
            assert!(r.reward <= 1);
        }
        let again = small_batch(&env_cfg, &bb, &gp, 3);
        for (a, b) in records.iter().zip(&again) {
            assert_eq!(a.reward, b.reward);
            assert_eq!(a.steps.len(), b.steps.len());
            for (s, t) in a.steps.iter().zip(&b.steps) {
                assert_eq!(s.u, t.u, "same seeds must replay identically");
            }
        }
        // gate-free debug policy: rollouts succeed, no trainable records
        let sched_cfg = SchedConfig { k_steps: 4 };
        let shared =
            collect_group(&env_cfg, &bb.0, &bb.1, &sched_cfg, &GatePolicy::SharedT, 0, &[1, 2])
                .unwrap();
        assert!(shared.iter().all(|r| r.steps.is_empty()));
    }

    #[test]
    fn first_inner_epoch_has_unit_ratios() {
        let env_cfg = EnvConfig::default();
        let bb = tiny_bb();
        let gp = tiny_gpn(23);
        let records = small_batch(&env_cfg, &bb, &gp, 2);
        let advs = [1.0, -0.5];
        let batch = GrpoBatch {
            episodes: records.iter().zip(advs).collect(),
        };
        let mut tape = Tape::new();
        let bound = gp.1.bind(&mut tape);
        // β = 0 isolates the surrogate term
        let loss = surrogate_loss(&mut tape, &gp.0, &gp.1, &bound, &batch, 0.2, 0.0).unwrap();
        let got = tape.value(loss).item();
        // with π == π_old every ratio is exactly 1, so the surrogate is
        // mean_i(Â_i · steps · frames)
        let expect: f64 = -records
            .iter()
            .zip(advs)
            .map(|(r, a)| a * (r.steps.len() * gp.0.f_frames) as f64)
            .sum::<f64>()
            / records.len() as f64;
        assert!(
            (got - expect).abs() < 1e-9,
            "ratio-one identity: {got} vs {expect}"
        );
    }

    #[test]
    fn clip_deactivates_gradient_outside_trust_region() {
        let env_cfg = EnvConfig::default();
        let bb = tiny_bb();
        let gp = tiny_gpn(24);
        let mut records = small_batch(&env_cfg, &bb, &gp, 2);
        // shift the stored old log-probs so the current ratio is exactly 1.5
        for rec in &mut records {
            for s in &mut rec.steps {
                for lp in &mut s.log_prob_frames {
                    *lp -= 1.5f64.ln();
                }
            }
        }
        let grads_for = |adv: f64| {
            let batch = GrpoBatch {
                episodes: records.iter().map(|r| (r, adv)).collect(),
            };
            let mut tape = Tape::new();
            let bound = gp.1.bind(&mut tape);
            let loss =
                surrogate_loss(&mut tape, &gp.0, &gp.1, &bound, &batch, 0.2, 0.0).unwrap();
            tape.backward(loss).unwrap();
            gp.1.collect_grads(&tape, &bound)
        };
        // positive advantage: min picks the clipped constant 1.2·Â → no grad
        let gp_grads = grads_for(1.0);
        let max_abs = gp_grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs < 1e-12, "clipped branch must stop the gradient, got {max_abs}");
        // negative advantage: min keeps the unclipped term → gradient flows
        let gn_grads = grads_for(-1.0);
        let max_abs_neg = gn_grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs_neg > 1e-8, "pessimistic branch must keep the gradient");
    }

    #[test]
    fn surrogate_matches_reinforce_with_wide_clip() {
        let env_cfg = EnvConfig::default();
        let bb = tiny_bb();
        let gp = tiny_gpn(25);
        let records = small_batch(&env_cfg, &bb, &gp, 2);
        let advs = [0.7, -0.7];
        let batch = GrpoBatch {
            episodes: records.iter().zip(advs).collect(),
        };
        let mut tape = Tape::new();
        let bound = gp.1.bind(&mut tape);
        let loss =
            surrogate_loss(&mut tape, &gp.0, &gp.1, &bound, &batch, 0.999999, 0.0).unwrap();
        tape.backward(loss).unwrap();
        let surr_grads = gp.1.collect_grads(&tape, &bound);

        // REINFORCE with baseline on the same batch:
        // −(1/n) Σ_i Â_i Σ_{steps,frames} logπ(u)
        let mut tape2 = Tape::new();
        let bound2 = gp.1.bind(&mut tape2);
        let mut total: Option<NodeId> = None;
        for (rec, adv) in &batch.episodes {
            for s in &rec.steps {
                let latents: Vec<NodeId> = s
                    .state
                    .latents
                    .iter()
                    .map(|a| tape2.constant(a.clone()))
                    .collect();
                let nodes = gpn::policy_forward_nodes(
                    &mut tape2,
                    &gp.0,
                    &gp.1,
                    &bound2,
                    &latents,
                    &s.state.times.video_t,
                )
                .unwrap();
                let lp = gpn::log_prob_node(&mut tape2, &nodes, &s.u).unwrap();
                let sum = tape2.sum(lp).unwrap();
                let w = tape2.scale(sum, *adv).unwrap();
                total = Some(match total {
                    Some(acc) => tape2.add(acc, w).unwrap(),
                    None => w,
                });
            }
        }
        let obj = tape2
            .scale(total.unwrap(), 1.0 / batch.episodes.len() as f64)
            .unwrap();
        let rl = tape2.neg(obj).unwrap();
        tape2.backward(rl).unwrap();
        let rf_grads = gp.1.collect_grads(&tape2, &bound2);

        for (a, b) in surr_grads.iter().zip(&rf_grads) {
            match (a, b) {
                (Some(x), Some(y)) => {
                    for (u, v) in x.data().iter().zip(y.data()) {
                        assert!(
                            (u - v).abs() < 1e-10,
                            "surrogate at ρ=1 with wide clip must equal REINFORCE: {u} vs {v}"
                        );
                    }
                }
                (None, None) => {}
                _ => panic!("gradient presence mismatch"),
            }
        }
    }

    #[test]
    fn train_stage2_smoke_preserves_backbone_and_logs_epochs() {
        let env_cfg = EnvConfig::default();
        let (bb_cfg, bb_ps) = tiny_bb();
        let (gpn_cfg, mut gpn_ps) = tiny_gpn(26);
        let cfg = GrpoConfig {
            group_size: 2,
            episodes_per_epoch: 2,
            inner_epochs: 2,
            epochs: 3,
            k_steps: 3,
            workers: 1,
            ..GrpoConfig::default()
        };
        let fp_before = bb_ps.fingerprint();
        let gpn_fp_before = gpn_ps.fingerprint();
        let mut seen = Vec::new();
        let metrics = train_stage2(
            &env_cfg,
            &bb_cfg,
            &bb_ps,
            &gpn_cfg,
            &mut gpn_ps,
            &cfg,
            |m| seen.push(m.epoch),
        )
        .unwrap();
        assert_eq!(metrics.len(), 3);
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(bb_ps.fingerprint(), fp_before, "backbone must stay frozen");
        assert_ne!(gpn_ps.fingerprint(), gpn_fp_before, "policy must update");
        // 6 update steps happened
        let expect_beta = beta_after(cfg.entropy_beta0, cfg.entropy_decay, 6);
        assert!((metrics.last().unwrap().entropy_beta - expect_beta).abs() < 1e-15);
        for m in &metrics {
            assert!(m.mean_reward >= 0.0 && m.mean_reward <= 1.0);
            assert!(m.loss.is_finite());
            assert!(m.mean_r > 0.0 && m.mean_r < 2.0);
            assert!(m.mean_sigma > 0.0);
            assert_eq!(m.task_id, m.epoch % env_cfg.t_tasks);
        }
        // a second run from the same initial state reproduces rewards
        let (_, mut gpn_ps2) = tiny_gpn(26);
        let metrics2 = train_stage2(
            &env_cfg,
            &bb_cfg,
            &bb_ps,
            &gpn_cfg,
            &mut gpn_ps2,
            &cfg,
            |_| {},
        )
        .unwrap();
        for (a, b) in metrics.iter().zip(&metrics2) {
            assert_eq!(a.mean_reward, b.mean_reward);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn zero_advantage_batch_reduces_to_entropy_term() {
        let env_cfg = EnvConfig::default();
        let bb = tiny_bb();
        let gp = tiny_gpn(27);
        let records = small_batch(&env_cfg, &bb, &gp, 2);
        let batch = GrpoBatch {
            episodes: records.iter().map(|r| (r, 0.0)).collect(),
        };
        let beta = 0.05;
        let mut tape = Tape::new();
        let bound = gp.1.bind(&mut tape);
        let loss = surrogate_loss(&mut tape, &gp.0, &gp.1, &bound, &batch, 0.2, beta).unwrap();
        let got = tape.value(loss).item();
        // −β · mean per-step entropy; σ is the clamped learned logstd
        let id = gp.1.by_name("logstd").unwrap();
        let sigmas: Vec<f64> = gp.1.get(id)
            .data()
            .iter()
            .map(|l| l.clamp(gpn::LOGSTD_LO, gpn::LOGSTD_HI).exp())
            .collect();
        let expect = -beta * entropy_scalar(&sigmas);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn stall_flag_marks_zero_reward_epochs() {
        // hand-build metrics logic: an epoch with zero mean reward stalls
        let rewards = vec![0.0, 0.0];
        let advs = advantages(&rewards, 1e-8).unwrap();
        assert!(advs.iter().all(|a| *a == 0.0));
        // the training loop sets `stall` exactly when mean reward is zero —
        // covered structurally in the smoke test; here we pin the predicate
        let mean = crate::stats::mean(&rewards);
        assert!(mean == 0.0);
    }

    #[test]
    fn non_finite_ratio_is_an_error() {
        let env_cfg = EnvConfig::default();
        let bb = tiny_bb();
        let gp = tiny_gpn(28);
        let mut records = small_batch(&env_cfg, &bb, &gp, 2);
        for rec in &mut records {
            for s in &mut rec.steps {
                for lp in &mut s.log_prob_frames {
                    *lp = -1e6; // exp(new − old) overflows
                }
            }
        }
        let batch = GrpoBatch {
            episodes: records.iter().map(|r| (r, 1.0)).collect(),
        };
        let mut tape = Tape::new();
        let bound = gp.1.bind(&mut tape);
        assert!(surrogate_loss(&mut tape, &gp.0, &gp.1, &bound, &batch, 0.2, 0.0).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = GrpoConfig::default();
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.clip_eps = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.group_size = 1;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.episodes_per_epoch = 5; // not a multiple of 8
        assert!(bad.validate().is_err());
        let _ = rng::stream(0, "unused", &[]);
    }
}
