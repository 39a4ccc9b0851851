//! Acceptance gate: ten go/no-go checks covering gradient correctness,
//! density correctness, the shared-scalar reduction identity, schedule
//! invariants, the group-relative policy-gradient unit suite, stage-1
//! learning, the attention/noise mechanism, the four-arm schedule ablation
//! ordering, learned-schedule diversity, and end-to-end reproducibility.
//!
//! Each criterion is one test (`c01`..`c10`), so the harness output itself
//! is the pass/fail checklist. Tests share one lazily trained fixture at the
//! default configuration; with a single test thread they run in name order,
//! so the fixture is first built where it is first needed.

use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;

use wamgate::autodiff::{grad_check, Array, Tape};
use wamgate::backbone::{self, BackboneConfig, ChunkState};
use wamgate::config::RunConfig;
use wamgate::env::{self, DemoDataset, Frame};
use wamgate::flow::TimestepVector;
use wamgate::gpn::{self, GatingState, GPNConfig};
use wamgate::grpo::{self, EpochMetrics, GrpoBatch};
use wamgate::params::{Bound, ParamSet};
use wamgate::rng::{self, Rng};
use wamgate::sched::{self, GatePolicy, SchedConfig, TIME_SNAP};
use wamgate::stage1;
use wamgate::stats;

// ---------------------------------------------------------------------------
// shared fixture: default-config dataset and trained models
// ---------------------------------------------------------------------------

struct Pilot {
    run: RunConfig,
    dataset: DemoDataset,
    /// Backbone trained with independent per-latent timesteps.
    bb_df: ParamSet,
    /// Backbone trained with one shared scalar timestep per sample.
    bb_sh: ParamSet,
    /// Gating policy trained on top of `bb_df` with the backbone frozen.
    gpn_params: ParamSet,
    gpn_metrics: Vec<EpochMetrics>,
    initial_holdout_loss: f64,
    final_holdout_loss: f64,
    df_train_secs: f64,
    sh_train_secs: f64,
    gpn_train_secs: f64,
}

static PILOT: OnceLock<Pilot> = OnceLock::new();

fn train_backbone_arm(
    run: &RunConfig,
    dataset: &DemoDataset,
    seed: u64,
    shared_times: bool,
) -> (ParamSet, f64, f64, f64) {
    let mut s1 = run.stage1.clone();
    s1.seed = seed;
    s1.shared_times = shared_times;
    let mut ps = backbone::init_params(&run.backbone, s1.seed, false).unwrap();
    let n = dataset.episodes.len();
    let held = stage1::collect_samples(dataset, run.backbone.f_frames, n - s1.holdout_episodes..n);
    let eval_seed = s1.seed ^ 0x5eed;
    let before = stage1::eval_loss(&run.backbone, &ps, &held, s1.shared_times, eval_seed).unwrap();
    let t0 = Instant::now();
    stage1::train_stage1(&run.backbone, &s1, dataset, &mut ps, |_| {}).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let after = stage1::eval_loss(&run.backbone, &ps, &held, s1.shared_times, eval_seed).unwrap();
    (ps, before, after, secs)
}

fn train_gpn_arm(
    run: &RunConfig,
    bb: &ParamSet,
    grpo_seed: u64,
) -> (ParamSet, Vec<EpochMetrics>, f64) {
    let mut gc = run.grpo.clone();
    gc.seed = grpo_seed;
    let mut gpn_params = gpn::init_params(&run.gpn, gc.seed, false).unwrap();
    let t0 = Instant::now();
    let metrics = grpo::train_stage2(
        &run.env,
        &run.backbone,
        bb,
        &run.gpn,
        &mut gpn_params,
        &gc,
        |_| {},
    )
    .unwrap();
    (gpn_params, metrics, t0.elapsed().as_secs_f64())
}

fn pilot() -> &'static Pilot {
    PILOT.get_or_init(|| {
        let run = RunConfig::default();
        let dataset = env::generate_demos(
            &run.env,
            run.data.episodes,
            run.data.noise_scale,
            run.data.seed,
        )
        .unwrap();
        let (bb_df, initial_holdout_loss, final_holdout_loss, df_train_secs) =
            train_backbone_arm(&run, &dataset, run.stage1.seed, false);
        let (bb_sh, _, _, sh_train_secs) =
            train_backbone_arm(&run, &dataset, run.stage1.seed, true);
        let (gpn_params, gpn_metrics, gpn_train_secs) =
            train_gpn_arm(&run, &bb_df, run.grpo.seed);
        Pilot {
            run,
            dataset,
            bb_df,
            bb_sh,
            gpn_params,
            gpn_metrics,
            initial_holdout_loss,
            final_holdout_loss,
            df_train_secs,
            sh_train_secs,
            gpn_train_secs,
        }
    })
}

/// Success rate of one (backbone, gating policy) pair: `per_task` episodes
/// per task, seeds derived from (seed, task, index) so different arms see
/// identical initial conditions.
fn arm_success(
    run: &RunConfig,
    bb: &ParamSet,
    policy: &GatePolicy,
    per_task: usize,
    seed: u64,
) -> f64 {
    let sched_cfg = SchedConfig {
        k_steps: run.grpo.k_steps,
    };
    let mut rates = Vec::new();
    for task in 0..run.env.t_tasks {
        let wins: usize = (0..per_task)
            .into_par_iter()
            .map(|i| {
                let ep_seed = env::derive_seed(seed, &[task as u64, i as u64]);
                sched::rollout_episode(
                    &run.env,
                    &run.backbone,
                    bb,
                    &sched_cfg,
                    policy,
                    task,
                    ep_seed,
                )
                .map(|ep| ep.reward as usize)
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))
            .unwrap();
        rates.push(wins as f64 / per_task as f64);
    }
    rates.iter().sum::<f64>() / rates.len() as f64
}

fn random_frame(seed: u64, task: usize, env_cfg: &env::EnvConfig) -> Frame {
    let state = env::reset(env_cfg, task, seed).unwrap();
    env::render(env_cfg, &state)
}

// ---------------------------------------------------------------------------
// criterion 1: gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn c01_gradients_match_finite_differences() {
    let t0 = Instant::now();
    const TOL: f64 = 1e-4;

    // (a) every differentiable tape operation, driven off-kink
    let vec_a = Array::from_vec(&[2, 6], (0..12).map(|i| 0.21 * i as f64 - 1.1).collect()).unwrap();
    let vec_b = Array::from_vec(&[2, 6], (0..12).map(|i| 0.17 * (i as f64) - 0.7).collect()).unwrap();
    let row = Array::from_vec(&[6], vec![0.4, -0.8, 1.3, 0.2, -0.5, 0.9]).unwrap();
    let mat_l = Array::from_vec(&[3, 4], (0..12).map(|i| 0.13 * i as f64 - 0.6).collect()).unwrap();
    let mat_r = Array::from_vec(&[4, 2], (0..8).map(|i| 0.19 * i as f64 - 0.8).collect()).unwrap();
    let mat_r2 = Array::from_vec(&[2, 4], (0..8).map(|i| 0.11 * i as f64 - 0.4).collect()).unwrap();
    let chw = Array::from_vec(&[2, 6, 6], (0..72).map(|i| 0.07 * (i % 13) as f64 - 0.4).collect())
        .unwrap();
    let kern = Array::from_vec(&[3, 2, 3, 3], (0..54).map(|i| 0.09 * (i % 11) as f64 - 0.45).collect())
        .unwrap();
    let bias3 = Array::from_vec(&[3], vec![0.1, -0.2, 0.05]).unwrap();
    let gamma = Array::from_vec(&[2], vec![1.05, 0.9]).unwrap();
    let beta = Array::from_vec(&[2], vec![-0.02, 0.07]).unwrap();
    let perm: std::sync::Arc<Vec<usize>> = std::sync::Arc::new({
        let mut p = Vec::with_capacity(12);
        for c in 0..6 {
            for r in 0..2 {
                p.push(r * 6 + c);
            }
        }
        p
    });
    let gather: std::sync::Arc<Vec<usize>> = std::sync::Arc::new(vec![1, 0, 1]);

    type OpCase = (
        &'static str,
        Vec<Array>,
        Box<dyn Fn(&mut Tape, &[wamgate::autodiff::NodeId]) -> wamgate::Result<wamgate::autodiff::NodeId>>,
    );
    let perm2 = std::sync::Arc::clone(&perm);
    let gather2 = std::sync::Arc::clone(&gather);
    let cases: Vec<OpCase> = vec![
        ("add", vec![vec_a.clone(), vec_b.clone()], Box::new(|t, n| {
            let y = t.add(n[0], n[1])?;
            t.sum(y)
        })),
        ("sub", vec![vec_a.clone(), vec_b.clone()], Box::new(|t, n| {
            let y = t.sub(n[0], n[1])?;
            t.sum(y)
        })),
        ("mul", vec![vec_a.clone(), vec_b.clone()], Box::new(|t, n| {
            let y = t.mul(n[0], n[1])?;
            t.sum(y)
        })),
        ("div", vec![vec_a.clone()], Box::new(|t, n| {
            let c = t.constant(Array::from_vec(&[2, 6], vec![1.3; 12]).unwrap());
            let y = t.div(n[0], c)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("minimum", vec![vec_a.clone(), vec_b.clone()], Box::new(|t, n| {
            let y = t.minimum(n[0], n[1])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("clamp", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.clamp(n[0], -0.95, 0.97)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("scale", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.scale(n[0], -1.7)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("neg", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.neg(n[0])?;
            let y = t.exp(y)?;
            t.sum(y)
        })),
        ("add_scalar", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.add_scalar(n[0], 0.37)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("add_rows", vec![vec_a.clone(), row.clone()], Box::new(|t, n| {
            let y = t.add_rows(n[0], n[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("mul_rows", vec![vec_a.clone(), row.clone()], Box::new(|t, n| {
            let y = t.mul_rows(n[0], n[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("sigmoid", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.sigmoid(n[0])?;
            t.sum(y)
        })),
        ("tanh", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.tanh(n[0])?;
            t.sum(y)
        })),
        ("silu", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.silu(n[0])?;
            t.sum(y)
        })),
        ("gelu", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.gelu(n[0])?;
            t.sum(y)
        })),
        ("softplus", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.softplus(n[0])?;
            t.sum(y)
        })),
        ("log", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.mul(n[0], n[0])?;
            let y = t.add_scalar(y, 0.5)?;
            let y = t.log(y)?;
            t.sum(y)
        })),
        ("exp", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.exp(n[0])?;
            t.sum(y)
        })),
        ("matmul", vec![mat_l.clone(), mat_r.clone()], Box::new(|t, n| {
            let y = t.matmul(n[0], n[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("matmul_tb", vec![mat_l.clone(), mat_r2.clone()], Box::new(|t, n| {
            let y = t.matmul_tb(n[0], n[1])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("softmax_rows", vec![mat_l.clone()], Box::new(|t, n| {
            let y = t.softmax_rows(n[0])?;
            let w = t.constant(Array::from_vec(&[3, 4], (0..12).map(|i| 0.3 * i as f64 - 1.0).collect()).unwrap());
            let y = t.mul(y, w)?;
            t.sum(y)
        })),
        ("layer_norm_rows", vec![mat_l.clone()], Box::new(|t, n| {
            let y = t.layer_norm_rows(n[0], 1e-5)?;
            let y = t.silu(y)?;
            t.sum(y)
        })),
        ("group_norm", vec![chw.clone(), gamma.clone(), beta.clone()], Box::new(|t, n| {
            let y = t.group_norm(n[0], n[1], n[2], 2, 1e-5)?;
            let y = t.silu(y)?;
            t.sum(y)
        })),
        ("conv2d", vec![chw.clone(), kern.clone(), bias3.clone()], Box::new(|t, n| {
            let y = t.conv2d(n[0], n[1], n[2], 2, 1)?;
            let y = t.silu(y)?;
            t.sum(y)
        })),
        ("sum", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.mul(n[0], n[0])?;
            t.sum(y)
        })),
        ("mean", vec![vec_a.clone()], Box::new(|t, n| {
            let y = t.mul(n[0], n[0])?;
            t.mean(y)
        })),
        ("max_pool_spatial", vec![chw.clone()], Box::new(|t, n| {
            let y = t.max_pool_spatial(n[0])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("mean_pool_spatial", vec![chw.clone()], Box::new(|t, n| {
            let y = t.mean_pool_spatial(n[0])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("concat", vec![mat_l.clone(), mat_l.clone()], Box::new(|t, n| {
            let y = t.concat(0, &[n[0], n[1]])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
        ("slice_rows", vec![mat_l.clone()], Box::new(|t, n| {
            let y = t.slice_rows(n[0], 1, 3)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("slice_cols", vec![mat_l.clone()], Box::new(|t, n| {
            let y = t.slice_cols(n[0], 1, 4)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("gather_rows", vec![mat_l.clone()], Box::new(move |t, n| {
            let y = t.gather_rows(n[0], std::sync::Arc::clone(&gather2))?;
            let y = t.mul(y, y)?;
            t.sum(y)
        })),
        ("permute", vec![vec_a.clone()], Box::new(move |t, n| {
            let y = t.permute(n[0], std::sync::Arc::clone(&perm2), &[6, 2])?;
            let y = t.tanh(y)?;
            t.sum(y)
        })),
    ];
    let mut worst_op = ("", 0.0f64);
    for (name, inputs, f) in &cases {
        let err = grad_check(inputs, |t, n| f(t, n), 1e-4)
            .unwrap_or_else(|e| panic!("grad_check({name}): {e}"));
        assert!(err <= TOL, "op {name}: max relative gradient error {err}");
        if err > worst_op.1 {
            worst_op = (name, err);
        }
    }

    // (b) the stage-1 training loss through a miniature backbone
    let bb_cfg = BackboneConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        patch_size: 8,
        ffn_mult: 2,
        ..BackboneConfig::default()
    };
    let bb_ps = backbone::init_params(&bb_cfg, 31, true).unwrap();
    let ec = env::EnvConfig::default();
    let ds = env::generate_demos(&ec, 2, 0.0, 5).unwrap();
    let samples = stage1::collect_samples(&ds, bb_cfg.f_frames, 0..2);
    let mut ex_rng = rng::stream(6, "acceptance-grad-batch", &[]);
    let batch: Vec<_> = samples
        .iter()
        .take(2)
        .map(|(s, task)| stage1::make_example(s, *task, false, &mut ex_rng).unwrap())
        .collect();
    let inputs: Vec<Array> = bb_ps.iter().map(|(_, a)| (**a).clone()).collect();
    let err_bb = grad_check(
        &inputs,
        |tape, nodes| {
            let bound = Bound::from_nodes(nodes.to_vec());
            stage1::stage1_loss(tape, &bb_cfg, &bb_ps, &bound, &batch)
        },
        1e-4,
    )
    .unwrap();
    assert!(err_bb <= TOL, "stage-1 loss gradient error {err_bb}");

    // (c) the gating policy's joint log-density
    let gpn_cfg = GPNConfig {
        token_dim: 8,
        conv_channels: 4,
        gn_groups: 2,
        encoder_layers: 1,
        encoder_heads: 2,
        ..GPNConfig::default()
    };
    let gpn_ps = gpn::init_params(&gpn_cfg, 23, true).unwrap();
    let mut st_rng = rng::stream(24, "acceptance-grad-state", &[]);
    let obs = random_frame(3, 0, &ec);
    let sstate = sched::ScheduleState::init(
        &BackboneConfig::default(),
        &obs,
        0,
        &mut st_rng,
    )
    .unwrap();
    let gstate = GatingState {
        latents: {
            let mut l = vec![sstate.obs.clone()];
            l.extend(sstate.video.iter().cloned());
            l
        },
        times: TimestepVector {
            video_t: vec![0.8, 0.45],
            action_t: 0.6,
        },
    };
    let u = vec![0.4, -0.9];
    let inputs: Vec<Array> = gpn_ps.iter().map(|(_, a)| (**a).clone()).collect();
    let err_gpn = grad_check(
        &inputs,
        |tape, nodes| {
            let bound = Bound::from_nodes(nodes.to_vec());
            let latent_nodes: Vec<_> = gstate
                .latents
                .iter()
                .map(|l| tape.constant(l.clone()))
                .collect();
            let pn = gpn::policy_forward_nodes(
                tape,
                &gpn_cfg,
                &gpn_ps,
                &bound,
                &latent_nodes,
                &gstate.times.video_t,
            )?;
            let lp = gpn::log_prob_node(tape, &pn, &u)?;
            tape.sum(lp)
        },
        1e-4,
    )
    .unwrap();
    assert!(err_gpn <= TOL, "gating log-density gradient error {err_gpn}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "gradient suite took {secs:.1}s (budget 120s)");
    println!(
        "criterion 1 PASS: {} ops (worst {} = {:.2e}), stage-1 loss {:.2e}, gating log-prob {:.2e}, {:.1}s",
        cases.len(),
        worst_op.0,
        worst_op.1,
        err_bb,
        err_gpn,
        secs
    );
}

// ---------------------------------------------------------------------------
// criterion 2: squashed-Gaussian density correctness
// ---------------------------------------------------------------------------

#[test]
fn c02_action_density_integrates_to_one_and_matches_samples() {
    // small gating network, randomized so μ is not at the symmetric point
    let cfg = GPNConfig {
        token_dim: 8,
        conv_channels: 4,
        gn_groups: 2,
        encoder_layers: 1,
        encoder_heads: 2,
        img: 8,
        ..GPNConfig::default()
    };
    let ps = gpn::init_params(&cfg, 91, true).unwrap();
    let mut rng = rng::stream(92, "acceptance-density", &[]);
    let latents: Vec<Array> = (0..cfg.f_frames + 1)
        .map(|_| {
            Array::from_vec(
                &[cfg.img, cfg.img],
                (0..cfg.img * cfg.img).map(|_| rng::normal(&mut rng)).collect(),
            )
            .unwrap()
        })
        .collect();
    let state = GatingState {
        latents,
        times: TimestepVector {
            video_t: vec![0.7, 0.3],
            action_t: 0.5,
        },
    };
    let (mu, sigma) = gpn::policy_eval(&cfg, &ps, &state).unwrap();

    // per-frame quadrature of exp(log-density) over the open interval (0,2)
    let n_panels = 1 << 17;
    for f in 0..cfg.f_frames {
        let lo = 1e-12;
        let hi = 2.0 - 1e-12;
        let h = (hi - lo) / n_panels as f64;
        let density = |r: f64| -> f64 {
            let u = (r / (2.0 - r)).ln();
            gpn::log_prob_scalar(mu[f], sigma[f], u).exp()
        };
        let mut integral = density(lo) + density(hi);
        for i in 1..n_panels {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * density(lo + i as f64 * h);
        }
        integral *= h / 3.0;
        assert!(
            (integral - 1.0).abs() <= 1e-4,
            "frame {f}: density integrates to {integral}, want 1 ± 1e-4 (μ={}, σ={})",
            mu[f],
            sigma[f]
        );
    }

    // 1e5-sample histogram vs the stated density, bin-averaged
    let n_samples = 100_000;
    let bins = 40;
    let width = 2.0 / bins as f64;
    let mut counts = vec![vec![0usize; bins]; cfg.f_frames];
    let mut srng = rng::stream(93, "acceptance-density-samples", &[]);
    for _ in 0..n_samples {
        let a = gpn::sample(&cfg, &ps, &state, &mut srng).unwrap();
        for f in 0..cfg.f_frames {
            let b = ((a.r[f] / width) as usize).min(bins - 1);
            counts[f][b] += 1;
        }
    }
    let mut worst = 0.0f64;
    for f in 0..cfg.f_frames {
        for b in 0..bins {
            let lo = b as f64 * width;
            let density = |r: f64| -> f64 {
                let r = r.clamp(1e-12, 2.0 - 1e-12);
                let u = (r / (2.0 - r)).ln();
                gpn::log_prob_scalar(mu[f], sigma[f], u).exp()
            };
            // Simpson over the bin: the histogram estimates the bin mean
            let bin_mean =
                (density(lo) + 4.0 * density(lo + width / 2.0) + density(lo + width)) / 6.0;
            let empirical = counts[f][b] as f64 / (n_samples as f64 * width);
            worst = worst.max((empirical - bin_mean).abs());
        }
    }
    assert!(
        worst <= 0.05,
        "histogram deviates from the density by {worst} (limit 0.05)"
    );
    println!(
        "criterion 2 PASS: per-frame quadrature within 1e-4, histogram max deviation {worst:.4}"
    );
}

// ---------------------------------------------------------------------------
// criterion 3: shared-scalar reduction identity
// ---------------------------------------------------------------------------

/// Independent reference sampler: a single scalar clock for every latent,
/// K uniform Euler steps, velocity queried at the post-update time, the
/// residue below `TIME_SNAP` absorbed on the final step.
#[allow(clippy::type_complexity)]
fn scalar_reference_denoise(
    bb_cfg: &BackboneConfig,
    bb: &ParamSet,
    k_steps: usize,
    obs: &Frame,
    task: usize,
    a_max: f64,
    rng: &mut Rng,
) -> (env::ActionChunk, Vec<Array>, Vec<f64>, Vec<f64>) {
    let draw = |shape: &[usize], rng: &mut Rng| -> Array {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng::normal(rng))
            .collect();
        Array::from_vec(shape, data).unwrap()
    };
    let mut video: Vec<Array> = (0..bb_cfg.f_frames)
        .map(|_| draw(&[bb_cfg.img, bb_cfg.img], rng))
        .collect();
    let mut action = draw(&[bb_cfg.chunk_h, 2], rng);
    let mut t = 1.0f64;
    let dt = 1.0 / k_steps as f64;
    let mut t_log = vec![t];
    let mut ta_log = vec![1.0];
    for k in 0..k_steps {
        let eff = if t - dt < TIME_SNAP { t } else { dt };
        let t_new = t - eff;
        let ta_new = (k_steps - (k + 1)) as f64 / k_steps as f64;
        let times = TimestepVector {
            video_t: vec![t_new; bb_cfg.f_frames],
            action_t: ta_new,
        };
        let state = ChunkState {
            obs: &obs.pixels,
            video: video.iter().collect(),
            action: &action,
            times: &times,
        };
        let (pred, _) = backbone::predict(bb_cfg, bb, &state, task).unwrap();
        for f in 0..bb_cfg.f_frames {
            let d: Vec<f64> = video[f]
                .data()
                .iter()
                .zip(pred.video_vel[f].data())
                .map(|(x, v)| x - eff * v)
                .collect();
            video[f] = Array::from_vec(&[bb_cfg.img, bb_cfg.img], d).unwrap();
        }
        let ad: Vec<f64> = action
            .data()
            .iter()
            .zip(pred.action_vel.data())
            .map(|(x, v)| x - dt * v)
            .collect();
        action = Array::from_vec(&[bb_cfg.chunk_h, 2], ad).unwrap();
        t = t_new;
        t_log.push(t);
        ta_log.push(ta_new);
    }
    (
        env::ActionChunk::from_raw(action, bb_cfg.chunk_h, a_max).unwrap(),
        video,
        t_log,
        ta_log,
    )
}

#[test]
fn c03_shared_gate_reduces_to_scalar_sampler_bit_for_bit() {
    let bb_cfg = BackboneConfig::default();
    let bb = backbone::init_params(&bb_cfg, 77, true).unwrap();
    let ec = env::EnvConfig::default();
    let sched_cfg = SchedConfig::default();
    for i in 0..100u64 {
        let task = (i as usize) % ec.t_tasks;
        let obs = random_frame(5000 + i, task, &ec);
        let mut rng_impl = rng::stream(7000 + i, "acceptance-reduction", &[]);
        let mut rng_ref = rng::stream(7000 + i, "acceptance-reduction", &[]);
        let (chunk, frames, traj) = sched::run_denoise(
            &bb_cfg,
            &bb,
            &sched_cfg,
            &GatePolicy::SharedT,
            &obs,
            task,
            ec.a_max,
            &mut rng_impl,
            None,
        )
        .unwrap();
        let (ref_chunk, ref_video, t_log, ta_log) = scalar_reference_denoise(
            &bb_cfg,
            &bb,
            sched_cfg.k_steps,
            &obs,
            task,
            ec.a_max,
            &mut rng_ref,
        );
        for (a, b) in chunk.deltas.data().iter().zip(ref_chunk.deltas.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "chunk {i}: action bits differ");
        }
        for f in 0..bb_cfg.f_frames {
            for (a, b) in frames[f].pixels.data().iter().zip(ref_video[f].data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "chunk {i}: frame {f} bits differ");
            }
        }
        for (k, times) in traj.times_history.iter().enumerate() {
            assert_eq!(times.action_t.to_bits(), ta_log[k].to_bits(), "chunk {i} step {k}");
            for t in &times.video_t {
                assert_eq!(t.to_bits(), t_log[k].to_bits(), "chunk {i} step {k}");
            }
        }
        assert_eq!(*t_log.last().unwrap(), 0.0, "scalar clock must land on 0");
    }
    println!("criterion 3 PASS: 100 seeded chunks bit-identical to the scalar reference");
}

// ---------------------------------------------------------------------------
// criterion 4: schedule invariants under random gates
// ---------------------------------------------------------------------------

#[test]
fn c04_schedule_invariants_hold_for_random_gates() {
    let bb_cfg = BackboneConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        patch_size: 8,
        ffn_mult: 2,
        ..BackboneConfig::default()
    };
    let bb = backbone::init_params(&bb_cfg, 88, true).unwrap();
    let ec = env::EnvConfig::default();
    let sched_cfg = SchedConfig::default();
    let dt = 1.0 / sched_cfg.k_steps as f64;
    let mut rng = rng::stream(123, "acceptance-invariants", &[]);
    use rand::Rng as _;

    let n_chunks = 100; // × K steps = 1000 random (gate, step) pairs
    for i in 0..n_chunks {
        let task = i % ec.t_tasks;
        let obs = random_frame(9_000 + i as u64, task, &ec);
        let mut state =
            sched::ScheduleState::init(&bb_cfg, &obs, task, &mut rng).unwrap();
        let obs_bits: Vec<u64> = state.obs.data().iter().map(|x| x.to_bits()).collect();
        for _ in 0..sched_cfg.k_steps {
            // fresh random gate every step, spanning the open interval (0,2)
            let r: Vec<f64> = (0..bb_cfg.f_frames)
                .map(|_| rng.random::<f64>() * 1.998 + 1e-3)
                .collect();
            sched::step(
                &bb_cfg,
                &bb,
                &sched_cfg,
                &GatePolicy::Fixed(r),
                &mut state,
                &mut rng,
                None,
            )
            .unwrap();
        }
        // the observation latent stays byte-identical: it is clean (t = 0)
        // and never updated
        let obs_after: Vec<u64> = state.obs.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(obs_bits, obs_after, "observation latent must stay frozen");

        let hist = &state.trajectory.times_history;
        assert_eq!(hist.len(), sched_cfg.k_steps + 1);
        for f in 0..bb_cfg.f_frames {
            assert_eq!(hist[0].video_t[f], 1.0);
            for k in 1..hist.len() {
                let prev = hist[k - 1].video_t[f];
                let cur = hist[k].video_t[f];
                assert!((0.0..=1.0).contains(&cur), "video_t out of [0,1]: {cur}");
                assert!(cur <= prev, "video_t increased: {prev} -> {cur}");
                assert!(
                    prev - cur <= 2.0 * dt + TIME_SNAP,
                    "step {k} frame {f}: decrement {} exceeds 2δt",
                    prev - cur
                );
            }
        }
        for (k, times) in hist.iter().enumerate().skip(1) {
            let want = (sched_cfg.k_steps - k) as f64 / sched_cfg.k_steps as f64;
            assert_eq!(times.action_t, want, "action clock off at step {k}");
        }
        assert_eq!(
            hist.last().unwrap().action_t,
            0.0,
            "action clock must hit zero exactly at step K"
        );
    }

    // the observation/task tokens are embedded at the pinned timestep 0
    // regardless of the video/action clocks
    let mut tape = Tape::inference();
    let bound_bb = bb.bind_frozen(&mut tape);
    let times = TimestepVector {
        video_t: vec![0.63, 0.29],
        action_t: 0.41,
    };
    let obs = random_frame(1, 0, &ec);
    let video: Vec<Array> = (0..bb_cfg.f_frames)
        .map(|_| Array::zeros(&[bb_cfg.img, bb_cfg.img]))
        .collect();
    let action = Array::zeros(&[bb_cfg.chunk_h, 2]);
    let chunk_state = ChunkState {
        obs: &obs.pixels,
        video: video.iter().collect(),
        action: &action,
        times: &times,
    };
    let seq = backbone::embed(&mut tape, &bb_cfg, &bb, &bound_bb, &chunk_state, 0).unwrap();
    let tt = seq.token_times();
    let tokens_per_frame = (bb_cfg.img / bb_cfg.patch_size) * (bb_cfg.img / bb_cfg.patch_size);
    for t in tt.iter().take(1 + tokens_per_frame) {
        assert_eq!(*t, TimestepVector::OBS_T, "task/obs tokens must carry t = 0");
    }
    println!("criterion 4 PASS: 1000 random gate steps satisfy every schedule invariant");
}

// ---------------------------------------------------------------------------
// criterion 5: policy-gradient unit suite
// ---------------------------------------------------------------------------

#[test]
fn c05_group_relative_update_unit_suite() {
    // hand-computed advantages for one winner among eight
    let mut rewards = vec![0.0; 8];
    rewards[0] = 1.0;
    let advs = grpo::advantages(&rewards, 1e-8).unwrap();
    assert!((advs[0] - 2.6458).abs() < 1e-4, "winner advantage {}", advs[0]);
    for a in &advs[1..] {
        assert!((a + 0.37796).abs() < 1e-4, "loser advantage {a}");
    }

    // equal rewards carry no learning signal
    for v in [0.0, 1.0] {
        let advs = grpo::advantages(&vec![v; 8], 1e-8).unwrap();
        assert!(advs.iter().all(|a| a.abs() < 1e-6), "equal rewards: {advs:?}");
    }

    // a tiny stage-2 setup shared by the remaining checks
    let run = {
        let mut r = RunConfig::default();
        r.grpo.k_steps = 3;
        r.grpo.epochs = 2;
        r.grpo.episodes_per_epoch = 4;
        r.grpo.group_size = 2;
        r.grpo.inner_epochs = 2;
        r
    };
    let bb_cfg = BackboneConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        patch_size: 8,
        ffn_mult: 2,
        ..BackboneConfig::default()
    };
    let bb = backbone::init_params(&bb_cfg, 21, true).unwrap();
    let gpn_ps = gpn::init_params(&run.gpn, 40, true).unwrap();
    let sched_cfg = SchedConfig {
        k_steps: run.grpo.k_steps,
    };
    let policy = GatePolicy::Learned {
        cfg: &run.gpn,
        params: &gpn_ps,
        deterministic: false,
    };
    let seeds: Vec<u64> = (0..4).map(|i| env::derive_seed(7, &[i])).collect();
    let records =
        grpo::collect_group(&run.env, &bb_cfg, &bb, &sched_cfg, &policy, 0, &seeds).unwrap();
    let fake_advs = [1.0, -0.25, 0.5, -1.25];

    // ratios are exactly 1 on the first inner epoch, so the clipped
    // surrogate collapses to mean(advantage × steps × frames)
    let batch = GrpoBatch {
        episodes: records.iter().zip(fake_advs).collect::<Vec<_>>(),
    };
    let mut tape = Tape::new();
    let bound = gpn_ps.bind(&mut tape);
    let loss =
        grpo::surrogate_loss(&mut tape, &run.gpn, &gpn_ps, &bound, &batch, 0.2, 0.0).unwrap();
    let steps_frames = (records[0].steps.len() * run.gpn.f_frames) as f64;
    let want = -fake_advs.iter().sum::<f64>() / 4.0 * steps_frames;
    let got = tape.value(loss).item();
    assert!(
        (got - want).abs() < 1e-9,
        "unit-ratio surrogate: got {got}, want {want}"
    );

    // outside the trust region the clipped branch is constant: positive
    // advantages stop producing gradient, negative ones keep flowing
    for (adv, expect_grad) in [(1.0, false), (-1.0, true)] {
        let mut shifted = records.clone();
        for rec in &mut shifted {
            for step in &mut rec.steps {
                for lp in &mut step.log_prob_frames {
                    *lp -= 1.5f64.ln(); // stored π_old shrinks → ratio 1.5
                }
            }
        }
        let batch = GrpoBatch {
            episodes: shifted.iter().map(|r| (r, adv)).collect(),
        };
        let mut tape = Tape::new();
        let bound = gpn_ps.bind(&mut tape);
        let loss =
            grpo::surrogate_loss(&mut tape, &run.gpn, &gpn_ps, &bound, &batch, 0.2, 0.0).unwrap();
        tape.backward(loss).unwrap();
        let gmax = gpn_ps
            .collect_grads(&tape, &bound)
            .into_iter()
            .flatten()
            .flat_map(|g| g.data().iter().map(|x| x.abs()).collect::<Vec<_>>())
            .fold(0.0f64, f64::max);
        if expect_grad {
            assert!(gmax > 1e-8, "negative advantage at ratio 1.5 must keep gradient");
        } else {
            assert!(gmax < 1e-12, "positive advantage at ratio 1.5 must be clipped, got {gmax}");
        }
    }

    // a full miniature stage-2 run leaves the frozen backbone untouched
    let fp_before = bb.fingerprint();
    let mut gpn_train = gpn::init_params(&run.gpn, run.grpo.seed, false).unwrap();
    let metrics = grpo::train_stage2(
        &run.env,
        &bb_cfg,
        &bb,
        &run.gpn,
        &mut gpn_train,
        &run.grpo,
        |_| {},
    )
    .unwrap();
    assert_eq!(metrics.len(), run.grpo.epochs);
    assert_eq!(bb.fingerprint(), fp_before, "backbone hash changed");
    println!("criterion 5 PASS: advantages, unit ratios, clip gating, frozen backbone");
}

// ---------------------------------------------------------------------------
// criterion 6: stage-1 learning at the default configuration
// ---------------------------------------------------------------------------

#[test]
fn c06_stage1_training_reduces_holdout_loss_five_fold() {
    let p = pilot();
    let ratio = p.initial_holdout_loss / p.final_holdout_loss;
    assert!(
        p.run.stage1.steps <= 2000,
        "budget allows at most 2000 steps, configured {}",
        p.run.stage1.steps
    );
    assert!(
        ratio >= 5.0,
        "held-out loss only improved {ratio:.2}x ({:.4} -> {:.4})",
        p.initial_holdout_loss,
        p.final_holdout_loss
    );
    assert!(
        p.df_train_secs < 1800.0,
        "stage-1 training took {:.0}s (budget 30 min)",
        p.df_train_secs
    );
    println!(
        "criterion 6 PASS: held-out loss {:.4} -> {:.4} ({ratio:.1}x) in {:.0}s over {} steps",
        p.initial_holdout_loss, p.final_holdout_loss, p.df_train_secs, p.run.stage1.steps
    );
}

// ---------------------------------------------------------------------------
// criterion 7: attention follows the noise level
// ---------------------------------------------------------------------------

#[test]
fn c07_action_attention_decreases_with_frame_noise() {
    let p = pilot();
    let table = backbone::attention_probe(&p.run.backbone, &p.bb_df, &p.dataset, 10, 4242).unwrap();
    let overall = table.overall_spearman().unwrap();
    let names = ["early", "middle", "late"];
    for (g, name) in names.iter().enumerate() {
        let rho = table.group_spearman(g).unwrap();
        println!(
            "criterion 7 info: {name} layers ρ = {rho:+.3} ({})",
            if rho < 0.0 { "negative" } else { "non-negative" }
        );
    }
    assert!(
        overall <= -0.5,
        "overall Spearman ρ between frame noise and action→frame attention is {overall:.3}, want ≤ -0.5"
    );
    println!("criterion 7 PASS: overall ρ = {overall:+.3}");
}

// ---------------------------------------------------------------------------
// criterion 8: schedule ablation ordering
// ---------------------------------------------------------------------------

#[test]
fn c08_ablation_ordering_over_five_seeds() {
    let t0 = Instant::now();
    let p = pilot();
    let per_task = 67; // × 3 tasks = 201 episodes ≥ 200 per arm
    let mut sums = [0.0f64; 4]; // shared_t, stage1, handcrafted, full
    let n_seeds = 5;
    for s in 0..n_seeds {
        let (bb_df, bb_sh, gpn_params) = if s == 0 {
            (p.bb_df.clone(), p.bb_sh.clone(), p.gpn_params.clone())
        } else {
            let (df, _, _, _) = train_backbone_arm(&p.run, &p.dataset, s, false);
            let (sh, _, _, _) = train_backbone_arm(&p.run, &p.dataset, s, true);
            let (g, _, _) = train_gpn_arm(&p.run, &df, p.run.grpo.seed + s);
            (df, sh, g)
        };
        let eval_seed = p.run.eval.seed + s;
        let learned = GatePolicy::Learned {
            cfg: &p.run.gpn,
            params: &gpn_params,
            deterministic: true,
        };
        let arms = [
            arm_success(&p.run, &bb_sh, &GatePolicy::SharedT, per_task, eval_seed),
            arm_success(&p.run, &bb_df, &GatePolicy::SharedT, per_task, eval_seed),
            arm_success(&p.run, &bb_df, &GatePolicy::HandCrafted, per_task, eval_seed),
            arm_success(&p.run, &bb_df, &learned, per_task, eval_seed),
        ];
        println!(
            "criterion 8 info: seed {s}: shared_t {:.3} stage1 {:.3} handcrafted {:.3} full {:.3}",
            arms[0], arms[1], arms[2], arms[3]
        );
        for (acc, a) in sums.iter_mut().zip(arms) {
            *acc += a;
        }
    }
    let [shared_t, stage1_arm, handcrafted, full] = sums.map(|s| s / n_seeds as f64);
    println!(
        "criterion 8 info: means over {n_seeds} seeds — shared_t {shared_t:.3}, stage1 {stage1_arm:.3}, handcrafted {handcrafted:.3}, full {full:.3}"
    );
    assert!(
        full >= handcrafted,
        "full ({full:.3}) must not trail the hand-crafted schedule ({handcrafted:.3})"
    );
    assert!(
        full >= stage1_arm,
        "full ({full:.3}) must not trail shared-scalar inference ({stage1_arm:.3})"
    );
    assert!(
        stage1_arm >= shared_t,
        "independent-time training ({stage1_arm:.3}) must not trail shared-time training ({shared_t:.3})"
    );
    assert!(
        full - shared_t >= 0.05,
        "full − shared_t = {:.3}, want ≥ 0.05 (5 percentage points)",
        full - shared_t
    );
    let secs = t0.elapsed().as_secs_f64()
        + p.df_train_secs
        + p.sh_train_secs
        + p.gpn_train_secs;
    assert!(
        secs < 4.0 * 3600.0,
        "ablation consumed {secs:.0}s including shared fixture training (budget 4h)"
    );
    println!(
        "criterion 8 PASS: full {full:.3} ≥ handcrafted {handcrafted:.3}, full ≥ stage1 {stage1_arm:.3} ≥ shared_t {shared_t:.3}, gap {:.3}; {secs:.0}s",
        full - shared_t
    );
}

// ---------------------------------------------------------------------------
// criterion 9: learned-schedule diversity
// ---------------------------------------------------------------------------

#[test]
fn c09_learned_schedules_differ_across_tasks_and_frames() {
    let p = pilot();
    let sched_cfg = SchedConfig {
        k_steps: p.run.grpo.k_steps,
    };
    let policy = GatePolicy::Learned {
        cfg: &p.run.gpn,
        params: &p.gpn_params,
        deterministic: true,
    };
    let per_task = 34;
    let f_frames = p.run.env.f_frames;
    let mut final_t = vec![vec![Vec::new(); f_frames]; p.run.env.t_tasks];
    let mut max_frame_gap = 0.0f64;
    for task in 0..p.run.env.t_tasks {
        let rollouts: Vec<_> = (0..per_task)
            .into_par_iter()
            .map(|i| {
                let seed = env::derive_seed(31_000, &[task as u64, i as u64]);
                sched::rollout_episode(
                    &p.run.env,
                    &p.run.backbone,
                    &p.bb_df,
                    &sched_cfg,
                    &policy,
                    task,
                    seed,
                )
            })
            .collect::<wamgate::Result<Vec<_>>>()
            .unwrap();
        for ep in &rollouts {
            for traj in &ep.trajectories {
                let last = traj.times_history.last().unwrap();
                for f in 0..f_frames {
                    final_t[task][f].push(last.video_t[f]);
                }
                for times in &traj.times_history {
                    for a in 0..f_frames {
                        for b in a + 1..f_frames {
                            max_frame_gap = max_frame_gap
                                .max((times.video_t[a] - times.video_t[b]).abs());
                        }
                    }
                }
            }
        }
    }
    let means: Vec<Vec<f64>> = final_t
        .iter()
        .map(|per_frame| per_frame.iter().map(|xs| stats::mean(xs)).collect())
        .collect();
    for (task, m) in means.iter().enumerate() {
        println!(
            "criterion 9 info: task {task} mean final residual t̄ = {:?}",
            m.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
    let mut max_task_gap = 0.0f64;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            for f in 0..f_frames {
                max_task_gap = max_task_gap.max((means[a][f] - means[b][f]).abs());
            }
        }
    }
    assert!(
        max_task_gap >= 0.05,
        "largest between-task final-residual difference is {max_task_gap:.4}, want ≥ 0.05"
    );
    assert!(
        max_frame_gap >= 0.02,
        "largest within-chunk frame divergence is {max_frame_gap:.4}, want ≥ 0.02"
    );
    println!(
        "criterion 9 PASS: task gap {max_task_gap:.3}, frame divergence {max_frame_gap:.3}"
    );
}

// ---------------------------------------------------------------------------
// criterion 10: end-to-end reproducibility of every command
// ---------------------------------------------------------------------------

#[test]
fn c10_reruns_produce_identical_artifacts() {
    use std::process::Command;

    let bin = env!("CARGO_BIN_EXE_wamgate");
    let cfg = r#"{
      "data": { "episodes": 6, "seed": 11 },
      "stage1": { "steps": 2, "batch_size": 2, "holdout_episodes": 2, "log_every": 1 },
      "grpo": {
        "epochs": 1, "episodes_per_epoch": 2, "group_size": 2,
        "inner_epochs": 1, "k_steps": 3
      },
      "eval": { "episodes_per_task": 1, "seed": 5 }
    }"#;

    let run_all = |root: &std::path::Path| {
        std::fs::write(root.join("cfg.json"), cfg).unwrap();
        let run = |args: &[&str]| {
            let out = Command::new(bin)
                .current_dir(root)
                .args(args)
                .output()
                .expect("spawn");
            assert!(
                out.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        run(&["gen-data", "--config", "cfg.json", "--out", "data"]);
        run(&["train-backbone", "--config", "cfg.json", "--data", "data", "--out", "bb.ckpt"]);
        run(&["train-backbone", "--config", "cfg.json", "--data", "data", "--out", "bbs.ckpt", "--shared-times"]);
        run(&["train-gpn", "--config", "cfg.json", "--backbone", "bb.ckpt", "--out", "gpn.ckpt"]);
        run(&["eval", "--config", "cfg.json", "--backbone", "bb.ckpt", "--gpn", "gpn.ckpt", "--out", "eval.csv"]);
        run(&["ablate", "--config", "cfg.json", "--backbone-shared", "bbs.ckpt", "--backbone-df", "bb.ckpt", "--gpn", "gpn.ckpt", "--episodes", "1", "--out", "ablate.csv"]);
        run(&["probe-attention", "--config", "cfg.json", "--backbone", "bb.ckpt", "--data", "data", "--bins", "4", "--out", "probe.csv"]);
        run(&["export-schedules", "--config", "cfg.json", "--backbone", "bb.ckpt", "--gpn", "gpn.ckpt", "--episodes", "1", "--out", "sched"]);
        for manifest in [
            "data", "bb.ckpt.manifest.json", "bbs.ckpt.manifest.json",
            "gpn.ckpt.manifest.json", "eval.csv.manifest.json",
            "ablate.csv.manifest.json", "probe.csv.manifest.json", "sched",
        ] {
            run(&["verify", "--manifest", manifest]);
        }
    };

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run_all(d1.path());
    run_all(d2.path());

    // identical artifact bytes everywhere (manifests themselves contain
    // wall-clock timestamps, so compare the files they inventory)
    let files = [
        "data/manifest.json",
        "data/ep00000.bin",
        "bb.ckpt",
        "bbs.ckpt",
        "gpn.ckpt",
        "gpn.metrics.csv",
        "eval.csv",
        "ablate.csv",
        "probe.csv",
        "sched/schedule_trace.csv",
        "sched/schedule_summary.csv",
    ];
    for f in files {
        let a = std::fs::read(d1.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let b = std::fs::read(d2.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert_eq!(a, b, "artifact {f} differs between identical reruns");
    }
    println!("criterion 10 PASS: {} artifacts bit-identical across reruns, all manifests verify", files.len());
}

// ---------------------------------------------------------------------------
// training-dynamics expectation from the stage-2 contract
// ---------------------------------------------------------------------------

#[test]
fn c98_stage2_reward_trend_is_non_decreasing() {
    let p = pilot();
    let epochs: Vec<f64> = p.gpn_metrics.iter().map(|m| m.epoch as f64).collect();
    let rewards: Vec<f64> = p.gpn_metrics.iter().map(|m| m.mean_reward).collect();
    let spread = rewards.iter().cloned().fold(f64::NAN, f64::max)
        - rewards.iter().cloned().fold(f64::NAN, f64::min);
    if spread == 0.0 {
        println!("stage-2 reward flat at {:.3}; trend check vacuous", rewards[0]);
        return;
    }
    let rho = stats::spearman_rho(&epochs, &rewards).unwrap();
    assert!(
        rho > 0.0,
        "mean training reward should trend upward over epochs, ρ = {rho:.3}"
    );
    println!("stage-2 reward trend PASS: ρ(epoch, reward) = {rho:+.3}");
}
