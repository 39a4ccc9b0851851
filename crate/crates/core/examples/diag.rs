//! Scratch diagnostic: trace closed-loop rollout geometry per chunk.

use wamgate::backbone;
use wamgate::config::RunConfig;
use wamgate::env::{self, derive_seed};
use wamgate::sched::{self, GatePolicy, SchedConfig};

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let run = RunConfig::default();
    let ec = &run.env;
    let (bb_cfg, bb_params) = backbone::load_backbone("/root/pilot2/bb_df.ckpt".as_ref())?;
    let sc = SchedConfig {
        k_steps: run.grpo.k_steps,
    };
    for task in 0..ec.t_tasks {
        for i in 0..4u64 {
            let seed = derive_seed(777, &[task as u64, i]);
            let mut state = env::reset(ec, task, seed)?;
            let mut rng = wamgate::rng::stream(seed, "rollout", &[task as u64]);
            let mut line = format!(
                "task {task} ep {i}  d0 {:.3}",
                dist(state.agent_pos, state.target_pos)
            );
            let mut all_states = vec![state];
            for _c in 0..ec.chunks_per_episode {
                let obs = env::render(ec, &state);
                let (chunk, _, _) = sched::run_denoise(
                    &bb_cfg,
                    &bb_params,
                    &sc,
                    &GatePolicy::SharedT,
                    &obs,
                    task,
                    ec.a_max,
                    &mut rng,
                    None,
                )?;
                let (next, _, chunk_states) = env::step_chunk_traced(ec, &state, &chunk)?;
                all_states.extend(chunk_states.iter().copied());
                state = next;
                line.push_str(&format!(
                    " -> {:.3}",
                    dist(state.agent_pos, state.target_pos)
                ));
                // within-chunk minimum distance (did it pass through the zone?)
                let dmin = chunk_states
                    .iter()
                    .map(|s| dist(s.agent_pos, s.target_pos))
                    .fold(f64::INFINITY, f64::min);
                line.push_str(&format!("(min {dmin:.3})"));
            }
            let r = env::episode_reward(ec, &all_states)?;
            println!("{line}  reward {r}");
        }
    }
    Ok(())
}
