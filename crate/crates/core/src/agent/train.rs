//! Training loop, evaluation, and the non-RL baselines.
//!
//! One collected episode is followed by a fixed number of update
//! iterations (sample, critic step, actor step, target EMA), so compute
//! per environment step is identical across variants. Every random
//! stream is derived from the run seed with its own label, which makes
//! whole runs replayable byte-for-byte.

use std::time::Instant;

use crate::agent::{Agent, AgentConfig, Variant};
use crate::env::demo::DemoSet;
use crate::env::{EnvName, ToyEnv};
use crate::error::{Error, Result};
use crate::guidance::{DemoDataset, GuidanceModel};
use crate::nn::{mlp_eval, MlpSpec, ParameterVector};
use crate::replay::Transition;
use crate::rng::{derive_rng, derive_seed};
use crate::stats::success_rate;
use crate::Scalar;

/// Evaluation episodes per measurement.
pub const EVAL_EPISODES: usize = 20;

/// One logged training interval.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainRecord {
    /// Environment steps consumed so far.
    pub step: u64,
    /// Mean critic loss over the interval's updates.
    pub critic_loss: Scalar,
    /// Mean actor objective over the interval's updates.
    pub actor_objective: Scalar,
    /// Success rate over [`EVAL_EPISODES`] deterministic episodes.
    pub eval_success: Scalar,
    /// Wall-clock seconds since training started. Reporting only; never
    /// part of reproducibility comparisons.
    pub seconds: f64,
}

/// Per-interval records with monotone step counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

/// Everything a finished training run hands back.
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Final actor network (absent for `vinn`, which has no parameters).
    pub actor: Option<(MlpSpec, ParameterVector<Scalar>)>,
    /// Final critic network (RL variants only).
    pub critic: Option<(MlpSpec, ParameterVector<Scalar>)>,
    /// Success rate of the final policy over [`EVAL_EPISODES`] episodes.
    pub final_eval: Scalar,
}

/// A frozen feed-forward policy.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    pub spec: MlpSpec,
    pub params: ParameterVector<Scalar>,
}

impl ActorPolicy {
    pub fn act(&self, policy_input: &[Scalar]) -> Result<Vec<Scalar>> {
        let mut action = mlp_eval(&self.spec, &self.params, policy_input)?;
        for a in &mut action {
            *a = a.clamp(-1.0, 1.0);
        }
        Ok(action)
    }
}

/// Runs `episodes` deterministic evaluation episodes and returns the
/// fraction that end in success. Episode seeds derive from
/// `(seed, "eval-episode", tag, episode)`, so a given evaluation point is
/// reproducible in isolation.
pub fn evaluate_policy(
    env_name: EnvName,
    episodes: usize,
    seed: u64,
    tag: u64,
    mut policy: impl FnMut(&[Scalar]) -> Result<Vec<Scalar>>,
) -> Result<Scalar> {
    let mut env = ToyEnv::new(env_name);
    let mut outcomes = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let ep_seed = derive_seed(seed, "eval-episode", &[tag, episode as u64]);
        let mut obs = env.reset(ep_seed);
        let mut success = false;
        for _ in 0..env.spec().horizon {
            let action = policy(&obs.policy_input())?;
            let result = env.step(&action)?;
            obs = result.next_observation;
            success = result.success;
        }
        outcomes.push(success);
    }
    success_rate(&outcomes)
}

/// Fits the behavior-cloning baseline: an actor-shaped network regressed
/// onto demonstration actions. Returns the policy and per-epoch losses.
pub fn bc_fit(
    demos: &DemoSet,
    config: &AgentConfig,
    rng: &mut crate::rng::Rng,
) -> Result<(ActorPolicy, Vec<Scalar>)> {
    let dataset = DemoDataset::from_demo_set(demos)?;
    let (propagator, losses) = crate::guidance::fit_bc_propagator(
        &dataset,
        &config.hidden_dims,
        config.bc_epochs,
        config.batch_size,
        config.actor_lr,
        rng,
    )?;
    let (spec, params) = propagator
        .bc_params()
        .expect("fit_bc_propagator returns a BC propagator")
        .clone();
    Ok((ActorPolicy { spec, params }, losses))
}

/// The non-parametric baseline: the propagated expert estimate used
/// directly as the policy, with no training at all.
pub fn vinn_policy(demos: &DemoSet, k: usize) -> Result<GuidanceModel> {
    let dataset = DemoDataset::from_demo_set(demos)?;
    GuidanceModel::nonparametric(dataset, k, None)
}

/// Trains an agent for `total_steps` environment steps, evaluating every
/// `eval_every` steps; see [`train_with_callback`].
pub fn train(
    env_name: EnvName,
    config: &AgentConfig,
    demos: Option<&DemoSet>,
    total_steps: u64,
    eval_every: u64,
    seed: u64,
) -> Result<TrainOutcome> {
    train_with_callback(env_name, config, demos, total_steps, eval_every, seed, |_, _| Ok(()))
}

/// Full training entry point. `on_eval` fires after each logged interval
/// with the step count and, for RL variants, the current networks; the
/// CLI uses it to persist interval checkpoints.
pub fn train_with_callback(
    env_name: EnvName,
    config: &AgentConfig,
    demos: Option<&DemoSet>,
    total_steps: u64,
    eval_every: u64,
    seed: u64,
    mut on_eval: impl FnMut(u64, Option<&Agent>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if eval_every == 0 {
        return Err(Error::config("eval_every must be >= 1"));
    }
    match config.variant {
        Variant::Bc => train_bc(env_name, config, demos, total_steps, seed),
        Variant::Vinn => train_vinn(env_name, config, demos, total_steps, seed),
        _ => train_rl(
            env_name,
            config,
            demos,
            total_steps,
            eval_every,
            seed,
            &mut on_eval,
        ),
    }
}

fn require_demos<'d>(
    config: &AgentConfig,
    demos: Option<&'d DemoSet>,
) -> Result<&'d DemoSet> {
    demos.ok_or_else(|| {
        Error::config(format!(
            "variant {} requires a demonstration file",
            config.variant
        ))
    })
}

fn train_bc(
    env_name: EnvName,
    config: &AgentConfig,
    demos: Option<&DemoSet>,
    total_steps: u64,
    seed: u64,
) -> Result<TrainOutcome> {
    let demos = require_demos(config, demos)?;
    check_demo_env(env_name, demos)?;
    let started = Instant::now();
    let mut bc_rng = derive_rng(seed, "bc-fit", &[]);
    let (policy, losses) = bc_fit(demos, config, &mut bc_rng)?;
    let final_eval = evaluate_policy(env_name, EVAL_EPISODES, seed, u64::MAX, |input| {
        policy.act(input)
    })?;
    let mut log = TrainLog::default();
    if total_steps > 0 {
        log.records.push(TrainRecord {
            step: total_steps,
            critic_loss: 0.0,
            actor_objective: -losses.last().copied().unwrap_or(0.0),
            eval_success: final_eval,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        log,
        actor: Some((policy.spec, policy.params)),
        critic: None,
        final_eval,
    })
}

fn train_vinn(
    env_name: EnvName,
    config: &AgentConfig,
    demos: Option<&DemoSet>,
    total_steps: u64,
    seed: u64,
) -> Result<TrainOutcome> {
    let demos = require_demos(config, demos)?;
    check_demo_env(env_name, demos)?;
    let started = Instant::now();
    let guidance = vinn_policy(demos, config.k_neighbors)?;
    let mut prop_rng = derive_rng(seed, "propagate", &[]);
    let final_eval = evaluate_policy(env_name, EVAL_EPISODES, seed, u64::MAX, |input| {
        guidance.estimate(input, &mut prop_rng)
    })?;
    let mut log = TrainLog::default();
    if total_steps > 0 {
        log.records.push(TrainRecord {
            step: total_steps,
            critic_loss: 0.0,
            actor_objective: 0.0,
            eval_success: final_eval,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        log,
        actor: None,
        critic: None,
        final_eval,
    })
}

fn check_demo_env(env_name: EnvName, demos: &DemoSet) -> Result<()> {
    if demos.header.env != env_name {
        return Err(Error::config(format!(
            "demonstrations were recorded on {} but the run targets {}",
            demos.header.env, env_name
        )));
    }
    Ok(())
}

fn train_rl(
    env_name: EnvName,
    config: &AgentConfig,
    demos: Option<&DemoSet>,
    total_steps: u64,
    eval_every: u64,
    seed: u64,
    on_eval: &mut impl FnMut(u64, Option<&Agent>) -> Result<()>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let env_spec = crate::env::EnvSpec::for_name(env_name);
    let mut init_rng = derive_rng(seed, "net-init", &[]);
    let mut bc_rng = derive_rng(seed, "bc-fit", &[]);
    let mut agent = Agent::new(env_spec, config.clone(), demos, &mut init_rng, &mut bc_rng)?;

    let mut action_rng = derive_rng(seed, "action", &[]);
    let mut sample_rng = derive_rng(seed, "sample", &[]);
    let mut prop_rng = derive_rng(seed, "propagate", &[]);

    let mut env = ToyEnv::new(env_name);
    let horizon = env.spec().horizon as u64;
    let mut log = TrainLog::default();
    let mut steps: u64 = 0;
    let mut episode_index: u64 = 0;
    let mut evals_done: u64 = 0;
    let mut interval_critic_loss = 0.0;
    let mut interval_actor_objective = 0.0;
    let mut interval_updates = 0usize;

    while steps < total_steps {
        // Collect one exploratory episode.
        let ep_seed = derive_seed(seed, "episode", &[episode_index]);
        let mut obs = env.reset(ep_seed);
        let mut episode = Vec::with_capacity(env.spec().horizon);
        for step in 0..env.spec().horizon {
            let action = agent.select_action(&obs.policy_input(), true, &mut action_rng)?;
            let result = env.step(&action)?;
            episode.push(Transition {
                state: obs,
                action,
                reward: result.reward,
                next_state: result.next_observation.clone(),
                episode_id: episode_index,
                step_index: step,
            });
            obs = result.next_observation;
        }
        agent.store_episode(episode)?;
        steps += horizon;
        episode_index += 1;

        for _ in 0..config.updates_per_episode {
            let batch = agent.sample_batch(&mut sample_rng)?;
            interval_critic_loss += agent.critic_update(&batch, &mut prop_rng)?;
            interval_actor_objective += agent.actor_update(&batch, &mut prop_rng)?;
            agent.update_targets()?;
            interval_updates += 1;
        }

        if steps / eval_every > evals_done {
            evals_done = steps / eval_every;
            let eval_success = {
                let nets = agent.nets();
                let policy = ActorPolicy {
                    spec: nets.actor_spec.clone(),
                    params: nets.actor.clone(),
                };
                evaluate_policy(env_name, EVAL_EPISODES, seed, evals_done, |input| {
                    policy.act(input)
                })?
            };
            let updates = interval_updates.max(1) as Scalar;
            log.records.push(TrainRecord {
                step: steps,
                critic_loss: interval_critic_loss / updates,
                actor_objective: interval_actor_objective / updates,
                eval_success,
                seconds: started.elapsed().as_secs_f64(),
            });
            interval_critic_loss = 0.0;
            interval_actor_objective = 0.0;
            interval_updates = 0;
            on_eval(steps, Some(&agent))?;
        }
    }

    let final_eval = {
        let nets = agent.nets();
        let policy = ActorPolicy {
            spec: nets.actor_spec.clone(),
            params: nets.actor.clone(),
        };
        evaluate_policy(env_name, EVAL_EPISODES, seed, u64::MAX, |input| {
            policy.act(input)
        })?
    };

    let nets = agent.nets();
    Ok(TrainOutcome {
        log,
        actor: Some((nets.actor_spec.clone(), nets.actor.clone())),
        critic: Some((nets.critic_spec.clone(), nets.critic.clone())),
        final_eval,
    })
}
