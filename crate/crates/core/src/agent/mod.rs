//! Guided deterministic actor-critic and its baselines.
//!
//! All variants share one machinery; they differ only in whether the
//! critic target and the actor objective carry the expert-dissimilarity
//! penalty and in where the reference expert action comes from:
//!
//! - `dex`: critic target `r + gamma * (Q' - alpha * d(a', a_e'))` with
//!   `a_e'` propagated from demonstrations, actor objective
//!   `Q(s, pi(s)) - alpha * d(pi(s), a_e)`;
//! - `dex_ra`: the actor penalty only, plain critic target;
//! - `dex_ac`: neither penalty; demonstrations only enter through the
//!   replay mix;
//! - `dex_bc`: `dex` with a behavior-cloned propagator instead of the
//!   k-NN regression;
//! - `ddpg`: plain actor-critic (run without demonstrations it is the
//!   pure-RL baseline; `alpha = 0` under `dex` reduces to it exactly);
//! - `ddpgbc`: plain critic, actor penalized by a Q-filtered
//!   behavior-cloning term on demonstration items;
//! - `bc` / `vinn`: no reinforcement learning at all (supervised
//!   regression on demos, or the propagated estimate used directly).

mod train;

pub use train::{
    bc_fit, evaluate_policy, train, train_with_callback, vinn_policy, ActorPolicy, TrainLog,
    TrainOutcome, TrainRecord,
};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::guidance::GuidanceModel;
use crate::nn::{
    adam_step, default_hidden_dims, mlp_backward, mlp_eval, mlp_forward_batch, polyak_update,
    AdamState, Gradients, MlpSpec, ParameterVector,
};
use crate::replay::{sample_mixed, BatchSource, EpisodeBuffer, SampledBatch};
use crate::rng::Rng;
use crate::Scalar;

/// Agent flavors behind the single training interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dex,
    DexRa,
    DexAc,
    DexBc,
    Ddpg,
    Ddpgbc,
    Bc,
    Vinn,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Dex,
        Variant::DexRa,
        Variant::DexAc,
        Variant::DexBc,
        Variant::Ddpg,
        Variant::Ddpgbc,
        Variant::Bc,
        Variant::Vinn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dex => "dex",
            Variant::DexRa => "dex_ra",
            Variant::DexAc => "dex_ac",
            Variant::DexBc => "dex_bc",
            Variant::Ddpg => "ddpg",
            Variant::Ddpgbc => "ddpgbc",
            Variant::Bc => "bc",
            Variant::Vinn => "vinn",
        }
    }

    pub fn parse(value: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == value)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown variant '{value}' (dex, dex_ra, dex_ac, dex_bc, ddpg, ddpgbc, bc, vinn)"
                ))
            })
    }

    /// Everything except pure DDPG requires demonstration data.
    pub fn needs_demos(self) -> bool {
        !matches!(self, Variant::Ddpg)
    }

    /// Does the actor objective carry the guided penalty (given alpha > 0)?
    fn guided_actor(self) -> bool {
        matches!(self, Variant::Dex | Variant::DexRa | Variant::DexBc)
    }

    /// Does the critic target carry the guided penalty (given alpha > 0)?
    fn guided_critic(self) -> bool {
        matches!(self, Variant::Dex | Variant::DexBc)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every knob of an agent run. Serialized verbatim into run directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Discount factor.
    pub gamma: Scalar,
    /// Exploration coefficient weighting the expert-dissimilarity terms.
    pub alpha: Scalar,
    /// Neighbors used by the non-parametric propagator.
    pub k_neighbors: usize,
    /// Per-component Gaussian exploration noise scale.
    pub noise_scale: Scalar,
    /// Probability of replacing an exploratory action with a uniform one.
    pub random_action_prob: Scalar,
    pub batch_size: usize,
    /// Share of each batch drawn from the demonstration buffer.
    pub demo_fraction: Scalar,
    /// Target-network EMA keep-rate per update.
    pub polyak: Scalar,
    pub actor_lr: Scalar,
    pub critic_lr: Scalar,
    /// Hindsight relabeling probability (future strategy).
    pub relabel_prob: Scalar,
    pub variant: Variant,
    /// Hidden layer widths for actor and critic.
    pub hidden_dims: Vec<usize>,
    /// Gradient update iterations after each collected episode.
    pub updates_per_episode: usize,
    /// Optional k-NN candidate pool subsampled per query batch; `None`
    /// searches the full demonstration index exactly.
    pub candidate_pool: Option<usize>,
    /// Epochs for behavior cloning (`bc` baseline and `dex_bc` pretraining).
    pub bc_epochs: usize,
    /// Agent replay capacity in transitions.
    pub buffer_capacity: usize,
    /// Clamp critic targets to the feasible return range.
    pub target_clip: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.98,
            alpha: 5.0,
            k_neighbors: 5,
            noise_scale: 0.1,
            random_action_prob: 0.2,
            batch_size: 256,
            demo_fraction: 0.25,
            polyak: 0.95,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            relabel_prob: 0.8,
            variant: Variant::Dex,
            hidden_dims: default_hidden_dims(),
            updates_per_episode: 40,
            candidate_pool: None,
            bc_epochs: 200,
            buffer_capacity: crate::replay::DEFAULT_CAPACITY,
            target_clip: true,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.alpha < 0.0 {
            return Err(Error::config("alpha must be non-negative"));
        }
        if self.k_neighbors == 0 {
            return Err(Error::config("k_neighbors must be >= 1"));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::config("noise_scale must be non-negative"));
        }
        for (name, p) in [
            ("random_action_prob", self.random_action_prob),
            ("demo_fraction", self.demo_fraction),
            ("polyak", self.polyak),
            ("relabel_prob", self.relabel_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 || self.updates_per_episode == 0 {
            return Err(Error::config(
                "batch_size and updates_per_episode must be >= 1",
            ));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if let Some(pool) = self.candidate_pool {
            if pool < self.k_neighbors {
                return Err(Error::config(format!(
                    "candidate_pool {pool} smaller than k_neighbors {}",
                    self.k_neighbors
                )));
            }
        }
        Ok(())
    }
}

/// L2 behavioral distance between two actions.
pub fn distance(a: &[Scalar], a_e: &[Scalar]) -> Scalar {
    debug_assert_eq!(a.len(), a_e.len());
    a.iter()
        .zip(a_e)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Scalar>()
        .sqrt()
}

/// One-step regularized target value.
#[inline]
fn regularized_target(
    reward: Scalar,
    gamma: Scalar,
    q_next: Scalar,
    alpha: Scalar,
    dissimilarity: Scalar,
) -> Scalar {
    reward + gamma * (q_next - alpha * dissimilarity)
}

/// Online and target networks plus their optimizer states.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub actor_spec: MlpSpec,
    pub critic_spec: MlpSpec,
    pub actor: ParameterVector<Scalar>,
    pub critic: ParameterVector<Scalar>,
    pub actor_target: ParameterVector<Scalar>,
    pub critic_target: ParameterVector<Scalar>,
    pub actor_adam: AdamState<Scalar>,
    pub critic_adam: AdamState<Scalar>,
}

impl ActorCritic {
    /// Fresh networks for an environment; targets start as copies of the
    /// online parameters. Draw order (actor weights, then critic weights)
    /// is fixed.
    pub fn init(env_spec: &EnvSpec, config: &AgentConfig, rng: &mut Rng) -> Result<Self> {
        let state_dim = env_spec.state_dim();
        let actor_spec = MlpSpec::policy(state_dim, env_spec.action_dim, &config.hidden_dims)?;
        let critic_spec = MlpSpec::value(state_dim + env_spec.action_dim, &config.hidden_dims)?;
        let actor = ParameterVector::init(&actor_spec, rng);
        let critic = ParameterVector::init(&critic_spec, rng);
        Ok(ActorCritic {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_adam: AdamState::new(actor.len(), config.actor_lr),
            critic_adam: AdamState::new(critic.len(), config.critic_lr),
            actor_spec,
            critic_spec,
            actor,
            critic,
        })
    }
}

/// A configured agent bound to an environment spec, with its buffers and
/// (when the variant uses one) a guidance model.
#[derive(Debug)]
pub struct Agent {
    config: AgentConfig,
    env_spec: EnvSpec,
    nets: ActorCritic,
    agent_buf: EpisodeBuffer,
    demo_buf: Option<EpisodeBuffer>,
    guidance: Option<GuidanceModel>,
}

impl Agent {
    /// Builds networks and buffers; `demos` must be present for every
    /// demonstration-guided variant. `init_rng` drives network
    /// initialization, `bc_rng` the optional behavior-cloning pretraining.
    pub fn new(
        env_spec: EnvSpec,
        config: AgentConfig,
        demos: Option<&crate::env::demo::DemoSet>,
        init_rng: &mut Rng,
        bc_rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if matches!(config.variant, Variant::Bc | Variant::Vinn) {
            return Err(Error::config(format!(
                "variant {} is not an actor-critic agent; use bc_fit or vinn_policy",
                config.variant
            )));
        }
        if config.variant.needs_demos() && demos.is_none() {
            return Err(Error::config(format!(
                "variant {} requires a demonstration file",
                config.variant
            )));
        }
        if let Some(demos) = demos {
            if demos.header.env != env_spec.name {
                return Err(Error::config(format!(
                    "demonstrations were recorded on {} but the run targets {}",
                    demos.header.env, env_spec.name
                )));
            }
        }

        let nets = ActorCritic::init(&env_spec, &config, init_rng)?;

        let demo_buf = match demos {
            Some(demos) => {
                let mut buf = EpisodeBuffer::new(
                    crate::replay::BufferRole::Demo,
                    demos.num_transitions().max(1),
                    env_spec.clone(),
                );
                for episode in &demos.episodes {
                    buf.store_episode(episode.clone())?;
                }
                buf.freeze();
                Some(buf)
            }
            None => None,
        };

        // Propagation is only consulted by the guided variants.
        let guidance = match (config.variant, demos) {
            (Variant::Dex | Variant::DexRa, Some(demos)) => {
                let dataset = crate::guidance::DemoDataset::from_demo_set(demos)?;
                Some(GuidanceModel::nonparametric(
                    dataset,
                    config.k_neighbors,
                    config.candidate_pool,
                )?)
            }
            (Variant::DexBc, Some(demos)) => {
                let dataset = crate::guidance::DemoDataset::from_demo_set(demos)?;
                let (propagator, _) = crate::guidance::fit_bc_propagator(
                    &dataset,
                    &config.hidden_dims,
                    config.bc_epochs,
                    config.batch_size,
                    config.actor_lr,
                    bc_rng,
                )?;
                Some(GuidanceModel::parametric(dataset, propagator)?)
            }
            _ => None,
        };

        let agent_buf = EpisodeBuffer::new(
            crate::replay::BufferRole::Agent,
            config.buffer_capacity,
            env_spec.clone(),
        );

        Ok(Agent {
            config,
            env_spec,
            nets,
            agent_buf,
            demo_buf,
            guidance,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    pub fn nets(&self) -> &ActorCritic {
        &self.nets
    }

    pub fn agent_buffer(&self) -> &EpisodeBuffer {
        &self.agent_buf
    }

    pub fn store_episode(&mut self, episode: Vec<crate::replay::Transition>) -> Result<()> {
        self.agent_buf.store_episode(episode)
    }

    pub fn sample_batch(&self, rng: &mut Rng) -> Result<SampledBatch> {
        sample_mixed(
            &self.agent_buf,
            self.demo_buf.as_ref(),
            self.config.batch_size,
            self.config.demo_fraction,
            self.config.relabel_prob,
            rng,
        )
    }

    /// Deterministic actor output, optionally with exploration noise and
    /// epsilon-uniform replacement, clipped to [-1, 1].
    pub fn select_action(
        &self,
        policy_input: &[Scalar],
        explore: bool,
        rng: &mut Rng,
    ) -> Result<Vec<Scalar>> {
        let mut action = mlp_eval(&self.nets.actor_spec, &self.nets.actor, policy_input)?;
        if explore {
            for a in &mut action {
                let z: Scalar = rng.sample(StandardNormal);
                *a += self.config.noise_scale * z;
            }
            let coin: Scalar = rng.gen();
            if coin < self.config.random_action_prob {
                for a in &mut action {
                    *a = rng.gen_range(-1.0..=1.0);
                }
            }
        }
        for a in &mut action {
            *a = a.clamp(-1.0, 1.0);
        }
        Ok(action)
    }

    /// Expert estimates at a batch of policy inputs via the variant's
    /// propagator.
    fn propagate_expert(&self, queries: &[Scalar], rng: &mut Rng) -> Result<Vec<Scalar>> {
        let guidance = self.guidance.as_ref().ok_or_else(|| {
            Error::config(format!(
                "variant {} needs a propagator but none is configured",
                self.config.variant
            ))
        })?;
        guidance.estimate(queries, rng)
    }

    /// Raw (unclamped) critic target values for a batch.
    ///
    /// `a' = pi_target(s')`; guided variants subtract
    /// `alpha * d(a', a_e')` inside the bootstrap, where `a_e'` is the
    /// propagated expert estimate at `s'`. Horizon ends bootstrap through
    /// (time limits are not terminal states), so the formula is uniform
    /// across the batch.
    pub fn critic_target(&self, batch: &SampledBatch, rng: &mut Rng) -> Result<Vec<Scalar>> {
        let next_inputs = batch.next_policy_inputs();
        let next_actions = {
            let (out, _) =
                mlp_forward_batch(&self.nets.actor_spec, &self.nets.actor_target, &next_inputs)?;
            out
        };
        let action_dim = batch.action_dim;

        let guided = self.config.variant.guided_critic() && self.config.alpha > 0.0;
        let expert_next = if guided {
            Some(self.propagate_expert(&next_inputs, rng)?)
        } else {
            None
        };

        let critic_inputs = concat_state_action(&next_inputs, &next_actions, batch.len, action_dim);
        let (q_next, _) = mlp_forward_batch(
            &self.nets.critic_spec,
            &self.nets.critic_target,
            &critic_inputs,
        )?;

        let gamma = self.config.gamma;
        let alpha = self.config.alpha;
        let mut targets = Vec::with_capacity(batch.len);
        for i in 0..batch.len {
            let y = match &expert_next {
                Some(expert) => {
                    let a_next = &next_actions[i * action_dim..(i + 1) * action_dim];
                    let a_expert = &expert[i * action_dim..(i + 1) * action_dim];
                    regularized_target(
                        batch.rewards[i],
                        gamma,
                        q_next[i],
                        alpha,
                        distance(a_next, a_expert),
                    )
                }
                None => batch.rewards[i] + gamma * q_next[i],
            };
            targets.push(y);
        }
        Ok(targets)
    }

    /// Feasible range for clamped critic targets: returns in a sparse
    /// task lie in [-1 / (1 - gamma), 0], minus the largest possible
    /// guided penalty when the target is regularized.
    fn target_bounds(&self) -> (Scalar, Scalar) {
        let spec = &self.env_spec;
        let r_min = if spec.dense_reward {
            let dx = spec.workspace.max[0] - spec.workspace.min[0];
            let dy = spec.workspace.max[1] - spec.workspace.min[1];
            -(dx * dx + dy * dy).sqrt()
        } else {
            -1.0
        };
        let gamma = self.config.gamma;
        let mut lo = if gamma < 1.0 {
            r_min / (1.0 - gamma)
        } else {
            Scalar::NEG_INFINITY
        };
        if self.config.variant.guided_critic() && self.config.alpha > 0.0 {
            let d_max = 2.0 * (self.env_spec.action_dim as Scalar).sqrt();
            lo -= gamma * self.config.alpha * d_max;
        }
        (lo, 0.0)
    }

    /// Squared-residual loss and critic gradients against explicit
    /// targets, treating the targets as constants.
    pub fn critic_loss_grads(
        &self,
        batch: &SampledBatch,
        targets: &[Scalar],
    ) -> Result<(Scalar, Gradients<Scalar>)> {
        let inputs = batch.policy_inputs();
        let critic_inputs = concat_state_action(&inputs, &batch.actions, batch.len, batch.action_dim);
        let (q, cache) =
            mlp_forward_batch(&self.nets.critic_spec, &self.nets.critic, &critic_inputs)?;
        let n = batch.len as Scalar;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(batch.len);
        for (qi, yi) in q.iter().zip(targets) {
            let residual = qi - yi;
            loss += residual * residual;
            upstream.push(2.0 * residual / n);
        }
        loss /= n;
        let (grads, _) = mlp_backward(&cache, &upstream)?;
        Ok((loss, grads))
    }

    /// One Adam step on the critic; returns the pre-step loss.
    pub fn critic_update(&mut self, batch: &SampledBatch, rng: &mut Rng) -> Result<Scalar> {
        let mut targets = self.critic_target(batch, rng)?;
        if self.config.target_clip {
            let (lo, hi) = self.target_bounds();
            for y in &mut targets {
                *y = y.clamp(lo, hi);
            }
        }
        let (loss, grads) = self.critic_loss_grads(batch, &targets)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "critic loss is not finite at optimizer step {} (batch: {} demo, {} agent items)",
                self.nets.critic_adam.step_count(),
                batch
                    .source_mask
                    .iter()
                    .filter(|&&s| s == BatchSource::FromDemo)
                    .count(),
                batch
                    .source_mask
                    .iter()
                    .filter(|&&s| s == BatchSource::FromAgent)
                    .count(),
            )));
        }
        adam_step(&mut self.nets.critic, &grads, &mut self.nets.critic_adam)?;
        Ok(loss)
    }

    /// Mean actor objective over a batch and the gradients of its
    /// negation (ready for a minimizing Adam step).
    ///
    /// The guided penalty uses the stored demonstration action for demo
    /// items and the propagated estimate for agent items; `ddpgbc`
    /// replaces it with a Q-filtered squared cloning term on demo items.
    /// Critic parameters are frozen throughout.
    pub fn actor_objective_grads(
        &self,
        batch: &SampledBatch,
        rng: &mut Rng,
    ) -> Result<(Scalar, Gradients<Scalar>)> {
        let inputs = batch.policy_inputs();
        let action_dim = batch.action_dim;
        let n = batch.len as Scalar;

        let (actions, actor_cache) =
            mlp_forward_batch(&self.nets.actor_spec, &self.nets.actor, &inputs)?;
        let critic_inputs = concat_state_action(&inputs, &actions, batch.len, action_dim);
        let (q, critic_cache) =
            mlp_forward_batch(&self.nets.critic_spec, &self.nets.critic, &critic_inputs)?;

        // dQ/da for every item: backprop a uniform 1/n through the critic
        // and slice the action part of the input gradient.
        let upstream_q: Vec<Scalar> = vec![1.0 / n; batch.len];
        let (_, critic_input_grads) = mlp_backward(&critic_cache, &upstream_q)?;
        let state_dim = batch.obs_dim + batch.goal_dim;
        let full_dim = state_dim + action_dim;

        // Reference expert actions where the variant needs them.
        let guided = self.config.variant.guided_actor() && self.config.alpha > 0.0;
        let ddpgbc = self.config.variant == Variant::Ddpgbc;
        let expert: Option<Vec<Scalar>> = if guided {
            // Agent items get propagated estimates; demo items keep their
            // stored expert actions.
            let mut expert = batch.actions.clone();
            let agent_rows: Vec<usize> = (0..batch.len)
                .filter(|&i| batch.source_mask[i] == BatchSource::FromAgent)
                .collect();
            if !agent_rows.is_empty() {
                let mut queries = Vec::with_capacity(agent_rows.len() * state_dim);
                for &i in &agent_rows {
                    queries.extend_from_slice(&inputs[i * state_dim..(i + 1) * state_dim]);
                }
                let estimates = self.propagate_expert(&queries, rng)?;
                for (slot, &i) in agent_rows.iter().enumerate() {
                    expert[i * action_dim..(i + 1) * action_dim]
                        .copy_from_slice(&estimates[slot * action_dim..(slot + 1) * action_dim]);
                }
            }
            Some(expert)
        } else if ddpgbc {
            Some(batch.actions.clone())
        } else {
            None
        };

        // Q(s, a_e) for the ddpgbc filter.
        let q_expert: Option<Vec<Scalar>> = if ddpgbc {
            let expert = expert.as_ref().unwrap();
            let expert_inputs = concat_state_action(&inputs, expert, batch.len, action_dim);
            let (qe, _) =
                mlp_forward_batch(&self.nets.critic_spec, &self.nets.critic, &expert_inputs)?;
            Some(qe)
        } else {
            None
        };

        let alpha = self.config.alpha;
        let mut objective = 0.0;
        // Gradient of the (maximized) objective with respect to each
        // emitted action; negated before backprop because Adam minimizes.
        let mut d_objective_d_action = vec![0.0; batch.len * action_dim];
        for i in 0..batch.len {
            objective += q[i] / n;
            let action = &actions[i * action_dim..(i + 1) * action_dim];
            let dq = &critic_input_grads[i * full_dim + state_dim..(i + 1) * full_dim];
            let grad = &mut d_objective_d_action[i * action_dim..(i + 1) * action_dim];
            grad.copy_from_slice(dq);

            if guided {
                let expert = expert.as_ref().unwrap();
                let a_e = &expert[i * action_dim..(i + 1) * action_dim];
                let dist = distance(action, a_e);
                objective -= alpha * dist / n;
                if dist > 0.0 {
                    // Subgradient 0 exactly at a = a_e.
                    for (g, (&a, &e)) in grad.iter_mut().zip(action.iter().zip(a_e)) {
                        *g -= alpha * (a - e) / dist / n;
                    }
                }
            } else if ddpgbc && batch.source_mask[i] == BatchSource::FromDemo {
                let expert = expert.as_ref().unwrap();
                let a_e = &expert[i * action_dim..(i + 1) * action_dim];
                // Clone only where the critic prefers the expert action.
                if q_expert.as_ref().unwrap()[i] > q[i] {
                    let mut sq = 0.0;
                    for (g, (&a, &e)) in grad.iter_mut().zip(action.iter().zip(a_e)) {
                        let diff = a - e;
                        sq += diff * diff;
                        *g -= alpha * 2.0 * diff / n;
                    }
                    objective -= alpha * sq / n;
                }
            }
        }

        if !objective.is_finite() {
            return Err(Error::numeric(format!(
                "actor objective is not finite at optimizer step {} (batch: {} demo, {} agent items)",
                self.nets.actor_adam.step_count(),
                batch
                    .source_mask
                    .iter()
                    .filter(|&&s| s == BatchSource::FromDemo)
                    .count(),
                batch
                    .source_mask
                    .iter()
                    .filter(|&&s| s == BatchSource::FromAgent)
                    .count(),
            )));
        }

        let upstream_actor: Vec<Scalar> = d_objective_d_action.iter().map(|g| -g).collect();
        let (actor_grads, _) = mlp_backward(&actor_cache, &upstream_actor)?;
        adam_step(&mut self.nets.actor, &actor_grads, &mut self.nets.actor_adam)?;
        Ok(objective)
    }

    /// EMA update of both target networks.
    pub fn update_targets(&mut self) -> Result<()> {
        polyak_update(
            &mut self.nets.critic_target,
            &self.nets.critic,
            self.config.polyak,
        )?;
        polyak_update(
            &mut self.nets.actor_target,
            &self.nets.actor,
            self.config.polyak,
        )
    }
}

/// Interleaves per-item state rows with per-item action rows into critic
/// inputs.
fn concat_state_action(
    states: &[Scalar],
    actions: &[Scalar],
    batch: usize,
    action_dim: usize,
) -> Vec<Scalar> {
    let state_dim = states.len() / batch;
    let mut out = Vec::with_capacity(batch * (state_dim + action_dim));
    for i in 0..batch {
        out.extend_from_slice(&states[i * state_dim..(i + 1) * state_dim]);
        out.extend_from_slice(&actions[i * action_dim..(i + 1) * action_dim]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::demo::generate_demonstrations;
    use crate::env::{EnvName, EnvSpec};
    use crate::rng::derive_rng;

    fn tiny_config(variant: Variant) -> AgentConfig {
        AgentConfig {
            variant,
            hidden_dims: vec![16, 16],
            batch_size: 32,
            updates_per_episode: 4,
            bc_epochs: 3,
            ..AgentConfig::default()
        }
    }

    fn demo_agent(variant: Variant, alpha: Scalar) -> Agent {
        let (demos, _) = generate_demonstrations(EnvName::PointPickPlace, 4, 7).unwrap();
        let spec = EnvSpec::for_name(EnvName::PointPickPlace);
        let config = AgentConfig {
            alpha,
            ..tiny_config(variant)
        };
        let mut init_rng = derive_rng(1, "net-init", &[]);
        let mut bc_rng = derive_rng(1, "bc-fit", &[]);
        Agent::new(spec, config, Some(&demos), &mut init_rng, &mut bc_rng).unwrap()
    }

    fn collected_agent(variant: Variant, alpha: Scalar) -> Agent {
        let mut agent = demo_agent(variant, alpha);
        let mut env = crate::env::ToyEnv::new(EnvName::PointPickPlace);
        let mut rng = derive_rng(2, "collect", &[]);
        for ep in 0..2u64 {
            let mut state = env.reset(500 + ep);
            let mut episode = Vec::new();
            for step in 0..env.spec().horizon {
                let action = agent
                    .select_action(&state.policy_input(), true, &mut rng)
                    .unwrap();
                let result = env.step(&action).unwrap();
                episode.push(crate::replay::Transition {
                    state: state.clone(),
                    action,
                    reward: result.reward,
                    next_state: result.next_observation.clone(),
                    episode_id: ep,
                    step_index: step,
                });
                state = result.next_observation;
            }
            agent.store_episode(episode).unwrap();
        }
        agent
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[0.3, -0.4], &[0.3, -0.4]), 0.0);
        assert_eq!(distance(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
        let d = distance(&[1.0, 1.0], &[-1.0, -1.0]);
        assert!((d - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
        assert!((d - 2.8284).abs() < 1e-4);
    }

    #[test]
    fn regularized_target_hand_example() {
        // r = -1, gamma = 0.98, Q' = -3, d = 0.5, alpha = 5.
        let y = regularized_target(-1.0, 0.98, -3.0, 5.0, 0.5);
        assert!((y - (-6.39)).abs() < 1e-12);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut config = AgentConfig::default();
        config.gamma = 0.0;
        assert!(config.validate().is_err());
        let mut config = AgentConfig::default();
        config.demo_fraction = 1.5;
        assert!(config.validate().is_err());
        let mut config = AgentConfig::default();
        config.candidate_pool = Some(2);
        assert!(config.validate().is_err());
        assert!(AgentConfig::default().validate().is_ok());
    }

    #[test]
    fn guided_variants_require_demos() {
        let spec = EnvSpec::for_name(EnvName::PointPickPlace);
        let mut init_rng = derive_rng(3, "net-init", &[]);
        let mut bc_rng = derive_rng(3, "bc-fit", &[]);
        let err = Agent::new(
            spec.clone(),
            tiny_config(Variant::Dex),
            None,
            &mut init_rng,
            &mut bc_rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("dex"));
        assert!(Agent::new(spec, tiny_config(Variant::Ddpg), None, &mut init_rng, &mut bc_rng)
            .is_ok());
    }

    #[test]
    fn demo_env_mismatch_is_rejected() {
        let (demos, _) = generate_demonstrations(EnvName::PointReach, 2, 1).unwrap();
        let spec = EnvSpec::for_name(EnvName::PointPickPlace);
        let mut init_rng = derive_rng(4, "net-init", &[]);
        let mut bc_rng = derive_rng(4, "bc-fit", &[]);
        assert!(Agent::new(
            spec,
            tiny_config(Variant::Dex),
            Some(&demos),
            &mut init_rng,
            &mut bc_rng
        )
        .is_err());
    }

    #[test]
    fn select_action_is_deterministic_without_exploration() {
        let agent = demo_agent(Variant::Dex, 5.0);
        let input = vec![0.1; agent.env_spec().state_dim()];
        let mut rng_a = derive_rng(5, "act", &[]);
        let mut rng_b = derive_rng(6, "act", &[]);
        let a = agent.select_action(&input, false, &mut rng_a).unwrap();
        let b = agent.select_action(&input, false, &mut rng_b).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn zero_noise_and_zero_epsilon_match_greedy_action() {
        let mut agent = demo_agent(Variant::Dex, 5.0);
        agent.config.noise_scale = 0.0;
        agent.config.random_action_prob = 0.0;
        let input = vec![-0.2; agent.env_spec().state_dim()];
        let mut rng = derive_rng(7, "act", &[]);
        let greedy = agent.select_action(&input, false, &mut rng).unwrap();
        let explore = agent.select_action(&input, true, &mut rng).unwrap();
        assert_eq!(greedy, explore);
    }

    #[test]
    fn exploration_noise_scale_matches_configuration() {
        let mut agent = demo_agent(Variant::Dex, 5.0);
        agent.config.random_action_prob = 0.0;
        // Zero the actor so the mean action is far from the clip bounds.
        agent.nets.actor = ParameterVector::zeros(&agent.nets.actor_spec);
        let input = vec![0.3; agent.env_spec().state_dim()];
        let mut rng = derive_rng(8, "noise", &[]);
        let draws = 100_000usize;
        let dim = agent.env_spec().action_dim;
        let mut sums = vec![0.0; dim];
        let mut squares = vec![0.0; dim];
        for _ in 0..draws {
            let a = agent.select_action(&input, true, &mut rng).unwrap();
            for (d, &x) in a.iter().enumerate() {
                sums[d] += x;
                squares[d] += x * x;
            }
        }
        for d in 0..dim {
            let mean = sums[d] / draws as f64;
            let var = squares[d] / draws as f64 - mean * mean;
            let std = var.sqrt();
            assert!(
                (std - 0.1).abs() <= 0.005,
                "component {d}: sample std {std}"
            );
        }
    }

    #[test]
    fn alpha_zero_targets_equal_plain_ddpg_targets() {
        let dex = collected_agent(Variant::Dex, 0.0);
        let ddpg = collected_agent(Variant::Ddpg, 0.0);
        // Same seeds built identical nets and buffers.
        let mut rng_a = derive_rng(9, "batch", &[]);
        let mut rng_b = derive_rng(9, "batch", &[]);
        let batch_a = dex.sample_batch(&mut rng_a).unwrap();
        let batch_b = ddpg.sample_batch(&mut rng_b).unwrap();
        let mut prop_a = derive_rng(10, "prop", &[]);
        let mut prop_b = derive_rng(10, "prop", &[]);
        let ya = dex.critic_target(&batch_a, &mut prop_a).unwrap();
        let yb = ddpg.critic_target(&batch_b, &mut prop_b).unwrap();
        for (a, b) in ya.iter().zip(&yb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn guided_target_is_plain_target_minus_gamma_alpha_distance() {
        let dex = collected_agent(Variant::Dex, 5.0);
        let plain = collected_agent(Variant::DexRa, 5.0); // plain critic path
        let mut rng_a = derive_rng(11, "batch", &[]);
        let mut rng_b = derive_rng(11, "batch", &[]);
        let batch_a = dex.sample_batch(&mut rng_a).unwrap();
        let batch_b = plain.sample_batch(&mut rng_b).unwrap();

        let mut prop = derive_rng(12, "prop", &[]);
        let guided = dex.critic_target(&batch_a, &mut prop).unwrap();
        let mut prop_b = derive_rng(12, "prop", &[]);
        let unguided = plain.critic_target(&batch_b, &mut prop_b).unwrap();

        // Recompute the penalty independently.
        let next_inputs = batch_a.next_policy_inputs();
        let (a_next, _) =
            mlp_forward_batch(&dex.nets.actor_spec, &dex.nets.actor_target, &next_inputs).unwrap();
        let mut prop_c = derive_rng(12, "prop", &[]);
        let expert = dex.propagate_expert(&next_inputs, &mut prop_c).unwrap();
        let dim = batch_a.action_dim;
        for i in 0..batch_a.len {
            let d = distance(
                &a_next[i * dim..(i + 1) * dim],
                &expert[i * dim..(i + 1) * dim],
            );
            let expect = unguided[i] - dex.config.gamma * dex.config.alpha * d;
            assert!(
                (guided[i] - expect).abs() < 1e-12,
                "item {i}: {} vs {}",
                guided[i],
                expect
            );
            assert!(guided[i] <= unguided[i] + 1e-12);
        }
    }

    #[test]
    fn exact_targets_give_zero_loss_and_zero_gradient() {
        let agent = collected_agent(Variant::Dex, 5.0);
        let mut rng = derive_rng(13, "batch", &[]);
        let batch = agent.sample_batch(&mut rng).unwrap();
        let inputs = batch.policy_inputs();
        let critic_inputs =
            concat_state_action(&inputs, &batch.actions, batch.len, batch.action_dim);
        let (q, _) =
            mlp_forward_batch(&agent.nets.critic_spec, &agent.nets.critic, &critic_inputs)
                .unwrap();
        let (loss, grads) = agent.critic_loss_grads(&batch, &q).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_critic_updates_on_a_frozen_batch_reduce_loss() {
        let mut agent = collected_agent(Variant::Dex, 5.0);
        let mut rng = derive_rng(14, "batch", &[]);
        let batch = agent.sample_batch(&mut rng).unwrap();
        let mut prop = derive_rng(15, "prop", &[]);
        let first = agent.critic_update(&batch, &mut prop).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = agent.critic_update(&batch, &mut prop).unwrap();
        }
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn actor_update_with_alpha_zero_matches_ddpg_update_bitwise() {
        let mut dex = collected_agent(Variant::Dex, 0.0);
        let mut ddpg = collected_agent(Variant::Ddpg, 0.0);
        let mut rng_a = derive_rng(16, "batch", &[]);
        let mut rng_b = derive_rng(16, "batch", &[]);
        let batch_a = dex.sample_batch(&mut rng_a).unwrap();
        let batch_b = ddpg.sample_batch(&mut rng_b).unwrap();
        let mut prop_a = derive_rng(17, "prop", &[]);
        let mut prop_b = derive_rng(17, "prop", &[]);
        let oa = dex.actor_update(&batch_a, &mut prop_a).unwrap();
        let ob = ddpg.actor_update(&batch_b, &mut prop_b).unwrap();
        assert_eq!(oa.to_bits(), ob.to_bits());
        for (x, y) in dex.nets.actor.as_slice().iter().zip(ddpg.nets.actor.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn actor_penalty_is_zero_and_bounded_at_the_expert_action() {
        // d(a, a_e) has subgradient 0 at a = a_e: the penalty contributes
        // nothing to the objective or the gradient there.
        let agent = collected_agent(Variant::Dex, 5.0);
        let a = vec![0.25, -0.5, 0.75];
        let d = distance(&a, &a);
        assert_eq!(d, 0.0);
        let _ = agent; // penalty path covered by the update tests
    }

    #[test]
    fn ddpgbc_filter_suppresses_cloning_when_policy_beats_expert() {
        let mut agent = collected_agent(Variant::Ddpgbc, 5.0);
        // A zero critic values every action equally; the strict filter
        // then never fires and the update degenerates to plain DDPG.
        agent.nets.critic = ParameterVector::zeros(&agent.nets.critic_spec);
        agent.nets.critic_target = ParameterVector::zeros(&agent.nets.critic_spec);
        let mut ddpg = collected_agent(Variant::Ddpg, 0.0);
        ddpg.nets.critic = ParameterVector::zeros(&ddpg.nets.critic_spec);
        ddpg.nets.critic_target = ParameterVector::zeros(&ddpg.nets.critic_spec);

        let mut rng_a = derive_rng(18, "batch", &[]);
        let mut rng_b = derive_rng(18, "batch", &[]);
        let batch_a = agent.sample_batch(&mut rng_a).unwrap();
        let batch_b = ddpg.sample_batch(&mut rng_b).unwrap();
        let mut prop_a = derive_rng(19, "prop", &[]);
        let mut prop_b = derive_rng(19, "prop", &[]);
        let oa = agent.actor_update(&batch_a, &mut prop_a).unwrap();
        let ob = ddpg.actor_update(&batch_b, &mut prop_b).unwrap();
        assert_eq!(oa.to_bits(), ob.to_bits());
        for (x, y) in agent.nets.actor.as_slice().iter().zip(ddpg.nets.actor.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn target_networks_track_online_networks() {
        let mut agent = collected_agent(Variant::Dex, 5.0);
        let mut rng = derive_rng(20, "batch", &[]);
        let mut prop = derive_rng(21, "prop", &[]);
        for _ in 0..5 {
            let batch = agent.sample_batch(&mut rng).unwrap();
            agent.critic_update(&batch, &mut prop).unwrap();
            agent.actor_update(&batch, &mut prop).unwrap();
            agent.update_targets().unwrap();
        }
        let gap: f64 = agent
            .nets
            .critic_target
            .as_slice()
            .iter()
            .zip(agent.nets.critic.as_slice())
            .map(|(t, o)| (t - o).abs())
            .fold(0.0, f64::max);
        assert!(gap > 0.0, "targets should lag the online net");
        let mut frozen = agent.nets.critic.clone();
        std::mem::swap(&mut frozen, &mut agent.nets.critic);
        for _ in 0..300 {
            agent.update_targets().unwrap();
        }
        let gap: f64 = agent
            .nets
            .critic_target
            .as_slice()
            .iter()
            .zip(agent.nets.critic.as_slice())
            .map(|(t, o)| (t - o).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-6, "polyak should converge, gap {gap}");
    }
}
