//! Episode-structured replay with hindsight goal relabeling.
//!
//! Two buffers share this machinery: the agent's own experience and the
//! frozen demonstration set. Sampling relabels items on the fly (the
//! stored episodes are never touched): with probability `relabel_prob`
//! an item's desired goal is replaced by the achieved goal of a strictly
//! later step of the same episode and its reward is recomputed. Batches
//! mix both buffers at a configurable demonstration fraction.

use std::collections::VecDeque;

use rand::distributions::{Distribution, Uniform};
use rand::Rng as _;

use crate::env::{EnvSpec, GoalObservation};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::Scalar;

/// One environment step as stored in a buffer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Transition {
    pub state: GoalObservation,
    pub action: Vec<Scalar>,
    pub reward: Scalar,
    pub next_state: GoalObservation,
    pub episode_id: u64,
    pub step_index: usize,
}

/// Who owns a buffer; demonstration buffers freeze after loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferRole {
    Agent,
    Demo,
}

/// Provenance of a sampled item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSource {
    FromAgent,
    FromDemo,
}

#[derive(Debug, Clone)]
struct StoredEpisode {
    transitions: Vec<Transition>,
}

/// Bounded collection of fixed-horizon episodes.
#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    role: BufferRole,
    capacity: usize,
    spec: EnvSpec,
    episodes: VecDeque<StoredEpisode>,
    frozen: bool,
}

/// Default agent-buffer capacity in transitions; never evicts at desk
/// scale.
pub const DEFAULT_CAPACITY: usize = 1_000_000;

impl EpisodeBuffer {
    pub fn new(role: BufferRole, capacity: usize, spec: EnvSpec) -> Self {
        EpisodeBuffer {
            role,
            capacity,
            spec,
            episodes: VecDeque::new(),
            frozen: false,
        }
    }

    pub fn role(&self) -> BufferRole {
        self.role
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn len(&self) -> usize {
        self.episodes.len() * self.spec.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Marks a demonstration buffer as fully loaded; further writes fail.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Appends one complete episode, evicting oldest episodes first if
    /// the transition capacity is exceeded (agent buffers only).
    pub fn store_episode(&mut self, episode: Vec<Transition>) -> Result<()> {
        if self.frozen {
            return Err(Error::usage(
                "demo buffer is frozen after load; episodes cannot be added",
            ));
        }
        if episode.len() != self.spec.horizon {
            return Err(Error::usage(format!(
                "episode of length {} does not match horizon {}",
                episode.len(),
                self.spec.horizon
            )));
        }
        if episode
            .iter()
            .enumerate()
            .any(|(i, t)| t.step_index != i)
        {
            return Err(Error::usage("episode step indices are not contiguous"));
        }
        self.episodes.push_back(StoredEpisode {
            transitions: episode,
        });
        while self.len() > self.capacity {
            if self.role == BufferRole::Demo {
                return Err(Error::usage("demo buffer capacity exceeded"));
            }
            self.episodes.pop_front();
        }
        Ok(())
    }

    pub fn transition(&self, episode: usize, step: usize) -> &Transition {
        &self.episodes[episode].transitions[step]
    }

    /// Uniformly samples `batch_size` transitions, independently
    /// relabeling each with the future strategy at `relabel_prob`.
    pub fn sample_with_her(
        &self,
        batch_size: usize,
        relabel_prob: Scalar,
        rng: &mut Rng,
    ) -> Result<SampledBatch> {
        if self.is_empty() {
            return Err(Error::usage("cannot sample from an empty buffer"));
        }
        let source = match self.role {
            BufferRole::Agent => BatchSource::FromAgent,
            BufferRole::Demo => BatchSource::FromDemo,
        };
        let mut batch = SampledBatch::with_capacity(&self.spec, batch_size);
        self.sample_into(&mut batch, batch_size, relabel_prob, source, rng);
        Ok(batch)
    }

    fn sample_into(
        &self,
        batch: &mut SampledBatch,
        count: usize,
        relabel_prob: Scalar,
        source: BatchSource,
        rng: &mut Rng,
    ) {
        let horizon = self.spec.horizon;
        let index_dist = Uniform::new(0, self.episodes.len() * horizon);
        for _ in 0..count {
            let flat = index_dist.sample(rng);
            let (episode, step) = (flat / horizon, flat % horizon);
            let transition = &self.episodes[episode].transitions[step];

            let relabel = rng.gen::<Scalar>() < relabel_prob;
            let (goal, reward) = if relabel {
                // Future strategy: the achieved goal of state s_j for a
                // uniform j in (step, horizon], read from the next_state
                // of transition j - 1.
                let future = rng.gen_range(step..horizon);
                let goal = &self.episodes[episode].transitions[future]
                    .next_state
                    .achieved_goal;
                let reward = self
                    .spec
                    .compute_reward(&transition.next_state.achieved_goal, goal);
                (goal.clone(), reward)
            } else {
                (
                    transition.state.desired_goal.clone(),
                    transition.reward,
                )
            };

            batch.push(transition, &goal, reward, source, relabel);
        }
    }
}

/// Aligned arrays of sampled items; goals carry any hindsight
/// substitution and rewards are consistent with them.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub len: usize,
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub action_dim: usize,
    /// Observations, batch-major.
    pub states: Vec<Scalar>,
    pub actions: Vec<Scalar>,
    pub rewards: Vec<Scalar>,
    /// Next-step observations, batch-major.
    pub next_states: Vec<Scalar>,
    /// Desired goals after relabeling, batch-major.
    pub goals: Vec<Scalar>,
    pub source_mask: Vec<BatchSource>,
    pub relabeled_mask: Vec<bool>,
}

impl SampledBatch {
    fn with_capacity(spec: &EnvSpec, capacity: usize) -> Self {
        SampledBatch {
            len: 0,
            obs_dim: spec.obs_dim,
            goal_dim: spec.goal_dim,
            action_dim: spec.action_dim,
            states: Vec::with_capacity(capacity * spec.obs_dim),
            actions: Vec::with_capacity(capacity * spec.action_dim),
            rewards: Vec::with_capacity(capacity),
            next_states: Vec::with_capacity(capacity * spec.obs_dim),
            goals: Vec::with_capacity(capacity * spec.goal_dim),
            source_mask: Vec::with_capacity(capacity),
            relabeled_mask: Vec::with_capacity(capacity),
        }
    }

    fn push(
        &mut self,
        transition: &Transition,
        goal: &[Scalar],
        reward: Scalar,
        source: BatchSource,
        relabeled: bool,
    ) {
        self.states.extend_from_slice(&transition.state.observation);
        self.actions.extend_from_slice(&transition.action);
        self.rewards.push(reward);
        self.next_states
            .extend_from_slice(&transition.next_state.observation);
        self.goals.extend_from_slice(goal);
        self.source_mask.push(source);
        self.relabeled_mask.push(relabeled);
        self.len += 1;
    }

    /// Observation of item `i`.
    pub fn state(&self, i: usize) -> &[Scalar] {
        &self.states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn next_state(&self, i: usize) -> &[Scalar] {
        &self.next_states[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn goal(&self, i: usize) -> &[Scalar] {
        &self.goals[i * self.goal_dim..(i + 1) * self.goal_dim]
    }

    pub fn action(&self, i: usize) -> &[Scalar] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    /// Observation ++ goal inputs for all items, batch-major.
    pub fn policy_inputs(&self) -> Vec<Scalar> {
        let dim = self.obs_dim + self.goal_dim;
        let mut out = Vec::with_capacity(self.len * dim);
        for i in 0..self.len {
            out.extend_from_slice(self.state(i));
            out.extend_from_slice(self.goal(i));
        }
        out
    }

    /// Next observation ++ goal inputs for all items, batch-major.
    pub fn next_policy_inputs(&self) -> Vec<Scalar> {
        let dim = self.obs_dim + self.goal_dim;
        let mut out = Vec::with_capacity(self.len * dim);
        for i in 0..self.len {
            out.extend_from_slice(self.next_state(i));
            out.extend_from_slice(self.goal(i));
        }
        out
    }
}

/// Samples a mixed batch: `round(demo_fraction * batch_size)` items from
/// the demonstration buffer (first in the batch), the rest from the agent
/// buffer, each side relabeled at `relabel_prob`. An empty side yields
/// its share to the other.
pub fn sample_mixed(
    agent_buf: &EpisodeBuffer,
    demo_buf: Option<&EpisodeBuffer>,
    batch_size: usize,
    demo_fraction: Scalar,
    relabel_prob: Scalar,
    rng: &mut Rng,
) -> Result<SampledBatch> {
    let demo_available = demo_buf.map(|b| !b.is_empty()).unwrap_or(false);
    if agent_buf.is_empty() && !demo_available {
        return Err(Error::usage("both replay buffers are empty"));
    }
    let mut demo_count = (demo_fraction * batch_size as Scalar).round() as usize;
    demo_count = demo_count.min(batch_size);
    if !demo_available {
        demo_count = 0;
    }
    if agent_buf.is_empty() {
        demo_count = batch_size;
    }

    let spec = if demo_count > 0 {
        demo_buf.unwrap().spec()
    } else {
        agent_buf.spec()
    };
    let mut batch = SampledBatch::with_capacity(spec, batch_size);
    if demo_count > 0 {
        demo_buf.unwrap().sample_into(
            &mut batch,
            demo_count,
            relabel_prob,
            BatchSource::FromDemo,
            rng,
        );
    }
    if batch_size > demo_count {
        agent_buf.sample_into(
            &mut batch,
            batch_size - demo_count,
            relabel_prob,
            BatchSource::FromAgent,
            rng,
        );
    }
    Ok(batch)
}
