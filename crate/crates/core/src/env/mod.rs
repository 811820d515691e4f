//! Deterministic goal-conditioned 2-D manipulation environments.
//!
//! Four tasks cover the benchmark's domains:
//!
//! - `point_reach`: move the agent point onto a goal position (sparse);
//! - `point_pickplace`: grasp a free object (grip channel < 0 within the
//!   success radius) and carry it to a goal position (sparse);
//! - `bipoint_transfer`: two agents confined to overlapping half-spaces
//!   must hand the object across the midline to reach a goal only the
//!   second agent can touch (sparse);
//! - `point_track`: follow a moving target, rewarded by negative distance
//!   every step (dense).
//!
//! All dynamics are kinematic: positions advance by `step_scale *
//! clipped_action` and clamp to the workspace; a grasped object rides on
//! its holder. A trajectory is a pure function of `(reset seed, action
//! sequence)` — stepping never draws randomness.

pub mod demo;
mod expert;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::Scalar;

/// Environment identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointReach,
    PointPickPlace,
    BipointTransfer,
    PointTrack,
}

impl EnvName {
    pub const ALL: [EnvName; 4] = [
        EnvName::PointReach,
        EnvName::PointPickPlace,
        EnvName::BipointTransfer,
        EnvName::PointTrack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::PointReach => "point_reach",
            EnvName::PointPickPlace => "point_pickplace",
            EnvName::BipointTransfer => "bipoint_transfer",
            EnvName::PointTrack => "point_track",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "point_reach" => Ok(EnvName::PointReach),
            "point_pickplace" => Ok(EnvName::PointPickPlace),
            "bipoint_transfer" => Ok(EnvName::BipointTransfer),
            "point_track" => Ok(EnvName::PointTrack),
            other => Err(Error::usage(format!(
                "unknown environment '{other}' (expected one of: point_reach, \
                 point_pickplace, bipoint_transfer, point_track)"
            ))),
        }
    }
}

impl std::fmt::Display for EnvName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned workspace bounds in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [Scalar; 2],
    pub max: [Scalar; 2],
}

impl Bounds {
    pub fn contains(&self, p: &[Scalar]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    fn clamp(&self, p: [Scalar; 2]) -> [Scalar; 2] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }
}

/// Static description of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub success_threshold: Scalar,
    pub workspace: Bounds,
    pub step_scale: Scalar,
    pub dense_reward: bool,
}

const WORKSPACE: Bounds = Bounds {
    min: [-1.0, -1.0],
    max: [1.0, 1.0],
};
const HORIZON: usize = 50;
const THRESHOLD: Scalar = 0.05;
const STEP_SCALE: Scalar = 0.08;
/// Spawn positions keep this margin from the workspace edge.
const SPAWN: Scalar = 0.9;
/// Target speed in `point_track`; half the agent's top speed.
const TRACK_SPEED: Scalar = 0.04;

// bipoint_transfer geometry: agent A may only move with x <= OVERLAP,
// agent B only with x >= -OVERLAP; the object spawns deep in A territory
// and the goal deep in B territory, so the task forces a handover near
// x = 0.
const OVERLAP: Scalar = 0.12;
const TRANSFER_Y: Scalar = 0.6;
const A_SPAWN_X: [Scalar; 2] = [-0.8, -0.2];
const B_SPAWN_X: [Scalar; 2] = [0.2, 0.8];
const OBJECT_X: [Scalar; 2] = [-0.8, -0.25];
const GOAL_X: [Scalar; 2] = [0.25, 0.8];

impl EnvSpec {
    pub fn for_name(name: EnvName) -> Self {
        let (obs_dim, action_dim, dense_reward) = match name {
            EnvName::PointReach => (2, 2, false),
            EnvName::PointPickPlace => (5, 3, false),
            EnvName::BipointTransfer => (8, 6, false),
            EnvName::PointTrack => (4, 2, true),
        };
        EnvSpec {
            name,
            obs_dim,
            goal_dim: 2,
            action_dim,
            horizon: HORIZON,
            success_threshold: THRESHOLD,
            workspace: WORKSPACE,
            step_scale: STEP_SCALE,
            dense_reward,
        }
    }

    /// Reward as a pure function of a goal pair; identical to what `step`
    /// emits, which is what makes hindsight relabeling consistent.
    pub fn compute_reward(&self, achieved: &[Scalar], desired: &[Scalar]) -> Scalar {
        debug_assert_eq!(achieved.len(), desired.len());
        let dist = euclidean(achieved, desired);
        if self.dense_reward {
            -dist
        } else if dist < self.success_threshold {
            0.0
        } else {
            -1.0
        }
    }

    pub fn is_success(&self, achieved: &[Scalar], desired: &[Scalar]) -> bool {
        euclidean(achieved, desired) < self.success_threshold
    }

    /// Dimension of the policy input (observation concatenated with the
    /// desired goal).
    pub fn state_dim(&self) -> usize {
        self.obs_dim + self.goal_dim
    }
}

pub(crate) fn euclidean(a: &[Scalar], b: &[Scalar]) -> Scalar {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<Scalar>()
        .sqrt()
}

/// One observation of a goal-conditioned task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalObservation {
    pub observation: Vec<Scalar>,
    pub achieved_goal: Vec<Scalar>,
    pub desired_goal: Vec<Scalar>,
}

impl GoalObservation {
    /// Policy/critic input: observation followed by the desired goal.
    pub fn policy_input(&self) -> Vec<Scalar> {
        let mut input = Vec::with_capacity(self.observation.len() + self.desired_goal.len());
        input.extend_from_slice(&self.observation);
        input.extend_from_slice(&self.desired_goal);
        input
    }
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_observation: GoalObservation,
    pub reward: Scalar,
    pub done: bool,
    pub success: bool,
}

/// Which agent currently carries the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Attachment {
    Free,
    AgentA,
    AgentB,
}

#[derive(Debug, Clone)]
pub(crate) struct EnvState {
    pub agent_a: [Scalar; 2],
    pub agent_b: [Scalar; 2],
    pub object: [Scalar; 2],
    pub goal: [Scalar; 2],
    pub attachment: Attachment,
    pub target_vel: [Scalar; 2],
}

/// A toy manipulation environment instance.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    spec: EnvSpec,
    state: EnvState,
    step_index: usize,
    ready: bool,
}

impl ToyEnv {
    pub fn new(name: EnvName) -> Self {
        ToyEnv {
            spec: EnvSpec::for_name(name),
            state: EnvState {
                agent_a: [0.0; 2],
                agent_b: [0.0; 2],
                object: [0.0; 2],
                goal: [0.0; 2],
                attachment: Attachment::Free,
                target_vel: [0.0; 2],
            },
            step_index: 0,
            ready: false,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub(crate) fn state(&self) -> &EnvState {
        &self.state
    }

    /// Re-initializes the episode from a seed. Positions are drawn inside
    /// the workspace and the goal is redrawn until it sits at least twice
    /// the success threshold from the initial achieved goal.
    pub fn reset(&mut self, seed: u64) -> GoalObservation {
        let mut rng = Rng::seed_from_u64(seed);
        let spawn = Uniform::new_inclusive(-SPAWN, SPAWN);
        let min_gap = 2.0 * self.spec.success_threshold;
        let state = &mut self.state;
        state.attachment = Attachment::Free;
        state.target_vel = [0.0; 2];
        match self.spec.name {
            EnvName::PointReach => {
                state.agent_a = sample_point(&mut rng, &spawn, &spawn);
                state.object = [0.0; 2];
                state.goal = sample_goal(&mut rng, &spawn, &spawn, &state.agent_a, min_gap);
            }
            EnvName::PointPickPlace => {
                state.agent_a = sample_point(&mut rng, &spawn, &spawn);
                state.object = sample_point(&mut rng, &spawn, &spawn);
                state.goal = sample_goal(&mut rng, &spawn, &spawn, &state.object, min_gap);
            }
            EnvName::BipointTransfer => {
                let ax = Uniform::new_inclusive(A_SPAWN_X[0], A_SPAWN_X[1]);
                let bx = Uniform::new_inclusive(B_SPAWN_X[0], B_SPAWN_X[1]);
                let ox = Uniform::new_inclusive(OBJECT_X[0], OBJECT_X[1]);
                let gx = Uniform::new_inclusive(GOAL_X[0], GOAL_X[1]);
                let ty = Uniform::new_inclusive(-TRANSFER_Y, TRANSFER_Y);
                state.agent_a = sample_point(&mut rng, &ax, &ty);
                state.agent_b = sample_point(&mut rng, &bx, &ty);
                state.object = sample_point(&mut rng, &ox, &ty);
                state.goal = sample_goal(&mut rng, &gx, &ty, &state.object, min_gap);
            }
            EnvName::PointTrack => {
                state.agent_a = sample_point(&mut rng, &spawn, &spawn);
                // `object` doubles as the moving target.
                state.object = sample_goal(&mut rng, &spawn, &spawn, &state.agent_a, min_gap);
                state.goal = state.object;
                let angle = Uniform::new(0.0, std::f64::consts::TAU).sample(&mut rng);
                state.target_vel = [TRACK_SPEED * angle.cos(), TRACK_SPEED * angle.sin()];
            }
        }
        self.step_index = 0;
        self.ready = true;
        self.observe()
    }

    /// Current observation.
    pub fn observe(&self) -> GoalObservation {
        let s = &self.state;
        let (observation, achieved_goal) = match self.spec.name {
            EnvName::PointReach => (s.agent_a.to_vec(), s.agent_a.to_vec()),
            EnvName::PointPickPlace => {
                let held = if s.attachment == Attachment::AgentA {
                    1.0
                } else {
                    0.0
                };
                (
                    vec![s.agent_a[0], s.agent_a[1], s.object[0], s.object[1], held],
                    s.object.to_vec(),
                )
            }
            EnvName::BipointTransfer => {
                let held_a = if s.attachment == Attachment::AgentA {
                    1.0
                } else {
                    0.0
                };
                let held_b = if s.attachment == Attachment::AgentB {
                    1.0
                } else {
                    0.0
                };
                (
                    vec![
                        s.agent_a[0],
                        s.agent_a[1],
                        s.agent_b[0],
                        s.agent_b[1],
                        s.object[0],
                        s.object[1],
                        held_a,
                        held_b,
                    ],
                    s.object.to_vec(),
                )
            }
            EnvName::PointTrack => (
                vec![s.agent_a[0], s.agent_a[1], s.target_vel[0], s.target_vel[1]],
                s.agent_a.to_vec(),
            ),
        };
        GoalObservation {
            observation,
            achieved_goal,
            desired_goal: s.goal.to_vec(),
        }
    }

    /// Advances the simulation by one action.
    pub fn step(&mut self, action: &[Scalar]) -> Result<StepResult> {
        if !self.ready {
            return Err(Error::usage("step called before reset"));
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::usage(format!(
                "action of length {} does not match action dim {}",
                action.len(),
                self.spec.action_dim
            )));
        }
        if self.step_index >= self.spec.horizon {
            return Err(Error::usage("episode is over; reset the environment"));
        }
        let clipped: Vec<Scalar> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let scale = self.spec.step_scale;
        let s = &mut self.state;

        match self.spec.name {
            EnvName::PointReach => {
                s.agent_a = self.spec.workspace.clamp([
                    s.agent_a[0] + scale * clipped[0],
                    s.agent_a[1] + scale * clipped[1],
                ]);
            }
            EnvName::PointPickPlace => {
                s.agent_a = self.spec.workspace.clamp([
                    s.agent_a[0] + scale * clipped[0],
                    s.agent_a[1] + scale * clipped[1],
                ]);
                let grip = clipped[2];
                if s.attachment == Attachment::AgentA && grip >= 0.0 {
                    s.attachment = Attachment::Free;
                }
                if s.attachment == Attachment::Free
                    && grip < 0.0
                    && euclidean(&s.agent_a, &s.object) < self.spec.success_threshold
                {
                    s.attachment = Attachment::AgentA;
                }
                if s.attachment == Attachment::AgentA {
                    s.object = s.agent_a;
                }
            }
            EnvName::BipointTransfer => {
                let a_bounds = Bounds {
                    min: self.spec.workspace.min,
                    max: [OVERLAP, self.spec.workspace.max[1]],
                };
                let b_bounds = Bounds {
                    min: [-OVERLAP, self.spec.workspace.min[1]],
                    max: self.spec.workspace.max,
                };
                s.agent_a = a_bounds.clamp([
                    s.agent_a[0] + scale * clipped[0],
                    s.agent_a[1] + scale * clipped[1],
                ]);
                s.agent_b = b_bounds.clamp([
                    s.agent_b[0] + scale * clipped[3],
                    s.agent_b[1] + scale * clipped[4],
                ]);
                let (grip_a, grip_b) = (clipped[2], clipped[5]);
                match s.attachment {
                    Attachment::AgentA if grip_a >= 0.0 => s.attachment = Attachment::Free,
                    Attachment::AgentB if grip_b >= 0.0 => s.attachment = Attachment::Free,
                    _ => {}
                }
                if s.attachment == Attachment::Free {
                    if grip_a < 0.0
                        && euclidean(&s.agent_a, &s.object) < self.spec.success_threshold
                    {
                        s.attachment = Attachment::AgentA;
                    } else if grip_b < 0.0
                        && euclidean(&s.agent_b, &s.object) < self.spec.success_threshold
                    {
                        s.attachment = Attachment::AgentB;
                    }
                }
                match s.attachment {
                    Attachment::AgentA => s.object = s.agent_a,
                    Attachment::AgentB => s.object = s.agent_b,
                    Attachment::Free => {}
                }
            }
            EnvName::PointTrack => {
                // The target moves first, reflecting off the walls.
                for axis in 0..2 {
                    let mut p = s.object[axis] + s.target_vel[axis];
                    let (lo, hi) = (self.spec.workspace.min[axis], self.spec.workspace.max[axis]);
                    if p < lo {
                        p = lo + (lo - p);
                        s.target_vel[axis] = -s.target_vel[axis];
                    } else if p > hi {
                        p = hi - (p - hi);
                        s.target_vel[axis] = -s.target_vel[axis];
                    }
                    s.object[axis] = p;
                }
                s.goal = s.object;
                s.agent_a = self.spec.workspace.clamp([
                    s.agent_a[0] + scale * clipped[0],
                    s.agent_a[1] + scale * clipped[1],
                ]);
            }
        }

        self.step_index += 1;
        let next_observation = self.observe();
        let reward = self
            .spec
            .compute_reward(&next_observation.achieved_goal, &next_observation.desired_goal);
        let success = self
            .spec
            .is_success(&next_observation.achieved_goal, &next_observation.desired_goal);
        Ok(StepResult {
            next_observation,
            reward,
            done: self.step_index == self.spec.horizon,
            success,
        })
    }

    /// Reward for an arbitrary goal pair; see [`EnvSpec::compute_reward`].
    pub fn compute_reward(&self, achieved: &[Scalar], desired: &[Scalar]) -> Scalar {
        self.spec.compute_reward(achieved, desired)
    }

    /// Scripted waypoint controller for the current state.
    pub fn expert_action(&self) -> Vec<Scalar> {
        expert::action(self)
    }

    #[cfg(test)]
    pub(crate) fn force_state(&mut self, f: impl FnOnce(&mut EnvState)) {
        f(&mut self.state);
    }
}

fn sample_point<D: Distribution<Scalar>>(rng: &mut Rng, dx: &D, dy: &D) -> [Scalar; 2] {
    // Fixed draw order: x then y.
    let x = dx.sample(rng);
    let y = dy.sample(rng);
    [x, y]
}

fn sample_goal<D: Distribution<Scalar>>(
    rng: &mut Rng,
    dx: &D,
    dy: &D,
    anchor: &[Scalar; 2],
    min_gap: Scalar,
) -> [Scalar; 2] {
    loop {
        let candidate = sample_point(rng, dx, dy);
        if euclidean(&candidate, anchor) >= min_gap {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        for name in EnvName::ALL {
            let mut a = ToyEnv::new(name);
            let mut b = ToyEnv::new(name);
            assert_eq!(a.reset(42), b.reset(42));
            assert_ne!(a.reset(1), b.reset(2));
        }
    }

    #[test]
    fn resets_respect_workspace_and_goal_gap() {
        let mut env = ToyEnv::new(EnvName::PointReach);
        let mut min_gap = f64::INFINITY;
        for seed in 0..1000 {
            let obs = env.reset(seed);
            assert!(env.spec().workspace.contains(&obs.desired_goal));
            assert!(env.spec().workspace.contains(&obs.achieved_goal));
            min_gap = min_gap.min(euclidean(&obs.achieved_goal, &obs.desired_goal));
        }
        assert!(min_gap >= 2.0 * env.spec().success_threshold);
    }

    #[test]
    fn zero_action_keeps_positions_and_fails_sparse_reward() {
        let mut env = ToyEnv::new(EnvName::PointPickPlace);
        let obs = env.reset(3);
        let result = env.step(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(result.next_observation.observation, obs.observation);
        assert_eq!(result.reward, -1.0);
        assert!(!result.success);
    }

    #[test]
    fn outward_push_at_boundary_is_clamped() {
        let mut env = ToyEnv::new(EnvName::PointReach);
        env.reset(5);
        for _ in 0..30 {
            env.step(&[1.0, 0.0]).unwrap();
        }
        let x_before = env.observe().observation[0];
        assert_eq!(x_before, 1.0);
        let result = env.step(&[1.0, 0.0]).unwrap();
        assert_eq!(result.next_observation.observation[0], x_before);
    }

    #[test]
    fn actions_outside_unit_box_are_clipped() {
        let mut env = ToyEnv::new(EnvName::PointReach);
        env.reset(6);
        let before = env.observe().observation;
        let after = env.step(&[10.0, -10.0]).unwrap().next_observation.observation;
        let dx = after[0] - before[0];
        let dy = after[1] - before[1];
        assert!(dx <= env.spec().step_scale + 1e-12);
        assert!(dy >= -env.spec().step_scale - 1e-12);
    }

    #[test]
    fn reach_success_close_to_goal() {
        let mut env = ToyEnv::new(EnvName::PointReach);
        env.reset(7);
        env.force_state(|s| {
            s.agent_a = [0.0, 0.0];
            s.goal = [0.03, 0.0];
        });
        // Distance 0.03 < 0.05: already a success; a zero action keeps it.
        let result = env.step(&[0.0, 0.0]).unwrap();
        assert!(result.success);
        assert_eq!(result.reward, 0.0);
    }

    #[test]
    fn reward_conventions() {
        let sparse = EnvSpec::for_name(EnvName::PointReach);
        assert_eq!(sparse.compute_reward(&[0.2, 0.2], &[0.2, 0.2]), 0.0);
        // Exactly at the threshold counts as a failure: strict inequality.
        assert_eq!(sparse.compute_reward(&[0.05, 0.0], &[0.0, 0.0]), -1.0);
        let dense = EnvSpec::for_name(EnvName::PointTrack);
        assert_eq!(dense.compute_reward(&[0.0, 0.0], &[3.0, 4.0]), -5.0);
        assert_eq!(dense.compute_reward(&[0.1, -0.4], &[0.1, -0.4]), 0.0);
    }

    #[test]
    fn step_reward_matches_compute_reward_for_logged_transitions() {
        for name in EnvName::ALL {
            let mut env = ToyEnv::new(name);
            env.reset(11);
            for step in 0..env.spec().horizon {
                let action: Vec<f64> = (0..env.spec().action_dim)
                    .map(|i| ((step * 7 + i * 3) as f64 * 0.37).sin())
                    .collect();
                let result = env.step(&action).unwrap();
                let recomputed = env.compute_reward(
                    &result.next_observation.achieved_goal,
                    &result.next_observation.desired_goal,
                );
                assert_eq!(result.reward, recomputed);
            }
        }
    }

    #[test]
    fn done_fires_exactly_at_horizon() {
        let mut env = ToyEnv::new(EnvName::PointReach);
        env.reset(13);
        for step in 1..=env.spec().horizon {
            let result = env.step(&[0.1, 0.1]).unwrap();
            assert_eq!(result.done, step == env.spec().horizon);
        }
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn trajectory_is_function_of_seed_and_actions() {
        for name in EnvName::ALL {
            let replay = |seed: u64| {
                let mut env = ToyEnv::new(name);
                env.reset(seed);
                let mut log = Vec::new();
                for step in 0..env.spec().horizon {
                    let action: Vec<f64> = (0..env.spec().action_dim)
                        .map(|i| ((step + i) as f64 * 0.61).cos())
                        .collect();
                    log.push(env.step(&action).unwrap());
                }
                log
            };
            assert_eq!(replay(99), replay(99));
        }
    }

    #[test]
    fn wrong_action_length_is_a_usage_error() {
        let mut env = ToyEnv::new(EnvName::PointPickPlace);
        env.reset(1);
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn object_rides_on_holder_while_attached() {
        let mut env = ToyEnv::new(EnvName::PointPickPlace);
        env.reset(17);
        env.force_state(|s| {
            s.agent_a = [0.1, 0.1];
            s.object = [0.12, 0.1];
        });
        env.step(&[0.0, 0.0, -1.0]).unwrap();
        for _ in 0..10 {
            let obs = env.step(&[0.5, -0.3, -1.0]).unwrap().next_observation;
            assert_eq!(obs.observation[0], obs.observation[2]);
            assert_eq!(obs.observation[1], obs.observation[3]);
            assert_eq!(obs.observation[4], 1.0);
        }
        // Opening the grip drops the object in place.
        let held_pos = [env.observe().observation[2], env.observe().observation[3]];
        let obs = env.step(&[1.0, 0.0, 1.0]).unwrap().next_observation;
        assert_eq!(obs.observation[2], held_pos[0]);
        assert_eq!(obs.observation[3], held_pos[1]);
        assert_eq!(obs.observation[4], 0.0);
    }

    #[test]
    fn track_target_stays_inside_workspace() {
        let mut env = ToyEnv::new(EnvName::PointTrack);
        env.reset(23);
        for _ in 0..env.spec().horizon {
            let obs = env.step(&[0.0, 0.0]).unwrap().next_observation;
            assert!(env.spec().workspace.contains(&obs.desired_goal));
        }
    }
}
