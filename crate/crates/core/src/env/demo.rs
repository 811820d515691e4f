//! Demonstration recording and the demonstration file format.
//!
//! A demonstration file is line-delimited JSON: a header object on the
//! first line, then one transition object per line in episode-major,
//! step-major order. Field order is fixed by the record structs, so
//! identical generations serialize to identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{EnvName, ToyEnv};
use crate::error::{Error, Result};
use crate::replay::Transition;
use crate::rng::derive_seed;
use crate::Scalar;

pub const DEMO_FORMAT_VERSION: u32 = 1;

/// Expert failure tracking window for the broken-expert abort.
const FAILURE_WINDOW: usize = 50;

/// First line of a demonstration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoHeader {
    pub format_version: u32,
    pub env: EnvName,
    pub obs_dim: usize,
    pub goal_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// One transition line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DemoRecord {
    episode: u64,
    step: usize,
    observation: Vec<Scalar>,
    achieved_goal: Vec<Scalar>,
    desired_goal: Vec<Scalar>,
    action: Vec<Scalar>,
    reward: Scalar,
    next_observation: Vec<Scalar>,
    next_achieved_goal: Vec<Scalar>,
    next_desired_goal: Vec<Scalar>,
}

/// A demonstration set in memory: successful episodes only.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub header: DemoHeader,
    pub episodes: Vec<Vec<Transition>>,
}

impl DemoSet {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }
}

/// Expert rollout statistics from a generation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenStats {
    pub attempts: usize,
    pub successes: usize,
}

impl GenStats {
    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }
}

/// Rolls out the scripted expert until `episodes` successful episodes
/// are collected, retrying failures with fresh seeds. Aborts if the
/// recent failure rate exceeds one half, which indicates a broken
/// expert rather than bad luck.
pub fn generate_demonstrations(
    name: EnvName,
    episodes: usize,
    seed: u64,
) -> Result<(DemoSet, GenStats)> {
    generate_with_policy(name, episodes, seed, |env| env.expert_action())
}

fn generate_with_policy(
    name: EnvName,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&ToyEnv) -> Vec<Scalar>,
) -> Result<(DemoSet, GenStats)> {
    if episodes == 0 {
        return Err(Error::usage("episodes must be >= 1"));
    }
    let mut env = ToyEnv::new(name);
    let mut collected: Vec<Vec<Transition>> = Vec::with_capacity(episodes);
    let mut window: std::collections::VecDeque<bool> = std::collections::VecDeque::new();
    let mut stats = GenStats {
        attempts: 0,
        successes: 0,
    };

    while collected.len() < episodes {
        let episode_seed = derive_seed(seed, "demo-episode", &[stats.attempts as u64]);
        let mut state = env.reset(episode_seed);
        let mut transitions = Vec::with_capacity(env.spec().horizon);
        let mut success = false;
        for step in 0..env.spec().horizon {
            let action = policy(&env);
            let result = env.step(&action)?;
            transitions.push(Transition {
                state: state.clone(),
                action,
                reward: result.reward,
                next_state: result.next_observation.clone(),
                episode_id: collected.len() as u64,
                step_index: step,
            });
            state = result.next_observation;
            success = result.success;
        }
        stats.attempts += 1;
        if success {
            stats.successes += 1;
            collected.push(transitions);
        }
        window.push_back(success);
        if window.len() > FAILURE_WINDOW {
            window.pop_front();
        }
        let recent_failures = window.iter().filter(|&&s| !s).count();
        if window.len() == FAILURE_WINDOW && 2 * recent_failures > FAILURE_WINDOW {
            return Err(Error::numeric(format!(
                "expert failed {recent_failures} of the last {FAILURE_WINDOW} attempts \
                 on {name} ({} collected of {episodes} requested); the expert looks broken",
                collected.len()
            )));
        }
    }

    let spec = env.spec();
    let header = DemoHeader {
        format_version: DEMO_FORMAT_VERSION,
        env: name,
        obs_dim: spec.obs_dim,
        goal_dim: spec.goal_dim,
        action_dim: spec.action_dim,
        horizon: spec.horizon,
        episodes,
        seed,
    };
    Ok((
        DemoSet {
            header,
            episodes: collected,
        },
        stats,
    ))
}

pub fn write_demos<W: Write>(mut out: W, demos: &DemoSet) -> Result<()> {
    let header = serde_json::to_string(&demos.header)
        .map_err(|e| Error::format(format!("demo header serialization: {e}")))?;
    writeln!(out, "{header}")?;
    for episode in &demos.episodes {
        for t in episode {
            let record = DemoRecord {
                episode: t.episode_id,
                step: t.step_index,
                observation: t.state.observation.clone(),
                achieved_goal: t.state.achieved_goal.clone(),
                desired_goal: t.state.desired_goal.clone(),
                action: t.action.clone(),
                reward: t.reward,
                next_observation: t.next_state.observation.clone(),
                next_achieved_goal: t.next_state.achieved_goal.clone(),
                next_desired_goal: t.next_state.desired_goal.clone(),
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::format(format!("demo record serialization: {e}")))?;
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

pub fn read_demos<R: BufRead>(input: R) -> Result<DemoSet> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format("demo file is empty"))??;
    let header: DemoHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::format(format!("demo header: {e}")))?;
    if header.format_version != DEMO_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported demo format version {}",
            header.format_version
        )));
    }

    let mut episodes: Vec<Vec<Transition>> = vec![Vec::new(); header.episodes];
    let mut count = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DemoRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("demo record: {e}")))?;
        let episode = record.episode as usize;
        if episode >= header.episodes {
            return Err(Error::format(format!(
                "demo record references episode {episode} beyond header count {}",
                header.episodes
            )));
        }
        if record.observation.len() != header.obs_dim
            || record.action.len() != header.action_dim
            || record.desired_goal.len() != header.goal_dim
        {
            return Err(Error::format("demo record dimensions disagree with header"));
        }
        episodes[episode].push(Transition {
            state: crate::env::GoalObservation {
                observation: record.observation,
                achieved_goal: record.achieved_goal,
                desired_goal: record.desired_goal,
            },
            action: record.action,
            reward: record.reward,
            next_state: crate::env::GoalObservation {
                observation: record.next_observation,
                achieved_goal: record.next_achieved_goal,
                desired_goal: record.next_desired_goal,
            },
            episode_id: record.episode,
            step_index: record.step,
        });
        count += 1;
    }
    if count != header.episodes * header.horizon {
        return Err(Error::format(format!(
            "demo file holds {count} transitions, header promises {}",
            header.episodes * header.horizon
        )));
    }
    for (e, episode) in episodes.iter().enumerate() {
        if episode.len() != header.horizon
            || episode.iter().enumerate().any(|(i, t)| t.step_index != i)
        {
            return Err(Error::format(format!("episode {e} is not contiguous")));
        }
    }
    Ok(DemoSet { header, episodes })
}

pub fn save_demos(path: &Path, demos: &DemoSet) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    write_demos(&mut writer, demos)?;
    writer.flush()?;
    Ok(())
}

pub fn load_demos(path: &Path) -> Result<DemoSet> {
    let file = File::open(path)?;
    read_demos(BufReader::new(file))
}
