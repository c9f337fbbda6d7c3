//! Episode-preserving replay.
//!
//! Episodes can be filled incrementally so the learner may sample from an
//! episode that is still being collected. Windows never cross an episode
//! boundary and never run past the last stored transition.

use std::collections::VecDeque;

use rand::Rng;

use crate::nn::time_embed;
use crate::rng::Stream;
use crate::sde::Trajectory;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    /// `len + 1` time-embedded states.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub reward_rates: Vec<f64>,
    pub step_size: f64,
    /// `g(x_K)` when the window ends on the final state of a finished episode.
    pub terminal: Option<f64>,
}

#[derive(Clone, Debug)]
struct Episode {
    id: u64,
    step_size: f64,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    reward_rates: Vec<f64>,
    terminal_value: Option<f64>,
}

impl Episode {
    fn transitions(&self) -> usize {
        self.actions.len()
    }
}

/// Handle to an episode opened with [`ReplayBuffer::begin_episode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeId(u64);

pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity: usize,
    stored: usize,
    next_id: u64,
    rng: Stream,
}

impl ReplayBuffer {
    /// `capacity` counts transitions over all stored episodes.
    pub fn new(capacity: usize, rng: Stream) -> Self {
        Self {
            episodes: VecDeque::new(),
            capacity,
            stored: 0,
            next_id: 0,
            rng,
        }
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_finished(&self) -> usize {
        self.episodes.iter().filter(|e| e.terminal_value.is_some()).count()
    }

    pub fn num_transitions(&self) -> usize {
        self.stored
    }

    /// Longest stored episode, counted in transitions.
    pub fn max_episode_len(&self) -> usize {
        self.episodes.iter().map(Episode::transitions).max().unwrap_or(0)
    }

    pub fn push_episode(&mut self, traj: &Trajectory) -> Result<()> {
        traj.validate()?;
        let k = traj.num_steps();
        if k < 2 {
            return Err(Error::InvalidArgument(format!("episode needs K >= 2, got {k}")));
        }
        let horizon = traj.horizon();
        let states = traj
            .states
            .iter()
            .zip(&traj.times)
            .map(|(x, &t)| time_embed(t, x, horizon))
            .collect::<Result<Vec<_>>>()?;
        let id = self.open(traj.step_size, states[0].clone());
        let ep = self.episodes.back_mut().expect("just opened");
        ep.states = states;
        ep.actions = traj.actions.clone();
        ep.reward_rates = traj.reward_rates.clone();
        self.stored += k;
        self.finish(id, traj.terminal_value)
    }

    /// Opens an episode whose first embedded state is `state`.
    pub fn begin_episode(&mut self, step_size: f64, state: Vec<f64>) -> EpisodeId {
        self.open(step_size, state)
    }

    fn open(&mut self, step_size: f64, state: Vec<f64>) -> EpisodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.episodes.push_back(Episode {
            id,
            step_size,
            states: vec![state],
            actions: Vec::new(),
            reward_rates: Vec::new(),
            terminal_value: None,
        });
        EpisodeId(id)
    }

    fn find_mut(&mut self, id: EpisodeId) -> Result<&mut Episode> {
        self.episodes
            .iter_mut()
            .rev()
            .find(|e| e.id == id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown episode {}", id.0)))
    }

    /// Records `(a_k, r_k)` and the state reached after the step.
    pub fn append(&mut self, id: EpisodeId, action: Vec<f64>, reward_rate: f64, next_state: Vec<f64>) -> Result<()> {
        let ep = self.find_mut(id)?;
        if ep.terminal_value.is_some() {
            return Err(Error::InvalidArgument("episode already finished".into()));
        }
        ep.actions.push(action);
        ep.reward_rates.push(reward_rate);
        ep.states.push(next_state);
        self.stored += 1;
        Ok(())
    }

    /// Closes the episode with `g(x_K)` and applies eviction.
    pub fn finish(&mut self, id: EpisodeId, terminal_value: f64) -> Result<()> {
        let ep = self.find_mut(id)?;
        ep.terminal_value = Some(terminal_value);
        self.evict();
        Ok(())
    }

    /// Drops an unfinished episode, e.g. after divergence.
    pub fn discard(&mut self, id: EpisodeId) {
        if let Some(pos) = self.episodes.iter().position(|e| e.id == id.0) {
            let ep = self.episodes.remove(pos).expect("position is valid");
            self.stored -= ep.transitions();
        }
    }

    fn evict(&mut self) {
        while self.stored > self.capacity {
            let Some(pos) = self.episodes.iter().position(|e| e.terminal_value.is_some()) else {
                break;
            };
            let is_last_finished = self.episodes.iter().skip(pos + 1).all(|e| e.terminal_value.is_none());
            if is_last_finished {
                break;
            }
            let ep = self.episodes.remove(pos).expect("position is valid");
            self.stored -= ep.transitions();
        }
    }

    /// `batch` windows sharing length `len`. A start is drawn uniformly from
    /// all valid `(episode, start)` pairs, which picks episodes with weight
    /// `K − L + 1`.
    pub fn sample_windows(&mut self, batch: usize, len: usize) -> Result<Vec<Window>> {
        if len == 0 {
            return Err(Error::InvalidArgument("window length must be at least 1".into()));
        }
        let mut cumulative = Vec::with_capacity(self.episodes.len());
        let mut total = 0usize;
        for ep in &self.episodes {
            total += (ep.transitions() + 1).saturating_sub(len);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::NoEligibleEpisode { needed: len });
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let u = self.rng.random_range(0..total);
            let idx = cumulative.partition_point(|&c| c <= u);
            let before = if idx == 0 { 0 } else { cumulative[idx - 1] };
            let ep = &self.episodes[idx];
            let start = u - before;
            out.push(Window {
                start,
                len,
                states: ep.states[start..=start + len].to_vec(),
                actions: ep.actions[start..start + len].to_vec(),
                reward_rates: ep.reward_rates[start..start + len].to_vec(),
                step_size: ep.step_size,
                terminal: ep.terminal_value.filter(|_| start + len == ep.transitions()),
            });
        }
        Ok(out)
    }

    /// `(x̃_K, g(x_K))` pairs drawn uniformly over finished episodes.
    pub fn sample_terminals(&mut self, batch: usize) -> Result<Vec<(Vec<f64>, f64)>> {
        let finished: Vec<&Episode> = self.episodes.iter().filter(|e| e.terminal_value.is_some()).collect();
        if finished.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch)
            .map(|_| {
                let ep = finished[self.rng.random_range(0..finished.len())];
                (ep.states.last().unwrap().clone(), ep.terminal_value.unwrap())
            })
            .collect())
    }

    /// Embedded states `x̃_k` with `k < K`, uniformly over all stored ones.
    pub fn sample_states(&mut self, batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut cumulative = Vec::with_capacity(self.episodes.len());
        let mut total = 0usize;
        for ep in &self.episodes {
            total += ep.transitions();
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch)
            .map(|_| {
                let u = self.rng.random_range(0..total);
                let idx = cumulative.partition_point(|&c| c <= u);
                let before = if idx == 0 { 0 } else { cumulative[idx - 1] };
                self.episodes[idx].states[u - before].clone()
            })
            .collect())
    }
}
