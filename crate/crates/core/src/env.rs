//! Seeded gridworld with noisy one-hot image observations.
//!
//! Observations are three stacked `width × height` planes (agent, goal,
//! hazards) plus clipped Gaussian pixel noise.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const NUM_ACTIONS: usize = 4;

pub const GOAL_REWARD: f64 = 1.0;
pub const HAZARD_REWARD: f64 = -1.0;
pub const STEP_REWARD: f64 = -0.01;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action {i} out of range 0..4")))
    }
}

/// Layout and observation model. Cells are `(x, y)` with `y` growing downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    #[serde(default)]
    pub hazards: Vec<Cell>,
    pub obs_dim: usize,
    pub noise_sigma: f64,
    pub max_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            start: (0, 0),
            goal: (7, 7),
            hazards: vec![(2, 2), (5, 2), (3, 5), (6, 5)],
            obs_dim: 8 * 8 * CHANNELS,
            noise_sigma: 0.05,
            max_steps: 100,
        }
    }
}

impl GridSpec {
    /// Open grid without hazards, start top-left, goal bottom-right.
    pub fn open(width: usize, height: usize, noise_sigma: f64) -> Self {
        Self {
            width,
            height,
            start: (0, 0),
            goal: (width - 1, height - 1),
            hazards: Vec::new(),
            obs_dim: width * height * CHANNELS,
            noise_sigma,
            max_steps: 4 * width * height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.width == 0 || self.height == 0 || self.max_steps == 0 {
            return bad("width, height and max_steps must be positive".into());
        }
        let in_bounds = |(x, y): Cell| x < self.width && y < self.height;
        if !in_bounds(self.start) || !in_bounds(self.goal) {
            return bad("start/goal out of bounds".into());
        }
        if self.start == self.goal {
            return bad("start must differ from goal".into());
        }
        if let Some(h) = self.hazards.iter().find(|&&h| !in_bounds(h)) {
            return bad(format!("hazard {h:?} out of bounds"));
        }
        if self.hazards.contains(&self.start) || self.hazards.contains(&self.goal) {
            return bad("hazards may not cover start or goal".into());
        }
        if self.obs_dim != self.width * self.height * CHANNELS {
            return bad(format!(
                "obs_dim {} inconsistent with {}x{}x{CHANNELS}",
                self.obs_dim, self.width, self.height
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_hazard(&self, cell: Cell) -> bool {
        self.hazards.contains(&cell)
    }

    fn plane_index(&self, channel: usize, (x, y): Cell) -> usize {
        channel * self.width * self.height + y * self.width + x
    }

    /// Observation without noise for the agent standing on `cell`.
    pub fn clean_render(&self, cell: Cell) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim];
        obs[self.plane_index(0, cell)] = 1.0;
        obs[self.plane_index(1, self.goal)] = 1.0;
        for &h in &self.hazards {
            obs[self.plane_index(2, h)] = 1.0;
        }
        obs
    }

    pub fn moved(&self, (x, y): Cell, action: Action) -> Cell {
        match action {
            Action::Up if y > 0 => (x, y - 1),
            Action::Down if y + 1 < self.height => (x, y + 1),
            Action::Left if x > 0 => (x - 1, y),
            Action::Right if x + 1 < self.width => (x + 1, y),
            _ => (x, y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub agent_cell: Cell,
    pub step_count: usize,
    pub done: bool,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Environment instance: a spec plus its mutable state.
#[derive(Debug, Clone)]
pub struct GridEnv {
    spec: GridSpec,
    state: EnvState,
    obs: Vec<f64>,
}

impl GridEnv {
    pub fn reset(spec: &GridSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut state = EnvState {
            agent_cell: spec.start,
            step_count: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let obs = render(&mut state, spec);
        Ok(Self {
            spec: spec.clone(),
            state,
            obs,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation(&self) -> &[f64] {
        &self.obs
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn step(&mut self, action: usize) -> Result<Transition> {
        let act = Action::from_index(action)?;
        if self.state.done {
            return Err(Error::InvalidArgument("step called on a finished episode".into()));
        }
        let cell = self.spec.moved(self.state.agent_cell, act);
        self.state.agent_cell = cell;
        self.state.step_count += 1;
        let (reward, terminal) = if cell == self.spec.goal {
            (GOAL_REWARD, true)
        } else if self.spec.is_hazard(cell) {
            (HAZARD_REWARD, true)
        } else {
            (STEP_REWARD, false)
        };
        self.state.done = terminal || self.state.step_count >= self.spec.max_steps;
        let next_obs = render(&mut self.state, &self.spec);
        let obs = std::mem::replace(&mut self.obs, next_obs.clone());
        Ok(Transition {
            obs,
            action,
            reward,
            next_obs,
            done: self.state.done,
        })
    }
}

/// Renders the current cell, drawing pixel noise from the state's stream.
pub fn render(state: &mut EnvState, spec: &GridSpec) -> Vec<f64> {
    let mut obs = spec.clean_render(state.agent_cell);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in obs.iter_mut() {
            *v = (*v + normal.sample(&mut state.rng)).clamp(0.0, 1.0);
        }
    }
    obs
}

/// Length of the shortest hazard-free path from start to goal (BFS).
pub fn shortest_path_len(spec: &GridSpec) -> Option<usize> {
    let mut dist = vec![usize::MAX; spec.width * spec.height];
    let idx = |(x, y): Cell| y * spec.width + x;
    let mut queue = std::collections::VecDeque::from([spec.start]);
    dist[idx(spec.start)] = 0;
    while let Some(cell) = queue.pop_front() {
        if cell == spec.goal {
            return Some(dist[idx(cell)]);
        }
        for a in Action::ALL {
            let next = spec.moved(cell, a);
            if next == cell || spec.is_hazard(next) || dist[idx(next)] != usize::MAX {
                continue;
            }
            dist[idx(next)] = dist[idx(cell)] + 1;
            queue.push_back(next);
        }
    }
    None
}

/// Return of an episode that follows a shortest path.
pub fn optimal_return(spec: &GridSpec) -> Option<f64> {
    shortest_path_len(spec).map(|n| GOAL_REWARD + STEP_REWARD * (n as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        let spec = GridSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.obs_dim, 192);
        assert_eq!(shortest_path_len(&spec), Some(14));
        assert!((optimal_return(&spec).unwrap() - 0.87).abs() < 1e-12);
    }

    #[test]
    fn reset_is_deterministic() {
        let spec = GridSpec::default();
        let a = GridEnv::reset(&spec, 7).unwrap();
        let b = GridEnv::reset(&spec, 7).unwrap();
        assert_eq!(a.observation(), b.observation());
    }

    #[test]
    fn zero_noise_matches_clean_render() {
        let spec = GridSpec {
            noise_sigma: 0.0,
            ..GridSpec::default()
        };
        let env = GridEnv::reset(&spec, 1).unwrap();
        assert_eq!(env.observation(), spec.clean_render(spec.start).as_slice());
    }

    #[test]
    fn observations_are_clipped() {
        let spec = GridSpec {
            noise_sigma: 0.8,
            ..GridSpec::default()
        };
        let mut env = GridEnv::reset(&spec, 3).unwrap();
        for _ in 0..5 {
            let t = env.step(3).unwrap();
            assert!(t.next_obs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let same = GridSpec {
            goal: (0, 0),
            ..GridSpec::default()
        };
        assert!(GridEnv::reset(&same, 0).is_err());
        let dim = GridSpec {
            obs_dim: 10,
            ..GridSpec::default()
        };
        assert!(dim.validate().is_err());
        let oob = GridSpec {
            hazards: vec![(8, 0)],
            ..GridSpec::default()
        };
        assert!(oob.validate().is_err());
    }

    #[test]
    fn goal_step_terminates_with_reward() {
        let spec = GridSpec {
            start: (6, 7),
            ..GridSpec::default()
        };
        let mut env = GridEnv::reset(&spec, 0).unwrap();
        let t = env.step(Action::Right as usize).unwrap();
        assert_eq!(t.reward, GOAL_REWARD);
        assert!(t.done);
    }

    #[test]
    fn wall_blocks_movement() {
        let spec = GridSpec::default();
        let mut env = GridEnv::reset(&spec, 0).unwrap();
        let t = env.step(Action::Up as usize).unwrap();
        assert_eq!(env.state().agent_cell, (0, 0));
        assert_eq!(t.reward, STEP_REWARD);
        assert!(!t.done);
    }

    #[test]
    fn hazard_terminates() {
        let spec = GridSpec {
            start: (1, 2),
            ..GridSpec::default()
        };
        let mut env = GridEnv::reset(&spec, 0).unwrap();
        let t = env.step(Action::Right as usize).unwrap();
        assert_eq!(t.reward, HAZARD_REWARD);
        assert!(t.done);
    }

    #[test]
    fn action_out_of_range() {
        let mut env = GridEnv::reset(&GridSpec::default(), 0).unwrap();
        assert!(env.step(4).is_err());
    }

    #[test]
    fn shortest_path_return_on_open_grid() {
        let spec = GridSpec::open(5, 5, 0.0);
        let n = shortest_path_len(&spec).unwrap();
        assert_eq!(n, 8);
        // Walk a monotone path: right×4 then down×4.
        let mut env = GridEnv::reset(&spec, 0).unwrap();
        let mut ret = 0.0;
        for a in [3, 3, 3, 3, 1, 1, 1, 1] {
            ret += env.step(a).unwrap().reward;
        }
        assert!(env.is_done());
        assert!((ret - (1.0 - 0.01 * (n as f64 - 1.0))).abs() < 1e-12);
    }

    #[test]
    fn episodes_end_within_max_steps() {
        let spec = GridSpec {
            max_steps: 10,
            ..GridSpec::default()
        };
        let mut env = GridEnv::reset(&spec, 0).unwrap();
        let mut n = 0;
        while !env.is_done() {
            env.step(if n % 2 == 0 { 0 } else { 2 }).unwrap();
            n += 1;
        }
        assert_eq!(n, 10);
    }

    #[test]
    fn noise_mean_matches_clean_render() {
        let spec = GridSpec::default();
        let clean = spec.clean_render(spec.start);
        let draws = 10_000;
        let mut mean = vec![0.0; spec.obs_dim];
        let mut state = EnvState {
            agent_cell: spec.start,
            step_count: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(99),
        };
        for _ in 0..draws {
            for (m, v) in mean.iter_mut().zip(render(&mut state, &spec)) {
                *m += v / draws as f64;
            }
        }
        let tol = 3.0 * spec.noise_sigma / 100.0;
        // Clipping at 0 or 1 biases pixels whose clean value sits on the
        // boundary by sigma/sqrt(2π); compare against that clipped mean.
        let clip_bias = spec.noise_sigma / (2.0 * std::f64::consts::PI).sqrt();
        for (m, c) in mean.iter().zip(&clean) {
            let expect = if *c == 0.0 { clip_bias } else { 1.0 - clip_bias };
            assert!((m - expect).abs() < tol, "mean {m} vs {expect}");
        }
    }
}
