//! Multi-task grid family standing in for the fleet's physical stations.
//!
//! Each task id selects an obstacle generator and goal distribution; the
//! per-actor seed picks a concrete layout plus station noise (slip and
//! observation noise). A BFS expert and a distance-stall intervention gate
//! stand in for the human supervisor.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::util::mix_seed;

pub const NUM_ACTIONS: usize = 5;

/// Number of non-task entries in an observation (positions + 3x3 occupancy).
pub const BASE_FEATURES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];
    /// Movement actions in expert tie-break order.
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub x: u32,
    pub y: u32,
}

impl Cell {
    pub const fn new(x: u32, y: u32) -> Self {
        Cell { x, y }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("task id {task_id} out of range (num_tasks = {num_tasks})")]
    TaskOutOfRange { task_id: u32, num_tasks: u32 },
    #[error("invalid task family: {0}")]
    InvalidFamily(String),
}

/// Shape of the task family shared by every station.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub num_tasks: u32,
    pub width: u32,
    pub height: u32,
    pub horizon: u32,
    /// Upper bound of the per-station slip probability (at most 0.2).
    pub max_slip: f64,
    pub max_obs_noise: f64,
}

impl Default for TaskFamily {
    fn default() -> Self {
        TaskFamily {
            num_tasks: 3,
            width: 9,
            height: 9,
            horizon: 80,
            max_slip: 0.05,
            max_obs_noise: 0.02,
        }
    }
}

const MAX_LAYOUT_ATTEMPTS: usize = 512;

impl TaskFamily {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_tasks == 0 {
            return Err(EnvError::InvalidFamily("num_tasks must be positive".into()));
        }
        if self.width < 3 || self.height < 3 {
            return Err(EnvError::InvalidFamily("grid must be at least 3x3".into()));
        }
        if self.horizon == 0 {
            return Err(EnvError::InvalidFamily("horizon must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.max_slip) {
            return Err(EnvError::InvalidFamily(
                "max_slip must lie in [0, 0.2]".into(),
            ));
        }
        if !(self.max_obs_noise >= 0.0 && self.max_obs_noise.is_finite()) {
            return Err(EnvError::InvalidFamily(
                "max_obs_noise must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        BASE_FEATURES + self.num_tasks as usize
    }

    /// Deterministic draw of a station's domain for `task_id`.
    pub fn sample_domain(&self, task_id: u32, seed: u64) -> Result<DomainParam, EnvError> {
        self.validate()?;
        if task_id >= self.num_tasks {
            return Err(EnvError::TaskOutOfRange {
                task_id,
                num_tasks: self.num_tasks,
            });
        }
        let mut layout_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[task_id as u64, seed, 0]));
        let (w, h) = (self.width, self.height);
        let max_distance = w + h;

        let mut chosen = None;
        for _ in 0..MAX_LAYOUT_ATTEMPTS {
            let (obstacles, goal) = generate_layout(task_id, w, h, &mut layout_rng);
            if obstacles[(goal.y * w + goal.x) as usize] {
                continue;
            }
            let distances = bfs_from(&obstacles, w, h, goal);
            let connected = obstacles
                .iter()
                .zip(&distances)
                .all(|(&blocked, &d)| blocked || d <= max_distance);
            if connected {
                chosen = Some((obstacles, goal, distances));
                break;
            }
        }
        let (obstacles, goal_cell, distances) = chosen.unwrap_or_else(|| {
            log::warn!(
                "layout generation exhausted for task {task_id}, seed {seed}; using open grid"
            );
            let obstacles = vec![false; (w * h) as usize];
            let goal = Cell::new(w - 1, h - 1);
            let distances = bfs_from(&obstacles, w, h, goal);
            (obstacles, goal, distances)
        });

        let mut station_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[task_id as u64, seed, 1]));
        let slip_prob = station_rng.random::<f64>() * self.max_slip;
        let obs_noise_std = station_rng.random::<f64>() * self.max_obs_noise;

        Ok(DomainParam {
            task_id,
            num_tasks: self.num_tasks,
            grid_width: w,
            grid_height: h,
            goal_cell,
            obstacle_seed: seed,
            slip_prob,
            obs_noise_std,
            obstacles,
            distances,
        })
    }
}

/// Task styles cycle through scattered rocks, horizontal bars and vertical
/// bars; the goal distribution also differs per style.
fn generate_layout(task_id: u32, w: u32, h: u32, rng: &mut ChaCha8Rng) -> (Vec<bool>, Cell) {
    let mut obstacles = vec![false; (w * h) as usize];
    let idx = |x: u32, y: u32| (y * w + x) as usize;
    match task_id % 3 {
        0 => {
            let goal = Cell::new(rng.random_range(0..w), rng.random_range(0..h));
            for y in 0..h {
                for x in 0..w {
                    if rng.random::<f64>() < 0.2 {
                        obstacles[idx(x, y)] = true;
                    }
                }
            }
            (obstacles, goal)
        }
        1 => {
            let goal = Cell::new(rng.random_range(0..w), rng.random_range(0..(h / 3).max(1)));
            for _ in 0..3 {
                let len = rng.random_range(5..=7u32).min(w);
                let y = rng.random_range(1..h);
                let x0 = rng.random_range(0..=w - len);
                for x in x0..x0 + len {
                    obstacles[idx(x, y)] = true;
                }
            }
            (obstacles, goal)
        }
        _ => {
            let goal = Cell::new(
                rng.random_range(w - (w / 3).max(1)..w),
                rng.random_range(0..h),
            );
            for _ in 0..3 {
                let len = rng.random_range(5..=7u32).min(h);
                let x = rng.random_range(0..w - 1);
                let y0 = rng.random_range(0..=h - len);
                for y in y0..y0 + len {
                    obstacles[idx(x, y)] = true;
                }
            }
            (obstacles, goal)
        }
    }
}

/// BFS distance from every cell to `target`; `u32::MAX` for obstacles and
/// unreachable cells.
pub fn bfs_from(obstacles: &[bool], w: u32, h: u32, target: Cell) -> Vec<u32> {
    let mut dist = vec![u32::MAX; (w * h) as usize];
    let start = (target.y * w + target.x) as usize;
    if obstacles[start] {
        return dist;
    }
    dist[start] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(c) = queue.pop_front() {
        let d = dist[(c.y * w + c.x) as usize];
        for a in Action::MOVES {
            if let Some(n) = neighbor(c, a, w, h) {
                let i = (n.y * w + n.x) as usize;
                if !obstacles[i] && dist[i] == u32::MAX {
                    dist[i] = d + 1;
                    queue.push_back(n);
                }
            }
        }
    }
    dist
}

fn neighbor(c: Cell, a: Action, w: u32, h: u32) -> Option<Cell> {
    let (dx, dy) = a.delta();
    let nx = c.x as i64 + dx;
    let ny = c.y as i64 + dy;
    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
        None
    } else {
        Some(Cell::new(nx as u32, ny as u32))
    }
}

/// One station's concrete MDP: layout, goal and noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainParam {
    pub task_id: u32,
    pub num_tasks: u32,
    pub grid_width: u32,
    pub grid_height: u32,
    pub goal_cell: Cell,
    pub obstacle_seed: u64,
    pub slip_prob: f64,
    pub obs_noise_std: f64,
    obstacles: Vec<bool>,
    distances: Vec<u32>,
}

impl DomainParam {
    /// Builds a domain from an explicit layout. Fails if the goal is blocked
    /// or some free cell cannot reach it.
    pub fn from_layout(
        task_id: u32,
        num_tasks: u32,
        width: u32,
        height: u32,
        obstacles: Vec<bool>,
        goal_cell: Cell,
    ) -> Result<DomainParam, EnvError> {
        if task_id >= num_tasks {
            return Err(EnvError::TaskOutOfRange { task_id, num_tasks });
        }
        if obstacles.len() != (width * height) as usize
            || goal_cell.x >= width
            || goal_cell.y >= height
        {
            return Err(EnvError::InvalidFamily(
                "layout does not match grid size".into(),
            ));
        }
        let distances = bfs_from(&obstacles, width, height, goal_cell);
        let ok = obstacles
            .iter()
            .zip(&distances)
            .all(|(&b, &d)| b || d != u32::MAX);
        if !ok {
            return Err(EnvError::InvalidFamily(
                "layout is not connected to the goal".into(),
            ));
        }
        Ok(DomainParam {
            task_id,
            num_tasks,
            grid_width: width,
            grid_height: height,
            goal_cell,
            obstacle_seed: 0,
            slip_prob: 0.0,
            obs_noise_std: 0.0,
            obstacles,
            distances,
        })
    }

    /// Same layout with different station noise.
    pub fn with_noise(mut self, slip_prob: f64, obs_noise_std: f64) -> Self {
        self.slip_prob = slip_prob;
        self.obs_noise_std = obs_noise_std;
        self
    }

    pub fn feature_dim(&self) -> usize {
        BASE_FEATURES + self.num_tasks as usize
    }

    fn index(&self, c: Cell) -> usize {
        (c.y * self.grid_width + c.x) as usize
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x < self.grid_width && c.y < self.grid_height
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.obstacles[self.index(c)]
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.obstacles
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.grid_height).flat_map(move |y| {
            (0..self.grid_width)
                .map(move |x| Cell::new(x, y))
                .filter(move |c| !self.is_obstacle(*c))
        })
    }

    /// Noise-free shortest-path distance to the goal.
    pub fn distance(&self, c: Cell) -> Option<u32> {
        if self.is_obstacle(c) {
            return None;
        }
        match self.distances[self.index(c)] {
            u32::MAX => None,
            d => Some(d),
        }
    }

    /// Cell reached by attempting `action` from `c`; blocked moves stay put.
    pub fn apply_move(&self, c: Cell, action: Action) -> Cell {
        match neighbor(c, action, self.grid_width, self.grid_height) {
            Some(n) if !self.is_obstacle(n) => n,
            _ => c,
        }
    }

    /// BFS distance below which no episode starts: a quarter of the
    /// grid's half-perimeter, rounded up.
    pub fn min_start_distance(&self) -> u32 {
        (self.grid_width + self.grid_height).div_ceil(4).max(1)
    }

    /// Fresh episode: agent uniform over free cells at least
    /// [`min_start_distance`](Self::min_start_distance) from the goal, or
    /// over the farthest cells if none is that far.
    pub fn reset<R: Rng + ?Sized>(&self, horizon: u32, rng: &mut R) -> EnvState {
        let reach = self
            .free_cells()
            .filter_map(|c| self.distance(c))
            .max()
            .unwrap_or(0);
        let min_d = self.min_start_distance().min(reach).max(1);
        let candidates: Vec<Cell> = self
            .free_cells()
            .filter(|&c| self.distance(c).is_some_and(|d| d >= min_d))
            .collect();
        let agent_cell = if candidates.is_empty() {
            self.goal_cell
        } else {
            candidates[rng.random_range(0..candidates.len())]
        };
        EnvState {
            agent_cell,
            goal_cell: self.goal_cell,
            step_count: 0,
            horizon,
        }
    }

    /// Feature vector for `state`, with Gaussian noise on the position entries.
    pub fn observe<R: Rng + ?Sized>(&self, state: &EnvState, rng: &mut R) -> Observation {
        let mut f = Vec::with_capacity(self.feature_dim());
        let sx = (self.grid_width - 1).max(1) as f64;
        let sy = (self.grid_height - 1).max(1) as f64;
        let a = state.agent_cell;
        let g = state.goal_cell;
        for v in [
            a.x as f64 / sx,
            a.y as f64 / sy,
            g.x as f64 / sx,
            g.y as f64 / sy,
        ] {
            let z: f64 = rng.sample(StandardNormal);
            f.push(v + self.obs_noise_std * z);
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let x = a.x as i64 + dx;
                let y = a.y as i64 + dy;
                let blocked = x < 0
                    || y < 0
                    || x >= self.grid_width as i64
                    || y >= self.grid_height as i64
                    || self.obstacles[(y as u32 * self.grid_width + x as u32) as usize];
                f.push(if blocked { 1.0 } else { 0.0 });
            }
        }
        for t in 0..self.num_tasks {
            f.push(if t == self.task_id { 1.0 } else { 0.0 });
        }
        Observation(f)
    }

    /// Advances `state` by one step.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut EnvState,
        action: Action,
        rng: &mut R,
    ) -> StepResult {
        debug_assert!(
            state.step_count < state.horizon,
            "step on a finished episode"
        );
        let slipped = rng.random::<f64>() < self.slip_prob;
        let executed = if slipped {
            Action::MOVES[rng.random_range(0..4)]
        } else {
            action
        };
        state.agent_cell = self.apply_move(state.agent_cell, executed);
        state.step_count += 1;
        let status = if state.agent_cell == state.goal_cell {
            EpisodeStatus::Success
        } else if state.step_count >= state.horizon {
            EpisodeStatus::Timeout
        } else {
            EpisodeStatus::Running
        };
        let reward = if status == EpisodeStatus::Success {
            1.0
        } else {
            0.0
        };
        StepResult {
            next_observation: self.observe(state, rng),
            reward,
            status,
        }
    }

    /// First move of a BFS shortest path (ties Up < Down < Left < Right);
    /// `Stay` on the goal.
    pub fn expert_action(&self, state: &EnvState) -> Action {
        self.expert_action_at(state.agent_cell)
    }

    pub fn expert_action_at(&self, cell: Cell) -> Action {
        let Some(d) = self.distance(cell) else {
            return Action::Stay;
        };
        if d == 0 {
            return Action::Stay;
        }
        Action::MOVES
            .into_iter()
            .find(|&a| {
                let n = self.apply_move(cell, a);
                n != cell && self.distance(n) == Some(d - 1)
            })
            .unwrap_or(Action::Stay)
    }

    /// Text dump: `#` obstacle, `.` free, `G` goal, `A` agent.
    pub fn render(&self, agent: Option<Cell>) -> String {
        let mut out = String::with_capacity(((self.grid_width + 1) * self.grid_height) as usize);
        for y in 0..self.grid_height {
            for x in 0..self.grid_width {
                let c = Cell::new(x, y);
                let ch = if Some(c) == agent {
                    'A'
                } else if c == self.goal_cell {
                    'G'
                } else if self.is_obstacle(c) {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub agent_cell: Cell,
    pub goal_cell: Cell,
    pub step_count: u32,
    pub horizon: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn features(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpisodeStatus {
    Running,
    Success,
    Failure,
    Timeout,
}

impl EpisodeStatus {
    pub fn is_terminal(self) -> bool {
        self != EpisodeStatus::Running
    }

    pub fn to_byte(self) -> u8 {
        match self {
            EpisodeStatus::Running => 0,
            EpisodeStatus::Success => 1,
            EpisodeStatus::Failure => 2,
            EpisodeStatus::Timeout => 3,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => EpisodeStatus::Running,
            1 => EpisodeStatus::Success,
            2 => EpisodeStatus::Failure,
            3 => EpisodeStatus::Timeout,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_observation: Observation,
    pub reward: f64,
    pub status: EpisodeStatus,
}

/// True iff distance-to-goal failed to decrease across the last `k` entries.
pub fn intervention_gate(recent_distances: &[u32], k: usize) -> bool {
    assert!(k >= 2, "gate window must be at least 2");
    if recent_distances.len() < k {
        return false;
    }
    let window = &recent_distances[recent_distances.len() - k..];
    window[k - 1] >= window[0]
}

/// Stateful gate with hysteresis: once engaged, the expert keeps control
/// until the distance falls 2 below the best distance in the stalled window.
#[derive(Debug, Clone)]
pub struct InterventionGate {
    k: usize,
    history: VecDeque<u32>,
    release_at: Option<u32>,
}

impl InterventionGate {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "gate window must be at least 2");
        InterventionGate {
            k,
            history: VecDeque::with_capacity(k),
            release_at: None,
        }
    }

    pub fn engaged(&self) -> bool {
        self.release_at.is_some()
    }

    /// Feeds the current distance; returns whether the expert acts next.
    pub fn observe(&mut self, distance: u32) -> bool {
        if let Some(threshold) = self.release_at {
            if distance <= threshold {
                self.release_at = None;
                self.history.clear();
                self.history.push_back(distance);
                return false;
            }
            return true;
        }
        if self.history.len() == self.k {
            self.history.pop_front();
        }
        self.history.push_back(distance);
        let window: Vec<u32> = self.history.iter().copied().collect();
        if intervention_gate(&window, self.k) {
            let best = window.iter().copied().min().unwrap_or(distance);
            self.release_at = Some(best.saturating_sub(2));
            true
        } else {
            false
        }
    }
}
