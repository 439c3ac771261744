//! Small environments: a treasure gridworld, a pendulum swing-up and a
//! lane-changing mini-highway.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, StreamRng};
use crate::space::{Action, ActionSpace};

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// The episode reached a terminal state (no bootstrapping past it).
    pub terminated: bool,
    /// The step limit ended the episode.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn observation_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Starts an episode. The initial state is a pure function of `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<Step>;
    /// Maps an arbitrary vector onto the nearest observable state. Used on
    /// generated next states before they are matched against real ones.
    fn project_state(&self, _state: &mut [f64]) {}
}

// ---------------------------------------------------------------------------
// Gridworld

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl GridAction {
    pub const ALL: [GridAction; 4] = [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn offset(self) -> (i64, i64) {
        match self {
            GridAction::Up => (0, -1),
            GridAction::Down => (0, 1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridWorldConfig {
    pub width: usize,
    pub height: usize,
    pub max_steps: usize,
    pub start: (usize, usize),
    pub treasure: (usize, usize),
    /// Draw the start cell uniformly (excluding the treasure) from the reset seed.
    pub random_start: bool,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        GridWorldConfig { width: 6, height: 6, max_steps: 50, start: (0, 0), treasure: (5, 5), random_start: false }
    }
}

/// Deterministic grid with a single rewarding treasure cell.
///
/// Observations are `[x / width, y / height, tx / width, ty / height]`.
#[derive(Debug, Clone)]
pub struct GridWorld {
    cfg: GridWorldConfig,
    pos: (usize, usize),
    steps: usize,
    done: bool,
    total_reward: f64,
}

impl GridWorld {
    pub fn new(cfg: GridWorldConfig) -> Result<Self> {
        if cfg.width < 2 || cfg.height < 2 {
            return Err(Error::Config("gridworld needs at least 2x2 cells".into()));
        }
        let inside = |(x, y): (usize, usize)| x < cfg.width && y < cfg.height;
        if !inside(cfg.start) || !inside(cfg.treasure) || cfg.start == cfg.treasure || cfg.max_steps == 0 {
            return Err(Error::Config(format!("invalid gridworld layout {cfg:?}")));
        }
        Ok(GridWorld { pos: cfg.start, cfg, steps: 0, done: false, total_reward: 0.0 })
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.cfg
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn total_reward(&self) -> f64 {
        self.total_reward
    }

    /// Places the agent on `cell` with a fresh step counter.
    pub fn set_position(&mut self, cell: (usize, usize)) -> Result<()> {
        if cell.0 >= self.cfg.width || cell.1 >= self.cfg.height {
            return Err(Error::InvalidArgument(format!("cell {cell:?} outside the grid")));
        }
        self.pos = cell;
        self.steps = 0;
        self.done = false;
        Ok(())
    }

    /// Pure transition function: successor cell, reward and terminal flag.
    pub fn dynamics(&self, cell: (usize, usize), action: GridAction) -> ((usize, usize), f64, bool) {
        let (dx, dy) = action.offset();
        let x = (cell.0 as i64 + dx).clamp(0, self.cfg.width as i64 - 1) as usize;
        let y = (cell.1 as i64 + dy).clamp(0, self.cfg.height as i64 - 1) as usize;
        let hit = (x, y) == self.cfg.treasure;
        ((x, y), if hit { 1.0 } else { 0.0 }, hit)
    }

    pub fn observe(&self, cell: (usize, usize)) -> Vec<f64> {
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        vec![
            cell.0 as f64 / w,
            cell.1 as f64 / h,
            self.cfg.treasure.0 as f64 / w,
            self.cfg.treasure.1 as f64 / h,
        ]
    }

    /// Inverse of [`GridWorld::observe`] after lattice snapping.
    pub fn cell_of(&self, state: &[f64]) -> (usize, usize) {
        let snap = |v: f64, n: usize| ((v * n as f64).round().max(0.0) as usize).min(n - 1);
        (snap(state[0], self.cfg.width), snap(state[1], self.cfg.height))
    }

    /// Every cell the agent can act from (the treasure is terminal).
    pub fn decision_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for y in 0..self.cfg.height {
            for x in 0..self.cfg.width {
                if (x, y) != self.cfg.treasure {
                    cells.push((x, y));
                }
            }
        }
        cells
    }
}

impl Environment for GridWorld {
    fn name(&self) -> &'static str {
        "gridworld"
    }

    fn observation_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(4)
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.pos = if self.cfg.random_start {
            let cells = self.decision_cells();
            cells[seeded(seed).random_range(0..cells.len())]
        } else {
            self.cfg.start
        };
        self.steps = 0;
        self.done = false;
        self.total_reward = 0.0;
        self.observe(self.pos)
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.done {
            return Err(Error::Usage("step called on a finished gridworld episode".into()));
        }
        let a = action
            .index()
            .and_then(GridAction::from_index)
            .ok_or_else(|| Error::InvalidArgument(format!("{action:?} is not a gridworld action")))?;
        let (next, reward, terminated) = self.dynamics(self.pos, a);
        self.pos = next;
        self.steps += 1;
        self.total_reward += reward;
        let truncated = !terminated && self.steps >= self.cfg.max_steps;
        self.done = terminated || truncated;
        Ok(Step { state: self.observe(next), reward, terminated, truncated })
    }

    fn project_state(&self, state: &mut [f64]) {
        if state.len() != 4 {
            return;
        }
        let (x, y) = self.cell_of(state);
        state.copy_from_slice(&self.observe((x, y)));
    }
}

/// Set of `(cell, action)` pairs that share a successor and a reward.
#[derive(Debug, Clone, PartialEq)]
pub struct BisimClass {
    pub successor: (usize, usize),
    pub reward: f64,
    pub members: Vec<((usize, usize), GridAction)>,
}

/// Partitions every decision `(cell, action)` pair by its `(successor, reward)`.
pub fn bisimulation_oracle(env: &GridWorld) -> Vec<BisimClass> {
    let mut classes: BTreeMap<((usize, usize), u64), Vec<((usize, usize), GridAction)>> = BTreeMap::new();
    for cell in env.decision_cells() {
        for a in GridAction::ALL {
            let (next, r, _) = env.dynamics(cell, a);
            classes.entry((next, r.to_bits())).or_default().push((cell, a));
        }
    }
    classes
        .into_iter()
        .map(|((successor, bits), members)| BisimClass { successor, reward: f64::from_bits(bits), members })
        .collect()
}

// ---------------------------------------------------------------------------
// Pendulum

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub g: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub max_steps: usize,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        PendulumConfig { g: 10.0, mass: 1.0, length: 1.0, dt: 0.05, max_torque: 2.0, max_speed: 8.0, max_steps: 200 }
    }
}

/// Torque-limited pendulum swing-up; `θ = 0` is upright.
///
/// Observations are `[cos θ, sin θ, θ̇]`.
#[derive(Debug, Clone)]
pub struct PendulumEnv {
    cfg: PendulumConfig,
    theta: f64,
    theta_dot: f64,
    steps: usize,
    done: bool,
}

pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

impl PendulumEnv {
    pub fn new(cfg: PendulumConfig) -> Result<Self> {
        if cfg.dt <= 0.0 || cfg.mass <= 0.0 || cfg.length <= 0.0 || cfg.max_torque <= 0.0 || cfg.max_steps == 0 {
            return Err(Error::Config(format!("invalid pendulum constants {cfg:?}")));
        }
        Ok(PendulumEnv { cfg, theta: PI, theta_dot: 0.0, steps: 0, done: false })
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.cfg
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = wrap_angle(theta);
        self.theta_dot = theta_dot.clamp(-self.cfg.max_speed, self.cfg.max_speed);
        self.steps = 0;
        self.done = false;
    }

    pub fn angle(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    /// Mechanical energy per unit inertia, zero at the hanging rest position.
    pub fn energy(&self) -> f64 {
        let k = 3.0 * self.cfg.g / (2.0 * self.cfg.length);
        0.5 * self.theta_dot * self.theta_dot + k * (self.theta.cos() + 1.0)
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Environment for PendulumEnv {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn observation_dim(&self) -> usize {
        3
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { low: vec![-self.cfg.max_torque], high: vec![self.cfg.max_torque] }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.done {
            return Err(Error::Usage("step called on a finished pendulum episode".into()));
        }
        let u = match action.vector() {
            Some([u]) => u.clamp(-self.cfg.max_torque, self.cfg.max_torque),
            _ => return Err(Error::InvalidArgument(format!("{action:?} is not a pendulum torque"))),
        };
        let c = &self.cfg;
        let th = wrap_angle(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);
        let acc = 3.0 * c.g / (2.0 * c.length) * self.theta.sin() + 3.0 / (c.mass * c.length * c.length) * u;
        self.theta_dot = (self.theta_dot + acc * c.dt).clamp(-c.max_speed, c.max_speed);
        self.theta = wrap_angle(self.theta + self.theta_dot * c.dt);
        self.steps += 1;
        let truncated = self.steps >= c.max_steps;
        self.done = truncated;
        Ok(Step { state: self.observe(), reward, terminated: false, truncated })
    }

    fn project_state(&self, state: &mut [f64]) {
        if state.len() != 3 {
            return;
        }
        let norm = (state[0] * state[0] + state[1] * state[1]).sqrt();
        if norm > 1e-12 {
            state[0] /= norm;
            state[1] /= norm;
        } else {
            state[0] = 1.0;
            state[1] = 0.0;
        }
        state[2] = state[2].clamp(-self.cfg.max_speed, self.cfg.max_speed);
    }
}

// ---------------------------------------------------------------------------
// Mini-highway

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighwayConfig {
    pub lanes: usize,
    pub vehicles: usize,
    pub v_min: f64,
    pub v_max: f64,
    /// Weight on the normalized speed term.
    pub phi: f64,
    /// Collision penalty.
    pub kappa: f64,
    pub dt: f64,
    pub accel: f64,
    pub car_length: f64,
    pub spawn_range: f64,
    pub max_steps: usize,
}

impl Default for HighwayConfig {
    fn default() -> Self {
        HighwayConfig {
            lanes: 3,
            vehicles: 4,
            v_min: 20.0,
            v_max: 30.0,
            phi: 1.0,
            kappa: 5.0,
            dt: 1.0,
            accel: 2.0,
            car_length: 5.0,
            spawn_range: 80.0,
            max_steps: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub lane: usize,
    pub position: f64,
    pub speed: f64,
}

/// Ego vehicle among constant-speed traffic on a straight multi-lane road.
///
/// Actions: 0 accelerate, 1 decelerate, 2 move one lane left, 3 move one
/// lane right. Observations: ego normalized speed and lane, then for each
/// ambient vehicle (nearest first) relative lane, position and speed.
#[derive(Debug, Clone)]
pub struct MiniHighway {
    cfg: HighwayConfig,
    ego: Vehicle,
    others: Vec<Vehicle>,
    rng: StreamRng,
    steps: usize,
    done: bool,
}

impl MiniHighway {
    pub fn new(cfg: HighwayConfig) -> Result<Self> {
        if cfg.lanes < 1 || cfg.v_max <= cfg.v_min || cfg.dt <= 0.0 || cfg.max_steps == 0 || cfg.vehicles == 0 {
            return Err(Error::Config(format!("invalid highway settings {cfg:?}")));
        }
        let ego = Vehicle { lane: cfg.lanes / 2, position: 0.0, speed: 0.5 * (cfg.v_min + cfg.v_max) };
        Ok(MiniHighway { cfg, ego, others: Vec::new(), rng: seeded(0), steps: 0, done: false })
    }

    pub fn config(&self) -> &HighwayConfig {
        &self.cfg
    }

    pub fn ego(&self) -> Vehicle {
        self.ego
    }

    pub fn others(&self) -> &[Vehicle] {
        &self.others
    }

    /// Replaces the scene; used by tests to construct exact situations.
    pub fn set_scene(&mut self, ego: Vehicle, others: Vec<Vehicle>) {
        self.ego = ego;
        self.others = others;
        self.steps = 0;
        self.done = false;
    }

    /// Reward for the ego at speed `v`, with or without a collision.
    pub fn reward(&self, v: f64, collided: bool) -> f64 {
        let c = &self.cfg;
        c.phi * (v - c.v_min) / (c.v_max - c.v_min) - if collided { c.kappa } else { 0.0 }
    }

    fn lane_width() -> f64 {
        4.0
    }

    fn collides(&self) -> bool {
        self.others
            .iter()
            .any(|o| o.lane == self.ego.lane && (o.position - self.ego.position).abs() < self.cfg.car_length)
    }

    fn spawn(&mut self, ahead_only: bool) -> Vehicle {
        let c = self.cfg.clone();
        loop {
            let lane = self.rng.random_range(0..c.lanes);
            let lo = if ahead_only { 0.5 * c.spawn_range } else { -c.spawn_range };
            let dx = self.rng.random_range(lo..c.spawn_range);
            let speed = self.rng.random_range(c.v_min..(c.v_min + 0.6 * (c.v_max - c.v_min)));
            let v = Vehicle { lane, position: self.ego.position + dx, speed };
            let clear_of_ego = lane != self.ego.lane || dx.abs() >= 2.0 * c.car_length;
            let clear_of_others =
                self.others.iter().all(|o| o.lane != lane || (o.position - v.position).abs() >= 2.0 * c.car_length);
            if clear_of_ego && clear_of_others {
                return v;
            }
        }
    }

    fn observe(&self) -> Vec<f64> {
        let c = &self.cfg;
        let span = c.v_max - c.v_min;
        let lane_norm = (c.lanes.max(2) - 1) as f64;
        let mut obs = vec![(self.ego.speed - c.v_min) / span, self.ego.lane as f64 / lane_norm];
        let mut rel: Vec<(f64, &Vehicle)> = self
            .others
            .iter()
            .map(|o| {
                let dl = (o.lane as f64 - self.ego.lane as f64) * Self::lane_width();
                let dx = o.position - self.ego.position;
                ((dx * dx + dl * dl).sqrt(), o)
            })
            .collect();
        rel.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, o) in rel.iter().take(c.vehicles) {
            obs.push((o.lane as f64 - self.ego.lane as f64) / lane_norm);
            obs.push((o.position - self.ego.position) / c.spawn_range);
            obs.push((o.speed - self.ego.speed) / span);
        }
        obs.resize(2 + 3 * c.vehicles, 0.0);
        obs
    }
}

impl Environment for MiniHighway {
    fn name(&self) -> &'static str {
        "highway"
    }

    fn observation_dim(&self) -> usize {
        2 + 3 * self.cfg.vehicles
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(4)
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = seeded(seed);
        self.ego = Vehicle { lane: self.cfg.lanes / 2, position: 0.0, speed: 0.5 * (self.cfg.v_min + self.cfg.v_max) };
        self.others.clear();
        for _ in 0..self.cfg.vehicles {
            let v = self.spawn(false);
            self.others.push(v);
        }
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<Step> {
        if self.done {
            return Err(Error::Usage("step called on a finished highway episode".into()));
        }
        let c = self.cfg.clone();
        match action.index() {
            Some(0) => self.ego.speed = (self.ego.speed + c.accel).min(c.v_max),
            Some(1) => self.ego.speed = (self.ego.speed - c.accel).max(c.v_min),
            Some(2) => self.ego.lane = self.ego.lane.saturating_sub(1),
            Some(3) => self.ego.lane = (self.ego.lane + 1).min(c.lanes - 1),
            _ => return Err(Error::InvalidArgument(format!("{action:?} is not a highway action"))),
        }
        self.ego.position += self.ego.speed * c.dt;
        for o in &mut self.others {
            o.position += o.speed * c.dt;
        }
        let collided = self.collides();
        // Traffic that falls far behind re-enters ahead of the ego.
        for k in 0..self.others.len() {
            if self.others[k].position - self.ego.position < -c.spawn_range {
                self.others.remove(k);
                let v = self.spawn(true);
                self.others.insert(k, v);
            }
        }
        self.steps += 1;
        let reward = self.reward(self.ego.speed, collided);
        let truncated = !collided && self.steps >= c.max_steps;
        self.done = collided || truncated;
        Ok(Step { state: self.observe(), reward, terminated: collided, truncated })
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Gridworld,
    Pendulum,
    Highway,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gridworld" => Ok(EnvKind::Gridworld),
            "pendulum" => Ok(EnvKind::Pendulum),
            "highway" | "mini-highway" => Ok(EnvKind::Highway),
            other => Err(Error::Config(format!("unknown environment '{other}'"))),
        }
    }
}

/// Environment settings block of an experiment config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSettings {
    pub gridworld: GridWorldConfig,
    pub pendulum: PendulumConfig,
    pub highway: HighwayConfig,
}

pub fn make_env(kind: &EnvKind, settings: &EnvSettings) -> Result<Box<dyn Environment>> {
    Ok(match kind {
        EnvKind::Gridworld => Box::new(GridWorld::new(settings.gridworld.clone())?),
        EnvKind::Pendulum => Box::new(PendulumEnv::new(settings.pendulum.clone())?),
        EnvKind::Highway => Box::new(MiniHighway::new(settings.highway.clone())?),
    })
}
