//! Multi-agent apple-farming grid world.
//!
//! The board is a square grid split into four quadrants (orchards). Agent 0 is
//! the main agent and owns the upper-left quadrant; agents 1..=3 are background
//! agents owning the upper-right, lower-left and lower-right quadrants. Exactly
//! one background agent moves; the other two stay on their starting cell.
//!
//! Coordinates are `[x, y]` with `x` the column and `y` the row, both 0-based
//! from the upper-left corner. Any agent entering a cell collects everything on
//! it, apples first. Items never respawn.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::EnvError;

/// Schema tag written into every trajectory-pool record.
pub const POOL_SCHEMA: &str = "irda-pool/1";

pub const MAIN_AGENT: AgentId = AgentId(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u8);

impl AgentId {
    pub fn is_main(self) -> bool {
        self.0 == 0
    }
}

/// Quadrant index: 0 upper-left, 1 upper-right, 2 lower-left, 3 lower-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuadrantId(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub x: usize,
    pub y: usize,
}

impl Position {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Position) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

// Row-major order: (y, x). Used for every deterministic tie-break.
impl Ord for Position {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Position {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
    ];

    /// Target cell of the move; moves that would leave the grid keep the agent in place.
    pub fn apply(self, pos: Position, grid_size: usize) -> Position {
        match self {
            Action::Up if pos.y > 0 => Position::new(pos.x, pos.y - 1),
            Action::Down if pos.y + 1 < grid_size => Position::new(pos.x, pos.y + 1),
            Action::Left if pos.x > 0 => Position::new(pos.x - 1, pos.y),
            Action::Right if pos.x + 1 < grid_size => Position::new(pos.x + 1, pos.y),
            _ => pos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Uniform over the five actions.
    UniformRandom,
    /// Random walk that rejects moves leaving the agent's own quadrant.
    StayHome,
    /// Step toward the nearest apple; ties go to the smallest `(y, x)`.
    GreedyApple,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::UniformRandom => "uniform_random",
            Policy::StayHome => "stay_home",
            Policy::GreedyApple => "greedy_apple",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform_random" => Ok(Policy::UniformRandom),
            "stay_home" => Ok(Policy::StayHome),
            "greedy_apple" => Ok(Policy::GreedyApple),
            other => Err(EnvError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub grid_size: usize,
    pub quadrant_size: usize,
    pub n_apples: usize,
    pub n_garbage: usize,
    pub max_items_per_cell: u8,
    pub episode_length: usize,
    pub policy_mix: Vec<(Policy, f64)>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid_size: 6,
            quadrant_size: 3,
            n_apples: 12,
            n_garbage: 4,
            max_items_per_cell: 2,
            episode_length: 30,
            policy_mix: vec![
                (Policy::UniformRandom, 2.0),
                (Policy::StayHome, 1.0),
                (Policy::GreedyApple, 1.0),
            ],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let invalid = |msg: String| Err(EnvError::ConfigInvalid(msg));
        if self.quadrant_size == 0 || self.grid_size != 2 * self.quadrant_size {
            return invalid(format!(
                "grid_size {} must be twice quadrant_size {}",
                self.grid_size, self.quadrant_size
            ));
        }
        if self.max_items_per_cell == 0 {
            return invalid("max_items_per_cell must be at least 1".into());
        }
        // Items are only placed on the cells the four agents do not start on.
        let free_cells = self.grid_size * self.grid_size - 4;
        let capacity = free_cells * self.max_items_per_cell as usize;
        if self.n_apples + self.n_garbage > capacity {
            return invalid(format!(
                "{} items do not fit on {} free cells with at most {} items each",
                self.n_apples + self.n_garbage,
                free_cells,
                self.max_items_per_cell
            ));
        }
        if self.episode_length == 0 {
            return invalid("episode_length must be at least 1".into());
        }
        if self.policy_mix.is_empty()
            || self.policy_mix.iter().any(|(_, w)| !w.is_finite() || *w < 0.0)
            || self.policy_mix.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return invalid("policy weights must be nonnegative with a positive sum".into());
        }
        Ok(())
    }

    pub fn quadrant_of(&self, pos: Position) -> QuadrantId {
        let right = u8::from(pos.x >= self.quadrant_size);
        let lower = u8::from(pos.y >= self.quadrant_size);
        QuadrantId(right + 2 * lower)
    }

    /// Upper-left cell of a quadrant.
    pub fn quadrant_origin(&self, q: QuadrantId) -> Position {
        let q = q.0 as usize;
        Position::new((q % 2) * self.quadrant_size, (q / 2) * self.quadrant_size)
    }

    pub fn in_bounds(&self, pos: Position) -> bool {
        pos.x < self.grid_size && pos.y < self.grid_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackgroundAgent {
    pub position: Position,
    pub mobile: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub step_index: usize,
    pub main_agent: Position,
    /// Background agents 1, 2 and 3 in id order.
    pub background_agents: [BackgroundAgent; 3],
    #[serde(with = "item_map")]
    pub apples: BTreeMap<Position, u8>,
    #[serde(with = "item_map")]
    pub garbage: BTreeMap<Position, u8>,
    /// `ownership[q]` is the agent owning quadrant `q`.
    pub ownership: [AgentId; 4],
}

impl GridState {
    pub fn agent_position(&self, agent: AgentId) -> Position {
        if agent.is_main() {
            self.main_agent
        } else {
            self.background_agents[agent.0 as usize - 1].position
        }
    }

    /// All four agent positions in id order.
    pub fn agent_positions(&self) -> [Position; 4] {
        [
            self.main_agent,
            self.background_agents[0].position,
            self.background_agents[1].position,
            self.background_agents[2].position,
        ]
    }

    pub fn owner_of(&self, q: QuadrantId) -> AgentId {
        self.ownership[q.0 as usize]
    }

    pub fn quadrant_owned_by(&self, agent: AgentId) -> Option<QuadrantId> {
        self.ownership
            .iter()
            .position(|a| *a == agent)
            .map(|q| QuadrantId(q as u8))
    }

    pub fn total_apples(&self) -> usize {
        self.apples.values().map(|c| *c as usize).sum()
    }

    pub fn total_garbage(&self) -> usize {
        self.garbage.values().map(|c| *c as usize).sum()
    }

    pub fn validate(&self, config: &EnvConfig) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::StateInvalid(msg));
        for pos in self.agent_positions() {
            if !config.in_bounds(pos) {
                return bad(format!("agent at {pos} is out of bounds"));
            }
        }
        let stationary = self.background_agents.iter().filter(|a| !a.mobile).count();
        if stationary != 2 {
            return bad(format!("expected 2 stationary background agents, found {stationary}"));
        }
        for (kind, map) in [("apple", &self.apples), ("garbage", &self.garbage)] {
            for (pos, count) in map {
                if !config.in_bounds(*pos) {
                    return bad(format!("{kind} at {pos} is out of bounds"));
                }
                if *count == 0 || *count > config.max_items_per_cell {
                    return bad(format!("{kind} count {count} at {pos} outside 1..={}", config.max_items_per_cell));
                }
            }
        }
        let mut owners = self.ownership.to_vec();
        owners.sort();
        if owners != [AgentId(0), AgentId(1), AgentId(2), AgentId(3)] {
            return bad("ownership is not a bijection between quadrants and agents".into());
        }
        if self.ownership[0] != MAIN_AGENT {
            return bad("main agent must own the upper-left quadrant".into());
        }
        Ok(())
    }
}

mod item_map {
    use super::Position;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        x: usize,
        y: usize,
        count: u8,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<Position, u8>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(p, c)| Entry { x: p.x, y: p.y, count: *c })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Position, u8>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| (Position::new(e.x, e.y), e.count))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Moved,
    CollectedApple,
    CollectedGarbage,
    EnteredQuadrant,
    LeftQuadrant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Moved { agent: AgentId, from: Position, to: Position },
    CollectedApple { agent: AgentId, at: Position },
    CollectedGarbage { agent: AgentId, at: Position },
    EnteredQuadrant { agent: AgentId, quadrant: QuadrantId },
    LeftQuadrant { agent: AgentId, quadrant: QuadrantId },
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::Moved { .. } => EventKind::Moved,
            Event::CollectedApple { .. } => EventKind::CollectedApple,
            Event::CollectedGarbage { .. } => EventKind::CollectedGarbage,
            Event::EnteredQuadrant { .. } => EventKind::EnteredQuadrant,
            Event::LeftQuadrant { .. } => EventKind::LeftQuadrant,
        }
    }

    pub fn agent(&self) -> AgentId {
        match self {
            Event::Moved { agent, .. }
            | Event::CollectedApple { agent, .. }
            | Event::CollectedGarbage { agent, .. }
            | Event::EnteredQuadrant { agent, .. }
            | Event::LeftQuadrant { agent, .. } => *agent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub seed: u64,
    pub policy: Policy,
    pub config: EnvConfig,
    /// Initial state followed by one state per step.
    pub states: Vec<GridState>,
    /// `events[i]` happened between `states[i]` and `states[i + 1]`.
    pub events: Vec<Vec<Event>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.events.len()
    }

    /// True when the main agent never leaves the quadrant it owns.
    pub fn main_stays_home(&self) -> bool {
        self.states.iter().all(|s| {
            let home = s.quadrant_owned_by(MAIN_AGENT);
            Some(self.config.quadrant_of(s.main_agent)) == home
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPool {
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryPool {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.trajectories.iter().map(|t| t.id.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct PoolFile<P> {
    schema: String,
    #[serde(flatten)]
    pool: P,
}

/// Writes a pool as one `irda-pool/1` JSON document.
pub fn write_pool<W: std::io::Write>(w: W, pool: &TrajectoryPool) -> serde_json::Result<()> {
    serde_json::to_writer(w, &PoolFile { schema: POOL_SCHEMA.to_string(), pool })
}

pub fn read_pool<R: std::io::Read>(r: R) -> Result<TrajectoryPool, EnvError> {
    let file: PoolFile<TrajectoryPool> =
        serde_json::from_reader(std::io::BufReader::new(r)).map_err(|e| EnvError::StateInvalid(format!("pool file: {e}")))?;
    if file.schema != POOL_SCHEMA {
        return Err(EnvError::StateInvalid(format!("unsupported pool schema `{}`", file.schema)));
    }
    for t in &file.pool.trajectories {
        for s in &t.states {
            s.validate(&t.config)?;
        }
    }
    Ok(file.pool)
}

/// Places the agents on their quadrant corners and scatters items over the remaining cells.
pub fn init_state<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> Result<GridState, EnvError> {
    config.validate()?;
    let background_agents: [BackgroundAgent; 3] = {
        let mobile = rng.random_range(0..3usize);
        std::array::from_fn(|i| BackgroundAgent {
            position: config.quadrant_origin(QuadrantId(i as u8 + 1)),
            mobile: i == mobile,
        })
    };
    let main_agent = Position::new(0, 0);

    let mut free: Vec<Position> = (0..config.grid_size)
        .flat_map(|y| (0..config.grid_size).map(move |x| Position::new(x, y)))
        .filter(|p| *p != main_agent && background_agents.iter().all(|a| a.position != *p))
        .collect();
    let mut load: BTreeMap<Position, u8> = BTreeMap::new();
    let mut apples = BTreeMap::new();
    let mut garbage = BTreeMap::new();
    for (n, map) in [(config.n_apples, &mut apples), (config.n_garbage, &mut garbage)] {
        for _ in 0..n {
            let idx = rng.random_range(0..free.len());
            let cell = free[idx];
            *map.entry(cell).or_insert(0u8) += 1;
            let l = load.entry(cell).or_insert(0u8);
            *l += 1;
            if *l >= config.max_items_per_cell {
                free.swap_remove(idx);
            }
        }
    }

    Ok(GridState {
        step_index: 0,
        main_agent,
        background_agents,
        apples,
        garbage,
        ownership: [AgentId(0), AgentId(1), AgentId(2), AgentId(3)],
    })
}

/// Initial state from a seed alone.
pub fn init_state_seeded(config: &EnvConfig, seed: u64) -> Result<GridState, EnvError> {
    init_state(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Advances one step: the main agent takes `main_action`, the mobile background
/// agent draws a uniform action from `rng`.
pub fn step<R: Rng + ?Sized>(
    config: &EnvConfig,
    state: &GridState,
    main_action: Action,
    rng: &mut R,
) -> (GridState, Vec<Event>) {
    let mut next = state.clone();
    next.step_index += 1;
    let mut events = Vec::new();

    let target = main_action.apply(state.main_agent, config.grid_size);
    move_agent(config, &mut next, MAIN_AGENT, target, &mut events);

    for i in 0..3 {
        if next.background_agents[i].mobile {
            let action = Action::ALL[rng.random_range(0..Action::ALL.len())];
            let target = action.apply(next.background_agents[i].position, config.grid_size);
            move_agent(config, &mut next, AgentId(i as u8 + 1), target, &mut events);
        }
    }
    (next, events)
}

fn move_agent(
    config: &EnvConfig,
    state: &mut GridState,
    agent: AgentId,
    to: Position,
    events: &mut Vec<Event>,
) {
    let from = state.agent_position(agent);
    if from == to {
        return;
    }
    if agent.is_main() {
        state.main_agent = to;
    } else {
        state.background_agents[agent.0 as usize - 1].position = to;
    }
    events.push(Event::Moved { agent, from, to });

    let (q_from, q_to) = (config.quadrant_of(from), config.quadrant_of(to));
    if q_from != q_to {
        events.push(Event::LeftQuadrant { agent, quadrant: q_from });
        events.push(Event::EnteredQuadrant { agent, quadrant: q_to });
    }

    if let Some(n) = state.apples.remove(&to) {
        events.extend((0..n).map(|_| Event::CollectedApple { agent, at: to }));
    }
    if let Some(n) = state.garbage.remove(&to) {
        events.extend((0..n).map(|_| Event::CollectedGarbage { agent, at: to }));
    }
}

fn choose_action<R: Rng + ?Sized>(
    policy: Policy,
    config: &EnvConfig,
    state: &GridState,
    rng: &mut R,
) -> Action {
    match policy {
        Policy::UniformRandom => Action::ALL[rng.random_range(0..Action::ALL.len())],
        Policy::StayHome => {
            let home = state.quadrant_owned_by(MAIN_AGENT);
            loop {
                let action = Action::ALL[rng.random_range(0..Action::ALL.len())];
                let target = action.apply(state.main_agent, config.grid_size);
                if Some(config.quadrant_of(target)) == home {
                    break action;
                }
            }
        }
        Policy::GreedyApple => {
            let here = state.main_agent;
            let nearest = state
                .apples
                .keys()
                .min_by_key(|p| (p.manhattan(here), p.y, p.x))
                .copied();
            match nearest {
                None => Action::Stay,
                Some(t) if t.x > here.x => Action::Right,
                Some(t) if t.x < here.x => Action::Left,
                Some(t) if t.y > here.y => Action::Down,
                Some(t) if t.y < here.y => Action::Up,
                Some(_) => Action::Stay,
            }
        }
    }
}

/// Runs `policy` from an arbitrary starting state for `config.episode_length` steps.
pub fn rollout_from<R: Rng + ?Sized>(
    config: &EnvConfig,
    initial: GridState,
    policy: Policy,
    rng: &mut R,
) -> (Vec<GridState>, Vec<Vec<Event>>) {
    let mut states = Vec::with_capacity(config.episode_length + 1);
    let mut events = Vec::with_capacity(config.episode_length);
    states.push(initial);
    for _ in 0..config.episode_length {
        let current = states.last().expect("states is never empty");
        let action = choose_action(policy, config, current, rng);
        let (next, ev) = step(config, current, action, rng);
        states.push(next);
        events.push(ev);
    }
    (states, events)
}

pub fn rollout(config: &EnvConfig, seed: u64, policy: Policy) -> Result<Trajectory, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = init_state(config, &mut rng)?;
    let (states, events) = rollout_from(config, initial, policy, &mut rng);
    Ok(Trajectory {
        id: format!("seed-{seed}"),
        seed,
        policy,
        config: config.clone(),
        states,
        events,
    })
}

/// Like [`rollout`] with the policy given by name.
pub fn rollout_named(config: &EnvConfig, seed: u64, policy: &str) -> Result<Trajectory, EnvError> {
    rollout(config, seed, policy.parse()?)
}

pub fn generate_pool(config: &EnvConfig, n: usize, seed: u64) -> Result<TrajectoryPool, EnvError> {
    config.validate()?;
    if n == 0 {
        return Err(EnvError::ConfigInvalid("pool size must be at least 1".into()));
    }
    let weights = WeightedIndex::new(config.policy_mix.iter().map(|(_, w)| *w))
        .map_err(|e| EnvError::ConfigInvalid(e.to_string()))?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len().max(4);
    let trajectories = (0..n)
        .map(|i| {
            let policy = config.policy_mix[weights.sample(&mut master)].0;
            let traj_seed: u64 = master.random();
            let mut t = rollout(config, traj_seed, policy)?;
            t.id = format!("traj-{i:0width$}");
            Ok(t)
        })
        .collect::<Result<Vec<_>, EnvError>>()?;
    Ok(TrajectoryPool { seed, trajectories })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellView {
    /// Entity glyphs in the cell: agents first, then apples, then garbage. Empty cells are ".".
    pub glyphs: String,
    pub quadrant: QuadrantId,
    pub owner: AgentId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub step: usize,
    /// `cells[y][x]`.
    pub cells: Vec<Vec<CellView>>,
}

/// Glyph string of a single cell, shared by playback frames and the text encoding.
pub fn cell_glyphs(state: &GridState, pos: Position, legend: &crate::encoding::Legend) -> String {
    let mut s = String::new();
    if state.main_agent == pos {
        s.push(legend.main);
    }
    for a in &state.background_agents {
        if a.position == pos {
            s.push(legend.background);
        }
    }
    for _ in 0..state.apples.get(&pos).copied().unwrap_or(0) {
        s.push(legend.apple);
    }
    for _ in 0..state.garbage.get(&pos).copied().unwrap_or(0) {
        s.push(legend.garbage);
    }
    if s.is_empty() {
        s.push(legend.empty);
    }
    s
}

pub fn render_frames(traj: &Trajectory) -> Vec<Frame> {
    let legend = crate::encoding::Legend::default();
    let g = traj.config.grid_size;
    traj.states
        .iter()
        .map(|state| Frame {
            step: state.step_index,
            cells: (0..g)
                .map(|y| {
                    (0..g)
                        .map(|x| {
                            let pos = Position::new(x, y);
                            let quadrant = traj.config.quadrant_of(pos);
                            CellView {
                                glyphs: cell_glyphs(state, pos, &legend),
                                quadrant,
                                owner: state.owner_of(quadrant),
                            }
                        })
                        .collect()
                })
                .collect(),
        })
        .collect()
}
