//! Local observations, the built-in cost-channel follower policy, and
//! action selection.
//!
//! Policies consume a three-channel window observation (obstacles, other
//! agents, relative cost-to-go) and produce one logit per action. The
//! built-in follower simply prefers cheaper cells; an external process
//! speaking the stdio protocol (see the `external` module) can replace it.

use crate::grid::{Action, GridMap, Vertex};
use crate::window::Window;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

/// What one agent sees at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// True where the cell is blocked or out of bounds.
    pub obstacle: Window<bool>,
    /// True where another agent currently stands.
    pub agents: Window<bool>,
    /// Relative routing cost; `+inf` on unusable cells, exactly 0 at the
    /// center.
    pub cost: Window<f64>,
    pub center: Vertex,
    pub goal: Vertex,
}

/// One logit per action, indexed in canonical action order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(pub [f64; 5]);

impl LogitVector {
    pub fn zeros() -> Self {
        LogitVector([0.0; 5])
    }

    /// Adds another vector elementwise.
    pub fn add(&mut self, delta: &LogitVector) {
        for i in 0..Action::COUNT {
            self.0[i] += delta.0[i];
        }
    }

    /// The maximal-logit action; ties go to the earliest action in
    /// canonical order.
    pub fn argmax(&self) -> Action {
        let mut best = Action::Wait;
        for a in Action::ALL {
            if self.0[a.index()] > self.0[best.index()] {
                best = a;
            }
        }
        best
    }

    pub fn iter(&self) -> impl Iterator<Item = (Action, f64)> + '_ {
        Action::ALL.into_iter().map(|a| (a, self.0[a.index()]))
    }
}

impl Index<Action> for LogitVector {
    type Output = f64;
    fn index(&self, a: Action) -> &f64 {
        &self.0[a.index()]
    }
}

impl IndexMut<Action> for LogitVector {
    fn index_mut(&mut self, a: Action) -> &mut f64 {
        &mut self.0[a.index()]
    }
}

/// Which policy produces logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// The built-in cost-channel follower.
    GreedyFollower,
    /// An external process driven over stdin/stdout.
    External {
        command: Vec<String>,
        #[serde(default = "default_deadline_ms")]
        deadline_ms: u64,
    },
}

fn default_deadline_ms() -> u64 {
    10_000
}

/// How an action is picked from logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Argmax,
    Sample,
}

/// Policy configuration shared by both arms of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Follower gain: logit(a) = -temperature * cost(a).
    pub temperature: f64,
    /// Sentinel magnitude assigned to blocked actions.
    pub blocked_logit: f64,
    /// Subtracted from actions targeting a cell another agent occupies.
    pub occupied_penalty: f64,
    pub selection: SelectionMode,
    /// Observation window side length; odd, at least 3.
    pub window: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::GreedyFollower,
            temperature: 1.0,
            blocked_logit: 1.0e6,
            occupied_penalty: 2.0,
            selection: SelectionMode::Argmax,
            window: 11,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), crate::InvalidConfig> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(crate::InvalidConfig("temperature must be positive and finite".into()));
        }
        if !(self.blocked_logit >= 1.0e3 && self.blocked_logit.is_finite()) {
            return Err(crate::InvalidConfig("blocked_logit must be finite and at least 1e3".into()));
        }
        if !(self.occupied_penalty >= 0.0 && self.occupied_penalty.is_finite()) {
            return Err(crate::InvalidConfig("occupied_penalty must be non-negative".into()));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(crate::InvalidConfig("window must be odd and at least 3".into()));
        }
        if let PolicyKind::External { command, .. } = &self.kind {
            if command.is_empty() {
                return Err(crate::InvalidConfig("external policy command must be non-empty".into()));
            }
        }
        Ok(())
    }
}

/// Assembles the three observation channels for one agent.
///
/// `cost_channel` must have been produced by `costfield::local_channel`
/// centered on the agent's current position under the agent's effective
/// weights; it is passed through unchanged.
pub fn build_observation(
    map: &GridMap,
    positions: &[Vertex],
    agent_index: usize,
    goal: Vertex,
    cost_channel: Window<f64>,
) -> Observation {
    let center = positions[agent_index];
    let window = cost_channel.side();
    debug_assert_eq!(*cost_channel.get(0, 0), 0.0, "cost channel center must be 0");

    let obstacle = Window::from_fn(window, |dr, dc| {
        let row = center.row as i64 + dr;
        let col = center.col as i64 + dc;
        if row < 0 || col < 0 {
            return true;
        }
        let u = Vertex::new(row as usize, col as usize);
        !map.contains(u) || map.is_blocked(u)
    });

    let mut agents = Window::filled(window, false);
    let radius = (window / 2) as i64;
    for (j, p) in positions.iter().enumerate() {
        if j == agent_index {
            continue;
        }
        let dr = p.row as i64 - center.row as i64;
        let dc = p.col as i64 - center.col as i64;
        if dr.abs() <= radius && dc.abs() <= radius {
            *agents.get_mut(dr, dc) = true;
        }
    }

    Observation { obstacle, agents, cost: cost_channel, center, goal }
}

/// The built-in follower: prefer the cheapest next cell.
///
/// For each action, the logit is `-temperature * c(a)` where `c(a)` is the
/// cost-channel value of the targeted cell (0 for Wait). Blocked actions
/// get `-blocked_logit`; a finite-cost cell occupied by another agent costs
/// an extra `occupied_penalty`. Unreachable-but-free cells (channel `+inf`)
/// are clamped to the blocked sentinel.
pub fn greedy_logits(obs: &Observation, cfg: &PolicyConfig) -> LogitVector {
    let mut out = LogitVector::zeros();
    for a in Action::ALL {
        let (c, occupied) = if a == Action::Wait {
            (0.0, false)
        } else {
            let (dr, dc) = a.delta();
            if *obs.obstacle.get(dr, dc) {
                out[a] = -cfg.blocked_logit;
                continue;
            }
            (*obs.cost.get(dr, dc), *obs.agents.get(dr, dc))
        };
        let mut logit = -cfg.temperature * c;
        if !logit.is_finite() {
            logit = -cfg.blocked_logit;
        }
        if occupied {
            logit -= cfg.occupied_penalty;
        }
        out[a] = logit;
    }
    out
}

/// Picks an action from logits: deterministic argmax, or a softmax draw
/// advancing the supplied generator.
pub fn select_action(logits: &LogitVector, cfg: &PolicyConfig, rng: &mut impl Rng) -> Action {
    match cfg.selection {
        SelectionMode::Argmax => logits.argmax(),
        SelectionMode::Sample => {
            let max = logits.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.0.iter().map(|&l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let draw = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for a in Action::ALL {
                acc += weights[a.index()];
                if draw < acc {
                    return a;
                }
            }
            Action::Right // unreachable except for floating-point edge cases
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costfield::{compute_cost_field, local_channel, WeightField};
    use crate::grid::parse_map;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_from(rows: &[&str]) -> GridMap {
        let text = format!(
            "type octile\nheight {}\nwidth {}\nmap\n{}\n",
            rows.len(),
            rows[0].len(),
            rows.join("\n")
        );
        parse_map(&text).expect("test map must parse")
    }

    fn channel_for(map: &GridMap, goal: Vertex, center: Vertex, window: usize) -> Window<f64> {
        let w = WeightField::uniform(map);
        let field = compute_cost_field(map, &w, goal).unwrap();
        local_channel(map, &field, &w, center, window).unwrap()
    }

    fn follower_cfg(occupied_penalty: f64) -> PolicyConfig {
        PolicyConfig { occupied_penalty, window: 3, ..PolicyConfig::default() }
    }

    #[test]
    fn single_agent_sees_no_neighbors() {
        let map = GridMap::open(5, 5);
        let goal = Vertex::new(4, 4);
        let center = Vertex::new(2, 2);
        let obs = build_observation(&map, &[center], 0, goal, channel_for(&map, goal, center, 3));
        assert!(obs.agents.cells().iter().all(|&b| !b));
        assert_eq!(obs.center, center);
        assert_eq!(obs.goal, goal);
    }

    #[test]
    fn adjacent_agent_marks_exactly_one_cell() {
        let map = GridMap::open(5, 5);
        let goal = Vertex::new(4, 4);
        let positions = [Vertex::new(2, 2), Vertex::new(2, 3)];
        let obs = build_observation(&map, &positions, 0, goal, channel_for(&map, goal, positions[0], 3));
        assert_eq!(obs.agents.cells().iter().filter(|&&b| b).count(), 1);
        assert!(*obs.agents.get(0, 1));
    }

    #[test]
    fn corner_window_pads_out_of_bounds_as_blocked() {
        let map = GridMap::open(8, 8);
        let goal = Vertex::new(7, 7);
        let center = Vertex::new(0, 0);
        let obs = build_observation(&map, &[center], 0, goal, channel_for(&map, goal, center, 5));
        assert!(*obs.obstacle.get(-1, 0));
        assert!(*obs.obstacle.get(-2, -2));
        assert!(*obs.obstacle.get(0, -1));
        assert!(!*obs.obstacle.get(0, 0));
        assert!(!*obs.obstacle.get(2, 2));
    }

    #[test]
    fn corridor_logits_match_hand_values() {
        let map = GridMap::open(5, 1);
        let goal = Vertex::new(0, 4);
        let center = Vertex::new(0, 0);
        let obs = build_observation(&map, &[center], 0, goal, channel_for(&map, goal, center, 3));
        let cfg = follower_cfg(0.0);
        let logits = greedy_logits(&obs, &cfg);
        let m = cfg.blocked_logit;
        assert_eq!(logits[Action::Wait], 0.0);
        assert_eq!(logits[Action::Up], -m);
        assert_eq!(logits[Action::Down], -m);
        assert_eq!(logits[Action::Left], -m);
        assert_eq!(logits[Action::Right], 1.0);
        assert_eq!(logits.argmax(), Action::Right);
    }

    #[test]
    fn at_goal_the_follower_waits() {
        let map = GridMap::open(5, 5);
        let goal = Vertex::new(2, 2);
        let obs = build_observation(&map, &[goal], 0, goal, channel_for(&map, goal, goal, 3));
        let logits = greedy_logits(&obs, &follower_cfg(2.0));
        assert_eq!(logits.argmax(), Action::Wait);
        for a in [Action::Up, Action::Down, Action::Left, Action::Right] {
            assert!(logits[a] < logits[Action::Wait]);
        }
    }

    #[test]
    fn occupied_cell_costs_exactly_the_penalty() {
        let map = GridMap::open(5, 5);
        let goal = Vertex::new(2, 4);
        let positions = [Vertex::new(2, 2), Vertex::new(2, 3)];
        let channel = channel_for(&map, goal, positions[0], 3);
        let obs = build_observation(&map, &positions, 0, goal, channel.clone());
        let with = greedy_logits(&obs, &follower_cfg(5.0));
        let without = greedy_logits(&obs, &follower_cfg(0.0));
        assert_eq!(without[Action::Right] - with[Action::Right], 5.0);
        assert_eq!(without[Action::Up], with[Action::Up]);
    }

    #[test]
    fn unreachable_free_cell_is_clamped_to_sentinel() {
        // Column 2 is free but walled off from the rest of the map.
        let map = map_from(&[".@.", ".@.", ".@."]);
        let goal = Vertex::new(2, 0);
        let center = Vertex::new(0, 0);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, goal).unwrap();
        let ch = local_channel(&map, &field, &w, center, 5).unwrap();
        assert!(ch.get(0, 2).is_infinite());
        let obs = build_observation(&map, &[center], 0, goal, ch);
        // Right targets the blocked (0,1): sentinel via the obstacle rule.
        let cfg = follower_cfg(2.0);
        let logits = greedy_logits(&obs, &cfg);
        assert_eq!(logits[Action::Right], -cfg.blocked_logit);
    }

    #[test]
    fn argmax_tie_break_follows_canonical_order() {
        assert_eq!(LogitVector([0.0; 5]).argmax(), Action::Wait);
        assert_eq!(LogitVector([0.0, -1e6, -1e6, -1e6, 1.0]).argmax(), Action::Right);
        assert_eq!(LogitVector([1.0, 2.0, 2.0, 0.0, 0.0]).argmax(), Action::Up);
    }

    #[test]
    fn sampling_is_reproducible() {
        let cfg = PolicyConfig { selection: SelectionMode::Sample, ..PolicyConfig::default() };
        let logits = LogitVector([0.5, 0.1, 0.9, -0.3, 0.2]);
        let draw = |seed: u64| -> Vec<Action> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| select_action(&logits, &cfg, &mut rng)).collect()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn follower_reaches_goal_in_field_cost_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..25 {
            let blocked: Vec<bool> = (0..100).map(|_| rng.random::<f64>() < 0.2).collect();
            let map = GridMap::new(10, 10, blocked);
            let free: Vec<Vertex> = map.free_vertices().collect();
            if free.len() < 2 {
                continue;
            }
            let goal = free[rng.random_range(0..free.len())];
            let w = WeightField::uniform(&map);
            let field = compute_cost_field(&map, &w, goal).unwrap();
            let start = free[rng.random_range(0..free.len())];
            if !field.cost(&map, start).is_finite() {
                continue;
            }
            let expect = field.cost(&map, start) as usize;
            let cfg = PolicyConfig::default();
            let mut p = start;
            let mut steps = 0;
            while p != goal {
                let ch = local_channel(&map, &field, &w, p, cfg.window).unwrap();
                let obs = build_observation(&map, &[p], 0, goal, ch);
                let a = greedy_logits(&obs, &cfg).argmax();
                p = map.next_vertex(p, a);
                steps += 1;
                assert!(steps <= map.area(), "follower failed to terminate");
            }
            assert_eq!(steps, expect);
        }
    }

    #[test]
    fn config_validation_catches_bad_values() {
        assert!(PolicyConfig::default().validate().is_ok());
        assert!(PolicyConfig { temperature: 0.0, ..PolicyConfig::default() }.validate().is_err());
        assert!(PolicyConfig { blocked_logit: 10.0, ..PolicyConfig::default() }.validate().is_err());
        assert!(PolicyConfig { window: 4, ..PolicyConfig::default() }.validate().is_err());
        assert!(PolicyConfig {
            kind: PolicyKind::External { command: vec![], deadline_ms: 100 },
            ..PolicyConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        /// Argmax is invariant under adding a constant to every logit.
        #[test]
        fn argmax_shift_invariance(
            raw in proptest::array::uniform5(-10.0f64..10.0),
            shift in -100.0f64..100.0,
        ) {
            let base = LogitVector(raw);
            let shifted = LogitVector(raw.map(|l| l + shift));
            prop_assert_eq!(base.argmax(), shifted.argmax());
        }

        /// The follower never argmaxes a blocked action: Wait is always
        /// available at logit 0, which beats the blocked sentinel.
        #[test]
        fn blocked_actions_never_win(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blocked: Vec<bool> = (0..36).map(|_| rng.random::<f64>() < 0.4).collect();
            let map = GridMap::new(6, 6, blocked);
            let free: Vec<Vertex> = map.free_vertices().collect();
            prop_assume!(free.len() >= 2);
            let goal = free[rng.random_range(0..free.len())];
            let w = WeightField::uniform(&map);
            let field = compute_cost_field(&map, &w, goal).unwrap();
            let center = free[rng.random_range(0..free.len())];
            prop_assume!(field.cost(&map, center).is_finite());
            let ch = local_channel(&map, &field, &w, center, 3).unwrap();
            let obs = build_observation(&map, &[center], 0, goal, ch);
            let cfg = PolicyConfig { window: 3, ..PolicyConfig::default() };
            let best = greedy_logits(&obs, &cfg).argmax();
            if best != Action::Wait {
                let (dr, dc) = best.delta();
                prop_assert!(!*obs.obstacle.get(dr, dc));
            }
        }
    }
}
