//! Static grid world: occupancy maps, the five-action move model, agent
//! scenarios, and transition conflict predicates.
//!
//! Maps are 4-connected grids of free and blocked cells. Agents occupy free
//! cells and move one cell per step (or stay put). A joint transition is
//! conflict-free when no two agents land on the same cell and no two agents
//! traverse the same edge in opposite directions.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// A cell coordinate, row-major from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Vertex {
    pub row: usize,
    pub col: usize,
}

impl Vertex {
    pub fn new(row: usize, col: usize) -> Self {
        Vertex { row, col }
    }

    /// Chebyshev (L-infinity) distance to another vertex.
    pub fn chebyshev(&self, other: &Vertex) -> usize {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        dr.max(dc)
    }

    /// Manhattan (L1) distance to another vertex.
    pub fn manhattan(&self, other: &Vertex) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// The five moves an agent can propose each step.
///
/// The declaration order is the canonical action order used everywhere a
/// tie-break or a wire encoding needs one: `Wait < Up < Down < Left < Right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Wait,
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    /// All actions in canonical order.
    pub const ALL: [Action; 5] = [Action::Wait, Action::Up, Action::Down, Action::Left, Action::Right];

    /// Number of actions.
    pub const COUNT: usize = 5;

    /// Position of this action in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Inverse of [`Action::index`].
    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    /// Row/column displacement: rows grow downward, columns grow rightward.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Wait => (0, 0),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }

    /// Stable name used in wire encodings and traces.
    pub fn name(self) -> &'static str {
        match self {
            Action::Wait => "Wait",
            Action::Up => "Up",
            Action::Down => "Down",
            Action::Left => "Left",
            Action::Right => "Right",
        }
    }
}

/// A rectangular grid of free and blocked cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    blocked: Vec<bool>,
}

impl GridMap {
    /// Builds a map from an explicit row-major blocked mask.
    ///
    /// Panics if the mask length disagrees with the dimensions or either
    /// dimension is zero.
    pub fn new(width: usize, height: usize, blocked: Vec<bool>) -> Self {
        assert!(width > 0 && height > 0, "map dimensions must be positive");
        assert_eq!(blocked.len(), width * height, "blocked mask length must equal width * height");
        GridMap { width, height, blocked }
    }

    /// A fully open map.
    pub fn open(width: usize, height: usize) -> Self {
        GridMap::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Total number of cells, free or blocked.
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Row-major index of a vertex. Panics when out of bounds.
    pub fn idx(&self, v: Vertex) -> usize {
        assert!(self.contains(v), "vertex {v} outside {}x{} map", self.height, self.width);
        v.row * self.width + v.col
    }

    /// Vertex at a row-major index.
    pub fn vertex(&self, idx: usize) -> Vertex {
        assert!(idx < self.area());
        Vertex::new(idx / self.width, idx % self.width)
    }

    pub fn contains(&self, v: Vertex) -> bool {
        v.row < self.height && v.col < self.width
    }

    pub fn is_blocked(&self, v: Vertex) -> bool {
        self.blocked[self.idx(v)]
    }

    pub fn is_free(&self, v: Vertex) -> bool {
        !self.is_blocked(v)
    }

    /// Number of free cells.
    pub fn free_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| !b).count()
    }

    /// All free vertices in row-major order.
    pub fn free_vertices(&self) -> impl Iterator<Item = Vertex> + '_ {
        (0..self.area()).filter(|&i| !self.blocked[i]).map(|i| self.vertex(i))
    }

    /// In-bounds destination of an action, ignoring blockage.
    pub fn neighbor(&self, v: Vertex, action: Action) -> Option<Vertex> {
        let (dr, dc) = action.delta();
        let row = v.row as i64 + dr;
        let col = v.col as i64 + dc;
        if row < 0 || col < 0 {
            return None;
        }
        let u = Vertex::new(row as usize, col as usize);
        self.contains(u).then_some(u)
    }

    /// Destination of an action under the move model: an action whose target
    /// is out of bounds or blocked degrades to a wait.
    pub fn next_vertex(&self, v: Vertex, action: Action) -> Vertex {
        match self.neighbor(v, action) {
            Some(u) if self.is_free(u) => u,
            _ => v,
        }
    }

    /// The free in-bounds 4-neighbors of a vertex, in canonical action order.
    pub fn free_neighbors(&self, v: Vertex) -> impl Iterator<Item = Vertex> + '_ {
        [Action::Up, Action::Down, Action::Left, Action::Right]
            .into_iter()
            .filter_map(move |a| self.neighbor(v, a))
            .filter(|&u| self.is_free(u))
    }

    /// Labels each free cell with the id of its 4-connected component.
    ///
    /// Returns the row-major label table (`u32::MAX` on blocked cells) and
    /// the number of components. Labels are assigned in row-major discovery
    /// order, so the result is deterministic.
    pub(crate) fn component_labels(&self) -> (Vec<u32>, usize) {
        let mut labels = vec![u32::MAX; self.area()];
        let mut count = 0u32;
        let mut queue = Vec::new();
        for start in 0..self.area() {
            if self.blocked[start] || labels[start] != u32::MAX {
                continue;
            }
            labels[start] = count;
            queue.push(start);
            while let Some(i) = queue.pop() {
                let v = self.vertex(i);
                for u in self.free_neighbors(v) {
                    let j = self.idx(u);
                    if labels[j] == u32::MAX {
                        labels[j] = count;
                        queue.push(j);
                    }
                }
            }
            count += 1;
        }
        (labels, count as usize)
    }
}

/// Why a map file failed to parse.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapParseError {
    #[error("malformed map header: {0}")]
    MalformedHeader(String),
    #[error("map body disagrees with header: {0}")]
    DimensionMismatch(String),
    #[error("unrecognized map character {ch:?} at row {row}, column {col}")]
    UnknownCell { ch: char, row: usize, col: usize },
}

/// Parses the plain-text map format.
///
/// The format has a four-line header (`type <anything>`, `height <H>`,
/// `width <W>`, `map`) followed by `H` rows of exactly `W` characters.
/// `.`, `G`, and `S` denote free cells; `@`, `O`, `T`, and `W` denote
/// blocked cells.
pub fn parse_map(text: &str) -> Result<GridMap, MapParseError> {
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));

    let type_line = lines.next().unwrap_or("");
    if !type_line.starts_with("type") {
        return Err(MapParseError::MalformedHeader(format!(
            "expected a 'type' line, found {type_line:?}"
        )));
    }
    let height = parse_header_dim(lines.next(), "height")?;
    let width = parse_header_dim(lines.next(), "width")?;
    match lines.next() {
        Some("map") => {}
        other => {
            return Err(MapParseError::MalformedHeader(format!(
                "expected a 'map' line, found {other:?}"
            )))
        }
    }

    let mut blocked = Vec::with_capacity(width * height);
    let mut rows = 0usize;
    for line in lines.by_ref() {
        if rows == height {
            if line.is_empty() {
                continue;
            }
            return Err(MapParseError::DimensionMismatch(format!(
                "more than {height} map rows"
            )));
        }
        if line.chars().count() != width {
            return Err(MapParseError::DimensionMismatch(format!(
                "row {rows} has {} characters, expected {width}",
                line.chars().count()
            )));
        }
        for (col, ch) in line.chars().enumerate() {
            match ch {
                '.' | 'G' | 'S' => blocked.push(false),
                '@' | 'O' | 'T' | 'W' => blocked.push(true),
                _ => return Err(MapParseError::UnknownCell { ch, row: rows, col }),
            }
        }
        rows += 1;
    }
    if rows != height {
        return Err(MapParseError::DimensionMismatch(format!(
            "found {rows} map rows, expected {height}"
        )));
    }
    Ok(GridMap::new(width, height, blocked))
}

fn parse_header_dim(line: Option<&str>, key: &str) -> Result<usize, MapParseError> {
    let line = line.unwrap_or("");
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| MapParseError::MalformedHeader(format!("expected a '{key}' line, found {line:?}")))?;
    rest.trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| MapParseError::MalformedHeader(format!("bad {key} value in {line:?}")))
}

/// Renders a map back into the plain-text format accepted by [`parse_map`].
pub fn format_map(map: &GridMap) -> String {
    let mut out = String::with_capacity(map.area() + 64);
    out.push_str("type octile\n");
    out.push_str(&format!("height {}\n", map.height()));
    out.push_str(&format!("width {}\n", map.width()));
    out.push_str("map\n");
    for row in 0..map.height() {
        for col in 0..map.width() {
            out.push(if map.is_blocked(Vertex::new(row, col)) { '@' } else { '.' });
        }
        out.push('\n');
    }
    out
}

/// How two agents collide during one joint transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConflictKind {
    /// Both agents occupy the same cell after the transition.
    Vertex,
    /// The agents traverse the same edge in opposite directions.
    Swap,
}

/// A pair of colliding agents, `first < second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conflict {
    pub first: usize,
    pub second: usize,
    pub kind: ConflictKind,
}

/// Raised when the two position slices differ in length.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConflictCheckError {
    #[error("previous positions list has length {prev}, next has length {next}")]
    LengthMismatch { prev: usize, next: usize },
}

/// Finds every vertex and swap conflict in the transition `prev -> next`.
///
/// Pairs are reported with the smaller agent index first and the list is
/// sorted by `(first, second)`. A pair in both a vertex and a swap conflict
/// is impossible (a swap requires distinct end cells), so each pair appears
/// at most twice only when kinds differ — in practice at most once.
pub fn find_transition_conflicts(
    prev: &[Vertex],
    next: &[Vertex],
) -> Result<Vec<Conflict>, ConflictCheckError> {
    if prev.len() != next.len() {
        return Err(ConflictCheckError::LengthMismatch { prev: prev.len(), next: next.len() });
    }
    let n = prev.len();
    let mut out = Vec::new();

    // Vertex conflicts: group agents by destination cell.
    let mut by_dest: HashMap<Vertex, Vec<usize>> = HashMap::new();
    for (i, &v) in next.iter().enumerate() {
        by_dest.entry(v).or_default().push(i);
    }
    for group in by_dest.values() {
        for a in 0..group.len() {
            for b in a + 1..group.len() {
                out.push(Conflict { first: group[a], second: group[b], kind: ConflictKind::Vertex });
            }
        }
    }

    // Swap conflicts: index movers by their (from, to) edge.
    let mut by_edge: HashMap<(Vertex, Vertex), Vec<usize>> = HashMap::new();
    for i in 0..n {
        if prev[i] != next[i] {
            by_edge.entry((prev[i], next[i])).or_default().push(i);
        }
    }
    for (&(from, to), movers) in &by_edge {
        if from < to {
            // Visit each undirected edge once.
            if let Some(reverse) = by_edge.get(&(to, from)) {
                for &i in movers {
                    for &j in reverse {
                        let (first, second) = if i < j { (i, j) } else { (j, i) };
                        out.push(Conflict { first, second, kind: ConflictKind::Swap });
                    }
                }
            }
        }
    }

    out.sort_by_key(|c| (c.first, c.second));
    Ok(out)
}

/// One agent's task: where it starts and where it must end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentTask {
    pub start: Vertex,
    pub goal: Vertex,
}

/// A full problem instance: a map, the agent tasks, a seed, and a step cap.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub map: GridMap,
    pub agents: Vec<AgentTask>,
    pub seed: u64,
    pub max_steps: usize,
}

impl Scenario {
    pub fn starts(&self) -> Vec<Vertex> {
        self.agents.iter().map(|a| a.start).collect()
    }

    pub fn goals(&self) -> Vec<Vertex> {
        self.agents.iter().map(|a| a.goal).collect()
    }
}

/// Why a scenario is not executable. The index names the offending agent.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("agent {0}: start cell is blocked")]
    StartOnObstacle(usize),
    #[error("agent {0}: start cell already used by an earlier agent")]
    DuplicateStart(usize),
    #[error("agent {0}: goal cell already used by an earlier agent")]
    DuplicateGoal(usize),
    #[error("agent {0}: goal is unreachable from its start")]
    GoalUnreachable(usize),
}

/// Checks that every start is free and unique, every goal is unique, and
/// every goal is reachable from its start through free cells.
///
/// Checks run in the order start-occupancy, duplicate starts, duplicate
/// goals, reachability; within each check agents are visited in index order,
/// so the error always names the smallest offending index for that check.
pub fn validate_scenario(scenario: &Scenario) -> Result<(), ScenarioError> {
    let map = &scenario.map;
    for (i, task) in scenario.agents.iter().enumerate() {
        if !map.contains(task.start) || map.is_blocked(task.start) {
            return Err(ScenarioError::StartOnObstacle(i));
        }
    }
    let mut seen = HashMap::new();
    for (i, task) in scenario.agents.iter().enumerate() {
        if seen.insert(task.start, i).is_some() {
            return Err(ScenarioError::DuplicateStart(i));
        }
    }
    seen.clear();
    for (i, task) in scenario.agents.iter().enumerate() {
        if seen.insert(task.goal, i).is_some() {
            return Err(ScenarioError::DuplicateGoal(i));
        }
    }
    let (labels, _) = map.component_labels();
    for (i, task) in scenario.agents.iter().enumerate() {
        if !map.contains(task.goal) || map.is_blocked(task.goal) {
            return Err(ScenarioError::GoalUnreachable(i));
        }
        if labels[map.idx(task.start)] != labels[map.idx(task.goal)] {
            return Err(ScenarioError::GoalUnreachable(i));
        }
    }
    Ok(())
}

/// On-disk scenario representation. The map lives in a separate file and is
/// referenced by path, relative to the scenario file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub map_path: String,
    /// One `[start_row, start_col, goal_row, goal_col]` entry per agent.
    pub agents: Vec<[usize; 4]>,
    pub seed: u64,
    pub max_steps: usize,
}

/// Why scenario I/O failed.
#[derive(Debug, Error)]
pub enum ScenarioIoError {
    #[error("failed to read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("failed to write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Map { path: PathBuf, source: MapParseError },
    #[error("agent {index}: coordinates outside the {height}x{width} map")]
    AgentOutOfBounds { index: usize, height: usize, width: usize },
}

/// Loads a scenario file and the map it references.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioIoError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioIoError::Read { path: path.into(), source })?;
    let file: ScenarioFile = serde_json::from_str(&text)
        .map_err(|source| ScenarioIoError::Json { path: path.into(), source })?;

    let map_path = {
        let p = PathBuf::from(&file.map_path);
        if p.is_absolute() {
            p
        } else {
            path.parent().unwrap_or(Path::new(".")).join(p)
        }
    };
    let map_text = std::fs::read_to_string(&map_path)
        .map_err(|source| ScenarioIoError::Read { path: map_path.clone(), source })?;
    let map = parse_map(&map_text)
        .map_err(|source| ScenarioIoError::Map { path: map_path.clone(), source })?;

    let mut agents = Vec::with_capacity(file.agents.len());
    for (index, &[sr, sc, gr, gc]) in file.agents.iter().enumerate() {
        let start = Vertex::new(sr, sc);
        let goal = Vertex::new(gr, gc);
        if !map.contains(start) || !map.contains(goal) {
            return Err(ScenarioIoError::AgentOutOfBounds {
                index,
                height: map.height(),
                width: map.width(),
            });
        }
        agents.push(AgentTask { start, goal });
    }
    Ok(Scenario { map, agents, seed: file.seed, max_steps: file.max_steps })
}

/// Writes a scenario as a map file plus a JSON scenario file in the same
/// directory. `map_file_name` is stored verbatim as the relative map path.
pub fn save_scenario(
    scenario: &Scenario,
    scenario_path: &Path,
    map_file_name: &str,
) -> Result<(), ScenarioIoError> {
    let dir = scenario_path.parent().unwrap_or(Path::new("."));
    let map_path = dir.join(map_file_name);
    std::fs::write(&map_path, format_map(&scenario.map))
        .map_err(|source| ScenarioIoError::Write { path: map_path.clone(), source })?;

    let file = ScenarioFile {
        map_path: map_file_name.to_string(),
        agents: scenario
            .agents
            .iter()
            .map(|t| [t.start.row, t.start.col, t.goal.row, t.goal.col])
            .collect(),
        seed: scenario.seed,
        max_steps: scenario.max_steps,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|source| ScenarioIoError::Json { path: scenario_path.into(), source })?;
    std::fs::write(scenario_path, json + "\n")
        .map_err(|source| ScenarioIoError::Write { path: scenario_path.into(), source })?;
    Ok(())
}
