//! Seeded scenario generators: three map families plus random start/goal
//! assignment inside one connected component.

use crate::grid::{AgentTask, GridMap, Scenario, Vertex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Map-level retries before a random or maze layout is declared infeasible.
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFamily {
    Random,
    Maze,
    Warehouse,
}

/// A complete, seeded description of one generated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub family: MapFamily,
    /// Map width; `None` picks the family default.
    pub width: Option<usize>,
    /// Map height; `None` picks the family default.
    pub height: Option<usize>,
    /// Target blocked fraction (random and maze families).
    pub obstacle_density: f64,
    pub agent_count: usize,
    pub seed: u64,
    pub max_steps: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            family: MapFamily::Random,
            width: None,
            height: None,
            obstacle_density: 0.2,
            agent_count: 8,
            seed: 0,
            max_steps: 256,
        }
    }
}

impl GenSpec {
    /// The (width, height) in force after family defaults.
    pub fn dims(&self) -> (usize, usize) {
        let default = match self.family {
            MapFamily::Random => (32, 32),
            MapFamily::Maze => (40, 40),
            MapFamily::Warehouse => (46, 33),
        };
        (self.width.unwrap_or(default.0), self.height.unwrap_or(default.1))
    }

    pub fn validate(&self) -> Result<(), crate::InvalidConfig> {
        let (w, h) = self.dims();
        if w < 2 || h < 2 {
            return Err(crate::InvalidConfig("map dimensions must be at least 2x2".into()));
        }
        if !(0.0..1.0).contains(&self.obstacle_density) {
            return Err(crate::InvalidConfig(format!(
                "obstacle_density must lie in [0, 1), got {}",
                self.obstacle_density
            )));
        }
        if self.agent_count == 0 {
            return Err(crate::InvalidConfig("agent_count must be at least 1".into()));
        }
        if 2 * self.agent_count > w * h {
            return Err(crate::InvalidConfig(format!(
                "{} agents need {} distinct cells but the map has only {}",
                self.agent_count,
                2 * self.agent_count,
                w * h
            )));
        }
        if self.max_steps == 0 {
            return Err(crate::InvalidConfig("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error(transparent)]
    Invalid(#[from] crate::InvalidConfig),
    #[error("could not place {agents} agents on any of {attempts} generated layouts")]
    Infeasible { agents: usize, attempts: usize },
}

/// Generates the scenario a `GenSpec` describes. Identical specs produce
/// identical scenarios.
pub fn generate(spec: &GenSpec) -> Result<Scenario, GenError> {
    spec.validate()?;
    let (w, h) = spec.dims();
    let n = spec.agent_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (map, lcc) = match spec.family {
        MapFamily::Warehouse => {
            let map = warehouse_map(w, h);
            let lcc = largest_component(&map);
            if lcc.len() < 2 * n {
                return Err(GenError::Infeasible { agents: n, attempts: 1 });
            }
            (map, lcc)
        }
        family => {
            let mut found = None;
            for _ in 0..MAX_ATTEMPTS {
                let map = match family {
                    MapFamily::Random => random_map(w, h, spec.obstacle_density, &mut rng),
                    MapFamily::Maze => maze_map(w, h, spec.obstacle_density, &mut rng),
                    MapFamily::Warehouse => unreachable!(),
                };
                let lcc = largest_component(&map);
                if lcc.len() >= 2 * n {
                    found = Some((map, lcc));
                    break;
                }
            }
            found.ok_or(GenError::Infeasible { agents: n, attempts: MAX_ATTEMPTS })?
        }
    };

    let cells = sample_distinct(&lcc, 2 * n, &mut rng);
    let agents =
        (0..n).map(|i| AgentTask { start: cells[i], goal: cells[n + i] }).collect();
    Ok(Scenario { map, agents, seed: spec.seed, max_steps: spec.max_steps })
}

/// Independent per-cell obstacles at the given density.
fn random_map(w: usize, h: usize, density: f64, rng: &mut ChaCha8Rng) -> GridMap {
    let blocked = (0..w * h).map(|_| rng.random::<f64>() < density).collect();
    GridMap::new(w, h, blocked)
}

/// Recursive-division maze with 1-to-2-cell corridors, then adjusted to hit
/// the target blocked fraction exactly: removing walls braids loops into
/// the maze, adding clutter raises density beyond what division provides.
fn maze_map(w: usize, h: usize, density: f64, rng: &mut ChaCha8Rng) -> GridMap {
    let mut blocked = vec![false; w * h];
    divide(&mut blocked, w, 0, w, 0, h, rng);

    let target = (density * (w * h) as f64).round() as usize;
    let current = blocked.iter().filter(|&&b| b).count();
    if current > target {
        let mut walls: Vec<usize> =
            (0..blocked.len()).filter(|&i| blocked[i]).collect();
        for _ in 0..current - target {
            let k = rng.random_range(0..walls.len());
            blocked[walls.swap_remove(k)] = false;
        }
    } else {
        let mut open: Vec<usize> = (0..blocked.len()).filter(|&i| !blocked[i]).collect();
        for _ in 0..target - current {
            let k = rng.random_range(0..open.len());
            blocked[open.swap_remove(k)] = true;
        }
    }
    GridMap::new(w, h, blocked)
}

/// Splits the region [x0, x1) x [y0, y1) with one full-cell wall carrying
/// one or two doors, then recurses into both halves. Regions thinner than
/// three cells stay open, which caps corridor width at two.
fn divide(
    blocked: &mut [bool],
    w: usize,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    rng: &mut ChaCha8Rng,
) {
    let width = x1 - x0;
    let height = y1 - y0;
    if width < 3 || height < 3 {
        return;
    }
    let vertical = match width.cmp(&height) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => rng.random::<bool>(),
    };
    if vertical {
        let wx = rng.random_range(x0 + 1..x1 - 1);
        let doors = door_set(y0, y1, rng);
        for y in y0..y1 {
            if !doors.contains(&y) {
                blocked[y * w + wx] = true;
            }
        }
        divide(blocked, w, x0, wx, y0, y1, rng);
        divide(blocked, w, wx + 1, x1, y0, y1, rng);
    } else {
        let wy = rng.random_range(y0 + 1..y1 - 1);
        let doors = door_set(x0, x1, rng);
        for x in x0..x1 {
            if !doors.contains(&x) {
                blocked[wy * w + x] = true;
            }
        }
        divide(blocked, w, x0, x1, y0, wy, rng);
        divide(blocked, w, x0, x1, wy + 1, y1, rng);
    }
}

/// One or two distinct door coordinates in [lo, hi).
fn door_set(lo: usize, hi: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let first = rng.random_range(lo..hi);
    if hi - lo >= 2 && rng.random::<bool>() {
        loop {
            let second = rng.random_range(lo..hi);
            if second != first {
                return vec![first, second];
            }
        }
    }
    vec![first]
}

/// Fixed warehouse template: a free border ring around 2x5 shelf blocks
/// separated by one-row and two-column aisles, with every fourth row band
/// left fully open as a cross-aisle. Independent of the seed.
fn warehouse_map(w: usize, h: usize) -> GridMap {
    let blocked = (0..w * h)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            if r == 0 || r + 1 == h || c == 0 || c + 1 == w {
                return false;
            }
            let (rr, cc) = (r - 1, c - 1);
            let cross_aisle = (rr / 3) % 4 == 3;
            !cross_aisle && rr % 3 < 2 && cc % 7 < 5
        })
        .collect();
    GridMap::new(w, h, blocked)
}

/// The cells of the largest 4-connected free component, in row-major
/// order; ties go to the lowest label (earliest discovery).
fn largest_component(map: &GridMap) -> Vec<Vertex> {
    let (labels, count) = map.component_labels();
    if count == 0 {
        return Vec::new();
    }
    let mut sizes = vec![0usize; count];
    for &l in &labels {
        if l != u32::MAX {
            sizes[l as usize] += 1;
        }
    }
    let best = (0..count).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))).unwrap() as u32;
    (0..map.area())
        .filter(|&i| labels[i] == best)
        .map(|i| map.vertex(i))
        .collect()
}

/// Draws `k` distinct cells by a partial Fisher-Yates shuffle.
fn sample_distinct(cells: &[Vertex], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vertex> {
    debug_assert!(k <= cells.len());
    let mut pool = cells.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
