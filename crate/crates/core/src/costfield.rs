//! Weighted shortest-path cost fields over the grid, deterministic path
//! extraction, and the windowed relative-cost observation channel.
//!
//! Path costs follow the entered-vertex convention: the cost of a path is
//! the sum of the weights of every vertex the path enters, i.e. every vertex
//! on it except the first. Cost fields therefore satisfy the Bellman
//! equation `cost(v) = min over free neighbors u of (weight(u) + cost(u))`
//! with `cost(target) = 0`.

use crate::grid::{Action, GridMap, Vertex};
use crate::window::Window;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use thiserror::Error;

/// Per-vertex traversal weights: positive and finite on free cells,
/// `+inf` on blocked cells.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    weights: Vec<f64>,
    id: u64,
}

impl WeightField {
    /// Unit weight on every free cell — the base field.
    pub fn uniform(map: &GridMap) -> Self {
        WeightField::from_fn(map, |_| 1.0)
    }

    /// Builds a field from a per-vertex function. The function is only
    /// consulted on free cells; blocked cells are forced to `+inf`.
    /// Panics if the function returns a non-positive or non-finite weight.
    pub fn from_fn(map: &GridMap, f: impl Fn(Vertex) -> f64) -> Self {
        let weights: Vec<f64> = (0..map.area())
            .map(|i| {
                let v = map.vertex(i);
                if map.is_blocked(v) {
                    f64::INFINITY
                } else {
                    let w = f(v);
                    assert!(w.is_finite() && w > 0.0, "weight at {v} must be positive and finite, got {w}");
                    w
                }
            })
            .collect();
        let id = weights_fingerprint(&weights);
        WeightField { weights, id }
    }

    /// Weight at a vertex.
    pub fn weight(&self, map: &GridMap, v: Vertex) -> f64 {
        self.weights[map.idx(v)]
    }

    pub(crate) fn weight_at(&self, idx: usize) -> f64 {
        self.weights[idx]
    }

    /// Fingerprint of the weight table; changes whenever any weight does.
    /// Cost fields remember the fingerprint of the weights they were built
    /// from so mismatched pairings can be caught.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Adds a non-negative finite penalty to one vertex, in place.
    /// Panics if the vertex is blocked.
    pub fn add_penalty(&mut self, map: &GridMap, v: Vertex, amount: f64) {
        assert!(amount.is_finite() && amount >= 0.0, "penalty must be finite and non-negative");
        let idx = map.idx(v);
        assert!(self.weights[idx].is_finite(), "cannot penalize blocked vertex {v}");
        self.weights[idx] += amount;
        self.id = weights_fingerprint(&self.weights);
    }

    /// Largest finite weight, or 0.0 when every cell is blocked.
    pub fn max_finite(&self) -> f64 {
        self.weights.iter().copied().filter(|w| w.is_finite()).fold(0.0, f64::max)
    }
}

fn weights_fingerprint(weights: &[f64]) -> u64 {
    // FNV-1a folded over whole bit patterns: one multiply per weight
    // instead of one per byte, and no scratch buffer. Recomputed on every
    // penalty application, so this sits on the hot path of heavy rounds.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for w in weights {
        h ^= w.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Exact weighted shortest-path costs from every vertex to one target.
#[derive(Debug, Clone, PartialEq)]
pub struct CostField {
    costs: Vec<f64>,
    target: Vertex,
    weights_id: u64,
}

impl CostField {
    /// Cost-to-target from a vertex; `+inf` when unreachable or blocked.
    pub fn cost(&self, map: &GridMap, v: Vertex) -> f64 {
        self.costs[map.idx(v)]
    }

    pub fn target(&self) -> Vertex {
        self.target
    }

    /// Fingerprint of the weight field this cost field was computed from.
    pub fn weights_id(&self) -> u64 {
        self.weights_id
    }
}

/// A rolled-out path. Indexing past the end returns the final vertex: an
/// agent that has arrived stays where it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPlan {
    vertices: Vec<Vertex>,
}

impl PathPlan {
    pub(crate) fn new(vertices: Vec<Vertex>) -> Self {
        assert!(!vertices.is_empty(), "a path has at least its start vertex");
        PathPlan { vertices }
    }

    /// Vertex occupied at time offset `h` from the path start; clamps to
    /// the final vertex once the path is exhausted.
    pub fn at(&self, h: usize) -> Vertex {
        self.vertices[h.min(self.vertices.len() - 1)]
    }

    /// Number of moves on the path (vertices minus one).
    pub fn steps(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn start(&self) -> Vertex {
        self.vertices[0]
    }

    pub fn end(&self) -> Vertex {
        *self.vertices.last().expect("non-empty")
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }
}

/// Why a field operation failed.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FieldError {
    #[error("target vertex {0} is blocked or out of bounds")]
    TargetBlocked(Vertex),
    #[error("no route from {0} to the target")]
    Unreachable(Vertex),
    #[error("window center {0} cannot reach the target")]
    CenterUnreachable(Vertex),
}

/// Min-heap entry for Dijkstra; ordering reversed so `BinaryHeap` pops the
/// smallest cost first, with the vertex index as a deterministic tie-break.
struct HeapEntry {
    cost: f64,
    idx: u32,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Backward Dijkstra from `target`. When `stop_at` is given the search halts
/// as soon as that vertex is settled; remaining entries stay `+inf`.
fn dijkstra(map: &GridMap, w: &WeightField, target: Vertex, stop_at: Option<usize>) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; map.area()];
    let t = map.idx(target);
    dist[t] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry { cost: 0.0, idx: t as u32 });
    while let Some(HeapEntry { cost, idx }) = heap.pop() {
        let u_idx = idx as usize;
        if cost > dist[u_idx] {
            continue; // stale entry
        }
        if stop_at == Some(u_idx) {
            break;
        }
        let u = map.vertex(u_idx);
        // Entering u from any neighbor costs w(u), so relaxation adds the
        // popped vertex's own weight.
        let enter = w.weight_at(u_idx) + cost;
        for v in map.free_neighbors(u) {
            let v_idx = map.idx(v);
            if enter < dist[v_idx] {
                dist[v_idx] = enter;
                heap.push(HeapEntry { cost: enter, idx: v_idx as u32 });
            }
        }
    }
    dist
}

/// Computes the exact cost field `J(., target)` under the given weights.
pub fn compute_cost_field(
    map: &GridMap,
    w: &WeightField,
    target: Vertex,
) -> Result<CostField, FieldError> {
    if !map.contains(target) || map.is_blocked(target) {
        return Err(FieldError::TargetBlocked(target));
    }
    let costs = dijkstra(map, w, target, None);
    Ok(CostField { costs, target, weights_id: w.id() })
}

/// Shortest-path cost from `source` to `target`, with the search cut short
/// once the source is settled. `+inf` when unreachable.
pub fn point_to_point_cost(
    map: &GridMap,
    w: &WeightField,
    source: Vertex,
    target: Vertex,
) -> Result<f64, FieldError> {
    if !map.contains(target) || map.is_blocked(target) {
        return Err(FieldError::TargetBlocked(target));
    }
    let src = map.idx(source);
    let dist = dijkstra(map, w, target, Some(src));
    Ok(dist[src])
}

/// Greedy descent on a cost field: from each vertex step to the free
/// neighbor minimizing `weight(u) + cost(u)`, ties broken by canonical
/// action order (Up, Down, Left, Right). Deterministic by construction.
pub fn extract_path(
    map: &GridMap,
    field: &CostField,
    w: &WeightField,
    start: Vertex,
) -> Result<PathPlan, FieldError> {
    debug_assert_eq!(field.weights_id(), w.id(), "cost field paired with foreign weights");
    if !field.cost(map, start).is_finite() {
        return Err(FieldError::Unreachable(start));
    }
    let mut vertices = vec![start];
    let mut v = start;
    while v != field.target() {
        let mut best: Option<(f64, Vertex)> = None;
        for a in [Action::Up, Action::Down, Action::Left, Action::Right] {
            let Some(u) = map.neighbor(v, a) else { continue };
            if map.is_blocked(u) {
                continue;
            }
            let cand = w.weight(map, u) + field.cost(map, u);
            if best.is_none_or(|(bc, _)| cand < bc) {
                best = Some((cand, u));
            }
        }
        let (best_cost, u) = best.expect("a reachable off-target vertex has a free neighbor");
        debug_assert!(
            (best_cost - field.cost(map, v)).abs() <= 1e-9 * best_cost.abs().max(1.0),
            "descent step disagrees with the field value"
        );
        v = u;
        vertices.push(v);
        assert!(vertices.len() <= map.area(), "path extraction failed to terminate");
    }
    Ok(PathPlan::new(vertices))
}

/// The windowed relative-cost observation channel.
///
/// Each in-window cell `u` carries `(w(u) + J(u)) - (w(c) + J(c))` where `c`
/// is the center: the full price of being routed through `u` next, relative
/// to the center. Blocked, out-of-bounds, and unreachable cells carry `+inf`;
/// the center is exactly 0. With unit weights this reduces to the plain
/// cost-to-go difference `J(u) - J(c)`.
pub fn local_channel(
    map: &GridMap,
    field: &CostField,
    w: &WeightField,
    center: Vertex,
    window: usize,
) -> Result<Window<f64>, FieldError> {
    debug_assert_eq!(field.weights_id(), w.id(), "cost field paired with foreign weights");
    let center_cost = field.cost(map, center);
    if !center_cost.is_finite() {
        return Err(FieldError::CenterUnreachable(center));
    }
    let base = w.weight(map, center) + center_cost;
    Ok(Window::from_fn(window, |dr, dc| {
        let row = center.row as i64 + dr;
        let col = center.col as i64 + dc;
        if row < 0 || col < 0 {
            return f64::INFINITY;
        }
        let u = Vertex::new(row as usize, col as usize);
        if !map.contains(u) || map.is_blocked(u) {
            return f64::INFINITY;
        }
        let through = w.weight(map, u) + field.cost(map, u);
        if through.is_finite() {
            through - base
        } else {
            f64::INFINITY
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_map;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
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

    /// Hop distances by breadth-first search — the independent oracle for
    /// unit-weight fields.
    fn bfs_distances(map: &GridMap, target: Vertex) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; map.area()];
        let mut queue = std::collections::VecDeque::new();
        dist[map.idx(target)] = 0.0;
        queue.push_back(target);
        while let Some(v) = queue.pop_front() {
            for u in map.free_neighbors(v) {
                let j = map.idx(u);
                if dist[j].is_infinite() {
                    dist[j] = dist[map.idx(v)] + 1.0;
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    fn random_map(rng: &mut ChaCha8Rng, side: usize, density: f64) -> GridMap {
        let blocked: Vec<bool> = (0..side * side).map(|_| rng.random::<f64>() < density).collect();
        GridMap::new(side, side, blocked)
    }

    #[test]
    fn unit_field_on_open_grid_is_manhattan() {
        let map = GridMap::open(3, 3);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(2, 2)).unwrap();
        assert_eq!(field.cost(&map, Vertex::new(0, 0)), 4.0);
        assert_eq!(field.cost(&map, Vertex::new(2, 2)), 0.0);
        assert_eq!(field.cost(&map, Vertex::new(1, 2)), 1.0);
    }

    #[test]
    fn weighted_field_detours_around_expensive_center() {
        // Weight 5 at the center: the top-row detour (4 entered cells at
        // weight 1) beats entering the center (5 + 1).
        let map = GridMap::open(3, 3);
        let w = WeightField::from_fn(&map, |v| if v == Vertex::new(1, 1) { 5.0 } else { 1.0 });
        let field = compute_cost_field(&map, &w, Vertex::new(1, 2)).unwrap();
        assert_eq!(field.cost(&map, Vertex::new(1, 0)), 4.0);
    }

    #[test]
    fn blocked_target_is_an_error() {
        let map = map_from(&[".@", ".."]);
        let w = WeightField::uniform(&map);
        assert_eq!(
            compute_cost_field(&map, &w, Vertex::new(0, 1)).unwrap_err(),
            FieldError::TargetBlocked(Vertex::new(0, 1))
        );
    }

    #[test]
    fn unreachable_region_carries_infinite_cost() {
        let map = map_from(&[".@.", ".@.", ".@."]);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(0, 0)).unwrap();
        assert!(field.cost(&map, Vertex::new(0, 2)).is_infinite());
        assert!(field.cost(&map, Vertex::new(2, 0)).is_finite());
    }

    #[test]
    fn matches_bfs_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let map = random_map(&mut rng, 12, 0.25);
            let free: Vec<Vertex> = map.free_vertices().collect();
            if free.is_empty() {
                continue;
            }
            let target = free[rng.random_range(0..free.len())];
            let w = WeightField::uniform(&map);
            let field = compute_cost_field(&map, &w, target).unwrap();
            let oracle = bfs_distances(&map, target);
            for v in map.free_vertices() {
                assert_eq!(field.cost(&map, v), oracle[map.idx(v)], "mismatch at {v}");
            }
        }
    }

    /// Direct scan of the Bellman equation over all free vertices.
    fn assert_bellman_consistent(map: &GridMap, w: &WeightField, field: &CostField) {
        for v in map.free_vertices() {
            if v == field.target() {
                assert_eq!(field.cost(map, v), 0.0);
                continue;
            }
            let best = map
                .free_neighbors(v)
                .map(|u| w.weight(map, u) + field.cost(map, u))
                .fold(f64::INFINITY, f64::min);
            let cost = field.cost(map, v);
            if cost.is_infinite() {
                assert!(best.is_infinite(), "unreachable {v} has a finite neighbor bound");
            } else {
                assert!((cost - best).abs() <= 1e-9, "Bellman violated at {v}: {cost} vs {best}");
            }
        }
    }

    #[test]
    fn bellman_consistency_under_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let map = random_map(&mut rng, 10, 0.2);
            let free: Vec<Vertex> = map.free_vertices().collect();
            if free.is_empty() {
                continue;
            }
            let target = free[rng.random_range(0..free.len())];
            let weights: Vec<f64> = (0..map.area()).map(|_| rng.random_range(0.5..4.0)).collect();
            let w = WeightField::from_fn(&map, |v| weights[v.row * map.width() + v.col]);
            let field = compute_cost_field(&map, &w, target).unwrap();
            assert_bellman_consistent(&map, &w, &field);
        }
    }

    #[test]
    fn point_to_point_agrees_with_full_field() {
        let map = map_from(&["....", ".@@.", "...."]);
        let w = WeightField::from_fn(&map, |v| 1.0 + (v.col as f64) * 0.25);
        let target = Vertex::new(2, 3);
        let field = compute_cost_field(&map, &w, target).unwrap();
        for v in map.free_vertices() {
            let p2p = point_to_point_cost(&map, &w, v, target).unwrap();
            assert_eq!(p2p, field.cost(&map, v));
        }
    }

    #[test]
    fn extracts_the_unique_corridor_path() {
        let map = GridMap::open(5, 1);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(0, 4)).unwrap();
        let path = extract_path(&map, &field, &w, Vertex::new(0, 0)).unwrap();
        let expect: Vec<Vertex> = (0..5).map(|c| Vertex::new(0, c)).collect();
        assert_eq!(path.vertices(), expect.as_slice());
        assert_eq!(path.steps(), 4);
    }

    #[test]
    fn path_from_target_is_a_singleton() {
        let map = GridMap::open(4, 4);
        let w = WeightField::uniform(&map);
        let target = Vertex::new(2, 2);
        let field = compute_cost_field(&map, &w, target).unwrap();
        let path = extract_path(&map, &field, &w, target).unwrap();
        assert_eq!(path.vertices(), &[target]);
        assert_eq!(path.at(0), target);
        assert_eq!(path.at(100), target);
    }

    #[test]
    fn straight_line_wins_ties() {
        let map = GridMap::open(3, 3);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(1, 2)).unwrap();
        let path = extract_path(&map, &field, &w, Vertex::new(1, 0)).unwrap();
        assert_eq!(path.vertices(), &[Vertex::new(1, 0), Vertex::new(1, 1), Vertex::new(1, 2)]);
    }

    #[test]
    fn unreachable_start_is_an_error() {
        let map = map_from(&[".@.", ".@.", ".@."]);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(0, 0)).unwrap();
        assert_eq!(
            extract_path(&map, &field, &w, Vertex::new(0, 2)).unwrap_err(),
            FieldError::Unreachable(Vertex::new(0, 2))
        );
    }

    #[test]
    fn channel_center_is_zero_with_infinite_padding() {
        let map = GridMap::open(5, 1);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(0, 4)).unwrap();
        let ch = local_channel(&map, &field, &w, Vertex::new(0, 2), 3).unwrap();
        // Rows above and below the corridor are out of bounds.
        for dc in -1..=1 {
            assert!(ch.get(-1, dc).is_infinite());
            assert!(ch.get(1, dc).is_infinite());
        }
        assert_eq!(*ch.get(0, -1), 1.0);
        assert_eq!(*ch.get(0, 0), 0.0);
        assert_eq!(*ch.get(0, 1), -1.0);
    }

    #[test]
    fn channel_marks_obstacles_infinite() {
        let map = map_from(&["...", ".@.", "..."]);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(2, 2)).unwrap();
        let ch = local_channel(&map, &field, &w, Vertex::new(0, 1), 3).unwrap();
        assert!(ch.get(1, 0).is_infinite());
        assert_eq!(*ch.get(0, 0), 0.0);
    }

    #[test]
    fn channel_reflects_penalized_weights() {
        // With a penalty on the center cell, routing through it costs its
        // full raised weight; the channel must expose that raised price.
        let map = GridMap::open(3, 3);
        let mut w = WeightField::uniform(&map);
        w.add_penalty(&map, Vertex::new(1, 1), 4.0);
        let field = compute_cost_field(&map, &w, Vertex::new(1, 2)).unwrap();
        let ch = local_channel(&map, &field, &w, Vertex::new(1, 0), 3).unwrap();
        // At (1,0): J = 4 via the top row, through-price 1 + 4 = 5.
        // Entering (1,1) costs 5 and leaves J = 1: through-price 6.
        assert_eq!(*ch.get(0, 1), 1.0);
        // Entering (0,0) costs 1 and leaves J = 3: through-price 4, a tie
        // with the center's own through-price.
        assert_eq!(*ch.get(-1, 0), -1.0);
    }

    #[test]
    fn channel_unreachable_center_is_an_error() {
        let map = map_from(&[".@.", ".@.", ".@."]);
        let w = WeightField::uniform(&map);
        let field = compute_cost_field(&map, &w, Vertex::new(0, 0)).unwrap();
        assert_eq!(
            local_channel(&map, &field, &w, Vertex::new(0, 2), 3).unwrap_err(),
            FieldError::CenterUnreachable(Vertex::new(0, 2))
        );
    }

    #[test]
    fn penalty_changes_the_fingerprint() {
        let map = GridMap::open(3, 3);
        let w0 = WeightField::uniform(&map);
        let mut w1 = w0.clone();
        assert_eq!(w0.id(), w1.id());
        w1.add_penalty(&map, Vertex::new(1, 1), 4.0);
        assert_ne!(w0.id(), w1.id());
        assert_eq!(w1.weight(&map, Vertex::new(1, 1)), 5.0);
        assert_eq!(w1.max_finite(), 5.0);
    }

    proptest! {
        /// The extracted path's entered-vertex cost equals the field value
        /// at its start, exactly.
        #[test]
        fn path_cost_equals_field_value(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(&mut rng, 8, 0.2);
            let free: Vec<Vertex> = map.free_vertices().collect();
            prop_assume!(free.len() >= 2);
            let target = free[rng.random_range(0..free.len())];
            let weights: Vec<f64> = (0..map.area()).map(|_| rng.random_range(0.5..4.0)).collect();
            let w = WeightField::from_fn(&map, |v| weights[v.row * map.width() + v.col]);
            let field = compute_cost_field(&map, &w, target).unwrap();
            let start = free[rng.random_range(0..free.len())];
            prop_assume!(field.cost(&map, start).is_finite());
            let path = extract_path(&map, &field, &w, start).unwrap();
            let total: f64 = path.vertices()[1..].iter().map(|&v| w.weight(&map, v)).sum();
            prop_assert!((total - field.cost(&map, start)).abs() <= 1e-9);
        }

        /// Raising any single weight never lowers any cost.
        #[test]
        fn raising_a_weight_is_monotone(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = random_map(&mut rng, 8, 0.15);
            let free: Vec<Vertex> = map.free_vertices().collect();
            prop_assume!(free.len() >= 2);
            let target = free[rng.random_range(0..free.len())];
            let w0 = WeightField::uniform(&map);
            let before = compute_cost_field(&map, &w0, target).unwrap();
            let bumped = free[rng.random_range(0..free.len())];
            let mut w1 = w0.clone();
            w1.add_penalty(&map, bumped, rng.random_range(0.5..6.0));
            let after = compute_cost_field(&map, &w1, target).unwrap();
            for v in map.free_vertices() {
                prop_assert!(after.cost(&map, v) >= before.cost(&map, v) - 1e-12);
            }
        }
    }
}
