//! Congestion-aware test-time corrections layered on a base policy.
//!
//! Each heavy update round rolls out every agent's shortest path, predicts
//! where pairs of agents will coincide, and resolves each predicted
//! congestion point one of two ways: if some involved agent has an
//! alternative route, that agent's weight map gets a penalty at the vertex
//! (spatial rerouting, surfaced to the policy through its cost channel);
//! otherwise a minimum set of involved agents receives a logit penalty on
//! actions that make progress toward the bottleneck (temporal yielding).
//! Between heavy rounds a cheap per-step correction damps actions whose
//! target cell looks attractive to nearby agents (emergent crowding).

use crate::costfield::{
    compute_cost_field, extract_path, local_channel, point_to_point_cost, CostField, FieldError,
    PathPlan, WeightField,
};
use crate::grid::{Action, GridMap, Vertex};
use crate::observation::LogitVector;
use crate::window::Window;
use serde::{Deserialize, Serialize};
use std::borrow::Borrow;
use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use thiserror::Error;

/// Largest number of involved agents for which the vertex cover is solved
/// exactly; beyond this a greedy 2-approximation is used and flagged.
pub const EXACT_COVER_LIMIT: usize = 24;

/// A predicted coincidence: agents `first < second` both reach `vertex`
/// at time offset `offset` on their rolled-out paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CongestionPoint {
    pub first: usize,
    pub second: usize,
    pub vertex: Vertex,
    pub offset: usize,
}

/// A spatial resolution: `agent`'s weight at `vertex` is raised according
/// to its detour cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialIntervention {
    pub agent: usize,
    pub vertex: Vertex,
    pub detour_cost: f64,
}

/// A temporal resolution: `agent` is discouraged from approaching `vertex`,
/// its earliest unresolved bottleneck at offset `offset`, with gain
/// `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalAssignment {
    pub agent: usize,
    pub vertex: Vertex,
    pub offset: usize,
    pub lambda: f64,
}

/// Which weights feed the rollout at each heavy update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutWeights {
    /// Roll out under the untouched base weights.
    Base,
    /// Roll out under the previous round's effective weights — predicts the
    /// routes agents actually see, at the price of feedback between rounds.
    Effective,
}

/// Tuning for the correction pipeline. All fields have workable defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteamConfig {
    /// Probing penalty; `None` derives `area * max finite weight + 1`,
    /// which strictly exceeds any simple-path detour cost.
    pub probe_penalty: Option<f64>,
    /// Exponent of the detour-cost penalty added to weight maps.
    pub detour_exponent: f64,
    /// Temporal gain for conflicts close in time.
    pub gamma_time: f64,
    /// Temporal gain for conflicts close in space.
    pub gamma_dist: f64,
    /// Guard against division by zero in the temporal gain.
    pub epsilon: f64,
    /// Emergent-correction gain.
    pub alpha: f64,
    /// Steps between heavy update rounds.
    pub update_interval: usize,
    /// Predictions beyond this offset are ignored.
    pub horizon_cap: usize,
    pub rollout_weights: RolloutWeights,
    /// Enables spatial probing; with it off every congestion point is
    /// handled temporally.
    pub spatial: bool,
    /// Also predict edge swaps, not just same-vertex coincidences.
    pub include_swap_predictions: bool,
    /// Recompute crowding scores from live positions every step instead of
    /// once per heavy round.
    pub emergent_every_step: bool,
    /// Exclude blocked-sentinel logits from the spread estimate.
    pub sigma_excludes_blocked: bool,
}

impl Default for SteamConfig {
    fn default() -> Self {
        SteamConfig {
            probe_penalty: None,
            detour_exponent: 2.0,
            gamma_time: 4.0,
            gamma_dist: 4.0,
            epsilon: 1.0e-6,
            alpha: 0.3,
            update_interval: 5,
            horizon_cap: 128,
            rollout_weights: RolloutWeights::Base,
            spatial: true,
            include_swap_predictions: false,
            emergent_every_step: true,
            sigma_excludes_blocked: true,
        }
    }
}

impl SteamConfig {
    pub fn validate(&self) -> Result<(), crate::InvalidConfig> {
        if let Some(p) = self.probe_penalty {
            if !(p > 0.0 && p.is_finite()) {
                return Err(crate::InvalidConfig("probe_penalty must be positive and finite".into()));
            }
        }
        if !(self.detour_exponent > 0.0 && self.detour_exponent.is_finite()) {
            return Err(crate::InvalidConfig("detour_exponent must be positive".into()));
        }
        for (name, v) in [("gamma_time", self.gamma_time), ("gamma_dist", self.gamma_dist), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(crate::InvalidConfig(format!("{name} must be non-negative and finite")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(crate::InvalidConfig("epsilon must be positive".into()));
        }
        if self.update_interval == 0 {
            return Err(crate::InvalidConfig("update_interval must be at least 1".into()));
        }
        if self.horizon_cap == 0 {
            return Err(crate::InvalidConfig("horizon_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of probing one congestion point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeOutcome {
    /// `agent` has a route around the vertex at the given extra cost.
    Avoidable { agent: usize, detour_cost: f64 },
    /// Neither agent can route around the vertex.
    TemporalOnly,
}

/// Result of covering the residual conflict pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverResult {
    /// Covering agent indices, sorted ascending.
    pub agents: Vec<usize>,
    /// Whether the cover is a proven minimum (vs. greedy approximation).
    pub exact: bool,
}

/// Cumulative activity counters for one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteamCounts {
    pub heavy_updates: usize,
    pub congestion_points: usize,
    pub spatial_interventions: usize,
    pub temporal_assignments: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SteamError {
    #[error("agent {agent} at {position} cannot reach its goal under its current weights")]
    Unreachable { agent: usize, position: Vertex },
    #[error("agent {agent} appears in no congestion point")]
    NoConflict { agent: usize },
}

/// Rolls out each agent's deterministic shortest path from its current
/// position to its goal. `fields[i]` must be the cost field of
/// `weights[i]` targeted at agent `i`'s goal.
pub fn rollout_paths<F: Borrow<CostField>>(
    map: &GridMap,
    positions: &[Vertex],
    weights: &[WeightField],
    fields: &[F],
) -> Result<Vec<PathPlan>, SteamError> {
    positions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            extract_path(map, fields[i].borrow(), &weights[i], p)
                .map_err(|_| SteamError::Unreachable { agent: i, position: p })
        })
        .collect()
}

/// Finds every pairwise same-vertex coincidence on the rolled-out paths
/// within the horizon, sorted by (offset, first, second). Pairs where both
/// agents are already resting at their path ends are skipped. With
/// `include_swaps`, predicted edge swaps are reported too, tagged with the
/// first agent's vertex at the offset.
pub fn detect_congestion(
    paths: &[PathPlan],
    horizon_cap: usize,
    include_swaps: bool,
) -> Vec<CongestionPoint> {
    let max_steps = paths.iter().map(|p| p.steps()).max().unwrap_or(0);
    let limit = horizon_cap.min(max_steps);
    let mut out = Vec::new();
    // One reused buffer, sorted per offset to group same-cell agents; this
    // runs every heavy round, so it avoids hashing and per-cell allocation.
    let mut slots: Vec<(Vertex, usize)> = Vec::with_capacity(paths.len());
    for h in 1..=limit {
        slots.clear();
        slots.extend(paths.iter().enumerate().map(|(i, p)| (p.at(h), i)));
        slots.sort_unstable();
        let mut s = 0;
        while s < slots.len() {
            let mut e = s + 1;
            while e < slots.len() && slots[e].0 == slots[s].0 {
                e += 1;
            }
            let v = slots[s].0;
            for x in s..e {
                for y in x + 1..e {
                    let (i, j) = (slots[x].1, slots[y].1);
                    if h >= paths[i].steps() && h >= paths[j].steps() {
                        continue; // both resting at their (distinct) ends
                    }
                    out.push(CongestionPoint { first: i, second: j, vertex: v, offset: h });
                }
            }
            s = e;
        }
        if include_swaps {
            let mut by_edge: HashMap<(Vertex, Vertex), Vec<usize>> = HashMap::new();
            for (i, p) in paths.iter().enumerate() {
                let (a, b) = (p.at(h - 1), p.at(h));
                if a != b {
                    by_edge.entry((a, b)).or_default().push(i);
                }
            }
            for (&(a, b), movers) in &by_edge {
                if a < b {
                    if let Some(reverse) = by_edge.get(&(b, a)) {
                        for &i in movers {
                            for &j in reverse {
                                let (first, second) = if i < j { (i, j) } else { (j, i) };
                                out.push(CongestionPoint {
                                    first,
                                    second,
                                    vertex: paths[first].at(h),
                                    offset: h,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out.sort_by_key(|p| (p.offset, p.first, p.second, p.vertex));
    out
}

/// Detour cost for one agent around one vertex: the rise in its shortest-
/// path cost when the vertex carries the probing penalty. `None` when the
/// agent currently stands on the vertex (it cannot route around a cell it
/// occupies — this arises only for agents resting on their goal).
fn detour_cost(
    map: &GridMap,
    agent: usize,
    vertex: Vertex,
    positions: &[Vertex],
    goals: &[Vertex],
    base_weights: &[WeightField],
    base_goal_fields: &[CostField],
    probe_penalty: f64,
) -> Option<f64> {
    let p = positions[agent];
    if p == vertex {
        return None;
    }
    let base = base_goal_fields[agent].cost(map, p);
    debug_assert!(base.is_finite(), "probed agent must reach its goal");
    let mut probed = base_weights[agent].clone();
    probed.add_penalty(map, vertex, probe_penalty);
    let penalized = point_to_point_cost(map, &probed, p, goals[agent])
        .expect("goal stays free under probing");
    Some(penalized - base)
}

/// Shared classification: given each involved agent's detour cost (`None`
/// meaning non-bypassing), pick the bypassing agent with the smaller cost,
/// ties to the smaller index.
fn classify_probe(
    first: usize,
    second: usize,
    probe_penalty: f64,
    mut detour: impl FnMut(usize) -> Option<f64>,
) -> ProbeOutcome {
    let mut best: Option<(usize, f64)> = None;
    for agent in [first, second] {
        let Some(d) = detour(agent) else { continue };
        if d < probe_penalty {
            let better = match best {
                None => true,
                Some((_, bd)) => d < bd,
            };
            if better {
                best = Some((agent, d));
            }
        }
    }
    match best {
        Some((agent, detour_cost)) => ProbeOutcome::Avoidable { agent, detour_cost },
        None => ProbeOutcome::TemporalOnly,
    }
}

/// Tests whether either involved agent can route around the congestion
/// vertex, each probed independently under its base weights with the
/// penalty applied only for the test. An agent bypasses iff its detour
/// cost stays below the penalty; with the default penalty this is exactly
/// "an avoiding path exists".
pub fn probe_spatial(
    map: &GridMap,
    point: &CongestionPoint,
    positions: &[Vertex],
    goals: &[Vertex],
    base_weights: &[WeightField],
    base_goal_fields: &[CostField],
    probe_penalty: f64,
) -> ProbeOutcome {
    classify_probe(point.first, point.second, probe_penalty, |agent| {
        detour_cost(map, agent, point.vertex, positions, goals, base_weights, base_goal_fields, probe_penalty)
    })
}

/// The penalty added to a weight map for one intervention.
pub fn detour_penalty(detour_cost: f64, exponent: f64) -> f64 {
    if exponent == 2.0 {
        detour_cost * detour_cost
    } else {
        detour_cost.powf(exponent)
    }
}

/// Builds each agent's effective weights: base weights plus the summed
/// penalties of its interventions. Always built fresh from base weights;
/// rounds do not accumulate.
pub fn aggregate_interventions(
    map: &GridMap,
    interventions: &[SpatialIntervention],
    base_weights: &[WeightField],
    exponent: f64,
) -> Vec<WeightField> {
    let mut out = base_weights.to_vec();
    for s in interventions {
        out[s.agent].add_penalty(map, s.vertex, detour_penalty(s.detour_cost, exponent));
    }
    out
}

/// Covers every residual conflict pair with a minimum set of agents.
///
/// Up to [`EXACT_COVER_LIMIT`] involved agents the cover is an exact
/// minimum and, among minimums, the lexicographically smallest sorted index
/// set; beyond that a greedy max-degree cover is returned with
/// `exact: false`.
pub fn select_cover(temporal_points: &[CongestionPoint]) -> CoverResult {
    let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut involved_set: BTreeSet<usize> = BTreeSet::new();
    for p in temporal_points {
        debug_assert!(p.first < p.second);
        edge_set.insert((p.first, p.second));
        involved_set.insert(p.first);
        involved_set.insert(p.second);
    }
    if edge_set.is_empty() {
        return CoverResult { agents: Vec::new(), exact: true };
    }
    let involved: Vec<usize> = involved_set.into_iter().collect();
    let local_of: HashMap<usize, usize> =
        involved.iter().enumerate().map(|(k, &a)| (a, k)).collect();
    let edges: Vec<(usize, usize)> =
        edge_set.iter().map(|&(a, b)| (local_of[&a], local_of[&b])).collect();
    let m = involved.len();

    if m > EXACT_COVER_LIMIT {
        let cover = greedy_cover(m, &edges);
        return CoverResult { agents: cover.into_iter().map(|k| involved[k]).collect(), exact: false };
    }

    let mut adj = vec![0u32; m];
    for &(a, b) in &edges {
        adj[a] |= 1 << b;
        adj[b] |= 1 << a;
    }
    let mut best = greedy_cover(m, &edges).len() as u32;
    min_cover_size(&adj, 0, 0, &mut best);
    let mut chosen = Vec::new();
    let found = lex_smallest_cover(&adj, m, 0, 0, best, &mut chosen);
    debug_assert!(found, "a cover of the proven minimum size must exist");
    CoverResult { agents: chosen.into_iter().map(|k| involved[k]).collect(), exact: true }
}

/// Greedy max-degree cover over an explicit edge list; ties go to the
/// smallest vertex. Returns sorted local indices.
fn greedy_cover(m: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut alive: Vec<(usize, usize)> = edges.to_vec();
    let mut cover = Vec::new();
    while !alive.is_empty() {
        let mut deg = vec![0usize; m];
        for &(a, b) in &alive {
            deg[a] += 1;
            deg[b] += 1;
        }
        let pick = (0..m).max_by_key(|&u| (deg[u], std::cmp::Reverse(u))).expect("m > 0");
        cover.push(pick);
        alive.retain(|&(a, b)| a != pick && b != pick);
    }
    cover.sort_unstable();
    cover
}

/// Greedy maximal matching size on the uncovered subgraph — a lower bound
/// on the remaining cover size.
fn matching_bound(adj: &[u32], covered: u32) -> u32 {
    let mut used = covered;
    let mut size = 0;
    for u in 0..adj.len() {
        if used & (1 << u) != 0 {
            continue;
        }
        let free = adj[u] & !used;
        if free != 0 {
            let v = free.trailing_zeros();
            used |= (1 << u) | (1 << v);
            size += 1;
        }
    }
    size
}

/// Branch-and-bound minimum vertex cover size. Applies degree-1 reduction
/// (a pendant edge forces its other endpoint) and prunes with the greedy
/// matching bound; branches on a maximum-degree vertex, either taking it
/// or taking its whole neighborhood.
fn min_cover_size(adj: &[u32], mut covered: u32, mut size: u32, best: &mut u32) {
    let m = adj.len();
    loop {
        if size >= *best {
            return;
        }
        let mut reduced = false;
        let mut any_edge = false;
        for u in 0..m {
            if covered & (1 << u) != 0 {
                continue;
            }
            let rem = adj[u] & !covered;
            if rem == 0 {
                continue; // degree 0: irrelevant
            }
            any_edge = true;
            if rem.count_ones() == 1 {
                // Degree 1: its single edge is covered optimally by the
                // other endpoint.
                covered |= rem;
                size += 1;
                reduced = true;
                break;
            }
        }
        if !any_edge {
            *best = (*best).min(size);
            return;
        }
        if reduced {
            continue;
        }
        if size + matching_bound(adj, covered) >= *best {
            return;
        }
        let branch = (0..m)
            .filter(|&u| covered & (1 << u) == 0 && adj[u] & !covered != 0)
            .max_by_key(|&u| ((adj[u] & !covered).count_ones(), std::cmp::Reverse(u)))
            .expect("an uncovered edge exists");
        // Take the vertex...
        min_cover_size(adj, covered | (1 << branch), size + 1, best);
        // ...or exclude it, forcing its entire remaining neighborhood in.
        let nbrs = adj[branch] & !covered;
        min_cover_size(adj, covered | nbrs, size + nbrs.count_ones(), best);
        return;
    }
}

/// Depth-first search for the lexicographically smallest cover of exactly
/// the proven minimum size, trying vertices in ascending order.
fn lex_smallest_cover(
    adj: &[u32],
    m: usize,
    start: usize,
    covered: u32,
    budget: u32,
    chosen: &mut Vec<usize>,
) -> bool {
    let uncovered_exists =
        (0..m).any(|u| covered & (1 << u) == 0 && adj[u] & !covered != 0);
    if !uncovered_exists {
        return true;
    }
    if budget == 0 || matching_bound(adj, covered) > budget {
        return false;
    }
    for u in start..m {
        if covered & (1 << u) != 0 {
            continue;
        }
        if adj[u] & !covered == 0 {
            continue; // covers nothing here; no minimum cover includes it
        }
        chosen.push(u);
        if lex_smallest_cover(adj, m, u + 1, covered | (1 << u), budget - 1, chosen) {
            return true;
        }
        chosen.pop();
    }
    false
}

/// The agent's earliest congestion point: minimal offset, ties by the
/// vertex's (row, col).
pub fn earliest_conflict(
    agent: usize,
    temporal_points: &[CongestionPoint],
) -> Result<(Vertex, usize), SteamError> {
    temporal_points
        .iter()
        .filter(|p| p.first == agent || p.second == agent)
        .min_by_key(|p| (p.offset, p.vertex.row, p.vertex.col))
        .map(|p| (p.vertex, p.offset))
        .ok_or(SteamError::NoConflict { agent })
}

/// Yielding gain: large when the bottleneck is close in time or in space.
pub fn temporal_lambda(cfg: &SteamConfig, offset: usize, distance: f64) -> f64 {
    cfg.gamma_time / (offset as f64 + cfg.epsilon) + cfg.gamma_dist / (distance + cfg.epsilon)
}

/// Logit deltas penalizing one-step progress toward the assigned vertex.
///
/// `to_vertex_field` is the cost field toward the bottleneck vertex under
/// the agent's base weights. Progress is clamped at zero, so Wait, blocked
/// moves, and moves away all receive exactly 0.
pub fn temporal_correction(
    map: &GridMap,
    position: Vertex,
    to_vertex_field: &CostField,
    lambda: f64,
) -> LogitVector {
    let mut out = LogitVector::zeros();
    let here = to_vertex_field.cost(map, position);
    if !here.is_finite() {
        return out;
    }
    for a in Action::ALL {
        let u = map.next_vertex(position, a);
        if u == position {
            continue;
        }
        let there = to_vertex_field.cost(map, u);
        if !there.is_finite() {
            continue;
        }
        let progress = here - there;
        if progress > 0.0 {
            out[a] = -(lambda * progress);
        }
    }
    out
}

/// The full through-price of standing at `v` for an agent with the given
/// weights and goal field: entering cost plus remaining cost-to-go.
fn through_price(map: &GridMap, w: &WeightField, field: &CostField, v: Vertex) -> f64 {
    w.weight(map, v) + field.cost(map, v)
}

/// Counts, for each action, how many windowed neighbors would find the
/// action's target cell strictly attractive under their own effective cost
/// fields. Neighbors resting on their goals are ignored.
pub fn density_scores<F: Borrow<CostField>>(
    map: &GridMap,
    agent: usize,
    positions: &[Vertex],
    goals: &[Vertex],
    weights: &[WeightField],
    fields: &[F],
    radius: usize,
) -> [u32; 5] {
    let center = positions[agent];
    let mut out = [0u32; 5];
    let neighbors: Vec<usize> = (0..positions.len())
        .filter(|&j| {
            j != agent && positions[j] != goals[j] && positions[j].chebyshev(&center) <= radius
        })
        .collect();
    if neighbors.is_empty() {
        return out;
    }
    let current: Vec<f64> = neighbors
        .iter()
        .map(|&j| through_price(map, &weights[j], fields[j].borrow(), positions[j]))
        .collect();
    for a in Action::ALL {
        let u = map.next_vertex(center, a);
        for (k, &j) in neighbors.iter().enumerate() {
            if through_price(map, &weights[j], fields[j].borrow(), u) - current[k] < 0.0 {
                out[a.index()] += 1;
            }
        }
    }
    out
}

/// Population standard deviation of the logits, optionally ignoring
/// entries at or below the blocked sentinel `-threshold`.
pub fn logit_sigma(logits: &LogitVector, blocked_threshold: Option<f64>) -> f64 {
    let keep: Vec<f64> = match blocked_threshold {
        Some(m) => logits.0.iter().copied().filter(|&l| l > -m + 1e-9).collect(),
        None => logits.0.to_vec(),
    };
    if keep.is_empty() {
        return 0.0;
    }
    let mean = keep.iter().sum::<f64>() / keep.len() as f64;
    let var = keep.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / keep.len() as f64;
    var.sqrt()
}

/// Crowding penalty: each action loses `alpha * sigma` per neighbor that
/// wants its target cell, where sigma is the spread of the incoming logits.
pub fn emergent_correction(
    logits_after_time: &LogitVector,
    scores: &[u32; 5],
    alpha: f64,
    blocked_threshold: Option<f64>,
) -> LogitVector {
    let sigma = logit_sigma(logits_after_time, blocked_threshold);
    let mut out = LogitVector::zeros();
    for i in 0..Action::COUNT {
        let d = alpha * sigma * scores[i] as f64;
        if d != 0.0 {
            out.0[i] = -d;
        }
    }
    out
}

struct AssignmentState {
    info: TemporalAssignment,
    /// Cost field toward the assigned vertex under the agent's base
    /// weights; progress is re-read from it at every step.
    to_vertex_field: Arc<CostField>,
}

struct RoundState {
    effective_weights: Vec<WeightField>,
    goal_fields: Vec<Arc<CostField>>,
    assignments: Vec<Option<AssignmentState>>,
    interventions: Vec<SpatialIntervention>,
    /// Per-agent crowding scores frozen at update time; only populated when
    /// the per-step refresh is disabled.
    frozen_scores: Option<Vec<[u32; 5]>>,
}

/// Cache key for a goal field under penalized weights: base weight
/// fingerprint, goal index, and the ordered (vertex, penalty-bits) list
/// applied on top. Exact — identical lists produce identical weights.
type PenalizedFieldKey = (u64, usize, Vec<(usize, u64)>);

/// Stateful per-episode orchestrator: runs heavy rounds on its cadence and
/// serves cached artifacts between them.
///
/// Congestion tends to persist across rounds, so the engine memoizes every
/// expensive field it derives from immutable inputs: probe fields per
/// (weights, goal, vertex), bottleneck fields per (weights, vertex), and
/// penalized goal fields per exact penalty list. Cache hits change nothing
/// observable — the recomputation they skip is deterministic.
pub struct SteamEngine {
    cfg: SteamConfig,
    counts: SteamCounts,
    cover_exact_always: bool,
    round: Option<RoundState>,
    /// Goal fields under base weights, shared into each round.
    base_field_arcs: HashMap<(u64, usize), Arc<CostField>>,
    /// Goal fields with the probing penalty on one vertex, keyed by
    /// (weights id, goal idx, vertex idx, penalty bits).
    probe_field_cache: HashMap<(u64, usize, usize, u64), Arc<CostField>>,
    /// Fields toward assigned bottleneck vertices, keyed by
    /// (weights id, vertex idx).
    to_vertex_cache: HashMap<(u64, usize), Arc<CostField>>,
    /// Goal fields under penalized effective weights.
    penalized_field_cache: HashMap<PenalizedFieldKey, Arc<CostField>>,
    /// Largest finite weight per weight-field fingerprint, feeding the
    /// probing penalty without rescanning every field each round.
    max_finite_cache: HashMap<u64, f64>,
}

impl SteamEngine {
    pub fn new(cfg: SteamConfig) -> Self {
        SteamEngine {
            cfg,
            counts: SteamCounts::default(),
            cover_exact_always: true,
            round: None,
            base_field_arcs: HashMap::new(),
            probe_field_cache: HashMap::new(),
            to_vertex_cache: HashMap::new(),
            penalized_field_cache: HashMap::new(),
            max_finite_cache: HashMap::new(),
        }
    }

    pub fn cfg(&self) -> &SteamConfig {
        &self.cfg
    }

    pub fn counts(&self) -> SteamCounts {
        self.counts
    }

    /// False if any round so far fell back to the greedy cover.
    pub fn cover_exact_always(&self) -> bool {
        self.cover_exact_always
    }

    /// Whether step `t` starts a heavy update round.
    pub fn is_update_step(&self, t: usize) -> bool {
        t.is_multiple_of(self.cfg.update_interval)
    }

    /// The probing penalty in force for the given base weights.
    pub fn probe_penalty(&self, map: &GridMap, base_weights: &[WeightField]) -> f64 {
        self.cfg.probe_penalty.unwrap_or_else(|| {
            let max_w =
                base_weights.iter().map(WeightField::max_finite).fold(0.0, f64::max).max(1.0);
            map.area() as f64 * max_w + 1.0
        })
    }

    /// Same value as [`Self::probe_penalty`], with the per-field maxima
    /// memoized by fingerprint across rounds.
    fn probe_penalty_cached(&mut self, map: &GridMap, base_weights: &[WeightField]) -> f64 {
        if let Some(p) = self.cfg.probe_penalty {
            return p;
        }
        let mut max_w: f64 = 0.0;
        for w in base_weights {
            let m = *self.max_finite_cache.entry(w.id()).or_insert_with(|| w.max_finite());
            max_w = max_w.max(m);
        }
        map.area() as f64 * max_w.max(1.0) + 1.0
    }

    /// One heavy round: rollout, congestion prediction, spatial probing,
    /// weight aggregation, cover selection, and temporal assignment.
    /// `base_fields[i]` must be agent `i`'s goal field under
    /// `base_weights[i]`; `window_radius` feeds the crowding scores when
    /// they are frozen per round.
    pub fn update(
        &mut self,
        map: &GridMap,
        positions: &[Vertex],
        goals: &[Vertex],
        base_weights: &[WeightField],
        base_fields: &[CostField],
        window_radius: usize,
    ) -> Result<(), SteamError> {
        let n = positions.len();
        let probe_penalty = self.probe_penalty_cached(map, base_weights);

        let paths = match (self.cfg.rollout_weights, &self.round) {
            (RolloutWeights::Effective, Some(prev)) => {
                rollout_paths(map, positions, &prev.effective_weights, &prev.goal_fields)?
            }
            _ => rollout_paths(map, positions, base_weights, base_fields)?,
        };

        let points =
            detect_congestion(&paths, self.cfg.horizon_cap, self.cfg.include_swap_predictions);

        let mut interventions = Vec::new();
        let mut temporal_points = Vec::new();
        if self.cfg.spatial {
            // Detour values depend on live positions, so they are memoized
            // only within the round; the probed fields they read from are
            // position-independent and live in the cross-round cache. A
            // cached field yields the same value the cut-short search in
            // `detour_cost` would: both settle vertices in the same order.
            let probe_cache = &mut self.probe_field_cache;
            let mut detour_memo: HashMap<(usize, Vertex), Option<f64>> = HashMap::new();
            for p in &points {
                let outcome = classify_probe(p.first, p.second, probe_penalty, |agent| {
                    *detour_memo.entry((agent, p.vertex)).or_insert_with(|| {
                        let pos = positions[agent];
                        if pos == p.vertex {
                            return None;
                        }
                        let base = base_fields[agent].cost(map, pos);
                        debug_assert!(base.is_finite(), "probed agent must reach its goal");
                        let key = (
                            base_weights[agent].id(),
                            map.idx(goals[agent]),
                            map.idx(p.vertex),
                            probe_penalty.to_bits(),
                        );
                        let field = probe_cache.entry(key).or_insert_with(|| {
                            let mut probed = base_weights[agent].clone();
                            probed.add_penalty(map, p.vertex, probe_penalty);
                            Arc::new(
                                compute_cost_field(map, &probed, goals[agent])
                                    .expect("goal stays free under probing"),
                            )
                        });
                        Some(field.cost(map, pos) - base)
                    })
                });
                match outcome {
                    ProbeOutcome::Avoidable { agent, detour_cost } => interventions
                        .push(SpatialIntervention { agent, vertex: p.vertex, detour_cost }),
                    ProbeOutcome::TemporalOnly => temporal_points.push(*p),
                }
            }
        } else {
            temporal_points = points.clone();
        }

        let effective =
            aggregate_interventions(map, &interventions, base_weights, self.cfg.detour_exponent);
        for i in 0..n {
            let key = (base_weights[i].id(), map.idx(goals[i]));
            self.base_field_arcs
                .entry(key)
                .or_insert_with(|| Arc::new(base_fields[i].clone()));
        }
        let mut penalty_lists: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n];
        for s in &interventions {
            let bits = detour_penalty(s.detour_cost, self.cfg.detour_exponent).to_bits();
            penalty_lists[s.agent].push((map.idx(s.vertex), bits));
        }
        let base_arcs = &self.base_field_arcs;
        let penalized_cache = &mut self.penalized_field_cache;
        let goal_fields: Vec<Arc<CostField>> = (0..n)
            .map(|i| {
                let base_key = (base_weights[i].id(), map.idx(goals[i]));
                if effective[i].id() == base_weights[i].id() {
                    Arc::clone(&base_arcs[&base_key])
                } else {
                    let key =
                        (base_key.0, base_key.1, std::mem::take(&mut penalty_lists[i]));
                    Arc::clone(penalized_cache.entry(key).or_insert_with(|| {
                        Arc::new(
                            compute_cost_field(map, &effective[i], goals[i])
                                .expect("goals stay free under penalties"),
                        )
                    }))
                }
            })
            .collect();

        let cover = select_cover(&temporal_points);
        self.cover_exact_always &= cover.exact;

        let mut assignments: Vec<Option<AssignmentState>> = (0..n).map(|_| None).collect();
        for &agent in &cover.agents {
            let (vertex, offset) = earliest_conflict(agent, &temporal_points)?;
            let key = (base_weights[agent].id(), map.idx(vertex));
            let to_vertex_field =
                Arc::clone(self.to_vertex_cache.entry(key).or_insert_with(|| {
                    Arc::new(
                        compute_cost_field(map, &base_weights[agent], vertex)
                            .expect("congestion vertices lie on free cells"),
                    )
                }));
            let distance = to_vertex_field.cost(map, positions[agent]);
            debug_assert!(distance.is_finite(), "bottleneck lies on the agent's own rollout");
            let lambda = temporal_lambda(&self.cfg, offset, distance);
            assignments[agent] =
                Some(AssignmentState { info: TemporalAssignment { agent, vertex, offset, lambda }, to_vertex_field });
        }

        let frozen_scores = if self.cfg.emergent_every_step {
            None
        } else {
            Some(
                (0..n)
                    .map(|i| {
                        density_scores(map, i, positions, goals, &effective, &goal_fields, window_radius)
                    })
                    .collect(),
            )
        };

        self.counts.heavy_updates += 1;
        self.counts.congestion_points += points.len();
        self.counts.spatial_interventions += interventions.len();
        self.counts.temporal_assignments += cover.agents.len();
        self.round = Some(RoundState {
            effective_weights: effective,
            goal_fields,
            assignments,
            interventions,
            frozen_scores,
        });
        Ok(())
    }

    fn round(&self) -> &RoundState {
        self.round.as_ref().expect("update() must run before querying the engine")
    }

    /// The agent's observation cost channel under its effective weights.
    pub fn cost_channel(
        &self,
        map: &GridMap,
        agent: usize,
        center: Vertex,
        window: usize,
    ) -> Result<Window<f64>, FieldError> {
        let r = self.round();
        local_channel(map, &r.goal_fields[agent], &r.effective_weights[agent], center, window)
    }

    /// The agent's temporal logit delta at its live position, or `None`
    /// when it carries no assignment this round.
    pub fn temporal_delta(&self, map: &GridMap, agent: usize, position: Vertex) -> Option<LogitVector> {
        let a = self.round().assignments[agent].as_ref()?;
        Some(temporal_correction(map, position, &a.to_vertex_field, a.info.lambda))
    }

    /// Crowding scores for one agent: live by default, frozen per round
    /// when configured so.
    pub fn crowding_scores(
        &self,
        map: &GridMap,
        agent: usize,
        positions: &[Vertex],
        goals: &[Vertex],
        radius: usize,
    ) -> [u32; 5] {
        let r = self.round();
        if let Some(frozen) = &r.frozen_scores {
            return frozen[agent];
        }
        density_scores(map, agent, positions, goals, &r.effective_weights, &r.goal_fields, radius)
    }

    /// This round's temporal assignments, for traces and reports.
    pub fn assignments(&self) -> Vec<TemporalAssignment> {
        self.round().assignments.iter().flatten().map(|a| a.info).collect()
    }

    /// This round's spatial interventions, for traces and reports.
    pub fn interventions(&self) -> &[SpatialIntervention] {
        &self.round().interventions
    }

    /// The agent's effective weight at a vertex this round.
    pub fn effective_weight(&self, map: &GridMap, agent: usize, v: Vertex) -> f64 {
        self.round().effective_weights[agent].weight(map, v)
    }
}
