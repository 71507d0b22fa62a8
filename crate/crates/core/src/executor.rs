//! Lockstep episode execution: observations, policy queries, congestion
//! corrections, simultaneous-move arbitration, and metrics.

use crate::costfield::{compute_cost_field, local_channel, CostField, FieldError, WeightField};
use crate::external::{ExternalPolicy, PolicyError};
use crate::grid::{
    find_transition_conflicts, validate_scenario, Action, Scenario, ScenarioError, Vertex,
};
use crate::observation::{
    build_observation, greedy_logits, select_action, LogitVector, PolicyConfig, PolicyKind,
};
use crate::steam::{
    SpatialIntervention, SteamConfig, SteamCounts, SteamEngine, SteamError, TemporalAssignment,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Norm used by the crowding metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityNorm {
    Chebyshev,
    Manhattan,
}

impl DensityNorm {
    fn distance(self, a: &Vertex, b: &Vertex) -> usize {
        match self {
            DensityNorm::Chebyshev => a.chebyshev(b),
            DensityNorm::Manhattan => a.manhattan(b),
        }
    }
}

/// Episode-level knobs that are not part of the policy or correction
/// configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    /// Radius of the crowding metric's neighborhood.
    pub density_radius: usize,
    pub density_norm: DensityNorm,
    /// Record a full per-step debugging trace.
    pub record_trace: bool,
    /// Include run-length-encoded trajectories in the report.
    pub record_trajectories: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            density_radius: 5,
            density_norm: DensityNorm::Chebyshev,
            record_trace: false,
            record_trajectories: true,
        }
    }
}

/// Wall-clock measurements; excluded from determinism comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTiming {
    /// One-off setup: weight maps, goal fields, policy spawn.
    pub setup_us: u64,
    /// Full decision time per executed step (corrections + policy +
    /// selection).
    pub step_us: Vec<u64>,
    /// The congestion-correction share of each step.
    pub steam_us: Vec<u64>,
    pub mean_step_us: f64,
    pub mean_steam_us: f64,
}

/// One step of the optional debugging trace, captured before the move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Whether a heavy correction round ran at this step.
    pub update: bool,
    pub positions: Vec<Vertex>,
    pub actions: Vec<String>,
    /// Final logits after all corrections.
    pub logits: Vec<LogitVector>,
    pub temporal_deltas: Vec<LogitVector>,
    pub emergent_deltas: Vec<LogitVector>,
    /// Active spatial interventions (update steps only).
    pub interventions: Vec<SpatialIntervention>,
    /// Active temporal assignments (update steps only).
    pub assignments: Vec<TemporalAssignment>,
    /// Which agents had their proposed move reverted by arbitration.
    pub reverted: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub steps: Vec<StepTrace>,
}

/// Everything measured about one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub config_hash: String,
    pub agents: usize,
    pub steam_enabled: bool,
    /// True when the corrections never changed anything: no spatial
    /// interventions and no temporal assignments over the whole episode.
    pub steam_noop: bool,
    pub success: bool,
    pub makespan: usize,
    pub sum_of_costs: usize,
    pub agent_costs: Vec<usize>,
    pub steps_executed: usize,
    /// Mean fraction of other agents inside each agent's neighborhood,
    /// averaged over executed steps; 0 for single-agent episodes.
    pub density: f64,
    /// Simultaneous-move arbitration rule in force.
    pub arbitration: String,
    /// False if any correction round used the greedy cover fallback.
    pub cover_exact_always: bool,
    pub counts: SteamCounts,
    /// Per-agent [row, col, run-length] encoding of positions over time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories_rle: Option<Vec<Vec<[usize; 3]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<EpisodeTrace>,
    pub timing: EpisodeTiming,
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Config(#[from] crate::InvalidConfig),
    #[error("cost field construction failed: {0}")]
    Field(#[from] FieldError),
    #[error(transparent)]
    Steam(#[from] SteamError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DensityError {
    #[error("the crowding metric needs at least two agents")]
    SingleAgent,
    #[error("no episodes provided")]
    EmptyInput,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggregateError {
    #[error("no reports to aggregate")]
    EmptyInput,
    #[error("reports mix config hashes: {first} vs {second}")]
    MixedConfig { first: String, second: String },
}

/// Resolves simultaneous move proposals into a conflict-free transition.
///
/// Iterates three revert rules to a fixpoint: edge-swap pairs both revert;
/// among movers proposing the same cell the lowest index keeps it; movers
/// targeting a cell whose occupant stays put revert. Reverting is monotone
/// (movers only ever become stationary), so the fixpoint exists, is unique,
/// and is reached within `n` passes.
pub fn resolve_moves(prev: &[Vertex], proposed: &[Vertex]) -> Vec<Vertex> {
    let n = prev.len();
    let mut next = proposed.to_vec();
    loop {
        let mut changed = false;

        for i in 0..n {
            if next[i] == prev[i] {
                continue;
            }
            for j in i + 1..n {
                if next[j] != prev[j] && next[i] == prev[j] && next[j] == prev[i] {
                    next[i] = prev[i];
                    next[j] = prev[j];
                    changed = true;
                    break;
                }
            }
        }

        for i in 0..n {
            if next[i] == prev[i] {
                continue;
            }
            for j in i + 1..n {
                if next[j] != prev[j] && next[j] == next[i] {
                    next[j] = prev[j];
                    changed = true;
                }
            }
        }

        for i in 0..n {
            if next[i] == prev[i] {
                continue;
            }
            if (0..n).any(|j| j != i && next[j] == prev[j] && next[i] == prev[j]) {
                next[i] = prev[i];
                changed = true;
            }
        }

        if !changed {
            return next;
        }
    }
}

/// Run-length encodes a position sequence as [row, col, length] runs.
pub fn rle_encode(path: &[Vertex]) -> Vec<[usize; 3]> {
    let mut out: Vec<[usize; 3]> = Vec::new();
    for v in path {
        match out.last_mut() {
            Some(run) if run[0] == v.row && run[1] == v.col => run[2] += 1,
            _ => out.push([v.row, v.col, 1]),
        }
    }
    out
}

/// Inverse of [`rle_encode`].
pub fn rle_decode(runs: &[[usize; 3]]) -> Vec<Vertex> {
    runs.iter()
        .flat_map(|&[row, col, len]| std::iter::repeat_n(Vertex::new(row, col), len))
        .collect()
}

/// Stable fingerprint of everything that shapes an episode's behavior.
pub fn config_hash(
    policy: &PolicyConfig,
    steam: Option<&SteamConfig>,
    opts: &RunOptions,
) -> String {
    #[derive(Serialize)]
    struct View<'a> {
        policy: &'a PolicyConfig,
        steam: Option<&'a SteamConfig>,
        options: &'a RunOptions,
    }
    let text = serde_json::to_string(&View { policy, steam, options: opts })
        .expect("configs always serialize");
    format!("{:016x}", crate::util::fnv1a64(text.as_bytes()))
}

/// Mean crowding at one instant: the fraction of other agents within the
/// radius, averaged over agents.
fn instant_density(positions: &[Vertex], radius: usize, norm: DensityNorm) -> f64 {
    let n = positions.len();
    debug_assert!(n >= 2);
    let mut total = 0.0;
    for i in 0..n {
        let near = (0..n)
            .filter(|&j| j != i && norm.distance(&positions[i], &positions[j]) <= radius)
            .count();
        total += near as f64 / (n - 1) as f64;
    }
    total / n as f64
}

/// Crowding over one episode: positions after each executed step, averaged;
/// 0 for zero-length episodes.
fn episode_density(history: &[Vec<Vertex>], radius: usize, norm: DensityNorm) -> f64 {
    let steps = history.len() - 1;
    if steps == 0 {
        return 0.0;
    }
    history[1..].iter().map(|p| instant_density(p, radius, norm)).sum::<f64>() / steps as f64
}

/// Mean crowding across episodes. Each episode is a time-major position
/// history including the start state.
pub fn compute_density(
    episodes: &[Vec<Vec<Vertex>>],
    radius: usize,
    norm: DensityNorm,
) -> Result<f64, DensityError> {
    if episodes.is_empty() {
        return Err(DensityError::EmptyInput);
    }
    if episodes.iter().any(|h| h.first().is_none_or(|p| p.len() < 2)) {
        return Err(DensityError::SingleAgent);
    }
    let total: f64 = episodes.iter().map(|h| episode_density(h, radius, norm)).sum();
    Ok(total / episodes.len() as f64)
}

/// Runs one lockstep episode to success or the step limit.
///
/// With a correction config, heavy rounds run on their cadence and every
/// logit passes through the temporal and crowding deltas; without one the
/// bare policy acts on static cost channels. Identical inputs and seed
/// produce identical reports apart from the timing block.
pub fn run_episode(
    scenario: &Scenario,
    policy: &PolicyConfig,
    steam: Option<&SteamConfig>,
    episode_seed: u64,
    opts: &RunOptions,
) -> Result<EpisodeReport, EpisodeError> {
    policy.validate()?;
    if let Some(cfg) = steam {
        cfg.validate()?;
    }
    validate_scenario(scenario)?;

    let map = &scenario.map;
    let n = scenario.agents.len();
    let goals = scenario.goals();
    let score_radius = policy.window / 2;

    let setup_start = Instant::now();
    let base_weights: Vec<WeightField> = (0..n).map(|_| WeightField::uniform(map)).collect();
    let base_fields: Vec<CostField> = goals
        .iter()
        .zip(&base_weights)
        .map(|(&g, w)| compute_cost_field(map, w, g))
        .collect::<Result<_, _>>()?;
    let mut engine = steam.map(|cfg| SteamEngine::new(cfg.clone()));
    let mut external = match &policy.kind {
        PolicyKind::External { command, deadline_ms } => {
            Some(ExternalPolicy::spawn(command, Duration::from_millis(*deadline_ms))?)
        }
        PolicyKind::GreedyFollower => None,
    };
    let setup_us = setup_start.elapsed().as_micros() as u64;

    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let mut positions = scenario.starts();
    let mut last_off_goal: Vec<Option<usize>> = positions
        .iter()
        .zip(&goals)
        .map(|(p, g)| if p == g { None } else { Some(0) })
        .collect();
    let mut history: Vec<Vec<Vertex>> = vec![positions.clone()];
    let mut step_us = Vec::new();
    let mut steam_us = Vec::new();
    let mut trace_steps = Vec::new();
    let mut steps_executed = 0;

    for t in 0..scenario.max_steps {
        if positions.iter().zip(&goals).all(|(p, g)| p == g) {
            break;
        }
        let step_start = Instant::now();
        let mut steam_time = Duration::ZERO;

        let update = match engine.as_mut() {
            Some(eng) if eng.is_update_step(t) => {
                let s = Instant::now();
                eng.update(map, &positions, &goals, &base_weights, &base_fields, score_radius)?;
                steam_time += s.elapsed();
                true
            }
            _ => false,
        };

        let mut observations = Vec::with_capacity(n);
        for i in 0..n {
            let channel = match engine.as_ref() {
                Some(eng) => eng.cost_channel(map, i, positions[i], policy.window)?,
                None => {
                    local_channel(map, &base_fields[i], &base_weights[i], positions[i], policy.window)?
                }
            };
            observations.push(build_observation(map, &positions, i, goals[i], channel));
        }

        let mut logits: Vec<LogitVector> = match external.as_mut() {
            Some(ext) => {
                let mut raw = ext.query(t, &observations)?;
                for lv in &mut raw {
                    for x in &mut lv.0 {
                        if !x.is_finite() {
                            *x = -policy.blocked_logit;
                        }
                    }
                }
                raw
            }
            None => observations.iter().map(|o| greedy_logits(o, policy)).collect(),
        };

        let mut temporal_deltas = vec![LogitVector::zeros(); n];
        let mut emergent_deltas = vec![LogitVector::zeros(); n];
        if let Some(eng) = engine.as_ref() {
            let s = Instant::now();
            let sentinel = eng.cfg().sigma_excludes_blocked.then_some(policy.blocked_logit);
            let alpha = eng.cfg().alpha;
            for i in 0..n {
                if let Some(delta) = eng.temporal_delta(map, i, positions[i]) {
                    logits[i].add(&delta);
                    temporal_deltas[i] = delta;
                }
                let scores = eng.crowding_scores(map, i, &positions, &goals, score_radius);
                let delta = crate::steam::emergent_correction(&logits[i], &scores, alpha, sentinel);
                logits[i].add(&delta);
                emergent_deltas[i] = delta;
            }
            steam_time += s.elapsed();
        }

        let actions: Vec<Action> =
            logits.iter().map(|lv| select_action(lv, policy, &mut rng)).collect();
        let decision_us = step_start.elapsed().as_micros() as u64;

        let proposed: Vec<Vertex> = positions
            .iter()
            .zip(&actions)
            .map(|(&p, &a)| map.next_vertex(p, a))
            .collect();
        let resolved = resolve_moves(&positions, &proposed);
        debug_assert!(
            find_transition_conflicts(&positions, &resolved).unwrap().is_empty(),
            "arbitration must produce a conflict-free transition"
        );

        if opts.record_trace {
            trace_steps.push(StepTrace {
                step: t,
                update,
                positions: positions.clone(),
                actions: actions.iter().map(|a| a.name().to_string()).collect(),
                logits: logits.clone(),
                temporal_deltas,
                emergent_deltas,
                interventions: match (update, engine.as_ref()) {
                    (true, Some(eng)) => eng.interventions().to_vec(),
                    _ => Vec::new(),
                },
                assignments: match (update, engine.as_ref()) {
                    (true, Some(eng)) => eng.assignments(),
                    _ => Vec::new(),
                },
                reverted: resolved
                    .iter()
                    .zip(&proposed)
                    .zip(&positions)
                    .map(|((r, p), prev)| r != p && r == prev)
                    .collect(),
            });
        }

        for i in 0..n {
            if resolved[i] != goals[i] {
                last_off_goal[i] = Some(t + 1);
            }
        }
        positions = resolved;
        history.push(positions.clone());
        steps_executed = t + 1;
        step_us.push(decision_us);
        steam_us.push(steam_time.as_micros() as u64);
    }

    let success = positions.iter().zip(&goals).all(|(p, g)| p == g);
    let agent_costs: Vec<usize> = last_off_goal
        .iter()
        .map(|lo| lo.map_or(0, |tau| (tau + 1).min(steps_executed)))
        .collect();
    let makespan = agent_costs.iter().copied().max().unwrap_or(0);
    let sum_of_costs = agent_costs.iter().sum();
    let density = if n >= 2 {
        episode_density(&history, opts.density_radius, opts.density_norm)
    } else {
        0.0
    };
    let counts = engine.as_ref().map(|e| e.counts()).unwrap_or_default();
    let mean = |xs: &[u64]| {
        if xs.is_empty() { 0.0 } else { xs.iter().sum::<u64>() as f64 / xs.len() as f64 }
    };

    Ok(EpisodeReport {
        seed: episode_seed,
        config_hash: config_hash(policy, steam, opts),
        agents: n,
        steam_enabled: steam.is_some(),
        steam_noop: counts.spatial_interventions + counts.temporal_assignments == 0,
        success,
        makespan,
        sum_of_costs,
        agent_costs,
        steps_executed,
        density,
        arbitration: "priority-by-index".to_string(),
        cover_exact_always: engine.as_ref().map(|e| e.cover_exact_always()).unwrap_or(true),
        counts,
        trajectories_rle: opts.record_trajectories.then(|| {
            (0..n).map(|i| rle_encode(&history.iter().map(|p| p[i]).collect::<Vec<_>>())).collect()
        }),
        trace: (!trace_steps.is_empty()).then_some(EpisodeTrace { steps: trace_steps }),
        timing: EpisodeTiming {
            setup_us,
            mean_step_us: mean(&step_us),
            mean_steam_us: mean(&steam_us),
            step_us,
            steam_us,
        },
    })
}

/// A mean with its 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
}

fn mean_ci(values: &[f64]) -> MeanCi {
    MeanCi { mean: crate::util::mean(values), ci95: crate::util::ci95_half_width(values) }
}

/// Wall-clock aggregates; excluded from determinism comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateTiming {
    pub step_us: MeanCi,
    pub steam_us: MeanCi,
}

/// Summary statistics over one arm's episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmAggregate {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: MeanCi,
    pub makespan: MeanCi,
    pub sum_of_costs: MeanCi,
    pub density: MeanCi,
    pub steam_noop_episodes: usize,
    pub cover_exact_always: bool,
    pub timing: AggregateTiming,
}

/// Aggregates episode reports that share a configuration.
pub fn aggregate_reports(reports: &[EpisodeReport]) -> Result<ArmAggregate, AggregateError> {
    let first = reports.first().ok_or(AggregateError::EmptyInput)?;
    if let Some(other) = reports.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(AggregateError::MixedConfig {
            first: first.config_hash.clone(),
            second: other.config_hash.clone(),
        });
    }
    let collect = |f: fn(&EpisodeReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    Ok(ArmAggregate {
        episodes: reports.len(),
        successes: reports.iter().filter(|r| r.success).count(),
        success_rate: mean_ci(&collect(|r| if r.success { 1.0 } else { 0.0 })),
        makespan: mean_ci(&collect(|r| r.makespan as f64)),
        sum_of_costs: mean_ci(&collect(|r| r.sum_of_costs as f64)),
        density: mean_ci(&collect(|r| r.density)),
        steam_noop_episodes: reports.iter().filter(|r| r.steam_noop).count(),
        cover_exact_always: reports.iter().all(|r| r.cover_exact_always),
        timing: AggregateTiming {
            step_us: mean_ci(&collect(|r| r.timing.mean_step_us)),
            steam_us: mean_ci(&collect(|r| r.timing.mean_steam_us)),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AgentTask, GridMap};
    use proptest::prelude::*;

    fn v(r: usize, c: usize) -> Vertex {
        Vertex::new(r, c)
    }

    fn scenario(map: GridMap, tasks: &[(Vertex, Vertex)]) -> Scenario {
        Scenario {
            map,
            agents: tasks.iter().map(|&(start, goal)| AgentTask { start, goal }).collect(),
            seed: 0,
            max_steps: 256,
        }
    }

    #[test]
    fn same_target_goes_to_the_lower_index() {
        let prev = vec![v(0, 0), v(0, 2)];
        let proposed = vec![v(0, 1), v(0, 1)];
        assert_eq!(resolve_moves(&prev, &proposed), vec![v(0, 1), v(0, 2)]);
    }

    #[test]
    fn head_on_swap_reverts_both() {
        let prev = vec![v(0, 0), v(0, 1)];
        let proposed = vec![v(0, 1), v(0, 0)];
        assert_eq!(resolve_moves(&prev, &proposed), prev);
    }

    #[test]
    fn chains_move_together() {
        // Agent 0 wants agent 1's cell while agent 1 vacates it.
        let prev = vec![v(0, 0), v(0, 1)];
        let proposed = vec![v(0, 1), v(0, 2)];
        assert_eq!(resolve_moves(&prev, &proposed), proposed);
    }

    #[test]
    fn moving_onto_a_stationary_agent_reverts() {
        let prev = vec![v(0, 0), v(0, 1)];
        let proposed = vec![v(0, 1), v(0, 1)];
        assert_eq!(resolve_moves(&prev, &proposed), prev);
    }

    #[test]
    fn reverts_cascade_down_a_chain() {
        // 2 blocks 1, whose revert then blocks 0.
        let prev = vec![v(0, 0), v(0, 1), v(0, 2)];
        let proposed = vec![v(0, 1), v(0, 2), v(0, 2)];
        assert_eq!(resolve_moves(&prev, &proposed), prev);
    }

    #[test]
    fn four_cycle_rotation_is_allowed() {
        let prev = vec![v(0, 0), v(0, 1), v(1, 1), v(1, 0)];
        let proposed = vec![v(0, 1), v(1, 1), v(1, 0), v(0, 0)];
        assert_eq!(resolve_moves(&prev, &proposed), proposed);
    }

    #[test]
    fn rle_round_trips_and_compresses_rests() {
        let path = vec![v(0, 0), v(0, 1), v(0, 1), v(0, 1), v(1, 1)];
        let runs = rle_encode(&path);
        assert_eq!(runs, vec![[0, 0, 1], [0, 1, 3], [1, 1, 1]]);
        assert_eq!(rle_decode(&runs), path);
    }

    #[test]
    fn single_agent_walks_the_manhattan_distance() {
        let s = scenario(GridMap::open(8, 8), &[(v(0, 0), v(2, 3))]);
        let policy = PolicyConfig::default();
        let opts = RunOptions::default();
        let off = run_episode(&s, &policy, None, 1, &opts).unwrap();
        assert!(off.success);
        assert_eq!(off.makespan, 5);
        assert_eq!(off.sum_of_costs, 5);
        assert_eq!(off.steps_executed, 5);
        assert_eq!(off.density, 0.0);

        let on = run_episode(&s, &policy, Some(&SteamConfig::default()), 1, &opts).unwrap();
        assert!(on.steam_noop);
        assert_eq!(on.trajectories_rle, off.trajectories_rle);
        assert_eq!(on.makespan, off.makespan);
    }

    #[test]
    fn agent_starting_on_its_goal_costs_nothing() {
        let s = scenario(GridMap::open(4, 4), &[(v(1, 1), v(1, 1)), (v(0, 0), v(0, 3))]);
        let r = run_episode(&s, &PolicyConfig::default(), None, 3, &RunOptions::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.agent_costs, vec![0, 3]);
        assert_eq!(r.makespan, 3);
        assert_eq!(r.sum_of_costs, 3);
    }

    #[test]
    fn corridor_swap_fails_in_both_modes() {
        let map = GridMap::open(5, 1);
        let s = scenario(map, &[(v(0, 0), v(0, 4)), (v(0, 4), v(0, 0))]);
        let policy = PolicyConfig::default();
        let opts = RunOptions::default();
        let off = run_episode(&s, &policy, None, 9, &opts).unwrap();
        let on = run_episode(&s, &policy, Some(&SteamConfig::default()), 9, &opts).unwrap();
        for r in [&off, &on] {
            assert!(!r.success);
            assert_eq!(r.steps_executed, 256);
            assert_eq!(r.makespan, 256);
            assert_eq!(r.sum_of_costs, 512);
        }
        assert!(!on.steam_noop);
        assert!(on.counts.temporal_assignments > 0);
    }

    #[test]
    fn open_swap_succeeds_with_corrections_and_deadlocks_without() {
        let map = GridMap::open(3, 3);
        let s = scenario(map, &[(v(1, 0), v(1, 2)), (v(1, 2), v(1, 0))]);
        let policy = PolicyConfig::default();
        let opts = RunOptions { record_trace: true, ..RunOptions::default() };

        let off = run_episode(&s, &policy, None, 2, &opts).unwrap();
        assert!(!off.success);

        let on = run_episode(&s, &policy, Some(&SteamConfig::default()), 2, &opts).unwrap();
        assert!(on.success);
        assert_eq!(on.makespan, 4);
        // Agent 0 detours around the raised center cell.
        let path0 = rle_decode(&on.trajectories_rle.as_ref().unwrap()[0]);
        assert!(!path0.contains(&v(1, 1)));
        assert_eq!(*path0.last().unwrap(), v(1, 2));
        let trace = on.trace.as_ref().unwrap();
        assert!(trace.steps[0].update);
        assert_eq!(trace.steps[0].interventions.len(), 1);
        assert_eq!(trace.steps[0].interventions[0].vertex, v(1, 1));
    }

    #[test]
    fn reports_are_deterministic_apart_from_timing() {
        let map = GridMap::open(6, 6);
        let s = scenario(
            map,
            &[(v(0, 0), v(5, 5)), (v(5, 5), v(0, 0)), (v(0, 5), v(5, 0)), (v(5, 0), v(0, 5))],
        );
        let policy = PolicyConfig {
            selection: crate::observation::SelectionMode::Sample,
            ..PolicyConfig::default()
        };
        let steam = SteamConfig::default();
        let opts = RunOptions::default();
        let mut a = run_episode(&s, &policy, Some(&steam), 42, &opts).unwrap();
        let mut b = run_episode(&s, &policy, Some(&steam), 42, &opts).unwrap();
        a.timing = EpisodeTiming::default();
        b.timing = EpisodeTiming::default();
        assert_eq!(a, b);

        let c = run_episode(&s, &policy, Some(&steam), 43, &opts).unwrap();
        assert!(c.seed != a.seed);
    }

    #[test]
    fn adjacent_pair_has_unit_density() {
        // Two agents that start adjacent and stay adjacent while moving.
        let map = GridMap::open(6, 2);
        let s = scenario(map, &[(v(0, 0), v(0, 5)), (v(1, 0), v(1, 5))]);
        let r = run_episode(&s, &PolicyConfig::default(), None, 7, &RunOptions::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.density, 1.0);
    }

    #[test]
    fn distant_pair_has_zero_density() {
        let map = GridMap::open(3, 20);
        let s = scenario(map, &[(v(0, 0), v(0, 2)), (v(19, 0), v(19, 2))]);
        let r = run_episode(&s, &PolicyConfig::default(), None, 7, &RunOptions::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.density, 0.0);
    }

    #[test]
    fn density_over_episodes_averages_and_rejects_singletons() {
        let near = vec![vec![v(0, 0), v(0, 1)], vec![v(0, 0), v(0, 1)]];
        let far = vec![vec![v(0, 0), v(9, 9)], vec![v(0, 0), v(9, 9)]];
        let rho = compute_density(&[near.clone(), far], 5, DensityNorm::Chebyshev).unwrap();
        assert!((rho - 0.5).abs() < 1e-12);
        assert_eq!(
            compute_density(&[vec![vec![v(0, 0)]]], 5, DensityNorm::Chebyshev),
            Err(DensityError::SingleAgent)
        );
        assert_eq!(
            compute_density(&[], 5, DensityNorm::Chebyshev),
            Err(DensityError::EmptyInput)
        );
    }

    #[test]
    fn manhattan_norm_is_stricter_than_chebyshev() {
        let positions = vec![v(0, 0), v(3, 3)];
        assert_eq!(instant_density(&positions, 3, DensityNorm::Chebyshev), 1.0);
        assert_eq!(instant_density(&positions, 3, DensityNorm::Manhattan), 0.0);
    }

    #[test]
    fn trace_is_gated_by_the_flag() {
        let s = scenario(GridMap::open(4, 4), &[(v(0, 0), v(3, 3))]);
        let policy = PolicyConfig::default();
        let without =
            run_episode(&s, &policy, None, 1, &RunOptions::default()).unwrap();
        assert!(without.trace.is_none());
        let opts = RunOptions { record_trace: true, ..RunOptions::default() };
        let with = run_episode(&s, &policy, None, 1, &opts).unwrap();
        let trace = with.trace.unwrap();
        assert_eq!(trace.steps.len(), with.steps_executed);
        assert_eq!(trace.steps[0].actions.len(), 1);
    }

    #[test]
    fn invalid_scenario_is_rejected() {
        let mut map = GridMap::open(3, 3);
        map = GridMap::new(3, 3, {
            let mut blocked = vec![false; 9];
            blocked[map.idx(v(1, 1))] = true;
            blocked
        });
        let s = scenario(map, &[(v(1, 1), v(0, 0))]);
        let err = run_episode(&s, &PolicyConfig::default(), None, 0, &RunOptions::default());
        assert!(matches!(err, Err(EpisodeError::Scenario(ScenarioError::StartOnObstacle { .. }))));
    }

    #[test]
    fn aggregation_summarizes_and_rejects_mixtures() {
        let s = scenario(GridMap::open(8, 8), &[(v(0, 0), v(2, 3)), (v(7, 7), v(5, 4))]);
        let policy = PolicyConfig::default();
        let opts = RunOptions::default();
        let reports: Vec<EpisodeReport> = (0..4)
            .map(|seed| run_episode(&s, &policy, None, seed, &opts).unwrap())
            .collect();
        let agg = aggregate_reports(&reports).unwrap();
        assert_eq!(agg.episodes, 4);
        assert_eq!(agg.successes, 4);
        assert_eq!(agg.success_rate.mean, 1.0);
        assert_eq!(agg.success_rate.ci95, 0.0);
        assert_eq!(agg.makespan.mean, 5.0);
        assert_eq!(agg.makespan.ci95, 0.0);

        assert_eq!(aggregate_reports(&[]).unwrap_err(), AggregateError::EmptyInput);

        let mut mixed = reports.clone();
        mixed[3].config_hash = "feedfacefeedface".into();
        assert!(matches!(
            aggregate_reports(&mixed).unwrap_err(),
            AggregateError::MixedConfig { .. }
        ));
    }

    #[test]
    fn success_ratio_matches_the_example() {
        let s = scenario(GridMap::open(5, 1), &[(v(0, 0), v(0, 4)), (v(0, 4), v(0, 0))]);
        let ok = scenario(GridMap::open(8, 8), &[(v(0, 0), v(2, 3)), (v(7, 7), v(5, 4))]);
        let policy = PolicyConfig::default();
        let opts = RunOptions::default();
        let mut reports: Vec<EpisodeReport> =
            (0..3).map(|seed| run_episode(&ok, &policy, None, seed, &opts).unwrap()).collect();
        reports.push(run_episode(&s, &policy, None, 3, &opts).unwrap());
        // Hashes agree (same configs), scenarios differ — aggregation only
        // keys on config.
        let agg = aggregate_reports(&reports).unwrap();
        assert_eq!(agg.success_rate.mean, 0.75);
    }

    fn arbitrary_transition(n: usize, seed: u64) -> (Vec<Vertex>, Vec<Vertex>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let map = GridMap::open(5, 5);
        let mut prev = Vec::new();
        while prev.len() < n {
            let cand = v(rng.random_range(0..5), rng.random_range(0..5));
            if !prev.contains(&cand) {
                prev.push(cand);
            }
        }
        let proposed: Vec<Vertex> = prev
            .iter()
            .map(|&p| {
                let a = Action::from_index(rng.random_range(0..5)).unwrap();
                map.next_vertex(p, a)
            })
            .collect();
        (prev, proposed)
    }

    proptest! {
        /// Arbitration output is conflict-free, idempotent, and never moves
        /// an agent that proposed staying.
        #[test]
        fn arbitration_invariants(seed in 0u64..400) {
            let (prev, proposed) = arbitrary_transition(8, seed);
            let resolved = resolve_moves(&prev, &proposed);
            prop_assert!(find_transition_conflicts(&prev, &resolved).unwrap().is_empty());
            let again = resolve_moves(&prev, &resolved);
            prop_assert_eq!(again, resolved.clone());
            for i in 0..prev.len() {
                if proposed[i] == prev[i] {
                    prop_assert_eq!(resolved[i], prev[i]);
                }
                prop_assert!(resolved[i] == proposed[i] || resolved[i] == prev[i]);
            }
        }

        /// Run-length encoding round-trips arbitrary paths.
        #[test]
        fn rle_round_trip(steps in proptest::collection::vec(0usize..5, 0..40)) {
            let mut path = vec![v(2, 2)];
            let map = GridMap::open(5, 5);
            for s in steps {
                let a = Action::from_index(s).unwrap();
                let next = map.next_vertex(*path.last().unwrap(), a);
                path.push(next);
            }
            prop_assert_eq!(rle_decode(&rle_encode(&path)), path);
        }

        /// Episode metrics satisfy their definitional relations on random
        /// multi-agent runs.
        #[test]
        fn metric_relations_hold(seed in 0u64..25) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let map = GridMap::open(6, 6);
            let mut cells: Vec<Vertex> = Vec::new();
            while cells.len() < 8 {
                let cand = v(rng.random_range(0..6), rng.random_range(0..6));
                if !cells.contains(&cand) {
                    cells.push(cand);
                }
            }
            let tasks: Vec<(Vertex, Vertex)> =
                (0..4).map(|i| (cells[i], cells[i + 4])).collect();
            let s = scenario(map, &tasks);
            let r = run_episode(&s, &PolicyConfig::default(), Some(&SteamConfig::default()), seed, &RunOptions::default()).unwrap();
            prop_assert_eq!(r.makespan, *r.agent_costs.iter().max().unwrap());
            prop_assert_eq!(r.sum_of_costs, r.agent_costs.iter().sum::<usize>());
            prop_assert!(r.sum_of_costs >= r.makespan);
            prop_assert!(r.makespan <= r.steps_executed);
            prop_assert!((0.0..=1.0).contains(&r.density));
            if r.success {
                prop_assert!(r.steps_executed <= s.max_steps);
            } else {
                prop_assert_eq!(r.steps_executed, s.max_steps);
            }
            // Post-hoc feasibility of the recorded trajectories.
            let paths: Vec<Vec<Vertex>> = r
                .trajectories_rle
                .as_ref()
                .unwrap()
                .iter()
                .map(|runs| rle_decode(runs))
                .collect();
            for t in 1..paths[0].len() {
                let before: Vec<Vertex> = paths.iter().map(|p| p[t - 1]).collect();
                let after: Vec<Vertex> = paths.iter().map(|p| p[t]).collect();
                prop_assert!(find_transition_conflicts(&before, &after).unwrap().is_empty());
            }
        }
    }
}
