//! Seeded A/B benchmarking: the same episodes with and without the
//! congestion corrections, paired by seed.

use crate::executor::{
    aggregate_reports, run_episode, AggregateError, ArmAggregate, EpisodeError, EpisodeReport,
    RunOptions,
};
use crate::grid::{load_scenario, Scenario, ScenarioIoError};
use crate::observation::PolicyConfig;
use crate::scen_gen::{generate, GenError, GenSpec};
use crate::steam::SteamConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

/// Where episode scenarios come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioSource {
    /// Explicit scenario files, cycled when there are fewer files than
    /// episodes.
    Files { paths: Vec<PathBuf> },
    /// Freshly generated per episode; episode `i` uses seed `spec.seed ^ i`.
    Generated { spec: GenSpec },
}

/// Which arms to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmSelection {
    Both,
    On,
    Off,
}

fn default_episodes() -> usize {
    128
}

fn default_arms() -> ArmSelection {
    ArmSelection::Both
}

/// The full benchmark configuration, also the on-disk config file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub source: ScenarioSource,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// Correction settings for the enabled arm.
    #[serde(default)]
    pub steam: SteamConfig,
    #[serde(default)]
    pub options: RunOptions,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_arms")]
    pub arms: ArmSelection,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), crate::InvalidConfig> {
        if self.episodes == 0 {
            return Err(crate::InvalidConfig("episodes must be at least 1".into()));
        }
        match &self.source {
            ScenarioSource::Files { paths } if paths.is_empty() => {
                return Err(crate::InvalidConfig("scenario source lists no files".into()))
            }
            ScenarioSource::Files { .. } => {}
            ScenarioSource::Generated { spec } => spec.validate()?,
        }
        self.policy.validate()?;
        self.steam.validate()?;
        Ok(())
    }

    /// The seed driving episode `index` in both arms.
    pub fn episode_seed(&self, index: usize) -> u64 {
        self.master_seed ^ index as u64
    }
}

/// One arm's aggregate plus its per-episode reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub aggregate: ArmAggregate,
    pub episodes: Vec<EpisodeReport>,
}

/// Per-metric paired differences, corrections-on minus corrections-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    /// How many more episodes succeed with corrections on.
    pub success_count: i64,
    pub success_rate: f64,
    pub mean_makespan: f64,
    pub mean_sum_of_costs: f64,
    pub mean_density: f64,
}

/// The complete benchmark output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Fingerprint of the whole benchmark configuration.
    pub config_hash: String,
    pub config: BenchConfig,
    pub episode_seeds: Vec<u64>,
    pub baseline: Option<ArmResult>,
    pub steam: Option<ArmResult>,
    pub delta: Option<PairedDelta>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] crate::InvalidConfig),
    #[error(transparent)]
    Io(#[from] ScenarioIoError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error("episode {index} failed: {source}")]
    Episode {
        index: usize,
        #[source]
        source: EpisodeError,
    },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("could not build the worker pool: {0}")]
    Pool(String),
}

enum Episodes {
    Loaded(Vec<Scenario>),
    Specs(GenSpec),
}

impl Episodes {
    fn scenario(&self, index: usize) -> Result<Scenario, BenchError> {
        match self {
            Episodes::Loaded(all) => Ok(all[index % all.len()].clone()),
            Episodes::Specs(spec) => {
                let per_episode = GenSpec { seed: spec.seed ^ index as u64, ..spec.clone() };
                Ok(generate(&per_episode)?)
            }
        }
    }
}

/// Runs the configured benchmark. `jobs` bounds worker threads; 0 uses the
/// runtime default. Both arms see identical scenarios and episode seeds,
/// and episode order in the report follows episode index.
pub fn run_bench(config: &BenchConfig, jobs: usize) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let episodes = match &config.source {
        ScenarioSource::Files { paths } => {
            let loaded: Vec<Scenario> =
                paths.iter().map(|p| load_scenario(p)).collect::<Result<_, _>>()?;
            Episodes::Loaded(loaded)
        }
        ScenarioSource::Generated { spec } => Episodes::Specs(spec.clone()),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;

    let run_arm = |steam: Option<&SteamConfig>| -> Result<ArmResult, BenchError> {
        let reports: Vec<EpisodeReport> = pool.install(|| {
            (0..config.episodes)
                .into_par_iter()
                .map(|i| {
                    let scenario = episodes.scenario(i)?;
                    run_episode(
                        &scenario,
                        &config.policy,
                        steam,
                        config.episode_seed(i),
                        &config.options,
                    )
                    .map_err(|source| BenchError::Episode { index: i, source })
                })
                .collect::<Result<_, _>>()
        })?;
        let aggregate = aggregate_reports(&reports)?;
        Ok(ArmResult { aggregate, episodes: reports })
    };

    let baseline = match config.arms {
        ArmSelection::Both | ArmSelection::Off => Some(run_arm(None)?),
        ArmSelection::On => None,
    };
    let steam = match config.arms {
        ArmSelection::Both | ArmSelection::On => Some(run_arm(Some(&config.steam))?),
        ArmSelection::Off => None,
    };

    let delta = match (&baseline, &steam) {
        (Some(off), Some(on)) => Some(paired_delta(&off.episodes, &on.episodes)),
        _ => None,
    };

    let config_text = serde_json::to_string(config).expect("configs always serialize");
    Ok(BenchReport {
        config_hash: format!("{:016x}", crate::util::fnv1a64(config_text.as_bytes())),
        config: config.clone(),
        episode_seeds: (0..config.episodes).map(|i| config.episode_seed(i)).collect(),
        baseline,
        steam,
        delta,
    })
}

fn paired_delta(off: &[EpisodeReport], on: &[EpisodeReport]) -> PairedDelta {
    debug_assert_eq!(off.len(), on.len());
    let n = off.len() as f64;
    let successes =
        |arm: &[EpisodeReport]| arm.iter().filter(|r| r.success).count() as i64;
    let mean_diff = |f: fn(&EpisodeReport) -> f64| -> f64 {
        on.iter().zip(off).map(|(a, b)| f(a) - f(b)).sum::<f64>() / n
    };
    PairedDelta {
        success_count: successes(on) - successes(off),
        success_rate: (successes(on) - successes(off)) as f64 / n,
        mean_makespan: mean_diff(|r| r.makespan as f64),
        mean_sum_of_costs: mean_diff(|r| r.sum_of_costs as f64),
        mean_density: mean_diff(|r| r.density),
    }
}

/// Renders the summary table: one row per executed arm, one delta row when
/// both ran.
pub fn to_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "arm,episodes,success_rate,success_ci95,mean_makespan,makespan_ci95,\
         mean_sum_of_costs,sum_of_costs_ci95,mean_density,density_ci95,\
         mean_step_us,mean_steam_us\n",
    );
    let mut row = |name: &str, arm: &ArmResult| {
        let a = &arm.aggregate;
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.3},{:.3},{:.3},{:.3},{:.6},{:.6},{:.1},{:.1}\n",
            name,
            a.episodes,
            a.success_rate.mean,
            a.success_rate.ci95,
            a.makespan.mean,
            a.makespan.ci95,
            a.sum_of_costs.mean,
            a.sum_of_costs.ci95,
            a.density.mean,
            a.density.ci95,
            a.timing.step_us.mean,
            a.timing.steam_us.mean,
        ));
    };
    if let Some(arm) = &report.baseline {
        row("baseline", arm);
    }
    if let Some(arm) = &report.steam {
        row("steam", arm);
    }
    if let Some(d) = &report.delta {
        out.push_str(&format!(
            "delta,{},{:.6},,{:.3},,{:.3},,{:.6},,,\n",
            report.episode_seeds.len(),
            d.success_rate,
            d.mean_makespan,
            d.mean_sum_of_costs,
            d.mean_density,
        ));
    }
    out
}

/// Strips every `timing` object from a JSON tree, leaving only
/// deterministic content. Used by determinism comparisons.
pub fn scrub_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timing");
            for v in map.values_mut() {
                scrub_timing(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                scrub_timing(v);
            }
        }
        _ => {}
    }
}
