//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use steam_mapf_core::bench::{run_bench, to_csv, ArmSelection, BenchConfig, BenchReport, ScenarioSource};
use steam_mapf_core::executor::{run_episode, RunOptions};
use steam_mapf_core::grid::{load_scenario, save_scenario};
use steam_mapf_core::observation::PolicyConfig;
use steam_mapf_core::scen_gen::{generate, GenSpec, MapFamily};
use steam_mapf_core::steam::SteamConfig;

use crate::errors::{config_parse_error, data_parse_error, io_error, CliError};

#[derive(Parser)]
#[command(
    name = "steam-mapf",
    version,
    about = "Grid multi-agent path-finding runner with congestion-corrected policies"
)]
pub struct Cli {
    /// Worker threads for benchmarks (default: STEAM_MAPF_JOBS or all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate seeded scenario files.
    Gen(GenArgs),
    /// Run one episode and print its report.
    Run(RunArgs),
    /// Run a paired with/without-corrections benchmark.
    Bench(BenchArgs),
    /// Render a benchmark report as CSV or a table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Random,
    Maze,
    Warehouse,
}

impl From<FamilyArg> for MapFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Random => MapFamily::Random,
            FamilyArg::Maze => MapFamily::Maze,
            FamilyArg::Warehouse => MapFamily::Warehouse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SteamToggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArmsArg {
    Both,
    On,
    Off,
}

impl From<ArmsArg> for ArmSelection {
    fn from(a: ArmsArg) -> Self {
        match a {
            ArmsArg::Both => ArmSelection::Both,
            ArmsArg::On => ArmSelection::On,
            ArmsArg::Off => ArmSelection::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Table,
}

/// Map-family flags shared by `gen` and config-free `bench`.
#[derive(Args)]
pub struct SpecArgs {
    /// Map family.
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    /// Square map side; shorthand for --width and --height.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Target obstacle density for random and maze maps.
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    /// Number of agents.
    #[arg(long, default_value_t = 8)]
    pub agents: usize,
    /// Episode step limit written into scenarios.
    #[arg(long, default_value_t = 256)]
    pub max_steps: usize,
}

impl SpecArgs {
    fn spec(&self, seed: u64) -> GenSpec {
        GenSpec {
            family: self.family.into(),
            width: self.width.or(self.size),
            height: self.height.or(self.size),
            obstacle_density: self.density,
            agent_count: self.agents,
            seed,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// How many scenario files to produce; file i uses seed ^ i.
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RunArgs {
    /// Scenario file to execute.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Optional JSON config with policy/steam/options sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Whether the congestion corrections are active.
    #[arg(long, value_enum, default_value_t = SteamToggle::On)]
    pub steam: SteamToggle,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Record the per-step debugging trace in the report.
    #[arg(long)]
    pub trace: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Benchmark config file; omit it to describe generated scenarios with
    /// the map-family flags.
    #[arg(long, conflicts_with = "family")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub spec: Option<SpecArgs>,
    /// Override the configured episode count.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Override the configured master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Which arms to run.
    #[arg(long, value_enum)]
    pub arms: Option<ArmsArg>,
    /// Output directory for bench_report.json and summary.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// A bench_report.json produced by the bench command.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Per-episode config file schema for `run`: any section may be omitted.
#[derive(Default, Deserialize)]
#[serde(default)]
struct RunFileConfig {
    policy: PolicyConfig,
    steam: SteamConfig,
    options: RunOptions,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Run(args) => cmd_run(args),
        Command::Bench(args) => cmd_bench(args, resolve_jobs(cli.jobs)),
        Command::Report(args) => cmd_report(args),
    }
}

/// Flag, then STEAM_MAPF_JOBS, then 0 (library default).
fn resolve_jobs(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("STEAM_MAPF_JOBS").ok().and_then(|v| v.parse().ok())
    })
    .unwrap_or(0)
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    if args.episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    for i in 0..args.episodes {
        let spec = args.spec.spec(args.seed ^ i as u64);
        let scenario = generate(&spec)?;
        let stem = format!("ep{i:04}");
        let scen_path = args.out.join(format!("{stem}.scen.json"));
        save_scenario(&scenario, &scen_path, &format!("{stem}.map"))?;
    }
    println!("wrote {} scenario file pair(s) to {}", args.episodes, args.out.display());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let file_cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            serde_json::from_str::<RunFileConfig>(&text)
                .map_err(|e| config_parse_error(path, e))?
        }
        None => RunFileConfig::default(),
    };
    let scenario = load_scenario(&args.scenario)?;
    let options = RunOptions { record_trace: args.trace, ..file_cfg.options };
    let steam = match args.steam {
        SteamToggle::On => Some(&file_cfg.steam),
        SteamToggle::Off => None,
    };
    let report = run_episode(&scenario, &file_cfg.policy, steam, args.seed, &options)?;
    let json = serde_json::to_string_pretty(&report).expect("reports always serialize");
    write_or_print(args.out.as_deref(), &json)
}

fn cmd_bench(args: BenchArgs, jobs: usize) -> Result<(), CliError> {
    let mut config = match (&args.config, &args.spec) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            serde_json::from_str::<BenchConfig>(&text).map_err(|e| config_parse_error(path, e))?
        }
        (None, Some(spec)) => BenchConfig {
            source: ScenarioSource::Generated { spec: spec.spec(0) },
            policy: PolicyConfig::default(),
            steam: SteamConfig::default(),
            options: RunOptions::default(),
            episodes: 128,
            master_seed: 0,
            arms: ArmSelection::Both,
        },
        (None, None) => {
            return Err(CliError::Usage(
                "bench needs either --config or the map-family flags (--family ...)".into(),
            ))
        }
    };
    if let Some(episodes) = args.episodes {
        config.episodes = episodes;
    }
    if let Some(seed) = args.seed {
        config.master_seed = seed;
        // Generated sources follow the master seed unless a config file
        // pinned their own.
        if args.config.is_none() {
            if let ScenarioSource::Generated { spec } = &mut config.source {
                spec.seed = seed;
            }
        }
    }
    if let Some(arms) = args.arms {
        config.arms = arms.into();
    }

    let report = run_bench(&config, jobs)?;

    fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    let json_path = args.out.join("bench_report.json");
    let json = serde_json::to_string_pretty(&report).expect("reports always serialize");
    fs::write(&json_path, json + "\n").map_err(|e| io_error(&json_path, e))?;
    let csv_path = args.out.join("summary.csv");
    let csv = to_csv(&report);
    fs::write(&csv_path, &csv).map_err(|e| io_error(&csv_path, e))?;

    print!("{}", render_table(&report));
    println!("report: {}", json_path.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.input).map_err(|e| io_error(&args.input, e))?;
    let report: BenchReport =
        serde_json::from_str(&text).map_err(|e| data_parse_error(&args.input, e))?;
    let rendered = match args.format {
        ReportFormat::Csv => to_csv(&report),
        ReportFormat::Table => render_table(&report),
    };
    write_or_print(args.out.as_deref(), rendered.trim_end())
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            fs::write(path, format!("{content}\n")).map_err(|e| io_error(path, e))
        }
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn render_table(report: &BenchReport) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>16} {:>16} {:>16} {:>16} {:>12}\n",
        "arm", "episodes", "success", "makespan", "sum_of_costs", "density", "step_us"
    );
    let cell = |m: f64, ci: f64| format!("{m:.3} ±{ci:.3}");
    for (name, arm) in
        [("baseline", &report.baseline), ("steam", &report.steam)]
    {
        if let Some(arm) = arm {
            let a = &arm.aggregate;
            out.push_str(&format!(
                "{:<10} {:>8} {:>16} {:>16} {:>16} {:>16} {:>12.1}\n",
                name,
                a.episodes,
                cell(a.success_rate.mean, a.success_rate.ci95),
                cell(a.makespan.mean, a.makespan.ci95),
                cell(a.sum_of_costs.mean, a.sum_of_costs.ci95),
                cell(a.density.mean, a.density.ci95),
                a.timing.step_us.mean,
            ));
        }
    }
    if let Some(d) = &report.delta {
        out.push_str(&format!(
            "{:<10} {:>8} {:>16} {:>16} {:>16} {:>16} {:>12}\n",
            "delta",
            report.episode_seeds.len(),
            format!("{:+.3}", d.success_rate),
            format!("{:+.3}", d.mean_makespan),
            format!("{:+.3}", d.mean_sum_of_costs),
            format!("{:+.4}", d.mean_density),
            "-",
        ));
        out.push_str(&format!(
            "paired success delta: {:+} episode(s)\n",
            d.success_count
        ));
    }
    out
}
