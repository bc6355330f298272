//! `cimax` command-line runner.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when a
//! run fails after its configuration was accepted.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cimax_core::scenarios::{
    self, output_file_name, run_alternating, run_lab_replication, run_success_sweep, run_trajectory, run_vector_field,
    ScenarioError,
};
use cimax_core::swarm::SwarmError;
use cimax_core::ScenarioConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "cimax",
    version,
    about = "Simulate variance-seeking swarms and write CSV results"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One seeded run: center-of-mass path, diversity and per-agent decisions.
    Trajectory {
        #[command(flatten)]
        common: Common,
        /// Also write the final world state as `snapshot.json`.
        #[arg(long)]
        snapshot: bool,
    },
    /// Success rate and mean success time over start positions.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Preferred direction of a stationary swarm at each grid point.
    Vectorfield {
        #[command(flatten)]
        common: Common,
    },
    /// Four agents on a line under binary light patterns.
    Lab {
        #[command(flatten)]
        common: Common,
    },
    /// Check a configuration without running it.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Print the fully resolved configuration as TOML.
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML scenario file; keys it leaves out take the preset's values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario used as the base configuration.
    #[arg(long, value_enum, default_value_t = Preset::Discrete)]
    preset: Preset,
    #[arg(long, env = "CIMAX_SEED", default_value_t = 1)]
    seed: u64,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Runs per start position (sweep) or repeats per pattern (lab).
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads for sweeps and vector fields.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Discrete,
    Gradient,
    Cloud,
}

impl Preset {
    fn config(self) -> ScenarioConfig {
        match self {
            Preset::Discrete => ScenarioConfig::discrete(),
            Preset::Gradient => ScenarioConfig::gradient(),
            Preset::Cloud => ScenarioConfig::cloud(),
        }
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Config(_)
            | ScenarioError::Swarm(SwarmError::Infeasible { .. })
            | ScenarioError::Swarm(SwarmError::TooFewAgents(_))
            | ScenarioError::Swarm(SwarmError::Protocol(_)) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Overlays `user` on `base`. Tables merge key by key, except `field`,
/// which is replaced whole because its keys depend on the field kind.
fn merge(base: &mut toml::Table, user: toml::Table, depth: usize) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !(depth == 0 && key == "field") => {
                merge(b, u, depth + 1)
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn load_config(common: &Common) -> Result<ScenarioConfig, Failure> {
    let mut config = common.preset.config();
    if let Some(path) = &common.config {
        let text =
            fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let describe = |e: toml::de::Error| Failure::Config(format!("{}: {e}", path.display()));
        // Deserializing the file on its own reports schema errors with line numbers.
        toml::from_str::<ScenarioConfig>(&text).map_err(describe)?;
        let user: toml::Table = toml::from_str(&text).map_err(describe)?;
        let mut base = toml::Table::try_from(&config).map_err(|e| Failure::Runtime(e.to_string()))?;
        merge(&mut base, user, 0);
        config = toml::Value::Table(base).try_into().map_err(describe)?;
    }
    if let Some(runs) = common.runs {
        config.sweep.runs = runs;
        config.lab.repeats = runs;
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: String,
    files: Vec<String>,
    config: &'a ScenarioConfig,
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Writes into a temporary file in the output directory and renames it
    /// into place, so readers never see a partial file.
    fn write<F>(&mut self, name: &str, fill: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut BufWriter<&mut fs::File>) -> Result<(), ScenarioError>,
    {
        let target = self.dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| io_failure(&self.dir, e))?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w).map_err(|e| Failure::Runtime(e.to_string()))?;
            w.flush().map_err(|e| io_failure(&target, e))?;
        }
        tmp.persist(&target).map_err(|e| io_failure(&target, e.error))?;
        log::info!("wrote {}", target.display());
        self.files.push(name.to_string());
        Ok(())
    }

    fn finish(mut self, command: &str, seed: u64, config: &ScenarioConfig) -> Result<(), Failure> {
        let files = self.files.clone();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash: config.hash(),
            files,
            config,
        };
        self.write(&format!("{command}_manifest.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &manifest)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Trajectory { common, snapshot } => {
            let config = load_config(&common)?;
            let result = run_trajectory(&config, common.seed)?;
            let mut out = Output::new(&common.out)?;
            out.write(&output_file_name("trajectory", &config), |w| {
                scenarios::write_trajectory_csv(w, &result)
            })?;
            out.write("decisions.csv", |w| scenarios::write_decisions_csv(w, &result))?;
            if config.run.agent_log {
                out.write("agent_log.csv", |w| scenarios::write_agent_log_csv(w, &result))?;
            }
            if snapshot {
                let world = result
                    .world
                    .as_ref()
                    .ok_or_else(|| Failure::Runtime("run produced no final state".into()))?;
                out.write("snapshot.json", |w| {
                    serde_json::to_writer_pretty(&mut *w, world)?;
                    writeln!(w)?;
                    Ok(())
                })?;
            }
            if let Some(success) = result.success {
                println!(
                    "success: {}{}",
                    success.success,
                    success.time.map(|t| format!(" at t={t}")).unwrap_or_default()
                );
            }
            out.finish("trajectory", common.seed, &config)
        }
        Command::Sweep { common } => {
            let config = load_config(&common)?;
            let sweep = run_success_sweep(&config, common.seed, common.jobs)?;
            let mut out = Output::new(&common.out)?;
            out.write(&output_file_name("sweep", &config), |w| {
                scenarios::write_sweep_csv(w, &sweep)
            })?;
            out.write("sweep_runs.csv", |w| scenarios::write_sweep_runs_csv(w, &sweep))?;
            for row in &sweep.rows {
                println!(
                    "x_init {:>6.2}: {}/{} successes, mean time {}",
                    row.x_init,
                    row.successes,
                    row.runs,
                    row.mean_success_time
                        .map(|t| format!("{t:.2}"))
                        .unwrap_or_else(|| "-".into())
                );
            }
            out.finish("sweep", common.seed, &config)
        }
        Command::Vectorfield { common } => {
            let config = load_config(&common)?;
            let rows = run_vector_field(&config, common.seed, common.jobs)?;
            let mut out = Output::new(&common.out)?;
            out.write(&output_file_name("vectorfield", &config), |w| {
                scenarios::write_vector_csv(w, &rows)
            })?;
            println!("{} grid points", rows.len());
            out.finish("vectorfield", common.seed, &config)
        }
        Command::Lab { common } => {
            let config = load_config(&common)?;
            let trials = run_lab_replication(&config.lab, common.seed)?;
            let alternating = run_alternating(&config.lab, common.seed)?;
            let mut out = Output::new(&common.out)?;
            out.write(&output_file_name("lab", &config), |w| {
                scenarios::write_lab_csv(w, &trials, &alternating)
            })?;
            println!(
                "{}/{} pattern trials correct, {}/{} alternations correct",
                trials.iter().filter(|t| t.correct).count(),
                trials.len(),
                alternating.iter().filter(|t| t.success).count(),
                alternating.len()
            );
            out.finish("lab", common.seed, &config)
        }
        Command::Validate { common, print_config } => {
            let config = load_config(&common)?;
            config.validate_with_placement(common.seed)?;
            if print_config {
                let text = toml::to_string_pretty(&config).map_err(|e| Failure::Runtime(e.to_string()))?;
                print!("{text}");
            } else {
                println!("ok {} {}", config.kind_label(), config.hash());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            let _ = writeln!(io::stderr(), "error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            let _ = writeln!(io::stderr(), "error: {msg}");
            ExitCode::from(2)
        }
    }
}
