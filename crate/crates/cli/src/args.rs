//! Command-line definitions and the config-file merge.
//!
//! Precedence: flags > config file > environment > built-in defaults. The
//! config file holds `name = value` lines using the same names as the long
//! flags; keys that do not apply to the invoked subcommand are ignored.

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "drivesim",
    version,
    about = "Differentiable 2D multi-agent driving simulator: fit, render, train, roll out, evaluate."
)]
pub struct Cli {
    /// Root random seed; every stochastic result derives from it.
    #[arg(long, global = true, default_value_t = 0, env = "DRIVESIM_SEED")]
    pub seed: u64,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0, env = "DRIVESIM_THREADS")]
    pub threads: usize,

    /// Log verbosity: error, warn, info, debug.
    #[arg(
        long,
        global = true,
        default_value = "info",
        env = "DRIVESIM_LOG_LEVEL"
    )]
    pub log_level: String,

    /// Config file with `name = value` lines mirroring the long flags.
    #[arg(long, global = true, env = "DRIVESIM_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KinematicModeArg {
    Bicycle,
    Unconstrained,
    Displacement,
    OrientedUnconstrained,
    OrientedDisplacement,
}

impl KinematicModeArg {
    pub fn to_mode(self) -> drivesim::kinematics::KinematicMode {
        use drivesim::kinematics::KinematicMode as M;
        match self {
            KinematicModeArg::Bicycle => M::Bicycle,
            KinematicModeArg::Unconstrained => M::Unconstrained,
            KinematicModeArg::Displacement => M::Displacement,
            KinematicModeArg::OrientedUnconstrained => M::OrientedUnconstrained,
            KinematicModeArg::OrientedDisplacement => M::OrientedDisplacement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainModeArg {
    ClassmatesForcing,
    BlankFuture,
    TeacherForced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RolloutModeArg {
    Generative,
    BlankFuture,
    TeacherForced,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Recover bicycle actions from recorded tracks and grid-search each
    /// vehicle's rear-axle distance.
    FitKinematics {
        /// Track CSV.
        #[arg(long)]
        tracks: PathBuf,
        /// Expected grid step in seconds (validated against the file).
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        /// Output CSV of per-vehicle (l_r, fit_loss) rows.
        #[arg(long)]
        out: PathBuf,
    },

    /// Render one ego-centered birdview frame to a PNG.
    Render {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Frame id to render.
        #[arg(long)]
        frame: u64,
        /// Track id of the ego agent.
        #[arg(long)]
        ego: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use the hard reference rasterizer instead of the soft one.
        #[arg(long, default_value_t = false)]
        hard: bool,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        /// Meters covered by the image.
        #[arg(long, default_value_t = 100.0)]
        extent: f64,
        /// Soft coverage temperature (normalized device coordinates).
        #[arg(long, default_value_t = 1e-4)]
        sigma_blend: f64,
        /// Depth-softmax temperature.
        #[arg(long, default_value_t = 1e-2)]
        gamma_blend: f64,
    },

    /// Generate a synthetic dataset (tracks CSV + map file).
    Synth {
        /// Dataset kind: straight, fork, roundabout-lite.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// Output directory for tracks.csv and map.txt.
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Train the driver model by maximizing the evidence lower bound.
    Train {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 1.0)]
        clip_norm: f64,
        /// Training regime.
        #[arg(long, value_enum, default_value_t = TrainModeArg::ClassmatesForcing)]
        mode: TrainModeArg,
        #[arg(long, value_enum, default_value_t = KinematicModeArg::Bicycle)]
        kinematic_mode: KinematicModeArg,
        /// Model scale: toy (64 px) or full (256 px).
        #[arg(long, default_value = "toy")]
        model_scale: String,
        #[arg(long, default_value_t = 10)]
        t_obs: usize,
        #[arg(long, default_value_t = 40)]
        horizon: usize,
        /// Window stride in frames (defaults to the horizon).
        #[arg(long)]
        stride: Option<usize>,
    },

    /// Roll out predicted futures and export them.
    Rollout {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Samples per scene.
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Export path (.csv or .json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = RolloutModeArg::Generative)]
        mode: RolloutModeArg,
        /// Sample observation noise on rolled-out states.
        #[arg(long, default_value_t = false)]
        noise_on_states: bool,
        #[arg(long, default_value_t = 10)]
        t_obs: usize,
        #[arg(long, default_value_t = 40)]
        horizon: usize,
        #[arg(long)]
        stride: Option<usize>,
    },

    /// Score rollouts against recorded futures (minADE_K, minFDE_K, MFD_K).
    Evaluate {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Model checkpoint (mutually exclusive with --rollouts).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Previously exported rollouts to score instead of sampling fresh.
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        k: usize,
        /// Per-scene report output (.csv or .json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// ADE form: rms (the defining formula) or mean (cross-paper).
        #[arg(long, default_value = "rms")]
        ade_form: String,
        #[arg(long, default_value_t = 10)]
        t_obs: usize,
        #[arg(long, default_value_t = 40)]
        horizon: usize,
        #[arg(long)]
        stride: Option<usize>,
    },

    /// Run the central-finite-difference gradient suites.
    Gradcheck {
        /// Suite: kinematics, rasterizer, elbo, or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Random points (or sampled coordinates) per suite.
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
}

/// Reads `name = value` lines; `#` starts a comment.
fn parse_config_file(path: &std::path::Path) -> Result<Vec<(String, String)>, String> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut pairs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "{}:{}: expected `name = value`, got `{line}`",
                path.display(),
                i + 1
            ));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses argv with config-file merging: values from the file fill any flag
/// the command line (or environment) left at its default.
pub fn parse_with_config() -> Result<Cli, String> {
    let argv: Vec<String> = std::env::args().collect();
    let cmd = Cli::command();
    // first pass tolerates missing required args: the config may supply them
    let matches = cmd
        .clone()
        .ignore_errors(true)
        .try_get_matches_from(&argv)
        .map_err(render_clap_error)?;
    let config_path: Option<PathBuf> = matches.get_one::<PathBuf>("config").cloned();
    let Some(config_path) = config_path else {
        // no config: re-parse strictly so required-argument errors surface
        let strict = cmd
            .clone()
            .try_get_matches_from(&argv)
            .map_err(render_clap_error)?;
        return Cli::from_arg_matches(&strict).map_err(|e| e.to_string());
    };

    let pairs = parse_config_file(&config_path)?;
    let Some((sub_name, sub_matches)) = matches.subcommand() else {
        return Cli::from_arg_matches(&matches).map_err(|e| e.to_string());
    };
    let sub_cmd = cmd.find_subcommand(sub_name).expect("subcommand exists");
    let long_to_id = |c: &clap::Command| -> Vec<(String, String)> {
        c.get_arguments()
            .filter_map(|a| {
                a.get_long()
                    .map(|l| (l.to_string(), a.get_id().to_string()))
            })
            .collect()
    };
    let sub_ids = long_to_id(sub_cmd);
    let top_ids = long_to_id(&cmd);

    let mut extended = argv.clone();
    for (key, value) in pairs {
        let lookup = |table: &[(String, String)]| {
            table
                .iter()
                .find(|(l, _)| *l == key)
                .map(|(_, id)| id.clone())
        };
        let explicit = if let Some(id) = lookup(&sub_ids) {
            source_is_explicit(sub_matches, &id)
        } else if let Some(id) = lookup(&top_ids) {
            source_is_explicit(&matches, &id)
        } else {
            continue; // the key belongs to another subcommand
        };
        if explicit {
            continue;
        }
        if value == "true" {
            extended.push(format!("--{key}"));
        } else if value != "false" {
            extended.push(format!("--{key}"));
            extended.push(value);
        }
    }
    let merged = Cli::command()
        .try_get_matches_from(&extended)
        .map_err(render_clap_error)?;
    Cli::from_arg_matches(&merged).map_err(|e| e.to_string())
}

fn source_is_explicit(matches: &ArgMatches, id: &str) -> bool {
    matches
        .value_source(id)
        .map(|s| s != clap::parser::ValueSource::DefaultValue)
        .unwrap_or(false)
}

fn render_clap_error(e: clap::Error) -> String {
    // help/version are not errors
    use clap::error::ErrorKind;
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        print!("{e}");
        std::process::exit(0);
    }
    e.to_string()
}
