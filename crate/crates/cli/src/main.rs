//! `drivesim`: batch CLI over the differentiable driving simulator.
//!
//! Exit codes: 0 success, 2 usage or malformed input, 3 runtime failure.

mod args;

use args::{Cli, Command, RolloutModeArg, TrainModeArg};
use drivesim::io::{
    export_rollouts, load_map, load_raw_tracks, load_rollouts, load_tracks, save_map,
    synth_dataset, write_png, write_tracks_csv, ExportFormat, RolloutMeta, RolloutRow, SynthKind,
    Windowing,
};
use drivesim::metrics::{AdeForm, AgentSamples};
use drivesim::model::{
    checkpoint_bytes, fnv1a, load_checkpoint, save_checkpoint, AgentModel, AgentModelConfig,
};
use drivesim::rasterizer::{primitives_for_states, rasterize_hard, rasterize_soft, BirdviewConfig};
use drivesim::scene::{AgentState, MapData, Scene};
use drivesim::sim::{
    evaluate_rollout, fit_rear_axles, rollout, train, RolloutConfig, RolloutMode, TrainConfig,
    TrainingMode,
};
use std::path::Path;
use std::process::ExitCode;

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

/// Input problems exit 2; failures past validation exit 3.
fn input_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::usage(e.to_string())
}

fn run_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::runtime(e.to_string())
}

struct Logger {
    level: u8,
}

impl Logger {
    fn new(level: &str) -> Result<Logger, Failure> {
        let level = match level {
            "error" => 0,
            "warn" => 1,
            "info" => 2,
            "debug" => 3,
            other => return Err(Failure::usage(format!("unknown log level `{other}`"))),
        };
        Ok(Logger { level })
    }

    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= 2 {
            eprintln!("[info] {}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= 3 {
            eprintln!("[debug] {}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match args::parse_with_config() {
        Ok(cli) => cli,
        Err(message) => {
            eprintln!("{message}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let log = match Logger::new(&cli.log_level) {
        Ok(l) => l,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    match dispatch(&cli, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli, log: &Logger) -> Result<(), Failure> {
    match &cli.command {
        Command::FitKinematics { tracks, dt, out } => fit_kinematics(tracks, *dt, out, log),
        Command::Render {
            tracks,
            map,
            frame,
            ego,
            out,
            hard,
            resolution,
            extent,
            sigma_blend,
            gamma_blend,
        } => render(
            tracks,
            map.as_deref(),
            *frame,
            *ego,
            out,
            *hard,
            BirdviewConfig {
                resolution_px: *resolution,
                extent_m: *extent,
                sigma_blend: *sigma_blend,
                gamma_blend: *gamma_blend,
                eps_bg: 1e-3,
            },
            log,
        ),
        Command::Synth {
            kind,
            scenes,
            out_dir,
        } => synth(kind, *scenes, out_dir, cli.seed, log),
        Command::Train {
            tracks,
            map,
            out,
            epochs,
            batch_size,
            learning_rate,
            clip_norm,
            mode,
            kinematic_mode,
            model_scale,
            t_obs,
            horizon,
            stride,
        } => {
            let scenes = load_scene_windows(tracks, map.as_deref(), *t_obs, *horizon, *stride)?;
            let train_mode = match mode {
                TrainModeArg::ClassmatesForcing => TrainingMode::ClassmatesForcing,
                TrainModeArg::BlankFuture => TrainingMode::BlankFuture,
                TrainModeArg::TeacherForced => TrainingMode::TeacherForced,
            };
            run_train(
                scenes,
                out,
                TrainConfig {
                    epochs: *epochs,
                    batch_size: *batch_size,
                    learning_rate: *learning_rate,
                    clip_norm: *clip_norm,
                    seed: cli.seed,
                    mode: train_mode,
                    threads: cli.threads,
                },
                kinematic_mode.to_mode(),
                model_scale,
                log,
            )
        }
        Command::Rollout {
            tracks,
            map,
            model,
            k,
            out,
            mode,
            noise_on_states,
            t_obs,
            horizon,
            stride,
        } => {
            let scenes = load_scene_windows(tracks, map.as_deref(), *t_obs, *horizon, *stride)?;
            run_rollout(
                scenes,
                model,
                *k,
                out,
                *mode,
                *noise_on_states,
                cli.seed,
                log,
            )
        }
        Command::Evaluate {
            tracks,
            map,
            model,
            rollouts,
            k,
            out,
            ade_form,
            t_obs,
            horizon,
            stride,
        } => {
            let scenes = load_scene_windows(tracks, map.as_deref(), *t_obs, *horizon, *stride)?;
            let form = match ade_form.as_str() {
                "rms" => AdeForm::RootMeanSquare,
                "mean" => AdeForm::MeanOfDistances,
                other => return Err(Failure::usage(format!("unknown ade form `{other}`"))),
            };
            run_evaluate(
                scenes,
                model.as_deref(),
                rollouts.as_deref(),
                *k,
                out.as_deref(),
                form,
                cli.seed,
                log,
            )
        }
        Command::Gradcheck { suite, points } => gradcheck(suite, *points, cli.seed, log),
    }
}

fn validate_dt(dt: f64) -> Result<(), Failure> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Failure::usage(format!("--dt must be positive, got {dt}")));
    }
    Ok(())
}

fn load_map_or_empty(map: Option<&Path>) -> Result<MapData, Failure> {
    match map {
        Some(path) => load_map(path).map_err(input_err),
        None => Ok(MapData::default()),
    }
}

fn load_scene_windows(
    tracks: &Path,
    map: Option<&Path>,
    t_obs: usize,
    horizon: usize,
    stride: Option<usize>,
) -> Result<Vec<Scene>, Failure> {
    if t_obs < 1 || t_obs >= horizon {
        return Err(Failure::usage(format!(
            "need 1 <= t_obs < horizon, got {t_obs} and {horizon}"
        )));
    }
    let map = load_map_or_empty(map)?;
    let windowing = Windowing {
        t_obs,
        horizon,
        stride: stride.unwrap_or(horizon),
    };
    load_tracks(tracks, windowing, map).map_err(input_err)
}

fn fit_kinematics(tracks: &Path, dt: f64, out: &Path, log: &Logger) -> Result<(), Failure> {
    validate_dt(dt)?;
    let raw = load_raw_tracks(tracks).map_err(input_err)?;
    let mut lines = String::from("track_id,l_r,fit_loss,length,lr_over_length\n");
    let mut fitted = 0usize;
    for track in &raw {
        if track.trajectory.valid_mask.iter().filter(|&&v| v).count() < 2 {
            continue;
        }
        if (track.trajectory.dt - dt).abs() > 1e-9 {
            return Err(Failure::usage(format!(
                "track file grid step {} does not match --dt {dt}",
                track.trajectory.dt
            )));
        }
        let result =
            drivesim::fitting::fit_vehicle(&track.trajectory, track.length).map_err(run_err)?;
        lines.push_str(&format!(
            "{},{},{},{},{}\n",
            track.id,
            result.l_r,
            result.fit_loss,
            track.length,
            result.l_r / track.length
        ));
        fitted += 1;
        log.debug(format!(
            "track {}: l_r {} loss {}",
            track.id, result.l_r, result.fit_loss
        ));
    }
    std::fs::write(out, lines).map_err(run_err)?;
    log.info(format!("fitted {fitted} tracks -> {}", out.display()));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render(
    tracks: &Path,
    map: Option<&Path>,
    frame: u64,
    ego: u64,
    out: &Path,
    hard: bool,
    bv: BirdviewConfig,
    log: &Logger,
) -> Result<(), Failure> {
    let raw = load_raw_tracks(tracks).map_err(input_err)?;
    let map = load_map_or_empty(map)?;

    let mut agents = Vec::new();
    let mut ego_index = None;
    for track in &raw {
        let local = frame.checked_sub(track.first_frame).map(|o| o as usize);
        let state: Option<AgentState> = local
            .filter(|&o| track.trajectory.valid_at(o))
            .map(|o| track.trajectory.states[o]);
        if track.id == ego {
            if state.is_none() {
                return Err(Failure::usage(format!(
                    "ego track {ego} is not present at frame {frame}"
                )));
            }
            ego_index = Some(agents.len());
        }
        agents.push((
            drivesim::scene::AgentAttributes::new(
                track.length,
                track.width,
                track.length / 4.0,
                track.agent_type,
            )
            .map_err(input_err)?,
            state,
        ));
    }
    let Some(ego_index) = ego_index else {
        return Err(Failure::usage(format!("no track with id {ego}")));
    };

    let prims = primitives_for_states(&map, &agents, ego_index).map_err(run_err)?;
    let pixels = if hard {
        rasterize_hard(&prims, bv)
    } else {
        rasterize_soft(&prims, bv)
    }
    .map_err(run_err)?;
    write_png(out, &pixels, bv.resolution_px).map_err(run_err)?;
    log.info(format!(
        "rendered frame {frame} from track {ego} -> {}",
        out.display()
    ));
    Ok(())
}

fn synth(
    kind: &str,
    scenes: usize,
    out_dir: &Path,
    seed: u64,
    log: &Logger,
) -> Result<(), Failure> {
    let Some(kind) = SynthKind::parse(kind) else {
        return Err(Failure::usage(format!(
            "unknown dataset kind `{kind}` (straight, fork, roundabout-lite)"
        )));
    };
    if scenes == 0 {
        return Err(Failure::usage("--scenes must be at least 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(run_err)?;
    let ds = synth_dataset(kind, scenes, seed);
    write_tracks_csv(&ds.scenes, &out_dir.join("tracks.csv")).map_err(run_err)?;
    save_map(&ds.map, &out_dir.join("map.txt")).map_err(run_err)?;
    log.info(format!(
        "wrote {} {} scenes to {}",
        ds.scenes.len(),
        kind.name(),
        out_dir.display()
    ));
    Ok(())
}

fn model_config(
    scale: &str,
    mode: drivesim::kinematics::KinematicMode,
) -> Result<AgentModelConfig, Failure> {
    let mut cfg = match scale {
        "toy" => AgentModelConfig::toy(),
        "full" => AgentModelConfig::full(),
        other => {
            return Err(Failure::usage(format!(
                "unknown model scale `{other}` (toy, full)"
            )))
        }
    };
    cfg.kinematic_mode = mode;
    Ok(cfg)
}

fn birdview_for_scale(scale: &str) -> BirdviewConfig {
    if scale == "full" {
        BirdviewConfig::default()
    } else {
        BirdviewConfig::toy()
    }
}

fn run_train(
    mut scenes: Vec<Scene>,
    out: &Path,
    cfg: TrainConfig,
    mode: drivesim::kinematics::KinematicMode,
    model_scale: &str,
    log: &Logger,
) -> Result<(), Failure> {
    if scenes.is_empty() {
        return Err(Failure::usage("no trainable scenes in the input"));
    }
    fit_rear_axles(&mut scenes).map_err(run_err)?;
    let config = model_config(model_scale, mode)?;
    let bv = birdview_for_scale(model_scale);
    let mut model = AgentModel::<f32>::init(config, cfg.seed).map_err(run_err)?;
    log.info(format!(
        "training on {} scenes ({} epochs, batch {}, lr {}, mode {})",
        scenes.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.mode.name()
    ));
    let report = train(&mut model, &scenes, &bv, &cfg).map_err(run_err)?;
    for (e, v) in report.epoch_elbo.iter().enumerate() {
        log.debug(format!("epoch {e}: elbo {v:.3}"));
    }
    save_checkpoint(&model, out).map_err(run_err)?;
    log.info(format!(
        "final elbo {:.3} -> {}",
        report.epoch_elbo.last().copied().unwrap_or(f64::NAN),
        out.display()
    ));
    Ok(())
}

fn rollout_mode(arg: RolloutModeArg) -> RolloutMode {
    match arg {
        RolloutModeArg::Generative => RolloutMode::Generative,
        RolloutModeArg::BlankFuture => RolloutMode::AblationBlankFuture,
        RolloutModeArg::TeacherForced => RolloutMode::AblationTeacherForced,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_rollout(
    mut scenes: Vec<Scene>,
    model_path: &Path,
    k: usize,
    out: &Path,
    mode: RolloutModeArg,
    noise_on_states: bool,
    seed: u64,
    log: &Logger,
) -> Result<(), Failure> {
    if k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let model = load_checkpoint::<f32>(model_path).map_err(input_err)?;
    fit_rear_axles(&mut scenes).map_err(run_err)?;
    let bv = birdview_for_model(&model);
    let config = RolloutConfig {
        k_samples: k,
        mode: rollout_mode(mode),
        seed,
        noise_on_states,
        randomize_initial_hidden: false,
    };
    let mut rows: Vec<RolloutRow> = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let result = rollout(scene, i as u64, &model, &bv, &config).map_err(run_err)?;
        rows.extend(result.to_rows());
        log.debug(format!("scene {i}: {} samples", result.samples.len()));
    }
    let checksum = fnv1a(&checkpoint_bytes(&model));
    let meta = RolloutMeta {
        seed,
        mode: config.mode.name().to_string(),
        model_checksum: format!("{checksum:016x}"),
        k_samples: k,
    };
    export_rollouts(&meta, &rows, out, ExportFormat::from_path(out)).map_err(run_err)?;
    log.info(format!(
        "{} rollout rows over {} scenes -> {}",
        rows.len(),
        scenes.len(),
        out.display()
    ));
    Ok(())
}

fn birdview_for_model(model: &AgentModel<f32>) -> BirdviewConfig {
    if model.config.birdview_resolution >= 256 {
        BirdviewConfig::default()
    } else {
        BirdviewConfig::toy()
    }
}

#[allow(clippy::too_many_arguments)]
fn run_evaluate(
    mut scenes: Vec<Scene>,
    model_path: Option<&Path>,
    rollouts_path: Option<&Path>,
    k: usize,
    out: Option<&Path>,
    ade_form: AdeForm,
    seed: u64,
    log: &Logger,
) -> Result<(), Failure> {
    let per_scene: Vec<(u64, drivesim::metrics::MetricReport)> = match (model_path, rollouts_path) {
        (Some(_), Some(_)) => {
            return Err(Failure::usage(
                "--model and --rollouts are mutually exclusive",
            ))
        }
        (Some(model_path), None) => {
            let model = load_checkpoint::<f32>(model_path).map_err(input_err)?;
            fit_rear_axles(&mut scenes).map_err(run_err)?;
            let bv = birdview_for_model(&model);
            let config = RolloutConfig {
                k_samples: k,
                mode: RolloutMode::Generative,
                seed,
                noise_on_states: false,
                randomize_initial_hidden: false,
            };
            let mut reports = Vec::new();
            for (i, scene) in scenes.iter().enumerate() {
                let result = rollout(scene, i as u64, &model, &bv, &config).map_err(run_err)?;
                reports.push((i as u64, evaluate_rollout(scene, &result).map_err(run_err)?));
            }
            reports
        }
        (None, Some(rollouts_path)) => {
            let (_, rows) = load_rollouts(rollouts_path).map_err(input_err)?;
            evaluate_rows(&scenes, &rows, ade_form).map_err(run_err)?
        }
        (None, None) => {
            return Err(Failure::usage("pass either --model or --rollouts"));
        }
    };

    let agg = |f: &dyn Fn(&drivesim::metrics::MetricReport) -> f64| {
        let vals: Vec<f64> = per_scene
            .iter()
            .map(|(_, r)| f(r))
            .filter(|v| v.is_finite())
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let (ade, fde, mfd) = (
        agg(&|r| r.min_ade_k),
        agg(&|r| r.min_fde_k),
        agg(&|r| r.mfd_k),
    );
    let k_shown = per_scene.iter().map(|(_, r)| r.k).max().unwrap_or(k);
    println!("minADE_{k_shown} {ade:.4}");
    println!("minFDE_{k_shown} {fde:.4}");
    println!("MFD_{k_shown} {mfd:.4}");

    if let Some(out) = out {
        let mut csv = String::from("scene_id,min_ade_k,min_fde_k,mfd_k\n");
        for (id, r) in &per_scene {
            csv.push_str(&format!(
                "{id},{},{},{}\n",
                r.min_ade_k, r.min_fde_k, r.mfd_k
            ));
        }
        if out.extension().and_then(|e| e.to_str()) == Some("json") {
            let rows: Vec<serde_json_value> = per_scene
                .iter()
                .map(|(id, r)| serde_json_value {
                    scene_id: *id,
                    min_ade_k: r.min_ade_k,
                    min_fde_k: r.min_fde_k,
                    mfd_k: r.mfd_k,
                })
                .collect();
            let text = serde_json_to_string(&rows).map_err(run_err)?;
            std::fs::write(out, text).map_err(run_err)?;
        } else {
            std::fs::write(out, csv).map_err(run_err)?;
        }
        log.info(format!("per-scene report -> {}", out.display()));
    }
    Ok(())
}

// local serde shims so the dependency stays in the core crate
use drivesim::io::report_json::{to_string as serde_json_to_string, ReportRow as serde_json_value};

/// Scores exported rollout rows against scene ground truth.
fn evaluate_rows(
    scenes: &[Scene],
    rows: &[RolloutRow],
    ade_form: AdeForm,
) -> Result<Vec<(u64, drivesim::metrics::MetricReport)>, String> {
    use std::collections::BTreeMap;
    let mut by_scene: BTreeMap<u64, BTreeMap<(usize, u64), Vec<&RolloutRow>>> = BTreeMap::new();
    for row in rows {
        by_scene
            .entry(row.scene_id)
            .or_default()
            .entry((row.sample_k, row.agent_id))
            .or_default()
            .push(row);
    }
    let mut out = Vec::new();
    for (scene_id, groups) in by_scene {
        let scene = scenes
            .get(scene_id as usize)
            .ok_or_else(|| format!("rollout references scene {scene_id}, have {}", scenes.len()))?;
        // regroup per agent
        let mut per_agent: BTreeMap<u64, Vec<Vec<drivesim::geom::Point2>>> = BTreeMap::new();
        for ((_k, agent_id), mut rows) in groups {
            rows.sort_by_key(|r| r.t);
            per_agent.entry(agent_id).or_default().push(
                rows.iter()
                    .map(|r| drivesim::geom::Point2::new(r.x, r.y))
                    .collect(),
            );
        }
        let mut agents = Vec::new();
        for (agent_id, samples) in per_agent {
            let Some(agent) = scene.agents.iter().find(|a| a.id == agent_id) else {
                return Err(format!("rollout references unknown agent {agent_id}"));
            };
            let gt: Vec<drivesim::geom::Point2> = agent.trajectory.states[scene.t_obs..]
                .iter()
                .map(|s| s.position())
                .collect();
            let valid = agent.trajectory.valid_mask[scene.t_obs..].to_vec();
            agents.push(AgentSamples {
                agent_id,
                samples,
                gt,
                valid,
            });
        }
        let report = drivesim::metrics::evaluate_samples_with_form(&agents, ade_form)
            .map_err(|e| e.to_string())?;
        out.push((scene_id, report));
    }
    Ok(out)
}

fn gradcheck(suite: &str, points: usize, seed: u64, log: &Logger) -> Result<(), Failure> {
    let mut failures = Vec::new();
    let run = |name: &str, err: f64, threshold: f64, failures: &mut Vec<String>| {
        let status = if err < threshold { "ok" } else { "FAIL" };
        println!("{name}: max relative error {err:.3e} (threshold {threshold:.0e}) {status}");
        if err >= threshold {
            failures.push(name.to_string());
        }
    };
    let all = suite == "all";
    if all || suite == "kinematics" {
        let err = drivesim::suites::kinematics_gradient_suite(points, seed).map_err(run_err)?;
        run("kinematics", err, 1e-6, &mut failures);
    }
    if all || suite == "rasterizer" {
        let err = drivesim::suites::rasterizer_gradient_suite(points, seed).map_err(run_err)?;
        run("rasterizer", err, 1e-3, &mut failures);
    }
    if all || suite == "elbo" {
        let err = drivesim::suites::elbo_gradient_suite(points, seed).map_err(run_err)?;
        run("elbo", err, 1e-3, &mut failures);
    }
    if !all && !["kinematics", "rasterizer", "elbo"].contains(&suite) {
        return Err(Failure::usage(format!("unknown suite `{suite}`")));
    }
    log.debug("gradient suites complete");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "gradient suites failed: {}",
            failures.join(", ")
        )))
    }
}
