//! Joint multi-agent rollout: teacher-forced warmup, simultaneous per-step
//! updates mediated by rendered birdviews, classmates forcing, and the two
//! feedback ablations.
//!
//! # Step schedule
//!
//! States are 0-indexed over `0..T`; the observed prefix is `0..t_obs`;
//! action `a_t` maps state `t` to `t+1`.
//!
//! Processing a state folds `(birdview feature, z, incoming action)` into the
//! recurrent state, where the incoming action is the one that produced the
//! state (zero for the first). Warmup does exactly this over the observed
//! states with ground-truth actions and ground-truth birdviews, never
//! overriding states. The generative loop then runs from the last observed
//! state: decode an action from the freshest context, step the kinematics for
//! every agent from one frozen snapshot of the joint state, render the new
//! state, and process it. Prior z at every test-time step; training replaces
//! z with posterior draws at scored steps (see [`train`]).

pub mod train;

pub use train::{train, TrainConfig, TrainReport, TrainingMode};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::fitting;
use crate::geom::wrap_angle;
use crate::io::{RolloutMeta, RolloutRow};
use crate::kinematics::{Action, KinematicMode};
use crate::model::{
    decode_action, encode_birdview, prior_sample, recurrent_update, AgentModel, HiddenState,
    TapedParams,
};
use crate::rasterizer::{primitives_for_states, rasterize_soft, BirdviewConfig};
use crate::rng::stream_rng;
use crate::scene::{AgentState, Scene};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Raster(#[from] crate::rasterizer::RasterError),
    #[error(transparent)]
    Fitting(#[from] crate::fitting::FittingError),
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
    #[error("agent {0} is not valid over the observed window")]
    AgentNotObserved(u64),
    #[error("no agent is valid over the observed window")]
    NoEgoCandidates,
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

/// Rollout modes; training has its own mirror in [`TrainingMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// All observed agents roll out jointly.
    Generative,
    /// Only the ego rolls out; every other agent replays ground truth.
    ClassmatesForcing { ego_index: usize },
    /// Birdviews are blank (pure background) after the observed window.
    AblationBlankFuture,
    /// States and birdviews pinned to ground truth at every future step.
    AblationTeacherForced,
}

impl RolloutMode {
    pub fn name(&self) -> &'static str {
        match self {
            RolloutMode::Generative => "generative",
            RolloutMode::ClassmatesForcing { .. } => "classmates-forcing",
            RolloutMode::AblationBlankFuture => "ablation-blank-future",
            RolloutMode::AblationTeacherForced => "ablation-teacher-forced",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub k_samples: usize,
    pub mode: RolloutMode,
    pub seed: u64,
    /// Sample `s' ~ N(kin(s, a), obs_sigma^2 I)` instead of taking the mean.
    /// Off by default: the state noise is a training-likelihood device.
    pub noise_on_states: bool,
    /// Diagnostic: skip warmup and start from a random recurrent state, to
    /// measure what the observed-window seeding is worth.
    pub randomize_initial_hidden: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            k_samples: 6,
            mode: RolloutMode::Generative,
            seed: 0,
            noise_on_states: false,
            randomize_initial_hidden: false,
        }
    }
}

/// One agent's predicted future under one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRollout {
    pub agent_id: u64,
    /// Predicted states for `t = t_obs..T`.
    pub states: Vec<AgentState>,
    /// The action taken at each predicted transition.
    pub actions: Vec<Action>,
    /// The latent draw behind each action.
    pub z_samples: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRollout {
    pub agents: Vec<AgentRollout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub scene_id: u64,
    pub t_obs: usize,
    pub horizon: usize,
    pub dt: f64,
    pub samples: Vec<SampleRollout>,
}

impl RolloutResult {
    pub fn to_rows(&self) -> Vec<RolloutRow> {
        let mut rows = Vec::new();
        for (k, sample) in self.samples.iter().enumerate() {
            for agent in &sample.agents {
                for (i, s) in agent.states.iter().enumerate() {
                    rows.push(RolloutRow {
                        scene_id: self.scene_id,
                        sample_k: k,
                        agent_id: agent.agent_id,
                        t: self.t_obs + i,
                        x: s.x,
                        y: s.y,
                        psi: s.psi,
                        v: s.v,
                    });
                }
            }
        }
        rows
    }

    pub fn meta(&self, config: &RolloutConfig, model_checksum: u64) -> RolloutMeta {
        RolloutMeta {
            seed: config.seed,
            mode: config.mode.name().to_string(),
            model_checksum: format!("{model_checksum:016x}"),
            k_samples: config.k_samples,
        }
    }
}

/// Ground-truth actions in the configured mode's space for the transitions of
/// `traj.states[range]` (bicycle actions come from the fitting recursion;
/// delta spaces difference the states directly).
pub fn ground_truth_actions(
    traj: &crate::scene::Trajectory,
    range: std::ops::Range<usize>,
    mode: KinematicMode,
    l_r: f64,
) -> Result<Vec<Vec<f64>>, SimError> {
    let states = &traj.states[range];
    match mode {
        KinematicMode::Bicycle => {
            let window =
                crate::scene::Trajectory::new(states.to_vec(), traj.dt).expect("positive dt");
            let actions = fitting::recover_actions(&window, l_r)?;
            Ok(actions.iter().map(|a| vec![a.alpha, a.beta]).collect())
        }
        KinematicMode::Unconstrained => Ok(states
            .windows(2)
            .map(|w| {
                vec![
                    w[1].x - w[0].x,
                    w[1].y - w[0].y,
                    wrap_angle(w[1].psi - w[0].psi),
                    w[1].v - w[0].v,
                ]
            })
            .collect()),
        KinematicMode::Displacement => Ok(states
            .windows(2)
            .map(|w| vec![w[1].x - w[0].x, w[1].y - w[0].y])
            .collect()),
        KinematicMode::OrientedUnconstrained | KinematicMode::OrientedDisplacement => Ok(states
            .windows(2)
            .map(|w| {
                let (sin, cos) = w[0].psi.sin_cos();
                let dx = w[1].x - w[0].x;
                let dy = w[1].y - w[0].y;
                let rx = cos * dx + sin * dy;
                let ry = -sin * dx + cos * dy;
                if mode == KinematicMode::OrientedDisplacement {
                    vec![rx, ry]
                } else {
                    vec![rx, ry, wrap_angle(w[1].psi - w[0].psi), w[1].v - w[0].v]
                }
            })
            .collect()),
    }
}

/// Renders agent `ego`'s view of arbitrary per-agent states through the soft
/// rasterizer, as a plain (constant) tensor.
pub fn render_view<T: Scalar>(
    scene: &Scene,
    states: &[Option<AgentState>],
    ego: usize,
    bv: &BirdviewConfig,
) -> Result<Tensor<T>, SimError> {
    let agents: Vec<_> = scene
        .agents
        .iter()
        .zip(states)
        .map(|(a, s)| (a.attributes, *s))
        .collect();
    let prims = primitives_for_states(&scene.map, &agents, ego)?;
    let pixels = rasterize_soft(&prims, *bv)?;
    let res = bv.resolution_px;
    Ok(Tensor::from_f64_slice(vec![3, res, res], &pixels))
}

/// An all-background frame for the blank-future ablation.
pub fn blank_view<T: Scalar>(bv: &BirdviewConfig) -> Result<Tensor<T>, SimError> {
    let pixels = rasterize_soft(&[], *bv)?;
    let res = bv.resolution_px;
    Ok(Tensor::from_f64_slice(vec![3, res, res], &pixels))
}

fn gt_state(scene: &Scene, agent: usize, t: usize) -> Option<AgentState> {
    let traj = &scene.agents[agent].trajectory;
    traj.valid_at(t).then(|| traj.states[t])
}

/// Ground-truth joint state at step `t` (None where an agent is absent).
pub fn gt_states(scene: &Scene, t: usize) -> Vec<Option<AgentState>> {
    (0..scene.agents.len())
        .map(|i| gt_state(scene, i, t))
        .collect()
}

const STREAM_ROLLOUT_Z: u64 = 0x5a;
const STREAM_STATE_NOISE: u64 = 0x4e;

fn rollout_z(seed: u64, k: usize, agent_id: u64, t: usize, latent_dim: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, &[STREAM_ROLLOUT_Z, k as u64, agent_id, t as u64]);
    prior_sample(&mut rng, latent_dim)
}

/// Runtime context of one simulated agent between steps.
struct AgentCtx<T: Scalar> {
    index: usize,
    id: u64,
    l_r: f64,
    h: HiddenState<T>,
    /// (feature, z) of the most recently processed state; the next decode
    /// consumes them.
    feat: Tensor<T>,
    z: Tensor<T>,
    state: AgentState,
    last_action: Option<Action>,
    last_z: Option<Vec<f64>>,
}

/// Seeds each listed agent's recurrent state over the observed window:
/// ground-truth birdviews, prior z draws, ground-truth incoming actions
/// (recovered through the fitting module; zero for the first state), never
/// overriding states. Returns per agent the hidden state plus the last
/// observed frame's (feature, z), which the first generative decode consumes.
pub fn warmup<T: Scalar>(
    scene: &Scene,
    model: &AgentModel<T>,
    bv: &BirdviewConfig,
    agent_indices: &[usize],
    seed: u64,
    sample_k: usize,
) -> Result<Vec<(HiddenState<T>, Tensor<T>, Tensor<T>)>, SimError> {
    let mut tape = Tape::inference();
    let params = model.taped_params(&mut tape);
    let t_obs = scene.t_obs;
    let latent = model.config.latent_dim;
    let action_dim = model.config.action_dim();

    let mut out = Vec::with_capacity(agent_indices.len());
    for &idx in agent_indices {
        let agent = &scene.agents[idx];
        if !agent.trajectory.valid_over(0, t_obs) {
            return Err(SimError::AgentNotObserved(agent.id));
        }
        let l_r = agent.attributes.rear_axis_offset;
        // ground-truth actions into states 1..t_obs (none when only one state
        // is observed; the sole update then carries the zero action)
        let incoming = if t_obs >= 2 {
            ground_truth_actions(
                &agent.trajectory,
                0..t_obs,
                model.config.kinematic_mode,
                l_r,
            )?
        } else {
            Vec::new()
        };

        let mut h = model.initial_hidden();
        let mut last = None;
        for t in 0..t_obs {
            let view = render_view::<T>(scene, &gt_states(scene, t), idx, bv)?;
            let feat = encode_birdview(&mut tape, &model.config, &params, &view)?;
            let z = Tensor::<T>::from_f64_slice(
                vec![latent],
                &rollout_z(seed, sample_k, agent.id, t, latent),
            );
            let action = if t == 0 {
                Tensor::zeros(vec![action_dim])
            } else {
                Tensor::from_f64_slice(vec![action_dim], &incoming[t - 1])
            };
            h = recurrent_update(&mut tape, &params, &h, &feat, &z, &action)?;
            last = Some((feat, z));
        }
        let (feat, z) = last.expect("t_obs >= 1");
        out.push((h, feat, z));
    }
    Ok(out)
}

/// Advances all simulated agents one step from a frozen snapshot of the joint
/// state at `t`, then renders state `t+1` and folds it into each recurrence.
#[allow(clippy::too_many_arguments)]
fn step_joint<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TapedParams<T>,
    scene: &Scene,
    model: &AgentModel<T>,
    bv: &BirdviewConfig,
    contexts: &mut [AgentCtx<T>],
    t: usize,
    sample_k: usize,
    config: &RolloutConfig,
    gt_actions: &[Option<Vec<Vec<f64>>>],
) -> Result<(), SimError> {
    let dt = scene.dt();
    let mode = model.config.kinematic_mode;
    let t_obs = scene.t_obs;

    // phase A: decode and step everyone from the frozen snapshot
    let mut planned = Vec::with_capacity(contexts.len());
    for ctx in contexts.iter() {
        let action_t = decode_action(tape, params, &ctx.feat, &ctx.z, &ctx.h)?;
        let action = Action::from_slice(mode, &action_t.to_f64_vec());
        let mut next = match config.mode {
            RolloutMode::AblationTeacherForced => {
                gt_state(scene, ctx.index, t + 1).ok_or(SimError::AgentNotObserved(ctx.id))?
            }
            _ => crate::kinematics::step(ctx.state, &action, mode, ctx.l_r, dt)?,
        };
        if config.noise_on_states && !matches!(config.mode, RolloutMode::AblationTeacherForced) {
            let mut rng = stream_rng(
                config.seed,
                &[STREAM_STATE_NOISE, sample_k as u64, ctx.id, t as u64],
            );
            let sigma = model.config.obs_sigma;
            next = AgentState::new(
                next.x + sigma * crate::rng::sample_standard_normal(&mut rng),
                next.y + sigma * crate::rng::sample_standard_normal(&mut rng),
                next.psi + sigma * crate::rng::sample_standard_normal(&mut rng),
                next.v + sigma * crate::rng::sample_standard_normal(&mut rng),
            );
        }
        planned.push((action_t, action, next));
    }

    // commit simultaneously
    for (ctx, (_, action, next)) in contexts.iter_mut().zip(&planned) {
        ctx.state = *next;
        ctx.last_action = Some(*action);
        ctx.last_z = Some(ctx.z.to_f64_vec());
    }

    // phase B: render the new joint state and process it
    let next_t = t + 1;
    if next_t >= scene.horizon - 1 {
        return Ok(()); // the final state never feeds another decode
    }
    let mut joint: Vec<Option<AgentState>> = gt_states(scene, next_t);
    for ctx in contexts.iter() {
        joint[ctx.index] = Some(ctx.state);
    }
    for (ctx, (action_t, _, _)) in contexts.iter_mut().zip(&planned) {
        let view = match config.mode {
            RolloutMode::AblationBlankFuture if next_t >= t_obs => blank_view::<T>(bv)?,
            RolloutMode::AblationTeacherForced => {
                render_view::<T>(scene, &gt_states(scene, next_t), ctx.index, bv)?
            }
            _ => render_view::<T>(scene, &joint, ctx.index, bv)?,
        };
        let feat = encode_birdview(tape, &model.config, params, &view)?;
        let z = Tensor::<T>::from_f64_slice(
            vec![model.config.latent_dim],
            &rollout_z(
                config.seed,
                sample_k,
                ctx.id,
                next_t,
                model.config.latent_dim,
            ),
        );
        let exec_input = match (&config.mode, &gt_actions[ctx.index]) {
            (RolloutMode::AblationTeacherForced, Some(gts)) if t < gts.len() => {
                Tensor::from_f64_slice(vec![gts[t].len()], &gts[t])
            }
            _ => action_t.clone(),
        };
        ctx.h = recurrent_update(tape, params, &ctx.h, &feat, &z, &exec_input)?;
        ctx.feat = feat;
        ctx.z = z;
    }
    Ok(())
}

/// Joint rollout: warmup then the generative loop, `k_samples` times with
/// independent substreams of the seed.
pub fn rollout<T: Scalar>(
    scene: &Scene,
    scene_id: u64,
    model: &AgentModel<T>,
    bv: &BirdviewConfig,
    config: &RolloutConfig,
) -> Result<RolloutResult, SimError> {
    let t_obs = scene.t_obs;
    let horizon = scene.horizon;
    let sim_agents: Vec<usize> = match config.mode {
        RolloutMode::ClassmatesForcing { ego_index } => vec![ego_index],
        _ => (0..scene.agents.len())
            .filter(|&i| scene.agents[i].trajectory.valid_over(0, t_obs))
            .collect(),
    };
    if sim_agents.is_empty() {
        return Err(SimError::NoEgoCandidates);
    }

    // teacher-forced rollouts feed ground-truth actions to the recurrence
    let gt_actions: Vec<Option<Vec<Vec<f64>>>> = scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            if matches!(config.mode, RolloutMode::AblationTeacherForced)
                && sim_agents.contains(&i)
                && a.trajectory.valid_over(0, horizon)
            {
                ground_truth_actions(
                    &a.trajectory,
                    0..horizon,
                    model.config.kinematic_mode,
                    a.attributes.rear_axis_offset,
                )
                .ok()
            } else {
                None
            }
        })
        .collect();

    let mut samples = Vec::with_capacity(config.k_samples);
    for k in 0..config.k_samples {
        let mut tape = Tape::inference();
        let params = model.taped_params(&mut tape);
        let warm = if config.randomize_initial_hidden {
            random_start(
                scene,
                model,
                bv,
                &sim_agents,
                &mut tape,
                &params,
                config.seed,
                k,
            )?
        } else {
            warmup(scene, model, bv, &sim_agents, config.seed, k)?
        };

        let mut contexts: Vec<AgentCtx<T>> = sim_agents
            .iter()
            .zip(warm)
            .map(|(&idx, (h, feat, z))| AgentCtx {
                index: idx,
                id: scene.agents[idx].id,
                l_r: scene.agents[idx].attributes.rear_axis_offset,
                h,
                feat,
                z,
                state: scene.agents[idx].trajectory.states[t_obs - 1],
                last_action: None,
                last_z: None,
            })
            .collect();

        let mut recorded: Vec<AgentRollout> = contexts
            .iter()
            .map(|c| AgentRollout {
                agent_id: c.id,
                states: Vec::with_capacity(horizon - t_obs),
                actions: Vec::with_capacity(horizon - t_obs),
                z_samples: Vec::with_capacity(horizon - t_obs),
            })
            .collect();

        for t in t_obs - 1..horizon - 1 {
            step_joint(
                &mut tape,
                &params,
                scene,
                model,
                bv,
                &mut contexts,
                t,
                k,
                config,
                &gt_actions,
            )?;
            for (ctx, rec) in contexts.iter().zip(&mut recorded) {
                rec.states.push(ctx.state);
                rec.actions.push(ctx.last_action.expect("action recorded"));
                rec.z_samples.push(ctx.last_z.clone().expect("z recorded"));
            }
        }
        samples.push(SampleRollout { agents: recorded });
    }
    Ok(RolloutResult {
        scene_id,
        t_obs,
        horizon,
        dt: scene.dt(),
        samples,
    })
}

/// Diagnostic context for [`RolloutConfig::randomize_initial_hidden`]: no
/// warmup, the hidden state drawn uniform in [-1, 1), the last observed
/// frame rendered for the first decode.
#[allow(clippy::too_many_arguments)]
fn random_start<T: Scalar>(
    scene: &Scene,
    model: &AgentModel<T>,
    bv: &BirdviewConfig,
    agent_indices: &[usize],
    tape: &mut Tape<T>,
    params: &TapedParams<T>,
    seed: u64,
    sample_k: usize,
) -> Result<Vec<(HiddenState<T>, Tensor<T>, Tensor<T>)>, SimError> {
    use rand::RngExt;
    let t_obs = scene.t_obs;
    let mut out = Vec::with_capacity(agent_indices.len());
    for &idx in agent_indices {
        let agent = &scene.agents[idx];
        if !agent.trajectory.valid_over(0, t_obs) {
            return Err(SimError::AgentNotObserved(agent.id));
        }
        let mut rng = stream_rng(seed, &[0x48, sample_k as u64, agent.id]);
        let h = HiddenState {
            layers: (0..2)
                .map(|_| {
                    let data: Vec<f64> = (0..model.config.hidden_dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect();
                    Tensor::from_f64_slice(vec![1, model.config.hidden_dim], &data)
                })
                .collect(),
        };
        let view = render_view::<T>(scene, &gt_states(scene, t_obs - 1), idx, bv)?;
        let feat = encode_birdview(tape, &model.config, params, &view)?;
        let z = Tensor::<T>::from_f64_slice(
            vec![model.config.latent_dim],
            &rollout_z(seed, sample_k, agent.id, t_obs - 1, model.config.latent_dim),
        );
        out.push((h, feat, z));
    }
    Ok(out)
}

/// Grid-search fits each fully-valid vehicle's rear-axle distance from its
/// whole trajectory and writes it into the agent attributes (the usual data
/// preparation step before training or evaluating).
pub fn fit_rear_axles(scenes: &mut [Scene]) -> Result<(), SimError> {
    for scene in scenes.iter_mut() {
        let horizon = scene.horizon;
        for agent in &mut scene.agents {
            if agent.attributes.agent_type != crate::scene::AgentType::Vehicle
                || !agent.trajectory.valid_over(0, horizon)
            {
                continue;
            }
            let (l_r, _) = fitting::grid_search_lr(&agent.trajectory, agent.attributes.length)?;
            agent.attributes.rear_axis_offset = l_r;
        }
    }
    Ok(())
}

/// Scores rollout results against a scene's recorded future.
pub fn evaluate_rollout(
    scene: &Scene,
    result: &RolloutResult,
) -> Result<crate::metrics::MetricReport, crate::metrics::MetricsError> {
    let t_obs = scene.t_obs;
    let mut agents = Vec::new();
    for (idx, agent) in scene.agents.iter().enumerate() {
        let _ = idx;
        let samples: Vec<Vec<crate::geom::Point2>> = result
            .samples
            .iter()
            .filter_map(|s| {
                s.agents
                    .iter()
                    .find(|a| a.agent_id == agent.id)
                    .map(|a| a.states.iter().map(|st| st.position()).collect())
            })
            .collect();
        if samples.is_empty() {
            continue;
        }
        let gt: Vec<crate::geom::Point2> = agent.trajectory.states[t_obs..]
            .iter()
            .map(|s| s.position())
            .collect();
        let valid: Vec<bool> = agent.trajectory.valid_mask[t_obs..].to_vec();
        agents.push(crate::metrics::AgentSamples {
            agent_id: agent.id,
            samples,
            gt,
            valid,
        });
    }
    crate::metrics::evaluate_samples(&agents)
}
