//! Variational training: maximizes the per-step evidence bound summed over
//! agents and transitions, with teacher forcing over the observed window and
//! classmates-forced self-rollout after it.
//!
//! Each batch example is one (scene, ego) pair. Gradients flow through the
//! kinematics and the soft rasterizer back into the network parameters, so
//! the ego's own rendered position feeds back into earlier decisions.

use super::{blank_view, ground_truth_actions, gt_states, render_view, SimError};
use crate::autodiff::{Scalar, Tape, Tensor};
use crate::fitting;
use crate::kinematics::diff::StateTensors;
use crate::model::{
    decode_action, encode_birdview, gaussian_log_density, kl_gaussian, posterior, recurrent_update,
    AgentModel, TapedParams,
};
use crate::rasterizer::{
    rasterize_soft_diff, BaseGeometry, BirdviewConfig, RasterJob, COLOR_DRIVEABLE, COLOR_EGO,
    COLOR_LANE_LINE, COLOR_OTHER_AGENT, LAYER_DRIVEABLE, LAYER_EGO, LAYER_LANE_LINE,
    LAYER_OTHER_AGENT,
};
use crate::rng::{fill_standard_normal, stream_rng};
use crate::scene::{AgentType, Scene};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// How states and birdviews are driven during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    /// The default regime: ego self-rolls out after the observed window while
    /// every other agent follows ground truth.
    ClassmatesForcing,
    /// Birdviews are blank after the observed window (no visual feedback).
    BlankFuture,
    /// States and birdviews pinned to ground truth at every step.
    TeacherForced,
}

impl TrainingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::ClassmatesForcing => "classmates-forcing",
            TrainingMode::BlankFuture => "blank-future",
            TrainingMode::TeacherForced => "teacher-forced",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "classmates-forcing" | "generative" => Some(TrainingMode::ClassmatesForcing),
            "blank-future" => Some(TrainingMode::BlankFuture),
            "teacher-forced" => Some(TrainingMode::TeacherForced),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
    pub mode: TrainingMode,
    /// Worker threads; 0 means all available cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 3e-4,
            clip_norm: 1.0,
            seed: 0,
            mode: TrainingMode::ClassmatesForcing,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-step evidence bound per epoch (higher is better).
    pub epoch_elbo: Vec<f64>,
    pub examples: usize,
}

impl TrainReport {
    /// Exponential moving average of the epoch curve, the smoothing used for
    /// monotonicity checks.
    pub fn smoothed_elbo(&self, alpha: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.epoch_elbo.len());
        let mut ema = None;
        for &v in &self.epoch_elbo {
            let next = match ema {
                None => v,
                Some(prev) => alpha * v + (1.0 - alpha) * prev,
            };
            out.push(next);
            ema = Some(next);
        }
        out
    }
}

/// One training example: a scene and the agent whose behavior is learned.
struct Example {
    scene_idx: usize,
    ego_idx: usize,
    l_r: f64,
    /// Ground-truth out-actions for every transition of the window.
    gt_actions: Vec<Vec<f64>>,
}

fn prepare_examples<T: Scalar>(
    scenes: &[Scene],
    model: &AgentModel<T>,
) -> Result<Vec<Example>, SimError> {
    let mode = model.config.kinematic_mode;
    let mut examples = Vec::new();
    for (scene_idx, scene) in scenes.iter().enumerate() {
        for (ego_idx, agent) in scene.agents.iter().enumerate() {
            if agent.attributes.agent_type != AgentType::Vehicle
                || !agent.trajectory.valid_over(0, scene.horizon)
            {
                continue;
            }
            let (l_r, _) = fitting::grid_search_lr(&agent.trajectory, agent.attributes.length)?;
            let gt_actions = ground_truth_actions(&agent.trajectory, 0..scene.horizon, mode, l_r)?;
            examples.push(Example {
                scene_idx,
                ego_idx,
                l_r,
                gt_actions,
            });
        }
    }
    if examples.is_empty() {
        return Err(SimError::NoEgoCandidates);
    }
    Ok(examples)
}

/// Renders the ego view with the ego pose carried as tape tensors, so the
/// image differentiates w.r.t. the ego state. Classmates and the map are
/// constants.
fn taped_render<T: Scalar>(
    tape: &mut Tape<T>,
    scene: &Scene,
    ego_idx: usize,
    ego: &StateTensors<T>,
    t: usize,
    bv: &BirdviewConfig,
) -> Result<Tensor<T>, SimError> {
    let mut geometries = Vec::new();
    let mut colors = Vec::new();
    let mut layers = Vec::new();
    for poly in &scene.map.driveable_polygons {
        geometries.push(BaseGeometry::convex_polygon(poly.clone()));
        colors.push(COLOR_DRIVEABLE);
        layers.push(LAYER_DRIVEABLE);
    }
    for line in &scene.map.lane_lines {
        geometries.push(BaseGeometry::Polyline {
            points: line.points.clone(),
            half_width: line.width / 2.0,
        });
        colors.push(COLOR_LANE_LINE);
        layers.push(LAYER_LANE_LINE);
    }
    let n_map = geometries.len();

    let mut classmates = Vec::new();
    for (i, agent) in scene.agents.iter().enumerate() {
        if i == ego_idx || !agent.trajectory.valid_at(t) {
            continue;
        }
        geometries.push(BaseGeometry::Box {
            length: agent.attributes.length,
            width: agent.attributes.width,
        });
        colors.push(COLOR_OTHER_AGENT);
        layers.push(LAYER_OTHER_AGENT);
        classmates.push(agent.trajectory.states[t]);
    }
    let ego_attrs = &scene.agents[ego_idx].attributes;
    geometries.push(BaseGeometry::Box {
        length: ego_attrs.length,
        width: ego_attrs.width,
    });
    colors.push(COLOR_EGO);
    layers.push(LAYER_EGO);

    let job = Arc::new(RasterJob {
        geometries,
        colors,
        layers,
        config: *bv,
    });

    // ego inverse pose: translation = -R(-psi) (x, y), angle = -psi
    let c = tape.cos(&ego.psi)?;
    let s = tape.sin(&ego.psi)?;
    let cx = tape.mul(&c, &ego.x)?;
    let sy = tape.mul(&s, &ego.y)?;
    let sum = tape.add(&cx, &sy)?;
    let tx = tape.neg(&sum)?;
    let sx = tape.mul(&s, &ego.x)?;
    let cy = tape.mul(&c, &ego.y)?;
    let ty = tape.sub(&sx, &cy)?;
    let neg_psi = tape.neg(&ego.psi)?;

    let mut rows: Vec<Tensor<T>> = Vec::new();
    for _ in 0..n_map {
        rows.push(tx.clone());
        rows.push(ty.clone());
        rows.push(neg_psi.clone());
    }
    for cm in &classmates {
        // compose(ego_inv, classmate pose)
        let xj = Tensor::scalar_f64(cm.x);
        let yj = Tensor::scalar_f64(cm.y);
        let cxj = tape.mul(&c, &xj)?;
        let syj = tape.mul(&s, &yj)?;
        let rot = tape.add(&cxj, &syj)?;
        let row_x = tape.add(&rot, &tx)?;
        let sxj = tape.mul(&s, &xj)?;
        let cyj = tape.mul(&c, &yj)?;
        let rot_y = tape.sub(&cyj, &sxj)?;
        let row_y = tape.add(&rot_y, &ty)?;
        let row_a = tape.sub(&Tensor::scalar_f64(cm.psi), &ego.psi)?;
        rows.push(row_x);
        rows.push(row_y);
        rows.push(row_a);
    }
    // the ego box sits at the origin of its own view by construction
    let zero = Tensor::scalar(T::ZERO);
    rows.push(zero.clone());
    rows.push(zero.clone());
    rows.push(zero);

    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    let flat = tape.concat(&refs)?;
    let poses = tape.reshape(&flat, vec![job.geometries.len(), 3])?;
    Ok(rasterize_soft_diff(tape, &job, &poses)?)
}

pub(crate) fn taped_render_for_suite<T: Scalar>(
    tape: &mut Tape<T>,
    scene: &Scene,
    ego_idx: usize,
    ego: &StateTensors<T>,
    t: usize,
    bv: &BirdviewConfig,
) -> Result<Tensor<T>, SimError> {
    taped_render(tape, scene, ego_idx, ego, t, bv)
}

/// One full scene pass on the tape; returns the loss tensor (negative mean
/// per-step bound) and its value.
#[allow(clippy::too_many_arguments)]
fn example_pass<T: Scalar>(
    tape: &mut Tape<T>,
    model: &AgentModel<T>,
    params: &TapedParams<T>,
    scene: &Scene,
    ex: &Example,
    bv: &BirdviewConfig,
    mode: TrainingMode,
    rng: &mut ChaCha8Rng,
    blank: &Tensor<T>,
) -> Result<(Tensor<T>, f64), SimError> {
    let cfg = &model.config;
    let t_obs = scene.t_obs;
    let horizon = scene.horizon;
    let dt = scene.dt();
    let action_dim = cfg.action_dim();
    let ego = &scene.agents[ex.ego_idx];

    let mut h = model.initial_hidden();
    let mut s_cur = StateTensors::constant(ego.trajectory.states[0]);
    let mut a_prev: Tensor<T> = Tensor::zeros(vec![action_dim]);
    let mut terms: Vec<Tensor<T>> = Vec::with_capacity(horizon - 1);

    for t in 0..horizon - 1 {
        let view = match mode {
            TrainingMode::TeacherForced => {
                render_view::<T>(scene, &gt_states(scene, t), ex.ego_idx, bv)?
            }
            TrainingMode::BlankFuture if t >= t_obs => blank.clone(),
            _ if t < t_obs => render_view::<T>(scene, &gt_states(scene, t), ex.ego_idx, bv)?,
            _ => taped_render(tape, scene, ex.ego_idx, &s_cur, t, bv)?,
        };
        let feat = encode_birdview(tape, cfg, params, &view)?;

        let a_gt = Tensor::<T>::from_f64_slice(vec![action_dim], &ex.gt_actions[t]);
        let q = posterior(tape, cfg, params, &a_gt, &feat, &h)?;
        let kl = kl_gaussian(tape, &q)?;
        let mut eps = vec![0.0; cfg.latent_dim];
        fill_standard_normal(rng, &mut eps);
        let eps = Tensor::<T>::from_f64_slice(vec![cfg.latent_dim], &eps);
        let scaled = tape.mul(&q.std, &eps)?;
        let z = tape.add(&q.mean, &scaled)?;

        h = recurrent_update(tape, params, &h, &feat, &z, &a_prev)?;
        let a_dec = decode_action(tape, params, &feat, &z, &h)?;
        let a_flat = tape.reshape(&a_dec, vec![action_dim])?;
        let next =
            crate::kinematics::diff::step(tape, &s_cur, &a_flat, cfg.kinematic_mode, ex.l_r, dt)?;

        let gt_next = ego.trajectory.states[t + 1];
        let rx = tape.sub(&next.x, &Tensor::scalar_f64(gt_next.x))?;
        let ry = tape.sub(&next.y, &Tensor::scalar_f64(gt_next.y))?;
        let rp_raw = tape.sub(&next.psi, &Tensor::scalar_f64(gt_next.psi))?;
        let rp = tape.wrap_angle(&rp_raw)?;
        let rv = tape.sub(&next.v, &Tensor::scalar_f64(gt_next.v))?;
        let recon = gaussian_log_density(tape, &[&rx, &ry, &rp, &rv], cfg.obs_sigma)?;
        let term = tape.sub(&recon, &kl)?;
        terms.push(term);

        let forced = matches!(mode, TrainingMode::TeacherForced) || t < t_obs - 1;
        if forced {
            a_prev = a_gt;
            s_cur = StateTensors::constant(gt_next);
        } else {
            a_prev = a_flat;
            s_cur = next;
        }
    }

    let refs: Vec<&Tensor<T>> = terms.iter().collect();
    let stacked = tape.concat(&refs)?;
    let mean = tape.mean(&stacked)?;
    let loss = tape.neg(&mean)?;
    let elbo = mean.item().to_f64();
    Ok((loss, elbo))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize], lr: f64) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            lr,
        }
    }

    fn update<T: Scalar>(&mut self, params: &mut AgentModel<T>, grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        let mut updated = Vec::with_capacity(grads.len());
        for (i, (_, tensor)) in params.params.tensors().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = tensor.to_f64_vec();
            for j in 0..g.len() {
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * g[j];
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
            updated.push(Tensor::<T>::from_f64_slice(tensor.shape().to_vec(), &data));
        }
        params.apply_updates(updated);
    }
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm_sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|&v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

const STREAM_SHUFFLE: u64 = 0x51;
const STREAM_EXAMPLE: u64 = 0x45;

/// Trains the model in place; returns the per-epoch evidence-bound history.
///
/// Optimization follows the adaptive-moment scheme with the standard 3e-4
/// learning rate, global gradient-norm clipping, and batches of (scene, ego)
/// examples. Aborts with a diagnostic if the loss stops being finite.
pub fn train<T: Scalar>(
    model: &mut AgentModel<T>,
    scenes: &[Scene],
    bv: &BirdviewConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport, SimError> {
    let examples = prepare_examples(scenes, model)?;
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        cfg.threads
    };
    let blank: Tensor<T> = blank_view(bv)?;
    let sizes: Vec<usize> = model.params.tensors().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(&sizes, cfg.learning_rate);
    let mut epoch_elbo = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // seeded shuffle
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = stream_rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rand::RngExt::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut elbo_sum = 0.0;
        let mut elbo_count = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // per-example gradients, computed in parallel, summed in batch order
            let results: Vec<Result<(Vec<Vec<f64>>, f64), SimError>> =
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for chunk in batch.chunks(batch.len().div_ceil(threads)) {
                        let model_ref = &*model;
                        let examples_ref = &examples;
                        let blank_ref = &blank;
                        handles.push(scope.spawn(move || {
                            chunk
                                .iter()
                                .map(|&ex_idx| {
                                    let ex = &examples_ref[ex_idx];
                                    let scene = &scenes[ex.scene_idx];
                                    let mut tape = Tape::new();
                                    let params = model_ref.taped_params(&mut tape);
                                    let mut rng = stream_rng(
                                        cfg.seed,
                                        &[STREAM_EXAMPLE, epoch as u64, ex_idx as u64],
                                    );
                                    let (loss, elbo) = example_pass(
                                        &mut tape, model_ref, &params, scene, ex, bv, cfg.mode,
                                        &mut rng, blank_ref,
                                    )?;
                                    let grads = tape.backward(&loss)?;
                                    let per_param: Vec<Vec<f64>> = params
                                        .tensors()
                                        .iter()
                                        .map(|p| grads.get_or_zeros(p).to_f64_vec())
                                        .collect();
                                    Ok((per_param, elbo))
                                })
                                .collect::<Vec<_>>()
                        }));
                    }
                    handles
                        .into_iter()
                        .flat_map(|h| h.join().expect("training worker panicked"))
                        .collect()
                });

            let mut batch_grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut n_ok = 0usize;
            for r in results {
                let (per_param, elbo) = r.map_err(|e| SimError::Diverged {
                    epoch,
                    batch: batch_idx,
                    detail: e.to_string(),
                })?;
                if !elbo.is_finite() {
                    return Err(SimError::Diverged {
                        epoch,
                        batch: batch_idx,
                        detail: format!("non-finite objective {elbo}"),
                    });
                }
                for (acc, g) in batch_grads.iter_mut().zip(per_param) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                elbo_sum += elbo;
                elbo_count += 1;
                n_ok += 1;
            }
            let scale = 1.0 / n_ok as f64;
            for g in batch_grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            clip_global_norm(&mut batch_grads, cfg.clip_norm);
            adam.update(model, &batch_grads);
        }
        epoch_elbo.push(elbo_sum / elbo_count as f64);
    }

    Ok(TrainReport {
        epoch_elbo,
        examples: examples.len(),
    })
}
