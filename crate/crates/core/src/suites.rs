//! Gradient verification suites over the differentiable stack, shared by the
//! CLI `gradcheck` command and the acceptance tests.

use crate::autodiff::{
    grad_check, grad_check_sampled, AutodiffError, Result as AdResult, Tape, Tensor,
};
use crate::geom::Point2;
use crate::kinematics::diff::StateTensors;
use crate::model::{elbo_step, AgentModel, AgentModelConfig};
use crate::rasterizer::{rasterize_soft_diff, BirdviewConfig, DrawPrimitive, RasterJob};
use crate::rng::stream_rng;
use rand::RngExt;
use std::sync::Arc;

/// Bicycle-step gradients against central differences at random
/// non-degenerate points; returns the worst relative error.
pub fn kinematics_gradient_suite(points: usize, seed: u64) -> AdResult<f64> {
    let mut rng = stream_rng(seed, &[0x6b]);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let packed = Tensor::<f64>::from_f64_slice(
            vec![6],
            &[
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-2.5..2.5),
                rng.random_range(0.5..12.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
            ],
        );
        let l_r = rng.random_range(0.6..2.0);
        let err = grad_check(
            move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
                let s = StateTensors {
                    x: tape.slice(x, 0, 1)?,
                    y: tape.slice(x, 1, 2)?,
                    psi: tape.slice(x, 2, 3)?,
                    v: tape.slice(x, 3, 4)?,
                };
                let alpha = tape.slice(x, 4, 5)?;
                let beta = tape.slice(x, 5, 6)?;
                let out = crate::kinematics::diff::bicycle_step(tape, &s, &alpha, &beta, l_r, 0.1)?;
                // weighted combination exercises every output component
                let wy = tape.mul(&out.y, &Tensor::scalar(2.0))?;
                let wpsi = tape.mul(&out.psi, &Tensor::scalar(3.0))?;
                let wv = tape.mul(&out.v, &Tensor::scalar(4.0))?;
                let a = tape.add(&out.x, &wy)?;
                let b = tape.add(&wpsi, &wv)?;
                let total = tape.add(&a, &b)?;
                tape.sum(&total)
            },
            &packed,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// d(mean pixel intensity)/d(box poses) against central differences on random
/// two-box scenes at the default blend temperatures.
pub fn rasterizer_gradient_suite(scenes: usize, seed: u64) -> AdResult<f64> {
    let mut rng = stream_rng(seed, &[0x72]);
    let cfg = BirdviewConfig {
        resolution_px: 48,
        extent_m: 24.0,
        ..BirdviewConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..scenes {
        let prims = vec![
            DrawPrimitive::oriented_box(
                Point2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
                rng.random_range(3.5..5.0),
                rng.random_range(1.6..2.2),
                rng.random_range(-3.0..3.0),
                [0.2, 0.4, 1.0],
                3.0,
            )
            .expect("valid box"),
            DrawPrimitive::oriented_box(
                Point2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
                rng.random_range(3.5..5.0),
                rng.random_range(1.6..2.2),
                rng.random_range(-3.0..3.0),
                [1.0, 0.2, 0.2],
                4.0,
            )
            .expect("valid box"),
        ];
        let (job, poses) = RasterJob::from_primitives(&prims, cfg).expect("valid raster job");
        let job = Arc::new(job);
        let flat: Vec<f64> = poses.iter().flatten().copied().collect();
        let x = Tensor::<f64>::from_f64_slice(vec![poses.len(), 3], &flat);
        let job_ref = Arc::clone(&job);
        let err = grad_check(
            move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
                let img = rasterize_soft_diff(tape, &job_ref, x)?;
                tape.mean(&img)
            },
            &x,
            1e-5,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Full elbo_step with frozen noise: gradients w.r.t. randomly sampled
/// parameter coordinates (including the encoder, heads, and the rasterized
/// image path) against central differences.
pub fn elbo_gradient_suite(coords: usize, seed: u64) -> AdResult<f64> {
    let mut model = AgentModel::<f64>::init(AgentModelConfig::toy(), seed).unwrap();
    let mut rng = stream_rng(seed, &[0x65]);
    // jitter the zero-initialized heads so every path carries signal
    for name in ["dec.out.w", "dec.out.b"] {
        let t = model.params.get(name);
        let shape = t.shape().to_vec();
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        model.params.set(name, Tensor::from_f64_slice(shape, &data));
    }

    let ds = crate::io::synth_dataset(crate::io::SynthKind::Fork, 1, seed);
    let scene = &ds.scenes[0];
    let bv = BirdviewConfig::toy();
    let t = scene.t_obs + 2;
    let ego_gt = scene.agents[0].trajectory.states[t];
    let s_next = scene.agents[0].trajectory.states[t + 1];
    let l_r = scene.agents[0].attributes.rear_axis_offset;
    let a_gt = Tensor::<f64>::from_f64_slice(vec![2], &[0.1, 0.02]);

    // pack a representative parameter slice
    let names = [
        "enc.conv0.w",
        "enc.fc.w",
        "gru0.w_u",
        "post.out.w",
        "dec.out.w",
    ];
    let base: Vec<f64> = names
        .iter()
        .flat_map(|n| model.params.get(n).to_f64_vec())
        .collect();
    let x = Tensor::from_f64_slice(vec![base.len()], &base);

    let model_ref = &model;
    let scene_ref = scene;
    grad_check_sampled(
        move |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            let mut taped = model_ref.taped_params(tape);
            let mut offset = 0;
            for n in names {
                let shape = model_ref.params.get(n).shape().to_vec();
                let len: usize = shape.iter().product();
                let piece = tape.slice(x, offset, offset + len)?;
                let piece = tape.reshape(&piece, shape)?;
                let idx = taped
                    .names()
                    .iter()
                    .position(|nm| nm == n)
                    .expect("known name");
                taped.replace_for_check(idx, piece);
                offset += len;
            }
            // differentiable ego state through the rendered view
            let ego = StateTensors::constant(ego_gt);
            let view = crate::sim::train::taped_render_for_suite(tape, scene_ref, 0, &ego, t, &bv)
                .map_err(|_| AutodiffError::NonFinite { op: "render" })?;
            let feat = crate::model::encode_birdview(tape, &model_ref.config, &taped, &view)
                .map_err(|_| AutodiffError::NonFinite { op: "encode" })?;
            let h = model_ref.initial_hidden();
            let mut eps_rng = stream_rng(1234, &[0x66]); // frozen noise
            let step = elbo_step(
                tape,
                &model_ref.config,
                &taped,
                s_next,
                &ego,
                &feat,
                &h,
                &a_gt,
                l_r,
                0.1,
                &mut eps_rng,
                None,
            )
            .map_err(|_| AutodiffError::NonFinite { op: "elbo_step" })?;
            let h_sum = tape.sum(&step.h_next.layers[1])?;
            let h_term = tape.mul(&h_sum, &Tensor::scalar(0.01))?;
            tape.add(&step.term, &h_term)
        },
        &x,
        1e-4,
        coords,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass_their_thresholds() {
        assert!(kinematics_gradient_suite(10, 1).unwrap() < 1e-6);
        assert!(rasterizer_gradient_suite(3, 2).unwrap() < 1e-3);
        assert!(elbo_gradient_suite(10, 3).unwrap() < 1e-3);
    }
}
