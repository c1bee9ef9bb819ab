// full-scale toy-training calibration: fork dataset, 64 px birdviews
//
// usage: calibrate_fork [epochs] [n_train] [train-mode] [kinematic-mode]
use drivesim::io::{synth_dataset, SynthKind};
use drivesim::kinematics::KinematicMode;
use drivesim::model::{AgentModel, AgentModelConfig};
use drivesim::rasterizer::BirdviewConfig;
use drivesim::sim::{
    evaluate_rollout, rollout, train, RolloutConfig, RolloutMode, TrainConfig, TrainingMode,
};
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(50);
    let n_train: usize = std::env::args()
        .nth(2)
        .and_then(|a| a.parse().ok())
        .unwrap_or(500);
    let mode_name = std::env::args()
        .nth(3)
        .unwrap_or_else(|| "classmates-forcing".into());
    let kin_name = std::env::args().nth(4).unwrap_or_else(|| "bicycle".into());
    let mode = TrainingMode::parse(&mode_name).expect("training mode");
    let kin = KinematicMode::parse(&kin_name).expect("kinematic mode");

    let ds = synth_dataset(SynthKind::Fork, n_train + 60, 2024);
    let (train_scenes, held_out) = ds.scenes.split_at(n_train);
    let held_info = &ds.fork_info[n_train..];

    let bv = BirdviewConfig::toy();
    let mut model_cfg = AgentModelConfig::toy();
    model_cfg.kinematic_mode = kin;
    let mut model = AgentModel::<f32>::init(model_cfg, 7).unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 3e-4,
        clip_norm: 1.0,
        seed: 7,
        mode,
        threads: 2,
    };
    let t0 = Instant::now();
    let report = train(&mut model, train_scenes, &bv, &cfg).unwrap();
    println!(
        "trained {} epochs ({} {}) in {:.1}s",
        epochs,
        mode.name(),
        kin.name(),
        t0.elapsed().as_secs_f64()
    );
    for (e, v) in report.epoch_elbo.iter().enumerate() {
        println!("epoch {e:3}: elbo {v:.2}");
    }
    let sm = report.smoothed_elbo(0.1);
    let mono = sm.windows(2).all(|w| w[1] >= w[0] - 1e-9);
    println!("smoothed monotone: {mono}");

    // evaluation on held-out scenes; blank-future models are evaluated with
    // blank future images (that regime applies at train and test time)
    let eval_mode = match mode {
        TrainingMode::BlankFuture => RolloutMode::AblationBlankFuture,
        _ => RolloutMode::Generative,
    };
    let rc = RolloutConfig {
        k_samples: 6,
        mode: eval_mode,
        seed: 99,
        noise_on_states: false,
        randomize_initial_hidden: false,
    };
    let t0 = Instant::now();
    let mut branch_cover = 0usize;
    let mut branch_total = 0usize;
    let mut straight_ades = Vec::new();
    let mut all_ades = Vec::new();
    let mut branch_mfds = Vec::new();
    for (i, (scene, info)) in held_out.iter().zip(held_info).enumerate() {
        let result = rollout(scene, i as u64, &model, &bv, &rc).unwrap();
        let rep = evaluate_rollout(scene, &result).unwrap();
        all_ades.push(rep.min_ade_k);
        if info.straight_window {
            straight_ades.push(rep.min_ade_k);
        } else {
            branch_total += 1;
            branch_mfds.push(rep.mfd_k);
            if rep.mfd_k > 0.5 * info.branch_separation() {
                branch_cover += 1;
            }
        }
    }
    println!(
        "eval ({}) in {:.1}s",
        eval_mode.name(),
        t0.elapsed().as_secs_f64()
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "straight minADE6: mean {:.3} max {:.3} (n={})",
        mean(&straight_ades),
        straight_ades.iter().cloned().fold(0.0, f64::max),
        straight_ades.len()
    );
    println!("held-out minADE6 overall: {:.3}", mean(&all_ades));
    println!(
        "branch coverage: {}/{} ({:.0}%), mean MFD6 {:.2}",
        branch_cover,
        branch_total,
        100.0 * branch_cover as f64 / branch_total.max(1) as f64,
        mean(&branch_mfds)
    );
}
