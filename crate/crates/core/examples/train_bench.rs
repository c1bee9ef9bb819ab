// rough training throughput probe
use drivesim::io::{synth_dataset, SynthKind};
use drivesim::model::{AgentModel, AgentModelConfig};
use drivesim::rasterizer::BirdviewConfig;
use drivesim::sim::{train, TrainConfig, TrainingMode};

fn main() {
    let n_scenes: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(20);
    let epochs: usize = std::env::args()
        .nth(2)
        .and_then(|a| a.parse().ok())
        .unwrap_or(2);
    let ds = synth_dataset(SynthKind::Fork, n_scenes, 1);
    let bv = BirdviewConfig::toy();
    let mut model = AgentModel::<f32>::init(AgentModelConfig::toy(), 0).unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 3e-4,
        clip_norm: 1.0,
        seed: 0,
        mode: TrainingMode::ClassmatesForcing,
        threads: 2,
    };
    let t0 = std::time::Instant::now();
    let report = train(&mut model, &ds.scenes, &bv, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{n_scenes} scenes x {epochs} epochs in {dt:.1}s ({:.2}s/epoch, {:.1}ms/example-pass)",
        dt / epochs as f64,
        1000.0 * dt / (epochs * report.examples) as f64
    );
    println!("elbo: {:?}", report.epoch_elbo);
}
