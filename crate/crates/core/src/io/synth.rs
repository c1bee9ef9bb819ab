//! Procedurally generated desk-scale datasets. Every trajectory is produced
//! by the discrete bicycle model with a known rear-axle distance, so action
//! recovery and grid-search fitting are exact on this data.
//!
//! Three kinds:
//! - `straight`: constant-speed lane driving with per-scene speed jitter;
//! - `fork`: a Y-junction where half the vehicles branch left and half
//!   right, the two-mode benchmark for multimodal prediction;
//! - `roundabout-lite`: circular-arc driving with a randomly timed tangent
//!   exit, the curvature-rich case for rear-axle identification.

use crate::fitting::LR_GRID_STEP;
use crate::geom::Point2;
use crate::kinematics::{bicycle_step, BicycleAction};
use crate::rng::stream_rng;
use crate::scene::{
    AgentAttributes, AgentState, AgentType, LaneLine, MapData, Scene, SceneAgent, Trajectory,
};
use rand::RngExt;

pub const SYNTH_DT: f64 = 0.1;
pub const SYNTH_T_OBS: usize = 10;
pub const SYNTH_HORIZON: usize = 40;

/// Y-junction branch half-angle.
const FORK_ANGLE: f64 = 0.45;
/// Steps spent turning at the fork.
const FORK_TURN_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Straight,
    Fork,
    RoundaboutLite,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(SynthKind::Straight),
            "fork" => Some(SynthKind::Fork),
            "roundabout-lite" => Some(SynthKind::RoundaboutLite),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Straight => "straight",
            SynthKind::Fork => "fork",
            SynthKind::RoundaboutLite => "roundabout-lite",
        }
    }
}

/// Per-scene fork metadata: which branch the recorded vehicle took and where
/// each branch would end at the horizon, for diversity evaluation.
#[derive(Debug, Clone)]
pub struct ForkSceneInfo {
    /// True when the window never reaches the junction (pure straight
    /// driving); branch fields then coincide.
    pub straight_window: bool,
    pub branch_left: bool,
    pub final_left: Point2,
    pub final_right: Point2,
}

impl ForkSceneInfo {
    /// Distance between the two counterfactual branch endpoints.
    pub fn branch_separation(&self) -> f64 {
        self.final_left.distance(self.final_right)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub scenes: Vec<Scene>,
    pub map: MapData,
    /// One entry per scene for the fork kind; empty otherwise.
    pub fork_info: Vec<ForkSceneInfo>,
}

/// A grid-aligned rear-axle distance, so grid search can recover it exactly.
fn sample_lr(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    rng.random_range(80..=160) as i64 as f64 * LR_GRID_STEP
}

fn sample_attrs(rng: &mut rand_chacha::ChaCha8Rng) -> AgentAttributes {
    let length = rng.random_range(4.2..4.8);
    let width = rng.random_range(1.8..2.1);
    let l_r = sample_lr(rng);
    AgentAttributes::new(length, width, l_r, AgentType::Vehicle).expect("valid synth attributes")
}

fn rollout_actions(start: AgentState, actions: &[BicycleAction], l_r: f64) -> Vec<AgentState> {
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(start);
    let mut s = start;
    for a in actions {
        s = bicycle_step(s, *a, l_r, SYNTH_DT).expect("valid synth step");
        states.push(s);
    }
    states
}

/// Slip-angle amplitude for a raised-cosine turn profile that accumulates a
/// given total heading change at constant speed (bisection; the relation is
/// monotone over the bracket).
fn solve_turn_amplitude(total_heading: f64, v: f64, l_r: f64, steps: usize) -> f64 {
    let profile: Vec<f64> = (0..steps)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / steps as f64).cos()))
        .collect();
    let accumulated = |amp: f64| -> f64 {
        profile
            .iter()
            .map(|w| (amp * w).sin() * v / l_r * SYNTH_DT)
            .sum()
    };
    let (mut lo, mut hi) = (0.0, 1.2);
    assert!(accumulated(hi) > total_heading, "turn bracket too small");
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if accumulated(mid) < total_heading {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn fork_turn_actions(v: f64, l_r: f64, left: bool, turn_start: usize) -> Vec<BicycleAction> {
    let amp = solve_turn_amplitude(FORK_ANGLE, v, l_r, FORK_TURN_STEPS);
    let sign = if left { 1.0 } else { -1.0 };
    (0..SYNTH_HORIZON - 1)
        .map(|t| {
            if t >= turn_start && t < turn_start + FORK_TURN_STEPS {
                let i = t - turn_start;
                let w = 0.5
                    * (1.0
                        - (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / FORK_TURN_STEPS as f64)
                            .cos());
                BicycleAction::new(0.0, sign * amp * w)
            } else {
                BicycleAction::new(0.0, 0.0)
            }
        })
        .collect()
}

fn rect_polygon(x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Point2> {
    vec![
        Point2::new(x0, y0),
        Point2::new(x1, y0),
        Point2::new(x1, y1),
        Point2::new(x0, y1),
    ]
}

fn rotated_corridor(angle: f64, length: f64, half_width: f64) -> Vec<Point2> {
    let (s, c) = angle.sin_cos();
    let rot = |x: f64, y: f64| Point2::new(c * x - s * y, s * x + c * y);
    vec![
        rot(0.0, -half_width),
        rot(length, -half_width),
        rot(length, half_width),
        rot(0.0, half_width),
    ]
}

fn fork_map() -> MapData {
    let mut polys = vec![rect_polygon(-80.0, 0.0, -4.0, 4.0)];
    for sign in [1.0, -1.0] {
        polys.push(rotated_corridor(sign * FORK_ANGLE, 80.0, 4.0));
    }
    // junction disc bridging branch mouths
    let octagon: Vec<Point2> = (0..8)
        .map(|i| {
            let a = i as f64 / 8.0 * std::f64::consts::TAU;
            Point2::new(8.0 * a.cos(), 8.0 * a.sin())
        })
        .collect();
    polys.push(octagon);

    let (s, c) = FORK_ANGLE.sin_cos();
    MapData {
        driveable_polygons: polys,
        lane_lines: vec![
            LaneLine {
                points: vec![Point2::new(-80.0, 0.0), Point2::new(0.0, 0.0)],
                width: 0.3,
            },
            LaneLine {
                points: vec![Point2::new(0.0, 0.0), Point2::new(80.0 * c, 80.0 * s)],
                width: 0.3,
            },
            LaneLine {
                points: vec![Point2::new(0.0, 0.0), Point2::new(80.0 * c, -80.0 * s)],
                width: 0.3,
            },
        ],
    }
}

fn straight_map() -> MapData {
    MapData {
        driveable_polygons: vec![rect_polygon(-80.0, 80.0, -8.0, 8.0)],
        lane_lines: vec![LaneLine {
            points: vec![Point2::new(-80.0, 0.0), Point2::new(80.0, 0.0)],
            width: 0.3,
        }],
    }
}

fn roundabout_map() -> MapData {
    let disc: Vec<Point2> = (0..24)
        .map(|i| {
            let a = i as f64 / 24.0 * std::f64::consts::TAU;
            Point2::new(16.0 * a.cos(), 16.0 * a.sin())
        })
        .collect();
    let mut polys = vec![disc];
    for i in 0..4 {
        let angle = i as f64 * std::f64::consts::FRAC_PI_2;
        let (s, c) = angle.sin_cos();
        let along = |d: f64, w: f64| Point2::new(c * d - s * w, s * d + c * w);
        polys.push(vec![
            along(12.0, -4.0),
            along(44.0, -4.0),
            along(44.0, 4.0),
            along(12.0, 4.0),
        ]);
    }
    let ring: Vec<Point2> = (0..=24)
        .map(|i| {
            let a = i as f64 / 24.0 * std::f64::consts::TAU;
            Point2::new(10.0 * a.cos(), 10.0 * a.sin())
        })
        .collect();
    MapData {
        driveable_polygons: polys,
        lane_lines: vec![LaneLine {
            points: ring,
            width: 0.3,
        }],
    }
}

/// Fraction of fork scenes whose window stays before the junction.
const FORK_STRAIGHT_FRACTION: f64 = 0.25;

pub fn synth_dataset(kind: SynthKind, n_scenes: usize, seed: u64) -> SynthDataset {
    assert!(n_scenes >= 1);
    let map = match kind {
        SynthKind::Straight => straight_map(),
        SynthKind::Fork => fork_map(),
        SynthKind::RoundaboutLite => roundabout_map(),
    };
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut fork_info = Vec::new();
    for i in 0..n_scenes {
        let mut rng = stream_rng(seed, &[kind as u64, i as u64]);
        match kind {
            SynthKind::Straight => {
                let mut agents = Vec::new();
                let n_agents = if rng.random_range(0.0..1.0) < 0.5 {
                    2
                } else {
                    1
                };
                for j in 0..n_agents {
                    let attrs = sample_attrs(&mut rng);
                    let v = rng.random_range(5.0..10.0);
                    let forward = j == 0;
                    let (y, psi, x0) = if forward {
                        (-2.0, 0.0, rng.random_range(-70.0..-30.0))
                    } else {
                        (2.0, std::f64::consts::PI, rng.random_range(30.0..70.0))
                    };
                    let start = AgentState::new(x0, y, psi, v);
                    let actions = vec![BicycleAction::new(0.0, 0.0); SYNTH_HORIZON - 1];
                    let states = rollout_actions(start, &actions, attrs.rear_axis_offset);
                    agents.push(SceneAgent {
                        id: (i * 16 + j) as u64 + 1,
                        attributes: attrs,
                        trajectory: Trajectory::new(states, SYNTH_DT).expect("synth trajectory"),
                    });
                }
                scenes.push(
                    Scene::new(agents, map.clone(), SYNTH_T_OBS, SYNTH_HORIZON)
                        .expect("synth scene"),
                );
            }
            SynthKind::Fork => {
                let attrs = sample_attrs(&mut rng);
                let l_r = attrs.rear_axis_offset;
                let v = rng.random_range(7.0..9.0);
                let straight_window = rng.random_range(0.0..1.0) < FORK_STRAIGHT_FRACTION;
                let branch_left = rng.random_range(0.0..1.0) < 0.5;

                let (x0, turn_start) = if straight_window {
                    (rng.random_range(-62.0..-48.0), usize::MAX)
                } else {
                    let t_branch = rng.random_range(1.3..2.0);
                    (-v * t_branch, (t_branch / SYNTH_DT).round() as usize)
                };
                let start = AgentState::new(x0, 0.0, 0.0, v);

                let mk = |left: bool| -> Vec<AgentState> {
                    let actions = if straight_window {
                        vec![BicycleAction::new(0.0, 0.0); SYNTH_HORIZON - 1]
                    } else {
                        fork_turn_actions(v, l_r, left, turn_start)
                    };
                    rollout_actions(start, &actions, l_r)
                };
                let left_states = mk(true);
                let right_states = mk(false);
                let taken = if branch_left {
                    left_states.clone()
                } else {
                    right_states.clone()
                };
                fork_info.push(ForkSceneInfo {
                    straight_window,
                    branch_left,
                    final_left: left_states.last().unwrap().position(),
                    final_right: right_states.last().unwrap().position(),
                });
                let agent = SceneAgent {
                    id: i as u64 + 1,
                    attributes: attrs,
                    trajectory: Trajectory::new(taken, SYNTH_DT).expect("synth trajectory"),
                };
                scenes.push(
                    Scene::new(vec![agent], map.clone(), SYNTH_T_OBS, SYNTH_HORIZON)
                        .expect("synth scene"),
                );
            }
            SynthKind::RoundaboutLite => {
                let attrs = sample_attrs(&mut rng);
                let l_r = attrs.rear_axis_offset;
                let radius = rng.random_range(9.0..13.0);
                let v = rng.random_range(5.0..8.0);
                let phi0 = rng.random_range(0.0..std::f64::consts::TAU);
                // constant slip angle for an exact circle of the given radius
                let beta = (l_r / radius).asin();
                let exit_step = rng.random_range(16..32usize);
                let psi0 = phi0 + std::f64::consts::FRAC_PI_2 - beta;
                let start = AgentState::new(radius * phi0.cos(), radius * phi0.sin(), psi0, v);
                let actions: Vec<BicycleAction> = (0..SYNTH_HORIZON - 1)
                    .map(|t| {
                        if t < exit_step {
                            BicycleAction::new(0.0, beta)
                        } else {
                            BicycleAction::new(0.0, 0.0)
                        }
                    })
                    .collect();
                let states = rollout_actions(start, &actions, l_r);
                let agent = SceneAgent {
                    id: i as u64 + 1,
                    attributes: attrs,
                    trajectory: Trajectory::new(states, SYNTH_DT).expect("synth trajectory"),
                };
                scenes.push(
                    Scene::new(vec![agent], map.clone(), SYNTH_T_OBS, SYNTH_HORIZON)
                        .expect("synth scene"),
                );
            }
        }
    }
    SynthDataset {
        scenes,
        map,
        fork_info,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::{grid_search_lr, recover_actions};

    #[test]
    fn straight_recovers_zero_slip() {
        let ds = synth_dataset(SynthKind::Straight, 10, 5);
        for scene in &ds.scenes {
            for agent in &scene.agents {
                let actions =
                    recover_actions(&agent.trajectory, agent.attributes.rear_axis_offset).unwrap();
                for a in actions {
                    assert!(a.beta.abs() < 1e-9, "beta {}", a.beta);
                    assert!(a.alpha.abs() < 1e-9, "alpha {}", a.alpha);
                }
            }
        }
    }

    #[test]
    fn fork_branch_ratio_is_balanced() {
        let ds = synth_dataset(SynthKind::Fork, 1000, 7);
        let branched: Vec<_> = ds.fork_info.iter().filter(|f| !f.straight_window).collect();
        let left = branched.iter().filter(|f| f.branch_left).count();
        let ratio = left as f64 / branched.len() as f64;
        assert!(
            (0.45..=0.55).contains(&ratio),
            "left-branch ratio {ratio} over {} branching scenes",
            branched.len()
        );
    }

    #[test]
    fn fork_branches_separate() {
        let ds = synth_dataset(SynthKind::Fork, 50, 11);
        for (scene, info) in ds.scenes.iter().zip(&ds.fork_info) {
            if info.straight_window {
                assert!(info.branch_separation() < 1e-9);
                // straight windows never reach the junction
                for s in &scene.agents[0].trajectory.states {
                    assert!(
                        s.x < -1.0,
                        "straight window leaked past junction: x={}",
                        s.x
                    );
                }
            } else {
                assert!(
                    info.branch_separation() > 8.0,
                    "separation {}",
                    info.branch_separation()
                );
                let last = scene.agents[0].trajectory.states.last().unwrap();
                let expect = if info.branch_left {
                    info.final_left
                } else {
                    info.final_right
                };
                assert!((last.position().distance(expect)) < 1e-9);
            }
        }
    }

    #[test]
    fn all_kinds_fit_exactly_at_known_rear_axle() {
        for kind in [
            SynthKind::Straight,
            SynthKind::Fork,
            SynthKind::RoundaboutLite,
        ] {
            let ds = synth_dataset(kind, 8, 13);
            for scene in &ds.scenes {
                for agent in &scene.agents {
                    let (l_r, loss) =
                        grid_search_lr(&agent.trajectory, agent.attributes.length).unwrap();
                    assert!(loss < 1e-9, "{kind:?}: loss {loss}");
                    // identifiable only when the trajectory curves
                    let curls = agent
                        .trajectory
                        .states
                        .windows(2)
                        .any(|w| (w[1].psi - w[0].psi).abs() > 1e-6);
                    if curls {
                        assert!(
                            (l_r - agent.attributes.rear_axis_offset).abs() < LR_GRID_STEP + 1e-9,
                            "{kind:?}: found {l_r}, generated {}",
                            agent.attributes.rear_axis_offset
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_dataset(SynthKind::Fork, 5, 99);
        let b = synth_dataset(SynthKind::Fork, 5, 99);
        for (sa, sb) in a.scenes.iter().zip(&b.scenes) {
            assert_eq!(
                sa.agents[0].trajectory.states,
                sb.agents[0].trajectory.states
            );
        }
    }
}
