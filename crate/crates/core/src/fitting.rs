//! Recovering bicycle actions from recorded trajectories and fitting the
//! per-vehicle rear-axle distance by grid search.
//!
//! Action recovery runs the replayed-state recursion: the previous position,
//! heading, and speed on the right-hand side come from the replayed rollout,
//! not the dataset, so replaying the recovered actions reproduces the recorded
//! positions exactly (to float precision) for *any* input positions, noisy or
//! not. Headings are only approximately reproduced; the fit loss measures the
//! worst heading discrepancy.

use crate::geom::wrap_angle;
use crate::kinematics::{bicycle_step, BicycleAction};
use crate::scene::{AgentState, Trajectory};
use thiserror::Error;

/// Grid spacing for the rear-axle search: 1 cm.
pub const LR_GRID_STEP: f64 = 0.01;

#[derive(Debug, Error)]
pub enum FittingError {
    #[error("trajectory has {0} valid steps, need at least 2")]
    TooShort(usize),
    #[error("trajectory validity is not contiguous (gap at step {0})")]
    NonContiguous(usize),
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vehicle length must be positive, got {0}")]
    BadLength(f64),
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
}

/// Result of fitting one vehicle.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Actions for steps 2..=T (one fewer than the number of valid states).
    pub actions: Vec<BicycleAction>,
    pub l_r: f64,
    pub fit_loss: f64,
    pub replayed: Trajectory,
}

/// The contiguous valid window of a trajectory.
fn valid_window(traj: &Trajectory) -> Result<(usize, usize), FittingError> {
    let first = traj.valid_mask.iter().position(|&v| v);
    let last = traj.valid_mask.iter().rposition(|&v| v);
    let (Some(first), Some(last)) = (first, last) else {
        return Err(FittingError::TooShort(0));
    };
    for t in first..=last {
        if !traj.valid_mask[t] {
            return Err(FittingError::NonContiguous(t));
        }
    }
    let n = last + 1 - first;
    if n < 2 {
        return Err(FittingError::TooShort(n));
    }
    Ok((first, last + 1))
}

/// Recovers the bicycle actions that reproduce the recorded displacements.
///
/// For each step the target position is the ground truth; everything else is
/// taken from the replayed recursion seeded at the first valid state.
pub fn recover_actions(traj: &Trajectory, l_r: f64) -> Result<Vec<BicycleAction>, FittingError> {
    Ok(recover_and_replay(traj, l_r)?.0)
}

fn recover_and_replay(
    traj: &Trajectory,
    l_r: f64,
) -> Result<(Vec<BicycleAction>, Vec<AgentState>), FittingError> {
    let (start, end) = valid_window(traj)?;
    let dt = traj.dt;
    let mut replayed = Vec::with_capacity(end - start);
    let mut actions = Vec::with_capacity(end - start - 1);
    let mut s = traj.states[start];
    replayed.push(s);
    for t in start + 1..end {
        let gt = traj.states[t];
        let dx = gt.x - s.x;
        let dy = gt.y - s.y;
        let dist = dx.hypot(dy);
        let alpha = (dist / dt - s.v) / dt;
        let beta = if dist == 0.0 {
            0.0
        } else {
            wrap_angle(dy.atan2(dx) - s.psi)
        };
        let a = BicycleAction { alpha, beta };
        s = bicycle_step(s, a, l_r, dt)?;
        actions.push(a);
        replayed.push(s);
    }
    Ok((actions, replayed))
}

/// Rolls the bicycle model forward from `s1` through `actions`.
pub fn replay(
    s1: AgentState,
    actions: &[BicycleAction],
    l_r: f64,
    dt: f64,
) -> Result<Trajectory, FittingError> {
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(s1);
    let mut s = s1;
    for a in actions {
        s = bicycle_step(s, *a, l_r, dt)?;
        states.push(s);
    }
    Ok(Trajectory::new(states, dt).expect("positive dt"))
}

/// Worst-case heading discrepancy loss: `max_t 2 (1 - cos(psi_t - psi_t_gt))`
/// over steps 2..=T. Symmetric in the discrepancy, 2pi-periodic, range [0, 4].
pub fn fit_loss(replayed_psi: &[f64], gt_psi: &[f64]) -> Result<f64, FittingError> {
    if replayed_psi.len() != gt_psi.len() {
        return Err(FittingError::LengthMismatch(
            replayed_psi.len(),
            gt_psi.len(),
        ));
    }
    if replayed_psi.len() < 2 {
        return Err(FittingError::TooShort(replayed_psi.len()));
    }
    let mut worst = 0.0f64;
    for t in 1..replayed_psi.len() {
        let loss = 2.0 * (1.0 - (replayed_psi[t] - gt_psi[t]).cos());
        worst = worst.max(loss);
    }
    Ok(worst)
}

/// Grid-searches the rear-axle distance in 1 cm increments up to half the
/// vehicle length, minimizing [`fit_loss`]. Ties break toward the larger
/// value: straight tracks leave the parameter unidentified and larger values
/// overfit annotation noise less.
pub fn grid_search_lr(traj: &Trajectory, length: f64) -> Result<(f64, f64), FittingError> {
    if !(length > 0.0) {
        return Err(FittingError::BadLength(length));
    }
    let (start, end) = valid_window(traj)?;
    let gt_psi: Vec<f64> = traj.states[start..end].iter().map(|s| s.psi).collect();

    let n_cells = ((length / 2.0) / LR_GRID_STEP + 1e-9).floor() as usize;
    let n_cells = n_cells.max(1);
    let mut best = (LR_GRID_STEP, f64::INFINITY);
    for i in 1..=n_cells {
        let l_r = i as f64 * LR_GRID_STEP;
        let (_, replayed) = recover_and_replay(traj, l_r)?;
        let replayed_psi: Vec<f64> = replayed.iter().map(|s| s.psi).collect();
        let loss = fit_loss(&replayed_psi, &gt_psi)?;
        if loss <= best.1 {
            best = (l_r, loss);
        }
    }
    Ok(best)
}

/// Candidate rear-axle values for a given vehicle length, exposed for tests
/// and reporting.
pub fn lr_candidates(length: f64) -> Vec<f64> {
    let n_cells = (((length / 2.0) / LR_GRID_STEP + 1e-9).floor() as usize).max(1);
    (1..=n_cells).map(|i| i as f64 * LR_GRID_STEP).collect()
}

/// Full fit of one vehicle: grid search, then actions and replay at the
/// winning rear-axle value.
pub fn fit_vehicle(traj: &Trajectory, length: f64) -> Result<FitResult, FittingError> {
    let (l_r, loss) = grid_search_lr(traj, length)?;
    let (actions, replayed) = recover_and_replay(traj, l_r)?;
    let dt = traj.dt;
    Ok(FitResult {
        actions,
        l_r,
        fit_loss: loss,
        replayed: Trajectory::new(replayed, dt).expect("positive dt"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_standard_normal, stream_rng};
    use rand::RngExt;

    fn straight_trajectory(v: f64, n: usize, dt: f64) -> Trajectory {
        let states = (0..n)
            .map(|t| AgentState::new(v * dt * t as f64, 0.0, 0.0, v))
            .collect();
        Trajectory::new(states, dt).unwrap()
    }

    fn generated_trajectory(
        rng: &mut rand_chacha::ChaCha8Rng,
        l_r: f64,
        n: usize,
        dt: f64,
    ) -> (Trajectory, Vec<BicycleAction>) {
        let mut s = AgentState::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(2.0..10.0),
        );
        let mut states = vec![s];
        let mut actions = Vec::new();
        for _ in 1..n {
            let a = BicycleAction::new(rng.random_range(-1.5..1.5), rng.random_range(-0.4..0.4));
            s = bicycle_step(s, a, l_r, dt).unwrap();
            states.push(s);
            actions.push(a);
        }
        (Trajectory::new(states, dt).unwrap(), actions)
    }

    #[test]
    fn straight_track_recovers_zero_actions() {
        let traj = straight_trajectory(5.0, 20, 0.1);
        let actions = recover_actions(&traj, 1.0).unwrap();
        for a in actions {
            assert!(a.alpha.abs() < 1e-9);
            assert!(a.beta.abs() < 1e-9);
        }
    }

    #[test]
    fn single_jump_from_rest() {
        // (0,0) -> (1,0), v0 = 0, psi0 = 0, dt = 0.1: alpha = 100, beta = 0
        let states = vec![
            AgentState::new(0.0, 0.0, 0.0, 0.0),
            AgentState::new(1.0, 0.0, 0.0, 10.0),
        ];
        let traj = Trajectory::new(states, 0.1).unwrap();
        let actions = recover_actions(&traj, 1.0).unwrap();
        assert_eq!(actions.len(), 1);
        assert!((actions[0].alpha - 100.0).abs() < 1e-9);
        assert!(actions[0].beta.abs() < 1e-12);
    }

    #[test]
    fn generate_then_recover_roundtrip() {
        let mut rng = stream_rng(21, &[4]);
        for _ in 0..20 {
            let l_r = rng.random_range(0.5..2.0);
            let (traj, original) = generated_trajectory(&mut rng, l_r, 30, 0.1);
            let recovered = recover_actions(&traj, l_r).unwrap();
            assert_eq!(recovered.len(), original.len());
            for (r, o) in recovered.iter().zip(&original) {
                assert!(
                    (r.alpha - o.alpha).abs() < 1e-9,
                    "{} vs {}",
                    r.alpha,
                    o.alpha
                );
                assert!(
                    wrap_angle(r.beta - o.beta).abs() < 1e-9,
                    "{} vs {}",
                    r.beta,
                    o.beta
                );
            }
        }
    }

    #[test]
    fn replay_of_empty_actions_is_single_state() {
        let s = AgentState::new(1.0, 2.0, 0.3, 4.0);
        let traj = replay(s, &[], 1.0, 0.1).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.states[0], s);
    }

    #[test]
    fn replay_zero_actions_at_rest_is_constant() {
        let s = AgentState::new(1.0, 2.0, 0.3, 0.0);
        let actions = vec![BicycleAction::new(0.0, 0.0); 5];
        let traj = replay(s, &actions, 1.0, 0.1).unwrap();
        for st in &traj.states {
            assert_eq!(*st, s);
        }
    }

    /// Replaying recovered actions reproduces positions exactly, even for
    /// noisy tracks that no bicycle model generated.
    #[test]
    fn position_exact_replay_on_noisy_tracks() {
        let mut rng = stream_rng(22, &[5]);
        for _ in 0..20 {
            let (mut traj, _) = generated_trajectory(&mut rng, 1.1, 25, 0.1);
            for s in &mut traj.states {
                *s = AgentState::new(
                    s.x + 0.05 * sample_standard_normal(&mut rng),
                    s.y + 0.05 * sample_standard_normal(&mut rng),
                    s.psi,
                    s.v,
                );
            }
            let actions = recover_actions(&traj, 0.7).unwrap();
            let replayed = replay(traj.states[0], &actions, 0.7, 0.1).unwrap();
            for (r, gt) in replayed.states.iter().zip(&traj.states) {
                assert!((r.x - gt.x).abs() < 1e-9);
                assert!((r.y - gt.y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_loss_examples() {
        assert_eq!(fit_loss(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);

        // one discrepancy of pi -> 4
        let loss = fit_loss(&[0.0, std::f64::consts::PI], &[0.0, 0.0]).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);

        // discrepancies {0.1, -0.1} are symmetric
        let loss = fit_loss(&[0.0, 0.1, -0.1], &[0.0, 0.0, 0.0]).unwrap();
        let expect = 2.0 * (1.0 - 0.1f64.cos());
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.0099917).abs() < 1e-6);
    }

    #[test]
    fn fit_loss_rejects_length_mismatch() {
        assert!(matches!(
            fit_loss(&[0.0, 1.0], &[0.0]),
            Err(FittingError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn fit_loss_invariant_to_2pi_shifts() {
        let reps = [0.3, -1.2, 2.9];
        let gts = [0.1, -1.0, 2.5];
        let base = fit_loss(&reps, &gts).unwrap();
        let shifted: Vec<f64> = reps
            .iter()
            .enumerate()
            .map(|(i, r)| r + 2.0 * std::f64::consts::PI * (i as f64 + 1.0))
            .collect();
        let loss = fit_loss(&shifted, &gts).unwrap();
        assert!((loss - base).abs() < 1e-12);
    }

    #[test]
    fn grid_search_recovers_generating_lr() {
        let mut rng = stream_rng(23, &[6]);
        let l_r_true = 0.87;
        let (traj, _) = generated_trajectory(&mut rng, l_r_true, 40, 0.1);
        let (l_r, loss) = grid_search_lr(&traj, 4.0).unwrap();
        assert!(
            (l_r - l_r_true).abs() < LR_GRID_STEP + 1e-12,
            "found {l_r}, expected ~{l_r_true}"
        );
        assert!(loss < 1e-9);
    }

    #[test]
    fn grid_search_straight_track_ties_to_half_length() {
        let traj = straight_trajectory(8.0, 30, 0.1);
        let (l_r, loss) = grid_search_lr(&traj, 4.0).unwrap();
        assert_eq!(l_r, 2.0);
        assert!(loss < 1e-12);
    }

    #[test]
    fn grid_candidates_for_length_four() {
        let cands = lr_candidates(4.0);
        assert_eq!(cands.len(), 200);
        assert!((cands[199] - 2.0).abs() < 1e-12);
        assert!((cands[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn grid_search_result_in_range() {
        let mut rng = stream_rng(24, &[7]);
        for _ in 0..5 {
            let (traj, _) = generated_trajectory(&mut rng, 1.0, 20, 0.1);
            let length = rng.random_range(2.0..6.0);
            let (l_r, _) = grid_search_lr(&traj, length).unwrap();
            assert!(l_r > 0.0 && l_r <= length / 2.0 + 1e-12);
        }
    }

    #[test]
    fn too_short_trajectory_is_an_error() {
        let traj = Trajectory::new(vec![AgentState::new(0.0, 0.0, 0.0, 0.0)], 0.1).unwrap();
        assert!(matches!(
            grid_search_lr(&traj, 4.0),
            Err(FittingError::TooShort(1))
        ));
    }

    #[test]
    fn masked_window_is_used() {
        // valid only in the middle; fitting sees just that window
        let mut states = vec![AgentState::new(0.0, 0.0, 0.0, 5.0); 10];
        for (t, s) in states.iter_mut().enumerate() {
            *s = AgentState::new(0.5 * t as f64, 0.0, 0.0, 5.0);
        }
        let mut mask = vec![false; 10];
        for m in &mut mask[3..8] {
            *m = true;
        }
        let traj = Trajectory::with_mask(states, 0.1, mask).unwrap();
        let actions = recover_actions(&traj, 1.0).unwrap();
        assert_eq!(actions.len(), 4);
    }
}
