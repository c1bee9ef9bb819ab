//! Domain types shared by all modules: agent states, attributes, trajectories,
//! scenes, and the simplified map.

use crate::geom::{wrap_angle, Point2, Pose};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("invalid agent attributes: {0}")]
    InvalidAttributes(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
}

/// Pose + speed of one agent at one timestep, in the global frame.
///
/// `psi` is kept in `(-pi, pi]`; all constructors go through [`wrap_angle`].
/// Speed is non-negative by convention but not enforced: reversing shows up
/// in recorded data as motion opposed to the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl AgentState {
    /// Panics on non-finite input; upstream ingestion validates raw data.
    pub fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        assert!(
            x.is_finite() && y.is_finite() && psi.is_finite() && v.is_finite(),
            "non-finite agent state ({x}, {y}, {psi}, {v})"
        );
        AgentState {
            x,
            y,
            psi: wrap_angle(psi),
            v,
        }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.psi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentType {
    Vehicle,
    PedestrianBicycle,
}

/// Immutable per-agent attributes.
///
/// `rear_axis_offset` is the distance from the geometric center to the rear
/// axle, the per-vehicle parameter fitted by grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentAttributes {
    pub length: f64,
    pub width: f64,
    pub rear_axis_offset: f64,
    pub agent_type: AgentType,
}

impl AgentAttributes {
    pub fn new(
        length: f64,
        width: f64,
        rear_axis_offset: f64,
        agent_type: AgentType,
    ) -> Result<Self, SceneError> {
        if !(length.is_finite() && width.is_finite() && rear_axis_offset.is_finite()) {
            return Err(SceneError::NonFinite {
                context: "agent attributes",
            });
        }
        if length <= 0.0 || width <= 0.0 {
            return Err(SceneError::InvalidAttributes(format!(
                "length and width must be positive, got {length} x {width}"
            )));
        }
        if rear_axis_offset <= 0.0 || rear_axis_offset > length / 2.0 {
            return Err(SceneError::InvalidAttributes(format!(
                "rear_axis_offset must be in (0, length/2], got {rear_axis_offset} for length {length}"
            )));
        }
        Ok(AgentAttributes {
            length,
            width,
            rear_axis_offset,
            agent_type,
        })
    }

    /// A vehicle with the rear axle at a quarter length behind the center, the
    /// placeholder used before fitting assigns a per-vehicle value.
    pub fn vehicle(length: f64, width: f64) -> Self {
        AgentAttributes::new(length, width, length / 4.0, AgentType::Vehicle)
            .expect("valid default attributes")
    }
}

/// States of one agent on a uniform time grid, with a per-step presence mask.
///
/// `valid_mask[t]` is false where the agent is absent from the recording;
/// masked steps hold a placeholder state and are excluded from losses and
/// metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub dt: f64,
    pub valid_mask: Vec<bool>,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, dt: f64) -> Result<Self, SceneError> {
        let n = states.len();
        Trajectory::with_mask(states, dt, vec![true; n])
    }

    pub fn with_mask(
        states: Vec<AgentState>,
        dt: f64,
        valid_mask: Vec<bool>,
    ) -> Result<Self, SceneError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SceneError::InvalidTrajectory(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if states.len() != valid_mask.len() {
            return Err(SceneError::InvalidTrajectory(format!(
                "mask length {} does not match state count {}",
                valid_mask.len(),
                states.len()
            )));
        }
        Ok(Trajectory {
            states,
            dt,
            valid_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn valid_at(&self, t: usize) -> bool {
        self.valid_mask.get(t).copied().unwrap_or(false)
    }

    /// True when the agent is present at every step of `[start, end)`.
    pub fn valid_over(&self, start: usize, end: usize) -> bool {
        (start..end).all(|t| self.valid_at(t))
    }
}

/// Simplified map: driveable area polygons plus lane lines with a width.
///
/// Polygons are closed (the last vertex connects back to the first) and must
/// be convex for rendering; polylines carry the full line width in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapData {
    pub driveable_polygons: Vec<Vec<Point2>>,
    pub lane_lines: Vec<LaneLine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneLine {
    pub points: Vec<Point2>,
    pub width: f64,
}

impl MapData {
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, poly) in self.driveable_polygons.iter().enumerate() {
            if poly.len() < 3 {
                return Err(SceneError::InvalidMap(format!(
                    "polygon {i} has {} vertices, need at least 3",
                    poly.len()
                )));
            }
        }
        for (i, line) in self.lane_lines.iter().enumerate() {
            if line.points.len() < 2 {
                return Err(SceneError::InvalidMap(format!(
                    "polyline {i} has {} vertices, need at least 2",
                    line.points.len()
                )));
            }
            if !(line.width.is_finite() && line.width > 0.0) {
                return Err(SceneError::InvalidMap(format!(
                    "polyline {i} has non-positive width {}",
                    line.width
                )));
            }
        }
        Ok(())
    }
}

/// One agent in a scene: attributes, trajectory, and a stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAgent {
    /// Stable id (track id from the source data); keys per-agent RNG streams.
    pub id: u64,
    pub attributes: AgentAttributes,
    pub trajectory: Trajectory,
}

/// N agents on a shared time grid, a map, and the observed/total horizon split.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub agents: Vec<SceneAgent>,
    pub map: MapData,
    /// Number of observed steps; prediction starts at index `t_obs`.
    pub t_obs: usize,
    /// Total steps T; every trajectory has exactly this many slots.
    pub horizon: usize,
}

impl Scene {
    pub fn new(
        agents: Vec<SceneAgent>,
        map: MapData,
        t_obs: usize,
        horizon: usize,
    ) -> Result<Self, SceneError> {
        if t_obs < 1 || t_obs >= horizon {
            return Err(SceneError::InvalidScene(format!(
                "need 1 <= t_obs < horizon, got t_obs={t_obs}, horizon={horizon}"
            )));
        }
        let mut dt = None;
        for agent in &agents {
            if agent.trajectory.len() != horizon {
                return Err(SceneError::InvalidScene(format!(
                    "agent {} has {} steps, scene horizon is {horizon}",
                    agent.id,
                    agent.trajectory.len()
                )));
            }
            match dt {
                None => dt = Some(agent.trajectory.dt),
                Some(d) if (d - agent.trajectory.dt).abs() > 1e-12 => {
                    return Err(SceneError::InvalidScene(format!(
                        "agent {} dt {} differs from scene dt {d}",
                        agent.id, agent.trajectory.dt
                    )));
                }
                _ => {}
            }
        }
        map.validate()?;
        Ok(Scene {
            agents,
            map,
            t_obs,
            horizon,
        })
    }

    pub fn dt(&self) -> f64 {
        self.agents.first().map(|a| a.trajectory.dt).unwrap_or(0.1)
    }

    /// Number of steps to predict.
    pub fn future_len(&self) -> usize {
        self.horizon - self.t_obs
    }

    /// Indices of agents present over the whole window, eligible as egos.
    pub fn fully_valid_agents(&self) -> Vec<usize> {
        (0..self.agents.len())
            .filter(|&i| self.agents[i].trajectory.valid_over(0, self.horizon))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_constructor_wraps_heading() {
        let s = AgentState::new(0.0, 0.0, 4.0, 1.0);
        assert!((s.psi - (4.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn state_constructor_rejects_nan() {
        let _ = AgentState::new(f64::NAN, 0.0, 0.0, 0.0);
    }

    #[test]
    fn attributes_reject_bad_rear_axis() {
        assert!(AgentAttributes::new(4.0, 2.0, 2.5, AgentType::Vehicle).is_err());
        assert!(AgentAttributes::new(4.0, 2.0, 0.0, AgentType::Vehicle).is_err());
        assert!(AgentAttributes::new(4.0, 2.0, 2.0, AgentType::Vehicle).is_ok());
    }

    #[test]
    fn scene_requires_consistent_horizon() {
        let traj = Trajectory::new(vec![AgentState::new(0.0, 0.0, 0.0, 0.0); 10], 0.1).unwrap();
        let agent = SceneAgent {
            id: 1,
            attributes: AgentAttributes::vehicle(4.0, 2.0),
            trajectory: traj,
        };
        assert!(Scene::new(vec![agent.clone()], MapData::default(), 5, 10).is_ok());
        assert!(Scene::new(vec![agent.clone()], MapData::default(), 5, 11).is_err());
        assert!(Scene::new(vec![agent], MapData::default(), 10, 10).is_err());
    }

    #[test]
    fn map_validation_rejects_degenerate_polygon() {
        let map = MapData {
            driveable_polygons: vec![vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]],
            lane_lines: vec![],
        };
        assert!(map.validate().is_err());
    }
}
