//! Differentiable 2D rendering of ego-centered, ego-rotated birdview images,
//! plus a hard-rasterizer reference implementation.
//!
//! Primitives are rigid: constant base geometry plus a pose. The soft
//! renderer's backward pass therefore only needs signed-distance gradients
//! w.r.t. the query point, chained through the pose transform.

pub mod render;
pub mod sdf;

pub use render::{
    rasterize_hard, rasterize_soft, rasterize_soft_diff, render_band_meters, RasterJob,
};
pub use sdf::{sdf_with_gradient, signed_distance, BaseGeometry, SdfError};

use crate::geom::{Point2, RigidTransform};
use crate::scene::{AgentAttributes, AgentState, MapData, Scene};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error("invalid birdview config: {0}")]
    BadConfig(String),
    #[error("color component {0} outside [0, 1]")]
    BadColor(f64),
    #[error("ego agent {0} is not valid at step {1}")]
    EgoInvalid(usize, usize),
}

/// Rendering parameters. `sigma_blend` and `gamma_blend` are the soft
/// coverage and depth-softmax temperatures; distances inside the coverage
/// sigmoid are measured in normalized device coordinates so `sigma_blend` is
/// resolution-independent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirdviewConfig {
    pub resolution_px: usize,
    pub extent_m: f64,
    pub sigma_blend: f64,
    pub gamma_blend: f64,
    pub eps_bg: f64,
}

impl Default for BirdviewConfig {
    fn default() -> Self {
        BirdviewConfig {
            resolution_px: 256,
            extent_m: 100.0,
            sigma_blend: 1e-4,
            gamma_blend: 1e-2,
            eps_bg: 1e-3,
        }
    }
}

impl BirdviewConfig {
    /// Desk-scale preset: 64 px images over an 80 m extent, with a wider
    /// coverage band and a softer depth temperature so gradients through the
    /// image stay healthy at low resolution.
    pub fn toy() -> Self {
        BirdviewConfig {
            resolution_px: 64,
            extent_m: 80.0,
            sigma_blend: 1e-3,
            gamma_blend: 1.0,
            eps_bg: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if self.resolution_px == 0 {
            return Err(RasterError::BadConfig("resolution_px must be > 0".into()));
        }
        if !(self.extent_m > 0.0) {
            return Err(RasterError::BadConfig("extent_m must be > 0".into()));
        }
        if !(self.sigma_blend > 0.0) {
            return Err(RasterError::BadConfig("sigma_blend must be > 0".into()));
        }
        if !(self.gamma_blend > 0.0) {
            return Err(RasterError::BadConfig("gamma_blend must be > 0".into()));
        }
        Ok(())
    }

    /// Meters per pixel.
    pub fn meters_per_px(&self) -> f64 {
        self.extent_m / self.resolution_px as f64
    }

    /// Pixel (row, col) center in ego-frame meters. Ego forward (+x) points
    /// up the image, ego left (+y) points left.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point2 {
        let res = self.resolution_px as f64;
        let mpp = self.meters_per_px();
        Point2::new(
            (0.5 * res - (row as f64 + 0.5)) * mpp,
            (0.5 * res - (col as f64 + 0.5)) * mpp,
        )
    }
}

// Fixed palette; constants keep golden-image tests stable.
pub const COLOR_BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
pub const COLOR_DRIVEABLE: [f64; 3] = [0.35, 0.35, 0.35];
pub const COLOR_LANE_LINE: [f64; 3] = [1.0, 1.0, 1.0];
pub const COLOR_OTHER_AGENT: [f64; 3] = [0.2, 0.4, 1.0];
pub const COLOR_EGO: [f64; 3] = [1.0, 0.2, 0.2];

// Layer depths (larger = on top). All layers sit above the background score
// so fully covered primitives dominate the blend; see the render module docs.
pub const LAYER_DRIVEABLE: f64 = 1.0;
pub const LAYER_LANE_LINE: f64 = 2.0;
pub const LAYER_OTHER_AGENT: f64 = 3.0;
pub const LAYER_EGO: f64 = 4.0;

/// A renderable primitive: constant base geometry, rigid pose into the render
/// frame, color, and layer depth.
#[derive(Debug, Clone)]
pub struct DrawPrimitive {
    pub geometry: BaseGeometry,
    pub pose: RigidTransform,
    pub color: [f64; 3],
    pub layer: f64,
}

impl DrawPrimitive {
    pub fn new(
        geometry: BaseGeometry,
        pose: RigidTransform,
        color: [f64; 3],
        layer: f64,
    ) -> Result<Self, RasterError> {
        geometry.validate()?;
        for c in color {
            if !(0.0..=1.0).contains(&c) {
                return Err(RasterError::BadColor(c));
            }
        }
        Ok(DrawPrimitive {
            geometry,
            pose,
            color,
            layer,
        })
    }

    /// An oriented box given by center, dimensions, and angle.
    pub fn oriented_box(
        center: Point2,
        length: f64,
        width: f64,
        angle: f64,
        color: [f64; 3],
        layer: f64,
    ) -> Result<Self, RasterError> {
        DrawPrimitive::new(
            BaseGeometry::Box { length, width },
            RigidTransform::new(center, angle),
            color,
            layer,
        )
    }
}

/// Smallest absolute signed distance from a point to any primitive boundary,
/// in meters; classifies pixels as interior/exterior for convergence tests.
pub fn min_abs_signed_distance(prims: &[DrawPrimitive], p: Point2) -> f64 {
    prims
        .iter()
        .map(|prim| {
            let local = prim.pose.inverse().apply(p);
            sdf_with_gradient(local, &prim.geometry).0.abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Builds the ego-frame primitive list for arbitrary per-agent states (the
/// rollout engine renders simulated states through this).
///
/// `states[i] = None` marks an agent absent from the frame. Order is fixed:
/// driveable polygons, lane lines, other agents by index, ego last on top.
pub fn primitives_for_states(
    map: &MapData,
    agents: &[(AgentAttributes, Option<AgentState>)],
    ego_index: usize,
) -> Result<Vec<DrawPrimitive>, RasterError> {
    let Some(ego_state) = agents.get(ego_index).and_then(|(_, s)| *s) else {
        return Err(RasterError::EgoInvalid(ego_index, 0));
    };
    let ego_inv = ego_state.pose().transform().inverse();

    let mut prims = Vec::new();
    for poly in &map.driveable_polygons {
        prims.push(DrawPrimitive::new(
            BaseGeometry::convex_polygon(poly.clone()),
            ego_inv,
            COLOR_DRIVEABLE,
            LAYER_DRIVEABLE,
        )?);
    }
    for line in &map.lane_lines {
        prims.push(DrawPrimitive::new(
            BaseGeometry::Polyline {
                points: line.points.clone(),
                half_width: line.width / 2.0,
            },
            ego_inv,
            COLOR_LANE_LINE,
            LAYER_LANE_LINE,
        )?);
    }
    for (i, (attrs, state)) in agents.iter().enumerate() {
        if i == ego_index {
            continue;
        }
        let Some(state) = state else { continue };
        prims.push(DrawPrimitive::new(
            BaseGeometry::Box {
                length: attrs.length,
                width: attrs.width,
            },
            ego_inv.compose(&state.pose().transform()),
            COLOR_OTHER_AGENT,
            LAYER_OTHER_AGENT,
        )?);
    }
    let (ego_attrs, _) = &agents[ego_index];
    prims.push(DrawPrimitive::new(
        BaseGeometry::Box {
            length: ego_attrs.length,
            width: ego_attrs.width,
        },
        ego_inv.compose(&ego_state.pose().transform()),
        COLOR_EGO,
        LAYER_EGO,
    )?);
    Ok(prims)
}

/// Primitives for a recorded scene at step `t`, rendered from agent
/// `ego_index`'s frame. Agents outside the extent are retained; clipping is
/// the rasterizer's job.
pub fn scene_to_primitives(
    scene: &Scene,
    t: usize,
    ego_index: usize,
) -> Result<Vec<DrawPrimitive>, RasterError> {
    let agents: Vec<(AgentAttributes, Option<AgentState>)> = scene
        .agents
        .iter()
        .map(|a| {
            let state = a.trajectory.valid_at(t).then(|| a.trajectory.states[t]);
            (a.attributes, state)
        })
        .collect();
    if agents
        .get(ego_index)
        .map(|(_, s)| s.is_none())
        .unwrap_or(true)
    {
        return Err(RasterError::EgoInvalid(ego_index, t));
    }
    primitives_for_states(&scene.map, &agents, ego_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentType, SceneAgent, Trajectory};

    fn one_agent_scene() -> Scene {
        let states = vec![AgentState::new(3.0, 4.0, 0.5, 2.0); 10];
        let agent = SceneAgent {
            id: 1,
            attributes: AgentAttributes::new(4.0, 2.0, 1.0, AgentType::Vehicle).unwrap(),
            trajectory: Trajectory::new(states, 0.1).unwrap(),
        };
        Scene::new(vec![agent], MapData::default(), 5, 10).unwrap()
    }

    #[test]
    fn single_agent_empty_map_is_one_centered_box() {
        let prims = scene_to_primitives(&one_agent_scene(), 0, 0).unwrap();
        assert_eq!(prims.len(), 1);
        let p = &prims[0];
        assert!(p.pose.translation.norm() < 1e-12);
        assert!(p.pose.angle.abs() < 1e-12);
        assert_eq!(p.color, COLOR_EGO);
        assert_eq!(p.layer, LAYER_EGO);
    }

    #[test]
    fn second_agent_lands_in_ego_frame() {
        // ego heading pi/2; other agent 10 m north of ego is 10 m ahead
        let ego_states = vec![AgentState::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 1.0); 4];
        let other_states = vec![AgentState::new(0.0, 10.0, 0.0, 1.0); 4];
        let mk = |id, states: Vec<AgentState>| SceneAgent {
            id,
            attributes: AgentAttributes::vehicle(4.0, 2.0),
            trajectory: Trajectory::new(states, 0.1).unwrap(),
        };
        let scene = Scene::new(
            vec![mk(1, ego_states), mk(2, other_states)],
            MapData::default(),
            2,
            4,
        )
        .unwrap();
        let prims = scene_to_primitives(&scene, 1, 0).unwrap();
        assert_eq!(prims.len(), 2);
        let other = &prims[0];
        assert!((other.pose.translation.x - 10.0).abs() < 1e-12);
        assert!(other.pose.translation.y.abs() < 1e-12);
        assert_eq!(other.color, COLOR_OTHER_AGENT);
        // ego box is last and on top
        assert_eq!(prims[1].layer, LAYER_EGO);
    }

    #[test]
    fn agents_outside_extent_are_retained() {
        let ego_states = vec![AgentState::new(0.0, 0.0, 0.0, 1.0); 4];
        let far_states = vec![AgentState::new(500.0, 0.0, 0.0, 1.0); 4];
        let mk = |id, states: Vec<AgentState>| SceneAgent {
            id,
            attributes: AgentAttributes::vehicle(4.0, 2.0),
            trajectory: Trajectory::new(states, 0.1).unwrap(),
        };
        let scene = Scene::new(
            vec![mk(1, ego_states), mk(2, far_states)],
            MapData::default(),
            2,
            4,
        )
        .unwrap();
        let prims = scene_to_primitives(&scene, 0, 0).unwrap();
        assert_eq!(prims.len(), 2);
    }

    #[test]
    fn invalid_ego_is_an_error() {
        let scene = one_agent_scene();
        assert!(matches!(
            scene_to_primitives(&scene, 0, 3),
            Err(RasterError::EgoInvalid(3, 0))
        ));
    }
}
