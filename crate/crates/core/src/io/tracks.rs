//! Track CSV ingestion with overlapping-window slicing.
//!
//! The schema mirrors common drone-recorded track files:
//!
//! ```text
//! track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width
//! ```
//!
//! Frames sit on a uniform grid (10 Hz in the shipped datasets); speed is
//! derived as `v = hypot(vx, vy)` at ingestion. Agents partially present in a
//! window get a validity mask rather than being dropped.

use super::{io_err, IoError};
use crate::scene::{
    AgentAttributes, AgentState, AgentType, MapData, Scene, SceneAgent, Trajectory,
};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Deserialize)]
pub struct TrackFileRow {
    pub track_id: u64,
    pub frame_id: u64,
    pub timestamp_ms: u64,
    pub agent_type: String,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub psi_rad: f64,
    pub length: f64,
    pub width: f64,
}

/// Window slicing parameters: `horizon` frames per scene, windows advancing
/// by `stride`, with the first `t_obs` steps observed.
#[derive(Debug, Clone, Copy)]
pub struct Windowing {
    pub t_obs: usize,
    pub horizon: usize,
    pub stride: usize,
}

const REQUIRED_COLUMNS: [&str; 11] = [
    "track_id",
    "frame_id",
    "timestamp_ms",
    "agent_type",
    "x",
    "y",
    "vx",
    "vy",
    "psi_rad",
    "length",
    "width",
];

fn parse_agent_type(s: &str) -> Result<AgentType, IoError> {
    match s {
        "car" | "truck" | "vehicle" | "bus" => Ok(AgentType::Vehicle),
        "pedestrian/bicycle" | "pedestrian" | "bicycle" => Ok(AgentType::PedestrianBicycle),
        other => Err(IoError::UnknownAgentType(other.to_string())),
    }
}

/// Parsed and validated track table: rows grouped by track id (sorted), plus
/// the grid step in seconds.
pub(crate) fn parse_track_table(
    path: &Path,
) -> Result<Option<(BTreeMap<u64, Vec<TrackFileRow>>, f64)>, IoError> {
    let raw = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if raw.trim().is_empty() {
        return Ok(None);
    }
    let mut reader = csv::Reader::from_reader(raw.as_bytes());
    {
        let headers = reader.headers()?;
        for col in REQUIRED_COLUMNS {
            if !headers.iter().any(|h| h == col) {
                return Err(IoError::MissingColumn(col.to_string()));
            }
        }
    }

    // group by track, order by id for determinism
    let mut tracks: BTreeMap<u64, Vec<TrackFileRow>> = BTreeMap::new();
    for row in reader.deserialize() {
        let row: TrackFileRow = row?;
        parse_agent_type(&row.agent_type)?;
        tracks.entry(row.track_id).or_default().push(row);
    }
    if tracks.is_empty() {
        return Ok(None);
    }

    // per-track frame monotonicity plus a consistent global ms-per-frame
    let mut ms_per_frame: Option<f64> = None;
    for (id, rows) in &mut tracks {
        rows.sort_by_key(|r| r.frame_id);
        for w in rows.windows(2) {
            if w[1].frame_id <= w[0].frame_id {
                return Err(IoError::NonMonotoneFrames(*id));
            }
            let df = (w[1].frame_id - w[0].frame_id) as f64;
            let dt_ms = (w[1].timestamp_ms as f64 - w[0].timestamp_ms as f64) / df;
            match ms_per_frame {
                None => ms_per_frame = Some(dt_ms),
                Some(m) if (m - dt_ms).abs() > 1e-6 => {
                    return Err(IoError::BadTimestamps {
                        track: *id,
                        frame: w[1].frame_id,
                    });
                }
                _ => {}
            }
        }
    }
    let dt = ms_per_frame.unwrap_or(100.0) / 1000.0;
    Ok(Some((tracks, dt)))
}

/// One source track over its own frame span, with gaps masked.
#[derive(Debug, Clone)]
pub struct RawTrack {
    pub id: u64,
    pub agent_type: crate::scene::AgentType,
    pub length: f64,
    pub width: f64,
    pub first_frame: u64,
    pub trajectory: Trajectory,
}

/// Loads each track whole (no windowing); the fitting pipeline consumes these.
pub fn load_raw_tracks(path: &Path) -> Result<Vec<RawTrack>, IoError> {
    let Some((tracks, dt)) = parse_track_table(path)? else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(tracks.len());
    for (id, rows) in &tracks {
        let first_frame = rows[0].frame_id;
        let last_frame = rows.last().unwrap().frame_id;
        let span = (last_frame - first_frame + 1) as usize;
        let mut by_frame: BTreeMap<u64, &TrackFileRow> = BTreeMap::new();
        for r in rows {
            by_frame.insert(r.frame_id, r);
        }
        let mut states = Vec::with_capacity(span);
        let mut mask = vec![false; span];
        for t in 0..span {
            let f = first_frame + t as u64;
            let row = by_frame
                .range(..=f)
                .next_back()
                .map(|(_, r)| *r)
                .unwrap_or(&rows[0]);
            mask[t] = by_frame.contains_key(&f);
            states.push(AgentState::new(
                row.x,
                row.y,
                row.psi_rad,
                row.vx.hypot(row.vy),
            ));
        }
        out.push(RawTrack {
            id: *id,
            agent_type: parse_agent_type(&rows[0].agent_type)?,
            length: rows[0].length,
            width: rows[0].width,
            first_frame,
            trajectory: Trajectory::with_mask(states, dt, mask)?,
        });
    }
    Ok(out)
}

/// Loads a track CSV and slices it into scenes (map attached separately by
/// the caller). Deterministic: tracks sort by id, windows advance in frame
/// order. An empty file yields an empty list.
pub fn load_tracks(path: &Path, windowing: Windowing, map: MapData) -> Result<Vec<Scene>, IoError> {
    assert!(windowing.horizon >= 2 && windowing.t_obs >= 1);
    assert!(windowing.t_obs < windowing.horizon && windowing.stride >= 1);

    let Some((tracks, dt)) = parse_track_table(path)? else {
        return Ok(Vec::new());
    };

    let min_frame = tracks.values().map(|r| r[0].frame_id).min().unwrap();
    let max_frame = tracks
        .values()
        .map(|r| r.last().unwrap().frame_id)
        .max()
        .unwrap();

    let mut scenes = Vec::new();
    let mut start = min_frame;
    while start + windowing.horizon as u64 <= max_frame + 1 {
        let end = start + windowing.horizon as u64;
        let mut agents = Vec::new();
        for (id, rows) in &tracks {
            let in_window: Vec<&TrackFileRow> = rows
                .iter()
                .filter(|r| r.frame_id >= start && r.frame_id < end)
                .collect();
            if in_window.is_empty() {
                continue;
            }
            let mut states = Vec::with_capacity(windowing.horizon);
            let mut mask = vec![false; windowing.horizon];
            let mut by_frame: BTreeMap<u64, &TrackFileRow> = BTreeMap::new();
            for r in &in_window {
                by_frame.insert(r.frame_id, r);
            }
            // placeholder for masked slots: nearest valid state
            let first = in_window[0];
            for t in 0..windowing.horizon {
                let f = start + t as u64;
                if let Some(r) = by_frame.get(&f) {
                    mask[t] = true;
                    states.push(AgentState::new(r.x, r.y, r.psi_rad, r.vx.hypot(r.vy)));
                } else {
                    let nearest = by_frame
                        .range(..=f)
                        .next_back()
                        .map(|(_, r)| (*r).clone())
                        .unwrap_or_else(|| (*first).clone());
                    states.push(AgentState::new(
                        nearest.x,
                        nearest.y,
                        nearest.psi_rad,
                        nearest.vx.hypot(nearest.vy),
                    ));
                }
            }
            let attributes = AgentAttributes::new(
                first.length,
                first.width,
                first.length / 4.0,
                parse_agent_type(&first.agent_type)?,
            )?;
            agents.push(SceneAgent {
                id: *id,
                attributes,
                trajectory: Trajectory::with_mask(states, dt, mask)?,
            });
        }
        // keep the scene only when someone can serve as ego over the window
        let fully_valid = agents
            .iter()
            .any(|a| a.trajectory.valid_over(0, windowing.horizon));
        if fully_valid {
            scenes.push(Scene::new(
                agents,
                map.clone(),
                windowing.t_obs,
                windowing.horizon,
            )?);
        }
        start += windowing.stride as u64;
    }
    Ok(scenes)
}

/// Writes scenes back out in the track CSV schema; scene `i` occupies frames
/// `[i * horizon, (i+1) * horizon)` so loading with `stride = horizon`
/// reproduces the same scene boundaries.
pub fn write_tracks_csv(scenes: &[Scene], path: &Path) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REQUIRED_COLUMNS).map_err(IoError::from)?;
    for (i, scene) in scenes.iter().enumerate() {
        let dt_ms = (scene.dt() * 1000.0).round() as u64;
        let base = i as u64 * scene.horizon as u64;
        for agent in &scene.agents {
            let ty = match agent.attributes.agent_type {
                crate::scene::AgentType::Vehicle => "car",
                crate::scene::AgentType::PedestrianBicycle => "pedestrian/bicycle",
            };
            for t in 0..scene.horizon {
                if !agent.trajectory.valid_at(t) {
                    continue;
                }
                let s = agent.trajectory.states[t];
                let frame = base + t as u64;
                let (sin, cos) = s.psi.sin_cos();
                w.write_record([
                    agent.id.to_string(),
                    frame.to_string(),
                    (frame * dt_ms).to_string(),
                    ty.to_string(),
                    s.x.to_string(),
                    s.y.to_string(),
                    (s.v * cos).to_string(),
                    (s.v * sin).to_string(),
                    s.psi.to_string(),
                    agent.attributes.length.to_string(),
                    agent.attributes.width.to_string(),
                ])
                .map_err(IoError::from)?;
            }
        }
    }
    let bytes = w.into_inner().expect("csv into_inner");
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}
