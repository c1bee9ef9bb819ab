//! Dataset ingestion, map loading, result export, image export, and the
//! synthetic desk-scale datasets.

mod export;
mod map;
mod png_out;
mod synth;
mod tracks;

pub use export::{export_rollouts, load_rollouts, ExportFormat, RolloutMeta, RolloutRow};
pub use map::{load_map, save_map};
pub use png_out::write_png;
pub use synth::{synth_dataset, ForkSceneInfo, SynthDataset, SynthKind};
pub use tracks::{
    load_raw_tracks, load_tracks, write_tracks_csv, RawTrack, TrackFileRow, Windowing,
};

/// Per-scene metric report rows with JSON serialization, used by the CLI's
/// `evaluate --out report.json`.
pub mod report_json {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ReportRow {
        pub scene_id: u64,
        pub min_ade_k: f64,
        pub min_fde_k: f64,
        pub mfd_k: f64,
    }

    pub fn to_string(rows: &[ReportRow]) -> Result<String, super::IoError> {
        Ok(serde_json::to_string_pretty(rows)?)
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("track {0}: frames are not strictly increasing")]
    NonMonotoneFrames(u64),
    #[error("track {track}: timestamps inconsistent with a uniform grid (frame {frame})")]
    BadTimestamps { track: u64, frame: u64 },
    #[error("unknown agent type `{0}`")]
    UnknownAgentType(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error("invalid rollout file: {0}")]
    BadRolloutFile(String),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}
