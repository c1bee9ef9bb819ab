//! Rollout result export and the matching loader.
//!
//! CSV layout: one `# drivesim-rollouts v1 ...` metadata line, a header, then
//! one row per (scene, sample, agent, step). JSON carries the same content as
//! `{ "meta": {...}, "rows": [...] }`. Floats are written with Rust's
//! shortest-round-trip formatting, so export -> import is lossless.

use super::{io_err, IoError};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ExportFormat::Json,
            _ => ExportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMeta {
    pub seed: u64,
    pub mode: String,
    pub model_checksum: String,
    pub k_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub scene_id: u64,
    pub sample_k: usize,
    pub agent_id: u64,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JsonDoc {
    meta: RolloutMeta,
    rows: Vec<RolloutRow>,
}

pub fn export_rollouts(
    meta: &RolloutMeta,
    rows: &[RolloutRow],
    path: &Path,
    format: ExportFormat,
) -> Result<(), IoError> {
    match format {
        ExportFormat::Json => {
            let doc = JsonDoc {
                meta: meta.clone(),
                rows: rows.to_vec(),
            };
            let text = serde_json::to_string_pretty(&doc)?;
            std::fs::write(path, text).map_err(|e| io_err(path, e))
        }
        ExportFormat::Csv => {
            let mut out = format!(
                "# drivesim-rollouts v1 seed={} mode={} model={} k={}\n",
                meta.seed, meta.mode, meta.model_checksum, meta.k_samples
            );
            out.push_str("scene_id,sample_k,agent_id,t,x,y,psi,v\n");
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.scene_id, r.sample_k, r.agent_id, r.t, r.x, r.y, r.psi, r.v
                ));
            }
            std::fs::write(path, out).map_err(|e| io_err(path, e))
        }
    }
}

pub fn load_rollouts(path: &Path) -> Result<(RolloutMeta, Vec<RolloutRow>), IoError> {
    let raw = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    if raw.trim_start().starts_with('{') {
        let doc: JsonDoc = serde_json::from_str(&raw)?;
        return Ok((doc.meta, doc.rows));
    }
    let mut lines = raw.lines();
    let meta_line = lines
        .next()
        .ok_or_else(|| IoError::BadRolloutFile("empty file".into()))?;
    let meta = parse_meta_line(meta_line)?;
    let header = lines
        .next()
        .ok_or_else(|| IoError::BadRolloutFile("missing header".into()))?;
    if header != "scene_id,sample_k,agent_id,t,x,y,psi,v" {
        return Err(IoError::BadRolloutFile(format!(
            "unexpected header `{header}`"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(IoError::BadRolloutFile(format!(
                "row {} has {} fields",
                i + 3,
                f.len()
            )));
        }
        let parse_err = |what: &str| IoError::BadRolloutFile(format!("row {}: bad {what}", i + 3));
        rows.push(RolloutRow {
            scene_id: f[0].parse().map_err(|_| parse_err("scene_id"))?,
            sample_k: f[1].parse().map_err(|_| parse_err("sample_k"))?,
            agent_id: f[2].parse().map_err(|_| parse_err("agent_id"))?,
            t: f[3].parse().map_err(|_| parse_err("t"))?,
            x: f[4].parse().map_err(|_| parse_err("x"))?,
            y: f[5].parse().map_err(|_| parse_err("y"))?,
            psi: f[6].parse().map_err(|_| parse_err("psi"))?,
            v: f[7].parse().map_err(|_| parse_err("v"))?,
        });
    }
    Ok((meta, rows))
}

fn parse_meta_line(line: &str) -> Result<RolloutMeta, IoError> {
    if !line.starts_with("# drivesim-rollouts v1") {
        return Err(IoError::BadRolloutFile(format!(
            "unrecognized metadata line `{line}`"
        )));
    }
    let mut meta = RolloutMeta {
        seed: 0,
        mode: String::new(),
        model_checksum: String::new(),
        k_samples: 0,
    };
    for part in line.split_whitespace() {
        if let Some((key, value)) = part.split_once('=') {
            match key {
                "seed" => {
                    meta.seed = value
                        .parse()
                        .map_err(|_| IoError::BadRolloutFile("bad seed".into()))?
                }
                "mode" => meta.mode = value.to_string(),
                "model" => meta.model_checksum = value.to_string(),
                "k" => {
                    meta.k_samples = value
                        .parse()
                        .map_err(|_| IoError::BadRolloutFile("bad k".into()))?
                }
                _ => {}
            }
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::RngExt;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("drivesim-export-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_rows(n: usize) -> Vec<RolloutRow> {
        let mut rng = stream_rng(3, &[n as u64]);
        (0..n)
            .map(|i| RolloutRow {
                scene_id: (i / 10) as u64,
                sample_k: i % 6,
                agent_id: (i % 3) as u64,
                t: i,
                x: rng.random_range(-100.0..100.0),
                y: rng.random_range(-100.0..100.0),
                psi: rng.random_range(-3.14..3.14),
                v: rng.random_range(0.0..20.0),
            })
            .collect()
    }

    fn meta() -> RolloutMeta {
        RolloutMeta {
            seed: 7,
            mode: "generative".into(),
            model_checksum: "abc123".into(),
            k_samples: 6,
        }
    }

    #[test]
    fn csv_roundtrip_is_lossless() {
        let rows = sample_rows(100);
        let path = tmp("r.csv");
        export_rollouts(&meta(), &rows, &path, ExportFormat::Csv).unwrap();
        let (m, loaded) = load_rollouts(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded.len(), rows.len());
        for (a, b) in rows.iter().zip(&loaded) {
            assert_eq!(a, b, "floats must round-trip exactly");
        }
    }

    #[test]
    fn json_roundtrip_is_lossless() {
        let rows = sample_rows(50);
        let path = tmp("r.json");
        export_rollouts(&meta(), &rows, &path, ExportFormat::Json).unwrap();
        let (m, loaded) = load_rollouts(&path).unwrap();
        assert_eq!(m, meta());
        assert_eq!(loaded, rows);
    }

    #[test]
    fn empty_result_is_header_only() {
        let path = tmp("empty.csv");
        export_rollouts(&meta(), &[], &path, ExportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let (_, rows) = load_rollouts(&path).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn row_count_is_k_times_agents_times_steps() {
        // 6 samples x 3 agents x 30 steps = 540 rows
        let mut rows = Vec::new();
        for k in 0..6 {
            for a in 0..3u64 {
                for t in 10..40 {
                    rows.push(RolloutRow {
                        scene_id: 0,
                        sample_k: k,
                        agent_id: a,
                        t,
                        x: 0.0,
                        y: 0.0,
                        psi: 0.0,
                        v: 0.0,
                    });
                }
            }
        }
        assert_eq!(rows.len(), 540);
        let path = tmp("count.csv");
        export_rollouts(&meta(), &rows, &path, ExportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 542);
    }
}
