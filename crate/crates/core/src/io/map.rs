//! The simplified map file format: one element per line.
//!
//! ```text
//! # comments and blank lines are ignored
//! polygon x1 y1 x2 y2 x3 y3 ...        # driveable area (>= 3 vertices)
//! polyline WIDTH x1 y1 x2 y2 ...       # lane line with full width in meters
//! ```

use super::{io_err, IoError};
use crate::geom::Point2;
use crate::scene::{LaneLine, MapData};
use std::path::Path;

fn parse_floats(path: &Path, line_no: usize, parts: &[&str]) -> Result<Vec<f64>, IoError> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| IoError::Parse {
                path: path.display().to_string(),
                line: line_no,
                message: format!("malformed number `{p}`"),
            })
        })
        .collect()
}

fn pair_points(path: &Path, line_no: usize, vals: &[f64]) -> Result<Vec<Point2>, IoError> {
    if vals.len() % 2 != 0 {
        return Err(IoError::Parse {
            path: path.display().to_string(),
            line: line_no,
            message: format!("odd number of coordinates ({})", vals.len()),
        });
    }
    Ok(vals.chunks(2).map(|c| Point2::new(c[0], c[1])).collect())
}

pub fn load_map(path: &Path) -> Result<MapData, IoError> {
    let raw = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut map = MapData::default();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts[0] {
            "polygon" => {
                let vals = parse_floats(path, line_no, &parts[1..])?;
                let points = pair_points(path, line_no, &vals)?;
                if points.len() < 3 {
                    return Err(IoError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("polygon needs at least 3 vertices, got {}", points.len()),
                    });
                }
                map.driveable_polygons.push(points);
            }
            "polyline" => {
                if parts.len() < 2 {
                    return Err(IoError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: "polyline needs a width and points".into(),
                    });
                }
                let width = parse_floats(path, line_no, &parts[1..2])?[0];
                let vals = parse_floats(path, line_no, &parts[2..])?;
                let points = pair_points(path, line_no, &vals)?;
                if points.len() < 2 {
                    return Err(IoError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("polyline needs at least 2 points, got {}", points.len()),
                    });
                }
                if !(width > 0.0) {
                    return Err(IoError::Parse {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("polyline width must be positive, got {width}"),
                    });
                }
                map.lane_lines.push(LaneLine { points, width });
            }
            other => {
                return Err(IoError::Parse {
                    path: path.display().to_string(),
                    line: line_no,
                    message: format!("unknown element `{other}`"),
                });
            }
        }
    }
    map.validate()?;
    Ok(map)
}

pub fn save_map(map: &MapData, path: &Path) -> Result<(), IoError> {
    let mut out = String::from("# drivesim map v1\n");
    for poly in &map.driveable_polygons {
        out.push_str("polygon");
        for p in poly {
            out.push_str(&format!(" {} {}", p.x, p.y));
        }
        out.push('\n');
    }
    for line in &map.lane_lines {
        out.push_str(&format!("polyline {}", line.width));
        for p in &line.points {
            out.push_str(&format!(" {} {}", p.x, p.y));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("drivesim-map-test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn empty_map_renders_background_only() {
        let path = tmp("empty.txt");
        std::fs::write(&path, "# nothing here\n\n").unwrap();
        let map = load_map(&path).unwrap();
        assert!(map.driveable_polygons.is_empty());
        assert!(map.lane_lines.is_empty());
    }

    #[test]
    fn square_polygon() {
        let path = tmp("square.txt");
        std::fs::write(&path, "polygon 0 0 10 0 10 10 0 10\n").unwrap();
        let map = load_map(&path).unwrap();
        assert_eq!(map.driveable_polygons.len(), 1);
        assert_eq!(map.driveable_polygons[0].len(), 4);
    }

    #[test]
    fn polyline_half_width_convention() {
        let path = tmp("line.txt");
        std::fs::write(&path, "polyline 0.2 0 0 1 0 2 0 3 0 4 0\n").unwrap();
        let map = load_map(&path).unwrap();
        assert_eq!(map.lane_lines.len(), 1);
        assert_eq!(map.lane_lines[0].points.len(), 5);
        // width 0.2 becomes half-width 0.1 at render time
        let prims = crate::rasterizer::primitives_for_states(
            &map,
            &[(
                crate::scene::AgentAttributes::vehicle(4.0, 2.0),
                Some(crate::scene::AgentState::new(0.0, 0.0, 0.0, 0.0)),
            )],
            0,
        )
        .unwrap();
        match &prims[0].geometry {
            crate::rasterizer::BaseGeometry::Polyline { half_width, .. } => {
                assert!((half_width - 0.1).abs() < 1e-12);
            }
            other => panic!("expected polyline, got {other:?}"),
        }
    }

    #[test]
    fn short_polygon_is_an_error() {
        let path = tmp("short.txt");
        std::fs::write(&path, "polygon 0 0 1 1\n").unwrap();
        assert!(load_map(&path).is_err());
    }

    #[test]
    fn malformed_number_reports_line() {
        let path = tmp("bad.txt");
        std::fs::write(&path, "# ok\npolygon 0 0 1 zero 1 1\n").unwrap();
        let err = load_map(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("zero"), "{msg}");
    }

    #[test]
    fn save_load_roundtrip() {
        let map = MapData {
            driveable_polygons: vec![vec![
                Point2::new(0.0, 0.0),
                Point2::new(5.5, 0.25),
                Point2::new(5.0, 4.0),
            ]],
            lane_lines: vec![LaneLine {
                points: vec![Point2::new(-1.0, 0.0), Point2::new(1.0, 0.125)],
                width: 0.3,
            }],
        };
        let path = tmp("roundtrip.txt");
        save_map(&map, &path).unwrap();
        let loaded = load_map(&path).unwrap();
        assert_eq!(loaded, map);
    }
}
