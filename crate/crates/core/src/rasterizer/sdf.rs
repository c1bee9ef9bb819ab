//! Signed distances (negative inside) with gradients w.r.t. the query point.
//!
//! All primitive geometry is rigid, so query-point gradients are all the
//! renderer's backward pass needs: a primitive's pose gradient follows from
//! `s(p; pose(geom)) = s(pose_inv(p); geom)` by the chain rule.

use crate::geom::Point2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
}

/// Geometry in the primitive's own frame.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseGeometry {
    /// Axis-aligned box centered at the origin.
    Box { length: f64, width: f64 },
    /// Convex polygon, stored counter-clockwise.
    ConvexPolygon { vertices: Vec<Point2> },
    /// Polyline thickened by `half_width` on each side.
    Polyline {
        points: Vec<Point2>,
        half_width: f64,
    },
}

impl BaseGeometry {
    pub fn validate(&self) -> Result<(), SdfError> {
        match self {
            BaseGeometry::Box { length, width } => {
                if !(length.is_finite() && width.is_finite() && *length > 0.0 && *width > 0.0) {
                    return Err(SdfError::Degenerate(format!(
                        "box must have positive area, got {length} x {width}"
                    )));
                }
            }
            BaseGeometry::ConvexPolygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(SdfError::Degenerate(format!(
                        "polygon needs at least 3 vertices, got {}",
                        vertices.len()
                    )));
                }
            }
            BaseGeometry::Polyline { points, half_width } => {
                if points.len() < 2 {
                    return Err(SdfError::Degenerate(format!(
                        "polyline needs at least 2 points, got {}",
                        points.len()
                    )));
                }
                if !(*half_width > 0.0) {
                    return Err(SdfError::Degenerate(format!(
                        "polyline half-width must be positive, got {half_width}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Normalizes a polygon to counter-clockwise order.
    pub fn convex_polygon(mut vertices: Vec<Point2>) -> Self {
        let mut area2 = 0.0;
        for i in 0..vertices.len() {
            let a = vertices[i];
            let b = vertices[(i + 1) % vertices.len()];
            area2 += a.cross(b);
        }
        if area2 < 0.0 {
            vertices.reverse();
        }
        BaseGeometry::ConvexPolygon { vertices }
    }

    /// Axis-aligned bounds in the primitive's own frame (including
    /// half-width for polylines).
    pub fn local_bounds(&self) -> (Point2, Point2) {
        match self {
            BaseGeometry::Box { length, width } => (
                Point2::new(-length / 2.0, -width / 2.0),
                Point2::new(length / 2.0, width / 2.0),
            ),
            BaseGeometry::ConvexPolygon { vertices } => point_bounds(vertices, 0.0),
            BaseGeometry::Polyline { points, half_width } => point_bounds(points, *half_width),
        }
    }
}

fn point_bounds(points: &[Point2], pad: f64) -> (Point2, Point2) {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.x = lo.x.min(p.x - pad);
        lo.y = lo.y.min(p.y - pad);
        hi.x = hi.x.max(p.x + pad);
        hi.y = hi.y.max(p.y + pad);
    }
    (lo, hi)
}

/// Exact signed distance, negative inside. Checked entry point.
pub fn signed_distance(p: Point2, geometry: &BaseGeometry) -> Result<f64, SdfError> {
    geometry.validate()?;
    Ok(sdf_with_gradient(p, geometry).0)
}

/// Signed distance plus its gradient w.r.t. the query point. The gradient is
/// a unit vector except exactly on the medial axis / boundary, where a valid
/// one-sided choice is returned.
pub fn sdf_with_gradient(p: Point2, geometry: &BaseGeometry) -> (f64, Point2) {
    match geometry {
        BaseGeometry::Box { length, width } => box_sdf(p, *length / 2.0, *width / 2.0),
        BaseGeometry::ConvexPolygon { vertices } => polygon_sdf(p, vertices),
        BaseGeometry::Polyline { points, half_width } => polyline_sdf(p, points, *half_width),
    }
}

fn box_sdf(p: Point2, hx: f64, hy: f64) -> (f64, Point2) {
    let ax = p.x.abs();
    let ay = p.y.abs();
    let qx = ax - hx;
    let qy = ay - hy;
    let sx = if p.x >= 0.0 { 1.0 } else { -1.0 };
    let sy = if p.y >= 0.0 { 1.0 } else { -1.0 };
    if qx > 0.0 || qy > 0.0 {
        // outside: distance to the nearest corner/edge
        let ox = qx.max(0.0);
        let oy = qy.max(0.0);
        let d = ox.hypot(oy);
        (d, Point2::new(sx * ox / d, sy * oy / d))
    } else if qx > qy {
        // inside, x-face is closer
        (qx, Point2::new(sx, 0.0))
    } else {
        (qy, Point2::new(0.0, sy))
    }
}

fn segment_closest(p: Point2, a: Point2, b: Point2) -> Point2 {
    let ab = b - a;
    let len_sq = ab.dot(ab);
    if len_sq == 0.0 {
        return a;
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    a + ab * t
}

fn polygon_sdf(p: Point2, vertices: &[Point2]) -> (f64, Point2) {
    let n = vertices.len();
    let mut best_d_sq = f64::INFINITY;
    let mut best_point = vertices[0];
    let mut best_edge = 0;
    let mut inside = true;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        if (b - a).cross(p - a) < 0.0 {
            inside = false;
        }
        let c = segment_closest(p, a, b);
        let d_sq = (p - c).dot(p - c);
        if d_sq < best_d_sq {
            best_d_sq = d_sq;
            best_point = c;
            best_edge = i;
        }
    }
    let d = best_d_sq.sqrt();
    if d < 1e-12 {
        // on the boundary: use the outward edge normal
        let a = vertices[best_edge];
        let b = vertices[(best_edge + 1) % n];
        let e = b - a;
        let len = e.norm().max(1e-300);
        return (0.0, Point2::new(e.y / len, -e.x / len));
    }
    let dir = (p - best_point) * (1.0 / d);
    if inside {
        (-d, Point2::new(-dir.x, -dir.y))
    } else {
        (d, dir)
    }
}

fn polyline_sdf(p: Point2, points: &[Point2], half_width: f64) -> (f64, Point2) {
    let mut best_d_sq = f64::INFINITY;
    let mut best_point = points[0];
    let mut best_seg = 0;
    for i in 0..points.len() - 1 {
        let c = segment_closest(p, points[i], points[i + 1]);
        let d_sq = (p - c).dot(p - c);
        if d_sq < best_d_sq {
            best_d_sq = d_sq;
            best_point = c;
            best_seg = i;
        }
    }
    let d = best_d_sq.sqrt();
    if d < 1e-12 {
        // on the centerline: pick a perpendicular of the nearest segment
        let e = points[best_seg + 1] - points[best_seg];
        let len = e.norm().max(1e-300);
        return (-half_width, Point2::new(-e.y / len, e.x / len));
    }
    let dir = (p - best_point) * (1.0 / d);
    (d - half_width, dir)
}
