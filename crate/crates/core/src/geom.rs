//! Planar geometry: angle wrapping, points, and rigid frame transforms.
//!
//! Everything downstream (kinematics, rendering, fitting) funnels its angle
//! arithmetic through [`wrap_angle`] so the heading convention lives in
//! exactly one place: radians in the half-open interval `(-pi, pi]`.

use std::f64::consts::PI;

/// A point or vector in the plane, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// 2D cross product (z component of the 3D cross product).
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

/// Wraps an angle to the canonical interval `(-pi, pi]`.
///
/// The interval is half-open at `-pi`, so `wrap_angle(-PI) == PI`. Non-finite
/// input propagates as NaN, the error value for angle arithmetic.
pub fn wrap_angle(theta: f64) -> f64 {
    if !theta.is_finite() {
        return f64::NAN;
    }
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// A rigid transform of the plane: rotate by `angle`, then translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub translation: Point2,
    pub angle: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            translation: Point2::new(0.0, 0.0),
            angle: 0.0,
        }
    }

    pub fn new(translation: Point2, angle: f64) -> Self {
        RigidTransform { translation, angle }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let (s, c) = self.angle.sin_cos();
        Point2::new(
            c * p.x - s * p.y + self.translation.x,
            s * p.x + c * p.y + self.translation.y,
        )
    }

    /// Composition: `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            translation: self.apply(other.translation),
            angle: wrap_angle(self.angle + other.angle),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let (s, c) = self.angle.sin_cos();
        RigidTransform {
            translation: Point2::new(
                -(c * self.translation.x + s * self.translation.y),
                -(-s * self.translation.x + c * self.translation.y),
            ),
            angle: wrap_angle(-self.angle),
        }
    }
}

/// Pose of an agent used as a rendering/transform anchor: position + heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Point2,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            position: Point2::new(x, y),
            heading,
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(self.position, self.heading)
    }
}

/// Maps a world-frame point into the frame of `ego`: the ego position maps to
/// the origin and the ego heading to the +x axis.
pub fn to_ego_frame(p: Point2, ego: Pose) -> Point2 {
    let d = p - ego.position;
    let (s, c) = ego.heading.sin_cos();
    Point2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
}

/// Inverse of [`to_ego_frame`]: maps an ego-frame point back to the world.
pub fn from_ego_frame(p: Point2, ego: Pose) -> Point2 {
    let (s, c) = ego.heading.sin_cos();
    Point2::new(
        c * p.x - s * p.y + ego.position.x,
        s * p.x + c * p.y + ego.position.y,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_identity_at_zero() {
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn wrap_three_pi() {
        // 3pi = pi (mod 2pi)
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn wrap_negative_pi_maps_to_pi() {
        // The interval is half-open at -pi.
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn wrap_is_idempotent() {
        for &theta in &[0.0, 1.0, -1.0, 3.9, -3.9, PI, -PI, 10.0 * PI, -7.3] {
            let w = wrap_angle(theta);
            assert_eq!(wrap_angle(w), w, "theta = {theta}");
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn wrap_non_finite_is_nan() {
        assert!(wrap_angle(f64::NAN).is_nan());
        assert!(wrap_angle(f64::INFINITY).is_nan());
    }

    #[test]
    fn ego_center_maps_to_origin() {
        let ego = Pose::new(3.0, -2.0, 0.9);
        let p = to_ego_frame(ego.position, ego);
        assert!(p.norm() < 1e-15);
    }

    #[test]
    fn ego_rotation_quarter_turn() {
        // p=(1,0), ego at origin heading pi/2 -> (0,-1)
        let ego = Pose::new(0.0, 0.0, PI / 2.0);
        let p = to_ego_frame(Point2::new(1.0, 0.0), ego);
        assert!((p.x - 0.0).abs() < 1e-15);
        assert!((p.y - (-1.0)).abs() < 1e-15);
    }

    #[test]
    fn ego_translation_cancels() {
        let ego = Pose::new(2.0, 3.0, 0.7);
        let p = to_ego_frame(Point2::new(2.0, 3.0), ego);
        assert!(p.norm() < 1e-15);
    }

    #[test]
    fn transform_compose_inverse() {
        let a = RigidTransform::new(Point2::new(1.0, -2.0), 0.0);
        let b = RigidTransform::new(Point2::new(0.5, 0.25), 1.2);
        let ab = a.compose(&b);
        let p = Point2::new(0.3, -0.8);
        let q = a.apply(b.apply(p));
        assert!(ab.apply(p).distance(q) < 1e-12);
        let inv = ab.inverse();
        assert!(inv.apply(q).distance(p) < 1e-12);
    }
}
