//! Oriented boxes and point-set primitives.
//!
//! Boxes rotate about the z axis only. All containment tests treat the box
//! boundary as inside.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance_squared(self, other: Point3) -> f64 {
        let d = self - other;
        d.dot(d)
    }

    pub fn distance(self, other: Point3) -> f64 {
        self.distance_squared(other).sqrt()
    }

    /// Rotates about the z axis by `angle` radians (counter-clockwise).
    pub fn rotate_z(self, angle: f64) -> Point3 {
        let (s, c) = angle.sin_cos();
        Point3::new(c * self.x - s * self.y, s * self.x + c * self.y, self.z)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Maps an angle onto `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let a = (angle + PI).rem_euclid(TAU) - PI;
    if a <= -PI {
        a + TAU
    } else {
        a
    }
}

/// Point coordinates with optional per-point feature rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point3>,
    pub features: Option<Matrix<f64>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>) -> Self {
        PointCloud {
            coords,
            features: None,
        }
    }

    pub fn with_features(coords: Vec<Point3>, features: Matrix<f64>) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::shape(
                "PointCloud::with_features",
                format!("{} feature rows for {} points", features.rows(), coords.len()),
            ));
        }
        Ok(PointCloud {
            coords,
            features: Some(features),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Keeps the points whose mask entry is true, preserving order.
    pub fn filter(&self, mask: &[bool]) -> PointCloud {
        let keep: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        self.select(&keep)
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            features: self.features.as_ref().map(|f| f.gather_rows(indices)),
        }
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.coords.is_empty() {
            return None;
        }
        let sum = self
            .coords
            .iter()
            .fold(Point3::ORIGIN, |acc, &p| acc + p);
        Some(sum * (1.0 / self.coords.len() as f64))
    }

    /// Expresses every point in the frame of `frame` (its center becomes the
    /// origin and its heading the +x axis).
    pub fn to_box_frame(&self, frame: &Box3D) -> PointCloud {
        PointCloud {
            coords: self.coords.iter().map(|&p| frame.to_local(p)).collect(),
            features: self.features.clone(),
        }
    }
}

/// Oriented 3D box: center, `(length, width, height)` and heading about z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    /// Validates the size and wraps `yaw` into `(-π, π]`.
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Result<Self> {
        if !center.is_finite() || !yaw.is_finite() {
            return Err(Error::InvalidBox("non-finite center or yaw".into()));
        }
        if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidBox(format!(
                "size components must be positive, got {size:?}"
            )));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        Box3D::new(Point3::new(a[0], a[1], a[2]), [a[3], a[4], a[5]], a[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.size[0],
            self.size[1],
            self.size[2],
            self.yaw,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn to_local(&self, p: Point3) -> Point3 {
        (p - self.center).rotate_z(-self.yaw)
    }

    pub fn to_world(&self, p: Point3) -> Point3 {
        p.rotate_z(self.yaw) + self.center
    }

    pub fn contains(&self, p: Point3) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.size[0] * 0.5
            && l.y.abs() <= self.size[1] * 0.5
            && l.z.abs() <= self.size[2] * 0.5
    }

    /// This box expressed in the frame of `frame`.
    pub fn in_frame_of(&self, frame: &Box3D) -> Box3D {
        Box3D {
            center: frame.to_local(self.center),
            size: self.size,
            yaw: wrap_angle(self.yaw - frame.yaw),
        }
    }

    /// Inverse of [`Box3D::in_frame_of`].
    pub fn from_frame_of(&self, frame: &Box3D) -> Box3D {
        Box3D {
            center: frame.to_world(self.center),
            size: self.size,
            yaw: wrap_angle(self.yaw + frame.yaw),
        }
    }

    /// Footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (self.size[0] * 0.5, self.size[1] * 0.5);
        let (s, c) = self.yaw.sin_cos();
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(x, y)| {
            [
                self.center.x + c * x - s * y,
                self.center.y + s * x + c * y,
            ]
        })
    }

    /// All eight corners.
    pub fn corners(&self) -> [Point3; 8] {
        let half = [self.size[0] * 0.5, self.size[1] * 0.5, self.size[2] * 0.5];
        let mut out = [Point3::ORIGIN; 8];
        for (k, corner) in out.iter_mut().enumerate() {
            let sx = if k & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if k & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if k & 4 == 0 { -1.0 } else { 1.0 };
            *corner = self.to_world(Point3::new(sx * half[0], sy * half[1], sz * half[2]));
        }
        out
    }

    fn z_range(&self) -> (f64, f64) {
        let h = self.size[2] * 0.5;
        (self.center.z - h, self.center.z + h)
    }
}

impl TryFrom<[f64; 7]> for Box3D {
    type Error = Error;
    fn try_from(a: [f64; 7]) -> Result<Self> {
        Box3D::from_array(a)
    }
}

impl From<Box3D> for [f64; 7] {
    fn from(b: Box3D) -> [f64; 7] {
        b.to_array()
    }
}

pub fn points_in_box(cloud: &PointCloud, b: &Box3D) -> Vec<bool> {
    cloud.coords.iter().map(|&p| b.contains(p)).collect()
}

pub fn count_in_box(coords: &[Point3], b: &Box3D) -> usize {
    coords.iter().filter(|&&p| b.contains(p)).count()
}

/// Box with every size component scaled by `factor`, same pose.
pub fn scale_box(b: &Box3D, factor: f64) -> Box3D {
    Box3D {
        size: b.size.map(|s| s * factor),
        ..*b
    }
}

pub fn crop(cloud: &PointCloud, b: &Box3D) -> PointCloud {
    cloud.filter(&points_in_box(cloud, b))
}

/// Points inside `b` scaled by `1 + extend_ratio`.
pub fn crop_template(cloud: &PointCloud, b: &Box3D, extend_ratio: f64) -> PointCloud {
    debug_assert!(extend_ratio >= 0.0);
    crop(cloud, &scale_box(b, 1.0 + extend_ratio))
}

/// Adds `margin_m` on every side, so each size component grows by twice the margin.
pub fn enlarge_box(b: &Box3D, margin_m: f64) -> Box3D {
    debug_assert!(margin_m >= 0.0);
    Box3D {
        size: b.size.map(|s| s + 2.0 * margin_m),
        ..*b
    }
}

/// Shifts the center by independent uniform offsets in `[-range_m, range_m]`.
pub fn distort_box<R: Rng + ?Sized>(b: &Box3D, range_m: f64, rng: &mut R) -> Box3D {
    let mut offset = [0.0; 3];
    for o in &mut offset {
        *o = (rng.random::<f64>() * 2.0 - 1.0) * range_m;
    }
    Box3D {
        center: b.center + Point3::new(offset[0], offset[1], offset[2]),
        ..*b
    }
}

/// For each query, the ascending indices of at most `max_k` cloud points
/// within `radius` (inclusive).
pub fn ball_query(queries: &[Point3], coords: &[Point3], radius: f64, max_k: usize) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    queries
        .iter()
        .map(|&q| {
            coords
                .iter()
                .enumerate()
                .filter(|(_, &p)| p.distance_squared(q) <= r2)
                .map(|(i, _)| i)
                .take(max_k)
                .collect()
        })
        .collect()
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice.abs()
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Volumetric IoU of two yaw-rotated boxes.
///
/// The arguments are put in a canonical order first so that the result is
/// bitwise symmetric.
pub fn box_iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = if a
        .to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .is_some_and(|o| o.is_gt())
    {
        (b, a)
    } else {
        (a, b)
    };
    let (a_lo, a_hi) = a.z_range();
    let (b_lo, b_hi) = b.z_range();
    let dz = (a_hi.min(b_hi) - a_lo.max(b_lo)).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let area = bev_intersection_area(a, b);
    if area <= 0.0 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
