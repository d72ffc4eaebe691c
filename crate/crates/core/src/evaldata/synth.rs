use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedFrame, Annotation, Tracklet, TrackletFrame};
use crate::geometry::{Box3D, Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Van,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Van, ObjectClass::Cyclist];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Van => "Van",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    pub fn parse(s: &str) -> Option<ObjectClass> {
        ObjectClass::ALL.into_iter().find(|c| c.as_str().eq_ignore_ascii_case(s))
    }

    /// Typical `[l, w, h]` in meters.
    pub fn size(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => [3.9, 1.6, 1.5],
            ObjectClass::Pedestrian => [0.8, 0.6, 1.7],
            ObjectClass::Van => [5.0, 2.0, 2.2],
            ObjectClass::Cyclist => [1.8, 0.6, 1.7],
        }
    }
}

/// One synthetic object: a rigid box-surface pattern moving at constant
/// velocity and yaw rate, with noise, ground clutter and static distractors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub class: String,
    pub size: [f64; 3],
    pub frames: usize,
    pub points_on_object: usize,
    pub start: [f64; 3],
    pub yaw: f64,
    /// Displacement per frame.
    pub velocity: [f64; 3],
    /// Yaw change per frame.
    pub yaw_rate: f64,
    pub noise_std: f64,
    pub clutter_points: usize,
    /// Side of the square ground patch holding the clutter.
    pub clutter_extent: f64,
    pub distractors: usize,
    pub distractor_points: usize,
}

impl SynthSpec {
    pub fn for_class(class: ObjectClass) -> Self {
        SynthSpec {
            class: class.as_str().into(),
            size: class.size(),
            frames: 10,
            points_on_object: 200,
            start: [0.0; 3],
            yaw: 0.0,
            velocity: [0.0; 3],
            yaw_rate: 0.0,
            noise_std: 0.01,
            clutter_points: 200,
            clutter_extent: 14.0,
            distractors: 2,
            distractor_points: 100,
        }
    }

    pub fn box_at(&self, frame: usize) -> Box3D {
        let t = frame as f64;
        let c = Point3::new(
            self.start[0] + self.velocity[0] * t,
            self.start[1] + self.velocity[1] * t,
            self.start[2] + self.velocity[2] * t,
        );
        Box3D::new(c, self.size, self.yaw + self.yaw_rate * t).expect("valid synthetic box")
    }

    fn midpoint(&self) -> Point3 {
        let a = self.box_at(0).center;
        let b = self.box_at(self.frames.saturating_sub(1)).center;
        (a + b) * 0.5
    }
}

/// Options for a randomized collection of tracklets.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub classes: Vec<ObjectClass>,
    pub frames: usize,
    pub points_on_object: usize,
    pub max_speed: f64,
    pub max_yaw_rate: f64,
    pub noise_std: f64,
    pub clutter_points: usize,
    pub distractors: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            classes: ObjectClass::ALL.to_vec(),
            frames: 10,
            points_on_object: 200,
            max_speed: 0.5,
            max_yaw_rate: 0.03,
            noise_std: 0.01,
            clutter_points: 200,
            distractors: 2,
        }
    }
}

/// Uniform points on the surface of a box shrunk to 95%, in its local frame.
fn surface_pattern<R: Rng + ?Sized>(size: [f64; 3], n: usize, rng: &mut R) -> Vec<Point3> {
    let h = size.map(|s| 0.475 * s);
    let faces = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total = 2.0 * faces.iter().sum::<f64>();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut axis = 0;
            while axis < 2 && pick >= 2.0 * faces[axis] {
                pick -= 2.0 * faces[axis];
                axis += 1;
            }
            let sign = if pick < faces[axis] { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (d, v) in p.iter_mut().enumerate() {
                *v = if d == axis {
                    sign * h[d]
                } else {
                    (rng.random::<f64>() * 2.0 - 1.0) * h[d]
                };
            }
            Point3::new(p[0], p[1], p[2])
        })
        .collect()
}

/// Pattern points of `b` with local-frame noise, kept inside the box.
fn place<R: Rng + ?Sized>(b: &Box3D, pattern: &[Point3], noise: Option<&Normal<f64>>, rng: &mut R) -> Vec<Point3> {
    pattern
        .iter()
        .map(|&p| {
            let local = match noise {
                Some(n) => {
                    let h = b.size.map(|s| 0.4995 * s);
                    Point3::new(
                        (p.x + n.sample(rng)).clamp(-h[0], h[0]),
                        (p.y + n.sample(rng)).clamp(-h[1], h[1]),
                        (p.z + n.sample(rng)).clamp(-h[2], h[2]),
                    )
                }
                None => p,
            };
            b.to_world(local)
        })
        .collect()
}

struct Background {
    points: Vec<Point3>,
}

/// Ground points slightly below the lowest object and static distractor
/// boxes kept clear of every object box.
fn background<R: Rng + ?Sized>(specs: &[SynthSpec], rng: &mut R) -> Background {
    let mut points = Vec::new();
    let mut keep_out: Vec<Box3D> = Vec::new();
    let mut ground = f64::INFINITY;
    for s in specs {
        for t in 0..s.frames {
            let b = s.box_at(t);
            ground = ground.min(b.center.z - 0.5 * b.size[2]);
            keep_out.push(b);
        }
    }
    let ground = ground - 0.05;
    for s in specs {
        let mid = s.midpoint();
        let half = 0.5 * s.clutter_extent;
        for _ in 0..s.clutter_points {
            points.push(Point3::new(
                mid.x + (rng.random::<f64>() * 2.0 - 1.0) * half,
                mid.y + (rng.random::<f64>() * 2.0 - 1.0) * half,
                ground,
            ));
        }
        for _ in 0..s.distractors {
            let size = s.size.map(|v| v * (0.5 + 0.5 * rng.random::<f64>()));
            let radius = |sz: [f64; 3]| 0.5 * (sz[0] * sz[0] + sz[1] * sz[1]).sqrt();
            let mut placed = None;
            for _ in 0..100 {
                let c = Point3::new(
                    mid.x + (rng.random::<f64>() * 2.0 - 1.0) * half,
                    mid.y + (rng.random::<f64>() * 2.0 - 1.0) * half,
                    ground + 0.05 + 0.5 * size[2],
                );
                let clear = keep_out.iter().all(|o| {
                    let gap = Point3::new(o.center.x - c.x, o.center.y - c.y, 0.0).norm();
                    gap > radius(o.size) + radius(size) + 0.5
                });
                if clear {
                    placed = Some(c);
                    break;
                }
            }
            if let Some(c) = placed {
                let b = Box3D::new(c, size, rng.random::<f64>() * std::f64::consts::PI).expect("valid distractor");
                let pattern = surface_pattern(size, s.distractor_points, rng);
                points.extend(place(&b, &pattern, None, rng));
                keep_out.push(b);
            }
        }
    }
    Background { points }
}

fn frames_for(specs: &[SynthSpec], seed: u64) -> (Vec<PointCloud>, Vec<Vec<Box3D>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patterns: Vec<Vec<Point3>> = specs
        .iter()
        .map(|s| surface_pattern(s.size, s.points_on_object, &mut rng))
        .collect();
    let bg = background(specs, &mut rng);
    let count = specs.iter().map(|s| s.frames).max().unwrap_or(0);
    let mut clouds = Vec::with_capacity(count);
    let mut boxes = vec![Vec::new(); specs.len()];
    for t in 0..count {
        let mut pts = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            if t >= s.frames {
                continue;
            }
            let b = s.box_at(t);
            let noise = (s.noise_std > 0.0).then(|| Normal::new(0.0, s.noise_std).expect("finite std"));
            pts.extend(place(&b, &patterns[i], noise.as_ref(), &mut rng));
            boxes[i].push(b);
        }
        pts.extend_from_slice(&bg.points);
        clouds.push(PointCloud::new(pts));
    }
    (clouds, boxes)
}

/// Deterministic under `seed`; boxes are exact by construction.
pub fn synth_tracklet(spec: &SynthSpec, seed: u64) -> Tracklet {
    let (clouds, boxes) = frames_for(std::slice::from_ref(spec), seed);
    Tracklet {
        object_id: "0".into(),
        class: spec.class.clone(),
        frames: clouds
            .into_iter()
            .zip(boxes.into_iter().next().unwrap_or_default())
            .map(|(cloud, gt)| TrackletFrame { cloud, gt })
            .collect(),
    }
}

/// Several objects sharing each scene, annotated with ids `"0"`, `"1"`, ….
pub fn synth_scenes(specs: &[SynthSpec], seed: u64) -> Vec<AnnotatedFrame> {
    let (clouds, boxes) = frames_for(specs, seed);
    clouds
        .into_iter()
        .enumerate()
        .map(|(t, cloud)| AnnotatedFrame {
            cloud,
            annotations: specs
                .iter()
                .enumerate()
                .filter(|(i, _)| t < boxes[*i].len())
                .map(|(i, s)| Annotation {
                    object_id: i.to_string(),
                    class: s.class.clone(),
                    bbox: boxes[i][t].to_array(),
                })
                .collect(),
        })
        .collect()
}

/// Random per-object specs drawn from `opts`, one tracklet each.
pub fn synth_suite(opts: &SuiteOptions, count: usize, seed: u64) -> Vec<Tracklet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let class = opts.classes[i % opts.classes.len()];
            let heading = (rng.random::<f64>() * 2.0 - 1.0) * std::f64::consts::PI;
            let speed = rng.random::<f64>() * opts.max_speed;
            let spec = SynthSpec {
                frames: opts.frames,
                points_on_object: opts.points_on_object,
                yaw: heading,
                velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
                yaw_rate: (rng.random::<f64>() * 2.0 - 1.0) * opts.max_yaw_rate,
                noise_std: opts.noise_std,
                clutter_points: opts.clutter_points,
                distractors: opts.distractors,
                ..SynthSpec::for_class(class)
            };
            let mut t = synth_tracklet(&spec, rng.random());
            t.object_id = i.to_string();
            t
        })
        .collect()
}
