use serde::{Deserialize, Serialize};

use crate::geometry::{count_in_box, Box3D, PointCloud};
use crate::{Error, Result};

/// Objects with fewer in-box points are dropped from a frame.
pub const MIN_POINTS: usize = 10;
/// Runs with fewer frames are dropped.
pub const MIN_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackletFrame {
    pub cloud: PointCloud,
    pub gt: Box3D,
}

/// One object's consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub object_id: String,
    pub class: String,
    pub frames: Vec<TrackletFrame>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn boxes(&self) -> Vec<Box3D> {
        self.frames.iter().map(|f| f.gt).collect()
    }

    pub fn clouds(&self) -> Vec<PointCloud> {
        self.frames.iter().map(|f| f.cloud.clone()).collect()
    }
}

/// Raw per-object label as stored in scene files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub object_id: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotatedFrame {
    pub cloud: PointCloud,
    pub annotations: Vec<Annotation>,
}

/// Splits every object's annotations into maximal runs of consecutive
/// frames with at least `min_points` in-box points, keeping runs of at least
/// `min_len` frames. Tracklets come out ordered by object first appearance,
/// then run start.
pub fn build_tracklets(frames: &[AnnotatedFrame], min_points: usize, min_len: usize) -> Result<Vec<Tracklet>> {
    // object id -> (class, per-frame usable box)
    let mut objects: Vec<(String, String, Vec<Option<Box3D>>)> = Vec::new();
    for (fi, frame) in frames.iter().enumerate() {
        let mut seen: Vec<&str> = Vec::new();
        for a in &frame.annotations {
            let bad = |reason: String| Error::Annotation {
                frame: fi,
                object: a.object_id.clone(),
                reason,
            };
            if a.object_id.is_empty() {
                return Err(bad("empty object id".into()));
            }
            if seen.contains(&a.object_id.as_str()) {
                return Err(bad("object annotated twice in one frame".into()));
            }
            seen.push(&a.object_id);
            let b = Box3D::from_array(a.bbox).map_err(|e| bad(e.to_string()))?;
            let slot = match objects.iter().position(|(id, _, _)| *id == a.object_id) {
                Some(i) => i,
                None => {
                    objects.push((a.object_id.clone(), a.class.clone(), vec![None; frames.len()]));
                    objects.len() - 1
                }
            };
            if objects[slot].1 != a.class {
                return Err(bad(format!("class changed from `{}` to `{}`", objects[slot].1, a.class)));
            }
            if count_in_box(&frame.cloud.coords, &b) >= min_points {
                objects[slot].2[fi] = Some(b);
            }
        }
    }
    let mut out = Vec::new();
    for (id, class, per_frame) in objects {
        let mut run: Vec<TrackletFrame> = Vec::new();
        for (fi, slot) in per_frame.iter().enumerate().chain(std::iter::once((frames.len(), &None))) {
            match slot {
                Some(b) => run.push(TrackletFrame {
                    cloud: frames[fi].cloud.clone(),
                    gt: *b,
                }),
                None => {
                    if run.len() >= min_len {
                        out.push(Tracklet {
                            object_id: id.clone(),
                            class: class.clone(),
                            frames: std::mem::take(&mut run),
                        });
                    }
                    run.clear();
                }
            }
        }
    }
    Ok(out)
}
