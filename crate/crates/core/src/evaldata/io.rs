//! On-disk formats.
//!
//! A tracklet directory holds `meta.json` and one `frame_%04d.bin` per
//! frame. A frame file is a little-endian `u32` point count followed by
//! `count × 3` little-endian `f32` coordinates. Annotated scenes are
//! JSON-lines, one scene per line:
//! `{"cloud": "<frame file>", "annotations": [{"object_id", "class", "box"}]}`
//! with cloud paths relative to the scene file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedFrame, Annotation, Tracklet, TrackletFrame};
use crate::geometry::{Box3D, Point3, PointCloud};
use crate::{Error, Result};

pub fn encode_frame(points: &[Point3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + points.len() * 12);
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in p.to_array() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<Vec<Point3>> {
    let bad = |reason: String| Error::format("frame file", reason);
    let (head, body) = bytes
        .split_first_chunk::<4>()
        .ok_or_else(|| bad("shorter than the count prefix".into()))?;
    let count = u32::from_le_bytes(*head) as usize;
    let expected = count.checked_mul(12).ok_or_else(|| bad("point count overflows".into()))?;
    if body.len() != expected {
        return Err(bad(format!("{count} points need {expected} bytes, found {}", body.len())));
    }
    body.chunks_exact(12)
        .enumerate()
        .map(|(i, c)| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
            let p = Point3::new(f(0), f(4), f(8));
            if p.is_finite() {
                Ok(p)
            } else {
                Err(bad(format!("point {i} is not finite")))
            }
        })
        .collect()
}

pub fn write_frame(path: &Path, points: &[Point3]) -> Result<()> {
    fs::write(path, encode_frame(points)).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: &Path) -> Result<Vec<Point3>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes).map_err(|e| match e {
        Error::Format { reason, .. } => Error::format(path.display().to_string(), reason),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletMeta {
    pub object_id: String,
    pub class: String,
    pub frame_count: usize,
    pub boxes: Vec<[f64; 7]>,
}

impl TrackletMeta {
    pub fn parse(text: &str) -> Result<(TrackletMeta, Vec<Box3D>)> {
        let meta: TrackletMeta = serde_json::from_str(text)?;
        if meta.frame_count == 0 {
            return Err(Error::format("meta.json", "a tracklet needs at least one frame"));
        }
        if meta.boxes.len() != meta.frame_count {
            return Err(Error::format(
                "meta.json",
                format!("frame_count {} but {} boxes", meta.frame_count, meta.boxes.len()),
            ));
        }
        let boxes = meta
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| Box3D::from_array(*b).map_err(|e| Error::format("meta.json", format!("box {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok((meta, boxes))
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.bin")
}

pub fn write_tracklet(dir: &Path, tracklet: &Tracklet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = TrackletMeta {
        object_id: tracklet.object_id.clone(),
        class: tracklet.class.clone(),
        frame_count: tracklet.len(),
        boxes: tracklet.frames.iter().map(|f| f.gt.to_array()).collect(),
    };
    let path = dir.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    for (i, f) in tracklet.frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i)), &f.cloud.coords)?;
    }
    Ok(())
}

pub fn read_tracklet(dir: &Path) -> Result<Tracklet> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (meta, boxes) = TrackletMeta::parse(&text)?;
    let frames = boxes
        .into_iter()
        .enumerate()
        .map(|(i, gt)| {
            Ok(TrackletFrame {
                cloud: PointCloud::new(read_frame(&dir.join(frame_file_name(i)))?),
                gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tracklet {
        object_id: meta.object_id,
        class: meta.class,
        frames,
    })
}

/// Writes `tracklet_%04d` directories under `root`.
pub fn write_dataset(root: &Path, tracklets: &[Tracklet]) -> Result<()> {
    for (i, t) in tracklets.iter().enumerate() {
        write_tracklet(&root.join(format!("tracklet_{i:04}")), t)?;
    }
    Ok(())
}

/// Reads every subdirectory holding a `meta.json`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<Tracklet>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root.display().to_string(), "no tracklet directories"));
    }
    dirs.iter().map(|d| read_tracklet(d)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub cloud: String,
    pub annotations: Vec<Annotation>,
}

pub fn parse_scene_line(line: &str) -> Result<SceneRecord> {
    let rec: SceneRecord = serde_json::from_str(line)?;
    if rec.cloud.is_empty() {
        return Err(Error::format("scene line", "empty cloud path"));
    }
    Ok(rec)
}

/// Reads a JSON-lines scene file; blank lines are skipped.
pub fn read_scenes(path: &Path) -> Result<Vec<AnnotatedFrame>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec = parse_scene_line(l).map_err(|e| Error::format(format!("{} line {}", path.display(), i + 1), e.to_string()))?;
            Ok(AnnotatedFrame {
                cloud: PointCloud::new(read_frame(&base.join(&rec.cloud))?),
                annotations: rec.annotations,
            })
        })
        .collect()
}

/// Writes each frame's cloud next to `path` and the scene lines into it.
pub fn write_scenes(path: &Path, frames: &[AnnotatedFrame]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    let mut text = String::new();
    for (i, f) in frames.iter().enumerate() {
        let name = format!("{stem}_{i:04}.bin");
        write_frame(&base.join(&name), &f.cloud.coords)?;
        let rec = SceneRecord {
            cloud: name,
            annotations: f.annotations.clone(),
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
