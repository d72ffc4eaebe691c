use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{precision_metric, success_metric, Tracklet};
use crate::geometry::box_iou_3d;
use crate::pipeline::{track_sequence, TrackSettings, TrackingModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
    pub tracklets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub tracklet: usize,
    pub object_id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Sorted by class name.
    pub classes: Vec<ClassMetrics>,
    /// Frame-count weighted over all classes.
    pub average: ClassMetrics,
    pub failures: Vec<EvalFailure>,
}

impl EvalReport {
    /// Weighted average of per-class rows.
    pub fn aggregate(classes: Vec<ClassMetrics>, failures: Vec<EvalFailure>) -> Result<EvalReport> {
        let frames: usize = classes.iter().map(|c| c.frames).sum();
        if frames == 0 {
            return Err(Error::Invalid("no evaluated frames".into()));
        }
        let w = |f: fn(&ClassMetrics) -> f64| classes.iter().map(|c| f(c) * c.frames as f64).sum::<f64>() / frames as f64;
        let average = ClassMetrics {
            class: "Average".into(),
            success: w(|c| c.success),
            precision: w(|c| c.precision),
            frames,
            tracklets: classes.iter().map(|c| c.tracklets).sum(),
        };
        Ok(EvalReport {
            classes,
            average,
            failures,
        })
    }

    /// Fixed-width table: class, tracklets, frames, success, precision.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>9} {:>7} {:>8} {:>9}\n", "class", "tracklets", "frames", "success", "precision");
        for c in self.classes.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(
                s,
                "{:<12} {:>9} {:>7} {:>8.1} {:>9.1}",
                c.class, c.tracklets, c.frames, c.success, c.precision
            );
        }
        s
    }
}

/// One tracked frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub tracklet: usize,
    pub object_id: String,
    pub class: String,
    pub frame: usize,
    pub iou: f64,
    pub center_distance: f64,
    pub flagged: bool,
    pub predicted: [f64; 7],
}

pub const FRAME_CSV_HEADER: &str = "tracklet,object_id,class,frame,iou,center_distance,flagged,x,y,z,l,w,h,yaw";

pub fn write_frame_csv(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let mut s = String::from(FRAME_CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = write!(
            s,
            "{},{},{},{},{:.6},{:.6},{}",
            r.tracklet, r.object_id, r.class, r.frame, r.iou, r.center_distance, r.flagged as u8
        );
        for v in r.predicted {
            let _ = write!(s, ",{v:.6}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Tracks every tracklet from its first ground-truth box. Frames after the
/// first each contribute one IoU and one center distance. Tracking errors
/// are reported per tracklet without stopping the others. Runs on the
/// current rayon pool; tracklet `i` uses stream `i` of a generator seeded
/// with `seed`, so results do not depend on the thread count.
pub fn evaluate<M: TrackingModel + ?Sized>(
    tracklets: &[Tracklet],
    model: &M,
    settings: &TrackSettings,
    seed: u64,
    use_truth: bool,
) -> Result<(EvalReport, Vec<FrameRecord>)> {
    if tracklets.is_empty() {
        return Err(Error::Invalid("no tracklets to evaluate".into()));
    }
    let runs: Vec<Result<Vec<FrameRecord>>> = tracklets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let clouds = t.clouds();
            let gt = t.boxes();
            let first = gt.first().ok_or(Error::Empty("tracklet"))?;
            let out = track_sequence(&clouds, first, model, settings, use_truth.then_some(&gt[..]), &mut rng)?;
            Ok(out
                .boxes
                .iter()
                .zip(&gt)
                .enumerate()
                .skip(1)
                .map(|(f, (p, g))| FrameRecord {
                    tracklet: i,
                    object_id: t.object_id.clone(),
                    class: t.class.clone(),
                    frame: f,
                    iou: box_iou_3d(p, g),
                    center_distance: p.center.distance(g.center),
                    flagged: out.flagged[f],
                    predicted: p.to_array(),
                })
                .collect())
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut per_class: Vec<(String, Vec<f64>, Vec<f64>, usize)> = Vec::new();
    for (i, run) in runs.into_iter().enumerate() {
        let t = &tracklets[i];
        match run {
            Ok(rs) => {
                let slot = match per_class.iter().position(|c| c.0 == t.class) {
                    Some(p) => p,
                    None => {
                        per_class.push((t.class.clone(), Vec::new(), Vec::new(), 0));
                        per_class.len() - 1
                    }
                };
                let entry = &mut per_class[slot];
                entry.3 += 1;
                for r in &rs {
                    entry.1.push(r.iou);
                    entry.2.push(r.center_distance);
                }
                records.extend(rs);
            }
            Err(e) => failures.push(EvalFailure {
                tracklet: i,
                object_id: t.object_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    per_class.sort_by(|a, b| a.0.cmp(&b.0));
    let classes = per_class
        .into_iter()
        .filter(|c| !c.1.is_empty())
        .map(|(class, ious, dists, tracklets)| {
            Ok(ClassMetrics {
                class,
                success: success_metric(&ious)?,
                precision: precision_metric(&dists)?,
                frames: ious.len(),
                tracklets,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::aggregate(classes, failures)?, records))
}
