use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::geometry::{crop, crop_template, enlarge_box, Box3D, Point3, PointCloud};
use crate::heads::{decode_box, Prediction};
use crate::numeric::Real;
use crate::sampling::sample_random;
use crate::{Error, Result};

use super::TrackerNet;

/// Crop and resampling parameters shared by training and tracking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackSettings {
    pub template_extend_ratio: f64,
    pub search_margin: f64,
    pub template_points: usize,
    pub search_points: usize,
}

impl From<&TrainConfig> for TrackSettings {
    fn from(c: &TrainConfig) -> Self {
        TrackSettings {
            template_extend_ratio: c.template_extend_ratio,
            search_margin: c.search_margin,
            template_points: c.model.template_input_points,
            search_points: c.model.search_input_points,
        }
    }
}

/// Network input in the canonical frame of `reference`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingInput {
    pub reference: Box3D,
    pub template: Vec<Point3>,
    pub search: Vec<Point3>,
}

impl TrackingInput {
    /// `reference` with its pose removed: the box the predictions are
    /// relative to.
    pub fn canonical_reference(&self) -> Box3D {
        Box3D {
            center: Point3::ORIGIN,
            yaw: 0.0,
            ..self.reference
        }
    }
}

/// `n` points drawn without replacement, padded by repetition when the cloud
/// is smaller. `None` for an empty cloud.
pub fn resample<R: Rng + ?Sized>(points: &[Point3], n: usize, rng: &mut R) -> Option<Vec<Point3>> {
    if points.is_empty() {
        return None;
    }
    Some(sample_random(points.len(), n, rng).indices.into_iter().map(|i| points[i]).collect())
}

/// Crops the template around `template_box` and the search region around
/// `reference`, both in the canonical frame of their box. `None` when
/// either crop is empty.
pub fn build_input<R: Rng + ?Sized>(
    template_cloud: &PointCloud,
    template_box: &Box3D,
    search_cloud: &PointCloud,
    reference: &Box3D,
    settings: &TrackSettings,
    rng: &mut R,
) -> Option<TrackingInput> {
    let template = crop_template(template_cloud, template_box, settings.template_extend_ratio)
        .to_box_frame(template_box);
    let search = crop(search_cloud, &enlarge_box(reference, settings.search_margin)).to_box_frame(reference);
    Some(TrackingInput {
        reference: *reference,
        template: resample(&template.coords, settings.template_points, rng)?,
        search: resample(&search.coords, settings.search_points, rng)?,
    })
}

/// Anything that maps a tracking input to per-seed predictions.
pub trait TrackingModel: Sync {
    /// `truth` is the ground-truth box in the canonical frame, when known.
    fn predict(
        &self,
        input: &TrackingInput,
        truth: Option<&Box3D>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Prediction<f64>, Vec<Point3>)>;
}

impl<T: Real> TrackingModel for TrackerNet<T> {
    fn predict(
        &self,
        input: &TrackingInput,
        _truth: Option<&Box3D>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Prediction<f64>, Vec<Point3>)> {
        let (out, _) = self.forward(&input.template, &input.search, None, rng, false)?;
        Ok((out.final_prediction().cast(), out.seeds))
    }
}

/// Test stub that answers with the ground-truth offset from the first seed.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleModel;

impl TrackingModel for OracleModel {
    fn predict(
        &self,
        input: &TrackingInput,
        truth: Option<&Box3D>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Prediction<f64>, Vec<Point3>)> {
        let gt = truth.ok_or(Error::Config("the oracle model needs ground truth".into()))?;
        let seed = *input.search.first().ok_or(Error::Empty("search cloud"))?;
        let mut pred = Prediction::zeros(1);
        pred.cls_logits.set(0, 0, 1.0);
        let d = gt.center - seed;
        for (c, v) in [d.x, d.y, d.z, gt.yaw].into_iter().enumerate() {
            pred.reg.set(0, c, v);
        }
        Ok((pred, vec![seed]))
    }
}

/// What the tracker carries between frames.
#[derive(Clone, Debug)]
pub struct TrackerState {
    pub template_cloud: PointCloud,
    pub template_box: Box3D,
    pub fixed_size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutput {
    pub boxes: Vec<Box3D>,
    /// Frames where the search region was empty and the box was held.
    pub flagged: Vec<bool>,
}

/// Tracks one object from its initial box. Frame 0 returns `init_box`;
/// later frames search around the previous prediction.
pub fn track_sequence<M: TrackingModel + ?Sized>(
    frames: &[PointCloud],
    init_box: &Box3D,
    model: &M,
    settings: &TrackSettings,
    truth: Option<&[Box3D]>,
    rng: &mut ChaCha8Rng,
) -> Result<TrackOutput> {
    if frames.is_empty() {
        return Err(Error::Empty("frame sequence"));
    }
    if truth.is_some_and(|t| t.len() != frames.len()) {
        return Err(Error::shape("track_sequence", "ground truth length differs from frame count"));
    }
    let mut state = TrackerState {
        template_cloud: crop_template(&frames[0], init_box, settings.template_extend_ratio),
        template_box: *init_box,
        fixed_size: init_box.size,
    };
    let mut boxes = vec![*init_box];
    let mut flagged = vec![false];
    for t in 1..frames.len() {
        let previous = *boxes.last().expect("non-empty");
        let input = build_input(
            &state.template_cloud,
            &state.template_box,
            &frames[t],
            &previous,
            settings,
            rng,
        );
        let Some(input) = input else {
            boxes.push(previous);
            flagged.push(true);
            continue;
        };
        let canonical_truth = truth.map(|gt| gt[t].in_frame_of(&previous));
        let (pred, seeds) = model.predict(&input, canonical_truth.as_ref(), rng)?;
        let local = decode_box(&pred, &seeds, &input.canonical_reference())?;
        let mut next = local.from_frame_of(&previous);
        next.size = state.fixed_size;
        let crop_now = crop_template(&frames[t], &next, settings.template_extend_ratio);
        if !crop_now.is_empty() {
            state.template_cloud = crop_now;
            state.template_box = next;
        }
        boxes.push(next);
        flagged.push(false);
    }
    Ok(TrackOutput { boxes, flagged })
}
