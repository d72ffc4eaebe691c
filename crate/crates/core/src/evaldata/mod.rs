//! Metrics, tracklet datasets (construction, synthesis, disk format) and
//! evaluation.

mod dataset;
mod evaluate;
pub mod io;
mod metrics;
mod synth;

pub use dataset::{build_tracklets, AnnotatedFrame, Annotation, Tracklet, TrackletFrame, MIN_LEN, MIN_POINTS};
pub use evaluate::{
    evaluate, write_frame_csv, ClassMetrics, EvalFailure, EvalReport, FrameRecord, FRAME_CSV_HEADER,
};
pub use metrics::{precision_metric, success_auc, success_metric, PRECISION_STEPS, SUCCESS_AUC_STEPS};
pub use synth::{synth_scenes, synth_suite, synth_tracklet, ObjectClass, SuiteOptions, SynthSpec};
