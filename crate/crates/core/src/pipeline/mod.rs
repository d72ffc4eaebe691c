//! Full network, training targets and loss, training loop and tracking loop.

mod bench;
mod loss;
mod model;
mod track;
mod train;

pub use bench::{bench_forward, BenchReport, StageTime};
pub use loss::{make_targets, total_loss, LossBreakdown, LossGrads, Targets};
pub use model::{ForwardPlan, NetCache, NetOutput, StageClock, TrackerNet};
pub use track::{
    build_input, resample, track_sequence, OracleModel, TrackOutput, TrackSettings, TrackerState,
    TrackingInput, TrackingModel,
};
pub use train::{init_model, train, training_pairs, write_metric_log, EpochLog, TrainOutcome};
