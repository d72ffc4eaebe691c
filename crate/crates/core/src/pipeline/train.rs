use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::evaldata::Tracklet;
use crate::geometry::distort_box;
use crate::numeric::{zeroed, AdamConfig, AdamState};
use crate::{Error, Result};

use super::{build_input, make_targets, total_loss, LossBreakdown, TrackSettings, TrackerNet};

/// Mean losses of one epoch and the learning rate it used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub samples: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrackerNet<f32>,
    pub log: Vec<EpochLog>,
}

/// Initial weights for `cfg`, determined by `cfg.seed`.
pub fn init_model(cfg: &TrainConfig) -> TrackerNet<f32> {
    TrackerNet::seeded(&cfg.model, cfg.seed)
}

/// `(tracklet, frame)` for every frame with a predecessor.
pub fn training_pairs(tracklets: &[Tracklet]) -> Vec<(usize, usize)> {
    tracklets
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (1..t.len()).map(move |f| (i, f)))
        .collect()
}

/// Trains from `init` (or fresh weights). After every epoch `on_epoch` sees
/// the log entry and the model and may return `false` to stop early.
pub fn train(
    tracklets: &[Tracklet],
    cfg: &TrainConfig,
    init: Option<TrackerNet<f32>>,
    mut on_epoch: impl FnMut(&EpochLog, &TrackerNet<f32>) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init.unwrap_or_else(|| init_model(cfg));
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, log });
    }
    let mut pairs = training_pairs(tracklets);
    if pairs.is_empty() {
        return Err(Error::Invalid("training needs a tracklet with at least two frames".into()));
    }
    let settings = TrackSettings::from(cfg);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        adam.set_lr(lr);
        pairs.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut samples = 0;
        for batch in pairs.chunks(cfg.batch_size) {
            let mut grads = zeroed(&model);
            let mut used = 0;
            let mut caches = Vec::with_capacity(batch.len());
            for &(ti, f) in batch {
                let prev = &tracklets[ti].frames[f - 1];
                let cur = &tracklets[ti].frames[f];
                let reference = distort_box(&prev.gt, cfg.distortion_range, &mut rng);
                let Some(input) = build_input(&prev.cloud, &reference, &cur.cloud, &reference, &settings, &mut rng)
                else {
                    continue;
                };
                let (out, cache) = model.forward(&input.template, &input.search, None, &mut rng, true)?;
                let targets = make_targets(&out.seeds, &cur.gt.in_frame_of(&reference), 0.0);
                let (loss, d) = total_loss(&out.coarse, out.refined.as_ref(), &targets, cfg.lambda)?;
                if !loss.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        detail: format!("tracklet {ti} frame {f}: {loss:?}"),
                    });
                }
                model.backward(&cache, &d.coarse, d.refined.as_ref(), &mut grads);
                caches.push(cache);
                sum.add(&loss);
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f32;
            let mut slots = Vec::new();
            crate::numeric::Parameterized::tensors_mut(&mut grads, false, &mut slots);
            for g in slots {
                g.scale(scale);
            }
            adam.step(&mut model, &grads)?;
            for c in &caches {
                model.commit(c);
            }
            samples += used;
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: sum.scaled(1.0 / samples.max(1) as f64),
            lr,
            samples,
        };
        log.push(entry);
        if !on_epoch(&entry, &model) {
            break;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// CSV with columns `epoch,total,cls_c,reg_c,cls_f,reg_f,lr`.
pub fn write_metric_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from("epoch,total,cls_c,reg_c,cls_f,reg_f,lr\n");
    for e in log {
        let l = &e.loss;
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            e.epoch, l.total, l.cls_coarse, l.reg_coarse, l.cls_refined, l.reg_refined, e.lr
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
