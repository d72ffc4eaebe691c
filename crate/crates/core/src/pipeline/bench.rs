use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::evaldata::{synth_tracklet, ObjectClass, SynthSpec};
use crate::{Error, Result};

use super::{build_input, init_model, StageClock, TrackSettings};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub mean_ms: f64,
}

/// Inference timings of a freshly initialized 32-bit model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub template_points: usize,
    pub search_points: usize,
    /// Cropping and resampling, outside the network.
    pub input_ms: f64,
    pub stages: Vec<StageTime>,
    pub forward_mean_ms: f64,
    pub forward_min_ms: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "forward pass, {} template / {} search points, {} iterations\n",
            self.template_points, self.search_points, self.iterations
        );
        s.push_str(&format!("{:<14} {:>10}\n", "stage", "mean ms"));
        s.push_str(&format!("{:<14} {:>10.3}\n", "input", self.input_ms));
        for st in &self.stages {
            s.push_str(&format!("{:<14} {:>10.3}\n", st.stage, st.mean_ms));
        }
        s.push_str(&format!("{:<14} {:>10.3}\n", "forward", self.forward_mean_ms));
        s.push_str(&format!("{:<14} {:>10.3}\n", "forward_min", self.forward_min_ms));
        s
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Times `iterations` inference passes on a dense synthetic car scene, after
/// one untimed warm-up pass. Runs on the calling thread.
pub fn bench_forward(cfg: &TrainConfig, iterations: usize, seed: u64) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Invalid("bench needs at least one iteration".into()));
    }
    cfg.validate()?;
    let spec = SynthSpec {
        frames: 2,
        points_on_object: 2 * cfg.model.template_input_points,
        clutter_points: 2 * cfg.model.search_input_points,
        ..SynthSpec::for_class(ObjectClass::Car)
    };
    let t = synth_tracklet(&spec, seed);
    let settings = TrackSettings::from(cfg);
    let model = init_model(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (prev, cur) = (&t.frames[0], &t.frames[1]);
    let mut clock = StageClock::on();
    let mut input_time = Duration::ZERO;
    let mut forward = Vec::with_capacity(iterations);
    for i in 0..=iterations {
        let start = Instant::now();
        let input = build_input(&prev.cloud, &prev.gt, &cur.cloud, &prev.gt, &settings, &mut rng)
            .ok_or(Error::Empty("bench template"))?;
        let built = Instant::now();
        let mut lap = if i == 0 { StageClock::off() } else { std::mem::take(&mut clock) };
        model.forward_timed(&input.template, &input.search, None, &mut rng, false, &mut lap)?;
        if i > 0 {
            clock = lap;
            input_time += built - start;
            forward.push(built.elapsed());
        }
    }
    let n = iterations as f64;
    Ok(BenchReport {
        iterations,
        template_points: cfg.model.template_input_points,
        search_points: cfg.model.search_input_points,
        input_ms: ms(input_time) / n,
        stages: clock
            .stages
            .iter()
            .map(|(name, d)| StageTime {
                stage: name.to_string(),
                mean_ms: ms(*d) / n,
            })
            .collect(),
        forward_mean_ms: forward.iter().map(|d| ms(*d)).sum::<f64>() / n,
        forward_min_ms: forward.iter().map(|d| ms(*d)).fold(f64::INFINITY, f64::min),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_every_stage() {
        let r = bench_forward(&TrainConfig::check(), 2, 1).unwrap();
        let names: Vec<_> = r.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["backbone", "prt", "coarse_head", "prm"]);
        assert!(r.forward_min_ms <= r.forward_mean_ms);
        assert!(bench_forward(&TrainConfig::check(), 0, 1).is_err());
    }
}
