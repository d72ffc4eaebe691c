//! Overfits a handful of synthetic tracklets and reports training-set
//! Success every 50 epochs.
//!
//! `cargo run --release --example overfit -- configs/overfit.conf [key=value ...]`
//! Without a `.conf` argument the tiny profile is used. Set `OVERFIT_CKPT`
//! to keep the trained weights.

use std::time::Instant;

use reltrack::config::TrainConfig;
use reltrack::evaldata::{evaluate, synth_suite, SuiteOptions};
use reltrack::pipeline::{train, TrackSettings};

fn main() {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = if args.first().is_some_and(|a| a.ends_with(".conf")) {
        let text = std::fs::read_to_string(args.remove(0)).expect("config file");
        TrainConfig::from_text(&text).expect("config")
    } else {
        TrainConfig::tiny()
    };
    cfg.apply_overrides(&args).expect("overrides");
    let suite = synth_suite(&SuiteOptions::default(), 8, 7);
    let settings = TrackSettings::from(&cfg);
    let start = Instant::now();
    let out = train(&suite, &cfg, None, |e, m| {
        if e.epoch % 50 == 49 {
            let (r, _) = evaluate(&suite, m, &settings, 1, false).expect("eval");
            println!(
                "epoch {:>4} loss {:.4} (cls_c {:.3} reg_c {:.3} cls_f {:.3} reg_f {:.3}) success {:.1} precision {:.1} t={:.0}s",
                e.epoch + 1,
                e.loss.total,
                e.loss.cls_coarse,
                e.loss.reg_coarse,
                e.loss.cls_refined,
                e.loss.reg_refined,
                r.average.success,
                r.average.precision,
                start.elapsed().as_secs_f64()
            );
        }
        true
    })
    .expect("train");
    let (r, _) = evaluate(&suite, &out.model, &settings, 1, false).expect("eval");
    print!("{}", r.table());
    if let Ok(path) = std::env::var("OVERFIT_CKPT") {
        out.model.to_checkpoint(&cfg).write(std::path::Path::new(&path)).expect("checkpoint");
    }
    println!("epochs run: {} in {:.0}s", out.log.len(), start.elapsed().as_secs_f64());
}
