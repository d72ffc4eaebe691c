//! Replays the checked-in fuzz seeds through the decoders with the same
//! assertions the fuzz targets make.

use std::fs;
use std::path::PathBuf;

use reltrack::config::TrainConfig;
use reltrack::evaldata::io::{decode_frame, encode_frame, parse_scene_line, TrackletMeta};
use reltrack::numeric::Checkpoint;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = corpus_file(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for (name, data) in seeds("checkpoint") {
        if let Ok(ckpt) = Checkpoint::from_bytes(&data) {
            assert_eq!(ckpt.to_bytes(), data, "{name}");
            decoded += 1;
        }
    }
    assert!(decoded > 0);
    assert!(Checkpoint::from_bytes(&fs::read(corpus_file("checkpoint/bad_crc.ckpt")).unwrap()).is_err());
}

#[test]
fn frame_seeds() {
    for (name, data) in seeds("frame") {
        if let Ok(points) = decode_frame(&data) {
            assert_eq!(encode_frame(&points), data, "{name}");
        }
    }
    assert!(decode_frame(&fs::read(corpus_file("frame/truncated.bin")).unwrap()).is_err());
}

#[test]
fn tracklet_meta_seeds() {
    for (name, data) in seeds("tracklet_meta") {
        let text = String::from_utf8(data).unwrap();
        match TrackletMeta::parse(&text) {
            Ok((meta, boxes)) => assert_eq!(boxes.len(), meta.frame_count, "{name}"),
            Err(_) => assert_eq!(name, "count_mismatch.json"),
        }
    }
}

#[test]
fn scene_line_seeds() {
    for (name, data) in seeds("scene_line") {
        let line = String::from_utf8(data).unwrap();
        assert!(parse_scene_line(line.trim_end()).is_ok(), "{name}");
    }
}

#[test]
fn run_config_seeds() {
    for (name, data) in seeds("run_config") {
        let text = String::from_utf8(data).unwrap();
        match TrainConfig::from_text(&text) {
            Ok(cfg) => assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg, "{name}"),
            Err(_) => assert_eq!(name, "bad_key.conf"),
        }
    }
}

fn corpus_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(rel)
}
