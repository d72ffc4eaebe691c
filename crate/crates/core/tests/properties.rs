use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reltrack::config::TrainConfig;
use reltrack::evaldata::io::{decode_frame, encode_frame};
use reltrack::evaldata::{
    build_tracklets, precision_metric, success_auc, success_metric, synth_tracklet, AnnotatedFrame, Annotation,
    ObjectClass, SynthSpec, SUCCESS_AUC_STEPS,
};
use reltrack::geometry::{ball_query, box_iou_3d, count_in_box, Box3D, Point3, PointCloud};
use reltrack::heads::{decode_box, Prediction};
use reltrack::numeric::{Checkpoint, Matrix};
use reltrack::pipeline::TrackerNet;
use reltrack::sampling::{sample_dfps, sample_ffps, sample_hybrid, sample_ras};

fn point() -> impl Strategy<Value = Point3> {
    (-5.0..5.0f64, -5.0..5.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

fn bbox() -> impl Strategy<Value = Box3D> {
    (point(), 0.2..5.0f64, 0.2..3.0f64, 0.2..2.5f64, -4.0..4.0f64)
        .prop_map(|(c, l, w, h, yaw)| Box3D::new(c, [l, w, h], yaw).unwrap())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn distinct(idx: &[usize]) -> bool {
    let mut s = idx.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len() == idx.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = box_iou_3d(&a, &b);
        prop_assert!((ab - box_iou_3d(&b, &a)).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((box_iou_3d(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_is_invariant_to_a_shared_rigid_motion(a in bbox(), b in bbox(), frame in bbox()) {
        let moved = box_iou_3d(&a.in_frame_of(&frame), &b.in_frame_of(&frame));
        prop_assert!((moved - box_iou_3d(&a, &b)).abs() < 1e-7);
    }

    #[test]
    fn frame_change_round_trips(a in bbox(), frame in bbox()) {
        let back = a.in_frame_of(&frame).from_frame_of(&frame);
        prop_assert!(back.center.distance(a.center) < 1e-9);
        prop_assert!(Point3::new(back.yaw.cos() - a.yaw.cos(), back.yaw.sin() - a.yaw.sin(), 0.0).norm() < 1e-9);
    }

    #[test]
    fn ball_query_returns_the_first_neighbours_in_range(
        queries in prop::collection::vec(point(), 1..6),
        coords in prop::collection::vec(point(), 1..40),
        radius in 0.1..4.0f64,
        max_k in 1usize..10,
    ) {
        for (q, g) in queries.iter().zip(ball_query(&queries, &coords, radius, max_k)) {
            prop_assert!(g.len() <= max_k);
            prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(g.iter().all(|&i| coords[i].distance(*q) <= radius + 1e-12));
            let inside = coords.iter().filter(|p| p.distance(*q) <= radius).count();
            prop_assert_eq!(g.len(), inside.min(max_k));
        }
    }

    #[test]
    fn farthest_point_samplers_start_at_start_and_never_repeat(
        coords in prop::collection::vec(point(), 1..50),
        k in 1usize..60,
        start in 0usize..50,
    ) {
        let n = coords.len();
        let start = start % n;
        let d = sample_dfps(&coords, k, start);
        prop_assert_eq!(d.indices.len(), k);
        prop_assert_eq!(d.indices[0], start);
        prop_assert_eq!(d.padded, k > n);
        prop_assert!(distinct(&d.indices[..k.min(n)]));
        if k > n {
            for i in n..k {
                prop_assert_eq!(d.indices[i], d.indices[i % n]);
            }
        }
        let feats = Matrix::from_fn(n, 3, |r, c| coords[r].to_array()[c]);
        // Coordinates used as features give the same greedy order.
        prop_assert_eq!(sample_ffps(&feats, k, start).indices, d.indices);
    }

    #[test]
    fn relation_aware_sampling_ignores_template_order(
        (search, template) in (1usize..30, 1usize..12).prop_flat_map(|(n, m)| (matrix(n, 4), matrix(m, 4))),
        k in 1usize..30,
        seed in any::<u64>(),
    ) {
        let ras = sample_ras(&search, &template, k).unwrap();
        prop_assert_eq!(ras.indices.len(), k);
        prop_assert!(distinct(&ras.indices[..k.min(search.rows())]));
        let reversed = Matrix::from_fn(template.rows(), 4, |r, c| template.get(template.rows() - 1 - r, c));
        prop_assert_eq!(&sample_ras(&search, &reversed, k).unwrap().indices, &ras.indices);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hybrid = sample_hybrid(&search, &template, k, &mut rng).unwrap();
        prop_assert_eq!(hybrid.indices.len(), k);
        if k < search.rows() {
            prop_assert!(distinct(&hybrid.indices));
            prop_assert_eq!(&hybrid.indices[..k / 2], &ras.indices[..k / 2]);
        }
    }

    #[test]
    fn success_forms_agree(ious in prop::collection::vec(0.0..=1.0f64, 1..80)) {
        let a = success_metric(&ious).unwrap();
        let b = success_auc(&ious, SUCCESS_AUC_STEPS).unwrap();
        prop_assert!((a - b).abs() < 0.1, "{} vs {}", a, b);
    }

    #[test]
    fn precision_never_rises_when_distances_grow(
        d in prop::collection::vec(0.0..3.0f64, 1..50),
        shift in 0.0..1.0f64,
    ) {
        let moved: Vec<f64> = d.iter().map(|x| x + shift).collect();
        prop_assert!(precision_metric(&moved).unwrap() <= precision_metric(&d).unwrap() + 1e-9);
    }

    #[test]
    fn decoding_ignores_monotone_logit_transforms(
        logits in prop::collection::vec(-3.0..3.0f64, 1..20),
        scale in 0.1..5.0f64,
        shift in -2.0..2.0f64,
        reference in bbox(),
    ) {
        let n = logits.len();
        let seeds: Vec<Point3> = (0..n).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let reg = Matrix::from_fn(n, 4, |r, c| 0.1 * (r + c) as f64);
        let p = Prediction { cls_logits: Matrix::from_vec(n, 1, logits.clone()).unwrap(), reg: reg.clone() };
        let q = Prediction {
            cls_logits: Matrix::from_vec(n, 1, logits.iter().map(|l| (l * scale + shift).exp()).collect()).unwrap(),
            reg,
        };
        prop_assert_eq!(decode_box(&p, &seeds, &reference).unwrap(), decode_box(&q, &seeds, &reference).unwrap());
    }

    #[test]
    fn frame_files_round_trip(pts in prop::collection::vec(point(), 0..30)) {
        let stored: Vec<Point3> = pts
            .iter()
            .map(|p| Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64))
            .collect();
        prop_assert_eq!(decode_frame(&encode_frame(&pts)).unwrap(), stored);
    }

    #[test]
    fn run_config_text_round_trips(
        seed in any::<u64>(),
        lr in 1e-6..1e-1f64,
        sampler in prop::sample::select(vec!["random", "dfps", "ffps", "ras", "hybrid"]),
        use_prt in any::<bool>(),
        use_prm in any::<bool>(),
    ) {
        let mut cfg = TrainConfig::tiny();
        cfg.apply_overrides(&[
            format!("seed={seed}"),
            format!("lr={lr}"),
            format!("search_sampler={sampler}"),
            format!("use_prt={use_prt}"),
            format!("use_prm={use_prm}"),
        ]).unwrap();
        prop_assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Random presence/count fixtures: every emitted frame keeps at least
    /// `min_points` object points and every run has at least `min_len` frames.
    #[test]
    fn tracklets_respect_the_dataset_rules(
        counts in prop::collection::vec(prop::collection::vec(0usize..14, 2), 1..12),
    ) {
        let centers = [Point3::ORIGIN, Point3::new(8.0, 0.0, 0.0)];
        let frames: Vec<AnnotatedFrame> = counts
            .iter()
            .map(|per_object| {
                let mut pts = Vec::new();
                let mut anns = Vec::new();
                for (o, &n) in per_object.iter().enumerate() {
                    // 0 means the object is not annotated in this frame.
                    if n == 0 {
                        continue;
                    }
                    pts.extend((0..n).map(|i| centers[o] + Point3::new(0.03 * i as f64 - 0.2, 0.0, 0.0)));
                    anns.push(Annotation {
                        object_id: o.to_string(),
                        class: "Car".into(),
                        bbox: [centers[o].x, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0],
                    });
                }
                AnnotatedFrame { cloud: PointCloud::new(pts), annotations: anns }
            })
            .collect();
        let tracklets = build_tracklets(&frames, 10, 3).unwrap();
        let mut expected = 0;
        for o in 0..2 {
            let mut run = 0;
            for f in counts.iter().chain(std::iter::once(&vec![0, 0])) {
                if f[o] >= 10 {
                    run += 1;
                } else {
                    expected += (run >= 3) as usize;
                    run = 0;
                }
            }
        }
        prop_assert_eq!(tracklets.len(), expected);
        for t in &tracklets {
            prop_assert!(t.len() >= 3);
            for f in &t.frames {
                prop_assert!(count_in_box(&f.cloud.coords, &f.gt) >= 10);
            }
        }
    }

    #[test]
    fn synthesis_is_deterministic(seed in any::<u64>(), class in 0usize..4) {
        let spec = SynthSpec { frames: 3, ..SynthSpec::for_class(ObjectClass::ALL[class]) };
        prop_assert_eq!(synth_tracklet(&spec, seed), synth_tracklet(&spec, seed));
    }
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let cfg = TrainConfig::check();
    let net = TrackerNet::<f32>::seeded(&cfg.model, 4);
    let bytes = net.to_checkpoint(&cfg).to_bytes();
    let (cfg2, back) = TrackerNet::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(back, net);
    assert_eq!(back.to_checkpoint(&cfg2).to_bytes(), bytes);
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
}
