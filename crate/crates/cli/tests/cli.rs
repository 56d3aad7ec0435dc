use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fishdet_core::evaluation::{evaluate, parse_ground_truth};
use fishdet_core::head_decode::{decode_grid, format_raw_grid};
use fishdet_core::postprocess::{format_detections, nms, parse_detections};
use fishdet_core::{Anchor, EvalConfig, ImageTensor, RawGridPrediction, SeparatorParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn fishdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fishdet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fishdet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sorted_lines(text: &str) -> Vec<String> {
    let mut v: Vec<String> = text.lines().map(str::to_owned).collect();
    v.sort();
    v
}

/// Ground truth and matching detections for `n` images with a few misses
/// and false positives.
fn synthetic_corpus(n: usize, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gt, mut det) = (String::new(), String::new());
    for i in 0..n {
        for _ in 0..rng.gen_range(1..5) {
            let class = rng.gen_range(0..2);
            let (cx, cy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
            let (w, h) = (rng.gen_range(0.05..0.2), rng.gen_range(0.05..0.2));
            gt.push_str(&format!("im{i:02} {class} {cx} {cy} {w} {h}\n"));
            if rng.gen_bool(0.8) {
                let j = rng.gen_range(-0.02..0.02);
                det.push_str(&format!("im{i:02} {class} {} {} {cy} {w} {h}\n", rng.gen_range(0.05..1.0), cx + j));
            }
        }
        if rng.gen_bool(0.5) {
            det.push_str(&format!("im{i:02} 0 {} 0.5 0.5 0.1 0.1\n", rng.gen_range(0.05..1.0)));
        }
    }
    (gt, det)
}

#[test]
fn eval_perfect_detections() {
    let dir = TempDir::new().unwrap();
    let gt = write(dir.path(), "gt.txt", "a 0 0.5 0.5 0.2 0.2\nb 1 0.3 0.3 0.1 0.1\n");
    let det = write(dir.path(), "det.txt", "a 0 1 0.5 0.5 0.2 0.2\nb 1 1 0.3 0.3 0.1 0.1\n");
    let out = ok(&["eval", "--gt", s(&gt), "--det", s(&det)]);
    assert!(out.contains("map50 1\n"), "{out}");
    assert!(out.contains("map50_95 1\n"), "{out}");
}

#[test]
fn eval_empty_detections_scores_zero() {
    let dir = TempDir::new().unwrap();
    let gt = write(dir.path(), "gt.txt", "a 0 0.5 0.5 0.2 0.2\n");
    let det = write(dir.path(), "det.txt", "");
    let out = ok(&["eval", "--gt", s(&gt), "--det", s(&det)]);
    assert!(out.contains("map50 0\n"), "{out}");
}

#[test]
fn eval_matches_library() {
    let dir = TempDir::new().unwrap();
    let (gt_src, det_src) = synthetic_corpus(20, 1);
    let gt = write(dir.path(), "gt.txt", &gt_src);
    let det = write(dir.path(), "det.txt", &det_src);
    let report = evaluate(
        &parse_detections(&det_src, "det").unwrap(),
        &parse_ground_truth(&gt_src).unwrap(),
        &EvalConfig::default(),
    )
    .unwrap();
    assert_eq!(ok(&["eval", "--gt", s(&gt), "--det", s(&det)]), report.to_text());

    let json: serde_json::Value = serde_json::from_str(&ok(&["eval", "--gt", s(&gt), "--det", s(&det), "--json"])).unwrap();
    let map50: f64 = fishdet_core::text::fmt_f64(report.map50).parse().unwrap();
    assert_eq!(json["map50"].as_f64().unwrap(), map50);
    assert_eq!(json["per_image_map"].as_object().unwrap().len(), 20);
}

#[test]
fn malformed_input_exits_2_with_line_number() {
    let dir = TempDir::new().unwrap();
    let gt = write(dir.path(), "gt.txt", "a 0 0.5 0.5 0.2 0.2\na 0 0.5 zero 0.2 0.2\n");
    let det = write(dir.path(), "det.txt", "");
    let out = fishdet(&["eval", "--gt", s(&gt), "--det", s(&det)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gt.txt") && err.contains("line 2"), "{err}");

    let missing = fishdet(&["nms", "--det", s(&dir.path().join("absent.txt"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn out_of_range_threshold_exits_1() {
    let dir = TempDir::new().unwrap();
    let det = write(dir.path(), "det.txt", "a 0 0.9 0.5 0.5 0.2 0.2\n");
    let out = fishdet(&["nms", "--det", s(&det), "--iou", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn nms_matches_library() {
    let dir = TempDir::new().unwrap();
    let (_, det_src) = synthetic_corpus(10, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut src = det_src.clone();
    for line in det_src.lines() {
        // near-duplicate of each line
        let f: Vec<&str> = line.split(' ').collect();
        let cx: f64 = f[3].parse().unwrap();
        src.push_str(&format!("{} {} {} {} {} {} {}\n", f[0], f[1], rng.gen_range(0.01..1.0), cx + 0.005, f[4], f[5], f[6]));
    }
    let det = write(dir.path(), "det.txt", &src);
    let want: Vec<_> = parse_detections(&src, "det").unwrap().iter().map(|s| nms(s, 0.45)).collect();
    assert_eq!(ok(&["nms", "--det", s(&det)]), format_detections(&want));
}

#[test]
fn ensemble_single_input_is_identity() {
    let dir = TempDir::new().unwrap();
    let (_, det_src) = synthetic_corpus(8, 4);
    let det = write(dir.path(), "det.txt", &det_src);
    let canonical = format_detections(&parse_detections(&det_src, "det").unwrap());
    assert_eq!(sorted_lines(&ok(&["ensemble", "--det", s(&det)])), sorted_lines(&canonical));
}

#[test]
fn ensemble_disjoint_inputs_concatenate() {
    let dir = TempDir::new().unwrap();
    let a_src = "a 0 0.9 0.2 0.2 0.1 0.1\nb 0 0.8 0.2 0.2 0.1 0.1\n";
    let b_src = "a 0 0.7 0.7 0.7 0.1 0.1\nc 1 0.6 0.5 0.5 0.1 0.1\n";
    let a = write(dir.path(), "a.txt", a_src);
    let b = write(dir.path(), "b.txt", b_src);
    let out = ok(&["ensemble", "--det", s(&a), "--det", s(&b)]);
    assert_eq!(sorted_lines(&out), sorted_lines(&format!("{a_src}{b_src}")));
}

#[test]
fn ensemble_is_order_independent() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut files = Vec::new();
    for m in 0..3 {
        let mut src = String::new();
        for i in 0..6 {
            for k in 0..4 {
                let (cx, cy) = (0.15 + 0.2 * k as f64 + rng.gen_range(-0.01..0.01), 0.5 + rng.gen_range(-0.01..0.01));
                if rng.gen_bool(0.8) {
                    src.push_str(&format!("im{i} 0 {} {cx} {cy} 0.1 0.12\n", rng.gen_range(0.05..1.0)));
                }
            }
        }
        files.push(write(dir.path(), &format!("m{m}.txt"), &src));
    }
    let run = |order: [usize; 3]| {
        let mut args = vec!["ensemble"];
        for &i in &order {
            args.extend(["--det", s(&files[i])]);
        }
        let mut dets: Vec<(String, Vec<f64>)> = parse_detections(&ok(&args), "out")
            .unwrap()
            .into_iter()
            .flat_map(|set| {
                set.detections
                    .into_iter()
                    .map(move |d| (set.image_id.clone(), vec![d.confidence, d.bbox.cx(), d.bbox.cy(), d.bbox.w(), d.bbox.h()]))
            })
            .collect();
        dets.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()));
        dets
    };
    let base = run([0, 1, 2]);
    assert!(!base.is_empty());
    for order in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let other = run(order);
        assert_eq!(other.len(), base.len(), "{order:?}");
        for (x, y) in base.iter().zip(&other) {
            assert_eq!(x.0, y.0);
            for (u, v) in x.1.iter().zip(&y.1) {
                assert!((u - v).abs() <= 1e-9, "{order:?}: {x:?} vs {y:?}");
            }
        }
    }
}

fn write_png(path: &Path, side: u32, level: f64, rng: &mut ChaCha8Rng) {
    let img = image::RgbImage::from_fn(side, side, |_, _| {
        let v = ((level + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([v, v, v])
    });
    img.save(path).unwrap();
}

#[test]
fn route_empty_list_and_zero_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    SeparatorParams::zeros(16).save(&ckpt).unwrap();
    let empty = write(dir.path(), "empty.txt", "");
    assert_eq!(ok(&["route", "--checkpoint", s(&ckpt), "--images", s(&empty)]), "");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut list = String::new();
    for i in 0..5 {
        write_png(&dir.path().join(format!("f{i}.png")), 20, 0.1 + 0.2 * i as f64, &mut rng);
        list.push_str(&format!("f{i}.png\n"));
    }
    let images = write(dir.path(), "images.txt", &list);
    let day = dir.path().join("day.txt");
    let night = dir.path().join("night.txt");
    let out = ok(&[
        "route", "--checkpoint", s(&ckpt), "--images", s(&images), "--day-out", s(&day), "--night-out", s(&night),
    ]);
    assert_eq!(out, "f0 day\nf1 day\nf2 day\nf3 day\nf4 day\n");
    assert_eq!(std::fs::read_to_string(&night).unwrap(), "");
    assert_eq!(std::fs::read_to_string(&day).unwrap().lines().count(), 5);
}

#[test]
fn route_unreadable_image_exits_2() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("zero.ckpt");
    SeparatorParams::zeros(16).save(&ckpt).unwrap();
    write(dir.path(), "bad.png", "not an image");
    let images = write(dir.path(), "images.txt", "bad.png\n");
    let out = fishdet(&["route", "--checkpoint", s(&ckpt), "--images", s(&images)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trained_separator_splits_bright_and_dark() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut manifest = String::from("#manifest v1\n");
    for i in 0..64 {
        let day = i % 2 == 0;
        let level = if day { rng.gen_range(0.6..0.9) } else { rng.gen_range(0.05..0.3) };
        write_png(&dir.path().join(format!("t{i:02}.png")), 24, level, &mut rng);
        let tod = if day { "day" } else { "night" };
        manifest.push_str(&format!("t{i:02} t{i:02}.png 24 24 {tod} fish\n"));
    }
    let m = write(dir.path(), "train.manifest", &manifest);
    let ckpt = dir.path().join("sep.ckpt");
    let log = ok(&[
        "separator-train", "--manifest", s(&m), "--epochs", "40", "--input-side", "16", "--seed", "3", "--out", s(&ckpt),
    ]);
    assert_eq!(log.lines().count(), 40);

    let mut list = String::new();
    let mut want = Vec::new();
    for i in 0..10 {
        let day = i % 3 == 0;
        let level = if day { rng.gen_range(0.6..0.9) } else { rng.gen_range(0.05..0.3) };
        write_png(&dir.path().join(format!("q{i:02}.png")), 32, level, &mut rng);
        list.push_str(&format!("q{i:02}.png\n"));
        want.push(format!("q{i:02} {}", if day { "day" } else { "night" }));
    }
    let images = write(dir.path(), "query.txt", &list);
    let out = ok(&["route", "--checkpoint", s(&ckpt), "--images", s(&images)]);
    assert_eq!(out.lines().collect::<Vec<_>>(), want);
}

#[test]
fn decode_matches_library() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let anchors = [Anchor::new(10.0, 13.0).unwrap(), Anchor::new(16.0, 30.0).unwrap(), Anchor::new(33.0, 23.0).unwrap()];
    let mut src = String::new();
    let mut want = Vec::new();
    for id in ["x", "y"] {
        let values: Vec<f64> = (0..4 * 4 * 3 * 5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let raw = RawGridPrediction::new(4, 8.0, anchors, values).unwrap();
        src.push_str(&format_raw_grid(id, &raw));
        want.push(fishdet_core::DetectionSet::new(id, "decode", decode_grid(&raw, 0.25).unwrap()));
    }
    let raw = write(dir.path(), "raw.txt", &src);
    assert_eq!(ok(&["decode", "--raw", s(&raw)]), format_detections(&want));

    let normalized = ok(&["decode", "--raw", s(&raw), "--normalize"]);
    for set in parse_detections(&normalized, "n").unwrap() {
        for d in set.detections {
            assert!(d.bbox.cx() > 0.0 && d.bbox.cx() < 1.0);
        }
    }
}

#[test]
fn anchors_are_deterministic_and_sorted() {
    let dir = TempDir::new().unwrap();
    let (gt_src, _) = synthetic_corpus(30, 9);
    let gt = write(dir.path(), "gt.txt", &gt_src);
    let a = ok(&["anchors", "--gt", s(&gt), "--seed", "4"]);
    assert_eq!(a, ok(&["anchors", "--gt", s(&gt), "--seed", "4"]));
    let areas: Vec<f64> = a
        .lines()
        .map(|l| l.split(' ').map(|v| v.parse::<f64>().unwrap()).product())
        .collect();
    assert_eq!(areas.len(), 9);
    assert!(areas.windows(2).all(|w| w[0] <= w[1]), "{a}");
}

#[test]
fn partition_upsample_and_select_challenging() {
    let dir = TempDir::new().unwrap();
    let records = "#manifest v1\n\
        a a.png 640 480 day fish\n\
        b b.png 640 480 night fish\n\
        c c.png 640 480 day bdd\n\
        d d.png 640 480 night fish\n";
    let m = write(dir.path(), "m.manifest", records);
    let ann = write(dir.path(), "m.ann", "a 0 0.5 0.5 0.2 0.2\nb 0 0.5 0.5 0.2 0.2\n");
    let night = ok(&["partition", "--manifest", s(&m), "--rule", "fish-night"]);
    assert_eq!(night.lines().skip(1).map(|l| &l[..1]).collect::<String>(), "bd");

    let gt = write(dir.path(), "gt.txt", "a 0 0.5 0.5 0.2 0.2\nb 0 0.5 0.5 0.2 0.2\n");
    let det = write(dir.path(), "det.txt", "a 0 0.9 0.5 0.5 0.2 0.2\n");
    let hard = ok(&["select-challenging", "--gt", s(&gt), "--det", s(&det)]);
    assert_eq!(hard, "b\n");

    let hard_file = write(dir.path(), "hard.txt", &hard);
    let out_ann = dir.path().join("up.ann");
    let up = ok(&[
        "upsample", "--manifest", s(&m), "--annotations", s(&ann), "--challenging", s(&hard_file),
        "--annotations-out", s(&out_ann),
    ]);
    assert_eq!(up.lines().count() - 1, 4 + 9);
    assert_eq!(std::fs::read_to_string(&out_ann).unwrap().lines().count(), 1 + 10);
}

#[test]
fn ingest_pseudo_keeps_confident_boxes() {
    let dir = TempDir::new().unwrap();
    let m = write(dir.path(), "m.manifest", "#manifest v1\nu u.png 100 100 unknown bdd\n");
    let det = write(dir.path(), "det.txt", "u 0 0.9 0.5 0.5 0.2 0.2\nu 0 0.2 0.3 0.3 0.1 0.1\n");
    let ann = dir.path().join("p.ann");
    let out = ok(&["ingest-pseudo", "--det", s(&det), "--images", s(&m), "--annotations-out", s(&ann)]);
    assert!(out.contains("u u.png 100 100 day pseudo"), "{out}");
    assert_eq!(std::fs::read_to_string(&ann).unwrap().lines().count(), 1);
}

#[test]
fn focus_round_trip_through_files() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let img = ImageTensor::from_fn(6, 8, 3, |_, _, _| rng.gen_range(0.0..1.0));
    let input = write(dir.path(), "in.tensor", &img.to_text());
    let folded = dir.path().join("folded.tensor");
    ok(&["focus", "--input", s(&input), "--out", s(&folded)]);
    let back = ok(&["focus", "--input", s(&folded), "--inverse"]);
    // Tensor text is canonical 9-digit output, so compare with the rounded input.
    let rounded = ImageTensor::from_text(&img.to_text()).unwrap();
    assert_eq!(ImageTensor::from_text(&back).unwrap(), rounded);
}
