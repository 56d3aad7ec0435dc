use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use fishdet_core::datasets::{ingest_pseudo as ingest, partition as keep_partition, upsample_challenging};
use fishdet_core::evaluation::{default_sweep, evaluate, per_image_map, select_challenging as select};
use fishdet_core::head_decode::{decode_grid, focus_inverse, focus_transform, kmeans_anchors, parse_raw_grids};
use fishdet_core::postprocess::{ensemble_fuse, filter_confidence, format_detections, nms as suppress};
use fishdet_core::separator::{self, separator_train as train};
use fishdet_core::text::{fmt_f64, records};
use fishdet_core::{BoxCenter, DetectionSet, EvalConfig, Route, SeparatorParams, TimeOfDay, TrainConfig};
use rayon::prelude::*;
use serde_json::Value;

use crate::config::{check_unit, PipelineConfig};
use crate::error::{CliError, CliResult};
use crate::io;
use crate::{
    AnchorsArgs, DecodeArgs, EnsembleArgs, EvalArgs, FocusArgs, IngestPseudoArgs, NmsArgs, PartitionArgs, RouteArgs,
    SelectChallengingArgs, SeparatorTrainArgs, UpsampleArgs,
};

/// Replaces every float in a JSON tree with its 9-significant-digit rounding
/// so JSON and text output agree.
fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x: f64 = fmt_f64(n.as_f64().unwrap_or_default()).parse().unwrap_or_default();
            if let Some(r) = serde_json::Number::from_f64(x) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let cfg = PipelineConfig {
        eval_iou: a.iou,
        conf_threshold: a.conf,
        sweep: a.sweep.unwrap_or_else(default_sweep),
        ..PipelineConfig::with_inputs([&a.gt, &a.det])
    };
    cfg.validate()?;
    let gts = io::ground_truth(&a.gt)?;
    let dets = io::detections(&a.det)?;
    let report = evaluate(
        &dets,
        &gts,
        &EvalConfig {
            iou_threshold: cfg.eval_iou,
            conf_threshold: cfg.conf_threshold,
            sweep: cfg.sweep,
        },
    )?;
    let text = if a.json {
        let mut v = serde_json::to_value(&report).expect("report serializes");
        round_floats(&mut v);
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    } else {
        report.to_text()
    };
    io::emit(None, &text)
}

pub fn ensemble(a: EnsembleArgs) -> CliResult<()> {
    let cfg = PipelineConfig {
        ensemble_iou: a.iou,
        nms_iou: a.nms_iou.unwrap_or(fishdet_core::postprocess::DEFAULT_NMS_IOU),
        ..PipelineConfig::with_inputs(&a.dets)
    };
    cfg.validate()?;
    let files = a.dets.iter().map(|p| io::detections(p)).collect::<CliResult<Vec<_>>>()?;
    let tags: Vec<String> = a
        .dets
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let lookup: Vec<BTreeMap<&str, &DetectionSet>> =
        files.iter().map(|sets| sets.iter().map(|s| (s.image_id.as_str(), s)).collect()).collect();
    let ids: BTreeSet<&str> = lookup.iter().flat_map(|m| m.keys().copied()).collect();

    // A model with no line for an image contributes an empty set, so every
    // image sees one set per input file.
    let fused = ids
        .par_iter()
        .map(|&id| {
            let sets: Vec<DetectionSet> = lookup
                .iter()
                .zip(&tags)
                .map(|(m, tag)| {
                    let set = m.get(id).map(|s| (*s).clone()).unwrap_or_else(|| DetectionSet::new(id, tag, vec![]));
                    match a.nms_iou {
                        Some(t) => suppress(&set, t),
                        None => set,
                    }
                })
                .collect();
            ensemble_fuse(&sets, cfg.ensemble_iou)
        })
        .collect::<Result<Vec<_>, _>>()?;
    io::emit(a.out.as_deref(), &format_detections(&fused))
}

pub fn route(a: RouteArgs) -> CliResult<()> {
    PipelineConfig::with_inputs([&a.checkpoint, &a.images]).validate()?;
    check_unit("day threshold", a.threshold)?;
    let params = SeparatorParams::from_text(&io::read(&a.checkpoint)?).map_err(|e| CliError::at(&a.checkpoint, e))?;
    let entries = io::image_list(&a.images)?;
    let mut routed = entries
        .par_iter()
        .map(|(id, path)| {
            let img = io::image(path)?;
            let r = separator::route(&params, &img, a.threshold).map_err(|e| CliError::at(path, e))?;
            Ok((id.clone(), r))
        })
        .collect::<CliResult<Vec<_>>>()?;
    routed.sort_by(|x, y| x.0.cmp(&y.0));

    let (mut all, mut day, mut night) = (String::new(), String::new(), String::new());
    for (id, r) in &routed {
        let (name, list) = match r {
            Route::Day => ("day", &mut day),
            Route::Night => ("night", &mut night),
        };
        let _ = writeln!(all, "{id} {name}");
        let _ = writeln!(list, "{id}");
    }
    if let Some(p) = &a.day_out {
        io::emit(Some(p), &day)?;
    }
    if let Some(p) = &a.night_out {
        io::emit(Some(p), &night)?;
    }
    io::emit(None, &all)
}

pub fn nms(a: NmsArgs) -> CliResult<()> {
    PipelineConfig {
        nms_iou: a.iou,
        conf_threshold: a.conf.unwrap_or(0.0),
        ..PipelineConfig::with_inputs([&a.det])
    }
    .validate()?;
    let sets = io::detections(&a.det)?;
    let kept: Vec<DetectionSet> = sets
        .par_iter()
        .map(|s| match a.conf {
            Some(c) => suppress(&filter_confidence(s, c), a.iou),
            None => suppress(s, a.iou),
        })
        .collect();
    io::emit(a.out.as_deref(), &format_detections(&kept))
}

pub fn decode(a: DecodeArgs) -> CliResult<()> {
    PipelineConfig {
        conf_threshold: a.conf,
        nms_iou: a.nms_iou.unwrap_or(fishdet_core::postprocess::DEFAULT_NMS_IOU),
        ..PipelineConfig::with_inputs([&a.raw])
    }
    .validate()?;
    let blocks = parse_raw_grids(&io::read(&a.raw)?).map_err(|e| CliError::at(&a.raw, e))?;
    let decoded = blocks
        .par_iter()
        .map(|b| {
            let mut dets = decode_grid(&b.grid, a.conf).map_err(|e| CliError::at(&a.raw, e))?;
            if a.normalize {
                let side = b.grid.grid_size() as f64 * b.grid.stride();
                for d in &mut dets {
                    let x = d.bbox;
                    d.bbox = BoxCenter::new(x.cx() / side, x.cy() / side, x.w() / side, x.h() / side)?;
                }
            }
            Ok((b.image_id.as_str(), dets))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut by_image: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for (id, dets) in decoded {
        by_image.entry(id).or_default().extend(dets);
    }
    let sets: Vec<DetectionSet> = by_image
        .into_par_iter()
        .map(|(id, dets)| {
            let set = DetectionSet::new(id, "decode", dets);
            match a.nms_iou {
                Some(t) => suppress(&set, t),
                None => set,
            }
        })
        .collect();
    io::emit(a.out.as_deref(), &format_detections(&sets))
}

pub fn anchors(a: AnchorsArgs) -> CliResult<()> {
    let boxes: Vec<(f64, f64)> = match (&a.gt, &a.manifest) {
        (Some(gt), _) => {
            PipelineConfig::with_inputs([gt]).validate()?;
            let (w, h) = (f64::from(a.width), f64::from(a.height));
            io::ground_truth(gt)?
                .iter()
                .flat_map(|s| s.boxes.iter().map(move |g| (g.bbox.w() * w, g.bbox.h() * h)))
                .collect()
        }
        (None, Some(records)) => {
            let ann = a.annotations.as_deref();
            PipelineConfig::with_inputs([Some(records.as_path()), ann].into_iter().flatten()).validate()?;
            let m = io::manifest(records, ann)?;
            m.records()
                .iter()
                .flat_map(|r| {
                    let (w, h) = (f64::from(r.width), f64::from(r.height));
                    m.annotations(&r.image_id).iter().map(move |g| (g.bbox.w() * w, g.bbox.h() * h))
                })
                .collect()
        }
        (None, None) => return Err(CliError::Invalid("give --gt or --manifest".into())),
    };
    let set = kmeans_anchors(&boxes, a.seed)?;
    io::emit(a.out.as_deref(), &set.to_text())
}

pub fn separator_train(a: SeparatorTrainArgs) -> CliResult<()> {
    let pipeline = PipelineConfig {
        seed: a.seed,
        ..PipelineConfig::with_inputs([&a.manifest])
    };
    pipeline.validate()?;
    let m = io::manifest(&a.manifest, None)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for r in m.records() {
        let label = match r.tod {
            TimeOfDay::Day => Route::Day,
            TimeOfDay::Night => Route::Night,
            TimeOfDay::Unknown => {
                skipped += 1;
                continue;
            }
        };
        entries.push((r.image_id.clone(), io::resolve(base, &r.path)));
        labels.push(label);
    }
    if skipped > 0 {
        eprintln!("fishdet: skipped {skipped} records without a day/night label");
    }
    let side = a.input_side;
    let data = io::images(&entries)?
        .into_par_iter()
        .zip(labels)
        .map(|((_, img), label)| Ok((img.resize_bilinear(side, side)?, label)))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: pipeline.seed,
        batch_size: a.batch,
        input_side: side,
    };
    let outcome = train(&data, &cfg)?;
    io::emit(Some(&a.out), &outcome.params.to_text())?;
    let mut log = String::new();
    for (i, e) in outcome.history.iter().enumerate() {
        let _ = writeln!(log, "epoch {} accuracy {} loss {}", i + 1, fmt_f64(e.accuracy), fmt_f64(e.loss));
    }
    io::emit(None, &log)
}

pub fn partition(a: PartitionArgs) -> CliResult<()> {
    let ann = a.annotations.as_deref();
    PipelineConfig::with_inputs([Some(a.manifest.as_path()), ann].into_iter().flatten()).validate()?;
    let m = io::manifest(&a.manifest, ann)?;
    let kept = keep_partition(&m, a.rule);
    io::save_manifest(&kept, a.output.out.as_deref(), a.output.annotations_out.as_deref())
}

pub fn select_challenging(a: SelectChallengingArgs) -> CliResult<()> {
    PipelineConfig {
        eval_iou: a.iou,
        challenging_map: a.map_threshold,
        ..PipelineConfig::with_inputs([&a.gt, &a.det])
    }
    .validate()?;
    let gts = io::ground_truth(&a.gt)?;
    let dets = io::detections(&a.det)?;
    let scores = per_image_map(&dets, &gts, a.iou);
    let mut out = String::new();
    for id in select(&scores, a.map_threshold) {
        let _ = writeln!(out, "{id}");
    }
    io::emit(a.out.as_deref(), &out)
}

pub fn upsample(a: UpsampleArgs) -> CliResult<()> {
    let ann = a.annotations.as_deref();
    PipelineConfig::with_inputs([Some(a.manifest.as_path()), ann, Some(a.challenging.as_path())].into_iter().flatten())
        .validate()?;
    let m = io::manifest(&a.manifest, ann)?;
    let ids: Vec<String> = records(&io::read(&a.challenging)?).map(|(_, f)| f[0].to_string()).collect();
    let up = upsample_challenging(&m, &ids, a.factor)?;
    io::save_manifest(&up, a.output.out.as_deref(), a.output.annotations_out.as_deref())
}

pub fn focus(a: FocusArgs) -> CliResult<()> {
    PipelineConfig::with_inputs([&a.input]).validate()?;
    let img = io::image(&a.input)?;
    let out = if a.inverse { focus_inverse(&img) } else { focus_transform(&img) }.map_err(|e| CliError::at(&a.input, e))?;
    io::emit(a.out.as_deref(), &out.to_text())
}

pub fn ingest_pseudo(a: IngestPseudoArgs) -> CliResult<()> {
    PipelineConfig {
        conf_threshold: a.min_conf,
        ..PipelineConfig::with_inputs([&a.det, &a.images])
    }
    .validate()?;
    let dets = io::detections(&a.det)?;
    let images = io::manifest(&a.images, None)?;
    let m = ingest(&dets, images.records(), a.min_conf)?;
    io::save_manifest(&m, a.output.out.as_deref(), a.output.annotations_out.as_deref())
}
