//! Detection metrics: greedy TP/FP matching, precision-recall curves,
//! all-points AP, mAP at one or a range of IoU thresholds, sweep-averaged
//! precision and recall, and per-image scores for picking hard images.
//!
//! Corpus-level functions take detections and ground truth as slices of
//! per-image sets. Several sets may share an image id (they are pooled), and
//! an image may appear on only one side.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCenter, BoxCorner};
use crate::head_decode::Detection;
use crate::postprocess::{DetectionSet, DEFAULT_CONF_THRESHOLD};
use crate::text;

pub const DEFAULT_EVAL_IOU: f64 = 0.5;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Confidence sweep 0.05, 0.10, ..., 0.95.
pub fn default_sweep() -> Vec<f64> {
    (1..=19).map(|i| (5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: u32,
    pub bbox: BoxCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub image_id: String,
    pub boxes: Vec<GroundTruth>,
}

impl GroundTruthSet {
    pub fn new(image_id: impl Into<String>, boxes: Vec<GroundTruth>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMatch {
    /// Position in the input detection list.
    pub index: usize,
    pub class_id: u32,
    pub confidence: f64,
    pub true_positive: bool,
    /// Ground truth claimed by a true positive.
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// In descending confidence, ties by input position.
    pub matches: Vec<DetectionMatch>,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.matches.iter().filter(|m| m.true_positive).count()
    }

    pub fn false_positives(&self) -> usize {
        self.matches.len() - self.true_positives()
    }
}

fn match_slices(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let gt_corners: Vec<BoxCorner> = gts.iter().map(|g| g.bbox.to_corner()).collect();
    let mut taken = vec![false; gts.len()];
    let matches = order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let corner = d.bbox.to_corner();
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.class_id != d.class_id {
                    continue;
                }
                let overlap = iou(&corner, &gt_corners[g]);
                if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            DetectionMatch {
                index: i,
                class_id: d.class_id,
                confidence: d.confidence,
                true_positive: best.is_some(),
                gt_index: best.map(|(g, _)| g),
            }
        })
        .collect();
    MatchResult {
        matches,
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

/// Greedy matching in descending confidence: each detection claims the
/// unclaimed same-class ground truth with the highest IoU at or above
/// `iou_threshold`.
pub fn match_detections(dets: &DetectionSet, gts: &GroundTruthSet, iou_threshold: f64) -> Result<MatchResult> {
    if dets.image_id != gts.image_id {
        return Err(Error::ImageIdMismatch {
            expected: gts.image_id.clone(),
            found: dets.image_id.clone(),
        });
    }
    Ok(match_slices(&dets.detections, &gts.boxes, iou_threshold))
}

/// Detections and ground truth pooled per image, in image-id order.
struct Corpus<'a> {
    images: BTreeMap<&'a str, (Vec<Detection>, Vec<GroundTruth>)>,
}

impl<'a> Corpus<'a> {
    fn new(dets: &'a [DetectionSet], gts: &'a [GroundTruthSet]) -> Self {
        let mut images: BTreeMap<&str, (Vec<Detection>, Vec<GroundTruth>)> = BTreeMap::new();
        for s in dets {
            images.entry(&s.image_id).or_default().0.extend_from_slice(&s.detections);
        }
        for s in gts {
            images.entry(&s.image_id).or_default().1.extend_from_slice(&s.boxes);
        }
        Self { images }
    }

    fn gt_per_class(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for (_, gts) in self.images.values() {
            for g in gts {
                *counts.entry(g.class_id).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Per-image match results, in image order.
    fn matched(&self, iou_threshold: f64, min_confidence: f64) -> Vec<MatchResult> {
        self.images
            .values()
            .map(|(dets, gts)| {
                if min_confidence > 0.0 {
                    let kept: Vec<Detection> = dets.iter().filter(|d| d.confidence >= min_confidence).copied().collect();
                    match_slices(&kept, gts, iou_threshold)
                } else {
                    match_slices(dets, gts, iou_threshold)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

fn curve_from_matches(matched: &[MatchResult], class_id: u32, total_gt: usize) -> Vec<PrPoint> {
    let mut hits: Vec<(f64, bool)> = matched
        .iter()
        .flat_map(|m| m.matches.iter())
        .filter(|m| m.class_id == class_id)
        .map(|m| (m.confidence, m.true_positive))
        .collect();
    // stable: equal confidences keep image order, then per-image order
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    hits.iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += usize::from(hit);
            PrPoint {
                recall: tp as f64 / total_gt as f64,
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect()
}

/// Cumulative precision/recall over the class's detections in descending
/// confidence, one point per detection.
pub fn precision_recall_curve(
    dets: &[DetectionSet],
    gts: &[GroundTruthSet],
    class_id: u32,
    iou_threshold: f64,
) -> Result<Vec<PrPoint>> {
    let corpus = Corpus::new(dets, gts);
    let total = corpus.gt_per_class().get(&class_id).copied().unwrap_or(0);
    if total == 0 {
        return Err(Error::invalid(format!("class {class_id} has no ground truth")));
    }
    Ok(curve_from_matches(&corpus.matched(iou_threshold, 0.0), class_id, total))
}

/// All-points interpolated AP: the precision envelope (running maximum from
/// the right) integrated over recall.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

/// AP per class over every class that has ground truth.
pub fn per_class_ap(dets: &[DetectionSet], gts: &[GroundTruthSet], iou_threshold: f64) -> Result<BTreeMap<u32, f64>> {
    let corpus = Corpus::new(dets, gts);
    class_aps(&corpus, iou_threshold)
}

fn class_aps(corpus: &Corpus<'_>, iou_threshold: f64) -> Result<BTreeMap<u32, f64>> {
    let counts = corpus.gt_per_class();
    if counts.is_empty() {
        return Err(Error::invalid("no class has ground truth; mAP is undefined"));
    }
    let matched = corpus.matched(iou_threshold, 0.0);
    Ok(counts
        .into_iter()
        .map(|(class, n)| (class, average_precision(&curve_from_matches(&matched, class, n))))
        .collect())
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// Unweighted mean of per-class AP.
pub fn map_at(dets: &[DetectionSet], gts: &[GroundTruthSet], iou_threshold: f64) -> Result<f64> {
    let aps = per_class_ap(dets, gts, iou_threshold)?;
    Ok(mean(aps.values().copied()))
}

/// mAP averaged over IoU thresholds 0.50:0.05:0.95.
pub fn map_range(dets: &[DetectionSet], gts: &[GroundTruthSet]) -> Result<f64> {
    let corpus = Corpus::new(dets, gts);
    let mut maps = Vec::with_capacity(10);
    for t in coco_iou_thresholds() {
        maps.push(mean(class_aps(&corpus, t)?.into_values()));
    }
    Ok(mean(maps.into_iter()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl Counts {
    fn from_matches(matched: &[MatchResult]) -> Self {
        matched.iter().fold(Counts::default(), |acc, m| Counts {
            true_positives: acc.true_positives + m.true_positives(),
            false_positives: acc.false_positives + m.false_positives(),
            false_negatives: acc.false_negatives + m.false_negatives,
        })
    }

    /// `TP / (TP + FP)`, or 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        let predicted = self.true_positives + self.false_positives;
        if predicted == 0 {
            1.0
        } else {
            self.true_positives as f64 / predicted as f64
        }
    }

    /// `TP / (TP + FN)`, or 1 when there is nothing to find.
    pub fn recall(&self) -> f64 {
        let actual = self.true_positives + self.false_negatives;
        if actual == 0 {
            1.0
        } else {
            self.true_positives as f64 / actual as f64
        }
    }
}

/// Corpus precision and recall at each confidence cutoff in `sweep`,
/// averaged over the sweep.
pub fn mean_precision_recall(
    dets: &[DetectionSet],
    gts: &[GroundTruthSet],
    iou_threshold: f64,
    sweep: &[f64],
) -> Result<(f64, f64)> {
    if sweep.is_empty() {
        return Err(Error::invalid("confidence sweep is empty"));
    }
    let corpus = Corpus::new(dets, gts);
    let (mut p, mut r) = (0.0, 0.0);
    for &t in sweep {
        let c = Counts::from_matches(&corpus.matched(iou_threshold, t));
        p += c.precision();
        r += c.recall();
    }
    let n = sweep.len() as f64;
    Ok((p / n, r / n))
}

/// mAP of each image on its own. An image without ground truth scores 1
/// if it also has no detections, else 0.
pub fn per_image_map(dets: &[DetectionSet], gts: &[GroundTruthSet], iou_threshold: f64) -> BTreeMap<String, f64> {
    let corpus = Corpus::new(dets, gts);
    corpus
        .images
        .iter()
        .map(|(&id, (d, g))| {
            let score = if g.is_empty() {
                if d.is_empty() {
                    1.0
                } else {
                    0.0
                }
            } else {
                let single_d = [DetectionSet::new(id, "", d.clone())];
                let single_g = [GroundTruthSet::new(id, g.clone())];
                map_at(&single_d, &single_g, iou_threshold).expect("image has ground truth")
            };
            (id.to_string(), score)
        })
        .collect()
}

/// Images scoring strictly below `map_threshold`, lowest score first, ties
/// by id.
pub fn select_challenging(per_image: &BTreeMap<String, f64>, map_threshold: f64) -> Vec<String> {
    let mut hard: Vec<(&String, f64)> = per_image
        .iter()
        .filter(|(_, &s)| s < map_threshold)
        .map(|(id, &s)| (id, s))
        .collect();
    hard.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    hard.into_iter().map(|(id, _)| id.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Cutoff for the reported TP/FP/FN counts.
    pub conf_threshold: f64,
    pub sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_EVAL_IOU,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            sweep: default_sweep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub map50: f64,
    pub map5095: f64,
    pub per_class_ap: BTreeMap<u32, f64>,
    pub per_image_map: BTreeMap<String, f64>,
    pub counts: Counts,
}

/// The full metric suite. `map50` is evaluated at `cfg.iou_threshold`.
pub fn evaluate(dets: &[DetectionSet], gts: &[GroundTruthSet], cfg: &EvalConfig) -> Result<EvalReport> {
    let per_class_ap = per_class_ap(dets, gts, cfg.iou_threshold)?;
    let map50 = mean(per_class_ap.values().copied());
    let map5095 = map_range(dets, gts)?;
    let (mean_precision, mean_recall) = mean_precision_recall(dets, gts, cfg.iou_threshold, &cfg.sweep)?;
    let corpus = Corpus::new(dets, gts);
    let counts = Counts::from_matches(&corpus.matched(cfg.iou_threshold, cfg.conf_threshold));
    Ok(EvalReport {
        mean_precision,
        mean_recall,
        map50,
        map5095,
        per_class_ap,
        per_image_map: per_image_map(dets, gts, cfg.iou_threshold),
        counts,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let f = text::fmt_f64;
        let mut out = String::new();
        let _ = writeln!(out, "mean_precision {}", f(self.mean_precision));
        let _ = writeln!(out, "mean_recall {}", f(self.mean_recall));
        let _ = writeln!(out, "map50 {}", f(self.map50));
        let _ = writeln!(out, "map50_95 {}", f(self.map5095));
        let _ = writeln!(
            out,
            "counts tp {} fp {} fn {}",
            self.counts.true_positives, self.counts.false_positives, self.counts.false_negatives
        );
        for (class, ap) in &self.per_class_ap {
            let _ = writeln!(out, "class_ap {} {}", class, f(*ap));
        }
        for (image, m) in &self.per_image_map {
            let _ = writeln!(out, "image_map {} {}", image, f(*m));
        }
        out
    }
}

/// Parses the ground-truth format `image_id class_id cx cy w h` (normalized).
/// Sets come back sorted by image id.
pub fn parse_ground_truth(src: &str) -> Result<Vec<GroundTruthSet>> {
    let mut by_image: BTreeMap<String, Vec<GroundTruth>> = BTreeMap::new();
    for (line, f) in text::records(src) {
        text::expect_fields(line, &f, 6, "ground truth")?;
        text::check_image_id(line, f[0])?;
        let class_id: u32 = text::field(line, f[1], "class id")?;
        let g = GroundTruth {
            class_id,
            bbox: parse_normalized_box(line, &f[2..6])?,
        };
        by_image.entry(f[0].to_string()).or_default().push(g);
    }
    Ok(by_image
        .into_iter()
        .map(|(id, boxes)| GroundTruthSet::new(id, boxes))
        .collect())
}

/// `cx cy w h` with every value in `[0, 1]` and positive size.
pub(crate) fn parse_normalized_box(line: usize, f: &[&str]) -> Result<BoxCenter> {
    let names = ["cx", "cy", "w", "h"];
    let mut v = [0.0; 4];
    for k in 0..4 {
        v[k] = text::finite(line, f[k], names[k])?;
        if !(0.0..=1.0).contains(&v[k]) {
            return Err(Error::parse(line, format!("{} = {} is outside [0, 1]", names[k], f[k])));
        }
    }
    if v[2] <= 0.0 || v[3] <= 0.0 {
        return Err(Error::parse(line, "box width and height must be positive"));
    }
    BoxCenter::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(line, e.to_string()))
}

pub fn format_ground_truth_line(image_id: &str, g: &GroundTruth) -> String {
    format!(
        "{} {} {} {} {} {}",
        image_id,
        g.class_id,
        text::fmt_f64(g.bbox.cx()),
        text::fmt_f64(g.bbox.cy()),
        text::fmt_f64(g.bbox.w()),
        text::fmt_f64(g.bbox.h()),
    )
}

pub fn format_ground_truth(sets: &[GroundTruthSet]) -> String {
    let mut out = String::new();
    for s in sets {
        for g in &s.boxes {
            out.push_str(&format_ground_truth_line(&s.image_id, g));
            out.push('\n');
        }
    }
    out
}

/// Image ids present on either side.
pub fn image_ids(dets: &[DetectionSet], gts: &[GroundTruthSet]) -> BTreeSet<String> {
    dets.iter()
        .map(|s| s.image_id.clone())
        .chain(gts.iter().map(|s| s.image_id.clone()))
        .collect()
}
