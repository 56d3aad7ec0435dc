//! Per-image post-processing: confidence filtering, greedy NMS and the
//! selective ensemble that merges several models' detections.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxCenter, BoxCorner};
use crate::head_decode::Detection;
use crate::text;

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const DEFAULT_ENSEMBLE_IOU: f64 = 0.55;

/// All detections one model produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
    /// Which weights produced the set, e.g. `768a`.
    pub source_tag: String,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, source_tag: impl Into<String>, detections: Vec<Detection>) -> Self {
        Self {
            image_id: image_id.into(),
            detections,
            source_tag: source_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    fn with_detections(&self, detections: Vec<Detection>) -> Self {
        Self {
            image_id: self.image_id.clone(),
            detections,
            source_tag: self.source_tag.clone(),
        }
    }
}

/// Keeps detections with `confidence >= threshold`, in order.
pub fn filter_confidence(set: &DetectionSet, threshold: f64) -> DetectionSet {
    set.with_detections(
        set.detections
            .iter()
            .filter(|d| d.confidence >= threshold)
            .copied()
            .collect(),
    )
}

/// Priority used by NMS: higher confidence first, then smaller area, then
/// earlier input position.
fn nms_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(dets[a].bbox.area().total_cmp(&dets[b].bbox.area()))
            .then(a.cmp(&b))
    });
    order
}

/// Class-agnostic greedy NMS. Survivors are returned in selection order.
pub fn nms(set: &DetectionSet, iou_threshold: f64) -> DetectionSet {
    let dets = &set.detections;
    let corners: Vec<BoxCorner> = dets.iter().map(|d| d.bbox.to_corner()).collect();
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for i in nms_order(dets) {
        if suppressed[i] {
            continue;
        }
        keep.push(dets[i]);
        for (j, s) in suppressed.iter_mut().enumerate() {
            if !*s && j != i && iou(&corners[i], &corners[j]) > iou_threshold {
                *s = true;
            }
        }
        suppressed[i] = true;
    }
    set.with_detections(keep)
}

struct Cluster {
    representative: BoxCorner,
    class_id: u32,
    members: Vec<Detection>,
    sources: Vec<usize>,
}

impl Cluster {
    fn merged(&self) -> Detection {
        if self.members.len() == 1 {
            return self.members[0];
        }
        let total: f64 = self.members.iter().map(|d| d.confidence).sum();
        let weight = |d: &Detection| {
            if total > 0.0 {
                d.confidence / total
            } else {
                1.0 / self.members.len() as f64
            }
        };
        let mean = |f: fn(&BoxCenter) -> f64| self.members.iter().map(|d| weight(d) * f(&d.bbox)).sum::<f64>();
        let bbox = BoxCenter::new(mean(BoxCenter::cx), mean(BoxCenter::cy), mean(BoxCenter::w), mean(BoxCenter::h))
            .expect("weighted mean of valid boxes is valid");
        Detection {
            bbox,
            class_id: self.class_id,
            confidence: self.members.iter().map(|d| d.confidence).fold(0.0, f64::max),
        }
    }
}

/// Selective ensemble of several models' detections for one image.
///
/// Detections are visited by descending confidence (ties by set order, then
/// position). Each joins the cluster whose representative (its first,
/// highest-confidence member) has the largest IoU `>= iou_threshold` with it,
/// provided the cluster has the same class and no member from the same set;
/// otherwise it opens a new cluster. A cluster becomes one detection with
/// confidence-weighted mean `(cx, cy, w, h)` and the maximum confidence, so
/// boxes that no other model reproduced pass through untouched.
pub fn ensemble_fuse(sets: &[DetectionSet], iou_threshold: f64) -> Result<DetectionSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("ensemble needs at least one detection set"))?;
    if let Some(other) = sets.iter().find(|s| s.image_id != first.image_id) {
        return Err(Error::ImageIdMismatch {
            expected: first.image_id.clone(),
            found: other.image_id.clone(),
        });
    }

    let mut queue: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.detections.len()).map(move |i| (s, i)))
        .collect();
    queue.sort_by(|&(sa, ia), &(sb, ib)| {
        sets[sb].detections[ib]
            .confidence
            .total_cmp(&sets[sa].detections[ia].confidence)
            .then(sa.cmp(&sb))
            .then(ia.cmp(&ib))
    });

    let mut clusters: Vec<Cluster> = Vec::new();
    for (s, i) in queue {
        let det = sets[s].detections[i];
        let corner = det.bbox.to_corner();
        let mut best: Option<(usize, f64)> = None;
        for (c, cluster) in clusters.iter().enumerate() {
            if cluster.class_id != det.class_id || cluster.sources.contains(&s) {
                continue;
            }
            let overlap = iou(&cluster.representative, &corner);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap.partial_cmp(&b) == Some(Ordering::Greater)) {
                best = Some((c, overlap));
            }
        }
        match best {
            Some((c, _)) => {
                clusters[c].members.push(det);
                clusters[c].sources.push(s);
            }
            None => clusters.push(Cluster {
                representative: corner,
                class_id: det.class_id,
                members: vec![det],
                sources: vec![s],
            }),
        }
    }

    let tag = sets.iter().map(|s| s.source_tag.as_str()).collect::<Vec<_>>().join("+");
    Ok(DetectionSet::new(
        first.image_id.clone(),
        tag,
        clusters.iter().map(Cluster::merged).collect(),
    ))
}

/// Parses the detection format `image_id class_id confidence cx cy w h`.
/// Sets come back sorted by image id, each keeping file order.
pub fn parse_detections(src: &str, source_tag: &str) -> Result<Vec<DetectionSet>> {
    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (line, f) in text::records(src) {
        text::expect_fields(line, &f, 7, "detection")?;
        text::check_image_id(line, f[0])?;
        let class_id: u32 = text::field(line, f[1], "class id")?;
        let confidence = text::finite(line, f[2], "confidence")?;
        let [cx, cy, w, h] = [3, 4, 5, 6].map(|k| text::finite(line, f[k], "coordinate"));
        let bbox = BoxCenter::new(cx?, cy?, w?, h?).map_err(|e| Error::parse(line, e.to_string()))?;
        let det = Detection::new(bbox, class_id, confidence).map_err(|e| Error::parse(line, e.to_string()))?;
        by_image.entry(f[0].to_string()).or_default().push(det);
    }
    Ok(by_image
        .into_iter()
        .map(|(id, dets)| DetectionSet::new(id, source_tag, dets))
        .collect())
}

pub fn format_detection_line(image_id: &str, d: &Detection) -> String {
    format!(
        "{} {} {} {} {} {} {}",
        image_id,
        d.class_id,
        text::fmt_f64(d.confidence),
        text::fmt_f64(d.bbox.cx()),
        text::fmt_f64(d.bbox.cy()),
        text::fmt_f64(d.bbox.w()),
        text::fmt_f64(d.bbox.h()),
    )
}

/// Writes sets in image-id order; detections keep their set order.
pub fn format_detections(sets: &[DetectionSet]) -> String {
    let mut sorted: Vec<&DetectionSet> = sets.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut out = String::new();
    for set in sorted {
        for d in &set.detections {
            out.push_str(&format_detection_line(&set.image_id, d));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, conf: f64) -> Detection {
        Detection::new(BoxCorner::new(x1, y1, x2, y2).unwrap().to_center(), 0, conf).unwrap()
    }

    fn set(dets: Vec<Detection>) -> DetectionSet {
        DetectionSet::new("img", "m", dets)
    }

    fn confidences(s: &DetectionSet) -> Vec<f64> {
        s.detections.iter().map(|d| d.confidence).collect()
    }

    #[test]
    fn filter_examples() {
        let s = set(vec![det(0., 0., 1., 1., 0.3), det(0., 0., 1., 1., 0.5), det(0., 0., 1., 1., 0.9)]);
        assert_eq!(filter_confidence(&s, 0.0), s);
        assert!(filter_confidence(&s, 1.0).is_empty());
        assert_eq!(confidences(&filter_confidence(&s, 0.5)), vec![0.5, 0.9]);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&set(vec![]), 0.45).is_empty());
        let s = set(vec![det(0., 0., 2., 2., 0.8), det(0., 0., 2., 2., 0.9)]);
        assert_eq!(confidences(&nms(&s, 0.45)), vec![0.9]);
        let s = set(vec![det(0., 0., 2., 2., 0.9), det(1., 1., 3., 3., 0.8)]);
        assert_eq!(nms(&s, 0.45).len(), 2);
    }

    #[test]
    fn nms_tie_prefers_smaller_box() {
        let s = set(vec![det(0., 0., 4., 4., 0.7), det(0., 0., 3., 4., 0.7)]);
        let kept = nms(&s, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.detections[0].bbox.w(), 3.0);
    }

    #[test]
    fn ensemble_examples() {
        let a = set(vec![det(0., 0., 2., 2., 0.6), det(10., 10., 12., 12., 0.4)]);
        assert_eq!(ensemble_fuse(&[a.clone()], 0.55).unwrap().detections, {
            let mut d = a.detections.clone();
            d.sort_by(|x, y| y.confidence.total_cmp(&x.confidence));
            d
        });

        let b = set(vec![det(20., 20., 22., 22., 0.7)]);
        assert_eq!(ensemble_fuse(&[a.clone(), b], 0.55).unwrap().len(), 3);

        let x = set(vec![det(0., 0., 2., 2., 0.6)]);
        let y = set(vec![det(0., 0., 2., 2., 0.8)]);
        let fused = ensemble_fuse(&[x, y], 0.55).unwrap();
        assert_eq!(fused.len(), 1);
        let d = fused.detections[0];
        assert_eq!(d.confidence, 0.8);
        let c = d.bbox.to_corner();
        assert!((c.x1() - 0.0).abs() < 1e-12 && (c.x2() - 2.0).abs() < 1e-12);
        assert!((c.y1() - 0.0).abs() < 1e-12 && (c.y2() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_weighted_mean() {
        let x = set(vec![Detection::new(BoxCenter::new(10.0, 10.0, 4.0, 4.0).unwrap(), 0, 0.25).unwrap()]);
        let y = set(vec![Detection::new(BoxCenter::new(10.5, 10.0, 4.0, 5.0).unwrap(), 0, 0.75).unwrap()]);
        let d = ensemble_fuse(&[x, y], 0.5).unwrap().detections[0];
        assert!((d.bbox.cx() - 10.375).abs() < 1e-12);
        assert!((d.bbox.h() - 4.75).abs() < 1e-12);
        assert_eq!(d.confidence, 0.75);
    }

    #[test]
    fn ensemble_never_merges_within_one_model() {
        let s = set(vec![det(0., 0., 2., 2., 0.9), det(0., 0., 2., 2., 0.8)]);
        assert_eq!(ensemble_fuse(&[s.clone(), s.clone()], 0.55).unwrap().len(), 2);
    }

    #[test]
    fn ensemble_errors() {
        assert!(ensemble_fuse(&[], 0.5).is_err());
        let a = DetectionSet::new("a", "m", vec![]);
        let b = DetectionSet::new("b", "m", vec![]);
        assert!(matches!(ensemble_fuse(&[a, b], 0.5), Err(Error::ImageIdMismatch { .. })));
    }

    #[test]
    fn detection_file_round_trip() {
        let src = "# model 768a\nb 0 0.5 0.25 0.25 0.1 0.2\na 0 0.9 0.5 0.5 0.3 0.3\na 1 0.333333333 0.1 0.9 0.05 0.05\n";
        let sets = parse_detections(src, "768a").unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].image_id, "a");
        assert_eq!(sets[0].len(), 2);
        let out = format_detections(&sets);
        assert_eq!(out, "a 0 0.9 0.5 0.5 0.3 0.3\na 1 0.333333333 0.1 0.9 0.05 0.05\nb 0 0.5 0.25 0.25 0.1 0.2\n");
        assert_eq!(format_detections(&parse_detections(&out, "x").unwrap()), out);
    }

    #[test]
    fn detection_file_errors_name_the_line() {
        let err = parse_detections("a 0 0.5 0.1 0.1 0.1 0.1\na 0 1.5 0.1 0.1 0.1 0.1\n", "m").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_detections("a 0 0.5 0.1 0.1 0.1\n", "m").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> DetectionSet {
        let dets = (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..40.0);
                let y = rng.gen_range(0.0..40.0);
                det(x, y, x + rng.gen_range(1.0..15.0), y + rng.gen_range(1.0..15.0), rng.gen_range(0.0..1.0))
            })
            .collect();
        set(dets)
    }

    proptest! {
        #[test]
        fn nms_antichain_and_monotone(seed in any::<u64>(), n in 0usize..40, t1 in 0.0..1.0f64, t2 in 0.0..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_set(&mut rng, n);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let kept = nms(&s, lo);
            for (i, a) in kept.detections.iter().enumerate() {
                for b in &kept.detections[i + 1..] {
                    prop_assert!(iou(&a.bbox.to_corner(), &b.bbox.to_corner()) <= lo);
                }
            }
            prop_assert!(kept.len() <= nms(&s, hi).len());
        }

        #[test]
        fn ensemble_counts(seed in any::<u64>(), n in 0usize..20, m in 0usize..20, t in 0.3..0.9f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_set(&mut rng, n);
            let b = random_set(&mut rng, m);
            let fused = ensemble_fuse(&[a.clone(), b.clone()], t).unwrap();
            prop_assert!(fused.len() <= n + m);
            prop_assert!(fused.len() >= n.max(m));
            let max_in = a.detections.iter().chain(&b.detections).map(|d| d.confidence).fold(0.0, f64::max);
            for d in &fused.detections {
                prop_assert!(d.confidence <= max_in);
            }
            let cross_overlap = a.detections.iter().any(|x| b.detections.iter().any(|y| {
                iou(&x.bbox.to_corner(), &y.bbox.to_corner()) >= t
            }));
            if !cross_overlap {
                prop_assert_eq!(fused.len(), n + m);
            }
            let alone = ensemble_fuse(std::slice::from_ref(&a), t).unwrap();
            let mut boxes_in: Vec<_> = a.detections.iter().map(|d| format!("{:?}", d)).collect();
            let mut boxes_out: Vec<_> = alone.detections.iter().map(|d| format!("{:?}", d)).collect();
            boxes_in.sort();
            boxes_out.sort();
            prop_assert_eq!(boxes_in, boxes_out);
        }
    }
}
