//! Reference implementations used as oracles by the integration tests.
//!
//! Each one is written from the definitions directly, sharing no code with
//! the library beyond plain data types.

#![allow(dead_code)]

use std::collections::BTreeMap;

/// Box as `[x1, y1, x2, y2]`.
pub type Rect = [f64; 4];

/// Overlap measures of two integer boxes computed by counting unit cells.
pub struct GridMetrics {
    pub iou: f64,
    pub giou: f64,
    pub diou: f64,
}

pub fn pixel_grid_metrics(a: [i64; 4], b: [i64; 4]) -> GridMetrics {
    let covers = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (lo_x, lo_y) = (a[0].min(b[0]), a[1].min(b[1]));
    let (hi_x, hi_y) = (a[2].max(b[2]), a[3].max(b[3]));

    let (mut inter, mut union) = (0i64, 0i64);
    let (mut sum_a, mut sum_b) = ([0i64; 2], [0i64; 2]);
    let (mut n_a, mut n_b) = (0i64, 0i64);
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (in_a, in_b) = (covers(a, x, y), covers(b, x, y));
            if in_a && in_b {
                inter += 1;
            }
            if in_a || in_b {
                union += 1;
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
            // Cell centres are at (x + 0.5, y + 0.5); summing 2x + 1 keeps
            // the centroid arithmetic in integers.
            if in_a {
                sum_a[0] += 2 * x + 1;
                sum_a[1] += 2 * y + 1;
                n_a += 1;
            }
            if in_b {
                sum_b[0] += 2 * x + 1;
                sum_b[1] += 2 * y + 1;
                n_b += 1;
            }
        }
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    let enc_w = (max_x - min_x + 1) as f64;
    let enc_h = (max_y - min_y + 1) as f64;
    let enclosing = enc_w * enc_h;
    let giou = iou - (enclosing - union as f64) / enclosing;
    let ca = [sum_a[0] as f64 / (2 * n_a) as f64, sum_a[1] as f64 / (2 * n_a) as f64];
    let cb = [sum_b[0] as f64 / (2 * n_b) as f64, sum_b[1] as f64 / (2 * n_b) as f64];
    let rho2 = (ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2);
    let diag2 = enc_w * enc_w + enc_h * enc_h;
    GridMetrics {
        iou,
        giou,
        diou: iou - rho2 / diag2,
    }
}

pub fn rect_iou(a: Rect, b: Rect) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn center_to_rect(c: [f64; 4]) -> Rect {
    [c[0] - c[2] / 2.0, c[1] - c[3] / 2.0, c[0] + c[2] / 2.0, c[1] + c[3] / 2.0]
}

fn aspect_v(w: f64, h: f64, gw: f64, gh: f64) -> f64 {
    let d = (gw / gh).atan() - (w / h).atan();
    4.0 / (std::f64::consts::PI * std::f64::consts::PI) * d * d
}

/// Trade-off weight of the aspect term for a prediction/target pair.
pub fn ciou_alpha_ref(pred: [f64; 4], gt: [f64; 4]) -> f64 {
    let iou = rect_iou(center_to_rect(pred), center_to_rect(gt));
    if iou < 0.5 {
        return 0.0;
    }
    let v = aspect_v(pred[2], pred[3], gt[2], gt[3]);
    if (1.0 - iou) + v == 0.0 {
        0.0
    } else {
        v / ((1.0 - iou) + v)
    }
}

/// CIoU loss of a `(cx, cy, w, h)` prediction with the aspect weight fixed.
pub fn ciou_loss_fixed_alpha(pred: [f64; 4], gt: [f64; 4], alpha: f64) -> f64 {
    let (p, g) = (center_to_rect(pred), center_to_rect(gt));
    let iou = rect_iou(p, g);
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let rho2 = (pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2);
    1.0 - iou + rho2 / (cw * cw + ch * ch) + alpha * aspect_v(pred[2], pred[3], gt[2], gt[3])
}

/// One scored box for the reference evaluator and NMS.
#[derive(Debug, Clone, Copy)]
pub struct RefDet {
    pub image: usize,
    pub class: u32,
    pub conf: f64,
    pub rect: Rect,
}

#[derive(Debug, Clone, Copy)]
pub struct RefGt {
    pub image: usize,
    pub class: u32,
    pub rect: Rect,
}

/// True positives among the detections of one class scoring at least
/// `cutoff`, matching every image from scratch.
fn true_positives_at(dets: &[RefDet], gts: &[RefGt], class: u32, cutoff: f64, thr: f64) -> usize {
    let mut by_image: BTreeMap<usize, (Vec<RefDet>, Vec<RefGt>)> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.class == class && d.conf >= cutoff) {
        by_image.entry(d.image).or_default().0.push(*d);
    }
    for g in gts.iter().filter(|g| g.class == class) {
        by_image.entry(g.image).or_default().1.push(*g);
    }
    let mut tp = 0;
    for (mut ds, gs) in by_image.into_values() {
        ds.sort_by(|a, b| b.conf.partial_cmp(&a.conf).unwrap());
        let mut taken = vec![false; gs.len()];
        for d in &ds {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gs.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = rect_iou(d.rect, g.rect);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, o)) = best {
                if o >= thr {
                    taken[j] = true;
                    tp += 1;
                }
            }
        }
    }
    tp
}

/// Mean over ground-truth classes of all-point interpolated AP, obtained by
/// re-evaluating at every confidence cutoff. Confidences must be distinct.
pub fn exhaustive_map(dets: &[RefDet], gts: &[RefGt], thr: f64) -> f64 {
    let mut classes: Vec<u32> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let n_gt = gts.iter().filter(|g| g.class == c).count() as f64;
        let mut confs: Vec<f64> = dets.iter().filter(|d| d.class == c).map(|d| d.conf).collect();
        confs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // (precision, recall) after admitting the k highest-scoring boxes.
        let points: Vec<(f64, f64)> = confs
            .iter()
            .enumerate()
            .map(|(k, &cut)| {
                let tp = true_positives_at(dets, gts, c, cut, thr) as f64;
                (tp / (k + 1) as f64, tp / n_gt)
            })
            .collect();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for k in 0..points.len() {
            let r = points[k].1;
            if r > prev_recall {
                let best = points[k..].iter().map(|p| p.0).fold(0.0, f64::max);
                ap += (r - prev_recall) * best;
                prev_recall = r;
            }
        }
        total += ap;
    }
    total / classes.len() as f64
}

/// Greedy NMS by repeated linear scans for the best remaining box. Order is
/// confidence, then smaller area, then earlier index. Returns kept indices in
/// selection order.
pub fn reference_nms(dets: &[RefDet], thr: f64) -> Vec<usize> {
    let area = |r: Rect| (r[2] - r[0]) * (r[3] - r[1]);
    let mut alive: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive[1..] {
            let (a, b) = (&dets[i], &dets[best]);
            let better = a.conf > b.conf || (a.conf == b.conf && area(a.rect) < area(b.rect));
            if better {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && rect_iou(dets[i].rect, dets[best].rect) <= thr);
    }
    kept
}

pub const SEP_FILTERS: usize = 32;

/// Separator logit from a flat parameter vector, using an explicitly
/// zero-padded copy of each input map.
pub fn separator_logit_ref(flat: &[f64], img: &[f64], side: usize) -> f64 {
    separator_trace_ref(flat, img, side).0
}

/// Logit plus the smallest pre-activation magnitude seen in either layer.
pub fn separator_trace_ref(flat: &[f64], img: &[f64], side: usize) -> (f64, f64) {
    let f = SEP_FILTERS;
    let w1 = &flat[0..9 * 3 * f];
    let b1 = &flat[9 * 3 * f..9 * 3 * f + f];
    let off2 = 9 * 3 * f + f;
    let w2 = &flat[off2..off2 + 9 * f * f];
    let b2 = &flat[off2 + 9 * f * f..off2 + 9 * f * f + f];
    let off3 = off2 + 9 * f * f + f;
    let fc = &flat[off3..off3 + f];
    let fc_b = flat[off3 + f];

    let mut margin = f64::INFINITY;
    let a1 = conv_ref(img, side, 3, w1, b1, f, &mut margin);
    let s1 = side.div_ceil(2);
    let a2 = conv_ref(&a1, s1, f, w2, b2, f, &mut margin);
    let s2 = s1.div_ceil(2);
    let mut logit = fc_b;
    for co in 0..f {
        let mut sum = 0.0;
        for p in 0..s2 * s2 {
            sum += a2[p * f + co];
        }
        logit += fc[co] * sum / (s2 * s2) as f64;
    }
    (logit, margin)
}

fn conv_ref(input: &[f64], side: usize, cin: usize, w: &[f64], b: &[f64], cout: usize, margin: &mut f64) -> Vec<f64> {
    let padded_side = side + 2;
    let mut padded = vec![0.0; padded_side * padded_side * cin];
    for y in 0..side {
        for x in 0..side {
            for c in 0..cin {
                padded[((y + 1) * padded_side + x + 1) * cin + c] = input[(y * side + x) * cin + c];
            }
        }
    }
    let out_side = side.div_ceil(2);
    let mut out = vec![0.0; out_side * out_side * cout];
    for co in 0..cout {
        for oy in 0..out_side {
            for ox in 0..out_side {
                let mut acc = b[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        for ci in 0..cin {
                            let v = padded[((2 * oy + ky) * padded_side + 2 * ox + kx) * cin + ci];
                            acc += v * w[((ky * 3 + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                *margin = margin.min(acc.abs());
                out[(oy * out_side + ox) * cout + co] = if acc > 0.0 { acc } else { 0.1 * acc };
            }
        }
    }
    out
}

pub fn bce_ref(logit: f64, label: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}
