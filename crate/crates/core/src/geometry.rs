//! Axis-aligned box arithmetic and the IoU loss family.
//!
//! Boxes come in two encodings: [`BoxCorner`] `(x1, y1, x2, y2)` and
//! [`BoxCenter`] `(cx, cy, w, h)`. Both share one length unit (pixels or
//! normalized coordinates); nothing here cares which.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU at which the CIoU aspect-ratio weight switches on.
pub const CIOU_ALPHA_SWITCH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCorner {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCenter {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BoxCorner {
    /// Zero-area boxes are allowed; inverted or non-finite ones are not.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite corner ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::InvalidBox(format!(
                "negative extent ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_center(&self) -> BoxCenter {
        let (cx, cy) = self.center();
        BoxCenter {
            cx,
            cy,
            w: self.width(),
            h: self.height(),
        }
    }

    fn intersection_area(&self, other: &BoxCorner) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    fn enclosing(&self, other: &BoxCorner) -> BoxCorner {
        BoxCorner {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

impl BoxCenter {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite box ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!(
                "negative size ({cx}, {cy}, {w}, {h})"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_corner(&self) -> BoxCorner {
        BoxCorner {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// Scales x-quantities by `sx` and y-quantities by `sy`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Result<Self> {
        Self::new(self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)
    }
}

impl From<BoxCenter> for BoxCorner {
    fn from(b: BoxCenter) -> Self {
        b.to_corner()
    }
}

impl From<BoxCorner> for BoxCenter {
    fn from(b: BoxCorner) -> Self {
        b.to_center()
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoxCorner, b: &BoxCorner) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BoxCorner, b: &BoxCorner) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclose = a.enclosing(b).area();
    if enclose <= 0.0 {
        // Both boxes collapse onto one line or point.
        return if union <= 0.0 && a == b { 1.0 } else { 0.0 };
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclose - union) / enclose
}

fn center_distance_sq(a: &BoxCorner, b: &BoxCorner) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).powi(2) + (ay - by).powi(2)
}

fn enclosing_diagonal_sq(a: &BoxCorner, b: &BoxCorner) -> f64 {
    let e = a.enclosing(b);
    e.width().powi(2) + e.height().powi(2)
}

/// Normalized center-distance penalty `rho^2 / c^2`; 0 for coincident points.
fn distance_term(a: &BoxCorner, b: &BoxCorner) -> f64 {
    let c2 = enclosing_diagonal_sq(a, b);
    if c2 <= 0.0 {
        0.0
    } else {
        center_distance_sq(a, b) / c2
    }
}

pub fn diou(a: &BoxCorner, b: &BoxCorner) -> f64 {
    iou(a, b) - distance_term(a, b)
}

/// The three additive parts of the CIoU loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiouTerms {
    /// `1 - IoU`.
    pub s_overlap: f64,
    /// Squared center distance over squared enclosing diagonal.
    pub d_center: f64,
    /// `alpha * v`, zero while IoU is below the switch.
    pub v_aspect: f64,
}

impl CiouTerms {
    pub fn total(&self) -> f64 {
        self.s_overlap + self.d_center + self.v_aspect
    }
}

fn aspect_gap(pred_w: f64, pred_h: f64, gt_w: f64, gt_h: f64) -> f64 {
    (gt_w / gt_h).atan() - (pred_w / pred_h).atan()
}

fn aspect_consistency(gap: f64) -> f64 {
    4.0 / (PI * PI) * gap * gap
}

/// The aspect-ratio trade-off weight. Zero below the IoU switch so the loss
/// reduces to DIoU there.
pub fn ciou_alpha(iou: f64, v: f64) -> f64 {
    if iou < CIOU_ALPHA_SWITCH {
        return 0.0;
    }
    let denom = (1.0 - iou) + v;
    if denom <= 0.0 {
        0.0
    } else {
        v / denom
    }
}

fn check_ciou_inputs(pred: &BoxCorner, gt: &BoxCorner) -> Result<()> {
    if pred.width() <= 0.0 || pred.height() <= 0.0 {
        return Err(Error::InvalidBox(
            "CIoU prediction needs positive width and height".into(),
        ));
    }
    if gt.width() <= 0.0 || gt.height() <= 0.0 {
        return Err(Error::InvalidBox(
            "CIoU ground truth needs positive width and height".into(),
        ));
    }
    Ok(())
}

pub fn ciou_loss(pred: &BoxCorner, gt: &BoxCorner) -> Result<CiouTerms> {
    check_ciou_inputs(pred, gt)?;
    let iou = iou(pred, gt);
    let v = aspect_consistency(aspect_gap(
        pred.width(),
        pred.height(),
        gt.width(),
        gt.height(),
    ));
    Ok(CiouTerms {
        s_overlap: 1.0 - iou,
        d_center: distance_term(pred, gt),
        v_aspect: ciou_alpha(iou, v) * v,
    })
}

/// Analytic gradient of the CIoU loss total with respect to the prediction's
/// `(cx, cy, w, h)`, holding `alpha` fixed at its value for this pair.
///
/// At edge ties the one-sided derivative is taken that keeps the gradient of
/// a perfectly aligned pair at zero.
pub fn ciou_gradient(pred: &BoxCenter, gt: &BoxCenter) -> Result<[f64; 4]> {
    let p = pred.to_corner();
    let g = gt.to_corner();
    check_ciou_inputs(&p, &g)?;

    // Partial derivatives are accumulated w.r.t. (x1, y1, x2, y2) and then
    // mapped to (cx, cy, w, h).
    let iw = p.x2.min(g.x2) - p.x1.max(g.x1);
    let ih = p.y2.min(g.y2) - p.y1.max(g.y1);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let area = p.area();
    let union = area + g.area() - inter;
    let iou = inter / union;

    let mut d_inter = [0.0; 4];
    if overlapping {
        let d_iw = [
            if p.x1 >= g.x1 { -1.0 } else { 0.0 },
            if p.x2 <= g.x2 { 1.0 } else { 0.0 },
        ];
        let d_ih = [
            if p.y1 >= g.y1 { -1.0 } else { 0.0 },
            if p.y2 <= g.y2 { 1.0 } else { 0.0 },
        ];
        d_inter = [d_iw[0] * ih, d_ih[0] * iw, d_iw[1] * ih, d_ih[1] * iw];
    }
    let d_area = [-p.height(), -p.width(), p.height(), p.width()];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        grad[k] -= d_iou;
    }

    let (pcx, pcy) = p.center();
    let (gcx, gcy) = g.center();
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let e = p.enclosing(&g);
    let (cw, ch) = (e.width(), e.height());
    let c2 = cw * cw + ch * ch;
    let d_rho2 = [pcx - gcx, pcy - gcy, pcx - gcx, pcy - gcy];
    let d_cw = [
        if p.x1 <= g.x1 { -1.0 } else { 0.0 },
        if p.x2 >= g.x2 { 1.0 } else { 0.0 },
    ];
    let d_ch = [
        if p.y1 <= g.y1 { -1.0 } else { 0.0 },
        if p.y2 >= g.y2 { 1.0 } else { 0.0 },
    ];
    let d_c2 = [
        2.0 * cw * d_cw[0],
        2.0 * ch * d_ch[0],
        2.0 * cw * d_cw[1],
        2.0 * ch * d_ch[1],
    ];
    for k in 0..4 {
        grad[k] += d_rho2[k] / c2 - rho2 * d_c2[k] / (c2 * c2);
    }

    let [gx1, gy1, gx2, gy2] = grad;
    let mut out = [gx1 + gx2, gy1 + gy2, (gx2 - gx1) / 2.0, (gy2 - gy1) / 2.0];

    let gap = aspect_gap(pred.w, pred.h, gt.w, gt.h);
    let alpha = ciou_alpha(iou, aspect_consistency(gap));
    if alpha != 0.0 {
        let r2 = pred.w * pred.w + pred.h * pred.h;
        let k = 8.0 / (PI * PI) * gap;
        out[2] += alpha * -k * pred.h / r2;
        out[3] += alpha * k * pred.w / r2;
    }
    Ok(out)
}
