//! Detector-side tensor plumbing: the Focus space-to-depth transform, anchor
//! clustering, and decoding of raw head outputs into [`Detection`]s.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCenter;
use crate::text;

/// Dense `height x width x channels` tensor, row-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "tensor {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    data.push(f(r, c, k));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        if self.height == 0 || self.width == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("cannot resize an empty tensor"));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample = |pos: f64, len: usize| {
            let p = (pos.max(0.0)).min((len - 1) as f64);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, p - lo as f64)
        };
        Ok(Self::from_fn(height, width, self.channels, |r, c, k| {
            let (r0, r1, fy) = sample((r as f64 + 0.5) * sy - 0.5, self.height);
            let (c0, c1, fx) = sample((c as f64 + 0.5) * sx - 0.5, self.width);
            let top = self.get(r0, c0, k) * (1.0 - fx) + self.get(r0, c1, k) * fx;
            let bottom = self.get(r1, c0, k) * (1.0 - fx) + self.get(r1, c1, k) * fx;
            top * (1.0 - fy) + bottom * fy
        }))
    }

    /// Text form: header `#tensor v1 H W C`, then one row of `W*C` values per
    /// image row.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#tensor v1 {} {} {}\n",
            self.height, self.width, self.channels
        );
        for row in self.data.chunks(self.width * self.channels.max(1)) {
            let line: Vec<String> = row.iter().map(|v| text::fmt_f64(*v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(src: &str) -> Result<Self> {
        let mut lines = src.lines();
        let header = lines.next().unwrap_or_default();
        let parts: Vec<&str> = header.split(' ').collect();
        if parts.len() != 5 || parts[0] != "#tensor" || parts[1] != "v1" {
            return Err(Error::parse(1, "expected header `#tensor v1 H W C`"));
        }
        let h: usize = text::field(1, parts[2], "height")?;
        let w: usize = text::field(1, parts[3], "width")?;
        let c: usize = text::field(1, parts[4], "channels")?;
        let mut data = Vec::with_capacity(h * w * c);
        for (line, fields) in text::records(src) {
            if line == 1 {
                continue;
            }
            text::expect_fields(line, &fields, w * c, "tensor row")?;
            for f in fields {
                data.push(text::finite(line, f, "value")?);
            }
        }
        Self::new(h, w, c, data).map_err(|e| Error::parse(0, e.to_string()))
    }
}

/// Row/column parity of the four sub-images, in output channel-block order.
const FOCUS_PHASES: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// Space-to-depth by 2: `(H, W, C) -> (H/2, W/2, 4C)`. Output channel block
/// `k` holds the stride-2 sub-image at phase `FOCUS_PHASES[k]`.
pub fn focus_transform(img: &ImageTensor) -> Result<ImageTensor> {
    if img.height % 2 != 0 || img.width % 2 != 0 {
        return Err(Error::invalid(format!(
            "focus needs even height and width, got {}x{}",
            img.height, img.width
        )));
    }
    let (h, w, c) = (img.height / 2, img.width / 2, img.channels);
    let mut data = Vec::with_capacity(img.data.len());
    for r in 0..h {
        for col in 0..w {
            for (dr, dc) in FOCUS_PHASES {
                let start = img.index(2 * r + dr, 2 * col + dc, 0);
                data.extend_from_slice(&img.data[start..start + c]);
            }
        }
    }
    ImageTensor::new(h, w, 4 * c, data)
}

pub fn focus_inverse(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels % 4 != 0 {
        return Err(Error::invalid(format!(
            "focus inverse needs a channel count divisible by 4, got {}",
            img.channels
        )));
    }
    let c = img.channels / 4;
    let mut out = ImageTensor::zeros(img.height * 2, img.width * 2, c);
    for r in 0..img.height {
        for col in 0..img.width {
            for (k, (dr, dc)) in FOCUS_PHASES.into_iter().enumerate() {
                let src = img.index(r, col, k * c);
                let dst = out.index(2 * r + dr, 2 * col + dc, 0);
                out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    w: f64,
    h: f64,
}

impl Anchor {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(Error::invalid(format!("anchor needs positive size, got {w}x{h}")));
        }
        Ok(Self { w, h })
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
}

/// IoU of two boxes sharing a center, which depends only on their sizes.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

/// Nine anchors, three per detection scale, finest grid first.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: [Anchor; 9],
}

impl AnchorSet {
    pub const SCALES: usize = 3;
    pub const PER_SCALE: usize = 3;

    /// Sorts by ascending area, so the smallest anchors land on the finest grid.
    pub fn new(mut anchors: [Anchor; 9]) -> Self {
        anchors.sort_by(|a, b| a.area().total_cmp(&b.area()));
        Self { anchors }
    }

    pub fn anchors(&self) -> &[Anchor; 9] {
        &self.anchors
    }

    /// The three anchors for scale `scale` (0 = finest grid).
    pub fn scale(&self, scale: usize) -> [Anchor; 3] {
        let s = &self.anchors[scale * 3..scale * 3 + 3];
        [s[0], s[1], s[2]]
    }

    pub fn to_text(&self) -> String {
        self.anchors.iter().fold(String::new(), |mut out, a| {
            let _ = writeln!(out, "{} {}", text::fmt_f64(a.w), text::fmt_f64(a.h));
            out
        })
    }

    pub fn from_text(src: &str) -> Result<Self> {
        let mut anchors = Vec::with_capacity(9);
        for (line, fields) in text::records(src) {
            text::expect_fields(line, &fields, 2, "anchor")?;
            let w = text::finite(line, fields[0], "width")?;
            let h = text::finite(line, fields[1], "height")?;
            anchors.push(Anchor::new(w, h).map_err(|e| Error::parse(line, e.to_string()))?);
        }
        let anchors: [Anchor; 9] = anchors
            .try_into()
            .map_err(|v: Vec<Anchor>| Error::parse(0, format!("expected 9 anchors, found {}", v.len())))?;
        Ok(Self::new(anchors))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    /// Sorted by ascending area.
    pub anchors: Vec<Anchor>,
    /// Sum of `1 - IoU` between each box and its centroid.
    pub objective: f64,
    /// Objective after every assignment step, starting with the initial one.
    pub history: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERATIONS: usize = 300;

fn nearest(b: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centroids.iter().enumerate() {
        let d = 1.0 - shape_iou(b, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's clustering of box sizes under the `1 - IoU` distance.
///
/// Seeding picks one box uniformly at random, then repeatedly the box
/// farthest from all chosen centroids (lowest index on ties). A cluster's new
/// centroid is its mean width and height, kept only if it does not raise that
/// cluster's cost, which makes the objective non-increasing. An emptied
/// cluster takes over the box farthest from its centroid.
pub fn kmeans(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<KmeansResult> {
    if boxes.is_empty() {
        return Err(Error::invalid("k-means needs at least one box"));
    }
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if let Some(b) = boxes.iter().find(|b| !(b.0 > 0.0 && b.1 > 0.0 && b.0.is_finite() && b.1.is_finite())) {
        return Err(Error::invalid(format!("box size must be positive, got {}x{}", b.0, b.1)));
    }
    let mut distinct = boxes.to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} distinct boxes",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![boxes[rng.gen_range(0..boxes.len())]];
    let mut min_dist: Vec<f64> = boxes.iter().map(|&b| 1.0 - shape_iou(b, centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for i in 1..boxes.len() {
            if min_dist[i] > min_dist[far] {
                far = i;
            }
        }
        let c = boxes[far];
        centroids.push(c);
        for (d, &b) in min_dist.iter_mut().zip(boxes) {
            *d = d.min(1.0 - shape_iou(b, c));
        }
    }

    let mut assign = vec![0usize; boxes.len()];
    let mut dist = vec![0.0; boxes.len()];
    let assign_all = |centroids: &[(f64, f64)], assign: &mut [usize], dist: &mut [f64]| {
        for (i, &b) in boxes.iter().enumerate() {
            let (j, d) = nearest(b, centroids);
            assign[i] = j;
            dist[i] = d;
        }
    };
    assign_all(&centroids, &mut assign, &mut dist);
    repair_empty(boxes, &mut centroids, &mut assign, &mut dist);
    let mut history = vec![dist.iter().sum::<f64>()];

    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = boxes
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .map(|(&b, _)| b)
                .collect();
            let n = members.len() as f64;
            let mean = (
                members.iter().map(|b| b.0).sum::<f64>() / n,
                members.iter().map(|b| b.1).sum::<f64>() / n,
            );
            let cost = |c: (f64, f64)| members.iter().map(|&b| 1.0 - shape_iou(b, c)).sum::<f64>();
            if cost(mean) <= cost(*centroid) {
                *centroid = mean;
            }
        }
        let previous = assign.clone();
        assign_all(&centroids, &mut assign, &mut dist);
        repair_empty(boxes, &mut centroids, &mut assign, &mut dist);
        history.push(dist.iter().sum());
        if assign == previous {
            break;
        }
    }

    let objective = *history.last().expect("history starts non-empty");
    let mut anchors: Vec<Anchor> = centroids
        .into_iter()
        .map(|(w, h)| Anchor::new(w, h))
        .collect::<Result<_>>()?;
    anchors.sort_by(|a, b| a.area().total_cmp(&b.area()));
    Ok(KmeansResult {
        anchors,
        objective,
        history,
        iterations,
    })
}

fn repair_empty(
    boxes: &[(f64, f64)],
    centroids: &mut [(f64, f64)],
    assign: &mut [usize],
    dist: &mut [f64],
) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut far: Option<usize> = None;
        for i in 0..boxes.len() {
            if counts[assign[i]] > 1 && far.is_none_or(|f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        let Some(far) = far else { return };
        centroids[empty] = boxes[far];
        assign[far] = empty;
        dist[far] = 0.0;
    }
}

/// Nine k-means anchors grouped three per scale.
pub fn kmeans_anchors(boxes: &[(f64, f64)], seed: u64) -> Result<AnchorSet> {
    let result = kmeans(boxes, 9, seed)?;
    let anchors: [Anchor; 9] = result.anchors.try_into().expect("k = 9");
    Ok(AnchorSet::new(anchors))
}

/// One scored box. `class_id` is always 0 for head output (vehicle).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxCenter,
    pub class_id: u32,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoxCenter, class_id: u32, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            class_id,
            confidence,
        })
    }
}

/// Values per (cell, anchor): `tx, ty, tw, th, objectness`.
pub const VALUES_PER_ANCHOR: usize = 5;
/// Largest accepted `|tw|`, `|th|`.
pub const MAX_SIZE_LOGIT: f64 = 20.0;

/// Raw logits of one detection scale, laid out as
/// `[grid_y][grid_x][anchor][tx, ty, tw, th, to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGridPrediction {
    grid_size: usize,
    stride: f64,
    anchors: [Anchor; 3],
    values: Vec<f64>,
}

impl RawGridPrediction {
    pub fn new(grid_size: usize, stride: f64, anchors: [Anchor; 3], values: Vec<f64>) -> Result<Self> {
        let expected = grid_size * grid_size * 3 * VALUES_PER_ANCHOR;
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "grid {grid_size}x{grid_size} needs {expected} values, got {}",
                values.len()
            )));
        }
        if !(stride.is_finite() && stride > 0.0) {
            return Err(Error::invalid(format!("stride must be positive, got {stride}")));
        }
        Ok(Self {
            grid_size,
            stride,
            anchors,
            values,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }
    pub fn stride(&self) -> f64 {
        self.stride
    }
    pub fn anchors(&self) -> &[Anchor; 3] {
        &self.anchors
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn offset(&self, gy: usize, gx: usize, anchor: usize) -> usize {
        ((gy * self.grid_size + gx) * 3 + anchor) * VALUES_PER_ANCHOR
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decodes every (cell, anchor) slot and keeps those with confidence at or
/// above `conf_threshold`. Output order is grid-row, grid-column, anchor.
pub fn decode_grid(raw: &RawGridPrediction, conf_threshold: f64) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for gy in 0..raw.grid_size {
        for gx in 0..raw.grid_size {
            for (a, anchor) in raw.anchors.iter().enumerate() {
                let o = raw.offset(gy, gx, a);
                let [tx, ty, tw, th, to] = raw.values[o..o + VALUES_PER_ANCHOR] else {
                    unreachable!()
                };
                if !(tw.abs() <= MAX_SIZE_LOGIT && th.abs() <= MAX_SIZE_LOGIT) {
                    return Err(Error::invalid(format!(
                        "size logits ({tw}, {th}) at cell ({gx}, {gy}) anchor {a} overflow"
                    )));
                }
                let confidence = sigmoid(to);
                if confidence < conf_threshold {
                    continue;
                }
                let bbox = BoxCenter::new(
                    (sigmoid(tx) + gx as f64) * raw.stride,
                    (sigmoid(ty) + gy as f64) * raw.stride,
                    anchor.w * tw.exp(),
                    anchor.h * th.exp(),
                )?;
                out.push(Detection {
                    bbox,
                    class_id: 0,
                    confidence,
                });
            }
        }
    }
    Ok(out)
}

/// Raw head output for one image and one scale, as stored in text files.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGridRecord {
    pub image_id: String,
    pub grid: RawGridPrediction,
}

/// Parses raw head dumps. Each block starts with
/// `grid IMAGE_ID GRID_SIZE STRIDE AW1 AH1 AW2 AH2 AW3 AH3` and is followed
/// by `GRID_SIZE^2 * 3` lines of `tx ty tw th to` in row, column, anchor
/// order. An image may have several blocks, one per scale.
pub fn parse_raw_grids(src: &str) -> Result<Vec<RawGridRecord>> {
    struct Open {
        line: usize,
        image_id: String,
        grid_size: usize,
        stride: f64,
        anchors: [Anchor; 3],
        values: Vec<f64>,
    }
    fn close(open: Open) -> Result<RawGridRecord> {
        let need = open.grid_size * open.grid_size * 3 * VALUES_PER_ANCHOR;
        if open.values.len() != need {
            return Err(Error::parse(
                open.line,
                format!(
                    "grid block for `{}` has {} values, expected {need}",
                    open.image_id,
                    open.values.len()
                ),
            ));
        }
        let grid = RawGridPrediction::new(open.grid_size, open.stride, open.anchors, open.values)
            .map_err(|e| Error::parse(open.line, e.to_string()))?;
        Ok(RawGridRecord {
            image_id: open.image_id,
            grid,
        })
    }

    let mut out = Vec::new();
    let mut open: Option<Open> = None;
    for (line, f) in text::records(src) {
        if f[0] == "grid" {
            text::expect_fields(line, &f, 10, "grid header")?;
            text::check_image_id(line, f[1])?;
            let grid_size: usize = text::field(line, f[2], "grid size")?;
            let stride = text::finite(line, f[3], "stride")?;
            let mut anchors = Vec::with_capacity(3);
            for k in 0..3 {
                let w = text::finite(line, f[4 + 2 * k], "anchor width")?;
                let h = text::finite(line, f[5 + 2 * k], "anchor height")?;
                anchors.push(Anchor::new(w, h).map_err(|e| Error::parse(line, e.to_string()))?);
            }
            if let Some(prev) = open.take() {
                out.push(close(prev)?);
            }
            open = Some(Open {
                line,
                image_id: f[1].to_string(),
                grid_size,
                stride,
                anchors: [anchors[0], anchors[1], anchors[2]],
                values: Vec::new(),
            });
        } else {
            let block = open
                .as_mut()
                .ok_or_else(|| Error::parse(line, "values before the first `grid` header"))?;
            text::expect_fields(line, &f, VALUES_PER_ANCHOR, "anchor slot")?;
            for v in f {
                block.values.push(text::finite(line, v, "value")?);
            }
        }
    }
    if let Some(prev) = open {
        out.push(close(prev)?);
    }
    Ok(out)
}

/// Lossless inverse of [`parse_raw_grids`] for one block.
pub fn format_raw_grid(image_id: &str, raw: &RawGridPrediction) -> String {
    let mut out = format!("grid {image_id} {} {:?}", raw.grid_size, raw.stride);
    for a in &raw.anchors {
        let _ = write!(out, " {:?} {:?}", a.w, a.h);
    }
    out.push('\n');
    for slot in raw.values.chunks_exact(VALUES_PER_ANCHOR) {
        let line: Vec<String> = slot.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
