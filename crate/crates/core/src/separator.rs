//! Day-night separator: a two-convolution network that decides whether an
//! image goes to the day-tuned or the night-tuned detector.
//!
//! Layout: `conv 3x3/2 (3 -> 32) -> LeakyReLU -> conv 3x3/2 (32 -> 32) ->
//! LeakyReLU -> global average pool -> linear (32 -> 1) -> sigmoid`, both
//! convolutions zero-padded by one pixel. The output is the probability the
//! image is a day image.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head_decode::{sigmoid, ImageTensor};
use crate::text;

pub const IN_CHANNELS: usize = 3;
pub const FILTERS: usize = 32;
pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.1;
pub const DEFAULT_INPUT_SIDE: usize = 64;
pub const DEFAULT_DAY_THRESHOLD: f64 = 0.5;

const CONV1_WEIGHTS: usize = KERNEL * KERNEL * IN_CHANNELS * FILTERS;
const CONV2_WEIGHTS: usize = KERNEL * KERNEL * FILTERS * FILTERS;

/// Trainable parameter count: both convolutions with biases plus the output
/// unit.
pub const PARAM_COUNT: usize = CONV1_WEIGHTS + FILTERS + CONV2_WEIGHTS + FILTERS + FILTERS + 1;

const CHECKPOINT_MAGIC: &str = "#separator v1";

/// Network weights. Convolution kernels are stored `[ky][kx][in][out]`.
///
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparatorParams {
    /// Square side images are resized to before the forward pass.
    pub input_side: usize,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: f64,
}

impl SeparatorParams {
    pub fn zeros(input_side: usize) -> Self {
        Self {
            input_side,
            conv1_w: vec![0.0; CONV1_WEIGHTS],
            conv1_b: vec![0.0; FILTERS],
            conv2_w: vec![0.0; CONV2_WEIGHTS],
            conv2_b: vec![0.0; FILTERS],
            fc_w: vec![0.0; FILTERS],
            fc_b: 0.0,
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(input_side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(input_side, &mut rng)
    }

    fn init_with(input_side: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input_side);
        let mut fill = |v: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            v.iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        };
        fill(&mut p.conv1_w, KERNEL * KERNEL * IN_CHANNELS);
        fill(&mut p.conv2_w, KERNEL * KERNEL * FILTERS);
        fill(&mut p.fc_w, FILTERS);
        p
    }

    /// All parameters in checkpoint order: conv1 weights, conv1 biases,
    /// conv2 weights, conv2 biases, output weights, output bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PARAM_COUNT);
        v.extend_from_slice(&self.conv1_w);
        v.extend_from_slice(&self.conv1_b);
        v.extend_from_slice(&self.conv2_w);
        v.extend_from_slice(&self.conv2_b);
        v.extend_from_slice(&self.fc_w);
        v.push(self.fc_b);
        v
    }

    pub fn from_flat(input_side: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != PARAM_COUNT {
            return Err(Error::invalid(format!(
                "separator needs {PARAM_COUNT} parameters, got {}",
                flat.len()
            )));
        }
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let p = Self {
            input_side,
            conv1_w: take(CONV1_WEIGHTS),
            conv1_b: take(FILTERS),
            conv2_w: take(CONV2_WEIGHTS),
            conv2_b: take(FILTERS),
            fc_w: take(FILTERS),
            fc_b: take(1)[0],
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if self.input_side < 2 || self.input_side % 2 != 0 {
            return Err(Error::invalid(format!(
                "input side must be even and at least 2, got {}",
                self.input_side
            )));
        }
        let shapes = [
            (self.conv1_w.len(), CONV1_WEIGHTS),
            (self.conv1_b.len(), FILTERS),
            (self.conv2_w.len(), CONV2_WEIGHTS),
            (self.conv2_b.len(), FILTERS),
            (self.fc_w.len(), FILTERS),
        ];
        if shapes.iter().any(|(got, want)| got != want) {
            return Err(Error::invalid("separator parameter arrays have the wrong length"));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("separator parameters must be finite"));
        }
        Ok(())
    }

    fn axpy(&mut self, scale: f64, other: &SeparatorParams) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 5] = [
            (&mut self.conv1_w, &other.conv1_w),
            (&mut self.conv1_b, &other.conv1_b),
            (&mut self.conv2_w, &other.conv2_w),
            (&mut self.conv2_b, &other.conv2_b),
            (&mut self.fc_w, &other.fc_w),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        self.fc_b += scale * other.fc_b;
    }

    /// Checkpoint text: `#separator v1 input_side N`, then one value per line
    /// in [`to_flat`](Self::to_flat) order, printed losslessly.
    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} input_side {}\n", self.input_side);
        for v in self.to_flat() {
            let _ = writeln!(out, "{v:?}");
        }
        out
    }

    pub fn from_text(src: &str) -> Result<Self> {
        let header = src.lines().next().unwrap_or_default();
        let side = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|rest| rest.strip_prefix(" input_side "))
            .ok_or_else(|| Error::parse(1, format!("expected `{CHECKPOINT_MAGIC} input_side N` header")))?;
        let side: usize = text::field(1, side.trim_end_matches('\r'), "input side")?;
        let mut flat = Vec::with_capacity(PARAM_COUNT);
        for (line, f) in text::records(src) {
            text::expect_fields(line, &f, 1, "parameter")?;
            flat.push(text::finite(line, f[0], "parameter")?);
        }
        Self::from_flat(side, &flat).map_err(|e| Error::parse(0, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn conv_out(side: usize) -> usize {
    (side + 2 * PADDING - KERNEL) / STRIDE + 1
}

type Lane = [f64; FILTERS];

fn lane(v: &[f64]) -> &Lane {
    v.try_into().expect("lane of FILTERS values")
}

fn lane_mut(v: &mut [f64]) -> &mut Lane {
    v.try_into().expect("lane of FILTERS values")
}

/// Input positions `(iy, ix)` read by kernel tap `(ky, kx)` at output
/// `(oy, ox)`, skipping the zero padding.
fn taps(oy: usize, ox: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..KERNEL).flat_map(move |ky| {
        (0..KERNEL).filter_map(move |kx| {
            let iy = (oy * STRIDE + ky).checked_sub(PADDING).filter(|&y| y < h)?;
            let ix = (ox * STRIDE + kx).checked_sub(PADDING).filter(|&x| x < w)?;
            Some((ky * KERNEL + kx, iy, ix))
        })
    })
}

/// Strided, zero-padded 3x3 convolution of an `h x w x cin` map into
/// `FILTERS` output channels.
fn conv_forward(input: &[f64], h: usize, w: usize, cin: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut out = Vec::with_capacity(oh * ow * FILTERS);
    for _ in 0..oh * ow {
        out.extend_from_slice(bias);
    }
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = lane_mut(&mut out[(oy * ow + ox) * FILTERS..][..FILTERS]);
            for (tap, iy, ix) in taps(oy, ox, h, w) {
                let pixel = &input[(iy * w + ix) * cin..][..cin];
                let kernel = &weights[tap * cin * FILTERS..][..cin * FILTERS];
                for (&x, row) in pixel.iter().zip(kernel.chunks_exact(FILTERS)) {
                    let row = lane(row);
                    for co in 0..FILTERS {
                        acc[co] += x * row[co];
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients, and the input gradient when
/// `d_in` is given.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weights: &[f64],
    d_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut d_in: Option<&mut [f64]>,
) {
    let (oh, ow) = (conv_out(h), conv_out(w));
    // Kernel transposed to [tap][out][in] so the input gradient is a sum of
    // contiguous rows.
    let transposed: Vec<f64> = if d_in.is_some() {
        let mut t = vec![0.0; weights.len()];
        for tap in 0..KERNEL * KERNEL {
            for ci in 0..cin {
                for co in 0..FILTERS {
                    t[(tap * FILTERS + co) * cin + ci] = weights[(tap * cin + ci) * FILTERS + co];
                }
            }
        }
        t
    } else {
        Vec::new()
    };
    let grad_b = lane_mut(grad_b);
    for oy in 0..oh {
        for ox in 0..ow {
            let g = lane(&d_out[(oy * ow + ox) * FILTERS..][..FILTERS]);
            for co in 0..FILTERS {
                grad_b[co] += g[co];
            }
            for (tap, iy, ix) in taps(oy, ox, h, w) {
                let base = (iy * w + ix) * cin;
                let pixel = &input[base..][..cin];
                let dk = &mut grad_w[tap * cin * FILTERS..][..cin * FILTERS];
                for (&x, row) in pixel.iter().zip(dk.chunks_exact_mut(FILTERS)) {
                    let row = lane_mut(row);
                    for co in 0..FILTERS {
                        row[co] += x * g[co];
                    }
                }
                if let Some(d_in) = d_in.as_deref_mut() {
                    let target = &mut d_in[base..][..cin];
                    let kt = &transposed[tap * FILTERS * cin..][..FILTERS * cin];
                    for (&gv, row) in g.iter().zip(kt.chunks_exact(cin)) {
                        for (t, &k) in target.iter_mut().zip(row) {
                            *t += gv * k;
                        }
                    }
                }
            }
        }
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Mean over the spatial positions of an `h x w x c` map.
pub fn global_average_pool(map: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for px in map.chunks_exact(c).take(h * w) {
        out.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

struct Trace {
    side1: usize,
    side2: usize,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    pooled: Vec<f64>,
    logit: f64,
}

fn check_input(params: &SeparatorParams, img: &ImageTensor) -> Result<()> {
    let s = params.input_side;
    if (img.height(), img.width(), img.channels()) != (s, s, IN_CHANNELS) {
        return Err(Error::invalid(format!(
            "separator expects a {s}x{s}x{IN_CHANNELS} image, got {}x{}x{}",
            img.height(),
            img.width(),
            img.channels()
        )));
    }
    Ok(())
}

fn trace(params: &SeparatorParams, img: &ImageTensor) -> Trace {
    let side0 = params.input_side;
    let side1 = conv_out(side0);
    let side2 = conv_out(side1);
    let pre1 = conv_forward(img.data(), side0, side0, IN_CHANNELS, &params.conv1_w, &params.conv1_b);
    let act1: Vec<f64> = pre1.iter().map(|&x| leaky(x)).collect();
    let pre2 = conv_forward(&act1, side1, side1, FILTERS, &params.conv2_w, &params.conv2_b);
    let act2: Vec<f64> = pre2.iter().map(|&x| leaky(x)).collect();
    let pooled = global_average_pool(&act2, side2, side2, FILTERS);
    let logit = params.fc_b + pooled.iter().zip(&params.fc_w).map(|(a, b)| a * b).sum::<f64>();
    Trace {
        side1,
        side2,
        pre1,
        act1,
        pre2,
        pooled,
        logit,
    }
}

/// Raw output before the sigmoid.
pub fn separator_logit(params: &SeparatorParams, img: &ImageTensor) -> Result<f64> {
    check_input(params, img)?;
    Ok(trace(params, img).logit)
}

/// Probability that `img` is a day image. `img` must already be
/// `input_side x input_side x 3`.
pub fn separator_forward(params: &SeparatorParams, img: &ImageTensor) -> Result<f64> {
    Ok(sigmoid(separator_logit(params, img)?))
}

/// Binary cross-entropy of a logit against a 0/1 label.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - label * logit + (-logit.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    Day,
    Night,
}

impl Route {
    /// Day is the positive class.
    pub fn label(&self) -> f64 {
        match self {
            Route::Day => 1.0,
            Route::Night => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub loss: f64,
    pub probability: f64,
    pub grad: SeparatorParams,
}

/// Loss and exact gradient of the cross-entropy for one labelled image.
pub fn separator_gradient(params: &SeparatorParams, img: &ImageTensor, label: Route) -> Result<GradientOutput> {
    check_input(params, img)?;
    let t = trace(params, img);
    let y = label.label();
    let probability = sigmoid(t.logit);
    let d_logit = probability - y;

    let mut grad = SeparatorParams::zeros(params.input_side);
    grad.fc_b = d_logit;
    for c in 0..FILTERS {
        grad.fc_w[c] = d_logit * t.pooled[c];
    }

    let n2 = (t.side2 * t.side2) as f64;
    let d_pre2: Vec<f64> = t
        .pre2
        .iter()
        .enumerate()
        .map(|(i, &x)| d_logit * params.fc_w[i % FILTERS] / n2 * leaky_grad(x))
        .collect();
    let mut d_act1 = vec![0.0; t.act1.len()];
    conv_backward(
        &t.act1,
        t.side1,
        t.side1,
        FILTERS,
        &params.conv2_w,
        &d_pre2,
        &mut grad.conv2_w,
        &mut grad.conv2_b,
        Some(&mut d_act1),
    );
    let d_pre1: Vec<f64> = d_act1.iter().zip(&t.pre1).map(|(g, &x)| g * leaky_grad(x)).collect();
    let side0 = params.input_side;
    conv_backward(
        img.data(),
        side0,
        side0,
        IN_CHANNELS,
        &params.conv1_w,
        &d_pre1,
        &mut grad.conv1_w,
        &mut grad.conv1_b,
        None,
    );

    Ok(GradientOutput {
        loss: bce_with_logit(t.logit, y),
        probability,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub input_side: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.05,
            seed: 0,
            batch_size: 16,
            input_side: DEFAULT_INPUT_SIDE,
        }
    }
}

/// Running statistics over one pass through the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SeparatorParams,
    pub history: Vec<EpochStats>,
}

/// Mini-batch gradient descent from a seeded initialisation.
///
/// Accuracy and loss per epoch are measured on each sample as it is visited,
/// before that batch's update. Images of the wrong size are resized first.
pub fn separator_train(data: &[(ImageTensor, Route)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(Error::invalid("learning rate must be finite and non-negative"));
    }
    let days = data.iter().filter(|(_, r)| *r == Route::Day).count();
    let nights = data.len() - days;
    if days < 2 || nights < 2 {
        return Err(Error::invalid(format!(
            "training needs at least two images per class, got {days} day and {nights} night"
        )));
    }

    let side = cfg.input_side;
    let images: Vec<Cow<'_, ImageTensor>> = data
        .iter()
        .map(|(img, _)| prepare(img, side))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = SeparatorParams::init_with(side, &mut rng);
    params.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut correct, mut loss_sum) = (0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = SeparatorParams::zeros(side);
            for &i in batch {
                let label = data[i].1;
                let out = separator_gradient(&params, &images[i], label)?;
                loss_sum += out.loss;
                if route_from_probability(out.probability, DEFAULT_DAY_THRESHOLD) == label {
                    correct += 1;
                }
                acc.axpy(1.0, &out.grad);
            }
            params.axpy(-cfg.learning_rate / batch.len() as f64, &acc);
        }
        history.push(EpochStats {
            accuracy: correct as f64 / data.len() as f64,
            loss: loss_sum / data.len() as f64,
        });
    }
    Ok(TrainOutcome { params, history })
}

fn prepare(img: &ImageTensor, side: usize) -> Result<Cow<'_, ImageTensor>> {
    if img.channels() != IN_CHANNELS {
        return Err(Error::invalid(format!(
            "separator needs {IN_CHANNELS}-channel images, got {}",
            img.channels()
        )));
    }
    if img.height() == side && img.width() == side {
        Ok(Cow::Borrowed(img))
    } else {
        Ok(Cow::Owned(img.resize_bilinear(side, side)?))
    }
}

fn route_from_probability(p: f64, day_threshold: f64) -> Route {
    if p >= day_threshold {
        Route::Day
    } else {
        Route::Night
    }
}

/// Day iff the day probability reaches `day_threshold`. The image is resized
/// to the network's input side first.
pub fn route(params: &SeparatorParams, img: &ImageTensor, day_threshold: f64) -> Result<Route> {
    let img = prepare(img, params.input_side)?;
    Ok(route_from_probability(separator_forward(params, &img)?, day_threshold))
}
