//! Miniature two-stage detector: three-block backbone, single-anchor RPN on
//! the stride-8 map, ROI pooling and a small classification/regression head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::params::{Binding, ParamId, ParamStore};
use crate::synth::{BBox, Scene, IMAGE_SIZE, NUM_CLASSES};
use crate::tape::{Tape, Var, Window};
use crate::tensor::{Tensor, TensorError};

type Result<T> = core::result::Result<T, TensorError>;

pub const F2_CHANNELS: usize = 32;
pub const F3_CHANNELS: usize = 64;
pub const F2_STRIDE: usize = 4;
pub const F3_STRIDE: usize = 8;
/// Cells per side of the stride-8 map.
pub const GRID: usize = IMAGE_SIZE / F3_STRIDE;
pub const ANCHOR_SIZE: f64 = 16.0;
/// Side of every pooled region feature.
pub const ROI_SIZE: usize = 4;
pub const HEAD_HIDDEN: usize = 256;
/// Class logits: background plus the object classes.
pub const NUM_LOGITS: usize = NUM_CLASSES + 1;

const FIRST_CHANNELS: usize = 16;
const RPN_CHANNELS: usize = 32;
/// Head regression targets are scaled by these factors (x, y, w, h).
pub const HEAD_DELTA_SCALE: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
/// Upper bound on decoded log-scale deltas, keeps `exp` tame.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub k_max: usize,
    pub nms_threshold: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Detections scoring below this are dropped at inference.
    pub score_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            k_max: 16,
            nms_threshold: 0.5,
            pos_iou: 0.5,
            neg_iou: 0.3,
            score_threshold: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub blocks: [ConvParams; 3],
    pub rpn_conv: ConvParams,
    pub rpn_objectness: ConvParams,
    pub rpn_deltas: ConvParams,
    pub fc: LinearParams,
    pub cls: LinearParams,
    pub bbox: LinearParams,
}

fn add_conv<R: Rng>(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize, std: Option<f64>, rng: &mut R) -> ConvParams {
    let shape = [c_out, c_in, k, k];
    let weight = match std {
        Some(s) => store.add_normal(&format!("{name}.weight"), &shape, s, rng),
        None => store.add_he(&format!("{name}.weight"), &shape, c_in * k * k, rng),
    };
    let bias = store.add_zeros(&format!("{name}.bias"), &[c_out]);
    ConvParams { weight, bias }
}

fn add_linear<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, std: Option<f64>, rng: &mut R) -> LinearParams {
    let shape = [n_in, n_out];
    let weight = match std {
        Some(s) => store.add_normal(&format!("{name}.weight"), &shape, s, rng),
        None => store.add_he(&format!("{name}.weight"), &shape, n_in, rng),
    };
    let bias = store.add_zeros(&format!("{name}.bias"), &[n_out]);
    LinearParams { weight, bias }
}

impl DetectorParams {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Self {
        let chans = [3, FIRST_CHANNELS, F2_CHANNELS, F3_CHANNELS];
        let blocks = core::array::from_fn(|i| add_conv(store, &format!("backbone.{i}"), chans[i + 1], chans[i], 3, None, rng));
        DetectorParams {
            blocks,
            rpn_conv: add_conv(store, "rpn.conv", RPN_CHANNELS, F3_CHANNELS, 3, None, rng),
            rpn_objectness: add_conv(store, "rpn.objectness", 1, RPN_CHANNELS, 1, Some(0.01), rng),
            rpn_deltas: add_conv(store, "rpn.deltas", 4, RPN_CHANNELS, 1, Some(0.01), rng),
            fc: add_linear(store, "head.fc", F3_CHANNELS * ROI_SIZE * ROI_SIZE, HEAD_HIDDEN, None, rng),
            cls: add_linear(store, "head.cls", HEAD_HIDDEN, NUM_LOGITS, Some(0.01), rng),
            bbox: add_linear(store, "head.bbox", HEAD_HIDDEN, 4, Some(0.001), rng),
        }
    }
}

/// Image-level features at strides 4 and 8.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    /// `32 x 16 x 16`
    pub f2: Var,
    /// `64 x 8 x 8`
    pub f3: Var,
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> Var {
        [self.f2, self.f3][i]
    }
}

/// Stride and channel count of the two pyramid levels, finest first.
pub const LEVELS: [(usize, usize); 2] = [(F2_STRIDE, F2_CHANNELS), (F3_STRIDE, F3_CHANNELS)];

fn conv(tape: &mut Tape, p: &Binding, c: ConvParams, x: Var, pad: usize) -> Result<Var> {
    tape.conv2d(x, p.var(c.weight), Some(p.var(c.bias)), 1, pad)
}

fn linear(tape: &mut Tape, p: &Binding, l: LinearParams, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(l.weight))?;
    tape.add(y, p.var(l.bias))
}

pub fn backbone_forward(tape: &mut Tape, p: &Binding, params: &DetectorParams, image: Var) -> Result<FeaturePyramid> {
    let s = tape.shape(image);
    if s != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(TensorError::Dimension {
            op: "backbone_forward",
            detail: format!("expected a 3x{IMAGE_SIZE}x{IMAGE_SIZE} image, got {s:?}"),
        });
    }
    let mut x = image;
    let mut taps = Vec::with_capacity(3);
    for block in params.blocks {
        let y = conv(tape, p, block, x, 1)?;
        let y = tape.relu(y)?;
        let (h, w) = (tape.shape(y)[1], tape.shape(y)[2]);
        x = tape.adaptive_avg_pool2d(y, h / 2, w / 2)?;
        taps.push(x);
    }
    Ok(FeaturePyramid { f2: taps[1], f3: taps[2] })
}

/// Raw RPN predictions for every stride-8 cell, row-major.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `64` objectness logits.
    pub logits: Var,
    /// `4 x 64` anchor deltas `(dx, dy, dw, dh)`.
    pub deltas: Var,
}

pub fn rpn_forward(tape: &mut Tape, p: &Binding, params: &DetectorParams, f3: Var) -> Result<RpnOutput> {
    let h = conv(tape, p, params.rpn_conv, f3, 1)?;
    let h = tape.relu(h)?;
    let obj = conv(tape, p, params.rpn_objectness, h, 0)?;
    let logits = tape.reshape(obj, &[GRID * GRID])?;
    let d = conv(tape, p, params.rpn_deltas, h, 0)?;
    let deltas = tape.reshape(d, &[4, GRID * GRID])?;
    Ok(RpnOutput { logits, deltas })
}

/// The 16x16 anchor centred on cell `i` (row-major) of the stride-8 grid.
pub fn anchor(i: usize) -> BBox {
    let s = F3_STRIDE as f64;
    let cx = ((i % GRID) as f64 + 0.5) * s;
    let cy = ((i / GRID) as f64 + 0.5) * s;
    let h = ANCHOR_SIZE / 2.0;
    BBox::new(cx - h, cy - h, cx + h, cy + h)
}

/// Regression target of `gt` relative to `reference`.
pub fn encode(reference: &BBox, gt: &BBox) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (gx, gy) = gt.center();
    let (rw, rh) = (reference.width(), reference.height());
    [
        (gx - rx) / rw,
        (gy - ry) / rh,
        libm::log(gt.width() / rw),
        libm::log(gt.height() / rh),
    ]
}

/// Applies deltas with the exponential width/height parameterisation.
pub fn decode(reference: &BBox, d: [f64; 4]) -> BBox {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rx + d[0] * rw;
    let cy = ry + d[1] * rh;
    let w = rw * libm::exp(d[2].min(MAX_LOG_SCALE));
    let h = rh * libm::exp(d[3].min(MAX_LOG_SCALE));
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| boxes[k].iou(&boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BBox>,
    /// Objectness probabilities, descending.
    pub objectness: Vec<f64>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Decodes every cell, clips to the frame, runs NMS and keeps the `k_top`
/// highest-scoring survivors. Boxes narrower than a pixel after clipping are dropped.
pub fn select_proposals(logits: &[f64], deltas: &[f64], k_top: usize, nms_t: f64) -> ProposalSet {
    let n = logits.len();
    let mut boxes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for (i, &logit) in logits.iter().enumerate() {
        let d = [deltas[i], deltas[n + i], deltas[2 * n + i], deltas[3 * n + i]];
        let b = decode(&anchor(i), d).clip(IMAGE_SIZE as f64);
        if b.width() >= 1.0 && b.height() >= 1.0 {
            boxes.push(b);
            scores.push(crate::tape::sigmoid(logit));
        }
    }
    let kept = nms(&boxes, &scores, nms_t);
    let kept = &kept[..kept.len().min(k_top)];
    ProposalSet {
        boxes: kept.iter().map(|&i| boxes[i]).collect(),
        objectness: kept.iter().map(|&i| scores[i]).collect(),
    }
}

pub fn propose_regions(tape: &Tape, rpn: &RpnOutput, k_top: usize, nms_t: f64) -> ProposalSet {
    select_proposals(tape.value(rpn.logits).data(), tape.value(rpn.deltas).data(), k_top, nms_t)
}

/// Feature-map window covered by `b` at `stride`, at least one cell.
pub fn box_window(b: &BBox, stride: usize, h: usize, w: usize) -> Window {
    let s = stride as f64;
    let span = |lo: f64, hi: f64, n: usize| {
        let a = (libm::floor(lo / s).max(0.0) as usize).min(n - 1);
        let z = (libm::ceil(hi / s).max(0.0) as usize).min(n);
        if z > a {
            (a, z)
        } else {
            let c = ((libm::floor((lo + hi) / (2.0 * s))).max(0.0) as usize).min(n - 1);
            (c, c + 1)
        }
    };
    let (r0, r1) = span(b.y_min, b.y_max, h);
    let (c0, c1) = span(b.x_min, b.x_max, w);
    Window { r0, r1, c0, c1 }
}

/// Pools each box of a `C x H x W` map to `K x C x 4 x 4`.
pub fn roi_pool(tape: &mut Tape, f: Var, boxes: &[BBox], stride: usize) -> Result<Var> {
    let (h, w) = (tape.shape(f)[1], tape.shape(f)[2]);
    let windows: Vec<Window> = boxes.iter().map(|b| box_window(b, stride, h, w)).collect();
    tape.roi_pool(f, &windows, ROI_SIZE)
}

/// Ground truth of one labelled scene.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth<'a> {
    pub boxes: &'a [BBox],
    pub classes: &'a [usize],
}

impl Scene {
    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth {
            boxes: &self.boxes,
            classes: &self.classes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Detections {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

impl Detections {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// The four detection loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct DetLoss {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub head_cls: Var,
    pub head_reg: Var,
    pub total: Var,
}

/// Anchor labels: `Some(true)` positive, `Some(false)` negative, `None` ignored,
/// plus the matched ground-truth index per anchor.
pub fn assign_anchors(gt: &[BBox], cfg: &DetectorConfig) -> (Vec<Option<bool>>, Vec<usize>) {
    let n = GRID * GRID;
    let mut labels = vec![Some(false); n];
    let mut matched = vec![0; n];
    if gt.is_empty() {
        return (labels, matched);
    }
    for (i, (label, m)) in labels.iter_mut().zip(&mut matched).enumerate() {
        let a = anchor(i);
        let (best, iou) = best_match(&a, gt);
        *m = best;
        *label = if iou >= cfg.pos_iou {
            Some(true)
        } else if iou < cfg.neg_iou {
            Some(false)
        } else {
            None
        };
    }
    // Every ground-truth box keeps its best anchor, so small objects are never orphaned.
    for (g, b) in gt.iter().enumerate() {
        let mut best = (0, -1.0);
        for i in 0..n {
            let iou = anchor(i).iou(b);
            if iou > best.1 {
                best = (i, iou);
            }
        }
        if best.1 > 0.0 {
            labels[best.0] = Some(true);
            matched[best.0] = g;
        }
    }
    (labels, matched)
}

fn best_match(b: &BBox, gt: &[BBox]) -> (usize, f64) {
    let mut best = (0, -1.0);
    for (g, t) in gt.iter().enumerate() {
        let iou = b.iou(t);
        if iou > best.1 {
            best = (g, iou);
        }
    }
    best
}

fn constant(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
    tape.constant(Tensor::from_parts(shape.to_vec(), data))
}

/// `sum(weights * smooth_l1(pred - target))` with constant targets and weights.
fn weighted_smooth_l1(tape: &mut Tape, pred: Var, target: Vec<f64>, weights: Vec<f64>, weight_shape: &[usize]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let t = constant(tape, &shape, target);
    let diff = tape.sub(pred, t)?;
    let l = tape.smooth_l1(diff)?;
    let w = constant(tape, weight_shape, weights);
    let wl = tape.mul(l, w)?;
    tape.sum(wl)
}

fn rpn_losses(tape: &mut Tape, rpn: &RpnOutput, gt: &GroundTruth, cfg: &DetectorConfig) -> Result<(Var, Var)> {
    let n = GRID * GRID;
    let (labels, matched) = assign_anchors(gt.boxes, cfg);
    let n_labeled = labels.iter().filter(|l| l.is_some()).count().max(1) as f64;
    let pos_w: Vec<f64> = labels.iter().map(|l| if *l == Some(true) { 1.0 / n_labeled } else { 0.0 }).collect();
    let neg_w: Vec<f64> = labels.iter().map(|l| if *l == Some(false) { 1.0 / n_labeled } else { 0.0 }).collect();

    let log_p = tape.log_sigmoid(rpn.logits)?;
    let neg_logits = tape.scale(rpn.logits, -1.0)?;
    let log_q = tape.log_sigmoid(neg_logits)?;
    let pw = constant(tape, &[n], pos_w);
    let nw = constant(tape, &[n], neg_w);
    let a = tape.mul(log_p, pw)?;
    let b = tape.mul(log_q, nw)?;
    let ab = tape.add(a, b)?;
    let s = tape.sum(ab)?;
    let cls = tape.scale(s, -1.0)?;

    let n_pos = labels.iter().filter(|l| **l == Some(true)).count();
    let norm = 1.0 / (4.0 * n_pos.max(1) as f64);
    let mut target = vec![0.0; 4 * n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        if labels[i] == Some(true) {
            let t = encode(&anchor(i), &gt.boxes[matched[i]]);
            for (c, v) in t.iter().enumerate() {
                target[c * n + i] = *v;
            }
            weights[i] = norm;
        }
    }
    let reg = weighted_smooth_l1(tape, rpn.deltas, target, weights, &[1, n])?;
    Ok((cls, reg))
}

/// Class logits (`K x 4`) and box deltas (`K x 4`) for pooled region features.
pub fn head_forward(tape: &mut Tape, p: &Binding, params: &DetectorParams, features: Var) -> Result<(Var, Var)> {
    let k = tape.shape(features)[0];
    let flat = tape.reshape(features, &[k, F3_CHANNELS * ROI_SIZE * ROI_SIZE])?;
    let h = linear(tape, p, params.fc, flat)?;
    let h = tape.relu(h)?;
    let logits = linear(tape, p, params.cls, h)?;
    let deltas = linear(tape, p, params.bbox, h)?;
    Ok((logits, deltas))
}

/// Per-class boxes and scores from head outputs, class-wise NMS, descending scores.
pub fn postprocess(boxes: &[BBox], logits: &Tensor, deltas: &Tensor, cfg: &DetectorConfig) -> Detections {
    let mut per_class: [(Vec<BBox>, Vec<f64>); NUM_CLASSES] = Default::default();
    for (i, b) in boxes.iter().enumerate() {
        let row = &logits.data()[i * NUM_LOGITS..(i + 1) * NUM_LOGITS];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
        let d = &deltas.data()[i * 4..i * 4 + 4];
        let d = core::array::from_fn(|c| d[c] / HEAD_DELTA_SCALE[c]);
        let refined = decode(b, d).clip(IMAGE_SIZE as f64);
        if refined.width() <= 0.0 || refined.height() <= 0.0 {
            continue;
        }
        for c in 0..NUM_CLASSES {
            let score = libm::exp(row[c + 1] - max) / z;
            if score >= cfg.score_threshold {
                per_class[c].0.push(refined);
                per_class[c].1.push(score);
            }
        }
    }
    let mut all: Vec<(BBox, f64, usize)> = Vec::new();
    for (c, (bs, ss)) in per_class.iter().enumerate() {
        for k in nms(bs, ss, cfg.nms_threshold) {
            all.push((bs[k], ss[k], c));
        }
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1));
    all.truncate(cfg.k_max * NUM_CLASSES);
    Detections {
        boxes: all.iter().map(|d| d.0).collect(),
        scores: all.iter().map(|d| d.1).collect(),
        classes: all.iter().map(|d| d.2).collect(),
    }
}

/// Head classification and regression losses for region boxes `samples`.
fn head_losses(tape: &mut Tape, logits: Var, deltas: Var, samples: &[BBox], gt: &GroundTruth, cfg: &DetectorConfig) -> Result<(Var, Var)> {
    let k = samples.len();
    let mut onehot = vec![0.0; k * NUM_LOGITS];
    let mut target = vec![0.0; k * 4];
    let mut weights = vec![0.0; k];
    let mut n_pos = 0;
    for (i, s) in samples.iter().enumerate() {
        let (g, iou) = best_match(s, gt.boxes);
        if iou >= cfg.pos_iou {
            onehot[i * NUM_LOGITS + gt.classes[g] + 1] = 1.0 / k as f64;
            let t = encode(s, &gt.boxes[g]);
            for c in 0..4 {
                target[i * 4 + c] = t[c] * HEAD_DELTA_SCALE[c];
            }
            weights[i] = 1.0;
            n_pos += 1;
        } else {
            onehot[i * NUM_LOGITS] = 1.0 / k as f64;
        }
    }
    let norm = 1.0 / (4.0 * n_pos.max(1) as f64);
    for w in &mut weights {
        *w *= norm;
    }
    let lsm = tape.log_softmax(logits)?;
    let oh = constant(tape, &[k, NUM_LOGITS], onehot);
    let picked = tape.mul(lsm, oh)?;
    let s = tape.sum(picked)?;
    let cls = tape.scale(s, -1.0)?;
    let reg = weighted_smooth_l1(tape, deltas, target, weights, &[k, 1])?;
    Ok((cls, reg))
}

/// Detection loss on a labelled image plus the detections of the current proposals.
///
/// Ground-truth boxes join the proposals as extra head samples. Unlabelled
/// images have no ground truth and are rejected.
pub fn detection_forward_loss(
    tape: &mut Tape,
    p: &Binding,
    params: &DetectorParams,
    f3: Var,
    rpn: &RpnOutput,
    proposals: &ProposalSet,
    ground_truth: Option<GroundTruth>,
    cfg: &DetectorConfig,
) -> Result<(Detections, DetLoss)> {
    let gt = ground_truth.ok_or_else(|| TensorError::Contract(String::from("detection loss needs ground truth")))?;
    if gt.boxes.len() != gt.classes.len() {
        return Err(TensorError::Contract(String::from("ground truth boxes and classes differ in length")));
    }
    let (rpn_cls, rpn_reg) = rpn_losses(tape, rpn, &gt, cfg)?;

    let mut samples = proposals.boxes.clone();
    samples.extend_from_slice(gt.boxes);
    let (head_cls, head_reg, detections) = if samples.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        (zero, zero, Detections::default())
    } else {
        let feats = roi_pool(tape, f3, &samples, F3_STRIDE)?;
        let (logits, deltas) = head_forward(tape, p, params, feats)?;
        let (c, r) = head_losses(tape, logits, deltas, &samples, &gt, cfg)?;
        let k = proposals.len();
        let det = postprocess(
            &proposals.boxes,
            &slice_rows(tape.value(logits), k),
            &slice_rows(tape.value(deltas), k),
            cfg,
        );
        (c, r, det)
    };
    let a = tape.add(rpn_cls, rpn_reg)?;
    let b = tape.add(head_cls, head_reg)?;
    let total = tape.add(a, b)?;
    Ok((
        detections,
        DetLoss {
            rpn_cls,
            rpn_reg,
            head_cls,
            head_reg,
            total,
        },
    ))
}

fn slice_rows(t: &Tensor, k: usize) -> Tensor {
    let cols = t.shape()[1];
    Tensor::from_parts(vec![k, cols], t.data()[..k * cols].to_vec())
}

/// Inference on one image with frozen parameters.
pub fn detect(store: &ParamStore, params: &DetectorParams, image: &Tensor, cfg: &DetectorConfig) -> Result<Detections> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(image.clone());
    let pyr = backbone_forward(&mut tape, &p, params, x)?;
    let rpn = rpn_forward(&mut tape, &p, params, pyr.f3)?;
    let proposals = propose_regions(&tape, &rpn, cfg.k_max, cfg.nms_threshold);
    if proposals.is_empty() {
        return Ok(Detections::default());
    }
    let feats = roi_pool(&mut tape, pyr.f3, &proposals.boxes, F3_STRIDE)?;
    let (logits, deltas) = head_forward(&mut tape, &p, params, feats)?;
    Ok(postprocess(&proposals.boxes, tape.value(logits), tape.value(deltas), cfg))
}
