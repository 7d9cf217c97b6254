//! Toy multi-scale anchor-based single-stage detector.
//!
//! Backbone (strided conv/GroupNorm/ReLU stack) -> optional per-scale
//! self-attention -> per-scale 3x3 classification and box-regression heads.
//! Anchors are square, centred on feature-map cells, ordered
//! scale-major, then row, column and anchor index.

use attn_align_tensor::{Graph, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionResult, SelfAttention};
use crate::error::{Error, Result};
use crate::nn::{to_chw, to_hwc, Conv, ConvBlock};

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Self {
        BoundingBox { cx, cy, w, h, class_id }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Self {
        BoundingBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
            class_id,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        self.w > 0.0 && self.h > 0.0 && x1 < 1.0 && y1 < 1.0 && x2 > 0.0 && y2 > 0.0
    }

    /// Intersection with the unit square, `None` if empty.
    pub fn clip_unit(&self) -> Option<BoundingBox> {
        let [x1, y1, x2, y2] = self.corners();
        let (x1, y1, x2, y2) = (x1.max(0.0), y1.max(0.0), x2.min(1.0), y2.min(1.0));
        (x2 > x1 && y2 > y1).then(|| BoundingBox::from_corners(x1, y1, x2, y2, self.class_id))
    }
}

/// Intersection over union (class ids are ignored).
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleAnchors {
    pub side: usize,
    /// One square anchor per entry, as a fraction of the image side.
    pub sizes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub scales: Vec<ScaleAnchors>,
}

impl AnchorGrid {
    pub fn new(scales: Vec<ScaleAnchors>) -> Result<Self> {
        let grid = AnchorGrid { scales };
        grid.validate()?;
        Ok(grid)
    }

    /// Three scales (16x16, 8x8, 4x4) for 64-pixel images, one anchor per cell.
    pub fn toy() -> Self {
        AnchorGrid {
            scales: vec![
                ScaleAnchors {
                    side: 16,
                    sizes: vec![0.2],
                },
                ScaleAnchors {
                    side: 8,
                    sizes: vec![0.35],
                },
                ScaleAnchors {
                    side: 4,
                    sizes: vec![0.6],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("anchor grid needs at least one scale"));
        }
        for s in &self.scales {
            if !s.side.is_power_of_two() {
                return Err(Error::config(format!(
                    "anchor grid side {} is not a power of two",
                    s.side
                )));
            }
            if s.sizes.is_empty() || s.sizes.iter().any(|&z| !(z > 0.0)) {
                return Err(Error::config("anchor sizes must be positive and non-empty"));
            }
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self, scale: usize) -> usize {
        self.scales[scale].sizes.len()
    }

    pub fn len(&self) -> usize {
        self.scales.iter().map(|s| s.side * s.side * s.sizes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchors(&self) -> Vec<BoundingBox> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.scales {
            let cell = 1.0 / s.side as f64;
            for y in 0..s.side {
                for x in 0..s.side {
                    for &size in &s.sizes {
                        out.push(BoundingBox::new(
                            (x as f64 + 0.5) * cell,
                            (y as f64 + 0.5) * cell,
                            size,
                            size,
                            0,
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Regression target of `gt` relative to `anchor`.
pub fn encode_box(gt: &BoundingBox, anchor: &BoundingBox) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Largest log-scale delta applied when decoding.
const MAX_LOG_SCALE: f64 = 4.0;

pub fn decode_box(delta: [f64; 4], anchor: &BoundingBox, class_id: usize) -> BoundingBox {
    BoundingBox::new(
        anchor.cx + delta[0] * anchor.w,
        anchor.cy + delta[1] * anchor.h,
        anchor.w * delta[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        anchor.h * delta[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp(),
        class_id,
    )
}

pub const POSITIVE_IOU: f64 = 0.5;

/// Per-anchor training targets. `labels[i] == 0` is background, otherwise
/// `class_id + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchTargets {
    pub labels: Vec<usize>,
    pub deltas: Vec<[f64; 4]>,
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchTargets {
    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

/// An anchor is positive when its best ground truth overlaps it with
/// IoU >= 0.5, or when it is the best anchor of some ground truth (later
/// ground truths win such forced assignments).
pub fn match_anchors(gt: &[BoundingBox], grid: &AnchorGrid) -> MatchTargets {
    let anchors = grid.anchors();
    let n = anchors.len();
    let mut matched: Vec<Option<usize>> = vec![None; n];
    if !gt.is_empty() {
        for (a, anchor) in anchors.iter().enumerate() {
            let mut best = 0;
            let mut best_iou = iou(anchor, &gt[0]);
            for (j, b) in gt.iter().enumerate().skip(1) {
                let v = iou(anchor, b);
                if v > best_iou {
                    best = j;
                    best_iou = v;
                }
            }
            if best_iou >= POSITIVE_IOU {
                matched[a] = Some(best);
            }
        }
        for (j, b) in gt.iter().enumerate() {
            let mut best = 0;
            let mut best_iou = iou(&anchors[0], b);
            for (a, anchor) in anchors.iter().enumerate().skip(1) {
                let v = iou(anchor, b);
                if v > best_iou {
                    best = a;
                    best_iou = v;
                }
            }
            if best_iou > 0.0 {
                matched[best] = Some(j);
            }
        }
    }
    let labels = matched.iter().map(|m| m.map_or(0, |j| gt[j].class_id + 1)).collect();
    let deltas = matched
        .iter()
        .zip(&anchors)
        .map(|(m, a)| m.map_or([0.0; 4], |j| encode_box(&gt[j], a)))
        .collect();
    MatchTargets {
        labels,
        deltas,
        matched_gt: matched,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub groups: usize,
    pub use_attention: bool,
    pub attention: AttentionConfig,
    /// Coarsest scale reuses the max-pooled objectness map of the scale above.
    pub objectness_reuse: bool,
    pub anchors: AnchorGrid,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_side: 64,
            channels: 32,
            num_classes: 2,
            groups: 4,
            use_attention: true,
            attention: AttentionConfig {
                embed_dim: 32,
                num_heads: 8,
                value_dim: 32,
                ffn_hidden: 64,
                dropout_p: 0.1,
                detach_objectness: false,
            },
            objectness_reuse: false,
            anchors: AnchorGrid::toy(),
        }
    }
}

impl DetectorConfig {
    /// Feature-map sides produced by the backbone.
    pub fn scale_sides(&self) -> Vec<usize> {
        vec![self.image_side / 4, self.image_side / 8, self.image_side / 16]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 16 || !self.image_side.is_power_of_two() {
            return Err(Error::config(format!(
                "image side {} must be a power of two >= 16",
                self.image_side
            )));
        }
        if self.num_classes == 0 || self.channels == 0 {
            return Err(Error::config("num_classes and channels must be positive"));
        }
        if self.groups == 0
            || !self.channels.is_multiple_of(self.groups)
            || !(self.channels / 2).is_multiple_of(self.groups)
        {
            return Err(Error::config(format!(
                "group count {} must divide {} and {} channels",
                self.groups,
                self.channels,
                self.channels / 2
            )));
        }
        self.anchors.validate()?;
        let sides: Vec<usize> = self.anchors.scales.iter().map(|s| s.side).collect();
        if sides != self.scale_sides() {
            return Err(Error::config(format!(
                "anchor sides {sides:?} do not match feature sides {:?}",
                self.scale_sides()
            )));
        }
        if self.use_attention {
            self.attention.validate()?;
            if self.attention.value_dim != self.channels {
                return Err(Error::config("attention value_dim must equal backbone channels"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: ConvBlock,
    down: ConvBlock,
    scale1: ConvBlock,
    scale2: ConvBlock,
    scale3: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    backbone: Backbone,
    attention: Vec<SelfAttention>,
    cls_heads: Vec<Conv>,
    box_heads: Vec<Conv>,
}

/// Per-scale features of one image. `features[s]` is `F_s` as `[HW, C]`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: Vec<Var>,
    pub attention: Option<Vec<AttentionResult>>,
    pub head_inputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct DetectionOutput {
    /// `[N_anchors, num_classes + 1]`, background at column 0.
    pub cls_logits: Var,
    /// `[N_anchors, 4]`.
    pub box_deltas: Var,
}

const HEAD_INIT_SCALE: f64 = 0.1;

impl Detector {
    pub fn new<T: Scalar, R: Rng>(config: DetectorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, g) = (config.channels, config.groups);
        let backbone = Backbone {
            stem: ConvBlock::new(store, "backbone.stem", 3, c / 2, 2, g, rng)?,
            down: ConvBlock::new(store, "backbone.down", c / 2, c, 2, g, rng)?,
            scale1: ConvBlock::new(store, "backbone.s1", c, c, 1, g, rng)?,
            scale2: ConvBlock::new(store, "backbone.s2", c, c, 2, g, rng)?,
            scale3: ConvBlock::new(store, "backbone.s3", c, c, 2, g, rng)?,
        };
        let n_scales = config.anchors.scales.len();
        let attention = if config.use_attention {
            (0..n_scales)
                .map(|s| SelfAttention::new(config.attention.clone(), store, &format!("attn.s{}", s + 1), rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let k1 = config.num_classes + 1;
        let mut cls_heads = Vec::new();
        let mut box_heads = Vec::new();
        for s in 0..n_scales {
            let a = config.anchors.anchors_per_cell(s);
            let cls = Conv::new(store, &format!("head.s{}.cls", s + 1), c, a * k1, 3, 1, 1, rng)?;
            let bx = Conv::new(store, &format!("head.s{}.box", s + 1), c, a * 4, 3, 1, 1, rng)?;
            for id in [cls.weight, bx.weight] {
                for v in store.get_mut(id).data_mut() {
                    *v *= T::of(HEAD_INIT_SCALE);
                }
            }
            cls_heads.push(cls);
            box_heads.push(bx);
        }
        Ok(Detector {
            config,
            backbone,
            attention,
            cls_heads,
            box_heads,
        })
    }

    /// Channel-first feature maps `[C, side, side]` for the three scales.
    pub fn backbone<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        let side = self.config.image_side;
        if g.tape.shape(image) != [3, side, side] {
            return Err(attn_align_tensor::TensorError::Shape {
                op: "backbone",
                lhs: g.tape.shape(image).to_vec(),
                rhs: vec![3, side, side],
            }
            .into());
        }
        let b = &self.backbone;
        let x = b.stem.forward(g, image)?;
        let x = b.down.forward(g, x)?;
        let f1 = b.scale1.forward(g, x)?;
        let f2 = b.scale2.forward(g, f1)?;
        let f3 = b.scale3.forward(g, f2)?;
        Ok(vec![f1, f2, f3])
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, image: Var, training: bool) -> Result<Encoded> {
        let maps = self.backbone(g, image)?;
        let sides = self.config.scale_sides();
        let mut features = Vec::with_capacity(maps.len());
        for &m in &maps {
            features.push(to_hwc(g, m)?);
        }
        if self.attention.is_empty() {
            return Ok(Encoded {
                head_inputs: features.clone(),
                features,
                attention: None,
            });
        }
        let mut results: Vec<AttentionResult> = Vec::with_capacity(maps.len());
        for (s, module) in self.attention.iter().enumerate() {
            let mut r = module.forward(g, features[s], sides[s], sides[s], training)?;
            if self.config.objectness_reuse && s + 1 == self.attention.len() && s > 0 {
                let prev = results[s - 1].objectness;
                let ps = sides[s - 1];
                let p = g.tape.reshape(prev, &[1, ps, ps])?;
                let pooled = g.tape.maxpool2d(p, 2, 2)?;
                r.objectness = g.tape.reshape(pooled, &[sides[s], sides[s]])?;
            }
            results.push(r);
        }
        Ok(Encoded {
            head_inputs: results.iter().map(|r| r.output).collect(),
            features,
            attention: Some(results),
        })
    }

    pub fn heads<T: Scalar>(&self, g: &mut Graph<T>, encoded: &Encoded) -> Result<DetectionOutput> {
        let sides = self.config.scale_sides();
        let k1 = self.config.num_classes + 1;
        let mut cls_parts = Vec::new();
        let mut box_parts = Vec::new();
        for (s, &x) in encoded.head_inputs.iter().enumerate() {
            let a = self.config.anchors.anchors_per_cell(s);
            let n = sides[s] * sides[s] * a;
            let x = to_chw(g, x, sides[s], sides[s])?;
            let cls = self.cls_heads[s].forward(g, x)?;
            let cls = to_hwc(g, cls)?;
            cls_parts.push(g.tape.reshape(cls, &[n, k1])?);
            let bx = self.box_heads[s].forward(g, x)?;
            let bx = to_hwc(g, bx)?;
            box_parts.push(g.tape.reshape(bx, &[n, 4])?);
        }
        Ok(DetectionOutput {
            cls_logits: g.tape.concat_rows(&cls_parts)?,
            box_deltas: g.tape.concat_rows(&box_parts)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        image: Var,
        training: bool,
    ) -> Result<(Encoded, DetectionOutput)> {
        let enc = self.encode(g, image, training)?;
        let out = self.heads(g, &enc)?;
        Ok((enc, out))
    }
}

/// Negatives kept per positive by hard-negative mining.
pub const NEG_POS_RATIO: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `L_cls + L_reg`: softmax cross-entropy over positives and the hardest
/// `3 * #pos` negatives (at least one), plus smooth-L1 on positives; both
/// divided by `max(1, #pos)`.
pub fn detection_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &DetectionOutput,
    targets: &MatchTargets,
) -> Result<DetectionLoss> {
    let shape = tape.shape(out.cls_logits).to_vec();
    let n = shape[0];
    if targets.labels.len() != n || tape.shape(out.box_deltas) != [n, 4] {
        return Err(Error::config(format!(
            "{} targets for {n} anchors",
            targets.labels.len()
        )));
    }
    let k = shape[1];
    let logits = tape.value(out.cls_logits).data();
    let num_pos = targets.num_positives();
    let norm = T::one() / T::from_usize(num_pos.max(1)).unwrap();

    // background cross-entropy for negative ranking
    let mut negatives: Vec<(usize, f64)> = (0..n)
        .filter(|&i| targets.labels[i] == 0)
        .map(|i| {
            let row = &logits[i * k..(i + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            (i, lse - row[0].as_f64())
        })
        .collect();
    negatives.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = (NEG_POS_RATIO * num_pos).max(1).min(negatives.len());

    let mut cls_w = vec![T::zero(); n];
    let mut reg_w = vec![T::zero(); n];
    for i in 0..n {
        if targets.labels[i] > 0 {
            cls_w[i] = norm;
            reg_w[i] = norm;
        }
    }
    for &(i, _) in &negatives[..keep] {
        cls_w[i] = norm;
    }
    let reg_targets: Vec<T> = targets.deltas.iter().flatten().map(|&d| T::of(d)).collect();
    let cls = tape.softmax_cross_entropy(out.cls_logits, &targets.labels, &cls_w)?;
    let reg = tape.smooth_l1_loss(out.box_deltas, &reg_targets, &reg_w)?;
    let total = tape.add(cls, reg)?;
    Ok(DetectionLoss { total, cls, reg })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            score_threshold: 0.05,
            nms_iou: 0.45,
            max_detections: 100,
        }
    }
}

/// Greedy NMS within each class. Candidates are visited by descending score
/// (input order breaks ties); a candidate is dropped when its IoU with an
/// already kept box of the same class is `>= iou_threshold`.
pub fn nms(candidates: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let suppressed = kept
            .iter()
            .any(|k| k.bbox.class_id == c.bbox.class_id && iou(&k.bbox, &c.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(*c);
        }
    }
    kept
}

/// Turns head outputs into scored boxes: per-anchor softmax, background
/// dropped, scores `>= score_threshold` kept, per-class NMS.
pub fn decode<T: Scalar>(
    cls_logits: &Tensor<T>,
    box_deltas: &Tensor<T>,
    grid: &AnchorGrid,
    params: &DecodeParams,
) -> Result<Vec<Detection>> {
    for (name, v) in [("score_threshold", params.score_threshold), ("nms_iou", params.nms_iou)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    let anchors = grid.anchors();
    let n = anchors.len();
    if cls_logits.shape().len() != 2 || cls_logits.shape()[0] != n || box_deltas.shape() != [n, 4] {
        return Err(Error::config(format!(
            "head outputs {:?}/{:?} do not match {n} anchors",
            cls_logits.shape(),
            box_deltas.shape()
        )));
    }
    let k = cls_logits.shape()[1];
    let (logits, deltas) = (cls_logits.data(), box_deltas.data());
    let mut candidates = Vec::new();
    let mut probs = vec![0.0; k];
    for (i, anchor) in anchors.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut total = 0.0;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.as_f64() - max).exp();
            total += *p;
        }
        let d = [0, 1, 2, 3].map(|j| deltas[i * 4 + j].as_f64());
        for (c, &p) in probs.iter().enumerate().skip(1) {
            let score = p / total;
            if score >= params.score_threshold {
                if let Some(bbox) = decode_box(d, anchor, c - 1).clip_unit() {
                    candidates.push(Detection { bbox, score });
                }
            }
        }
    }
    let mut kept = nms(&candidates, params.nms_iou);
    kept.truncate(params.max_detections);
    Ok(kept)
}
