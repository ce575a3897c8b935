//! From raw module outputs to final detections: per-module decoding and
//! top-K, joint greedy NMS, the single-scale resize rule, and the image
//! pyramid schedule. Also the plain-text detection file format.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorConfig, AnchorSet, ModuleId};
use crate::boxcodec::{self, Delta};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::image::Image;
use crate::loss::softmax2;
use crate::sshgraph::{DetectionModuleOutput, SshNet, INPUT_MULTIPLE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Face probability in [0, 1].
    pub score: f32,
    pub module: ModuleId,
    pub level: usize,
    /// Anchor index within the module's grid at that level.
    pub anchor: usize,
}

/// Strict output order: score descending, then module, level, anchor.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.module.cmp(&b.module))
        .then(a.level.cmp(&b.level))
        .then(a.anchor.cmp(&b.anchor))
}

/// Detections of one image, sorted by [`detection_order`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn scored_boxes(&self) -> Vec<ScoredBox> {
        self.detections
            .iter()
            .map(|d| ScoredBox {
                bbox: d.bbox,
                score: d.score,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// Detections kept per module before NMS.
    pub top_k: usize,
    pub nms_threshold: f32,
    /// Detections below this score are dropped before NMS.
    pub score_floor: f32,
    /// Extra NMS inside each pyramid level before the joint pass.
    pub per_level_nms: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            top_k: 1000,
            nms_threshold: 0.3,
            score_floor: 0.01,
            per_level_nms: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::config("top_k must be positive"));
        }
        check_nms_threshold(self.nms_threshold)?;
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::config(format!(
                "score_floor must lie in [0, 1], got {}",
                self.score_floor
            )));
        }
        Ok(())
    }
}

fn check_nms_threshold(t: f32) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("NMS threshold must lie in (0, 1), got {t}")))
    }
}

/// Scores, decodes and keeps the `top_k` best anchors of one module
/// (batch item 0). Boxes are clipped to `clip_w × clip_h`.
pub fn decode_module(
    out: &DetectionModuleOutput,
    anchors: &AnchorSet,
    top_k: usize,
    clip_w: f32,
    clip_h: f32,
) -> Result<Vec<Detection>> {
    let (_, c_cls, h, w) = out.cls.dims4()?;
    let (_, c_reg, hr, wr) = out.reg.dims4()?;
    let k = anchors.num_scales();
    if c_cls != 2 * k || c_reg != 4 * k || (h, w) != (hr, wr) || (w, h) != (anchors.feature_w, anchors.feature_h) {
        return Err(Error::contract(format!(
            "{} outputs cls {:?} / reg {:?} do not match {}x{} anchors with K={k}",
            out.module,
            out.cls.shape(),
            out.reg.shape(),
            anchors.feature_w,
            anchors.feature_h
        )));
    }
    let hw = h * w;
    let cls = out.cls.data();
    let reg = out.reg.data();
    let mut scored: Vec<(f32, usize)> = (0..anchors.len())
        .map(|i| {
            let (row, col, s) = anchors.position(i);
            let p = row * w + col;
            let pair = [cls[2 * s * hw + p], cls[(2 * s + 1) * hw + p]];
            (softmax2(pair)[1] as f32, i)
        })
        .collect();
    let by_rank = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if top_k < scored.len() {
        scored.select_nth_unstable_by(top_k, by_rank);
        scored.truncate(top_k);
    }
    scored.sort_unstable_by(by_rank);
    let clamp = boxcodec::default_clamp();
    Ok(scored
        .into_iter()
        .map(|(score, i)| {
            let (row, col, s) = anchors.position(i);
            let p = row * w + col;
            let d = Delta::new(
                reg[4 * s * hw + p],
                reg[(4 * s + 1) * hw + p],
                reg[(4 * s + 2) * hw + p],
                reg[(4 * s + 3) * hw + p],
            );
            Detection {
                bbox: boxcodec::decode(&d, &anchors.boxes[i], clamp).clip(clip_w, clip_h),
                score,
                module: out.module,
                level: 0,
                anchor: i,
            }
        })
        .collect())
}

/// Greedy NMS. Visits boxes by descending score (ties by input index),
/// keeps each unsuppressed box and suppresses every later box whose IoU
/// with it exceeds `iou_threshold`. Returns kept input indices in visit
/// order.
pub fn nms(boxes: &[BBox], scores: &[f32], iou_threshold: f32) -> Result<Vec<usize>> {
    check_nms_threshold(iou_threshold)?;
    if boxes.len() != scores.len() {
        return Err(Error::contract(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let bi = &boxes[i];
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(bi, &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

fn nms_detections(dets: Vec<Detection>, threshold: f32) -> Result<Vec<Detection>> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f32> = dets.iter().map(|d| d.score).collect();
    let keep = nms(&boxes, &scores, threshold)?;
    Ok(keep.into_iter().map(|i| dets[i]).collect())
}

/// `min(min_target / short_side, max_cap / long_side)`.
pub fn single_scale_plan(width: usize, height: usize, min_target: f64, max_cap: f64) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::contract(format!("image dims must be positive, got {width}x{height}")));
    }
    if !(min_target > 0.0 && max_cap > 0.0) {
        return Err(Error::config(format!(
            "resize targets must be positive, got {min_target}/{max_cap}"
        )));
    }
    let short = width.min(height) as f64;
    let long = width.max(height) as f64;
    Ok((min_target / short).min(max_cap / long))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidLevel {
    pub min_side: f64,
    pub max_side: f64,
    pub modules: Vec<ModuleId>,
}

/// Image pyramid schedule.
///
/// With `normalize = Some((n_min, n_max))` the image is first brought to
/// factor `f0 = min(n_min / short, n_max / long)` and level `l` uses
/// `f0 * min(min_side_l / n_min, max_side_l / n_max)`; that is, the level's
/// targets are applied relative to the normalization box. Without
/// normalization each level is an independent single-scale resize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidPlan {
    pub normalize: Option<(f64, f64)>,
    pub levels: Vec<PyramidLevel>,
}

impl Default for PyramidPlan {
    /// Normalization to 800/1200, then min sides 500/800/1200/1600 with M3
    /// skipped on the largest level.
    fn default() -> Self {
        let level = |m: f64, modules: &[ModuleId]| PyramidLevel {
            min_side: m,
            max_side: 1.5 * m,
            modules: modules.to_vec(),
        };
        let all = ModuleId::ALL;
        Self {
            normalize: Some((800.0, 1200.0)),
            levels: vec![
                level(500.0, &all),
                level(800.0, &all),
                level(1200.0, &all),
                level(1600.0, &[ModuleId::M1, ModuleId::M2]),
            ],
        }
    }
}

impl PyramidPlan {
    /// Degenerate one-level plan equivalent to single-scale detection.
    pub fn single(min_side: f64, max_side: f64) -> Self {
        Self {
            normalize: None,
            levels: vec![PyramidLevel {
                min_side,
                max_side,
                modules: ModuleId::ALL.to_vec(),
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("pyramid plan has no levels"));
        }
        for w in self.levels.windows(2) {
            if w[1].min_side <= w[0].min_side {
                return Err(Error::config("pyramid min sides must be strictly increasing"));
            }
        }
        for l in &self.levels {
            if !(l.min_side > 0.0 && l.max_side > 0.0) || l.modules.is_empty() {
                return Err(Error::config(format!("invalid pyramid level {l:?}")));
            }
        }
        if self.levels.len() > 1
            && self.levels.last().is_some_and(|l| l.modules.contains(&ModuleId::M3))
        {
            return Err(Error::config("M3 must be inactive on the largest pyramid level"));
        }
        if let Some((a, b)) = self.normalize {
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::config("normalization sides must be positive"));
            }
        }
        Ok(())
    }

    /// Resize factor of each level relative to the original image.
    pub fn level_factors(&self, width: usize, height: usize) -> Result<Vec<f64>> {
        self.levels
            .iter()
            .map(|l| match self.normalize {
                Some((n_min, n_max)) => {
                    let f0 = single_scale_plan(width, height, n_min, n_max)?;
                    Ok(f0 * (l.min_side / n_min).min(l.max_side / n_max))
                }
                None => single_scale_plan(width, height, l.min_side, l.max_side),
            })
            .collect()
    }
}

/// Resized dims for factor `f`: `round(side · f)`, at least 1.
pub fn resized_dims(width: usize, height: usize, f: f64) -> (usize, usize) {
    let r = |v: usize| ((v as f64 * f).round() as usize).max(1);
    (r(width), r(height))
}

/// Maps a box from a `resized` image back to `original` coordinates with
/// per-axis factors, so rounding of the resized dims does not drift boxes.
pub fn map_to_original(b: &BBox, original: (usize, usize), resized: (usize, usize)) -> BBox {
    let sx = original.0 as f32 / resized.0 as f32;
    let sy = original.1 as f32 / resized.1 as f32;
    b.scale(sx, sy)
}

/// One forward pass at factor `factor`; boxes returned in original image
/// coordinates, not yet NMS-ed.
pub fn detect_at_scale(
    net: &SshNet,
    anchors: &AnchorConfig,
    image: &Image,
    factor: f64,
    modules: &[ModuleId],
    level: usize,
    config: &InferConfig,
) -> Result<Vec<Detection>> {
    let (w, h) = (image.width(), image.height());
    let (rw, rh) = resized_dims(w, h, factor);
    let resized = if (rw, rh) == (w, h) {
        image.clone()
    } else {
        image.resize(rw, rh)?
    };
    let input = resized.to_tensor(INPUT_MULTIPLE);
    let (outputs, _) = net.forward_modules(&input, modules)?;
    let mut dets = Vec::new();
    for out in &outputs {
        let (fw, fh) = out.feature_dims();
        let set = net.anchor_set(anchors, out.module, fw, fh)?;
        for mut d in decode_module(out, &set, config.top_k, rw as f32, rh as f32)? {
            if d.score < config.score_floor {
                continue;
            }
            d.bbox = map_to_original(&d.bbox, (w, h), (rw, rh)).clip(w as f32, h as f32);
            d.level = level;
            dets.push(d);
        }
    }
    Ok(dets)
}

fn finish(mut dets: Vec<Detection>, config: &InferConfig) -> Result<DetectionSet> {
    // Stable pre-order so NMS index tie-breaks follow the output order.
    dets.sort_by(detection_order);
    let mut kept = nms_detections(dets, config.nms_threshold)?;
    kept.sort_by(detection_order);
    Ok(DetectionSet { detections: kept })
}

/// Single-scale detection with the shortest-side / longest-side rule.
pub fn detect(
    net: &SshNet,
    anchors: &AnchorConfig,
    image: &Image,
    min_side: f64,
    max_side: f64,
    config: &InferConfig,
) -> Result<DetectionSet> {
    config.validate()?;
    let f = single_scale_plan(image.width(), image.height(), min_side, max_side)?;
    let dets = detect_at_scale(net, anchors, image, f, &net.module_ids(), 0, config)?;
    finish(dets, config)
}

/// Runs every pyramid level, pools the detections in level order and
/// applies one joint NMS.
pub fn pyramid_detect(
    net: &SshNet,
    anchors: &AnchorConfig,
    image: &Image,
    plan: &PyramidPlan,
    config: &InferConfig,
) -> Result<DetectionSet> {
    config.validate()?;
    plan.validate()?;
    let factors = plan.level_factors(image.width(), image.height())?;
    let mut pooled = Vec::new();
    for (level, (l, &f)) in plan.levels.iter().zip(&factors).enumerate() {
        let mut dets = detect_at_scale(net, anchors, image, f, &l.modules, level, config)?;
        if config.per_level_nms {
            dets.sort_by(detection_order);
            dets = nms_detections(dets, config.nms_threshold)?;
        }
        pooled.extend(dets);
    }
    finish(pooled, config)
}

// ---------------------------------------------------------------------------
// Detection files

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image: String,
    pub boxes: Vec<ScoredBox>,
}

/// Blocks of `path`, `N`, then `N` lines of `x1 y1 x2 y2 score`.
pub fn format_detections(images: &[ImageDetections]) -> String {
    let mut s = String::new();
    for img in images {
        let _ = writeln!(s, "{}\n{}", img.image, img.boxes.len());
        for b in &img.boxes {
            let [x1, y1, x2, y2] = b.bbox.coords();
            let _ = writeln!(s, "{x1:.6} {y1:.6} {x2:.6} {y2:.6} {:.6}", b.score);
        }
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<ImageDetections>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some((_, path)) = lines.next() {
        let (ln, count) = lines
            .next()
            .ok_or_else(|| Error::format(format!("missing count after `{path}`")))?;
        let n: usize = count
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("line {}: bad detection count `{count}`", ln + 1)))?;
        let mut boxes = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::format(format!("`{path}`: expected {n} detections")))?;
            let v: Vec<f32> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(format!("line {}: bad number in `{line}`", ln + 1)))?;
            let [x1, y1, x2, y2, score] = v[..] else {
                return Err(Error::format(format!("line {}: expected 5 fields", ln + 1)));
            };
            let bbox = BBox::new(x1, y1, x2, y2)
                .map_err(|e| Error::format(format!("line {}: {e}", ln + 1)))?;
            boxes.push(ScoredBox { bbox, score });
        }
        out.push(ImageDetections {
            image: path.trim_end().to_string(),
            boxes,
        });
    }
    Ok(out)
}

/// Rounds coordinates and score to the file's 6 decimals.
pub fn quantize(b: &ScoredBox) -> ScoredBox {
    let q = |v: f32| format!("{v:.6}").parse::<f32>().expect("formatted float");
    let [x1, y1, x2, y2] = b.bbox.coords();
    ScoredBox {
        bbox: BBox::new(q(x1), q(y1), q(x2), q(y2)).expect("rounding keeps order"),
        score: q(b.score),
    }
}
