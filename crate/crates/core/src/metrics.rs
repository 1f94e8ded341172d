//! Detection quality against instance-mask ground truth.
//!
//! Precision is pixel based: the share of pixels inside the predicted boxes
//! that belong to an object of the box's class. The denominator is every
//! pixel inside the box (object or not); the report keeps both raw counts.
//! Recall counts ground-truth bricks matched by some prediction.
//! mAP is the usual VOC all-point interpolated AP and is only defined for
//! upright boxes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::{rotated_iou, upright_bbox, BrickClass, InstanceMask, RotatedBox};

/// How a prediction is matched to a ground-truth instance for recall.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MatchRule {
    /// The instance's min-area-rect center lies inside the predicted box.
    #[default]
    CenterInBox,
    /// IoU between the prediction and the instance's min-area rect is at least `tau`.
    Iou { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelCounts {
    /// Object pixels of the box's class inside predicted boxes.
    pub object_pixels: u64,
    /// All pixels inside predicted boxes.
    pub box_pixels: u64,
}

impl PixelCounts {
    pub fn precision(&self) -> Option<f64> {
        (self.box_pixels > 0).then(|| self.object_pixels as f64 / self.box_pixels as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecallCounts {
    pub detected: usize,
    pub total: usize,
}

impl RecallCounts {
    pub fn recall(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.detected as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub precision: Option<f64>,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    pub pixels: PixelCounts,
    pub bricks: RecallCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: Option<f64>,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    pub per_class: BTreeMap<BrickClass, ClassReport>,
    pub pixels: PixelCounts,
    pub bricks: RecallCounts,
}

/// Raw pixel counts behind [`pixel_precision`].
pub fn pixel_counts(boxes: &[RotatedBox], gt: &InstanceMask) -> PixelCounts {
    let mut counts = PixelCounts::default();
    for b in boxes {
        gt.for_each_pixel_in(b, |u, v| {
            counts.box_pixels += 1;
            if gt.class_at(u, v) == Some(b.class_id) {
                counts.object_pixels += 1;
            }
        });
    }
    counts
}

/// Pixel precision; `None` when there are no predicted pixels.
pub fn pixel_precision(boxes: &[RotatedBox], gt: &InstanceMask) -> Option<f64> {
    pixel_counts(boxes, gt).precision()
}

fn order_by_score(boxes: &[RotatedBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score));
    order
}

/// Greedy matching in descending score order. Returns, for each prediction,
/// the ground-truth instance it claimed.
pub fn match_detections(
    boxes: &[RotatedBox],
    gt_rects: &BTreeMap<u16, RotatedBox>,
    rule: MatchRule,
) -> Vec<Option<u16>> {
    let mut claimed: Vec<Option<u16>> = vec![None; boxes.len()];
    let mut taken: Vec<u16> = Vec::new();
    for i in order_by_score(boxes) {
        let b = &boxes[i];
        let mut best: Option<(f64, u16)> = None;
        for (&id, rect) in gt_rects {
            if taken.contains(&id) {
                continue;
            }
            // higher key is better
            let key = match rule {
                MatchRule::CenterInBox => {
                    if !b.contains(rect.center(), 1e-9) {
                        continue;
                    }
                    -b.center().dist(rect.center())
                }
                MatchRule::Iou { tau } => {
                    let iou = rotated_iou(b, rect);
                    if iou < tau {
                        continue;
                    }
                    iou
                }
            };
            if best.is_none_or(|(k, _)| key > k) {
                best = Some((key, id));
            }
        }
        if let Some((_, id)) = best {
            taken.push(id);
            claimed[i] = Some(id);
        }
    }
    claimed
}

pub fn recall_counts(boxes: &[RotatedBox], gt: &InstanceMask, rule: MatchRule) -> RecallCounts {
    let rects = gt.instance_boxes();
    let detected = match_detections(boxes, &rects, rule).iter().flatten().count();
    RecallCounts { detected, total: rects.len() }
}

/// Fraction of ground-truth bricks detected; 1 when there are none.
pub fn detection_recall(boxes: &[RotatedBox], gt: &InstanceMask, rule: MatchRule) -> f64 {
    recall_counts(boxes, gt, rule).recall()
}

/// All-point interpolated area under a precision/recall curve built from
/// score-ordered true/false positive flags.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Per-class AP of upright boxes against the upright hulls of the
/// ground-truth instances. Classes without ground truth are skipped.
pub fn class_average_precision(
    boxes: &[RotatedBox],
    gt: &InstanceMask,
    iou_threshold: f64,
) -> BTreeMap<BrickClass, f64> {
    let gt_upright: BTreeMap<u16, RotatedBox> =
        gt.instance_boxes().into_iter().map(|(id, r)| (id, upright_bbox(&r))).collect();
    let mut out = BTreeMap::new();
    for class in BrickClass::ALL {
        let gts: Vec<(u16, RotatedBox)> =
            gt_upright.iter().filter(|(_, r)| r.class_id == class).map(|(&i, r)| (i, *r)).collect();
        if gts.is_empty() {
            continue;
        }
        let dets: Vec<RotatedBox> = boxes.iter().filter(|b| b.class_id == class).copied().collect();
        let mut matched = vec![false; gts.len()];
        let flags: Vec<bool> = order_by_score(&dets)
            .into_iter()
            .map(|i| {
                let best = gts.iter().enumerate().map(|(j, (_, g))| (j, rotated_iou(&dets[i], g))).fold(
                    None,
                    |acc: Option<(usize, f64)>, (j, iou)| match acc {
                        Some((_, b)) if b >= iou => acc,
                        _ => Some((j, iou)),
                    },
                );
                match best {
                    Some((j, iou)) if iou >= iou_threshold && !matched[j] => {
                        matched[j] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        out.insert(class, average_precision(&flags, gts.len()));
    }
    out
}

/// Mean of the per-class APs. A frame without ground truth scores 1 when
/// there are no predictions and 0 otherwise.
pub fn map_score(boxes: &[RotatedBox], gt: &InstanceMask, iou_threshold: f64) -> f64 {
    let per_class = class_average_precision(boxes, gt, iou_threshold);
    if per_class.is_empty() {
        return if boxes.is_empty() { 1.0 } else { 0.0 };
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Rotated,
    Upright,
}

/// Full report for one frame. In upright mode the predictions are replaced
/// by their upright hulls before scoring and mAP is included.
pub fn evaluate(
    boxes: &[RotatedBox],
    gt: &InstanceMask,
    mode: EvalMode,
    rule: MatchRule,
    iou_threshold: f64,
) -> EvalReport {
    let boxes: Vec<RotatedBox> = match mode {
        EvalMode::Rotated => boxes.to_vec(),
        EvalMode::Upright => boxes.iter().map(upright_bbox).collect(),
    };
    let rects = gt.instance_boxes();
    let claims = match_detections(&boxes, &rects, rule);
    let aps = match mode {
        EvalMode::Upright => Some(class_average_precision(&boxes, gt, iou_threshold)),
        EvalMode::Rotated => None,
    };

    let mut per_class = BTreeMap::new();
    for class in BrickClass::ALL {
        let cls_boxes: Vec<RotatedBox> = boxes.iter().filter(|b| b.class_id == class).copied().collect();
        let total = rects.values().filter(|r| r.class_id == class).count();
        if cls_boxes.is_empty() && total == 0 {
            continue;
        }
        let pixels = pixel_counts(&cls_boxes, gt);
        let detected = claims.iter().flatten().filter(|id| rects[id].class_id == class).count();
        let bricks = RecallCounts { detected, total };
        per_class.insert(
            class,
            ClassReport {
                precision: pixels.precision(),
                recall: bricks.recall(),
                ap: aps.as_ref().and_then(|a| a.get(&class).copied()),
                pixels,
                bricks,
            },
        );
    }
    let pixels = pixel_counts(&boxes, gt);
    let bricks = RecallCounts { detected: claims.iter().flatten().count(), total: rects.len() };
    let map = aps.map(|a| {
        if a.is_empty() {
            if boxes.is_empty() {
                1.0
            } else {
                0.0
            }
        } else {
            a.values().sum::<f64>() / a.len() as f64
        }
    });
    EvalReport { precision: pixels.precision(), recall: bricks.recall(), map, per_class, pixels, bricks }
}

/// Precision of ideal rotated detections versus their upright hulls, one
/// pair per scene. The ideal detections are the ground-truth min-area rects.
pub fn compare_rotated_vs_upright(scenes: &[InstanceMask]) -> Vec<(Option<f64>, Option<f64>)> {
    scenes
        .iter()
        .map(|gt| {
            let rot: Vec<RotatedBox> = gt.instance_boxes().into_values().collect();
            let up: Vec<RotatedBox> = rot.iter().map(upright_bbox).collect();
            (pixel_precision(&rot, gt), pixel_precision(&up, gt))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(width: u32, height: u32, rects: &[(u16, BrickClass, u32, u32, u32, u32)]) -> InstanceMask {
        let mut labels = vec![0u16; (width * height) as usize];
        let mut classes = BTreeMap::new();
        for &(id, class, u0, v0, w, h) in rects {
            classes.insert(id, class);
            for v in v0..v0 + h {
                for u in u0..u0 + w {
                    labels[(v * width + u) as usize] = id;
                }
            }
        }
        InstanceMask::new(width, height, labels, classes).unwrap()
    }

    fn b(cx: f64, cy: f64, w: f64, h: f64, class: BrickClass, score: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, 0.0, class, score).unwrap()
    }

    #[test]
    fn exact_box_has_unit_precision() {
        let gt = mask_with(64, 48, &[(1, BrickClass::Blue, 10, 10, 20, 8)]);
        let rects = gt.instance_boxes();
        assert_eq!(pixel_precision(&[rects[&1]], &gt), Some(1.0));
    }

    #[test]
    fn doubled_box_has_half_precision() {
        let gt = mask_with(64, 48, &[(1, BrickClass::Blue, 10, 10, 20, 8)]);
        // mask spans x 10..30, y 10..18; double the width
        let big = b(30.0, 14.0, 40.0, 8.0, BrickClass::Blue, 1.0);
        assert_eq!(pixel_precision(&[big], &gt), Some(0.5));
    }

    #[test]
    fn wrong_class_pixels_do_not_count() {
        let gt = mask_with(64, 48, &[(1, BrickClass::Green, 10, 10, 20, 8)]);
        let rects = gt.instance_boxes();
        let wrong = RotatedBox { class_id: BrickClass::Blue, ..rects[&1] };
        assert_eq!(pixel_precision(&[wrong], &gt), Some(0.0));
    }

    #[test]
    fn empty_prediction_precision_is_undefined() {
        let gt = mask_with(16, 16, &[(1, BrickClass::Blue, 1, 1, 4, 4)]);
        assert_eq!(pixel_precision(&[], &gt), None);
    }

    #[test]
    fn recall_cases() {
        let gt = mask_with(
            100,
            60,
            &[
                (1, BrickClass::Green, 10, 10, 20, 8),
                (2, BrickClass::Green, 10, 18, 20, 8),
                (3, BrickClass::Blue, 50, 10, 10, 30),
            ],
        );
        let rects = gt.instance_boxes();
        let exact: Vec<RotatedBox> = rects.values().copied().collect();
        assert_eq!(detection_recall(&exact, &gt, MatchRule::CenterInBox), 1.0);
        assert_eq!(detection_recall(&exact, &gt, MatchRule::Iou { tau: 0.5 }), 1.0);
        assert_eq!(detection_recall(&[], &gt, MatchRule::CenterInBox), 0.0);

        // one box swallowing both touching green bricks
        let merged = b(20.0, 18.0, 20.0, 16.0, BrickClass::Green, 0.9);
        let pair = mask_with(100, 60, &[(1, BrickClass::Green, 10, 10, 20, 8), (2, BrickClass::Green, 10, 18, 20, 8)]);
        assert_eq!(detection_recall(&[merged], &pair, MatchRule::CenterInBox), 0.5);

        let empty = InstanceMask::empty(10, 10);
        assert_eq!(detection_recall(&[], &empty, MatchRule::CenterInBox), 1.0);
    }

    #[test]
    fn hand_computed_average_precision() {
        // scores .9 TP, .8 FP, .7 TP over two ground-truth boxes:
        // recall    0.5  0.5  1.0
        // precision 1.0  0.5  2/3
        // envelope  1.0  2/3  2/3  -> AP = 0.5 * 1 + 0.5 * 2/3
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);

        let gt = mask_with(100, 40, &[(1, BrickClass::Blue, 0, 0, 10, 10), (2, BrickClass::Blue, 50, 20, 10, 10)]);
        let dets = [
            b(5.0, 5.0, 10.0, 10.0, BrickClass::Blue, 0.9),
            b(30.0, 30.0, 10.0, 10.0, BrickClass::Blue, 0.8),
            b(55.0, 25.0, 10.0, 10.0, BrickClass::Blue, 0.7),
        ];
        assert!((map_score(&dets, &gt, 0.5) - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn map_extremes_and_score_scaling() {
        let gt = mask_with(100, 60, &[(1, BrickClass::Blue, 10, 10, 20, 8), (2, BrickClass::Green, 50, 30, 12, 12)]);
        let perfect: Vec<RotatedBox> = gt.instance_boxes().values().map(upright_bbox).collect();
        assert_eq!(map_score(&perfect, &gt, 0.5), 1.0);
        assert_eq!(map_score(&[], &gt, 0.5), 0.0);

        let noisy = vec![
            b(20.0, 14.0, 20.0, 8.0, BrickClass::Blue, 0.3),
            b(70.0, 14.0, 20.0, 8.0, BrickClass::Blue, 0.6),
            b(56.0, 36.0, 12.0, 12.0, BrickClass::Green, 0.5),
            b(20.0, 40.0, 12.0, 12.0, BrickClass::Green, 0.8),
        ];
        let scaled: Vec<RotatedBox> = noisy.iter().map(|x| x.with_score(x.score * 0.5)).collect();
        assert_eq!(map_score(&noisy, &gt, 0.5), map_score(&scaled, &gt, 0.5));
    }

    #[test]
    fn evaluate_report_structure() {
        let gt = mask_with(64, 48, &[(1, BrickClass::Blue, 10, 10, 20, 8)]);
        let rects: Vec<RotatedBox> = gt.instance_boxes().into_values().collect();
        let rot = evaluate(&rects, &gt, EvalMode::Rotated, MatchRule::CenterInBox, 0.5);
        assert_eq!(rot.precision, Some(1.0));
        assert_eq!(rot.recall, 1.0);
        assert_eq!(rot.map, None);
        let up = evaluate(&rects, &gt, EvalMode::Upright, MatchRule::CenterInBox, 0.5);
        assert_eq!(up.map, Some(1.0));
        assert!(up.pixels.object_pixels <= up.pixels.box_pixels);
        assert!(up.bricks.detected <= up.bricks.total);
    }

    #[test]
    fn axis_aligned_scene_has_equal_precision() {
        let gt = mask_with(100, 60, &[(1, BrickClass::Blue, 10, 10, 20, 8), (2, BrickClass::Green, 50, 30, 12, 22)]);
        let pairs = compare_rotated_vs_upright(&[gt]);
        assert_eq!(pairs[0].0, pairs[0].1);
    }
}
