//! OKS-based keypoint evaluation: greedy matching, 101-point interpolated
//! AP/AR over OKS thresholds 0.50:0.05:0.95, area splits, and per-category
//! balanced AP/AR over PCM cluster labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::crop_and_normalize;
use crate::limbs::{COCO_SIGMAS, NUM_JOINTS};
use crate::pcm::{assign_cluster, GmmModel};
use crate::types::{Pose, PersonInstance};

pub const MAX_DETS_PER_IMAGE: usize = 20;
pub const MEDIUM_RANGE: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const LARGE_RANGE: (f64, f64) = (96.0 * 96.0, f64::INFINITY);
const ALL_RANGE: (f64, f64) = (0.0, f64::INFINITY);

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ground truth has no labeled keypoints")]
    NoLabeledKeypoints,
    #[error("no ground truth instances")]
    NoGroundTruth,
    #[error("prediction {index}: {message}")]
    BadPrediction { index: usize, message: String },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// 101 recall sample points 0.00, 0.01, ..., 1.00.
pub fn recall_points() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub keypoints: [[f64; 2]; NUM_JOINTS],
    pub score: f64,
}

impl Prediction {
    pub fn from_pose(image_id: u64, pose: &Pose, score: f64) -> Prediction {
        let mut keypoints = [[0.0; 2]; NUM_JOINTS];
        for (k, j) in keypoints.iter_mut().zip(&pose.joints) {
            *k = [j.x, j.y];
        }
        Prediction {
            image_id,
            keypoints,
            score,
        }
    }

    /// Area of the keypoint bounding box.
    pub fn area(&self) -> f64 {
        let xs = self.keypoints.iter().map(|p| p[0]);
        let ys = self.keypoints.iter().map(|p| p[1]);
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        (x1 - x0) * (y1 - y0)
    }
}

/// COCO results entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultEntry {
    pub image_id: u64,
    #[serde(default = "one")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

fn one() -> u64 {
    1
}

impl ResultEntry {
    pub fn to_prediction(&self, index: usize) -> Result<Prediction, MetricsError> {
        let bad = |message: String| MetricsError::BadPrediction { index, message };
        if self.keypoints.len() != 3 * NUM_JOINTS {
            return Err(bad(format!("expected {} keypoint values, got {}", 3 * NUM_JOINTS, self.keypoints.len())));
        }
        if !self.score.is_finite() {
            return Err(bad("score is not finite".into()));
        }
        let mut keypoints = [[0.0; 2]; NUM_JOINTS];
        for (j, k) in keypoints.iter_mut().enumerate() {
            *k = [self.keypoints[3 * j], self.keypoints[3 * j + 1]];
            if !(k[0].is_finite() && k[1].is_finite()) {
                return Err(bad(format!("keypoint {j} is not finite")));
            }
        }
        Ok(Prediction {
            image_id: self.image_id,
            keypoints,
            score: self.score,
        })
    }

    pub fn from_prediction(p: &Prediction) -> ResultEntry {
        ResultEntry {
            image_id: p.image_id,
            category_id: 1,
            keypoints: p.keypoints.iter().flat_map(|k| [k[0], k[1], 1.0]).collect(),
            score: p.score,
        }
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, MetricsError> {
    let err = |message: String| MetricsError::File {
        path: path.display().to_string(),
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let entries: Vec<ResultEntry> = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
    entries.iter().enumerate().map(|(i, e)| e.to_prediction(i)).collect()
}

// ---------------------------------------------------------------------------
// Similarity and matching

/// Mean over labeled GT keypoints of `exp(-d^2 / (2 area k^2))`, `k = 2 sigma`.
pub fn oks(pred: &[[f64; 2]; NUM_JOINTS], gt: &Pose, area: f64, sigmas: &[f64; NUM_JOINTS]) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (j, kp) in gt.joints.iter().enumerate() {
        if !kp.vis.is_labeled() {
            continue;
        }
        let k = 2.0 * sigmas[j];
        let d2 = (pred[j][0] - kp.x).powi(2) + (pred[j][1] - kp.y).powi(2);
        sum += (-d2 / (2.0 * area * k * k)).exp();
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoLabeledKeypoints);
    }
    Ok(sum / n as f64)
}

/// Per-image matching outcome. Indices refer to the slices passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Prediction order used (descending score, stable).
    pub order: Vec<usize>,
    pub pred_to_gt: Vec<Option<usize>>,
    pub gt_to_pred: Vec<Option<usize>>,
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching for one image: predictions in descending score order each
/// take the unmatched GT with the highest OKS at or above `threshold`.
/// Non-ignored GTs are preferred over ignored ones; OKS ties go to the lower
/// GT index.
pub fn match_with_ignore(ious: &[Vec<f64>], scores: &[f64], gt_ignore: &[bool], threshold: f64) -> Matching {
    let n_gt = gt_ignore.len();
    // non-ignored GTs first, stable
    let mut gt_order: Vec<usize> = (0..n_gt).filter(|&g| !gt_ignore[g]).collect();
    gt_order.extend((0..n_gt).filter(|&g| gt_ignore[g]));
    let order = score_order(scores);
    let mut pred_to_gt = vec![None; scores.len()];
    let mut gt_to_pred = vec![None; n_gt];
    for &d in &order {
        let mut best = threshold.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for &g in &gt_order {
            if gt_to_pred[g].is_some() {
                continue;
            }
            if let Some(mg) = m {
                if !gt_ignore[mg] && gt_ignore[g] {
                    break;
                }
            }
            if ious[d][g] < best {
                continue;
            }
            if m.is_some() && ious[d][g] == best {
                continue;
            }
            best = ious[d][g];
            m = Some(g);
        }
        if let Some(g) = m {
            pred_to_gt[d] = Some(g);
            gt_to_pred[g] = Some(d);
        }
    }
    Matching {
        order,
        pred_to_gt,
        gt_to_pred,
    }
}

pub fn match_detections(preds: &[Prediction], gts: &[PersonInstance], threshold: f64, sigmas: &[f64; NUM_JOINTS]) -> Result<Matching, MetricsError> {
    let ious = oks_matrix(preds, gts, sigmas)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    Ok(match_with_ignore(&ious, &scores, &vec![false; gts.len()], threshold))
}

fn oks_matrix(preds: &[Prediction], gts: &[PersonInstance], sigmas: &[f64; NUM_JOINTS]) -> Result<Vec<Vec<f64>>, MetricsError> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| oks(&p.keypoints, &g.pose, g.area, sigmas)).collect())
        .collect()
}

// ---------------------------------------------------------------------------
// Accumulation

/// One ranked detection at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredOutcome {
    pub score: f64,
    pub tp: bool,
}

/// Precision/recall summary at one threshold. `None` when there are no
/// non-ignored ground truths.
pub fn ap_from_outcomes(outcomes: &[ScoredOutcome], n_positive: usize) -> Option<(f64, f64)> {
    if n_positive == 0 {
        return None;
    }
    let scores: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    let order = score_order(&scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in &order {
        if outcomes[i].tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_positive as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in recall_points() {
        let idx = recall.partition_point(|&v| v < r);
        sum += precision.get(idx).copied().unwrap_or(0.0);
    }
    let ap = sum / 101.0;
    let ar = recall.last().copied().unwrap_or(0.0);
    Some((ap, ar))
}

/// Per-threshold outcome lists for one evaluation slice.
struct Slice {
    outcomes: Vec<Vec<ScoredOutcome>>,
    positives: usize,
}

struct ImageMatches {
    preds: Vec<usize>,
    gts: Vec<usize>,
    ious: Vec<Vec<f64>>,
}

struct Evaluator<'a> {
    preds: &'a [Prediction],
    gts: &'a [PersonInstance],
    images: Vec<ImageMatches>,
    thresholds: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    fn new(preds: &'a [Prediction], gts: &'a [PersonInstance], sigmas: &[f64; NUM_JOINTS]) -> Result<Self, MetricsError> {
        let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, g) in gts.iter().enumerate() {
            by_image.entry(g.image_id).or_default().1.push(i);
        }
        for (i, p) in preds.iter().enumerate() {
            by_image.entry(p.image_id).or_default().0.push(i);
        }
        let mut images = Vec::with_capacity(by_image.len());
        for (_, (mut pi, gi)) in by_image {
            let scores: Vec<f64> = pi.iter().map(|&i| preds[i].score).collect();
            let order = score_order(&scores);
            pi = order.into_iter().take(MAX_DETS_PER_IMAGE).map(|k| pi[k]).collect();
            let ious = pi
                .iter()
                .map(|&p| {
                    gi.iter()
                        .map(|&g| oks(&preds[p].keypoints, &gts[g].pose, gts[g].area, sigmas))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            images.push(ImageMatches { preds: pi, gts: gi, ious });
        }
        Ok(Self {
            preds,
            gts,
            images,
            thresholds: oks_thresholds(),
        })
    }

    /// COCO-style evaluation restricted to GT areas in `range`.
    fn area_slice(&self, range: (f64, f64)) -> Slice {
        let in_range = |a: f64| a > range.0 && a <= range.1 || (range.0 == 0.0 && a == 0.0);
        let mut outcomes = vec![Vec::new(); self.thresholds.len()];
        let mut positives = 0;
        for im in &self.images {
            let gt_ignore: Vec<bool> = im.gts.iter().map(|&g| !in_range(self.gts[g].area)).collect();
            positives += gt_ignore.iter().filter(|&&i| !i).count();
            let scores: Vec<f64> = im.preds.iter().map(|&p| self.preds[p].score).collect();
            for (t, &thr) in self.thresholds.iter().enumerate() {
                let m = match_with_ignore(&im.ious, &scores, &gt_ignore, thr);
                for (d, &p) in im.preds.iter().enumerate() {
                    let ignored = match m.pred_to_gt[d] {
                        Some(g) => gt_ignore[g],
                        None => !in_range(self.preds[p].area()),
                    };
                    if !ignored {
                        outcomes[t].push(ScoredOutcome {
                            score: scores[d],
                            tp: m.pred_to_gt[d].is_some(),
                        });
                    }
                }
            }
        }
        Slice { outcomes, positives }
    }

    /// Label-blind matching over all GTs, then restricted to category `c`:
    /// predictions matched to other-category GTs are ignored.
    fn category_slice(&self, labels: &[usize], c: usize) -> Slice {
        let mut outcomes = vec![Vec::new(); self.thresholds.len()];
        let mut positives = 0;
        for im in &self.images {
            positives += im.gts.iter().filter(|&&g| labels[g] == c).count();
            let scores: Vec<f64> = im.preds.iter().map(|&p| self.preds[p].score).collect();
            let no_ignore = vec![false; im.gts.len()];
            for (t, &thr) in self.thresholds.iter().enumerate() {
                let m = match_with_ignore(&im.ious, &scores, &no_ignore, thr);
                for d in 0..im.preds.len() {
                    match m.pred_to_gt[d] {
                        Some(g) if labels[im.gts[g]] != c => {}
                        matched => outcomes[t].push(ScoredOutcome {
                            score: scores[d],
                            tp: matched.is_some(),
                        }),
                    }
                }
            }
        }
        Slice { outcomes, positives }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    /// AP at each OKS threshold.
    pub per_threshold: Option<[f64; 10]>,
}

fn summarize(slice: &Slice) -> SliceSummary {
    let per: Vec<Option<(f64, f64)>> = slice
        .outcomes
        .iter()
        .map(|o| ap_from_outcomes(o, slice.positives))
        .collect();
    if per.iter().any(|p| p.is_none()) {
        return SliceSummary {
            ap: None,
            ar: None,
            per_threshold: None,
        };
    }
    let per: Vec<(f64, f64)> = per.into_iter().map(|p| p.unwrap()).collect();
    let mut arr = [0.0; 10];
    for (a, p) in arr.iter_mut().zip(&per) {
        *a = p.0;
    }
    SliceSummary {
        ap: Some(per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64),
        ar: Some(per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64),
        per_threshold: Some(arr),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: usize,
    pub count: usize,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
    pub ar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar: f64,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub per_category: Vec<CategoryRow>,
    pub ap_bal: Option<f64>,
    pub ar_bal: Option<f64>,
}

/// Standard AP/AR fields; category fields are left empty.
pub fn average_precision(preds: &[Prediction], gts: &[PersonInstance], sigmas: &[f64; NUM_JOINTS]) -> Result<EvalReport, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let ev = Evaluator::new(preds, gts, sigmas)?;
    let all = summarize(&ev.area_slice(ALL_RANGE));
    let per = all.per_threshold.ok_or(MetricsError::NoGroundTruth)?;
    Ok(EvalReport {
        ap: all.ap.unwrap(),
        ap50: per[0],
        ap75: per[5],
        ap_medium: summarize(&ev.area_slice(MEDIUM_RANGE)).ap,
        ap_large: summarize(&ev.area_slice(LARGE_RANGE)).ap,
        ar: all.ar.unwrap(),
        num_gt: gts.len(),
        num_predictions: preds.len(),
        per_category: Vec::new(),
        ap_bal: None,
        ar_bal: None,
    })
}

/// Per-category table and balanced means, given a category label per GT.
pub fn balanced_from_labels(
    preds: &[Prediction],
    gts: &[PersonInstance],
    labels: &[usize],
    n_categories: usize,
    sigmas: &[f64; NUM_JOINTS],
) -> Result<(Option<f64>, Option<f64>, Vec<CategoryRow>), MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let ev = Evaluator::new(preds, gts, sigmas)?;
    let mut rows = Vec::with_capacity(n_categories);
    for c in 0..n_categories {
        let s = summarize(&ev.category_slice(labels, c));
        rows.push(CategoryRow {
            category: c,
            count: labels.iter().filter(|&&l| l == c).count(),
            ap: s.ap,
            ar: s.ar,
        });
    }
    let present: Vec<&CategoryRow> = rows.iter().filter(|r| r.ap.is_some()).collect();
    let mean = |f: &dyn Fn(&CategoryRow) -> f64| {
        (!present.is_empty()).then(|| present.iter().map(|r| f(r)).sum::<f64>() / present.len() as f64)
    };
    let ap_bal = mean(&|r| r.ap.unwrap());
    let ar_bal = mean(&|r| r.ar.unwrap());
    Ok((ap_bal, ar_bal, rows))
}

/// PCM hard label of every GT.
pub fn gt_categories(gts: &[PersonInstance], model: &GmmModel) -> Result<Vec<usize>, String> {
    gts.iter()
        .map(|g| {
            let pose = crop_and_normalize(g).map_err(|e| e.to_string())?;
            assign_cluster(model, &pose).map_err(|e| e.to_string())
        })
        .collect()
}

pub fn balanced_ap(
    preds: &[Prediction],
    gts: &[PersonInstance],
    model: &GmmModel,
    sigmas: &[f64; NUM_JOINTS],
) -> Result<(Option<f64>, Option<f64>, Vec<CategoryRow>), MetricsError> {
    let labels = gt_categories(gts, model).map_err(|message| MetricsError::BadPrediction { index: 0, message })?;
    balanced_from_labels(preds, gts, &labels, model.n_components(), sigmas)
}

/// Full report; balanced fields are filled when a model is given.
pub fn evaluate(preds: &[Prediction], gts: &[PersonInstance], model: Option<&GmmModel>, sigmas: &[f64; NUM_JOINTS]) -> Result<EvalReport, MetricsError> {
    let mut report = average_precision(preds, gts, sigmas)?;
    if let Some(m) = model {
        let (ap_bal, ar_bal, rows) = balanced_ap(preds, gts, m, sigmas)?;
        report.ap_bal = ap_bal;
        report.ar_bal = ar_bal;
        report.per_category = rows;
    }
    Ok(report)
}

pub fn default_sigmas() -> [f64; NUM_JOINTS] {
    COCO_SIGMAS
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut s = String::new();
        let rows = [
            ("AP", Some(self.ap)),
            ("AP50", Some(self.ap50)),
            ("AP75", Some(self.ap75)),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
            ("AR", Some(self.ar)),
            ("AP_BAL", self.ap_bal),
            ("AR_BAL", self.ar_bal),
        ];
        for (name, v) in rows {
            let _ = writeln!(s, "{name:<8} {}", f(v));
        }
        if !self.per_category.is_empty() {
            let _ = writeln!(s, "\n{:<8} {:>6} {:>8} {:>8}", "category", "count", "AP", "AR");
            for r in &self.per_category {
                let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>8}", r.category, r.count, f(r.ap), f(r.ar));
            }
        }
        s
    }
}
