//! Pixel-level calibration and sparsification metrics plus the
//! out-of-distribution segmentation protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segments::mask_components;
use crate::tensor::Tensor;

/// Named scalar metrics with the configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Which heatmap/mode/p produced the scores, e.g. `G_uni_last_p0.5`.
    pub provenance: String,
    pub config: ReportConfig,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsification_points: Option<usize>,
    /// Max score used to normalize raw gradient scores to [0, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization_max: Option<f64>,
}

impl MetricsReport {
    pub fn new(provenance: impl Into<String>, config: ReportConfig) -> Self {
        Self {
            provenance: provenance.into(),
            config,
            metrics: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    /// Flat CSV over several reports: one row per configuration, columns
    /// are the sorted union of metric names.
    pub fn to_csv(reports: &[MetricsReport]) -> String {
        let mut keys: Vec<String> = Vec::new();
        for r in reports {
            for k in r.metrics.keys() {
                if !keys.contains(k) {
                    keys.push(k.clone());
                }
            }
        }
        keys.sort();
        let mut out = String::from("provenance");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in reports {
            out.push_str(&r.provenance);
            for k in &keys {
                out.push(',');
                if let Some(v) = r.metrics.get(k) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Expected calibration error with equal-width bins over [0, 1].
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::UndefinedMetric("ECE of an empty sample".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Dimension(format!(
            "{} confidences vs {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Validation("bin count must be >= 1".into()));
    }
    for &c in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Validation(format!(
                "confidences must lie in [0,1], got {c}"
            )));
        }
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut acc_sum = vec![0.0f64; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        acc_sum[b] += f64::from(ok as u8);
    }
    let n = confidences.len() as f64;
    let mut e = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        e += (nb / n) * ((acc_sum[b] / nb) - (conf_sum[b] / nb)).abs();
    }
    Ok(e)
}

/// Removal fractions of the sparsification protocol: 0, 0.02, ..., 0.98.
pub const SPARSIFICATION_POINTS: usize = 50;

fn sorted_desc_by(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .partial_cmp(&keys[a])
            .expect("finite keys")
            .then(a.cmp(&b))
    });
    order
}

/// Mean of the remaining errors after removing the top `k` indices of
/// `order`, for each removal count in `ks`.
fn remaining_means(errors: &[f64], order: &[usize], ks: &[usize]) -> Vec<f64> {
    let n = errors.len();
    // Prefix sums over the removal order.
    let mut prefix = vec![0.0f64; n + 1];
    for (i, &idx) in order.iter().enumerate() {
        prefix[i + 1] = prefix[i] + errors[idx];
    }
    let total = prefix[n];
    ks.iter()
        .map(|&k| {
            let remaining = n - k;
            if remaining == 0 {
                0.0
            } else {
                (total - prefix[k]) / remaining as f64
            }
        })
        .collect()
}

/// Sparsification curves: the method curve removes pixels by descending
/// uncertainty, the oracle curve by descending true Brier error; both are
/// normalized by the full-sample mean error.
pub fn sparsification_curves(
    uncertainties: &[f64],
    brier_errors: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if uncertainties.len() != brier_errors.len() {
        return Err(Error::Dimension(format!(
            "{} uncertainties vs {} errors",
            uncertainties.len(),
            brier_errors.len()
        )));
    }
    if uncertainties.is_empty() {
        return Err(Error::UndefinedMetric("sparsification of empty input".into()));
    }
    let n = uncertainties.len();
    let fractions: Vec<f64> = (0..SPARSIFICATION_POINTS).map(|i| i as f64 * 0.02).collect();
    let ks: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * n as f64).round() as usize).min(n))
        .collect();
    let method_order = sorted_desc_by(uncertainties);
    let oracle_order = sorted_desc_by(brier_errors);
    let mut method = remaining_means(brier_errors, &method_order, &ks);
    let mut oracle = remaining_means(brier_errors, &oracle_order, &ks);
    let base = method[0];
    if base > 0.0 {
        for v in method.iter_mut().chain(oracle.iter_mut()) {
            *v /= base;
        }
    }
    Ok((fractions, method, oracle))
}

/// Area under the sparsification error curve (method minus oracle),
/// integrated with the trapezoid rule over the removal fractions.
pub fn ause(uncertainties: &[f64], brier_errors: &[f64]) -> Result<f64> {
    let (fractions, method, oracle) = sparsification_curves(uncertainties, brier_errors)?;
    let mut area = 0.0;
    for i in 1..fractions.len() {
        let df = fractions[i] - fractions[i - 1];
        let a = method[i - 1] - oracle[i - 1];
        let b = method[i] - oracle[i];
        area += 0.5 * (a + b) * df;
    }
    Ok(area)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(Error::UndefinedMetric("no positive labels".into()));
    }
    if neg == 0 {
        return Err(Error::UndefinedMetric("no negative labels".into()));
    }
    Ok((pos, neg))
}

/// Area under the precision-recall curve via the exact step-wise average
/// precision sum over the descending sweep of unique scores. OoD pixels are
/// the positive class.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let order = sorted_desc_by(scores);
    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall_prev = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        // Advance over one group of tied scores.
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// False positive rate at the largest threshold whose true positive rate
/// reaches `level` (detections are `score >= threshold`).
pub fn fpr_at_tpr(scores: &[f64], labels: &[bool], level: f64) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let order = sorted_desc_by(scores);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if tp as f64 / pos as f64 >= level {
            return Ok(fp as f64 / neg as f64);
        }
        i = j + 1;
    }
    // level <= 1 is always reached once every positive is included.
    Ok(fp as f64 / neg as f64)
}

/// `fpr_at_tpr` at the conventional 0.95 operating point.
pub fn fpr_at_95_tpr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    fpr_at_tpr(scores, labels, 0.95)
}

/// Threshold grid 0.25, 0.30, ..., 0.75.
pub fn default_ood_thresholds() -> Vec<f64> {
    (0..11).map(|i| 0.25 + 0.05 * i as f64).collect()
}

/// Per-threshold component counts and means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodThresholdRow {
    pub threshold: f64,
    pub mean_siou: f64,
    pub mean_ppv: f64,
    pub f1: f64,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
}

/// Component-level OoD metrics averaged over the threshold grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OodSegmentMetrics {
    pub siou_bar: f64,
    pub ppv_bar: f64,
    pub f1_bar: f64,
    pub per_threshold: Vec<OodThresholdRow>,
}

/// Component-level OoD segmentation protocol.
///
/// Scores must already be normalized to [0, 1]. Per threshold `t` the score
/// map binarizes as `score >= t`; 8-connected components are extracted from
/// the prediction and the ground-truth mask. Each ground-truth component `A`
/// is matched with the union of predicted components intersecting it; its
/// adjusted IoU divides by the union minus predicted pixels that belong to
/// *other* ground-truth components, and counts as TP when sIoU > t. Each
/// predicted component `Q` carries `PPV = |Q ∩ gt| / |Q|` and counts as FP
/// when PPV <= t. `F1 = 2TP / (2TP + FN + FP)`. Means over components are
/// averaged over the grid.
pub fn ood_segment_metrics(
    score_map: &Tensor,
    ood_gt_mask: &[bool],
    thresholds: &[f64],
) -> Result<OodSegmentMetrics> {
    if score_map.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "score map must be H x W, got {:?}",
            score_map.shape()
        )));
    }
    let (h, w) = (score_map.shape()[0], score_map.shape()[1]);
    if ood_gt_mask.len() != h * w {
        return Err(Error::Dimension(format!(
            "gt mask has {} pixels, expected {}",
            ood_gt_mask.len(),
            h * w
        )));
    }
    if !ood_gt_mask.iter().any(|&m| m) {
        return Err(Error::UndefinedMetric("empty OoD ground-truth mask".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Validation("threshold grid must be non-empty".into()));
    }
    let gt_comps = mask_components(ood_gt_mask, h, w);
    let mut gt_comp_of = vec![usize::MAX; h * w];
    for (gi, comp) in gt_comps.iter().enumerate() {
        for &px in comp {
            gt_comp_of[px] = gi;
        }
    }

    let mut rows = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let pred_mask: Vec<bool> = score_map.data().iter().map(|&s| s >= t).collect();
        let pred_comps = mask_components(&pred_mask, h, w);
        let mut pred_comp_of = vec![usize::MAX; h * w];
        for (qi, comp) in pred_comps.iter().enumerate() {
            for &px in comp {
                pred_comp_of[px] = qi;
            }
        }

        let mut tp = 0usize;
        let mut fn_ = 0usize;
        let mut siou_sum = 0.0f64;
        for (gi, comp) in gt_comps.iter().enumerate() {
            // Predicted components touching this gt component.
            let mut touching: Vec<usize> = comp
                .iter()
                .filter_map(|&px| {
                    let q = pred_comp_of[px];
                    (q != usize::MAX).then_some(q)
                })
                .collect();
            touching.sort_unstable();
            touching.dedup();
            let inter = comp.iter().filter(|&&px| pred_mask[px]).count();
            let mut matched = 0usize; // |Â|
            let mut stolen = 0usize; // |X|: Â pixels inside other gt comps
            for &q in &touching {
                matched += pred_comps[q].len();
                for &px in &pred_comps[q] {
                    let g = gt_comp_of[px];
                    if g != usize::MAX && g != gi {
                        stolen += 1;
                    }
                }
            }
            let denom = comp.len() + matched - inter - stolen;
            let siou = inter as f64 / denom as f64;
            siou_sum += siou;
            if siou > t {
                tp += 1;
            } else {
                fn_ += 1;
            }
        }
        let mean_siou = siou_sum / gt_comps.len() as f64;

        let mut fp = 0usize;
        let mut ppv_sum = 0.0f64;
        for comp in &pred_comps {
            let hit = comp.iter().filter(|&&px| ood_gt_mask[px]).count();
            let ppv = hit as f64 / comp.len() as f64;
            ppv_sum += ppv;
            if ppv <= t {
                fp += 1;
            }
        }
        let mean_ppv = if pred_comps.is_empty() {
            0.0
        } else {
            ppv_sum / pred_comps.len() as f64
        };
        let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fn_ as f64 + fp as f64);
        rows.push(OodThresholdRow {
            threshold: t,
            mean_siou,
            mean_ppv,
            f1,
            tp,
            fn_,
            fp,
        });
    }
    let m = rows.len() as f64;
    Ok(OodSegmentMetrics {
        siou_bar: rows.iter().map(|r| r.mean_siou).sum::<f64>() / m,
        ppv_bar: rows.iter().map(|r| r.mean_ppv).sum::<f64>() / m,
        f1_bar: rows.iter().map(|r| r.f1).sum::<f64>() / m,
        per_threshold: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    // Independent O(n^2) sweeps used as oracles for the ranking metrics.
    pub(crate) fn auprc_brute(scores: &[f64], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count();
        let mut uniq: Vec<f64> = scores.to_vec();
        uniq.sort_by(|a, b| b.partial_cmp(a).unwrap());
        uniq.dedup();
        let mut ap = 0.0;
        let mut recall_prev = 0.0;
        for &t in &uniq {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= t && **l)
                .count();
            let det = scores.iter().filter(|&&s| s >= t).count();
            let recall = tp as f64 / pos as f64;
            let precision = tp as f64 / det as f64;
            ap += (recall - recall_prev) * precision;
            recall_prev = recall;
        }
        ap
    }

    pub(crate) fn fpr95_brute(scores: &[f64], labels: &[bool]) -> f64 {
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        let mut uniq: Vec<f64> = scores.to_vec();
        uniq.sort_by(|a, b| b.partial_cmp(a).unwrap());
        uniq.dedup();
        for &t in &uniq {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(s, l)| **s >= t && **l)
                .count();
            if tp as f64 / pos as f64 >= 0.95 {
                let fp = scores
                    .iter()
                    .zip(labels)
                    .filter(|(s, l)| **s >= t && !**l)
                    .count();
                return fp as f64 / neg as f64;
            }
        }
        unreachable!("TPR reaches 1.0 at the smallest threshold")
    }

    #[test]
    fn ece_single_prediction_extremes() {
        assert_eq!(ece(&[1.0], &[true], 10).unwrap(), 0.0);
        assert_eq!(ece(&[1.0], &[false], 10).unwrap(), 1.0);
    }

    #[test]
    fn ece_empty_rejected() {
        assert!(matches!(
            ece(&[], &[], 10),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ece_calibrated_sampler_small() {
        let mut rng = SplitMix64::new(99);
        let n = 100_000;
        let mut confs = Vec::with_capacity(n);
        let mut correct = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.next_unit();
            confs.push(c);
            correct.push(rng.next_unit() < c);
        }
        let e = ece(&confs, &correct, 10).unwrap();
        assert!(e < 0.01, "ECE = {e}");
    }

    #[test]
    fn ece_zero_when_bins_exact() {
        // Two bins, each with accuracy equal to mean confidence.
        let confs = vec![0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75];
        let correct = vec![true, false, false, false, true, true, true, false];
        let e = ece(&confs, &correct, 2).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn ause_oracle_ordering_is_zero() {
        let mut rng = SplitMix64::new(3);
        let errors: Vec<f64> = (0..500).map(|_| rng.next_unit()).collect();
        let a = ause(&errors, &errors).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn ause_anti_oracle_positive_and_random_between() {
        let mut rng = SplitMix64::new(4);
        let errors: Vec<f64> = (0..500).map(|_| rng.next_unit()).collect();
        let anti: Vec<f64> = errors.iter().map(|e| -e).collect();
        let worst = ause(&anti, &errors).unwrap();
        assert!(worst > 0.0);
        let random: Vec<f64> = (0..500).map(|_| rng.next_unit()).collect();
        let mid = ause(&random, &errors).unwrap();
        assert!(mid > 0.0 && mid < worst, "0 < {mid} < {worst}");
    }

    #[test]
    fn auprc_hand_cases() {
        // Perfect ranking.
        assert_eq!(
            auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(),
            1.0
        );
        // Hand sweep: 0.5*0.5 + 0.5*(2/3).
        let v = auprc(&[0.9, 0.8, 0.1], &[false, true, true]).unwrap();
        assert!((v - (0.25 + 1.0 / 3.0)).abs() < 1e-12);
        assert!(matches!(
            auprc(&[0.1, 0.2], &[false, false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn fpr95_hand_case() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(fpr_at_95_tpr(&scores, &labels).unwrap(), 0.0);
    }

    #[test]
    fn ranking_metrics_match_brute_force_exactly() {
        let mut rng = SplitMix64::new(2024);
        for case in 0..50 {
            let n = 20 + (rng.next_u64() % 200) as usize;
            // Quantized scores produce plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.next_unit() * 10.0).floor() / 10.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.next_unit() < 0.4).collect();
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            let a = auprc(&scores, &labels).unwrap();
            let b = auprc_brute(&scores, &labels);
            assert_eq!(a, b, "case {case}: auprc {a} vs brute {b}");
            let f = fpr_at_95_tpr(&scores, &labels).unwrap();
            let g = fpr95_brute(&scores, &labels);
            assert_eq!(f, g, "case {case}: fpr95 {f} vs brute {g}");
        }
    }

    #[test]
    fn ranking_metrics_invariant_under_monotone_transform() {
        let mut rng = SplitMix64::new(8);
        let scores: Vec<f64> = (0..300).map(|_| rng.next_sym()).collect();
        let labels: Vec<bool> = (0..300).map(|_| rng.next_unit() < 0.3).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).tanh() * 10.0).collect();
        assert!(
            (auprc(&scores, &labels).unwrap() - auprc(&transformed, &labels).unwrap()).abs()
                < 1e-12
        );
        assert_eq!(
            fpr_at_95_tpr(&scores, &labels).unwrap(),
            fpr_at_95_tpr(&transformed, &labels).unwrap()
        );
    }

    fn square_mask(h: usize, w: usize, a0: usize, b0: usize, side: usize) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for a in a0..a0 + side {
            for b in b0..b0 + side {
                m[a * w + b] = true;
            }
        }
        m
    }

    #[test]
    fn ood_exact_match_all_ones() {
        let (h, w) = (8, 8);
        let gt = square_mask(h, w, 2, 2, 4);
        let scores: Vec<f64> = gt.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let map = Tensor::from_vec(vec![h, w], scores).unwrap();
        let m = ood_segment_metrics(&map, &gt, &default_ood_thresholds()).unwrap();
        assert_eq!(m.siou_bar, 1.0);
        assert_eq!(m.ppv_bar, 1.0);
        assert_eq!(m.f1_bar, 1.0);
    }

    #[test]
    fn ood_empty_prediction_all_zero() {
        let (h, w) = (8, 8);
        let gt = square_mask(h, w, 2, 2, 4);
        let map = Tensor::zeros(vec![h, w]).unwrap();
        let m = ood_segment_metrics(&map, &gt, &default_ood_thresholds()).unwrap();
        assert_eq!(m.siou_bar, 0.0);
        assert_eq!(m.f1_bar, 0.0);
    }

    #[test]
    fn ood_empty_gt_rejected() {
        let map = Tensor::zeros(vec![4, 4]).unwrap();
        assert!(matches!(
            ood_segment_metrics(&map, &vec![false; 16], &default_ood_thresholds()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ood_shifted_square_hand_table() {
        // gt 4x4 at (0,0); prediction 4x4 shifted down by 2: overlap 8,
        // union 24, sIoU 1/3 at every threshold; PPV = 0.5; TP only for
        // t < 1/3; FP once PPV <= t.
        let (h, w) = (12, 12);
        let gt = square_mask(h, w, 0, 0, 4);
        let pred = square_mask(h, w, 2, 0, 4);
        let scores: Vec<f64> = pred.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let map = Tensor::from_vec(vec![h, w], scores).unwrap();
        let grid = default_ood_thresholds();
        let m = ood_segment_metrics(&map, &gt, &grid).unwrap();
        for row in &m.per_threshold {
            assert_eq!(row.mean_siou, 8.0 / 24.0, "t = {}", row.threshold);
            assert_eq!(row.mean_ppv, 0.5);
            let expect_tp = 1.0 / 3.0 > row.threshold;
            assert_eq!(row.tp, usize::from(expect_tp));
            assert_eq!(row.fn_, usize::from(!expect_tp));
            let expect_fp = 0.5 <= row.threshold;
            assert_eq!(row.fp, usize::from(expect_fp));
        }
        // Hand-computed 11-threshold averages (mean taken the same way:
        // sum of 11 per-threshold values, then divide).
        let want_siou = (0..11).map(|_| 8.0 / 24.0).sum::<f64>() / 11.0;
        assert_eq!(m.siou_bar, want_siou);
        assert_eq!(m.ppv_bar, 0.5);
        let f1s: Vec<f64> = grid
            .iter()
            .map(|&t| {
                let tp = f64::from(1.0 / 3.0 > t);
                let fn_ = 1.0 - tp;
                let fp = f64::from(0.5 <= t);
                2.0 * tp / (2.0 * tp + fn_ + fp)
            })
            .collect();
        let want = f1s.iter().sum::<f64>() / f1s.len() as f64;
        assert_eq!(m.f1_bar, want);
    }

    #[test]
    fn ood_outputs_in_unit_interval() {
        let mut rng = SplitMix64::new(17);
        let (h, w) = (10, 10);
        let scores: Vec<f64> = (0..h * w).map(|_| rng.next_unit()).collect();
        let mut gt = vec![false; h * w];
        for px in 0..h * w {
            gt[px] = rng.next_unit() < 0.2;
        }
        if !gt.iter().any(|&g| g) {
            gt[0] = true;
        }
        let map = Tensor::from_vec(vec![h, w], scores).unwrap();
        let m = ood_segment_metrics(&map, &gt, &default_ood_thresholds()).unwrap();
        for v in [m.siou_bar, m.ppv_bar, m.f1_bar] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn report_csv_layout() {
        let mut r1 = MetricsReport::new("G_uni_last_p0.5", ReportConfig::default());
        r1.insert("auprc", 0.75);
        r1.insert("fpr95", 0.1);
        let mut r2 = MetricsReport::new("baseline_max_softmax", ReportConfig::default());
        r2.insert("auprc", 0.5);
        let csv = MetricsReport::to_csv(&[r1, r2]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "provenance,auprc,fpr95");
        assert_eq!(lines[1], "G_uni_last_p0.5,0.75,0.1");
        assert_eq!(lines[2], "baseline_max_softmax,0.5,");
    }
}
