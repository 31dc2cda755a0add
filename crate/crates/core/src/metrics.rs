//! Decoding of predicted sequences and the counting and segmentation metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matchloss::{InstanceLabelSet, Mask, PredictedSequence};
use crate::tensor::Real;

/// Values strictly above this count as foreground; scores below it stop
/// decoding.
pub const DECISION: f64 = 0.5;

/// Per-pixel instance ids: 0 is background, `1..=count` are instances in
/// emission order.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteLabeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    /// Confidence of each surviving instance, indexed by `id - 1`.
    pub scores: Vec<f64>,
}

impl DiscreteLabeling {
    pub fn background(height: usize, width: usize) -> Self {
        DiscreteLabeling {
            height,
            width,
            labels: vec![0; height * width],
            count: 0,
            scores: Vec::new(),
        }
    }

    /// Labeling of a ground-truth set; overlapping pixels go to the earlier
    /// mask. Empty masks are skipped.
    pub fn from_labels(gt: &InstanceLabelSet) -> Self {
        let binary: Vec<Vec<bool>> = gt
            .masks
            .iter()
            .map(|m| m.data().iter().map(|&v| v != 0).collect())
            .collect();
        let scores = vec![1.0; binary.len()];
        build(gt.height, gt.width, &binary, &scores)
    }

    pub fn instance(&self, id: usize) -> Mask {
        let data = self
            .labels
            .iter()
            .map(|&l| (l as usize == id) as u8)
            .collect();
        Mask::new(self.height, self.width, data).expect("labeling shape")
    }

    pub fn instances(&self) -> Vec<Mask> {
        (1..=self.count).map(|id| self.instance(id)).collect()
    }

    fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.count + 1];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas
    }
}

fn build(height: usize, width: usize, claims: &[Vec<bool>], scores: &[f64]) -> DiscreteLabeling {
    let mut raw = vec![0u32; height * width];
    for (t, claim) in claims.iter().enumerate() {
        for (px, &on) in raw.iter_mut().zip(claim) {
            if on && *px == 0 {
                *px = t as u32 + 1;
            }
        }
    }
    let mut used = vec![false; claims.len() + 1];
    for &l in &raw {
        used[l as usize] = true;
    }
    let mut remap = vec![0u32; claims.len() + 1];
    let mut kept = Vec::new();
    for t in 1..=claims.len() {
        if used[t] {
            kept.push(scores[t - 1]);
            remap[t] = kept.len() as u32;
        }
    }
    DiscreteLabeling {
        height,
        width,
        labels: raw.into_iter().map(|l| remap[l as usize]).collect(),
        count: kept.len(),
        scores: kept,
    }
}

/// Truncate at the first score below 0.5, give each pixel above 0.5 to the
/// earliest claiming step, drop instances left without pixels and compact
/// the ids.
pub fn decode<T: Real>(
    pred: &PredictedSequence<T>,
    height: usize,
    width: usize,
) -> Result<DiscreteLabeling> {
    pred.validate()?;
    let mut claims = Vec::new();
    let mut scores = Vec::new();
    for (m, &s) in pred.masks.iter().zip(&pred.scores) {
        if s.as_f64() < DECISION {
            break;
        }
        if m.len() != height * width {
            return Err(Error::shape(
                "decode",
                format!("mask {:?} for a {height}x{width} image", m.shape()),
            ));
        }
        claims.push(m.data().iter().map(|&v| v.as_f64() > DECISION).collect());
        scores.push(s.as_f64());
    }
    Ok(build(height, width, &claims, &scores))
}

/// Difference in count, predicted minus true.
pub fn dic(predicted: usize, truth: usize) -> i64 {
    predicted as i64 - truth as i64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary {
                mean: 0.0,
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary {
            mean,
            std: var.sqrt(),
        }
    }
}

/// `(DiC, |DiC|)` summaries over `(predicted, truth)` pairs.
pub fn dic_summary(counts: &[(usize, usize)]) -> (Summary, Summary) {
    let d: Vec<f64> = counts.iter().map(|&(p, t)| dic(p, t) as f64).collect();
    let a: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    (Summary::of(&d), Summary::of(&a))
}

fn dice(inter: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        0.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// `overlap[i][j] = |A_i and B_j|` for instance ids starting at 1.
fn overlaps(a: &DiscreteLabeling, b: &DiscreteLabeling) -> Vec<Vec<usize>> {
    let mut table = vec![vec![0usize; b.count + 1]; a.count + 1];
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        table[la as usize][lb as usize] += 1;
    }
    table
}

fn best_dice(table: &[Vec<usize>], areas_a: &[usize], areas_b: &[usize], transpose: bool) -> f64 {
    let (na, nb) = if transpose {
        (areas_b.len() - 1, areas_a.len() - 1)
    } else {
        (areas_a.len() - 1, areas_b.len() - 1)
    };
    let mut total = 0.0;
    for i in 1..=na {
        let mut best: f64 = 0.0;
        for j in 1..=nb {
            let (inter, ai, bj) = if transpose {
                (table[j][i], areas_b[i], areas_a[j])
            } else {
                (table[i][j], areas_a[i], areas_b[j])
            };
            best = best.max(dice(inter, ai, bj));
        }
        total += best;
    }
    total / na as f64
}

/// Symmetric best Dice: the smaller of the two directed mean best-Dice
/// scores. Zero when either labeling has no instance.
pub fn sbd(a: &DiscreteLabeling, b: &DiscreteLabeling) -> Result<f64> {
    if a.labels.len() != b.labels.len() {
        return Err(Error::shape(
            "sbd",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    if a.count == 0 || b.count == 0 {
        return Ok(0.0);
    }
    let table = overlaps(a, b);
    let (aa, ab) = (a.areas(), b.areas());
    let forward = best_dice(&table, &aa, &ab, false);
    let backward = best_dice(&table, &aa, &ab, true);
    Ok(forward.min(backward))
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Decoded instances of one image with their scores, and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ApImage {
    pub predictions: Vec<(Mask, f64)>,
    pub truth: Vec<Mask>,
}

impl ApImage {
    pub fn new(decoded: &DiscreteLabeling, truth: &InstanceLabelSet) -> Self {
        ApImage {
            predictions: decoded
                .instances()
                .into_iter()
                .zip(decoded.scores.iter().copied())
                .collect(),
            truth: truth.masks.clone(),
        }
    }
}

/// IoU thresholds averaged into the mean region AP.
pub fn ap_thresholds() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Region average precision at one IoU threshold.
///
/// Predictions are ranked dataset-wide by score (ties by image, then by
/// emission order). Each one is a true positive if its best-IoU unclaimed
/// ground truth in the same image exceeds `threshold`, which claims it.
/// The area under the precision-recall curve uses all-point interpolation.
pub fn average_precision(images: &[ApImage], threshold: f64) -> f64 {
    let total_truth: usize = images.iter().map(|im| im.truth.len()).sum();
    if total_truth == 0 {
        return 0.0;
    }
    let mut order: Vec<(usize, usize, f64)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| {
            im.predictions
                .iter()
                .enumerate()
                .map(move |(k, p)| (i, k, p.1))
        })
        .collect();
    order.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut claimed: Vec<Vec<bool>> = images
        .iter()
        .map(|im| vec![false; im.truth.len()])
        .collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (i, k, _) in order {
        let mask = &images[i].predictions[k].0;
        let best = images[i]
            .truth
            .iter()
            .enumerate()
            .filter(|(j, _)| !claimed[i][*j])
            .map(|(j, g)| (j, mask_iou(mask, g)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v > threshold => {
                claimed[i][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        recall.push(tp as f64 / total_truth as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // envelope from the right, then integrate over recall steps
    let mut env = precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&env) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap_50: f64,
    pub ap_ave: f64,
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
}

pub fn ap_r(images: &[ApImage]) -> ApSummary {
    let thresholds = ap_thresholds();
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| average_precision(images, t))
        .collect();
    ApSummary {
        ap_50: average_precision(images, 0.5),
        ap_ave: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        thresholds,
        per_threshold,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub predicted: usize,
    pub truth: usize,
    pub dic: i64,
    pub abs_dic: i64,
    pub sbd: f64,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub dic: Summary,
    pub abs_dic: Summary,
    pub sbd: Summary,
    pub ap: ApSummary,
}

/// Per-image rows plus the aggregate block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: Vec<ImageRow>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    /// Build from `(id, decoded, truth)` triples.
    pub fn build(entries: &[(String, DiscreteLabeling, InstanceLabelSet)]) -> Result<Self> {
        let mut rows = Vec::with_capacity(entries.len());
        let mut ap_images = Vec::with_capacity(entries.len());
        for (id, decoded, truth) in entries {
            let gt = DiscreteLabeling::from_labels(truth);
            let d = dic(decoded.count, truth.len());
            rows.push(ImageRow {
                id: id.clone(),
                predicted: decoded.count,
                truth: truth.len(),
                dic: d,
                abs_dic: d.abs(),
                sbd: sbd(decoded, &gt)?,
                scores: decoded.scores.clone(),
            });
            ap_images.push(ApImage::new(decoded, truth));
        }
        let counts: Vec<(usize, usize)> = rows.iter().map(|r| (r.predicted, r.truth)).collect();
        let (dic_s, abs_s) = dic_summary(&counts);
        let sbds: Vec<f64> = rows.iter().map(|r| r.sbd).collect();
        Ok(MetricsReport {
            aggregate: Aggregate {
                images: rows.len(),
                dic: dic_s,
                abs_dic: abs_s,
                sbd: Summary::of(&sbds),
                ap: ap_r(&ap_images),
            },
            images: rows,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table with one row per count/segmentation metric.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        let _ = writeln!(out, "{:<8}{:>10}{:>10}", "metric", "mean", "std");
        for (name, s) in [("DiC", a.dic), ("|DiC|", a.abs_dic), ("SBD", a.sbd)] {
            let _ = writeln!(out, "{:<8}{:>10.3}{:>10.3}", name, s.mean, s.std);
        }
        let _ = writeln!(out, "{:<8}{:>10.3}", "AP@0.5", a.ap.ap_50);
        let _ = writeln!(out, "{:<8}{:>10.3}", "AP ave", a.ap.ap_ave);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn seq(masks: &[&[f64]], scores: &[f64]) -> PredictedSequence<f64> {
        PredictedSequence {
            masks: masks
                .iter()
                .map(|m| Tensor::from_vec(&[1, 1, m.len()], m.to_vec()).unwrap())
                .collect(),
            scores: scores.to_vec(),
        }
    }

    fn labeling(labels: &[u32]) -> DiscreteLabeling {
        let count = labels.iter().copied().max().unwrap_or(0) as usize;
        DiscreteLabeling {
            height: 1,
            width: labels.len(),
            labels: labels.to_vec(),
            count,
            scores: vec![1.0; count],
        }
    }

    #[test]
    fn stops_at_first_low_score() {
        let p = seq(
            &[&[0.9, 0.0, 0.0], &[0.0, 0.9, 0.0], &[0.0, 0.0, 0.9]],
            &[0.9, 0.4, 0.9],
        );
        let d = decode(&p, 1, 3).unwrap();
        assert_eq!(d.count, 1);
        assert_eq!(d.labels, vec![1, 0, 0]);
    }

    #[test]
    fn earlier_step_wins_shared_pixels() {
        let p = seq(&[&[0.9, 0.9, 0.0], &[0.0, 0.9, 0.9]], &[0.9, 0.9]);
        let d = decode(&p, 1, 3).unwrap();
        assert_eq!(d.labels, vec![1, 1, 2]);
    }

    #[test]
    fn exact_half_is_background() {
        let p = seq(&[&[0.5, 0.5]], &[0.5]);
        let d = decode(&p, 1, 2).unwrap();
        assert_eq!(d.labels, vec![0, 0]);
        assert_eq!(d.count, 0);
    }

    #[test]
    fn swallowed_instance_is_removed() {
        let p = seq(
            &[&[0.9, 0.9, 0.0], &[0.8, 0.0, 0.0], &[0.0, 0.0, 0.7]],
            &[0.9, 0.8, 0.6],
        );
        let d = decode(&p, 1, 3).unwrap();
        assert_eq!(d.labels, vec![1, 1, 2]);
        assert_eq!(d.scores, vec![0.9, 0.6]);
    }

    #[test]
    fn dic_cases() {
        assert_eq!(dic(5, 5), 0);
        assert_eq!(dic(4, 5), -1);
        let (d, a) = dic_summary(&[(3, 3), (5, 4)]);
        assert_eq!(d.mean, 0.5);
        assert_eq!(a.mean, 0.5);
    }

    #[test]
    fn sbd_cases() {
        let a = labeling(&[1, 1, 0, 2, 2]);
        assert_eq!(sbd(&a, &a).unwrap(), 1.0);
        let b = labeling(&[0, 0, 1, 0, 0]);
        assert_eq!(sbd(&a, &b).unwrap(), 0.0);
        assert_eq!(sbd(&a, &labeling(&[0; 5])).unwrap(), 0.0);
        // one predicted instance covering both: BD(a|c) = (2/3 + 2/3) / 2, BD(c|a) = 2/3
        let c = labeling(&[1, 1, 0, 1, 1]);
        assert!((sbd(&a, &c).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let d = labeling(&[1, 0, 0, 2, 2]);
        // BD(a|d) = (2/3 + 1) / 2 = 5/6, BD(d|a) = (2/3 + 1) / 2
        assert!((sbd(&a, &d).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    fn m(on: &[u8]) -> Mask {
        Mask::new(1, on.len(), on.to_vec()).unwrap()
    }

    #[test]
    fn ap_cases() {
        let gt = vec![m(&[1, 1, 0, 0]), m(&[0, 0, 1, 1])];
        let perfect = ApImage {
            predictions: vec![(gt[0].clone(), 1.0), (gt[1].clone(), 1.0)],
            truth: gt.clone(),
        };
        for t in ap_thresholds() {
            assert_eq!(average_precision(&[perfect.clone()], t), 1.0);
        }
        let none = ApImage {
            predictions: vec![],
            truth: gt.clone(),
        };
        assert_eq!(average_precision(&[none], 0.5), 0.0);
    }

    #[test]
    fn ap_duplicate_detection() {
        // IoU 0.8 with score 0.9, IoU 2/3 with score 0.8, one ground truth
        let g = m(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        let p1 = m(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let p2 = m(&[1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(mask_iou(&p1, &g), 0.8);
        assert!((mask_iou(&p2, &g) - 4.0 / 6.0).abs() < 1e-15);
        let image = ApImage {
            predictions: vec![(p1, 0.9), (p2, 0.8)],
            truth: vec![g],
        };
        assert_eq!(average_precision(&[image], 0.5), 1.0);
    }

    #[test]
    fn ap_half_recall() {
        let gt = vec![m(&[1, 1, 0, 0]), m(&[0, 0, 1, 1])];
        // a false positive ranked first, then one hit: precision 1/2 at recall 1/2
        let image = ApImage {
            predictions: vec![(m(&[1, 0, 1, 0]), 0.9), (gt[1].clone(), 0.7)],
            truth: gt,
        };
        assert_eq!(average_precision(&[image], 0.5), 0.25);
    }

    #[test]
    fn report_shape() {
        let gt = InstanceLabelSet::new(1, 4, vec![m(&[1, 1, 0, 0]), m(&[0, 0, 1, 1])]).unwrap();
        let decoded = DiscreteLabeling::from_labels(&gt);
        let r = MetricsReport::build(&[("a".into(), decoded.clone(), gt.clone())]).unwrap();
        assert_eq!(r.aggregate.sbd.mean, 1.0);
        assert_eq!(r.aggregate.abs_dic.mean, 0.0);
        assert_eq!(r.aggregate.ap.ap_50, 1.0);
        let table = r.table();
        for label in ["DiC", "|DiC|", "SBD"] {
            assert!(table.lines().any(|l| l.starts_with(label)));
        }
        let back: MetricsReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
