//! Evaluation battery: binary (ACC/AUC/EER), multi-label (mAP/CF1/OF1),
//! image grounding (IoU) and text grounding (P/R/F1).

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judgment;

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    crate::mdsc::check_binary(labels)?;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("binary metric needs both classes present"));
    }
    Ok((pos, neg))
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "binary metric",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Twice the Mann–Whitney U statistic: each (positive, negative) pair scores
/// 2 when the positive ranks higher and 1 on a tie.
pub fn auc_pair_count(scores: &[f64], labels: &[u8]) -> Result<u64> {
    check_scores(scores, labels)?;
    class_counts(labels)?;
    let idx = ascending(scores);
    let (mut total, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        total += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(total)
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(labels)?;
    let u2 = auc_pair_count(scores, labels)?;
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// `(FPR, FNR)` after admitting each distinct score as a positive threshold,
/// starting from the empty prediction set.
fn roc_points(scores: &[f64], labels: &[u8], pos: usize, neg: usize) -> Vec<(f64, f64)> {
    let mut idx = ascending(scores);
    idx.reverse();
    let mut pts = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / neg as f64, 1.0 - tp as f64 / pos as f64));
    }
    pts
}

/// Equal error rate: FPR where the FPR − FNR curve crosses zero, linearly
/// interpolated between adjacent ROC points.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    Ok(eer_from_points(&roc_points(scores, labels, pos, neg)))
}

pub(crate) fn eer_from_points(pts: &[(f64, f64)]) -> f64 {
    let mut prev = pts[0];
    for &(fpr, fnr) in pts {
        let d = fpr - fnr;
        if d >= 0.0 {
            let dp = prev.0 - prev.1;
            if d == 0.0 || dp == d {
                return fpr;
            }
            let t = -dp / (d - dp);
            let at = |a: f64, b: f64| a + t * (b - a);
            // both rates agree at the crossing; average guards rounding
            return 0.5 * (at(prev.0, fpr) + at(prev.1, fnr));
        }
        prev = (fpr, fnr);
    }
    prev.0
}

pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_scores(scores, labels)?;
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s >= threshold) == (**y == 1))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Average precision: mean over positives of the precision of the set
/// `{score ≥ that positive's score}`. Tied scores share one operating point,
/// so the value does not depend on input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let npos = labels.iter().filter(|&&y| y == 1).count();
    if npos == 0 {
        return None;
    }
    let mut idx = ascending(scores);
    idx.reverse();
    let (mut seen, mut hits) = (0usize, 0usize);
    let mut sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let mut group_pos = 0usize;
        while i < idx.len() && scores[idx[i]] == s {
            seen += 1;
            if labels[idx[i]] == 1 {
                group_pos += 1;
            }
            i += 1;
        }
        hits += group_pos;
        sum += group_pos as f64 * hits as f64 / seen as f64;
    }
    Some(sum / npos as f64)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiLabel {
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
}

/// `probs` and `labels` are row-per-sample with one column per class.
pub fn multilabel_metrics(
    probs: &[Vec<f64>],
    labels: &[Vec<u8>],
    threshold: f64,
) -> Result<MultiLabel> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::invalid(
            "multi-label metrics need matching, non-empty inputs",
        ));
    }
    let c = probs[0].len();
    if probs.iter().any(|r| r.len() != c) || labels.iter().any(|r| r.len() != c) {
        return Err(Error::invalid("ragged multi-label matrix"));
    }
    let (mut aps, mut f1s) = (Vec::new(), Vec::new());
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for k in 0..c {
        let s: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let y: Vec<u8> = labels.iter().map(|r| r[k]).collect();
        match average_precision(&s, &y) {
            Some(ap) => aps.push(ap),
            None => log::warn!("class {k} has no positives; skipped in mAP"),
        }
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &t) in s.iter().zip(&y) {
            match (p >= threshold, t == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if let Some(f) = f1(tp, fp, fn_) {
            f1s.push(f);
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MultiLabel {
        map: mean(&aps),
        cf1: mean(&f1s),
        of1: f1(tp_all, fp_all, fn_all).unwrap_or(0.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grounding {
    pub iou_mean: f64,
    pub iou50: f64,
    pub iou75: f64,
}

/// IoU statistics over paired corner boxes.
pub fn grounding_image(preds: &[[f64; 4]], gts: &[[f64; 4]]) -> Result<Grounding> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "grounding_image",
            &[preds.len()],
            &[gts.len()],
        ));
    }
    if preds.is_empty() {
        return Ok(Grounding {
            iou_mean: 0.0,
            iou50: 0.0,
            iou75: 0.0,
        });
    }
    let mut ious = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| judgment::iou(p, g))
        .collect::<Result<Vec<_>>>()?;
    // summation order fixed by value, not by input order
    ious.sort_by(f64::total_cmp);
    let n = ious.len() as f64;
    Ok(Grounding {
        iou_mean: ious.iter().sum::<f64>() / n,
        iou50: ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n,
        iou75: ious.iter().filter(|&&v| v >= 0.75).count() as f64 / n,
    })
}

/// Micro precision, recall and F1 of the fake-token class.
pub fn token_prf(preds: &[bool], truth: &[u8]) -> Result<(f64, f64, f64)> {
    if preds.len() != truth.len() {
        return Err(Error::shape("token_prf", &[preds.len()], &[truth.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(truth) {
        match (p, t == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 {
        log::warn!("no tokens predicted fake; precision set to 0");
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub eer: f64,
    pub acc: f64,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub iou_mean: f64,
    pub iou50: f64,
    pub iou75: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricsReport {
    pub fn fields(&self) -> [(&'static str, f64); 12] {
        [
            ("auc", self.auc),
            ("eer", self.eer),
            ("acc", self.acc),
            ("map", self.map),
            ("cf1", self.cf1),
            ("of1", self.of1),
            ("iou_mean", self.iou_mean),
            ("iou50", self.iou50),
            ("iou75", self.iou75),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ]
    }
}

impl fmt::Display for MetricsReport {
    /// Percentages grouped as binary | multi-label | image grounding | text grounding.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups: [(&str, &[(&str, f64)]); 4] = [
            (
                "Binary Cls",
                &[("AUC", self.auc), ("EER", self.eer), ("ACC", self.acc)],
            ),
            (
                "Multi-Label Cls",
                &[("mAP", self.map), ("CF1", self.cf1), ("OF1", self.of1)],
            ),
            (
                "Image Grounding",
                &[
                    ("IoUmean", self.iou_mean),
                    ("IoU50", self.iou50),
                    ("IoU75", self.iou75),
                ],
            ),
            (
                "Text Grounding",
                &[
                    ("Precision", self.precision),
                    ("Recall", self.recall),
                    ("F1", self.f1),
                ],
            ),
        ];
        let width = 10;
        let mut head = String::new();
        let mut names = String::new();
        let mut vals = String::new();
        for (title, cols) in groups {
            let span = width * cols.len();
            head.push_str(&format!("| {title:^w$} ", w = span - 1));
            names.push('|');
            vals.push('|');
            for (i, (n, v)) in cols.iter().enumerate() {
                let w = if i == 0 { width - 1 } else { width };
                names.push_str(&format!("{n:>w$}"));
                vals.push_str(&format!("{:>w$.2}", v * 100.0));
            }
            names.push(' ');
            vals.push(' ');
        }
        writeln!(f, "{head}|")?;
        writeln!(f, "{names}|")?;
        write!(f, "{vals}|")
    }
}
