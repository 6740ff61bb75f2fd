//! Multi-label evaluation: per-label accuracy, micro/macro precision,
//! recall and F1 at a threshold, and mean average precision over ranked
//! scores. Classes with no positive ground truth are excluded from the
//! macro averages and mAP, with the exclusion count reported.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The fixed metrics record every evaluation emits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub per_label_accuracy: f64,
    pub precision_micro: f64,
    pub recall_micro: f64,
    pub f1_micro: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub map: f64,
    pub excluded_classes: usize,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Computes the metrics record from per-sample score vectors (already mapped
/// through the sigmoid) and ground-truth rows. Predictions are
/// `score ≥ threshold`.
pub fn compute_metrics(
    scores: &[Vec<f64>],
    truths: &[Vec<u8>],
    threshold: f64,
) -> Result<Metrics> {
    if scores.is_empty() || scores.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} score rows vs {} truth rows",
            scores.len(),
            truths.len()
        )));
    }
    let a = scores[0].len();
    if a == 0 || truths.iter().any(|t| t.len() != a) || scores.iter().any(|s| s.len() != a) {
        return Err(Error::invalid("ragged score/label rows"));
    }
    let n = scores.len();

    let mut correct = 0u64;
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    let mut class_tp = vec![0u64; a];
    let mut class_fp = vec![0u64; a];
    let mut class_fn = vec![0u64; a];
    let mut class_pos = vec![0u64; a];
    for (srow, trow) in scores.iter().zip(truths) {
        for c in 0..a {
            let pred = srow[c] >= threshold;
            let truth = trow[c] == 1;
            if truth {
                class_pos[c] += 1;
            }
            match (pred, truth) {
                (true, true) => {
                    tp += 1;
                    class_tp[c] += 1;
                    correct += 1;
                }
                (true, false) => {
                    fp += 1;
                    class_fp[c] += 1;
                }
                (false, true) => {
                    fne += 1;
                    class_fn[c] += 1;
                }
                (false, false) => correct += 1,
            }
        }
    }

    let precision_micro = ratio(tp, tp + fp);
    let recall_micro = ratio(tp, tp + fne);

    let mut included = 0usize;
    let (mut pm, mut rm, mut fm, mut map_acc) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..a {
        if class_pos[c] == 0 {
            continue;
        }
        included += 1;
        let p = ratio(class_tp[c], class_tp[c] + class_fp[c]);
        let r = ratio(class_tp[c], class_tp[c] + class_fn[c]);
        pm += p;
        rm += r;
        fm += f1(p, r);
        map_acc += average_precision(scores, truths, c);
    }
    let denom = included.max(1) as f64;

    Ok(Metrics {
        per_label_accuracy: correct as f64 / (n * a) as f64,
        precision_micro,
        recall_micro,
        f1_micro: f1(precision_micro, recall_micro),
        precision_macro: pm / denom,
        recall_macro: rm / denom,
        f1_macro: fm / denom,
        map: map_acc / denom,
        excluded_classes: a - included,
    })
}

/// AP for one class: samples ranked by score (ties broken by sample index),
/// summing precision at each positive hit over the positive count.
fn average_precision(scores: &[Vec<f64>], truths: &[Vec<u8>], class: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&x, &y| scores[y][class].total_cmp(&scores[x][class]).then(x.cmp(&y)));
    let mut hits = 0u64;
    let mut acc = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if truths[idx][class] == 1 {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}
