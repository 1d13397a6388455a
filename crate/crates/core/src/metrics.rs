//! Segmentation metrics, all reported as percentages in `[0, 100]`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::pose::{segments_of, Segment};

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn framewise_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if truth.is_empty() {
        return Ok(100.0);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Unit-cost Levenshtein distance, two-row dynamic program.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 · (1 - Lev(p, g) / max(|p|, |g|))` over segment label sequences.
pub fn edit_score(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let p: Vec<usize> = segments_of(pred).iter().map(|s| s.class).collect();
    let g: Vec<usize> = segments_of(truth).iter().map(|s| s.class).collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * (1.0 - levenshtein(&p, &g) as f64 / longest as f64))
}

pub fn segment_iou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) + 1).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 100.0;
        }
        let precision = if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        if precision + recall == 0.0 {
            return 0.0;
        }
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// Greedy segment matching: each predicted segment, in order, takes the
/// unmatched same-class truth segment of highest IoU (earliest on ties) if
/// that IoU exceeds `overlap`.
pub fn match_segments(pred: &[Segment], truth: &[Segment], overlap: f64) -> Result<MatchCounts> {
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::Validation(format!(
            "overlap {overlap} outside (0, 1]"
        )));
    }
    let mut used = vec![false; truth.len()];
    let mut counts = MatchCounts::default();
    for ps in pred {
        let mut best: Option<(usize, f64)> = None;
        for (k, gs) in truth.iter().enumerate() {
            if used[k] || gs.class != ps.class {
                continue;
            }
            let iou = segment_iou(ps, gs);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        match best {
            Some((k, iou)) if iou > overlap => {
                used[k] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = used.iter().filter(|u| !**u).count();
    Ok(counts)
}

pub fn segment_matches(pred: &[usize], truth: &[usize], overlap: f64) -> Result<MatchCounts> {
    check_lengths(pred, truth)?;
    match_segments(&segments_of(pred), &segments_of(truth), overlap)
}

pub fn f1_at_overlap(pred: &[usize], truth: &[usize], overlap: f64) -> Result<f64> {
    Ok(segment_matches(pred, truth, overlap)?.f1())
}

/// All-points average precision of one score column against binary truth.
/// Frames sharing a score form one threshold, so ties never favour an order
/// and constant scores give the positive rate.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> f64 {
    let npos = positive.iter().filter(|p| **p).count();
    if npos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_tp) = (0usize, 0usize, 0.0f64, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(positive[order[i]]);
            seen += 1;
            i += 1;
        }
        if tp > prev_tp {
            let precision = tp as f64 / seen as f64;
            ap += (tp - prev_tp) as f64 / npos as f64 * precision;
            prev_tp = tp;
        }
    }
    ap
}

/// Mean framewise AP over classes present in `truth`, from a `C × M`
/// probability track.
pub fn framewise_map(probs: &Array2<f64>, truth: &[usize]) -> Result<f64> {
    let (c, m) = probs.dim();
    if m != truth.len() {
        return Err(Error::Dimension(format!(
            "probability track has {m} frames, ground truth {}",
            truth.len()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&l| l >= c) {
        return Err(Error::Dimension(format!("label {bad} outside {c} classes")));
    }
    let mut present: Vec<usize> = truth.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return Ok(100.0);
    }
    let total: f64 = present
        .iter()
        .map(|&k| {
            let scores: Vec<f64> = probs.row(k).to_vec();
            let positive: Vec<bool> = truth.iter().map(|&l| l == k).collect();
            average_precision(&scores, &positive)
        })
        .sum();
    Ok(100.0 * total / present.len() as f64)
}

/// The four metrics for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SequenceMetrics {
    pub f1_10: f64,
    pub edit: f64,
    pub map: f64,
    pub acc: f64,
}

pub fn evaluate_sequence(
    pred: &[usize],
    probs: &Array2<f64>,
    truth: &[usize],
) -> Result<SequenceMetrics> {
    Ok(SequenceMetrics {
        f1_10: f1_at_overlap(pred, truth, 0.10)?,
        edit: edit_score(pred, truth)?,
        map: framewise_map(probs, truth)?,
        acc: framewise_accuracy(pred, truth)?,
    })
}

/// One-hot probability track for a label sequence.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut p = Array2::zeros((classes, labels.len()));
    for (t, &l) in labels.iter().enumerate() {
        p[[l, t]] = 1.0;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn accuracy_cases() {
        assert_eq!(framewise_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 100.0);
        assert_eq!(
            framewise_accuracy(&[0, 1, 1, 0], &[0, 1, 0, 1]).unwrap(),
            50.0
        );
        assert_eq!(framewise_accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(framewise_accuracy(&[1], &[0, 0]).is_err());
    }

    #[test]
    fn edit_cases() {
        assert_eq!(edit_score(&[0, 0, 1], &[0, 0, 1]).unwrap(), 100.0);
        let v = edit_score(&[0, 0, 1, 1, 1, 1], &[0, 0, 1, 1, 0, 0]).unwrap();
        assert!((v - 100.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(edit_score(&[1, 1], &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein::<u8>(b"", b"abc"), 3);
    }

    #[test]
    fn f1_cases() {
        let truth = vec![0usize; 100];
        assert_eq!(f1_at_overlap(&truth, &truth, 0.1).unwrap(), 100.0);

        let seg = |s: usize, e: usize| Segment {
            class: 0,
            start: s,
            end: e,
        };
        let c = match_segments(&[seg(0, 49)], &[seg(0, 99)], 0.1).unwrap();
        assert_eq!(
            c,
            MatchCounts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
        assert_eq!(c.f1(), 100.0);

        let c = match_segments(&[seg(0, 49), seg(50, 99)], &[seg(0, 99)], 0.1).unwrap();
        assert_eq!(
            c,
            MatchCounts {
                tp: 1,
                fp: 1,
                fn_: 0
            }
        );
        assert!((c.f1() - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_counts_foreign_segments() {
        let truth = vec![0usize; 100];
        let mut pred = vec![0usize; 100];
        pred[50] = 1;
        let c = segment_matches(&pred, &truth, 0.1).unwrap();
        assert_eq!(
            c,
            MatchCounts {
                tp: 1,
                fp: 2,
                fn_: 0
            }
        );
    }

    #[test]
    fn f1_overlap_must_be_exceeded() {
        let truth = vec![0usize; 10];
        let mut pred = vec![1usize; 10];
        pred[..1].fill(0);
        // IoU = 0.1 exactly, not > 0.1
        let c = segment_matches(&pred, &truth, 0.1).unwrap();
        assert_eq!(c.tp, 0);
    }

    #[test]
    fn map_cases() {
        let truth = [0, 0, 1, 2];
        assert_eq!(framewise_map(&one_hot(&truth, 3), &truth).unwrap(), 100.0);

        let ap = average_precision(&[0.9, 0.4, 0.8, 0.1], &[true, true, false, false]);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        // constant scores: one threshold, AP is the positive rate
        let ap = average_precision(
            &[0.5; 8],
            &[true, false, false, true, false, false, false, false],
        );
        assert_eq!(ap, 0.25);

        let probs = array![[0.9, 0.4, 0.8, 0.1]];
        let v = framewise_map(&probs, &[0, 0, 0, 0]).unwrap();
        assert_eq!(v, 100.0);
    }
}
