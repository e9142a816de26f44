//! Pixel precision, IoU, and DAVIS-style region (J) and boundary (F)
//! statistics, plus report aggregation and serialization.

use crate::error::{Error, Result};
use crate::image::BinaryMask;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

fn check_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::shape(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// Fraction of pixels on which `pred` and `gt` agree (both classes count).
pub fn precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let agree = pred.pixels().iter().zip(gt.pixels()).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.pixels().len() as f64)
}

/// Foreground intersection over union. Two empty masks score 1.0.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.pixels().iter().zip(gt.pixels()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean / recall / decay of one per-frame quality sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceStats {
    pub mean: f64,
    pub recall: f64,
    /// Absent when fewer than four frames remain after dropping the first.
    pub decay: Option<f64>,
}

/// Statistics over `scores`, which must already exclude the anchor frame.
///
/// Recall counts scores strictly above 0.5. Decay is the mean of the first
/// quartile bin minus the mean of the last, with bin edges `floor(i*n/4)`.
pub fn sequence_stats(scores: &[f64]) -> Result<SequenceStats> {
    if scores.is_empty() {
        return Err(Error::config("no frames to score after excluding the first frame"));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let recall = scores.iter().filter(|&&s| s > 0.5).count() as f64 / n as f64;
    let decay = (n >= 4).then(|| {
        let edge = |i: usize| i * n / 4;
        // offsets from a shared pivot keep constant sequences exactly at 0
        // even when the two bins differ in length
        let pivot = scores[0];
        let bin_mean = |b: usize| {
            let s = &scores[edge(b)..edge(b + 1)];
            s.iter().map(|v| v - pivot).sum::<f64>() / s.len() as f64
        };
        bin_mean(0) - bin_mean(3)
    });
    Ok(SequenceStats { mean, recall, decay })
}

fn check_sequences(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "sequence lengths differ: {} predicted vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::config(
            "sequence needs at least two frames (the first is the given anchor)",
        ));
    }
    Ok(())
}

/// Per-frame J (IoU) for frames after the first.
pub fn per_frame_j(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<Vec<f64>> {
    check_sequences(pred, gt)?;
    pred.iter().zip(gt).skip(1).map(|(p, g)| iou(p, g)).collect()
}

/// Region similarity statistics; the first (given) frame is excluded.
pub fn davis_j(pred: &[BinaryMask], gt: &[BinaryMask]) -> Result<SequenceStats> {
    sequence_stats(&per_frame_j(pred, gt)?)
}

/// One-pixel boundary: foreground pixels with a background (or
/// out-of-frame) 4-neighbour.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    BinaryMask::from_fn(w, h, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let bg = |dx: isize, dy: isize| {
            let (nx, ny) = (x as isize + dx, y as isize + dy);
            nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize || !mask.get(nx as usize, ny as usize)
        };
        bg(-1, 0) || bg(1, 0) || bg(0, -1) || bg(0, 1)
    })
}

/// Chebyshev dilation by `radius` pixels (a `(2r+1)`-square structuring
/// element), done as two separable 1-D passes.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut horiz = BinaryMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            if (lo..=hi).any(|xx| mask.get(xx, y)) {
                horiz.set(x, y, true);
            }
        }
    }
    BinaryMask::from_fn(w, h, |x, y| {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        (lo..=hi).any(|yy| horiz.get(x, yy))
    })
}

/// Boundary F-measure of one frame with a Chebyshev pixel tolerance.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tolerance_px: usize) -> Result<f64> {
    check_dims(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.count(), bg.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (gt_zone, pred_zone) = (dilate(&bg, tolerance_px), dilate(&bp, tolerance_px));
    let hits = |b: &BinaryMask, zone: &BinaryMask| {
        b.pixels()
            .iter()
            .zip(zone.pixels())
            .filter(|(&a, &z)| a == 1 && z == 1)
            .count()
    };
    let p = hits(&bp, &gt_zone) as f64 / np as f64;
    let r = hits(&bg, &pred_zone) as f64 / ng as f64;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// `max(1, round(0.008 * diagonal))`.
pub fn default_boundary_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.008 * diag).round() as usize).max(1)
}

pub fn per_frame_f(pred: &[BinaryMask], gt: &[BinaryMask], tolerance_px: usize) -> Result<Vec<f64>> {
    check_sequences(pred, gt)?;
    pred.iter()
        .zip(gt)
        .skip(1)
        .map(|(p, g)| boundary_f(p, g, tolerance_px))
        .collect()
}

/// Boundary statistics; the first (given) frame is excluded.
pub fn davis_f(pred: &[BinaryMask], gt: &[BinaryMask], tolerance_px: usize) -> Result<SequenceStats> {
    sequence_stats(&per_frame_f(pred, gt, tolerance_px)?)
}

/// Metrics of one model on one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEvaluation {
    pub clip_id: String,
    /// Mean per-image precision over scored frames.
    pub precision: f64,
    /// Mean per-image IoU over scored frames.
    pub iou: f64,
    pub j: SequenceStats,
    pub f: SequenceStats,
    pub per_frame_j: Vec<f64>,
    pub per_frame_f: Vec<f64>,
}

impl ClipEvaluation {
    /// Scores frames `1..` of `pred` against `gt`.
    pub fn compute(clip_id: &str, pred: &[BinaryMask], gt: &[BinaryMask], tolerance_px: usize) -> Result<Self> {
        let js = per_frame_j(pred, gt)?;
        let fs = per_frame_f(pred, gt, tolerance_px)?;
        let ps = pred
            .iter()
            .zip(gt)
            .skip(1)
            .map(|(p, g)| precision(p, g))
            .collect::<Result<Vec<_>>>()?;
        let n = ps.len() as f64;
        Ok(Self {
            clip_id: clip_id.to_string(),
            precision: ps.iter().sum::<f64>() / n,
            iou: js.iter().sum::<f64>() / n,
            j: sequence_stats(&js)?,
            f: sequence_stats(&fs)?,
            per_frame_j: js,
            per_frame_f: fs,
        })
    }
}

/// Dataset-level metrics of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_name: String,
    pub split: String,
    pub precision: f64,
    pub iou: f64,
    pub j_mean: Option<f64>,
    pub j_recall: Option<f64>,
    pub j_decay: Option<f64>,
    pub f_mean: Option<f64>,
    pub f_recall: Option<f64>,
    pub f_decay: Option<f64>,
    pub per_clip: Vec<ClipEvaluation>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Arithmetic mean over clips of every per-clip statistic. Decays are
/// averaged over the clips that have one.
pub fn build_report(model_name: &str, split: &str, evaluations: Vec<ClipEvaluation>) -> Result<MetricsReport> {
    if evaluations.is_empty() {
        return Err(Error::config(format!(
            "no clip evaluations for model '{model_name}' on split '{split}'"
        )));
    }
    let ev = &evaluations;
    Ok(MetricsReport {
        model_name: model_name.to_string(),
        split: split.to_string(),
        precision: mean(ev.iter().map(|e| e.precision)).expect("non-empty"),
        iou: mean(ev.iter().map(|e| e.iou)).expect("non-empty"),
        j_mean: mean(ev.iter().map(|e| e.j.mean)),
        j_recall: mean(ev.iter().map(|e| e.j.recall)),
        j_decay: mean(ev.iter().filter_map(|e| e.j.decay)),
        f_mean: mean(ev.iter().map(|e| e.f.mean)),
        f_recall: mean(ev.iter().map(|e| e.f.recall)),
        f_decay: mean(ev.iter().filter_map(|e| e.f.decay)),
        per_clip: evaluations,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }
}

/// Renders rows as a CSV whose columns are padded to a common width.
pub fn aligned_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let ncol = header.len();
    let mut width = header.iter().map(|h| h.len()).collect::<Vec<_>>();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(ncol) {
            width[i] = width[i].max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i + 1 == ncol {
                    c.to_string()
                } else {
                    format!("{c:<w$}", w = width[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", padded.join(", "));
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())
}

/// Rows = models, columns = P, IOU.
pub fn precision_iou_table(reports: &[MetricsReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.model_name.clone(),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.iou),
            ]
        })
        .collect();
    aligned_csv(&["model", "P", "IOU"], &rows)
}

pub const JF_HEADER: [&str; 6] = ["J-mean", "J-recall", "J-decay", "F-mean", "F-recall", "F-decay"];

/// One row of the six J/F statistics.
pub fn jf_table(report: &MetricsReport) -> String {
    let row = vec![
        fmt_opt(report.j_mean),
        fmt_opt(report.j_recall),
        fmt_opt(report.j_decay),
        fmt_opt(report.f_mean),
        fmt_opt(report.f_recall),
        fmt_opt(report.f_decay),
    ];
    aligned_csv(&JF_HEADER, &[row])
}

/// Parses an aligned CSV back into trimmed cells.
pub fn parse_aligned_csv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| on.contains(&(x, y)))
    }

    fn square(size: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    }

    #[test]
    fn precision_examples() {
        let gt = mask(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(precision(&gt, &gt).unwrap(), 1.0);
        assert_eq!(precision(&gt.inverted(), &gt).unwrap(), 0.0);
        let three = mask(2, 2, &[(0, 0)]);
        assert_eq!(precision(&three, &gt).unwrap(), 0.75);
    }

    #[test]
    fn iou_examples() {
        let a = mask(3, 3, &[(0, 0), (1, 0)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let pred = BinaryMask::from_fn(3, 3, |_, y| y <= 1);
        let gt = BinaryMask::from_fn(3, 3, |_, y| y >= 1);
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::empty(3, 3);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &a).unwrap(), 0.0);
        assert_eq!(iou(&a, &e).unwrap(), 0.0);
    }

    #[test]
    fn size_mismatch_is_shape_error() {
        let a = BinaryMask::empty(2, 2);
        let b = BinaryMask::empty(3, 2);
        assert!(matches!(precision(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(iou(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(boundary_f(&a, &b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn sequence_stats_examples() {
        let s = sequence_stats(&[0.7; 6]).unwrap();
        assert_eq!(s.decay, Some(0.0));
        let s = sequence_stats(&[0.6; 3]).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.decay, None);
        let s = sequence_stats(&[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!((s.mean, s.recall, s.decay), (0.5, 0.5, Some(1.0)));
        let s = sequence_stats(&[0.5, 0.5000001]).unwrap();
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn davis_j_excludes_first_frame() {
        let full = BinaryMask::full(4, 4);
        let empty = BinaryMask::empty(4, 4);
        // frame 0 is wrong but ignored; the rest score [1, 1, 0, 0]
        let pred = vec![empty.clone(), full.clone(), full.clone(), empty.clone(), empty.clone()];
        let gt = vec![full.clone(); 5];
        let s = davis_j(&pred, &gt).unwrap();
        assert_eq!((s.mean, s.recall, s.decay), (0.5, 0.5, Some(1.0)));
        assert!(davis_j(&pred[..1], &gt[..1]).is_err());
        assert!(davis_j(&pred, &gt[..4]).is_err());
    }

    #[test]
    fn boundary_of_square_is_its_ring() {
        let s = square(8, 2, 2, 4);
        let b = boundary(&s);
        assert_eq!(b.count(), 12);
        assert!(!b.get(3, 3) && b.get(2, 2) && b.get(5, 3));
    }

    #[test]
    fn boundary_f_identity_and_degenerate() {
        let s = square(16, 3, 4, 6);
        assert_eq!(boundary_f(&s, &s, 1).unwrap(), 1.0);
        assert_eq!(boundary_f(&BinaryMask::empty(16, 16), &s, 3).unwrap(), 0.0);
        assert_eq!(
            boundary_f(&BinaryMask::empty(16, 16), &BinaryMask::empty(16, 16), 3).unwrap(),
            1.0
        );
    }

    #[test]
    fn default_tolerance_at_256_is_three() {
        assert_eq!(default_boundary_tolerance(256, 256), 3);
        assert_eq!(default_boundary_tolerance(16, 16), 1);
    }

    #[test]
    fn build_report_means() {
        let e = |id: &str, p: f64, j: f64| ClipEvaluation {
            clip_id: id.into(),
            precision: p,
            iou: j,
            j: SequenceStats {
                mean: j,
                recall: 1.0,
                decay: Some(0.0),
            },
            f: SequenceStats {
                mean: j,
                recall: 1.0,
                decay: None,
            },
            per_frame_j: vec![j],
            per_frame_f: vec![j],
        };
        let one = build_report("m", "test", vec![e("a", 0.9, 0.8)]).unwrap();
        assert_eq!((one.precision, one.iou, one.j_mean), (0.9, 0.8, Some(0.8)));
        assert_eq!(one.f_decay, None);
        let two = build_report("m", "test", vec![e("a", 0.9, 0.8), e("b", 0.7, 0.6)]).unwrap();
        assert!((two.precision - 0.8).abs() < 1e-15 && (two.iou - 0.7).abs() < 1e-15);
        assert!(build_report("m", "test", vec![]).is_err());

        let back = MetricsReport::from_json(&two.to_json()).unwrap();
        assert_eq!(back, two);
    }

    #[test]
    fn tables_have_expected_columns() {
        let r = MetricsReport {
            model_name: "unsupervised".into(),
            split: "test".into(),
            precision: 0.5,
            iou: 0.25,
            j_mean: Some(0.25),
            j_recall: Some(0.0),
            j_decay: None,
            f_mean: Some(0.1),
            f_recall: Some(0.0),
            f_decay: Some(-0.05),
            per_clip: vec![],
        };
        let t = parse_aligned_csv(&precision_iou_table(std::slice::from_ref(&r)));
        assert_eq!(t[0], vec!["model", "P", "IOU"]);
        assert_eq!(t[1], vec!["unsupervised", "0.5000", "0.2500"]);
        let jf = parse_aligned_csv(&jf_table(&r));
        assert_eq!(jf[0].len(), 6);
        assert_eq!(jf[1][2], "NA");
    }
}
