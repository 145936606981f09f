//! Depth and viewpoint evaluation of annotations against ground truth.

use std::f64::consts::{FRAC_PI_4, FRAC_PI_6};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::FrameAnnotation;
use crate::dataio::KittiLabelLine;
use crate::geometry::{iou_2d, wrap_angle, Box2D, YawAngle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("cannot match prediction frame {pred} against ground-truth frame {gt}")]
    FrameMismatch { pred: u32, gt: u32 },
    #[error("no matched pairs to evaluate")]
    EmptyInput,
}

/// Depth interval keyed by ground-truth depth, left-closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DepthBucket {
    #[serde(rename = "0-10")]
    B0To10,
    #[serde(rename = "10-20")]
    B10To20,
    #[serde(rename = "20-30")]
    B20To30,
    #[serde(rename = "30-40")]
    B30To40,
    #[serde(rename = "40-50")]
    B40To50,
    #[serde(rename = "50+")]
    B50Plus,
}

impl DepthBucket {
    pub const ALL: [DepthBucket; 6] = [
        DepthBucket::B0To10,
        DepthBucket::B10To20,
        DepthBucket::B20To30,
        DepthBucket::B30To40,
        DepthBucket::B40To50,
        DepthBucket::B50Plus,
    ];

    pub fn of(z_gt: f64) -> DepthBucket {
        match z_gt {
            z if z < 10.0 => DepthBucket::B0To10,
            z if z < 20.0 => DepthBucket::B10To20,
            z if z < 30.0 => DepthBucket::B20To30,
            z if z < 40.0 => DepthBucket::B30To40,
            z if z < 50.0 => DepthBucket::B40To50,
            _ => DepthBucket::B50Plus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DepthBucket::B0To10 => "0-10",
            DepthBucket::B10To20 => "10-20",
            DepthBucket::B20To30 => "20-30",
            DepthBucket::B30To40 => "30-40",
            DepthBucket::B40To50 => "40-50",
            DepthBucket::B50Plus => "50+",
        }
    }
}

impl fmt::Display for DepthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub z_gt: f64,
    pub z_pred: f64,
    pub yaw_gt: YawAngle,
    pub yaw_pred: YawAngle,
    pub depth_bucket: DepthBucket,
}

impl MatchedPair {
    pub fn new(z_gt: f64, z_pred: f64, yaw_gt: f64, yaw_pred: f64) -> MatchedPair {
        debug_assert!(z_gt > 0.0, "ground-truth depth must be positive");
        MatchedPair {
            z_gt,
            z_pred,
            yaw_gt: YawAngle::new(yaw_gt),
            yaw_pred: YawAngle::new(yaw_pred),
            depth_bucket: DepthBucket::of(z_gt),
        }
    }

    /// `|wrap(yaw_pred − yaw_gt)|` in radians.
    pub fn yaw_error(&self) -> f64 {
        wrap_angle(self.yaw_pred.radians() - self.yaw_gt.radians()).abs()
    }
}

/// The parts of an annotation that evaluation looks at.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalObject {
    pub category: String,
    pub box2d: Box2D,
    /// Camera-frame z of the object origin.
    pub z: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub frame_id: u32,
    pub objects: Vec<EvalObject>,
}

impl EvalFrame {
    pub fn from_labels(frame_id: u32, labels: &[KittiLabelLine]) -> EvalFrame {
        EvalFrame {
            frame_id,
            objects: labels
                .iter()
                .map(|l| EvalObject {
                    category: l.kind.clone(),
                    box2d: l.bbox,
                    z: l.location.z,
                    yaw: l.rotation_y,
                })
                .collect(),
        }
    }
}

impl From<&FrameAnnotation> for EvalFrame {
    fn from(a: &FrameAnnotation) -> EvalFrame {
        EvalFrame {
            frame_id: a.frame_id,
            objects: a
                .entries
                .iter()
                .map(|e| EvalObject {
                    category: e.category.clone(),
                    box2d: e.box2d,
                    z: e.local_pose.translation().z,
                    yaw: e.yaw_local.radians(),
                })
                .collect(),
        }
    }
}

/// Matching outcome, including the unmatched counts for precision/recall.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub n_pred: usize,
    pub n_gt: usize,
}

impl MatchResult {
    pub fn precision(&self) -> Option<f64> {
        (self.n_pred > 0).then(|| self.pairs.len() as f64 / self.n_pred as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.n_gt > 0).then(|| self.pairs.len() as f64 / self.n_gt as f64)
    }

    pub fn extend(&mut self, other: MatchResult) {
        self.pairs.extend(other.pairs);
        self.n_pred += other.n_pred;
        self.n_gt += other.n_gt;
    }
}

/// Greedy one-to-one matching, highest IoU first, same category only.
/// Ties fall to the lower (pred, gt) index pair.
pub fn match_frames(
    pred: &EvalFrame,
    gt: &EvalFrame,
    iou_min: f64,
) -> Result<MatchResult, MetricsError> {
    if pred.frame_id != gt.frame_id {
        return Err(MetricsError::FrameMismatch {
            pred: pred.frame_id,
            gt: gt.frame_id,
        });
    }
    let mut candidates = Vec::new();
    for (i, p) in pred.objects.iter().enumerate() {
        for (j, g) in gt.objects.iter().enumerate() {
            if p.category != g.category || !(g.z > 0.0) {
                continue;
            }
            let iou = iou_2d(&p.box2d, &g.box2d).unwrap_or(0.0);
            if iou >= iou_min {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut pred_used = vec![false; pred.objects.len()];
    let mut gt_used = vec![false; gt.objects.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if pred_used[i] || gt_used[j] {
            continue;
        }
        pred_used[i] = true;
        gt_used[j] = true;
        let (p, g) = (&pred.objects[i], &gt.objects[j]);
        pairs.push(MatchedPair::new(g.z, p.z, g.yaw, p.yaw));
    }
    Ok(MatchResult {
        pairs,
        n_pred: pred.objects.len(),
        n_gt: gt.objects.len(),
    })
}

pub fn match_annotations(
    pred: &FrameAnnotation,
    gt: &FrameAnnotation,
    iou_min: f64,
) -> Result<MatchResult, MetricsError> {
    match_frames(&pred.into(), &gt.into(), iou_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub count: usize,
    pub delta_125: f64,
    pub abs_rel: f64,
    pub sqr_rel: f64,
    pub rmse: f64,
    /// `None` when every prediction is non-positive.
    pub rmse_log: Option<f64>,
    /// Pairs left out of `rmse_log` because `z_pred ≤ 0`.
    pub rmse_log_excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointStats {
    pub count: usize,
    pub acc_pi4: f64,
    pub acc_pi6: f64,
    /// Degrees.
    pub mederr: f64,
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    it.sum::<f64>() / n as f64
}

pub fn depth_stats(pairs: &[MatchedPair]) -> Result<DepthStats, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = pairs.len();
    // a non-positive prediction has no meaningful ratio and never passes
    let delta_ok = pairs
        .iter()
        .filter(|p| p.z_pred > 0.0 && (p.z_pred / p.z_gt).max(p.z_gt / p.z_pred) < 1.25)
        .count();
    let logs: Vec<f64> = pairs
        .iter()
        .filter(|p| p.z_pred > 0.0)
        .map(|p| (p.z_gt.ln() - p.z_pred.ln()).powi(2))
        .collect();
    let excluded = n - logs.len();
    if excluded > 0 {
        log::warn!("{excluded} pair(s) with non-positive predicted depth left out of rmse_log");
    }
    Ok(DepthStats {
        count: n,
        delta_125: delta_ok as f64 / n as f64,
        abs_rel: mean(pairs.iter().map(|p| (p.z_gt - p.z_pred).abs() / p.z_gt), n),
        sqr_rel: mean(pairs.iter().map(|p| (p.z_gt - p.z_pred).powi(2) / p.z_gt), n),
        rmse: mean(pairs.iter().map(|p| (p.z_gt - p.z_pred).powi(2)), n).sqrt(),
        rmse_log: (!logs.is_empty()).then(|| mean(logs.iter().copied(), logs.len()).sqrt()),
        rmse_log_excluded: excluded,
    })
}

/// Median, averaging the two central values for an even count.
fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn viewpoint_stats(pairs: &[MatchedPair]) -> Result<ViewpointStats, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = pairs.len();
    let errors: Vec<f64> = pairs.iter().map(MatchedPair::yaw_error).collect();
    let acc = |tau: f64| errors.iter().filter(|&&e| e < tau).count() as f64 / n as f64;
    Ok(ViewpointStats {
        count: n,
        acc_pi4: acc(FRAC_PI_4),
        acc_pi6: acc(FRAC_PI_6),
        mederr: median(errors.iter().map(|e| e.to_degrees()).collect()),
    })
}

/// Pairs grouped by bucket; empty buckets are absent.
pub fn interval_breakdown(pairs: &[MatchedPair]) -> Vec<(DepthBucket, Vec<MatchedPair>)> {
    DepthBucket::ALL
        .iter()
        .filter_map(|&b| {
            let inside: Vec<MatchedPair> =
                pairs.iter().filter(|p| p.depth_bucket == b).copied().collect();
            (!inside.is_empty()).then_some((b, inside))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub overall: DepthStats,
    pub intervals: Vec<(DepthBucket, DepthStats)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointReport {
    pub overall: ViewpointStats,
    pub intervals: Vec<(DepthBucket, ViewpointStats)>,
}

pub fn depth_metrics(pairs: &[MatchedPair]) -> Result<DepthReport, MetricsError> {
    Ok(DepthReport {
        overall: depth_stats(pairs)?,
        intervals: interval_breakdown(pairs)
            .into_iter()
            .map(|(b, ps)| depth_stats(&ps).map(|s| (b, s)))
            .collect::<Result<_, _>>()?,
    })
}

pub fn viewpoint_metrics(pairs: &[MatchedPair]) -> Result<ViewpointReport, MetricsError> {
    Ok(ViewpointReport {
        overall: viewpoint_stats(pairs)?,
        intervals: interval_breakdown(pairs)
            .into_iter()
            .map(|(b, ps)| viewpoint_stats(&ps).map(|s| (b, s)))
            .collect::<Result<_, _>>()?,
    })
}

fn opt4(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Aligned table, one row per method.
pub fn depth_table(rows: &[(&str, &DepthReport)]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
        "Method", "d<1.25", "AbsRel", "SqrRel", "RMSE", "RMSElog", "N"
    );
    for (name, r) in rows {
        let s = &r.overall;
        out += &format!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8} {:>6}\n",
            name, s.delta_125, s.abs_rel, s.sqr_rel, s.rmse, opt4(s.rmse_log), s.count
        );
    }
    out
}

pub fn viewpoint_table(rows: &[(&str, &ViewpointReport)]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>6}\n",
        "Method", "Acc_pi/4", "Acc_pi/6", "MedErr", "N"
    );
    for (name, r) in rows {
        let s = &r.overall;
        out += &format!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>6}\n",
            name, s.acc_pi4, s.acc_pi6, s.mederr, s.count
        );
    }
    out
}

/// Per-interval rows for a single method, both metric families side by side.
pub fn interval_table(depth: &DepthReport, view: &ViewpointReport) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "Depth", "N", "d<1.25", "AbsRel", "RMSE", "Acc_pi/4", "Acc_pi/6", "MedErr"
    );
    for ((b, d), (_, v)) in depth.intervals.iter().zip(&view.intervals) {
        out += &format!(
            "{:<8} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            b.label(),
            d.count,
            d.delta_125,
            d.abs_rel,
            d.rmse,
            v.acc_pi4,
            v.acc_pi6,
            v.mederr
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pair(z_gt: f64, z_pred: f64) -> MatchedPair {
        MatchedPair::new(z_gt, z_pred, 0.0, 0.0)
    }

    fn yaw_pair(err_deg: f64) -> MatchedPair {
        MatchedPair::new(20.0, 20.0, 0.3, 0.3 + err_deg.to_radians())
    }

    fn obj(cat: &str, l: f64, z: f64) -> EvalObject {
        EvalObject {
            category: cat.into(),
            box2d: Box2D::new(l, 100.0, l + 100.0, 200.0).unwrap(),
            z,
            yaw: 0.1,
        }
    }

    #[test]
    fn depth_examples() {
        let s = depth_stats(&[pair(10.0, 12.0)]).unwrap();
        assert_abs_diff_eq!(s.abs_rel, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sqr_rel, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(s.rmse, 2.0, epsilon = 1e-15);
        assert_eq!(s.delta_125, 1.0);
        assert_abs_diff_eq!(s.rmse_log.unwrap(), (1.2f64).ln(), epsilon = 1e-15);

        assert_eq!(depth_stats(&[pair(10.0, 13.0)]).unwrap().delta_125, 0.0);

        let exact = depth_stats(&[pair(10.0, 10.0), pair(33.0, 33.0)]).unwrap();
        assert_eq!((exact.abs_rel, exact.rmse, exact.delta_125), (0.0, 0.0, 1.0));
        assert_eq!(depth_stats(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn non_positive_prediction_is_excluded_from_log() {
        let s = depth_stats(&[pair(10.0, -1.0), pair(10.0, 10.0)]).unwrap();
        assert_eq!(s.rmse_log_excluded, 1);
        assert_eq!(s.rmse_log, Some(0.0));
        assert_eq!(s.delta_125, 0.5);
        assert_eq!(depth_stats(&[pair(10.0, 0.0)]).unwrap().rmse_log, None);
    }

    #[test]
    fn viewpoint_examples() {
        let s = viewpoint_stats(&[yaw_pair(0.0)]).unwrap();
        assert_eq!((s.acc_pi4, s.acc_pi6), (1.0, 1.0));
        assert_abs_diff_eq!(s.mederr, 0.0, epsilon = 1e-12);

        let s = viewpoint_stats(&[yaw_pair(40.0)]).unwrap();
        assert_eq!((s.acc_pi4, s.acc_pi6), (1.0, 0.0));

        let s = viewpoint_stats(&[yaw_pair(5.0), yaw_pair(20.0), yaw_pair(10.0)]).unwrap();
        assert_abs_diff_eq!(s.mederr, 10.0, epsilon = 1e-9);
        let s = viewpoint_stats(&[yaw_pair(5.0), yaw_pair(20.0), yaw_pair(10.0), yaw_pair(2.0)])
            .unwrap();
        assert_abs_diff_eq!(s.mederr, 7.5, epsilon = 1e-9);
        assert_eq!(viewpoint_stats(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn yaw_error_wraps() {
        let p = MatchedPair::new(5.0, 5.0, 3.1, -3.1);
        assert_abs_diff_eq!(p.yaw_error(), 2.0 * std::f64::consts::PI - 6.2, epsilon = 1e-12);
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(DepthBucket::of(10.0), DepthBucket::B10To20);
        assert_eq!(DepthBucket::of(9.999), DepthBucket::B0To10);
        assert_eq!(DepthBucket::of(50.0), DepthBucket::B50Plus);
        let all15 = interval_breakdown(&[pair(15.0, 14.0), pair(15.0, 16.0)]);
        assert_eq!(all15.len(), 1);
        assert_eq!(all15[0].0, DepthBucket::B10To20);
        let mixed: Vec<_> = [5.0, 15.0, 25.0, 35.0, 45.0, 80.0]
            .iter()
            .map(|&z| pair(z, z + 1.0))
            .collect();
        let b = interval_breakdown(&mixed);
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|(_, ps)| ps.len() == 1));
        assert!(interval_breakdown(&[]).is_empty());
    }

    #[test]
    fn matching_examples() {
        let gt = EvalFrame {
            frame_id: 3,
            objects: vec![obj("Car", 0.0, 10.0), obj("Car", 500.0, 20.0)],
        };
        let m = match_frames(&gt, &gt, 0.5).unwrap();
        assert_eq!(m.pairs.len(), 2);
        assert!(m.pairs.iter().all(|p| p.z_gt == p.z_pred && p.yaw_error() == 0.0));
        assert_eq!((m.precision(), m.recall()), (Some(1.0), Some(1.0)));

        let far = EvalFrame {
            frame_id: 3,
            objects: vec![obj("Car", 900.0, 10.0)],
        };
        assert!(match_frames(&far, &gt, 0.5).unwrap().pairs.is_empty());

        // two predictions over the first gt; the closer one wins
        let preds = EvalFrame {
            frame_id: 3,
            objects: vec![obj("Car", 30.0, 11.0), obj("Car", 5.0, 12.0)],
        };
        let m = match_frames(&preds, &gt, 0.5).unwrap();
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].z_pred, 12.0);
        assert_eq!(m.precision(), Some(0.5));

        let wrong_cat = EvalFrame {
            frame_id: 3,
            objects: vec![obj("Pedestrian", 0.0, 10.0)],
        };
        assert!(match_frames(&wrong_cat, &gt, 0.5).unwrap().pairs.is_empty());

        let other = EvalFrame { frame_id: 4, objects: vec![] };
        assert_eq!(
            match_frames(&other, &gt, 0.5),
            Err(MetricsError::FrameMismatch { pred: 4, gt: 3 })
        );
    }

    #[test]
    fn table_layout() {
        let pairs = [pair(10.0, 12.0), pair(25.0, 24.0)];
        let d = depth_metrics(&pairs).unwrap();
        let v = viewpoint_metrics(&pairs).unwrap();
        let t = depth_table(&[("fused", &d)]);
        assert!(t.lines().nth(1).unwrap().starts_with("fused"));
        assert!(t.contains("0.1200"));
        assert_eq!(interval_table(&d, &v).lines().count(), 3);
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<MatchedPair>> {
        prop::collection::vec(
            (0.5f64..90.0, -5.0f64..100.0, -3.2f64..3.2, -3.2f64..3.2)
                .prop_map(|(g, p, a, b)| MatchedPair::new(g, p, a, b)),
            1..40,
        )
    }

    proptest! {
        #[test]
        fn accuracy_thresholds_are_ordered(pairs in arb_pairs()) {
            let v = viewpoint_metrics(&pairs).unwrap();
            prop_assert!(v.overall.acc_pi6 <= v.overall.acc_pi4);
            for (_, s) in &v.intervals {
                prop_assert!(s.acc_pi6 <= s.acc_pi4);
            }
        }

        #[test]
        fn buckets_recombine(pairs in arb_pairs()) {
            let d = depth_metrics(&pairs).unwrap();
            let n = pairs.len() as f64;
            let total: usize = d.intervals.iter().map(|(_, s)| s.count).sum();
            prop_assert_eq!(total, pairs.len());
            let w = |f: fn(&DepthStats) -> f64| {
                d.intervals.iter().map(|(_, s)| s.count as f64 * f(s)).sum::<f64>() / n
            };
            prop_assert!((w(|s| s.abs_rel) - d.overall.abs_rel).abs() < 1e-12);
            prop_assert!((w(|s| s.sqr_rel) - d.overall.sqr_rel).abs() < 1e-9);
            prop_assert!((w(|s| s.delta_125) - d.overall.delta_125).abs() < 1e-12);
            prop_assert!((w(|s| s.rmse * s.rmse).sqrt() - d.overall.rmse).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariant(pairs in arb_pairs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = depth_stats(&pairs).unwrap();
            let b = depth_stats(&shuffled).unwrap();
            prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-12);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
            prop_assert_eq!(viewpoint_stats(&pairs).unwrap().mederr, viewpoint_stats(&shuffled).unwrap().mederr);
        }

        #[test]
        fn zero_iff_exact(pairs in arb_pairs()) {
            let exact: Vec<_> = pairs.iter().map(|p| MatchedPair { z_pred: p.z_gt, ..*p }).collect();
            let s = depth_stats(&exact).unwrap();
            prop_assert_eq!((s.abs_rel, s.sqr_rel, s.rmse, s.rmse_log), (0.0, 0.0, 0.0, Some(0.0)));
            let s = depth_stats(&pairs).unwrap();
            let any_diff = pairs.iter().any(|p| p.z_pred != p.z_gt);
            prop_assert_eq!(s.abs_rel > 0.0, any_diff);
        }
    }
}
