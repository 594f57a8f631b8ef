//! Interval matching and precision / recall / F1 reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{ExprClass, VideoRecord};
use crate::error::{Error, Result};
use crate::spotting::Proposal;

/// Default IoU needed for a proposal to count as a hit.
pub const K_EVAL: f64 = 0.5;

/// Intersection over union of two inclusive frame intervals.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

/// Hit counts for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Outcome of one-to-one matching.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub counts: Counts,
    /// `(proposal index, ground-truth index)` pairs.
    pub matches: Vec<(usize, usize)>,
}

/// One-to-one matching of `proposals` (ordered by descending confidence) to
/// ground-truth intervals; a pair is admissible when IoU ≥ `k_eval`.
///
/// Proposals are processed in order and each tries the admissible ground
/// truths by descending IoU, re-routing earlier matches along augmenting
/// paths when its preferred ones are taken. No proposal ever loses a match
/// once made, so the result is the largest achievable one-to-one matching
/// and, among those, favours the most confident proposals.
pub fn match_and_count(
    proposals: &[(usize, usize)],
    ground_truth: &[(usize, usize)],
    k_eval: f64,
) -> MatchResult {
    let candidates: Vec<Vec<usize>> = proposals
        .iter()
        .map(|&p| {
            let mut c: Vec<(f64, usize)> = ground_truth
                .iter()
                .enumerate()
                .map(|(j, &g)| (temporal_iou(p, g), j))
                .filter(|&(iou, _)| iou >= k_eval)
                .collect();
            c.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            c.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    let mut owner: Vec<Option<usize>> = vec![None; ground_truth.len()];
    fn augment(
        i: usize,
        candidates: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &j in &candidates[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            let free = match owner[j] {
                None => true,
                Some(other) => augment(other, candidates, owner, seen),
            };
            if free {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    for i in 0..proposals.len() {
        let mut seen = vec![false; ground_truth.len()];
        augment(i, &candidates, &mut owner, &mut seen);
    }

    let mut matches: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(j, o)| o.map(|i| (i, j)))
        .collect();
    matches.sort_unstable();
    let tp = matches.len();
    MatchResult {
        counts: Counts {
            tp,
            fp: proposals.len() - tp,
            fn_: ground_truth.len() - tp,
        },
        matches,
    }
}

/// Sort key: confidence descending, then onset, then offset.
pub fn confidence_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.onset_frame.cmp(&b.onset_frame))
        .then(a.offset_frame.cmp(&b.offset_frame))
}

fn count_subset<'a>(
    props: impl Iterator<Item = &'a Proposal>,
    gts: &[(usize, usize)],
    k_eval: f64,
) -> Counts {
    let mut sorted: Vec<&Proposal> = props.collect();
    sorted.sort_by(|a, b| confidence_order(a, b));
    let intervals: Vec<(usize, usize)> = sorted.iter().map(|p| (p.onset_frame, p.offset_frame)).collect();
    match_and_count(&intervals, gts, k_eval).counts
}

/// F1 on ME ground truths using proposals no longer than 0.5 s, no longer
/// than 1.0 s, and the ME-labelled members of the submitted set.
pub fn f1_me_suite(
    proposals: &[Proposal],
    records: &[VideoRecord],
    k_eval: f64,
) -> Result<(f64, f64, f64)> {
    let by_video = group(proposals, records)?;
    let mut c05 = Counts::default();
    let mut c10 = Counts::default();
    let mut cp = Counts::default();
    for r in records {
        let props = by_video.get(r.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let me_gt = gt_of(r, ExprClass::Me);
        let short = |limit: f64| {
            props
                .iter()
                .copied()
                .filter(move |p| p.duration_secs(r.fps) <= limit)
        };
        c05 = c05 + count_subset(short(0.5), &me_gt, k_eval);
        c10 = c10 + count_subset(short(1.0), &me_gt, k_eval);
        let me_labelled = props.iter().copied().filter(|p| p.class == ExprClass::Me);
        cp = cp + count_subset(me_labelled, &me_gt, k_eval);
    }
    Ok((c05.f1(), c10.f1(), cp.f1()))
}

fn gt_of(r: &VideoRecord, class: ExprClass) -> Vec<(usize, usize)> {
    r.ground_truth()
        .iter()
        .filter(|g| g.class == class)
        .map(|g| (g.onset_frame, g.offset_frame))
        .collect()
}

fn group<'a>(
    proposals: &'a [Proposal],
    records: &[VideoRecord],
) -> Result<BTreeMap<&'a str, Vec<&'a Proposal>>> {
    let known: std::collections::HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut map: BTreeMap<&str, Vec<&Proposal>> = BTreeMap::new();
    for p in proposals {
        if !known.contains(p.video_id.as_str()) {
            return Err(Error::Data(format!(
                "proposal refers to unknown video {}",
                p.video_id
            )));
        }
        map.entry(p.video_id.as_str()).or_default().push(p);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCounts {
    pub video_id: String,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k_eval: f64,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_me_05: f64,
    pub f1_me_10: f64,
    pub f1_me_p: f64,
    pub mae: Counts,
    pub me: Counts,
    pub per_video: Vec<VideoCounts>,
}

impl EvalReport {
    /// Builds a report from pooled per-class counts and ME variants.
    pub fn from_parts(
        k_eval: f64,
        mae: Counts,
        me: Counts,
        me_suite: (f64, f64, f64),
        per_video: Vec<VideoCounts>,
    ) -> Self {
        let counts = mae + me;
        EvalReport {
            k_eval,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            f1_me_05: me_suite.0,
            f1_me_10: me_suite.1,
            f1_me_p: me_suite.2,
            mae,
            me,
            per_video,
        }
    }

    /// Fixed-order text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, c: &Counts| {
            let _ = writeln!(
                out,
                "{name:<8} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}",
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            );
        };
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}",
            "class", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        row(&mut out, "mae", &self.mae);
        row(&mut out, "me", &self.me);
        row(&mut out, "overall", &self.counts);
        let _ = writeln!(
            out,
            "f1_me_05 {:.4}  f1_me_10 {:.4}  f1_me_p {:.4}  (k_eval {})",
            self.f1_me_05, self.f1_me_10, self.f1_me_p, self.k_eval
        );
        out
    }
}

/// Scores proposals against the ground truth in `records`. Each class's
/// proposals are matched against that class's intervals; counts are pooled.
/// Videos without ground truth contribute nothing.
pub fn evaluate(proposals: &[Proposal], records: &[VideoRecord], k_eval: f64) -> Result<EvalReport> {
    if !(k_eval > 0.0 && k_eval <= 1.0) {
        return Err(Error::Config(format!("k_eval must lie in (0, 1], got {k_eval}")));
    }
    let by_video = group(proposals, records)?;
    let mut totals = [Counts::default(); 2];
    let mut per_video = Vec::new();
    let mut evaluated = Vec::new();
    for r in records.iter().filter(|r| r.ground_truth.is_some()) {
        let props = by_video.get(r.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let mut video = Counts::default();
        for class in ExprClass::ALL {
            let c = count_subset(
                props.iter().copied().filter(|p| p.class == class),
                &gt_of(r, class),
                k_eval,
            );
            totals[class.column()] = totals[class.column()] + c;
            video = video + c;
        }
        per_video.push(VideoCounts {
            video_id: r.id.clone(),
            counts: video,
        });
        evaluated.push(r.clone());
    }
    let evaluated_props: Vec<Proposal> = proposals
        .iter()
        .filter(|p| evaluated.iter().any(|r| r.id == p.video_id))
        .cloned()
        .collect();
    let suite = f1_me_suite(&evaluated_props, &evaluated, k_eval)?;
    Ok(EvalReport::from_parts(k_eval, totals[0], totals[1], suite, per_video))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{GtInterval, Labels};
    use crate::testutil::rng;
    use rand::Rng;

    #[test]
    fn iou_fixtures() {
        assert_eq!(temporal_iou((11, 20), (16, 25)), 1.0 / 3.0);
        assert_eq!(temporal_iou((5, 9), (5, 9)), 1.0);
        assert_eq!(temporal_iou((1, 4), (5, 9)), 0.0);
        assert_eq!(temporal_iou((1, 1), (1, 2)), 0.5);
    }

    #[test]
    fn matching_fixtures() {
        let r = match_and_count(&[(1, 10)], &[(1, 10)], 0.5);
        assert_eq!(r.counts, Counts { tp: 1, fp: 0, fn_: 0 });
        let r = match_and_count(&[(1, 10), (1, 10)], &[(1, 10)], 0.5);
        assert_eq!(r.counts, Counts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(r.matches, vec![(0, 0)]);
        let r = match_and_count(&[], &[(1, 2), (5, 6), (9, 9)], 0.5);
        assert_eq!(r.counts, Counts { tp: 0, fp: 0, fn_: 3 });
    }

    #[test]
    fn augmenting_path_reroutes_earlier_match() {
        // proposal 0 prefers gt 0 but also fits gt 1; proposal 1 fits only gt 0
        let props = [(1, 16), (1, 8)];
        let gts = [(1, 8), (9, 16)];
        assert_eq!(temporal_iou(props[0], gts[0]), 0.5);
        let r = match_and_count(&props, &gts, 0.5);
        assert_eq!(r.counts.tp, 2);
        assert_eq!(r.matches, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rates_use_zero_conventions() {
        let c = Counts::default();
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
        let c = Counts { tp: 3, fp: 1, fn_: 2 };
        assert_eq!(c.precision(), 0.75);
        assert_eq!(c.recall(), 0.6);
        assert!((c.f1() - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
    }

    /// Largest one-to-one assignment by exhaustive search.
    fn exhaustive_tp(props: &[(usize, usize)], gts: &[(usize, usize)], k: f64) -> usize {
        fn go(i: usize, props: &[(usize, usize)], gts: &[(usize, usize)], used: &mut Vec<bool>, k: f64) -> usize {
            if i == props.len() {
                return 0;
            }
            let mut best = go(i + 1, props, gts, used, k);
            for j in 0..gts.len() {
                if !used[j] && temporal_iou(props[i], gts[j]) >= k {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, props, gts, used, k));
                    used[j] = false;
                }
            }
            best
        }
        go(0, props, gts, &mut vec![false; gts.len()], k)
    }

    fn random_intervals(r: &mut impl Rng, n: usize) -> Vec<(usize, usize)> {
        (0..n)
            .map(|_| {
                let s = r.random_range(1..40);
                (s, s + r.random_range(0..10))
            })
            .collect()
    }

    #[test]
    fn matching_equals_exhaustive_assignment() {
        let mut r = rng(1);
        for _ in 0..300 {
            let (np, ng) = (r.random_range(0..8), r.random_range(0..6));
            let props = random_intervals(&mut r, np);
            let gts = random_intervals(&mut r, ng);
            let res = match_and_count(&props, &gts, 0.5);
            assert_eq!(res.counts.tp, exhaustive_tp(&props, &gts, 0.5), "{props:?} {gts:?}");
            assert_eq!(res.counts.tp + res.counts.fp, props.len());
            assert_eq!(res.counts.tp + res.counts.fn_, gts.len());
            let mut seen_p = std::collections::HashSet::new();
            let mut seen_g = std::collections::HashSet::new();
            for &(i, j) in &res.matches {
                assert!(seen_p.insert(i) && seen_g.insert(j));
                assert!(temporal_iou(props[i], gts[j]) >= 0.5);
            }
        }
    }

    fn record(id: &str, gt: Vec<GtInterval>) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            subject: "s".into(),
            fps: 30.0,
            frame_count: 400,
            snippet_len: 8,
            labels: Labels::new(
                gt.iter().any(|g| g.class == ExprClass::Mae),
                gt.iter().any(|g| g.class == ExprClass::Me),
            ),
            ground_truth: Some(gt),
        }
    }

    fn prop(id: &str, on: usize, off: usize, conf: f64) -> Proposal {
        Proposal::new(id, on, off, 30.0, conf)
    }

    fn gt(on: usize, off: usize, class: ExprClass) -> GtInterval {
        GtInterval {
            onset_frame: on,
            offset_frame: off,
            class,
        }
    }

    #[test]
    fn me_suite_duration_buckets() {
        // two ME truths; one found by a 0.4 s proposal, the other by 0.7 s
        let rec = record("v", vec![gt(1, 12, ExprClass::Me), gt(101, 112, ExprClass::Me)]);
        let props = vec![prop("v", 1, 12, 0.9), prop("v", 97, 117, 0.8)];
        assert!((props[1].duration_secs(30.0) - 0.7).abs() < 1e-12);
        let (f05, f10, fp) = f1_me_suite(&props, &[rec], 0.5).unwrap();
        // ≤0.5 s: tp 1, fp 0, fn 1
        assert!((f05 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(f10, 1.0);
        assert_eq!(fp, f05);
    }

    #[test]
    fn empty_suite_is_zero() {
        let rec = record("v", vec![gt(1, 60, ExprClass::Mae)]);
        let props = vec![prop("v", 1, 60, 0.9)];
        assert_eq!(f1_me_suite(&props, &[rec], 0.5).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn evaluate_is_class_aware_and_order_invariant() {
        let recs = vec![
            record("a", vec![gt(1, 40, ExprClass::Mae), gt(81, 88, ExprClass::Me)]),
            record("b", vec![gt(9, 64, ExprClass::Mae)]),
        ];
        let mut props = vec![
            prop("a", 1, 40, 0.9),
            prop("a", 81, 88, 0.5),
            prop("b", 9, 64, 0.7),
            prop("b", 200, 207, 0.3),
        ];
        let report = evaluate(&props, &recs, 0.5).unwrap();
        assert_eq!(report.mae, Counts { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(report.me, Counts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(report.counts, Counts { tp: 3, fp: 1, fn_: 0 });
        let pooled: Counts = report.per_video.iter().map(|v| v.counts).sum();
        assert_eq!(pooled, report.counts);
        props.reverse();
        assert_eq!(evaluate(&props, &recs, 0.5).unwrap(), report);

        let json = serde_json::to_value(&report).unwrap();
        for key in ["tp", "fp", "fn", "precision", "recall", "f1", "f1_me_05", "f1_me_10", "f1_me_p", "per_video"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(report.table().contains("overall"));
    }

    #[test]
    fn unknown_video_is_a_data_error() {
        let recs = vec![record("a", vec![])];
        let props = vec![prop("zz", 1, 8, 0.5)];
        assert!(matches!(evaluate(&props, &recs, 0.5), Err(Error::Data(_))));
        assert!(matches!(evaluate(&[], &recs, 0.0), Err(Error::Config(_))));
    }
}
