//! Threshold-based and rank-based evaluation of binary classifiers.
//!
//! Everything here is a pure function of its inputs: confusion matrices at a
//! fixed decision threshold, ROC curves swept over all thresholds, AUC in both
//! its geometric (trapezoid) and rank (Wilcoxon-Mann-Whitney) forms, PR curves,
//! and the usual ACC/P/R/F1 summary.
//!
//! Conventions:
//! - Labels are `+1` (positive / GAN) and `-1` (negative / real).
//! - At a threshold `t`, a negative counts as a false positive when its score
//!   is strictly greater than `t`, while a positive counts as a true positive
//!   when its score is greater than or equal to `t`.
//! - Tied positive/negative scores contribute 0.5 to [`auc_wmw`]. The rank
//!   statistic is otherwise only defined for distinct scores, so the tie rule
//!   is an extension and documented as such.

use crate::error::{Error, Result};

/// Prediction scores with their ±1 labels.
///
/// Scores must lie in `[0, 1]` (they are post-sigmoid probabilities) and there
/// must be at least one sample. The positive/negative index partition is
/// derived from the labels.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<i8>,
    num_pos: usize,
    num_neg: usize,
}

impl ScoreSet {
    /// Builds a score set, validating lengths, score range and label values.
    pub fn new(scores: Vec<f64>, labels: Vec<i8>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyScoreSet);
        }
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "ScoreSet".into(),
                expected: format!("{} labels", scores.len()),
                actual: format!("{} labels", labels.len()),
            });
        }
        for &s in &scores {
            if !(0.0..=1.0).contains(&s) || !s.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "score {s} outside [0,1]"
                )));
            }
        }
        let mut num_pos = 0;
        let mut num_neg = 0;
        for &y in &labels {
            match y {
                1 => num_pos += 1,
                -1 => num_neg += 1,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "label {other} is not in {{-1,+1}}"
                    )))
                }
            }
        }
        Ok(Self {
            scores,
            labels,
            num_pos,
            num_neg,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty sets
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn num_pos(&self) -> usize {
        self.num_pos
    }

    pub fn num_neg(&self) -> usize {
        self.num_neg
    }

    pub fn has_both_classes(&self) -> bool {
        self.num_pos > 0 && self.num_neg > 0
    }

    /// Scores of the positive samples, in input order.
    pub fn positive_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == 1)
            .map(|(&s, _)| s)
    }

    /// Scores of the negative samples, in input order.
    pub fn negative_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == -1)
            .map(|(&s, _)| s)
    }
}

/// Counts of a binary decision at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn tpr(&self) -> f64 {
        let p = self.true_pos + self.false_neg;
        if p == 0 {
            0.0
        } else {
            self.true_pos as f64 / p as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        let n = self.false_pos + self.true_neg;
        if n == 0 {
            0.0
        } else {
            self.false_pos as f64 / n as f64
        }
    }
}

/// A threshold-swept ROC curve: `(fpr, tpr)` points and the thresholds that
/// generated them, ordered from the all-negative to the all-positive decision.
#[derive(Debug, Clone)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

/// Confusion counts at a fixed decision threshold.
///
/// Negatives with score strictly above the threshold are false positives;
/// positives with score at or above it are true positives.
pub fn confusion_at(scores: &ScoreSet, threshold: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    for (&s, &y) in scores.scores.iter().zip(&scores.labels) {
        if y == 1 {
            if s >= threshold {
                cm.true_pos += 1;
            } else {
                cm.false_neg += 1;
            }
        } else if s > threshold {
            cm.false_pos += 1;
        } else {
            cm.true_neg += 1;
        }
    }
    cm
}

/// Sweeps the decision threshold over every distinct score value.
///
/// The curve holds one point per distinct score plus the two degenerate
/// endpoints `(0,0)` (threshold `+inf`) and `(1,1)` (threshold `-inf`). The
/// point stored for a threshold `t` treats every sample with score `>= t` as
/// predicted positive, so the staircase visits each corner and its trapezoid
/// area equals the pairwise ranking statistic of [`auc_wmw`], including the
/// 0.5 tie convention.
pub fn roc(scores: &ScoreSet) -> Result<RocCurve> {
    if !scores.has_both_classes() {
        return Err(Error::SingleClass("ROC"));
    }
    // Distinct scores, descending, with per-class counts at each value.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]));

    let p = scores.num_pos as f64;
    let n = scores.num_neg as f64;
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let mut cum_pos = 0usize;
    let mut cum_neg = 0usize;
    let mut i = 0;
    while i < order.len() {
        let value = scores.scores[order[i]];
        while i < order.len() && scores.scores[order[i]] == value {
            if scores.labels[order[i]] == 1 {
                cum_pos += 1;
            } else {
                cum_neg += 1;
            }
            i += 1;
        }
        points.push((cum_neg as f64 / n, cum_pos as f64 / p));
        thresholds.push(value);
    }
    points.push((1.0, 1.0));
    thresholds.push(f64::NEG_INFINITY);
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area under an ordered ROC curve.
pub fn auc_trapezoid(curve: &RocCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::InvalidConfig(
            "ROC curve needs at least 2 points".into(),
        ));
    }
    let mut area = 0.0;
    for w in curve.points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * (y0 + y1) * 0.5;
    }
    Ok(area)
}

/// Rank-form AUC: the fraction of positive/negative pairs ordered correctly,
/// with ties counting 0.5.
///
/// Computed from midrank sums in `O(M log M)` rather than by enumerating the
/// `|P|·|N|` pairs; the two routes are checked against each other in tests.
pub fn auc_wmw(scores: &ScoreSet) -> Result<f64> {
    if !scores.has_both_classes() {
        return Err(Error::SingleClass("AUC"));
    }
    let m = scores.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]));

    // Midranks: tied values share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < m {
        let value = scores.scores[order[i]];
        let mut j = i;
        while j < m && scores.scores[order[j]] == value {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // average of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if scores.labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = scores.num_pos as f64;
    let nn = scores.num_neg as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// ACC/P/R/F1 at one threshold plus the threshold-free AUC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

impl MetricSummary {
    /// Flat `key=value` text block, one metric per line.
    pub fn to_kv_block(&self) -> String {
        format!(
            "acc={}\np={}\nr={}\nf1={}\nauc={}\n",
            self.acc, self.precision, self.recall, self.f1, self.auc
        )
    }
}

/// Full summary at a decision threshold.
///
/// Precision is defined as 0 when nothing is predicted positive, which keeps
/// F1 well-defined; the PR curve instead anchors its origin at precision 1.
pub fn summary(scores: &ScoreSet, threshold: f64) -> Result<MetricSummary> {
    if !scores.has_both_classes() {
        return Err(Error::SingleClass("metric summary"));
    }
    let cm = confusion_at(scores, threshold);
    let m = cm.total() as f64;
    let acc = (cm.true_pos + cm.true_neg) as f64 / m;
    let precision = if cm.true_pos + cm.false_pos == 0 {
        0.0
    } else {
        cm.true_pos as f64 / (cm.true_pos + cm.false_pos) as f64
    };
    let recall = cm.true_pos as f64 / (cm.true_pos + cm.false_neg) as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let auc = auc_wmw(scores)?;
    Ok(MetricSummary {
        acc,
        precision,
        recall,
        f1,
        auc,
    })
}

/// Precision-recall curve as `(recall, precision)` points ordered by
/// increasing recall, anchored at `(0, 1)` by convention.
pub fn pr_curve(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    if !scores.has_both_classes() {
        return Err(Error::SingleClass("PR curve"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]));

    let p = scores.num_pos as f64;
    let mut points = vec![(0.0, 1.0)];
    let mut cum_pos = 0usize;
    let mut cum_neg = 0usize;
    let mut i = 0;
    while i < order.len() {
        let value = scores.scores[order[i]];
        while i < order.len() && scores.scores[order[i]] == value {
            if scores.labels[order[i]] == 1 {
                cum_pos += 1;
            } else {
                cum_neg += 1;
            }
            i += 1;
        }
        let recall = cum_pos as f64 / p;
        let precision = cum_pos as f64 / (cum_pos + cum_neg) as f64;
        points.push((recall, precision));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(pos: &[f64], neg: &[f64]) -> ScoreSet {
        let mut scores = pos.to_vec();
        scores.extend_from_slice(neg);
        let mut labels = vec![1i8; pos.len()];
        labels.extend(vec![-1i8; neg.len()]);
        ScoreSet::new(scores, labels).unwrap()
    }

    /// Independent oracle: count correctly ordered pairs one by one.
    fn brute_force_auc(scores: &ScoreSet) -> f64 {
        let mut sum = 0.0;
        for gp in scores.positive_scores() {
            for gn in scores.negative_scores() {
                if gp > gn {
                    sum += 1.0;
                } else if gp == gn {
                    sum += 0.5;
                }
            }
        }
        sum / (scores.num_pos() * scores.num_neg()) as f64
    }

    #[test]
    fn confusion_perfect_separation() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let cm = confusion_at(&s, 0.5);
        assert_eq!(cm.true_pos, 2);
        assert_eq!(cm.false_pos, 0);
        assert_eq!(cm.true_neg, 2);
        assert_eq!(cm.false_neg, 0);
    }

    #[test]
    fn confusion_inequality_conventions_at_tie() {
        // score == threshold: positive counts (>=), negative does not (>)
        let s = set(&[0.5], &[0.5]);
        let cm = confusion_at(&s, 0.5);
        assert_eq!(cm.true_pos, 1);
        assert_eq!(cm.false_pos, 0);
        assert_eq!(cm.true_neg, 1);
        assert_eq!(cm.false_neg, 0);
    }

    #[test]
    fn confusion_degenerate_thresholds() {
        let s = set(&[0.7, 0.3], &[0.6, 0.2]);
        let lo = confusion_at(&s, f64::NEG_INFINITY);
        assert_eq!((lo.fpr(), lo.tpr()), (1.0, 1.0));
        let hi = confusion_at(&s, f64::INFINITY);
        assert_eq!((hi.fpr(), hi.tpr()), (0.0, 0.0));
    }

    #[test]
    fn roc_includes_named_points() {
        let s = set(&[0.9], &[0.1]);
        let curve = roc(&s).unwrap();
        for want in [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            assert!(curve.points.contains(&want), "missing {want:?}");
        }
    }

    #[test]
    fn roc_staircase_matches_hand_enumeration() {
        // Thresholds swept over {0.6, 0.4, 0.2, 0.1}: the negative at 0.4
        // outranks the positive at 0.2, so one of four pairs is inverted.
        let s = set(&[0.6, 0.2], &[0.4, 0.1]);
        let curve = roc(&s).unwrap();
        assert_eq!(
            curve.points,
            vec![
                (0.0, 0.0),
                (0.0, 0.5),
                (0.5, 0.5),
                (0.5, 1.0),
                (1.0, 1.0),
                (1.0, 1.0)
            ]
        );
        let area = auc_trapezoid(&curve).unwrap();
        assert!((area - 0.75).abs() < 1e-15);
    }

    #[test]
    fn roc_fully_inverted_ranking() {
        let s = set(&[0.1], &[0.9]);
        let area = auc_trapezoid(&roc(&s).unwrap()).unwrap();
        assert_eq!(area, 0.0);
    }

    #[test]
    fn roc_rejects_single_class() {
        let scores = ScoreSet::new(vec![0.2, 0.4], vec![1, 1]).unwrap();
        assert!(matches!(roc(&scores), Err(Error::SingleClass(_))));
    }

    #[test]
    fn trapezoid_on_fixed_curves() {
        let perfect = RocCurve {
            points: vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)],
            thresholds: vec![f64::INFINITY, 0.5, f64::NEG_INFINITY],
        };
        assert_eq!(auc_trapezoid(&perfect).unwrap(), 1.0);
        let diagonal = RocCurve {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
            thresholds: vec![f64::INFINITY, f64::NEG_INFINITY],
        };
        assert_eq!(auc_trapezoid(&diagonal).unwrap(), 0.5);
        let single = RocCurve {
            points: vec![(0.0, 0.0)],
            thresholds: vec![f64::INFINITY],
        };
        assert!(auc_trapezoid(&single).is_err());
    }

    #[test]
    fn wmw_hand_cases() {
        assert_eq!(auc_wmw(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auc_wmw(&set(&[0.6, 0.2], &[0.4, 0.1])).unwrap(), 0.75);
        assert_eq!(auc_wmw(&set(&[0.5], &[0.5])).unwrap(), 0.5);
    }

    #[test]
    fn summary_perfect_table_counts() {
        // 750 positives, 748 negatives, all classified correctly.
        let mut scores = vec![0.9; 750];
        scores.extend(vec![0.1; 748]);
        let mut labels = vec![1i8; 750];
        labels.extend(vec![-1i8; 748]);
        let s = ScoreSet::new(scores, labels).unwrap();
        let m = summary(&s, 0.5).unwrap();
        assert_eq!(
            (m.acc, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn summary_imbalanced_hand_case() {
        // tp=85, fn=15, fp=10, tn=490
        let mut scores = vec![0.9; 85];
        scores.extend(vec![0.1; 15]);
        scores.extend(vec![0.8; 10]);
        scores.extend(vec![0.2; 490]);
        let mut labels = vec![1i8; 100];
        labels.extend(vec![-1i8; 500]);
        let s = ScoreSet::new(scores, labels).unwrap();
        let m = summary(&s, 0.5).unwrap();
        assert!((m.recall - 0.85).abs() < 1e-12);
        assert!((m.precision - 85.0 / 95.0).abs() < 1e-12);
        assert!((m.f1 - 0.8717948717948718).abs() < 1e-10);
        assert!((m.acc - 575.0 / 600.0).abs() < 1e-12);
    }

    #[test]
    fn summary_all_negative_predictor() {
        let mut scores = vec![0.1; 100];
        scores.extend(vec![0.1; 500]);
        let mut labels = vec![1i8; 100];
        labels.extend(vec![-1i8; 500]);
        let s = ScoreSet::new(scores, labels).unwrap();
        let m = summary(&s, 0.5).unwrap();
        assert!((m.acc - 500.0 / 600.0).abs() < 1e-12);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn pr_curve_perfect_and_reversed() {
        let perfect = pr_curve(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        // first point at each recall level keeps precision 1.0
        assert!(perfect.contains(&(0.0, 1.0)));
        assert!(perfect.contains(&(0.5, 1.0)));
        assert!(perfect.contains(&(1.0, 1.0)));

        let reversed = pr_curve(&set(&[0.1], &[0.9])).unwrap();
        // prevalence is 1/2; the recall-1.0 point carries it
        assert_eq!(*reversed.last().unwrap(), (1.0, 0.5));
    }

    #[test]
    fn pr_curve_threshold_sweep_oracle() {
        let s = set(&[0.6, 0.2], &[0.4, 0.1]);
        let got = pr_curve(&s).unwrap();
        // sweep by hand over distinct scores {0.6, 0.4, 0.2, 0.1}
        let want = vec![
            (0.0, 1.0),
            (0.5, 1.0),       // t=0.6: tp=1 fp=0
            (0.5, 0.5),       // t=0.4: tp=1 fp=1
            (1.0, 2.0 / 3.0), // t=0.2: tp=2 fp=1
            (1.0, 0.5),       // t=0.1: tp=2 fp=2
        ];
        assert_eq!(got.len(), want.len());
        for ((gr, gp), (wr, wp)) in got.iter().zip(&want) {
            assert!((gr - wr).abs() < 1e-15 && (gp - wp).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_rejected() {
        assert!(matches!(
            ScoreSet::new(vec![], vec![]),
            Err(Error::EmptyScoreSet)
        ));
        assert!(ScoreSet::new(vec![0.5], vec![]).is_err());
        assert!(ScoreSet::new(vec![1.5], vec![1]).is_err());
        assert!(ScoreSet::new(vec![0.5], vec![0]).is_err());
    }

    prop_compose! {
        /// Tie-free score set with both classes, sizes 2..=60.
        fn tie_free_set()(
            num_pos in 1usize..30,
            num_neg in 1usize..30,
            seed in any::<u64>(),
        ) -> ScoreSet {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = num_pos + num_neg;
            // distinct grid values guarantee no ties
            let mut grid: Vec<f64> = (0..4 * m).map(|i| i as f64 / (4 * m) as f64).collect();
            grid.shuffle(&mut rng);
            let scores: Vec<f64> = grid[..m].to_vec();
            let mut labels = vec![1i8; num_pos];
            labels.extend(vec![-1i8; num_neg]);
            ScoreSet::new(scores, labels).unwrap()
        }
    }

    proptest! {
        #[test]
        fn prop_trapezoid_equals_wmw_equals_brute_force(s in tie_free_set()) {
            let trap = auc_trapezoid(&roc(&s).unwrap()).unwrap();
            let wmw = auc_wmw(&s).unwrap();
            let brute = brute_force_auc(&s);
            prop_assert!((trap - wmw).abs() < 1e-12, "trap={trap} wmw={wmw}");
            prop_assert!((wmw - brute).abs() < 1e-12, "wmw={wmw} brute={brute}");
        }

        #[test]
        fn prop_wmw_invariant_under_monotone_transform(s in tie_free_set()) {
            let before = auc_wmw(&s).unwrap();
            let transformed: Vec<f64> = s.scores().iter().map(|&x| x * x * 0.5 + 0.4 * x).collect();
            let t = ScoreSet::new(transformed, s.labels().to_vec()).unwrap();
            prop_assert!((auc_wmw(&t).unwrap() - before).abs() < 1e-12);
        }

        #[test]
        fn prop_score_and_label_symmetry(s in tie_free_set()) {
            let before = auc_wmw(&s).unwrap();
            // flip scores AND labels: AUC unchanged
            let flipped_scores: Vec<f64> = s.scores().iter().map(|&x| 1.0 - x).collect();
            let flipped_labels: Vec<i8> = s.labels().iter().map(|&y| -y).collect();
            let both = ScoreSet::new(flipped_scores, flipped_labels.clone()).unwrap();
            prop_assert!((auc_wmw(&both).unwrap() - before).abs() < 1e-12);
            // flip labels only: AUC -> 1 - AUC
            let labels_only = ScoreSet::new(s.scores().to_vec(), flipped_labels).unwrap();
            prop_assert!((auc_wmw(&labels_only).unwrap() - (1.0 - before)).abs() < 1e-12);
        }

        #[test]
        fn prop_confusion_partitions_classes(s in tie_free_set(), t in -0.5f64..1.5) {
            let cm = confusion_at(&s, t);
            prop_assert_eq!(cm.true_pos + cm.false_neg, s.num_pos());
            prop_assert_eq!(cm.false_pos + cm.true_neg, s.num_neg());
        }

        #[test]
        fn prop_roc_monotone_and_bounded(s in tie_free_set()) {
            let curve = roc(&s).unwrap();
            prop_assert_eq!(*curve.points.first().unwrap(), (0.0, 0.0));
            prop_assert_eq!(*curve.points.last().unwrap(), (1.0, 1.0));
            for w in curve.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0, "fpr must be nondecreasing");
            }
            for &(x, y) in &curve.points {
                prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
            }
        }
    }
}
