//! Closed- and open-set metrics: per-class accuracy, the DCASE weighted score,
//! ROC/AUROC of unknownness scores and score histograms.

use std::collections::BTreeMap;
use std::io::Write;

use crate::classifier::LogitRecord;
use crate::dataio::LabelKind;
use crate::decision::{OpenSetDecision, Outcome};
use crate::error::{Error, Result};

fn is_correct(outcome: Outcome, truth: LabelKind) -> bool {
    match (outcome, truth) {
        (Outcome::Known(p), LabelKind::Known(t)) => p == t,
        (Outcome::Unknown, LabelKind::Unknown) => true,
        _ => false,
    }
}

/// Accuracy for every known class and the unknown class. Classes absent from
/// the ground truth map to `None`.
pub fn class_accuracies(pairs: &[(Outcome, LabelKind)], num_known: usize) -> Result<BTreeMap<LabelKind, Option<f64>>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no decisions to score".into()));
    }
    let mut counts: BTreeMap<LabelKind, (usize, usize)> =
        (0..num_known).map(LabelKind::Known).chain(std::iter::once(LabelKind::Unknown)).map(|k| (k, (0, 0))).collect();
    for &(outcome, truth) in pairs {
        let entry = counts
            .get_mut(&truth)
            .ok_or_else(|| Error::InvalidInput(format!("label {truth:?} outside {num_known} known classes")))?;
        entry.1 += 1;
        if is_correct(outcome, truth) {
            entry.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(k, (correct, total))| {
            if total == 0 {
                log::warn!("class {k:?} has no test examples; accuracy undefined");
                (k, None)
            } else {
                (k, Some(correct as f64 / total as f64))
            }
        })
        .collect())
}

/// Open-set score in percent: `ACC = 0.5 * ACC_K + 0.5 * ACC_U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcaseScore {
    pub acc_known: f64,
    pub acc_unknown: f64,
    pub acc: f64,
}

impl DcaseScore {
    pub fn from_components(acc_known: f64, acc_unknown: f64) -> Self {
        Self { acc_known, acc_unknown, acc: 0.5 * acc_known + 0.5 * acc_unknown }
    }
}

/// ACC_K is the unweighted mean over defined known-class accuracies.
pub fn dcase_score(per_class: &BTreeMap<LabelKind, Option<f64>>) -> Result<DcaseScore> {
    let known: Vec<f64> =
        per_class.iter().filter(|(k, _)| matches!(k, LabelKind::Known(_))).filter_map(|(_, a)| *a).collect();
    if known.is_empty() {
        return Err(Error::InvalidInput("no known class has test examples".into()));
    }
    let unknown = per_class
        .get(&LabelKind::Unknown)
        .copied()
        .flatten()
        .ok_or_else(|| Error::InvalidInput("unknown class has no test examples".into()))?;
    let acc_k = 100.0 * known.iter().sum::<f64>() / known.len() as f64;
    Ok(DcaseScore::from_components(acc_k, 100.0 * unknown))
}

/// Fraction of known-truth records whose arg-max matches the truth.
pub fn closed_set_accuracy(records: &[LogitRecord]) -> Result<f64> {
    let known: Vec<_> = records
        .iter()
        .filter_map(|r| match r.truth {
            LabelKind::Known(t) => Some(r.predicted == t),
            LabelKind::Unknown => None,
        })
        .collect();
    if known.is_empty() {
        return Err(Error::UndefinedMetric("no known-class records".into()));
    }
    Ok(known.iter().filter(|&&c| c).count() as f64 / known.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// `(false positive rate, true positive rate)` from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
}

fn check_scores(scores: &[f64], positive: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both known and unknown examples".into()));
    }
    Ok((p, n))
}

/// ROC of "unknown" (positive) against "known" by sweeping every distinct
/// score as a threshold, highest first; area by trapezoids. Tied scores move
/// in a single step, so ties contribute one half.
pub fn auroc(scores: &[f64], is_unknown: &[bool]) -> Result<Roc> {
    let (p, n) = check_scores(scores, is_unknown)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_unknown[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("starts with origin");
        let (x1, y1) = (fp as f64 / n as f64, tp as f64 / p as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
    }
    Ok(Roc { auc, points })
}

/// Mann-Whitney U / (P * N) from mid-ranks.
pub fn mann_whitney_auc(scores: &[f64], is_unknown: &[bool]) -> Result<f64> {
    let (p, n) = check_scores(scores, is_unknown)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += order[i..j].iter().filter(|&&k| is_unknown[k]).count() as f64 * mid;
        i = j;
    }
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p * n) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histograms {
    /// `bins + 1` equal-width edges over the joint score range.
    pub edges: Vec<f64>,
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

pub fn score_histograms(scores: &[f64], is_unknown: &[bool], bins: usize) -> Result<Histograms> {
    if bins < 2 {
        return Err(Error::InvalidParameter("histograms need at least two bins".into()));
    }
    if scores.len() != is_unknown.len() {
        return Err(Error::InvalidInput("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if scores.is_empty() { (0.0, 1.0) } else { (lo, hi) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut known = vec![0; bins];
    let mut unknown = vec![0; bins];
    for (&s, &u) in scores.iter().zip(is_unknown) {
        let b = if width > 0.0 { (((s - lo) / width) as usize).min(bins - 1) } else { 0 };
        if u {
            unknown[b] += 1;
        } else {
            known[b] += 1;
        }
    }
    Ok(Histograms { edges, known, unknown })
}

/// Everything reported for one back-end on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub backend: String,
    pub per_class: BTreeMap<LabelKind, Option<f64>>,
    pub score: DcaseScore,
    pub roc: Roc,
    pub histograms: Histograms,
}

pub fn evaluate(
    backend: &str,
    decisions: &[OpenSetDecision],
    truths: &[LabelKind],
    num_known: usize,
    bins: usize,
) -> Result<EvaluationReport> {
    if decisions.len() != truths.len() {
        return Err(Error::InvalidInput("one ground-truth label is needed per decision".into()));
    }
    let pairs: Vec<(Outcome, LabelKind)> = decisions.iter().map(|d| d.outcome).zip(truths.iter().copied()).collect();
    let per_class = class_accuracies(&pairs, num_known)?;
    let score = dcase_score(&per_class)?;
    let scores: Vec<f64> = decisions.iter().map(|d| d.unknownness).collect();
    let flags: Vec<bool> = truths.iter().map(|t| *t == LabelKind::Unknown).collect();
    let roc = auroc(&scores, &flags)?;
    let histograms = score_histograms(&scores, &flags, bins)?;
    Ok(EvaluationReport { backend: backend.to_string(), per_class, score, roc, histograms })
}

impl EvaluationReport {
    /// `key: value` lines; class names come from `class_names` when given.
    pub fn write_summary<W: Write>(&self, class_names: &[String], mut w: W) -> Result<()> {
        writeln!(w, "backend: {}", self.backend)?;
        writeln!(w, "acc_known: {:.4}", self.score.acc_known)?;
        writeln!(w, "acc_unknown: {:.4}", self.score.acc_unknown)?;
        writeln!(w, "acc: {:.4}", self.score.acc)?;
        writeln!(w, "auroc: {:.6}", self.roc.auc)?;
        for (k, a) in &self.per_class {
            let name = match k {
                LabelKind::Known(c) => class_names.get(*c).cloned().unwrap_or_else(|| format!("class_{c}")),
                LabelKind::Unknown => "unknown".into(),
            };
            match a {
                Some(a) => writeln!(w, "accuracy.{name}: {:.4}", 100.0 * a)?,
                None => writeln!(w, "accuracy.{name}: undefined")?,
            }
        }
        Ok(())
    }

    pub fn write_roc<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "fpr\ttpr")?;
        for (x, y) in &self.roc.points {
            writeln!(w, "{x:.8}\t{y:.8}")?;
        }
        Ok(())
    }

    pub fn write_histograms<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "lower\tupper\tknown\tunknown")?;
        let h = &self.histograms;
        for i in 0..h.known.len() {
            writeln!(w, "{:e}\t{:e}\t{}\t{}", h.edges[i], h.edges[i + 1], h.known[i], h.unknown[i])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(scores: &[f64], unknown: &[bool]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (&su, _) in scores.iter().zip(unknown).filter(|(_, &u)| u) {
            for (&sk, _) in scores.iter().zip(unknown).filter(|(_, &u)| !u) {
                pairs += 1.0;
                if su > sk {
                    wins += 1.0;
                } else if su == sk {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_and_counted_accuracies() {
        let k = LabelKind::Known;
        let all = [(Outcome::Known(0), k(0)), (Outcome::Known(1), k(1)), (Outcome::Unknown, LabelKind::Unknown)];
        let acc = class_accuracies(&all, 2).unwrap();
        assert!(acc.values().all(|a| *a == Some(1.0)));

        let mixed = [
            (Outcome::Known(0), k(0)),
            (Outcome::Known(1), k(0)),
            (Outcome::Known(1), k(1)),
            (Outcome::Known(1), k(1)),
            (Outcome::Known(0), LabelKind::Unknown),
        ];
        let acc = class_accuracies(&mixed, 2).unwrap();
        assert_eq!(acc[&k(0)], Some(0.5));
        assert_eq!(acc[&k(1)], Some(1.0));
        assert_eq!(acc[&LabelKind::Unknown], Some(0.0));
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let pairs = [(Outcome::Known(0), LabelKind::Known(0)), (Outcome::Unknown, LabelKind::Unknown)];
        let acc = class_accuracies(&pairs, 3).unwrap();
        assert_eq!(acc[&LabelKind::Known(2)], None);
        let s = dcase_score(&acc).unwrap();
        assert_eq!(s.acc_known, 100.0);
        assert_eq!(s.acc, 100.0);
    }

    #[test]
    fn missing_unknown_class() {
        let pairs = [(Outcome::Known(0), LabelKind::Known(0))];
        let acc = class_accuracies(&pairs, 1).unwrap();
        assert!(matches!(dcase_score(&acc), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn weighted_score_examples() {
        assert!((DcaseScore::from_components(60.2, 70.4).acc - 65.3).abs() < 1e-9);
        assert!((DcaseScore::from_components(59.2, 72.8).acc - 66.0).abs() < 1e-9);
        assert_eq!(DcaseScore::from_components(100.0, 100.0).acc, 100.0);
    }

    #[test]
    fn published_rows_within_rounding() {
        // (ACC_K, ACC_U, printed ACC); two rows sit exactly on a rounding boundary
        let rows = [
            (63.8, 35.9, 49.9),
            (55.3, 56.5, 55.9),
            (45.8, 76.2, 61.0),
            (46.7, 60.9, 53.8),
            (60.2, 70.4, 65.3),
            (65.9, 33.3, 49.6),
            (57.3, 49.3, 53.3),
            (48.8, 66.4, 57.6),
            (38.9, 74.8, 56.8),
            (59.2, 72.8, 66.0),
        ];
        for (k, u, acc) in rows {
            let s = DcaseScore::from_components(k, u);
            assert!((s.acc - acc).abs() <= 0.05 + 1e-9, "{k}/{u}: {} vs {acc}", s.acc);
        }
    }

    #[test]
    fn auroc_examples() {
        let sep = auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(sep.auc, 1.0);
        let tied = auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(tied.auc, 0.5);
        let scores = [0.9, 0.8, 0.7, 0.85];
        let labels = [true, true, false, false];
        assert!((auroc(&scores, &labels).unwrap().auc - 0.75).abs() < 1e-12);
        assert!((brute_force(&scores, &labels) - 0.75).abs() < 1e-12);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn histogram_examples() {
        let h = score_histograms(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true], 4).unwrap();
        assert!(h.known.iter().zip(&h.unknown).all(|(k, u)| k * u == 0));
        assert_eq!(h.known.iter().sum::<usize>(), 2);
        let flat = score_histograms(&[0.3; 5], &[true, false, true, false, false], 3).unwrap();
        let occupied = flat.known.iter().zip(&flat.unknown).filter(|(k, u)| *k + *u > 0).count();
        assert_eq!(occupied, 1);
        assert!(score_histograms(&[0.1], &[true], 1).is_err());
    }

    #[test]
    fn report_writers() {
        let decisions = [
            OpenSetDecision { outcome: Outcome::Known(0), unknownness: 0.1 },
            OpenSetDecision { outcome: Outcome::Unknown, unknownness: 0.9 },
        ];
        let r = evaluate("threshold", &decisions, &[LabelKind::Known(0), LabelKind::Unknown], 1, 4).unwrap();
        let mut buf = Vec::new();
        r.write_summary(&["park".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("acc: 100.0000"));
        assert!(text.contains("accuracy.park: 100.0000"));
        assert!(text.contains("auroc: 1.000000"));
    }

    fn scored_sets() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..50).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..8).prop_map(|v| v as f64 / 8.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn sweep_matches_pair_counting((scores, labels) in scored_sets()) {
            prop_assume!(labels.iter().any(|&b| b) && labels.iter().any(|&b| !b));
            let roc = auroc(&scores, &labels).unwrap();
            let bf = brute_force(&scores, &labels);
            prop_assert!((roc.auc - bf).abs() < 1e-9);
            prop_assert!((mann_whitney_auc(&scores, &labels).unwrap() - bf).abs() < 1e-9);
            prop_assert!(roc.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            let h = score_histograms(&scores, &labels, 5).unwrap();
            prop_assert_eq!(h.unknown.iter().sum::<usize>(), labels.iter().filter(|&&b| b).count());
            prop_assert_eq!(h.known.iter().sum::<usize>(), labels.iter().filter(|&&b| !b).count());
        }

        #[test]
        fn auroc_is_invariant_under_monotone_maps((scores, labels) in scored_sets()) {
            prop_assume!(labels.iter().any(|&b| b) && labels.iter().any(|&b| !b));
            let a = auroc(&scores, &labels).unwrap().auc;
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((auroc(&mapped, &labels).unwrap().auc - a).abs() < 1e-12);
        }
    }
}
