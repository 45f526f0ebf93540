//! Binary classification metrics: confusion matrix, accuracy, weighted F1,
//! ROC/AUC and precision-recall/AP, plus plot-ready curve points.
//!
//! Curves sweep thresholds over the distinct scores in descending order.
//! Tied scores enter together at a single threshold, so curves never depend
//! on the order of tied samples.

use serde::Serialize;

use crate::error::{Error, Result};

/// 2×2 counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl Confusion {
    pub fn from_counts(tn: usize, fp: usize, fn_: usize, tp: usize) -> Self {
        Self { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        (self.tn + self.tp) as f64 / self.total() as f64
    }

    /// `[[tn, fp], [fn, tp]]`.
    pub fn as_matrix(&self) -> [[usize; 2]; 2] {
        [[self.tn, self.fp], [self.fn_, self.tp]]
    }

    fn class_f1(tp: usize, fp: usize, fn_: usize) -> f64 {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    /// F1 of class 0 and class 1.
    pub fn per_class_f1(&self) -> [f64; 2] {
        [
            Self::class_f1(self.tn, self.fn_, self.fp),
            Self::class_f1(self.tp, self.fp, self.fn_),
        ]
    }

    /// Support-weighted mean of the per-class F1 scores.
    pub fn weighted_f1(&self) -> f64 {
        let [f0, f1] = self.per_class_f1();
        let support0 = (self.tn + self.fp) as f64;
        let support1 = (self.fn_ + self.tp) as f64;
        (f0 * support0 + f1 * support1) / self.total() as f64
    }

    pub fn macro_f1(&self) -> f64 {
        let [f0, f1] = self.per_class_f1();
        (f0 + f1) / 2.0
    }
}

fn check_labels(y_true: &[u8], y_other_len: usize) -> Result<()> {
    if y_true.is_empty() {
        return Err(Error::Metric("empty input".into()));
    }
    if y_true.len() != y_other_len {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            y_true.len(),
            y_other_len
        )));
    }
    if let Some(bad) = y_true.iter().find(|&&y| y > 1) {
        return Err(Error::Domain(format!("label {bad} not in {{0,1}}")));
    }
    Ok(())
}

pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<Confusion> {
    check_labels(y_true, y_pred.len())?;
    check_labels(y_pred, y_true.len())?;
    let mut c = Confusion::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (0, 0) => c.tn += 1,
            (0, _) => c.fp += 1,
            (_, 0) => c.fn_ += 1,
            _ => c.tp += 1,
        }
    }
    Ok(c)
}

pub fn confusion_and_accuracy(y_true: &[u8], y_pred: &[u8]) -> Result<(Confusion, f64)> {
    let c = confusion(y_true, y_pred)?;
    Ok((c, c.accuracy()))
}

pub fn weighted_f1(y_true: &[u8], y_pred: &[u8]) -> Result<f64> {
    Ok(confusion(y_true, y_pred)?.weighted_f1())
}

/// Cumulative (tp, fp) counts after each distinct-score threshold,
/// descending, plus the threshold value.
fn sweep(y_true: &[u8], scores: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if y_true[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        out.push((threshold, tp, fp));
    }
    out
}

fn check_scores(y_true: &[u8], scores: &[f64]) -> Result<()> {
    check_labels(y_true, scores.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("non-finite score".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// Starts at (0, 0) with an infinite threshold, ends at (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve for the positive class with trapezoidal AUC.
pub fn roc_auc(y_true: &[u8], scores: &[f64]) -> Result<RocCurve> {
    check_scores(y_true, scores)?;
    let pos = y_true.iter().filter(|&&y| y == 1).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC undefined with a single class".into()));
    }
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut auc = 0.0;
    for (threshold, tp, fp) in sweep(y_true, scores) {
        let p = RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        };
        let last = points.last().expect("seeded with origin");
        auc += (p.fpr - last.fpr) * (p.tpr + last.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// ROC curves for class 0 (scored by `1 - score`) and class 1.
pub fn roc_per_class(y_true: &[u8], scores: &[f64]) -> Result<[RocCurve; 2]> {
    let flipped: Vec<u8> = y_true.iter().map(|y| 1 - y.min(&1)).collect();
    let inverse: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
    Ok([roc_auc(&flipped, &inverse)?, roc_auc(y_true, scores)?])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// One point per distinct threshold, in descending threshold order.
    pub points: Vec<PrPoint>,
    pub average_precision: f64,
}

/// Precision-recall curve for the positive class and step-interpolated
/// average precision `Σ (R_n - R_{n-1}) P_n`.
pub fn pr_ap(y_true: &[u8], scores: &[f64]) -> Result<PrCurve> {
    check_scores(y_true, scores)?;
    let pos = y_true.iter().filter(|&&y| y == 1).count();
    if pos == 0 {
        return Err(Error::Metric("average precision undefined without positives".into()));
    }
    let mut points = Vec::new();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (threshold, tp, fp) in sweep(y_true, scores) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint {
            threshold,
            recall,
            precision,
        });
    }
    Ok(PrCurve {
        points,
        average_precision: ap,
    })
}

/// Predicted label from a positive-class probability (ties go to 0).
pub fn label_from_probability(p1: f64) -> u8 {
    u8::from(p1 > 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub num_evaluated: usize,
    /// `[[tn, fp], [fn, tp]]`
    pub confusion: [[usize; 2]; 2],
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: [f64; 2],
    /// Index 0 = class 0 ("not injured"), 1 = class 1 ("injury").
    pub roc: [RocCurve; 2],
    pub pr: PrCurve,
}

impl MetricsReport {
    /// `scores` are positive-class probabilities; `y_pred` the hard labels.
    pub fn compute(y_true: &[u8], y_pred: &[u8], scores: &[f64]) -> Result<Self> {
        let (c, accuracy) = confusion_and_accuracy(y_true, y_pred)?;
        Ok(Self {
            num_evaluated: y_true.len(),
            confusion: c.as_matrix(),
            accuracy,
            weighted_f1: c.weighted_f1(),
            per_class_f1: c.per_class_f1(),
            roc: roc_per_class(y_true, scores)?,
            pr: pr_ap(y_true, scores)?,
        })
    }

    pub fn auc(&self) -> f64 {
        self.roc[1].auc
    }

    /// `class,threshold,fpr,tpr` rows.
    pub fn write_roc_points<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["class", "threshold", "fpr", "tpr"])?;
        for (class, curve) in self.roc.iter().enumerate() {
            for p in &curve.points {
                w.write_record([
                    class.to_string(),
                    fmt_threshold(p.threshold),
                    format!("{:?}", p.fpr),
                    format!("{:?}", p.tpr),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<roc_points>", e))?;
        Ok(())
    }

    /// `threshold,recall,precision` rows.
    pub fn write_pr_points<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["threshold", "recall", "precision"])?;
        for p in &self.pr.points {
            w.write_record([
                fmt_threshold(p.threshold),
                format!("{:?}", p.recall),
                format!("{:?}", p.precision),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<pr_points>", e))?;
        Ok(())
    }
}

fn fmt_threshold(t: f64) -> String {
    if t.is_infinite() {
        "inf".into()
    } else {
        format!("{t:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels_from_confusion(c: Confusion) -> (Vec<u8>, Vec<u8>) {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (n, tv, pv) in [(c.tn, 0, 0), (c.fp, 0, 1), (c.fn_, 1, 0), (c.tp, 1, 1)] {
            t.extend(std::iter::repeat_n(tv, n));
            p.extend(std::iter::repeat_n(pv, n));
        }
        (t, p)
    }

    #[test]
    fn reported_test_confusion() {
        let (t, p) = labels_from_confusion(Confusion::from_counts(62, 2, 1, 68));
        let (c, acc) = confusion_and_accuracy(&t, &p).unwrap();
        assert_eq!(c.as_matrix(), [[62, 2], [1, 68]]);
        assert!((acc - 130.0 / 133.0).abs() < 1e-15);
        assert!((acc - 0.9774).abs() < 1e-4);
        let f1 = weighted_f1(&t, &p).unwrap();
        // By hand: F1_0 = 124/127, F1_1 = 136/139, weights 64/133, 69/133.
        let expect = (124.0 / 127.0 * 64.0 + 136.0 / 139.0 * 69.0) / 133.0;
        assert!((f1 - expect).abs() < 1e-12);
        assert!((f1 - 0.9774).abs() < 0.002);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let t = [0, 1, 0, 1, 1, 0];
        let (c, acc) = confusion_and_accuracy(&t, &t).unwrap();
        assert_eq!((c.fp, c.fn_, acc), (0, 0, 1.0));
        assert_eq!(weighted_f1(&t, &t).unwrap(), 1.0);

        let zeros = [0; 6];
        let c = confusion(&t, &zeros).unwrap();
        assert_eq!(c.accuracy(), 0.5);
        let [f0, f1] = c.per_class_f1();
        assert!((f0 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1, 0.0);
        assert!((c.weighted_f1() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metric_errors() {
        assert!(confusion(&[], &[]).is_err());
        assert!(confusion(&[0, 1], &[0]).is_err());
        assert!(confusion(&[2], &[0]).is_err());
        assert!(matches!(roc_auc(&[1, 1], &[0.2, 0.3]), Err(Error::Metric(_))));
        assert!(matches!(pr_ap(&[0, 0], &[0.2, 0.3]), Err(Error::Metric(_))));
    }

    #[test]
    fn auc_extremes() {
        let t = [0, 0, 1, 1];
        assert_eq!(roc_auc(&t, &[0.1, 0.2, 0.8, 0.9]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&t, &[0.5; 4]).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&t, &[0.9, 0.8, 0.2, 0.1]).unwrap().auc, 0.0);
    }

    #[test]
    fn ap_extremes() {
        let t = [0, 1, 0, 1, 1];
        assert_eq!(pr_ap(&t, &[0.1, 0.9, 0.2, 0.8, 0.7]).unwrap().average_precision, 1.0);
        let ap = pr_ap(&t, &[0.4; 5]).unwrap().average_precision;
        assert!((ap - 0.6).abs() < 1e-15);
    }

    #[test]
    fn per_class_roc_is_symmetric() {
        let t = [0, 1, 1, 0, 1, 0, 0, 1];
        let s = [0.3, 0.6, 0.55, 0.5, 0.9, 0.1, 0.7, 0.4];
        let [c0, c1] = roc_per_class(&t, &s).unwrap();
        assert!((c0.auc - c1.auc).abs() < 1e-12);
    }

    #[test]
    fn report_tables() {
        let t = [0, 1, 1, 0];
        let s = [0.2, 0.7, 0.4, 0.4];
        let pred: Vec<u8> = s.iter().map(|p| label_from_probability(*p)).collect();
        let r = MetricsReport::compute(&t, &pred, &s).unwrap();
        let mut roc = Vec::new();
        r.write_roc_points(&mut roc).unwrap();
        let roc = String::from_utf8(roc).unwrap();
        assert!(roc.starts_with("class,threshold,fpr,tpr\n0,inf,0.0,0.0\n"));
        let mut pr = Vec::new();
        r.write_pr_points(&mut pr).unwrap();
        assert_eq!(String::from_utf8(pr).unwrap().lines().count(), 1 + 3);
        assert_eq!(label_from_probability(0.5), 0);
    }

    fn scores_and_labels() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
        prop::collection::vec((0u8..2, 0u32..20), 2..60)
            .prop_filter("both classes", |v| {
                v.iter().any(|x| x.0 == 0) && v.iter().any(|x| x.0 == 1)
            })
            .prop_map(|v| v.into_iter().map(|(y, s)| (y, f64::from(s) / 19.0)).unzip())
    }

    proptest! {
        #[test]
        fn auc_is_monotone_invariant((t, s) in scores_and_labels()) {
            let a = roc_auc(&t, &s).unwrap().auc;
            let warped: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(a, roc_auc(&t, &warped).unwrap().auc);
        }

        #[test]
        fn roc_points_are_monotone((t, s) in scores_and_labels()) {
            let c = roc_auc(&t, &s).unwrap();
            let first = c.points.first().unwrap();
            let last = c.points.last().unwrap();
            prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in c.points.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
            prop_assert!((0.0..=1.0).contains(&c.auc));
        }

        #[test]
        fn flipping_predictions_complements_accuracy(v in prop::collection::vec((0u8..2, 0u8..2), 1..50)) {
            let (t, p): (Vec<u8>, Vec<u8>) = v.into_iter().unzip();
            let (c, a) = confusion_and_accuracy(&t, &p).unwrap();
            let flipped: Vec<u8> = p.iter().map(|x| 1 - x).collect();
            let (cf, af) = confusion_and_accuracy(&t, &flipped).unwrap();
            prop_assert!((a + af - 1.0).abs() < 1e-12);
            prop_assert_eq!((cf.tn, cf.fp, cf.fn_, cf.tp), (c.fp, c.tn, c.tp, c.fn_));
        }

        #[test]
        fn weighted_equals_macro_when_balanced(n in 1usize..30, p in prop::collection::vec(0u8..2, 60)) {
            let t: Vec<u8> = (0..2 * n).map(|i| (i % 2) as u8).collect();
            let c = confusion(&t, &p[..2 * n]).unwrap();
            prop_assert!((c.weighted_f1() - c.macro_f1()).abs() < 1e-12);
        }
    }
}
