//! ROC/AUC, accuracy, stratified folds and the cross-validation report.

use std::fmt::Write as _;
use std::io::Write;

use thiserror::Error;

use crate::numerics::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels contain a single class")]
    SingleClass,
    #[error("cannot split {n} samples into {k} folds")]
    TooFewSamples { n: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Samples scoring at or above this value are predicted positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

fn check(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// ROC curve over descending unique thresholds, starting from a sentinel
/// above the maximum score. Tied scores move the curve in a single step.
pub fn roc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    roc(scores, labels).map(|c| auc(&c))
}

/// Fraction of samples whose prediction `score >= threshold` matches the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

impl RocCurve {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

/// Stratified fold assignment: entry `i` is the fold of sample `i`.
///
/// Each class is shuffled and dealt round-robin; the deal continues from
/// where the previous class stopped, so overall fold sizes differ by at most one.
pub fn kfold(labels: &[u8], k: usize, rng: &RngStream) -> Result<Vec<usize>> {
    let n = labels.len();
    if k < 2 || n < k {
        return Err(EvalError::TooFewSamples { n, k });
    }
    let mut assignment = vec![0usize; n];
    let mut next = 0usize;
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        rng.child_indexed("kfold-class", class as usize).shuffle(&mut idx);
        for i in idx {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(assignment)
}

/// Stratified hold-out split: returns `(train, held_out)` index lists, each sorted.
pub fn stratified_split(labels: &[u8], fraction: f64, rng: &RngStream) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.child_indexed("split-class", class as usize).shuffle(&mut idx);
        let take = ((idx.len() as f64) * fraction).round() as usize;
        held.extend_from_slice(&idx[..take]);
        train.extend_from_slice(&idx[take..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub n_test: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-fold metrics with sample mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub mode: String,
    pub folds: Vec<FoldMetrics>,
    pub assignments: Vec<usize>,
    pub fingerprint: String,
}

impl CvReport {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn auc_stats(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.auc).collect::<Vec<_>>())
    }

    pub fn accuracy_stats(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.accuracy).collect::<Vec<_>>())
    }

    pub fn mean_auc(&self) -> f64 {
        self.auc_stats().0
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (am, asd) = self.auc_stats();
        let (cm, csd) = self.accuracy_stats();
        writeln!(s, "# cbcnn cross-validation report").unwrap();
        writeln!(s, "mode = {}", self.mode).unwrap();
        writeln!(s, "config_fingerprint = {}", self.fingerprint).unwrap();
        writeln!(s, "folds = {}", self.k()).unwrap();
        for f in &self.folds {
            writeln!(s, "fold.{} = auc {:.6} accuracy {:.6} n_test {}", f.fold, f.auc, f.accuracy, f.n_test).unwrap();
        }
        writeln!(s, "auc = {am:.6} +/- {asd:.6}").unwrap();
        writeln!(s, "accuracy = {cm:.6} +/- {csd:.6}").unwrap();
        let assign: Vec<String> = self.assignments.iter().map(usize::to_string).collect();
        writeln!(s, "assignments = {}", assign.join(",")).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn roc_examples() {
        let s = [0.9, 0.8, 0.3, 0.1];
        let c = roc(&s, &[1, 1, 0, 0]).unwrap();
        assert!(c.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&c), 1.0);
        let flat = roc(&[0.4; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(flat.points.len(), 2);
        assert_eq!((flat.points[1].fpr, flat.points[1].tpr), (1.0, 1.0));
        assert_eq!(auc(&flat), 0.5);
        assert_eq!(roc_auc(&s, &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(roc(&s, &[1, 1, 1, 1]).unwrap_err(), EvalError::SingleClass);
        assert!(matches!(roc(&s, &[1, 0]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn curve_invariants() {
        let c = roc(&[0.5, 0.2, 0.9, 0.2, 0.7], &[1, 0, 1, 1, 0]).unwrap();
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(c.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr && w[0].threshold > w[1].threshold));
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.1, 0.9], &[1, 0], 0.5).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.9, 0.4, 0.6, 0.1], &[1, 0, 0, 0], 0.5).unwrap(), 0.75);
        assert!(accuracy(&[0.9], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn kfold_sizes() {
        let rng = RngStream::new(1);
        let labels = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let a = kfold(&labels, 5, &rng).unwrap();
        let mut sizes = [0; 5];
        a.iter().for_each(|&f| sizes[f] += 1);
        assert_eq!(sizes, [2; 5]);

        let labels11 = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let a = kfold(&labels11, 5, &rng).unwrap();
        let mut sizes = [0; 5];
        a.iter().for_each(|&f| sizes[f] += 1);
        sizes.sort_unstable();
        assert_eq!(sizes, [2, 2, 2, 2, 3]);
        assert!(kfold(&labels, 1, &rng).is_err());
        assert!(kfold(&labels[..3], 5, &rng).is_err());
    }

    #[test]
    fn kfold_is_stratified() {
        let rng = RngStream::new(9);
        let labels: Vec<u8> = (0..280).map(|i| u8::from(i % 14 == 0)).collect();
        let a = kfold(&labels, 5, &rng).unwrap();
        let global = 20.0 / 280.0;
        for f in 0..5 {
            let members: Vec<usize> = (0..280).filter(|&i| a[i] == f).collect();
            let pos = members.iter().filter(|&&i| labels[i] == 1).count() as f64;
            let frac = pos / members.len() as f64;
            assert!((frac - global).abs() <= 1.0 / members.len() as f64);
        }
    }

    #[test]
    fn split_is_disjoint() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 5 == 0)).collect();
        let (tr, va) = stratified_split(&labels, 0.1, &RngStream::new(3));
        assert_eq!(va.len(), 10);
        assert_eq!(va.iter().filter(|&&i| labels[i] == 1).count(), 2);
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(tr.len() + va.len(), 100);
    }

    #[test]
    fn report_text() {
        let r = CvReport {
            mode: "stack".into(),
            folds: vec![
                FoldMetrics { fold: 0, auc: 0.8, accuracy: 0.9, n_test: 10 },
                FoldMetrics { fold: 1, auc: 0.6, accuracy: 0.7, n_test: 10 },
            ],
            assignments: vec![0, 1],
            fingerprint: "abc".into(),
        };
        let (m, s) = r.auc_stats();
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - 0.1414213562373095).abs() < 1e-12);
        let t = r.to_text();
        assert!(t.contains("fold.1 = auc 0.600000"));
        assert!(t.contains("assignments = 0,1"));
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pair_counting(seed in 0u64..10_000, n in 2usize..200, levels in 1u32..30) {
            let mut rng = RngStream::new(seed);
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.unit() < 0.3)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.below(levels as usize) as u32)).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            prop_assert!((a - pair_count_auc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn antisymmetric_and_monotone_invariant(seed in 0u64..10_000, n in 2usize..100) {
            let mut rng = RngStream::new(seed);
            let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.unit() < 0.5)).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| rng.unit()).collect();
            let a = roc_auc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + roc_auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            let ex: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let aff: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            prop_assert!((roc_auc(&ex, &labels).unwrap() - a).abs() < 1e-12);
            prop_assert!((roc_auc(&aff, &labels).unwrap() - a).abs() < 1e-12);
        }
    }
}
