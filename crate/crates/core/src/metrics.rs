//! Voxelwise evaluation: confusion counts, one-vs-rest class metrics,
//! average precision and report files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Scalar, Volume};

/// `counts[t * classes + p]` voxels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts do not form a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, pred: &LabelVolume, truth: &LabelVolume) -> Result<()> {
        if pred.extents() != truth.extents() {
            return Err(Error::Shape(format!(
                "prediction {:?} and truth {:?} are not aligned",
                pred.extents(),
                truth.extents()
            )));
        }
        pred.validate_classes(self.classes)?;
        truth.validate_classes(self.classes)?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelVolume, truth: &LabelVolume, classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes);
    m.accumulate(pred, truth)?;
    Ok(m)
}

/// One-vs-rest metrics for a class; `None` marks a 0/0 ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub iou: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn class_metrics(m: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let n = m.classes;
    let tp = m.get(class, class);
    let fp: u64 = (0..n).filter(|&t| t != class).map(|t| m.get(t, class)).sum();
    let fn_: u64 = (0..n).filter(|&p| p != class).map(|p| m.get(class, p)).sum();
    let total = m.total();
    let tn = total - tp - fp - fn_;
    ClassMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        accuracy: ratio(tp + tn, total),
        iou: ratio(tp, tp + fp + fn_),
    }
}

/// Step-integrated area under the precision-recall curve, sweeping the
/// distinct scores in descending order. `None` without positives.
pub fn average_precision_scores(scores: &[f64], positive: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("scores contain NaN".into()));
    }
    let npos = positive.iter().filter(|&&p| p).count() as u64;
    if npos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / npos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(Some(ap))
}

/// Average precision of channel `class` of a probability volume.
pub fn average_precision<T: Scalar>(probs: &Volume<T>, truth: &LabelVolume, class: usize) -> Result<Option<f64>> {
    if probs.extents() != truth.extents() || class >= probs.channels() {
        return Err(Error::Shape(format!(
            "probabilities {} cannot score class {class} of labels {:?}",
            probs.shape(),
            truth.extents()
        )));
    }
    let scores: Vec<f64> = probs.channel(class).iter().map(|v| v.as_f64()).collect();
    let positive: Vec<bool> = truth.data().iter().map(|&l| l as usize == class).collect();
    average_precision_scores(&scores, &positive)
}

/// Mean AP over foreground classes with at least one positive voxel.
pub fn mean_average_precision(per_class: &[Option<f64>]) -> Option<f64> {
    mean(per_class.iter().skip(1).copied())
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Foreground-vs-background Dice overlap; `None` when both are empty.
pub fn foreground_dice(pred: &LabelVolume, truth: &LabelVolume) -> Result<Option<f64>> {
    if pred.extents() != truth.extents() {
        return Err(Error::Shape(format!(
            "prediction {:?} and truth {:?} are not aligned",
            pred.extents(),
            truth.extents()
        )));
    }
    let (mut both, mut p, mut t) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        p += u64::from(a != 0);
        t += u64::from(b != 0);
        both += u64::from(a != 0 && b != 0);
    }
    Ok(ratio(2 * both, p + t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub iou: Option<f64>,
    pub ap: Option<f64>,
}

/// Per-class metrics for the foreground classes plus global summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
    pub map: Option<f64>,
    pub mean_iou: Option<f64>,
    pub voxels: u64,
}

impl MetricsReport {
    /// `names` covers every class including background; `ap`, when given, is
    /// indexed the same way.
    pub fn new(m: &ConfusionMatrix, names: &[String], ap: Option<&[Option<f64>]>) -> Result<Self> {
        if names.len() != m.classes() || ap.is_some_and(|a| a.len() != m.classes()) {
            return Err(Error::Shape(format!(
                "{} class names for a {}-class matrix",
                names.len(),
                m.classes()
            )));
        }
        let classes: Vec<ClassReport> = (1..m.classes())
            .map(|c| {
                let cm = class_metrics(m, c);
                ClassReport {
                    class: names[c].clone(),
                    precision: cm.precision,
                    recall: cm.recall,
                    accuracy: cm.accuracy,
                    iou: cm.iou,
                    ap: ap.and_then(|a| a[c]),
                }
            })
            .collect();
        Ok(MetricsReport {
            map: ap.and_then(mean_average_precision),
            mean_iou: mean(classes.iter().map(|c| c.iou)),
            classes,
            voxels: m.total(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    /// `class,precision,recall,accuracy,iou` with percentages at `decimals`
    /// places and `NA` for undefined values.
    pub fn to_csv(&self, decimals: usize) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{:.*}", decimals, v * 100.0));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "precision", "recall", "accuracy", "iou"])
            .expect("in-memory write");
        for c in &self.classes {
            w.write_record([c.class.clone(), pct(c.precision), pct(c.recall), pct(c.accuracy), pct(c.iou)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write(&self, path: &Path, format: ReportFormat, decimals: usize) -> Result<()> {
        let text = match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(decimals),
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    /// `.csv` selects CSV; anything else JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

/// Accumulates confusion counts and per-class scores over several volumes.
#[derive(Clone, Debug)]
pub struct Evaluator {
    matrix: ConfusionMatrix,
    scores: Vec<Vec<f64>>,
    positives: Vec<Vec<bool>>,
    scored: bool,
}

impl Evaluator {
    pub fn new(classes: usize) -> Self {
        Evaluator {
            matrix: ConfusionMatrix::new(classes),
            scores: vec![Vec::new(); classes],
            positives: vec![Vec::new(); classes],
            scored: true,
        }
    }

    /// Adds one volume; without probabilities AP is not reported.
    pub fn add<T: Scalar>(&mut self, pred: &LabelVolume, truth: &LabelVolume, probs: Option<&Volume<T>>) -> Result<()> {
        self.matrix.accumulate(pred, truth)?;
        match probs {
            Some(p) => {
                if p.extents() != truth.extents() || p.channels() != self.matrix.classes() {
                    return Err(Error::Shape(format!(
                        "probabilities {} do not match {} classes over {:?}",
                        p.shape(),
                        self.matrix.classes(),
                        truth.extents()
                    )));
                }
                for c in 0..self.matrix.classes() {
                    self.scores[c].extend(p.channel(c).iter().map(|v| v.as_f64()));
                    self.positives[c].extend(truth.data().iter().map(|&l| l as usize == c));
                }
            }
            None => self.scored = false,
        }
        Ok(())
    }

    pub fn matrix(&self) -> &ConfusionMatrix {
        &self.matrix
    }

    pub fn report(&self, names: &[String]) -> Result<MetricsReport> {
        let ap = if self.scored && self.matrix.total() > 0 {
            Some(
                (0..self.matrix.classes())
                    .map(|c| average_precision_scores(&self.scores[c], &self.positives[c]))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        MetricsReport::new(&self.matrix, names, ap.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(v: &[u8]) -> LabelVolume {
        LabelVolume::from_vec([1, 1, v.len()], v.to_vec()).unwrap()
    }

    /// Precision/recall recomputed from scratch at every distinct threshold.
    fn brute_force_ap(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let npos = positive.iter().filter(|&&p| p).count();
        if npos == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| positive[i]).count();
            let recall = tp as f64 / npos as f64;
            let precision = tp as f64 / sel.len() as f64;
            ap += (recall - prev) * precision;
            prev = recall;
        }
        Some(ap)
    }

    #[test]
    fn confusion_examples() {
        let t = labels(&[0, 1, 2, 2, 1]);
        let m = confusion(&t, &t, 3).unwrap();
        assert_eq!((m.get(0, 0), m.get(1, 1), m.get(2, 2), m.total()), (1, 2, 2, 5));
        let m = confusion(&labels(&[0; 8]), &labels(&[1; 8]), 2).unwrap();
        assert_eq!(m.get(1, 0), 8);
        assert!(matches!(confusion(&labels(&[0; 3]), &labels(&[0; 4]), 2), Err(Error::Shape(_))));
        assert!(matches!(confusion(&labels(&[3]), &labels(&[0]), 2), Err(Error::Label(_))));
    }

    #[test]
    fn class_metric_examples() {
        let m = ConfusionMatrix::from_counts(2, vec![900, 4, 0, 96]).unwrap();
        assert_eq!(class_metrics(&m, 1).precision, Some(0.96));
        let t = labels(&[0, 1, 1, 2]);
        let perfect = class_metrics(&confusion(&t, &t, 3).unwrap(), 1);
        assert_eq!(perfect, ClassMetrics { precision: Some(1.0), recall: Some(1.0), accuracy: Some(1.0), iou: Some(1.0) });
        let pred: Vec<u8> = (0..16).map(|i| u8::from(i < 8)).collect();
        let truth: Vec<u8> = (0..16).map(|i| u8::from((4..12).contains(&i))).collect();
        let iou = class_metrics(&confusion(&labels(&pred), &labels(&truth), 2).unwrap(), 1).iou.unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        let absent = class_metrics(&confusion(&labels(&[0, 0]), &labels(&[0, 0]), 2).unwrap(), 1);
        assert_eq!((absent.precision, absent.recall, absent.iou), (None, None, None));
    }

    #[test]
    fn ap_examples() {
        let toy = average_precision_scores(&[0.9, 0.8, 0.4, 0.2], &[true, false, true, false]).unwrap().unwrap();
        assert!((toy - 0.8333).abs() < 1e-4);
        assert!((toy - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        let sep = average_precision_scores(&[0.9, 0.7, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(sep, Some(1.0));
        let q = average_precision_scores(&[0.5; 8], &[true, false, false, true, false, false, false, false]).unwrap();
        assert_eq!(q, Some(0.25));
        assert_eq!(average_precision_scores(&[0.1, 0.2], &[false, false]).unwrap(), None);
    }

    #[test]
    fn ap_from_volume_and_map() {
        let truth = labels(&[0, 1, 1, 2]);
        let probs = Volume::from_vec(
            crate::tensor::Shape::new(3, 1, 1, 4).unwrap(),
            vec![0.8, 0.1, 0.1, 0.1, 0.1, 0.8, 0.8, 0.1, 0.1, 0.1, 0.1, 0.8f64],
        )
        .unwrap();
        assert_eq!(average_precision(&probs, &truth, 1).unwrap(), Some(1.0));
        assert_eq!(mean_average_precision(&[Some(0.2), Some(1.0), None, Some(0.5)]), Some(0.75));
        assert_eq!(mean_average_precision(&[Some(1.0), None]), None);
    }

    #[test]
    fn dice() {
        assert_eq!(foreground_dice(&labels(&[0, 1, 2, 0]), &labels(&[0, 2, 1, 1])).unwrap(), Some(0.8));
        assert_eq!(foreground_dice(&labels(&[0]), &labels(&[0])).unwrap(), None);
    }

    fn report() -> MetricsReport {
        let names: Vec<String> = ["Background", "Epidural Hematoma"].map(String::from).to_vec();
        let m = ConfusionMatrix::from_counts(2, vec![9_900, 4, 5, 96]).unwrap();
        let mut r = MetricsReport::new(&m, &names, None).unwrap();
        r.classes[0].accuracy = Some(0.96);
        r
    }

    #[test]
    fn csv_layout() {
        let r = report();
        let csv = r.to_csv(2);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("class,precision,recall,accuracy,iou"));
        assert!(lines.next().unwrap().starts_with("Epidural Hematoma,96.00,95.05,96.00,"));
        let empty = MetricsReport { classes: vec![], map: None, mean_iou: None, voxels: 0 };
        assert_eq!(empty.to_csv(2), "class,precision,recall,accuracy,iou\n");
        let undefined = MetricsReport::new(&ConfusionMatrix::new(2), &report_names(), None).unwrap();
        assert_eq!(undefined.to_csv(1).lines().nth(1), Some("Epidural Hematoma,NA,NA,NA,NA"));
    }

    fn report_names() -> Vec<String> {
        vec!["Background".into(), "Epidural Hematoma".into()]
    }

    #[test]
    fn json_round_trip_and_files() {
        let r = report();
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write(&p, ReportFormat::from_path(&p), 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), r.to_csv(2));
        let bad = dir.path().join("missing").join("r.json");
        assert!(matches!(r.write(&bad, ReportFormat::Json, 2), Err(Error::Io { .. })));
    }

    #[test]
    fn evaluator_identity() {
        let truth = labels(&[0, 1, 1, 2, 2, 2]);
        let mut e = Evaluator::new(3);
        let probs = Volume::from_fn(crate::tensor::Shape::new(3, 1, 1, 6).unwrap(), |c, _, _, x| {
            if truth.data()[x] as usize == c { 0.9 } else { 0.05 }
        })
        .unwrap();
        e.add(&truth, &truth, Some(&probs)).unwrap();
        e.add::<f64>(&truth, &truth, Some(&probs)).unwrap();
        let r = e.report(&["bg", "a", "b"].map(String::from)).unwrap();
        assert_eq!(r.voxels, 12);
        assert_eq!(r.map, Some(1.0));
        for c in &r.classes {
            assert_eq!([c.precision, c.recall, c.accuracy, c.iou], [Some(1.0); 4]);
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..1000).prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..20).prop_map(|s| s as f64 / 19.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn sweep_equals_brute_force((scores, positive) in instance()) {
            prop_assert_eq!(average_precision_scores(&scores, &positive).unwrap(), brute_force_ap(&scores, &positive));
        }

        #[test]
        fn ap_rank_invariant((scores, positive) in instance()) {
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(
                average_precision_scores(&scores, &positive).unwrap(),
                average_precision_scores(&warped, &positive).unwrap()
            );
        }

        #[test]
        fn permutation_consistent(
            pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200),
            perm in Just([0u8, 1, 2, 3]).prop_shuffle(),
        ) {
            let pred = labels(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let truth = labels(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let relabel = |l: &LabelVolume| labels(&l.data().iter().map(|&v| perm[v as usize]).collect::<Vec<_>>());
            let m = confusion(&pred, &truth, 4).unwrap();
            let pm = confusion(&relabel(&pred), &relabel(&truth), 4).unwrap();
            for t in 0..4 {
                for p in 0..4 {
                    prop_assert_eq!(m.get(t, p), pm.get(perm[t] as usize, perm[p] as usize));
                }
            }
            prop_assert_eq!(m.total(), pairs.len() as u64);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_bounded_by_precision_and_recall(counts in prop::collection::vec(0u64..50, 9), class in 0usize..3) {
            let cm = class_metrics(&ConfusionMatrix::from_counts(3, counts).unwrap(), class);
            for v in [cm.precision, cm.recall, cm.accuracy, cm.iou].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(i), Some(p), Some(r)) = (cm.iou, cm.precision, cm.recall) {
                prop_assert!(i <= p.min(r));
            }
        }
    }
}
