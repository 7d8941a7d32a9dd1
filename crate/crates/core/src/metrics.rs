//! Confusion matrices and mean intersection-over-union.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassTable;

/// `C × C` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Config(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
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

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - self.get(c, c)
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - self.get(c, c)
    }

    /// Elementwise sum, used to combine partial results.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Config(
                "cannot merge confusion matrices of different size".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Adds one count per point whose ground truth is not the ignore id.
pub fn accumulate_confusion(
    pred: &[u16],
    truth: &[u16],
    table: &ClassTable,
    mut acc: ConfusionMatrix,
) -> Result<ConfusionMatrix> {
    let c = table.num_classes();
    if acc.classes != c {
        return Err(Error::Config(format!(
            "confusion matrix has {} classes, table {c}",
            acc.classes
        )));
    }
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let check = |v: u16| {
        if v != table.ignore_id && v as usize >= c {
            Err(Error::Data(format!("class id {v} outside table of {c}")))
        } else {
            Ok(())
        }
    };
    for (&p, &t) in pred.iter().zip(truth) {
        check(p)?;
        check(t)?;
        if t == table.ignore_id {
            continue;
        }
        if p == table.ignore_id {
            return Err(Error::Data("prediction is the ignore id".into()));
        }
        acc.counts[t as usize * c + p as usize] += 1;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` where `TP + FP + FN = 0`.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `IoU_c = TP / (TP + FP + FN)`, averaged over classes with a non-zero
/// denominator.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| {
            let tp = cm.true_positives(c);
            let denom = tp + cm.false_positives(c) + cm.false_negatives(c);
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a non-zero IoU denominator".into()));
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IouReport { per_class, mean })
}

/// `class,iou` rows followed by a `mean` row. Undefined classes are blank.
pub fn write_metrics_csv<W: Write>(mut out: W, names: &[String], report: &IouReport) -> std::io::Result<()> {
    writeln!(out, "class,iou")?;
    for (name, iou) in names.iter().zip(&report.per_class) {
        match iou {
            Some(v) => writeln!(out, "{name},{v:.6}")?,
            None => writeln!(out, "{name},")?,
        }
    }
    writeln!(out, "mean,{:.6}", report.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti_io::IGNORE_ID;

    fn t3() -> ClassTable {
        ClassTable::uniform(&["a", "b", "c"])
    }

    #[test]
    fn diagonal_when_perfect() {
        let cm = accumulate_confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], &t3(), ConfusionMatrix::new(3)).unwrap();
        assert_eq!(cm.get(2, 2), 2);
        assert_eq!(cm.total(), 4);
        let r = miou(&cm).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn ignore_truth_skipped() {
        let cm = accumulate_confusion(&[0, 1], &[IGNORE_ID, IGNORE_ID], &t3(), ConfusionMatrix::new(3)).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
        assert!(matches!(miou(&cm), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn bad_ids() {
        assert!(matches!(
            accumulate_confusion(&[3], &[0], &t3(), ConfusionMatrix::new(3)),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            accumulate_confusion(&[0], &[7], &t3(), ConfusionMatrix::new(3)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn iou_from_counts() {
        // class 0: TP 5, FP 3, FN 2
        let counts = vec![5, 2, 0, 3, 0, 0, 0, 0, 0];
        let cm = ConfusionMatrix::from_counts(3, counts).unwrap();
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class[0], Some(0.5));
        assert_eq!(r.per_class[1], Some(0.0));
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean, 0.25);
    }

    #[test]
    fn csv_layout() {
        let r = IouReport {
            per_class: vec![Some(0.5), None],
            mean: 0.5,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &["car".into(), "road".into()], &r).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "class,iou\ncar,0.500000\nroad,\nmean,0.500000\n"
        );
    }
}
