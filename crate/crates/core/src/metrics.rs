//! Confusion-matrix segmentation metrics: OA, mAcc and mIoU.
//!
//! Classes whose denominator is zero (absent from both truth and
//! prediction for IoU, absent from truth for accuracy) are left out of the
//! class means rather than counted as 0 or 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `C × C` counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::ShapeMismatch {
                op: "confusion matrix",
                lhs: vec![classes],
                rhs: rows.iter().map(Vec::len).collect(),
            });
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
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

    /// Counts every point whose truth label is not `ignore`.
    pub fn accumulate(&mut self, truth: &[usize], pred: &[usize], ignore: Option<usize>) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                lhs: vec![truth.len()],
                rhs: vec![pred.len()],
            });
        }
        let c = self.classes;
        for (&t, &p) in truth.iter().zip(pred) {
            if Some(t) == ignore {
                continue;
            }
            for label in [t, p] {
                if label >= c {
                    return Err(Error::LabelOutOfRange { label, classes: c });
                }
            }
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if Some(t) != ignore {
                self.counts[t * c + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "merge",
                lhs: vec![self.classes],
                rhs: vec![other.classes],
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    fn nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Empty("confusion matrix"))
        } else {
            Ok(())
        }
    }

    pub fn oa(&self) -> Result<f64> {
        self.nonempty()?;
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / self.total() as f64)
    }

    /// Per-class recall; `None` for classes absent from the truth.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let row = self.row_sum(c);
                (row > 0).then(|| self.get(c, c) as f64 / row as f64)
            })
            .collect()
    }

    /// Per-class intersection over union; `None` when the class appears in
    /// neither truth nor prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn macc(&self) -> Result<f64> {
        self.nonempty()?;
        let parts = (0..self.classes).map(|c| (self.get(c, c), self.row_sum(c)));
        Ok(mean_of_ratios(parts))
    }

    pub fn miou(&self) -> Result<f64> {
        self.nonempty()?;
        let parts = (0..self.classes).map(|c| {
            let tp = self.get(c, c);
            (tp, self.row_sum(c) + self.col_sum(c) - tp)
        });
        Ok(mean_of_ratios(parts))
    }

    pub fn report(&self) -> Result<Metrics> {
        Ok(Metrics {
            oa: self.oa()?,
            macc: self.macc()?,
            miou: self.miou()?,
            iou: self.class_iou(),
        })
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num / den` over the pairs with `den > 0`, summed as an exact
/// fraction and rounded once (falls back to floats on overflow).
fn mean_of_ratios(parts: impl Iterator<Item = (u64, u64)> + Clone) -> f64 {
    let present: Vec<(u128, u128)> = parts.filter(|&(_, d)| d > 0).map(|(n, d)| (n as u128, d as u128)).collect();
    let count = present.len() as u128;
    let exact = present.iter().try_fold((0u128, 1u128), |(an, ad), &(n, d)| {
        let num = an.checked_mul(d)?.checked_add(n.checked_mul(ad)?)?;
        let den = ad.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        Some((num / g, den / g))
    });
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(count)?))) {
        Some((n, d)) if n < 1 << 53 && d < 1 << 53 => n as f64 / d as f64,
        _ => present.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / count as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
}

impl Metrics {
    /// `oa,macc,miou,iou_0,…,iou_{C-1}`
    pub fn csv_header(&self) -> String {
        let mut h = String::from("oa,macc,miou");
        for c in 0..self.iou.len() {
            write!(h, ",iou_{c}").unwrap();
        }
        h
    }

    /// Absent classes are written as empty fields.
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{}", self.oa, self.macc, self.miou);
        for v in &self.iou {
            row.push(',');
            if let Some(v) = v {
                write!(row, "{v}").unwrap();
            }
        }
        row
    }

    /// One `key = value` line per metric.
    pub fn key_values(&self) -> String {
        let mut s = format!("oa = {}\nmacc = {}\nmiou = {}\n", self.oa, self.macc, self.miou);
        for (c, v) in self.iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "iou_{c} = {v}").unwrap(),
                None => writeln!(s, "iou_{c} = absent").unwrap(),
            }
        }
        s
    }
}
