//! Confusion-matrix accumulation and segmentation scores: pixel accuracy,
//! mean per-class accuracy, Cohen's kappa, mean IoU, frequency-weighted IoU
//! and F1.
//!
//! Counts stay in 64-bit integers until the final division, so tiled and
//! whole-image accumulation give bit-identical reports.
//!
//! Classes with no reference and no predicted pixels are *empty*: they are
//! left out of the class means (MPA, mIoU, macro-F1) and listed in
//! [`MetricReport::empty_classes`]. MPA additionally averages only over
//! classes that occur in the reference, since recall is undefined otherwise.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[i][j]` = pixels whose reference class is `i` and predicted class is `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        Ok(ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        })
    }

    /// Builds a matrix from explicit rows (reference-major).
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        let mut cm = Self::new(k)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::dim(
                    "confusion_matrix",
                    format!("row {i} has {} entries, expected {k}", row.len()),
                ));
            }
            cm.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    /// Adds one pixel per position of the two label maps.
    pub fn accumulate(&mut self, predicted: &[usize], reference: &[usize]) -> Result<()> {
        if predicted.len() != reference.len() {
            return Err(Error::dim(
                "accumulate",
                format!(
                    "prediction has {} pixels, reference has {}",
                    predicted.len(),
                    reference.len()
                ),
            ));
        }
        for (name, map) in [("prediction", predicted), ("reference", reference)] {
            if let Some(pos) = map.iter().position(|&l| l >= self.k) {
                return Err(Error::Data(format!(
                    "{name} label {} at position {pos} is outside 0..{}",
                    map[pos], self.k
                )));
            }
        }
        for (&p, &r) in predicted.iter().zip(reference) {
            self.counts[r * self.k + p] += 1;
        }
        Ok(())
    }

    /// Entrywise sum, for combining tiles accumulated separately.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim(
                "merge",
                format!("{} classes vs {}", self.k, other.k),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        compute_report(self)
    }
}

/// All scores for one confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pa: f64,
    pub mpa: f64,
    pub kappa: f64,
    pub miou: f64,
    pub fwiou: f64,
    /// Macro average of per-class F1.
    pub f1: f64,
    /// Micro-averaged F1; equals PA for single-label pixels.
    pub micro_f1: f64,
    /// `None` for empty classes.
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub empty_classes: Vec<usize>,
    /// Set when chance agreement is 1 (a single class everywhere), in which
    /// case kappa is reported as 1 for a perfect prediction and 0 otherwise.
    pub kappa_undefined: bool,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn compute_report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let k = cm.k;
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("no pixels accumulated".into()));
    }
    let diag: Vec<u64> = (0..k).map(|i| cm.get(i, i)).collect();
    let ref_count: Vec<u64> = (0..k).map(|i| (0..k).map(|j| cm.get(i, j)).sum()).collect();
    let pred_count: Vec<u64> = (0..k).map(|j| (0..k).map(|i| cm.get(i, j)).sum()).collect();
    let correct: u64 = diag.iter().sum();

    let empty_classes: Vec<usize> = (0..k)
        .filter(|&i| ref_count[i] == 0 && pred_count[i] == 0)
        .collect();

    let per_class_iou: Vec<Option<f64>> = (0..k)
        .map(|i| {
            let union = ref_count[i] + pred_count[i] - diag[i];
            (union > 0).then(|| diag[i] as f64 / union as f64)
        })
        .collect();
    let per_class_f1: Vec<Option<f64>> = (0..k)
        .map(|i| {
            let denom = ref_count[i] + pred_count[i];
            (denom > 0).then(|| 2.0 * diag[i] as f64 / denom as f64)
        })
        .collect();

    let pa = correct as f64 / total as f64;
    let mpa = mean(
        (0..k)
            .filter(|&i| ref_count[i] > 0)
            .map(|i| diag[i] as f64 / ref_count[i] as f64),
    );
    let miou = mean(per_class_iou.iter().flatten().copied());
    let f1 = mean(per_class_f1.iter().flatten().copied());
    let fwiou = (0..k)
        .map(|i| ref_count[i] as f64 * per_class_iou[i].unwrap_or(0.0))
        .sum::<f64>()
        / total as f64;

    // kappa = (T·Σpᵢᵢ − Σrᵢcᵢ) / (T² − Σrᵢcᵢ), exact in integers
    let t = u128::from(total);
    let chance: u128 = ref_count
        .iter()
        .zip(&pred_count)
        .map(|(&r, &c)| u128::from(r) * u128::from(c))
        .sum();
    let observed = t * u128::from(correct);
    let denom = t * t - chance;
    let (kappa, kappa_undefined) = if denom == 0 {
        (if correct == total { 1.0 } else { 0.0 }, true)
    } else {
        let num = observed as i128 - chance as i128;
        (num as f64 / denom as f64, false)
    };

    Ok(MetricReport {
        pa,
        mpa,
        kappa,
        miou,
        fwiou,
        f1,
        micro_f1: pa,
        per_class_iou,
        per_class_f1,
        empty_classes,
        kappa_undefined,
    })
}

impl MetricReport {
    pub fn headline(&self) -> [(&'static str, f64); 6] {
        [
            ("pa", self.pa),
            ("mpa", self.mpa),
            ("kappa", self.kappa),
            ("miou", self.miou),
            ("fwiou", self.fwiou),
            ("f1", self.f1),
        ]
    }

    /// Header row and value row: the six headline scores, then `iou_<c>` and
    /// `f1_<c>` per class. Six decimals; empty classes leave their
    /// per-class fields blank.
    pub fn to_csv(&self) -> String {
        let k = self.per_class_iou.len();
        let mut header: Vec<String> = self.headline().iter().map(|(n, _)| n.to_string()).collect();
        header.extend((0..k).map(|c| format!("iou_{c}")));
        header.extend((0..k).map(|c| format!("f1_{c}")));
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut values: Vec<String> = self.headline().iter().map(|(_, v)| format!("{v:.6}")).collect();
        values.extend(self.per_class_iou.iter().map(|&v| fmt(v)));
        values.extend(self.per_class_f1.iter().map(|&v| fmt(v)));
        let mut out = String::new();
        let _ = writeln!(out, "{}", header.join(","));
        let _ = writeln!(out, "{}", values.join(","));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_case() -> ConfusionMatrix {
        // reference: 4 of class 0, 6 of class 1
        let reference = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let predicted = [0, 0, 0, 1, 0, 0, 1, 1, 1, 1];
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.accumulate(&predicted, &reference).unwrap();
        cm
    }

    #[test]
    fn ten_pixel_hand_counts() {
        assert_eq!(hand_case().rows(), vec![vec![3, 1], vec![2, 4]]);
    }

    #[test]
    fn hand_derived_metrics() {
        let r = hand_case().report().unwrap();
        let want = [0.7, 0.708333, 0.4, 0.535714, 0.542857, 0.696970];
        for ((name, got), w) in r.headline().iter().zip(want) {
            assert!((got - w).abs() < 1e-6, "{name}: {got} vs {w}");
        }
    }

    #[test]
    fn identical_maps_are_diagonal_and_perfect() {
        let labels = [0, 2, 1, 1, 0, 2, 2];
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&labels, &labels).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.get(i, j), 0);
                }
            }
        }
        let r = cm.report().unwrap();
        for (name, v) in r.headline() {
            assert_eq!(v, 1.0, "{name}");
        }
    }

    #[test]
    fn halves_add_up() {
        let reference = [0, 1, 1, 0, 2, 2, 1, 0];
        let predicted = [0, 1, 0, 0, 2, 1, 1, 2];
        let mut whole = ConfusionMatrix::new(3).unwrap();
        whole.accumulate(&predicted, &reference).unwrap();
        let mut a = ConfusionMatrix::new(3).unwrap();
        a.accumulate(&predicted[..3], &reference[..3]).unwrap();
        let mut b = ConfusionMatrix::new(3).unwrap();
        b.accumulate(&predicted[3..], &reference[3..]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
        assert_eq!(a.report().unwrap(), whole.report().unwrap());
    }

    #[test]
    fn out_of_range_label_is_reported() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        let err = cm.accumulate(&[0, 1, 5], &[0, 1, 1]).unwrap_err().to_string();
        assert!(err.contains("label 5") && err.contains("position 2"), "{err}");
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn empty_matrix_and_single_class() {
        assert!(matches!(
            ConfusionMatrix::new(2).unwrap().report(),
            Err(Error::Contract(_))
        ));
        assert!(ConfusionMatrix::new(1).is_err());
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&[1, 1, 1], &[1, 1, 1]).unwrap();
        let r = cm.report().unwrap();
        assert!(r.kappa_undefined);
        assert_eq!(r.kappa, 1.0);
        assert_eq!(r.empty_classes, vec![0, 2]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn csv_layout() {
        let csv = hand_case().report().unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "pa,mpa,kappa,miou,fwiou,f1,iou_0,iou_1,f1_0,f1_1");
        assert_eq!(
            lines[1],
            "0.700000,0.708333,0.400000,0.535714,0.542857,0.696970,0.500000,0.571429,0.666667,0.727273"
        );
    }
}
