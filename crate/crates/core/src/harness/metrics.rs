//! Classification metrics computed from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub macro_f1: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub weighted_f1: f64,
    pub weighted_p: f64,
    pub weighted_r: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class_p: Vec<f64>,
    pub per_class_r: Vec<f64>,
    pub support: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// F1 from precision and recall, `0/0 = 0`.
pub fn f1(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Self> {
        let l = confusion.len();
        if l == 0 || confusion.iter().any(|row| row.len() != l) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::invalid("confusion matrix has no samples"));
        }
        let support: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
        let predicted: Vec<usize> = (0..l).map(|c| confusion.iter().map(|row| row[c]).sum()).collect();
        let tp: Vec<f64> = (0..l).map(|c| confusion[c][c] as f64).collect();
        let p: Vec<f64> = (0..l).map(|c| ratio(tp[c], predicted[c] as f64)).collect();
        let r: Vec<f64> = (0..l).map(|c| ratio(tp[c], support[c] as f64)).collect();
        let f: Vec<f64> = (0..l).map(|c| f1(p[c], r[c])).collect();
        let macro_avg = |v: &[f64]| v.iter().sum::<f64>() / l as f64;
        let weighted = |v: &[f64]| v.iter().zip(&support).map(|(x, &s)| x * s as f64).sum::<f64>() / total as f64;
        Ok(Metrics {
            acc: tp.iter().sum::<f64>() / total as f64,
            macro_f1: macro_avg(&f),
            macro_p: macro_avg(&p),
            macro_r: macro_avg(&r),
            weighted_f1: weighted(&f),
            weighted_p: weighted(&p),
            weighted_r: weighted(&r),
            per_class_f1: f,
            per_class_p: p,
            per_class_r: r,
            support,
            confusion,
        })
    }

    /// Metrics for predicted vs gold labels over `n_labels` classes.
    pub fn from_predictions(predicted: &[usize], gold: &[usize], n_labels: usize) -> Result<Self> {
        if predicted.len() != gold.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} labels",
                predicted.len(),
                gold.len()
            )));
        }
        let mut confusion = vec![vec![0; n_labels]; n_labels];
        for (&p, &g) in predicted.iter().zip(gold) {
            if p >= n_labels || g >= n_labels {
                return Err(Error::IndexOutOfRange {
                    what: "label",
                    index: p.max(g),
                    len: n_labels,
                });
            }
            confusion[g][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    /// The scalar summary metrics in a fixed order.
    pub fn scalars(&self) -> Scalars {
        Scalars {
            acc: self.acc,
            macro_f1: self.macro_f1,
            macro_p: self.macro_p,
            macro_r: self.macro_r,
            weighted_f1: self.weighted_f1,
            weighted_p: self.weighted_p,
            weighted_r: self.weighted_r,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub acc: f64,
    pub macro_f1: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub weighted_f1: f64,
    pub weighted_p: f64,
    pub weighted_r: f64,
}

impl Scalars {
    fn to_array(self) -> [f64; 7] {
        [
            self.acc,
            self.macro_f1,
            self.macro_p,
            self.macro_r,
            self.weighted_f1,
            self.weighted_p,
            self.weighted_r,
        ]
    }

    fn from_array(a: [f64; 7]) -> Self {
        Scalars {
            acc: a[0],
            macro_f1: a[1],
            macro_p: a[2],
            macro_r: a[3],
            weighted_f1: a[4],
            weighted_p: a[5],
            weighted_r: a[6],
        }
    }
}

/// Mean and sample standard deviation (`n − 1` denominator).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 values, got {}", values.len())));
    }
    // shifted by the first value so identical inputs give exactly zero spread
    let n = values.len() as f64;
    let shift = values[0];
    let dev: Vec<f64> = values.iter().map(|v| v - shift).collect();
    let dmean = dev.iter().sum::<f64>() / n;
    let var = dev.iter().map(|x| (x - dmean) * (x - dmean)).sum::<f64>() / (n - 1.0);
    Ok((shift + dmean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Scalars,
    pub std: Scalars,
}

impl MetricSummary {
    pub fn from_runs(runs: &[Metrics]) -> Result<Self> {
        let arrays: Vec<[f64; 7]> = runs.iter().map(|m| m.scalars().to_array()).collect();
        let mut mean = [0.0; 7];
        let mut std = [0.0; 7];
        for i in 0..7 {
            let column: Vec<f64> = arrays.iter().map(|a| a[i]).collect();
            (mean[i], std[i]) = mean_std(&column)?;
        }
        Ok(MetricSummary {
            mean: Scalars::from_array(mean),
            std: Scalars::from_array(std),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_two_class_example() {
        let m = Metrics::from_confusion(vec![vec![2, 1], vec![0, 3]]).unwrap();
        assert!((m.acc - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.per_class_p, vec![1.0, 0.75]);
        assert!((m.per_class_r[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class_r[1], 1.0);
        assert!((m.per_class_f1[0] - 0.8).abs() < 1e-15);
        assert!((m.per_class_f1[1] - 6.0 / 7.0).abs() < 1e-15);
        assert!((m.macro_f1 - 0.82857).abs() < 1e-5);
        assert!((m.weighted_f1 - (3.0 * 0.8 + 3.0 * 6.0 / 7.0) / 6.0).abs() < 1e-15);
        assert_eq!(m.support, vec![3, 3]);
    }

    #[test]
    fn perfect_predictions_are_all_ones() {
        let gold = [0, 1, 2, 2, 1, 0, 3];
        let m = Metrics::from_predictions(&gold, &gold, 4).unwrap();
        let s = m.scalars();
        for v in s.to_array() {
            assert_eq!(v, 1.0);
        }
        assert!(m.per_class_f1.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn zero_division_is_zero() {
        // class 1 never predicted, class 2 never present
        let m = Metrics::from_predictions(&[0, 0, 2], &[0, 1, 0], 3).unwrap();
        assert_eq!(m.per_class_p[1], 0.0);
        assert_eq!(m.per_class_f1[2], 0.0);
        assert!(m.acc > 0.0);
    }

    #[test]
    fn random_confusions_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let l = rng.random_range(2..6);
            let conf: Vec<Vec<usize>> = (0..l).map(|_| (0..l).map(|_| rng.random_range(0..5)).collect()).collect();
            if conf.iter().flatten().sum::<usize>() == 0 {
                continue;
            }
            let m = Metrics::from_confusion(conf.clone()).unwrap();
            let trace: usize = (0..l).map(|c| conf[c][c]).sum();
            let total: usize = conf.iter().flatten().sum();
            assert_eq!(m.acc, trace as f64 / total as f64);
            let max = m.per_class_f1.iter().copied().fold(f64::MIN, f64::max);
            let min = m.per_class_f1.iter().copied().fold(f64::MAX, f64::min);
            assert!(m.macro_f1 <= max + 1e-15 && m.macro_f1 >= min - 1e-15);
            for (row, &s) in conf.iter().zip(&m.support) {
                assert_eq!(row.iter().sum::<usize>(), s);
            }
        }
    }

    #[test]
    fn mean_std_oracle() {
        let (m, s) = mean_std(&[0.8, 0.9]).unwrap();
        assert!((m - 0.85).abs() < 1e-15);
        assert!((s - 0.05f64.hypot(0.05)).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7, 0.7, 0.7]).unwrap().1, 0.0);
        assert!(mean_std(&[1.0]).is_err());
    }

    #[test]
    fn summary_over_runs() {
        let a = Metrics::from_confusion(vec![vec![2, 1], vec![0, 3]]).unwrap();
        let b = Metrics::from_confusion(vec![vec![3, 0], vec![0, 3]]).unwrap();
        let s = MetricSummary::from_runs(&[a.clone(), b]).unwrap();
        assert!((s.mean.acc - (5.0 / 6.0 + 1.0) / 2.0).abs() < 1e-15);
        let expected_std = (1.0 - 5.0 / 6.0) / 2f64.sqrt();
        assert!((s.std.acc - expected_std).abs() < 1e-15);
        let same = MetricSummary::from_runs(&[a.clone(), a]).unwrap();
        assert_eq!(same.std, Scalars::default());
    }
}
