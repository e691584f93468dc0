use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose training standard deviation falls below this are constant.
pub const CONSTANT_STD: f64 = 1e-12;

/// Per-column mean and population standard deviation from training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("cannot standardize an empty dataset".into()));
        }
        if rows.len() < 2 {
            return Err(Error::Degenerate(
                "standardization needs at least two rows".into(),
            ));
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_constant(&self, col: usize) -> bool {
        self.std[col] < CONSTANT_STD
    }

    pub fn transform_into(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| if *s < CONSTANT_STD { 0.0 } else { (v - m) / s }),
        );
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(row.len());
        self.transform_into(row, &mut out);
        out
    }

    pub fn transform_all(&self, rows: &[&[f64]]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_column() {
        let rows: Vec<&[f64]> = vec![&[1.0], &[3.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.transform(&[1.0]), vec![-1.0]);
        assert_eq!(s.transform(&[3.0]), vec![1.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let rows: Vec<&[f64]> = vec![&[5.0, 1.0], &[5.0, 2.0], &[5.0, 3.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert!(s.is_constant(0));
        for r in &rows {
            assert_eq!(s.transform(r)[0], 0.0);
        }
    }

    #[test]
    fn uses_training_statistics() {
        let rows: Vec<&[f64]> = vec![&[0.0], &[2.0]];
        let s = Standardizer::fit(&rows).unwrap();
        // a validation row far from the training data keeps the train scale
        assert_eq!(s.transform(&[10.0]), vec![9.0]);
    }

    #[test]
    fn errors() {
        assert!(matches!(Standardizer::fit(&[]), Err(Error::EmptyInput(_))));
        assert!(Standardizer::fit(&[&[1.0][..]]).is_err());
    }

    proptest! {
        #[test]
        fn zero_mean_unit_variance(cols in prop::collection::vec(
            prop::collection::vec(-1e3f64..1e3, 3), 2..60)) {
            let rows: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            let s = Standardizer::fit(&rows).unwrap();
            let t = s.transform_all(&rows);
            let n = t.len() as f64;
            for j in 0..3 {
                let mean = t.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = t.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                if s.is_constant(j) {
                    prop_assert!(t.iter().all(|r| r[j] == 0.0));
                } else {
                    prop_assert!((var - 1.0).abs() < 1e-6, "var {}", var);
                }
            }
        }
    }
}
