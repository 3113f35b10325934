//! Per-dimension min/max scaling to `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranges narrower than this are widened to it.
pub const MIN_RANGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// The identity map on `[-1, 1]^dim`.
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    /// Column-wise bounds of a non-empty set of rows.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Contract("cannot fit a normalizer to no data".into()))?;
        let mut min = first.to_vec();
        let mut max = first.to_vec();
        for row in it {
            if row.len() != min.len() {
                return Err(Error::dim("normalizer fit", &[min.len()], &[row.len()]));
            }
            for (i, &v) in row.iter().enumerate() {
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn range(&self, i: usize) -> f64 {
        (self.max[i] - self.min[i]).max(MIN_RANGE)
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| 2.0 * (v - self.min[i]) / self.range(i) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, v)| (v + 1.0) / 2.0 * self.range(i) + self.min[i])
            .collect()
    }

    /// Normalises a flat buffer of consecutive `dim`-sized records.
    pub fn normalize_flat(&self, x: &[f64]) -> Vec<f64> {
        x.chunks(self.dim())
            .flat_map(|c| self.normalize(c))
            .collect()
    }

    pub fn denormalize_flat(&self, y: &[f64]) -> Vec<f64> {
        y.chunks(self.dim())
            .flat_map(|c| self.denormalize(c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let rows = [vec![0.0, 5.0, 1.0], vec![2.0, -5.0, 1.0]];
        let n = Normalizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        for r in &rows {
            let back = n.denormalize(&n.normalize(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert_eq!(n.normalize(&[2.0, -5.0, 1.0])[..2], [1.0, -1.0]);
    }

    #[test]
    fn degenerate_range_maps_to_one_point() {
        let rows = [vec![0.3], vec![0.3], vec![0.3]];
        let n = Normalizer::fit(rows.iter().map(Vec::as_slice)).unwrap();
        let ys: Vec<f64> = rows.iter().map(|r| n.normalize(r)[0]).collect();
        assert!(ys.iter().all(|&y| y == ys[0] && y.is_finite()));
    }
}
