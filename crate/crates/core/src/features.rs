//! Random ReLU feature maps with nested growth.
//!
//! Row `d` of the projection is drawn from its own ChaCha substream keyed by
//! `(seed, d)`, so a map with more features extends a smaller one with the
//! same seed instead of redrawing it.

use nalgebra::DMatrix;

use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("input has {found} columns, feature map expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub seed: u64,
    pub input_dim: usize,
    /// Row `d` is the direction of feature `d`; `features × input_dim`.
    pub projection: DMatrix<f64>,
    /// Appends a constant column of ones (the intercept).
    pub include_bias: bool,
    /// Multiplier on the default `1/√P` projection scale.
    pub feature_scale: f64,
}

/// Seeded map with `features` ReLU units over `input_dim` inputs, bias included.
pub fn make_feature_map(seed: u64, input_dim: usize, features: usize) -> FeatureMap {
    FeatureMap::new(seed, input_dim, features, 1.0, true)
}

impl FeatureMap {
    pub fn new(
        seed: u64,
        input_dim: usize,
        features: usize,
        feature_scale: f64,
        include_bias: bool,
    ) -> Self {
        let std = feature_scale / (input_dim.max(1) as f64).sqrt();
        let mut projection = DMatrix::zeros(features, input_dim);
        for d in 0..features {
            let mut gen = rng::stream_rng(seed, d as u64);
            for c in 0..input_dim {
                projection[(d, c)] = std * rng::standard_normal(&mut gen);
            }
        }
        Self {
            seed,
            input_dim,
            projection,
            include_bias,
            feature_scale,
        }
    }

    pub fn features(&self) -> usize {
        self.projection.nrows()
    }

    /// Columns produced by [`transform`](Self::transform).
    pub fn output_dim(&self) -> usize {
        self.features() + usize::from(self.include_bias)
    }

    /// `max(0, X·projectionᵀ)`, followed by a ones column when the bias is on.
    /// Columns are computed one at a time, so column `j` is bit-identical
    /// across maps of any width.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, FeatureError> {
        if x.ncols() != self.input_dim {
            return Err(FeatureError::DimensionMismatch {
                expected: self.input_dim,
                found: x.ncols(),
            });
        }
        let d = self.features();
        let mut out = DMatrix::zeros(x.nrows(), self.output_dim());
        for j in 0..d {
            let pre = x * self.projection.row(j).transpose();
            out.column_mut(j).copy_from(&pre.map(|v| v.max(0.0)));
        }
        if self.include_bias {
            out.column_mut(d).fill(1.0);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_only_map_gives_ones() {
        let fm = make_feature_map(1, 3, 0);
        let x = DMatrix::from_element(4, 3, 0.3);
        let phi = fm.transform(&x).unwrap();
        assert_eq!(phi.shape(), (4, 1));
        assert!(phi.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let fm = make_feature_map(2, 5, 6);
        let phi = fm.transform(&DMatrix::zeros(3, 5)).unwrap();
        assert!(phi.columns(0, 6).iter().all(|&v| v == 0.0));
        assert!(phi.column(6).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn negative_projections_are_clipped() {
        let mut fm = make_feature_map(2, 2, 2);
        fm.projection = DMatrix::from_row_slice(2, 2, &[-1.0, -2.0, -0.5, -0.1]);
        let x = DMatrix::from_row_slice(2, 2, &[0.2, 0.9, 1.0, 0.0]);
        let phi = fm.transform(&x).unwrap();
        assert!(phi.columns(0, 2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_hand_computed_relu() {
        let mut fm = FeatureMap::new(0, 2, 2, 1.0, true);
        fm.projection = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let x = DMatrix::from_row_slice(3, 2, &[0.2, 0.7, 0.9, 0.1, 0.0, 0.5]);
        // rows: [max(0,-0.5), 1.5], [0.8, 0.65], [0, 1.0]
        let expected = DMatrix::from_row_slice(3, 3, &[0.0, 1.5, 1.0, 0.8, 0.65, 1.0, 0.0, 1.0, 1.0]);
        let phi = fm.transform(&x).unwrap();
        assert!((phi - expected).abs().max() < 1e-15);
    }

    #[test]
    fn rejects_wrong_width() {
        let fm = make_feature_map(1, 3, 2);
        assert_eq!(
            fm.transform(&DMatrix::zeros(2, 4)),
            Err(FeatureError::DimensionMismatch { expected: 3, found: 4 })
        );
    }

    #[test]
    fn projection_rows_are_nested() {
        let small = make_feature_map(9, 7, 50);
        let big = make_feature_map(9, 7, 80);
        assert_eq!(small.projection, big.projection.rows(0, 50).into_owned());
    }

    #[test]
    fn excluding_bias_drops_the_ones_column() {
        let fm = FeatureMap::new(3, 2, 4, 1.0, false);
        assert_eq!(fm.output_dim(), 4);
        assert_eq!(fm.transform(&DMatrix::zeros(1, 2)).unwrap().ncols(), 4);
    }
}
