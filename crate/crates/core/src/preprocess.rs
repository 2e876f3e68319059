//! Zero-padding and anchor-fitted standard scaling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::check_finite;

/// Floor applied to per-feature standard deviations at apply time.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub original_dim: usize,
    pub padded_dim: usize,
}

impl Padding {
    pub fn new(original_dim: usize, padded_dim: usize) -> Result<Self> {
        if padded_dim < original_dim {
            return Err(Error::invalid(format!(
                "cannot pad {original_dim} columns down to {padded_dim}"
            )));
        }
        Ok(Padding {
            original_dim,
            padded_dim,
        })
    }
}

/// Appends zero columns so that `x` has `target_dim` columns.
pub fn zero_pad(x: &DMatrix<f64>, target_dim: usize) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    if target_dim < d {
        return Err(Error::DimensionMismatch {
            expected: target_dim,
            found: d,
        });
    }
    if target_dim == d {
        return Ok(x.clone());
    }
    Ok(x.clone().resize_horizontally(target_dim, 0.0))
}

/// Keeps the first `dim` columns.
pub fn truncate(x: DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    if x.ncols() == dim {
        x
    } else {
        x.columns(0, dim).into_owned()
    }
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerStats {
    pub mean: DVector<f64>,
    /// Raw (unclamped) standard deviation.
    pub std: DVector<f64>,
    pub epsilon: f64,
}

impl ScalerStats {
    pub fn identity(dim: usize) -> Self {
        ScalerStats {
            mean: DVector::zeros(dim),
            std: DVector::from_element(dim, 1.0),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn scale(&self, j: usize) -> f64 {
        self.std[j].max(self.epsilon)
    }

    fn check_dim(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }
}

pub fn fit_scaler(anchor_rows: &DMatrix<f64>) -> Result<ScalerStats> {
    let k = anchor_rows.nrows();
    if k < 2 {
        return Err(Error::invalid(format!(
            "scaler needs at least 2 rows, got {k}"
        )));
    }
    check_finite(anchor_rows)?;
    let n = k as f64;
    let d = anchor_rows.ncols();
    let mut mean = DVector::zeros(d);
    let mut std = DVector::zeros(d);
    for j in 0..d {
        let col = anchor_rows.column(j);
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[j] = m;
        std[j] = var.sqrt();
    }
    Ok(ScalerStats {
        mean,
        std,
        epsilon: DEFAULT_EPSILON,
    })
}

/// `(x - mean) / max(std, epsilon)` per feature.
pub fn apply_scaler(stats: &ScalerStats, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    stats.check_dim(x)?;
    let mut out = x.clone();
    for j in 0..out.ncols() {
        let (m, s) = (stats.mean[j], stats.scale(j));
        out.column_mut(j).apply(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

pub fn invert_scaler(stats: &ScalerStats, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    stats.check_dim(x)?;
    let mut out = x.clone();
    for j in 0..out.ncols() {
        let (m, s) = (stats.mean[j], stats.scale(j));
        out.column_mut(j).apply(|v| *v = *v * s + m);
    }
    Ok(out)
}
