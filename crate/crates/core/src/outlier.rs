//! Feature-outlier detection and protected-neuron scoring.
//!
//! A feature dimension is an outlier when its mean absolute FFN output
//! exceeds `tau` times the mean over all feature dimensions. Neurons are then //! scored by how strongly they drive those outlier features: neuron j's score
//! is its mean absolute post-activation times the total absolute down-projection
//! weight it sends into the outlier dimensions. The top scorers become the
//! protected set.
//!
//! All statistics are accumulated in f64 regardless of the model's scalar.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{collect_ffn_stats, FfnStats, ToyModel};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Threshold means against `tau * grand_mean`; returns the grand mean and the
/// strictly-exceeding indices in ascending order.
pub fn outliers_from_means(means: &[f64], tau: f64) -> (f64, Vec<usize>) {
    if means.is_empty() {
        return (0.0, Vec::new());
    }
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let threshold = tau * grand;
    let picks = means
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > threshold)
        .map(|(i, _)| i)
        .collect();
    (grand, picks)
}

/// Outlier analysis of one block's FFN outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutlierReport {
    pub block: usize,
    pub feature_means: Vec<f64>,
    pub grand_mean: f64,
    pub tau: f64,
    pub threshold: f64,
    pub outliers: Vec<usize>,
}

/// Build per-block reports from already-collected forward statistics.
pub fn reports_from_stats(stats: &[FfnStats], tau: f64) -> Result<Vec<OutlierReport>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("outlier threshold {tau} must be positive")));
    }
    Ok(stats
        .iter()
        .enumerate()
        .map(|(block, s)| {
            let (grand_mean, outliers) = outliers_from_means(&s.y_abs_mean, tau);
            OutlierReport {
                block,
                feature_means: s.y_abs_mean.clone(),
                grand_mean,
                tau,
                threshold: tau * grand_mean,
                outliers,
            }
        })
        .collect())
}

/// Run the probes and report outlier features for every block.
pub fn find_feature_outliers<S: Scalar>(
    model: &ToyModel<S>,
    probes: &[Vec<u32>],
    tau: f64,
) -> Result<Vec<OutlierReport>> {
    reports_from_stats(&collect_ffn_stats(model, probes)?, tau)
}

/// The earliest block that shows any outlier feature.
pub fn select_protected_block(reports: &[OutlierReport]) -> Option<usize> {
    reports.iter().find(|r| !r.outliers.is_empty()).map(|r| r.block)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuronScores {
    /// Score per neuron (length d_ff).
    pub scores: Vec<f64>,
    /// Top-scoring neurons in rank order (highest first, ties to the lower
    /// index).
    pub selected: Vec<usize>,
}

/// Score every neuron by `u_abs_mean[j] * sum over outlier dims of
/// |w_down[j, dim]|` and select the `select` best.
pub fn score_neurons<S: Scalar>(
    u_abs_mean: &[f64],
    w_down: &DenseMatrix<S>,
    outlier_dims: &[usize],
    select: usize,
) -> Result<NeuronScores> {
    let d_ff = w_down.rows();
    if u_abs_mean.len() != d_ff {
        return Err(Error::Shape(format!(
            "{} activation means for {d_ff} neurons",
            u_abs_mean.len()
        )));
    }
    if select == 0 || select > d_ff {
        return Err(Error::Selection(format!(
            "cannot select {select} of {d_ff} neurons"
        )));
    }
    for &d in outlier_dims {
        if d >= w_down.cols() {
            return Err(Error::Selection(format!(
                "outlier dim {d} outside {} output features",
                w_down.cols()
            )));
        }
    }
    let scores: Vec<f64> = (0..d_ff)
        .map(|j| {
            let row = w_down.row(j);
            let mass: f64 = outlier_dims.iter().map(|&d| row[d].as_f64().abs()).sum();
            u_abs_mean[j] * mass
        })
        .collect();
    let mut order: Vec<usize> = (0..d_ff).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("scores are finite").then(a.cmp(&b))
    });
    order.truncate(select);
    Ok(NeuronScores { scores, selected: order })
}
