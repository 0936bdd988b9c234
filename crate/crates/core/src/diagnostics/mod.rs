//! Attention-map export, ε-rank measurement and the feature dump.
//!
//! Nothing here asserts a low-rank property; the reports are descriptive.

mod export;
mod svd;

pub use export::{
    export_attention, export_features, layout_names, read_matrix_csv, write_matrix_csv,
    write_rank_csv, FEATURE_HEADER_PREFIX, RANK_HEADER,
};
pub use svd::{singular_values, Spectrum, MAX_SWEEPS, OFF_DIAGONAL_TOL};

use std::fmt;

use crate::data::Dataset;
use crate::model::{Model, Phi};
use crate::numerics::Tensor;
use crate::par::{map_indexed, Execution};
use crate::tcpa::LayerRecord;
use crate::Result;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub layer: usize,
    pub head: usize,
    pub epsilon: f64,
    pub singular_values: Vec<f64>,
    pub epsilon_rank: usize,
    pub matrix_extent: usize,
    /// False when the Jacobi sweeps ran out before the off-diagonal mass
    /// settled; the values are then approximate.
    pub converged: bool,
}

impl RankReport {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

/// Number of singular values above `epsilon · σ₁`, zero for a zero matrix.
pub fn count_above(values: &[f64], epsilon: f64) -> usize {
    match values.first() {
        Some(&s1) if s1 > 0.0 => values.iter().filter(|&&s| s > epsilon * s1).count(),
        _ => 0,
    }
}

pub fn epsilon_rank(
    layer: usize,
    head: usize,
    matrix: &Tensor,
    epsilon: f64,
) -> Result<RankReport> {
    let spectrum = singular_values(matrix)?;
    Ok(RankReport {
        layer,
        head,
        epsilon,
        epsilon_rank: count_above(&spectrum.values, epsilon),
        singular_values: spectrum.values,
        matrix_extent: matrix.rows(),
        converged: spectrum.converged,
    })
}

/// One report per (layer, head) of a captured forward pass, measured on the
/// maps that actually weighted the values.
pub fn rank_reports(records: &[LayerRecord], epsilon: f64) -> Result<Vec<RankReport>> {
    let mut out = Vec::new();
    for r in records {
        for (h, maps) in r.maps.iter().enumerate() {
            out.push(epsilon_rank(r.layer_index, h, &maps.effective, epsilon)?);
        }
    }
    Ok(out)
}

/// Mean ε-rank over heads and images, one entry per layer.
pub fn mean_rank_per_layer(
    model: &Model,
    phi: &Phi,
    images: &[Tensor],
    epsilon: f64,
    exec: Execution,
) -> Result<Vec<f64>> {
    let per_image = map_indexed(images.len(), exec, |i| -> Result<Vec<RankReport>> {
        rank_reports(&model.capture(phi, &images[i])?, epsilon)
    });
    let layers = model.config.num_layers;
    let mut sums = vec![0.0; layers];
    let mut counts = vec![0usize; layers];
    for reports in per_image {
        for r in reports? {
            sums[r.layer - 1] += r.epsilon_rank as f64;
            counts[r.layer - 1] += 1;
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Per-layer mean ε-rank of two variants side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub labels: [String; 2],
    pub epsilon: f64,
    pub images: usize,
    /// `(layer, left, right)`
    pub rows: Vec<(usize, f64, f64)>,
}

/// Compares two trained variants on the first `limit` images of `dataset`.
pub fn diversity_report(
    left: (&str, &Model, &Phi),
    right: (&str, &Model, &Phi),
    dataset: &Dataset,
    limit: usize,
    epsilon: f64,
    exec: Execution,
) -> Result<DiversityReport> {
    let images: Vec<Tensor> = (0..dataset.len().min(limit))
        .map(|i| dataset.image(i))
        .collect();
    let a = mean_rank_per_layer(left.1, left.2, &images, epsilon, exec)?;
    let b = mean_rank_per_layer(right.1, right.2, &images, epsilon, exec)?;
    Ok(DiversityReport {
        labels: [left.0.to_string(), right.0.to_string()],
        epsilon,
        images: images.len(),
        rows: a
            .iter()
            .zip(&b)
            .enumerate()
            .map(|(j, (&x, &y))| (j + 1, x, y))
            .collect(),
    })
}

impl fmt::Display for DiversityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "mean epsilon-rank (epsilon {:e}, {} images)",
            self.epsilon, self.images
        )?;
        writeln!(
            f,
            "{:>5}  {:>12}  {:>12}",
            "layer", self.labels[0], self.labels[1]
        )?;
        for (layer, a, b) in &self.rows {
            writeln!(f, "{layer:>5}  {a:>12.3}  {b:>12.3}")?;
        }
        Ok(())
    }
}
