use nalgebra::{DMatrix, SymmetricEigen};

use crate::numcore::Tensor;
use crate::{Error, Result};

/// Mean plus the top-k orthonormal principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[k × dim]`, one axis per row.
    pub axes: Tensor,
    /// Variance of the data along each axis.
    pub explained_variance: Vec<f64>,
    /// Total variance of the data.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.axes.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    /// Map projected rows back to the input space.
    pub fn reconstruct(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.k() {
            return Err(Error::Shape {
                op: "pca_reconstruct",
                left: z.shape().to_vec(),
                right: self.axes.shape().to_vec(),
            });
        }
        let d = self.dim();
        let mut out = Vec::with_capacity(z.rows() * d);
        for i in 0..z.rows() {
            let mut row = self.mean.clone();
            for (a, &c) in z.row(i).iter().enumerate() {
                for (r, w) in row.iter_mut().zip(self.axes.row(a)) {
                    *r += c * w;
                }
            }
            out.extend(row);
        }
        Tensor::new(vec![z.rows(), d], out)
    }
}

/// Eigendecomposition of the sample covariance; axes sorted by variance,
/// each signed so its largest-magnitude entry is positive.
pub fn pca_fit(x: &Tensor, k: usize) -> Result<PcaModel> {
    if x.shape().len() != 2 {
        return Err(Error::Domain("pca needs a matrix".into()));
    }
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || n < 2 || k > (n - 1).min(d) {
        return Err(Error::Domain(format!(
            "pca dimension {k} must be in 1..={} for {n} points of dim {d}",
            n.saturating_sub(1).min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x.at(i, j) - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total_variance = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(k * d);
    let mut explained_variance = Vec::with_capacity(k);
    for &c in &order[..k] {
        let col = eig.eigenvectors.column(c);
        let lead = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        axes.extend(col.iter().map(|v| v * sign));
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(PcaModel {
        mean,
        axes: Tensor::new(vec![k, d], axes)?,
        explained_variance,
        total_variance,
    })
}

pub fn pca_project(m: &PcaModel, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != m.dim() {
        return Err(Error::Shape {
            op: "pca_project",
            left: x.shape().to_vec(),
            right: vec![m.dim()],
        });
    }
    let k = m.k();
    let mut out = Vec::with_capacity(x.rows() * k);
    for i in 0..x.rows() {
        let row = x.row(i);
        for a in 0..k {
            out.push(
                row.iter()
                    .zip(&m.mean)
                    .zip(m.axes.row(a))
                    .map(|((v, mu), w)| (v - mu) * w)
                    .sum(),
            );
        }
    }
    Tensor::new(vec![x.rows(), k], out)
}
