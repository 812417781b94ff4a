//! Generation quality and representation metrics.

mod predictive;
mod probe;
mod report;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, Axis};

use crate::error::{shape_err, Error, Result};

pub use predictive::{predictive_score, PredictorConfig};
pub use probe::{probe, stratified_split, ProbeKind};
pub use report::{
    aggregate, markdown_table, read_reports_csv, write_markdown, write_reports_csv, AggregateRow, MeanStd,
    MetricsReport,
};

/// Eigenvalues this close to zero are treated as numerical noise.
const EIG_CLIP: f64 = 1e-8;

pub fn generation_mse(generated: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    if generated.dim() != truth.dim() {
        return Err(shape_err(format!(
            "generated {:?} vs ground truth {:?}",
            generated.dim(),
            truth.dim()
        )));
    }
    Ok((generated - truth).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// `[N, L, d] -> [N, L * d]`.
pub fn flatten_windows(x: &Array3<f64>) -> Array2<f64> {
    let (n, l, d) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, l * d))
        .expect("contiguous")
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Column means and unbiased covariance of `[N, d]` samples.
pub fn mean_and_covariance(x: &Array2<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(shape_err(format!("need at least 2 samples, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = to_dmatrix(&(x - &mean));
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean.to_vec(), cov))
}

/// Square root of a symmetric positive semi-definite matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| clip_eigen(l).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn clip_eigen(l: f64) -> f64 {
    if l < -EIG_CLIP {
        log::warn!("covariance eigenvalue {l:e} is negative beyond tolerance; clipping");
    }
    l.max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu - mu'|^2 + tr(S + S' - 2 (S^1/2 S' S^1/2)^1/2)`.
pub fn fid(real: &Array2<f64>, generated: &Array2<f64>) -> Result<f64> {
    if real.ncols() != generated.ncols() {
        return Err(shape_err(format!(
            "feature widths differ: {} vs {}",
            real.ncols(),
            generated.ncols()
        )));
    }
    let d = real.ncols();
    if d > real.nrows().min(generated.nrows()) {
        log::warn!(
            "FID with {d} features from {} / {} samples: covariances are rank deficient",
            real.nrows(),
            generated.nrows()
        );
    }
    let (mu1, s1) = mean_and_covariance(real)?;
    let (mu2, s2) = mean_and_covariance(generated)?;
    if s1
        .iter()
        .chain(s2.iter())
        .chain(mu1.iter())
        .chain(mu2.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("non-finite feature moments".into()));
    }
    let shift: f64 = mu1.iter().zip(&mu2).map(|(a, b)| (a - b).powi(2)).sum();
    let root1 = psd_sqrt(&s1);
    let inner = &root1 * &s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| clip_eigen(l).sqrt())
        .sum();
    Ok((shift + s1.trace() + s2.trace() - 2.0 * tr_cross).max(0.0))
}

/// Linear centered kernel alignment between `[N, d1]` and `[N, d2]`.
pub fn latent_correlation(zx: &Array2<f64>, zy: &Array2<f64>) -> Result<f64> {
    if zx.nrows() != zy.nrows() {
        return Err(shape_err(format!(
            "row counts differ: {} vs {}",
            zx.nrows(),
            zy.nrows()
        )));
    }
    let cx = zx - &zx.mean_axis(Axis(0)).ok_or_else(|| shape_err("empty input"))?;
    let cy = zy - &zy.mean_axis(Axis(0)).ok_or_else(|| shape_err("empty input"))?;
    let frob2 = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
    let cross = frob2(&cy.t().dot(&cx));
    let nx = frob2(&cx.t().dot(&cx)).sqrt();
    let ny = frob2(&cy.t().dot(&cy)).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Numerical("CKA of a zero-variance representation".into()));
    }
    Ok(cross / (nx * ny))
}

/// Projection onto the two leading principal components.
pub fn pca_2d(z: &Array2<f64>) -> Result<Array2<f64>> {
    let (mean, cov) = mean_and_covariance(z)?;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = order.len().min(2);
    let mut out = Array2::zeros((z.nrows(), 2));
    for (i, row) in z.outer_iter().enumerate() {
        for (c, &idx) in order[..k].iter().enumerate() {
            let v = eig.eigenvectors.column(idx);
            // fix the sign so the largest-magnitude loading is positive
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            out[[i, c]] = sign
                * row
                    .iter()
                    .zip(&mean)
                    .zip(v.iter())
                    .map(|((x, m), w)| (x - m) * w)
                    .sum::<f64>();
        }
    }
    Ok(out)
}
