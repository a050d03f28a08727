use crate::error::{invalid, Result};
use nalgebra::{DMatrix, DVector};

/// Fréchet distance between Gaussian fits of two feature sets (rows are
/// samples). Full covariances are used when both sets have at least twice
/// as many samples as dimensions; otherwise only the diagonals.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Fréchet distance needs non-empty feature sets"));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|r| r.len() != d) {
        return Err(invalid("feature vectors must share one non-zero dimension"));
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let shift = (&mu_a - &mu_b).norm_squared();
    let full = a.len() >= 2 * d && b.len() >= 2 * d;
    let trace_term = if full {
        cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(&cov_a, &cov_b)
    } else {
        (0..d)
            .map(|i| {
                let (va, vb) = (cov_a[(i, i)], cov_b[(i, i)]);
                va + vb - 2.0 * (va * vb).sqrt()
            })
            .sum()
    };
    Ok((shift + trace_term).max(0.0))
}

/// Mean and population covariance.
fn moments(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / n as f64;
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Tr((Σ_a Σ_b)^½) computed as Tr((Σ_a^½ Σ_b Σ_a^½)^½), which shares its
/// eigenvalues and stays symmetric.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = psd_sqrt(a);
    let inner = &sa * b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}
