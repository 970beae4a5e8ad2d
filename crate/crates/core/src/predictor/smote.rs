//! Synthetic minority oversampling with Mahalanobis nearest neighbors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// Sample covariance (divisor `n - 1`) of a set of equal-length vectors.
pub fn sample_covariance(points: &[Vec<f64>]) -> DMatrix<f64> {
    let d = points[0].len();
    let n = points.len();
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += DVector::from_column_slice(p);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = DVector::from_column_slice(p) - &mean;
        cov += &c * c.transpose();
    }
    cov / (n.max(2) - 1) as f64
}

/// Maps points into coordinates where Euclidean distance equals the Mahalanobis distance of
/// `covariance` regularized by `1e-8 * trace / dim` on the diagonal.
pub fn whiten(points: &[Vec<f64>], covariance: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    let d = covariance.nrows();
    let trace = covariance.trace();
    let mut reg = covariance.clone();
    if trace > 0.0 {
        for i in 0..d {
            reg[(i, i)] += 1e-8 * trace / d as f64;
        }
    } else {
        // all points coincide: every distance is zero under any metric
        reg = DMatrix::identity(d, d);
    }
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Numerical("minority covariance is not positive definite".into()))?;
    let l = chol.l();
    points
        .iter()
        .map(|p| {
            l.solve_lower_triangular(&DVector::from_column_slice(p))
                .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))
        })
        .collect()
}

/// Indices of the `k` Mahalanobis-nearest other members of every point; ties go to the lower index.
pub fn nearest_neighbors(points: &[Vec<f64>], k: usize, covariance: &DMatrix<f64>) -> Result<Vec<Vec<usize>>> {
    let z = whiten(points, covariance)?;
    Ok((0..z.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..z.len())
                .filter(|&j| j != i)
                .map(|j| ((&z[i] - &z[j]).norm_squared(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

/// Creates `count` points `x + u (x_nn - x)` with `x` a random minority member, `x_nn` one of
/// its `k` nearest minority neighbors and `u ~ U(0, 1)`. Returns each point with the index of `x`.
pub fn smote_oversample<R: Rng + ?Sized>(
    minority: &[Vec<f64>],
    k: usize,
    count: usize,
    covariance: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, usize)>> {
    if k == 0 || minority.len() < k + 1 {
        return Err(Error::InsufficientData(format!(
            "SMOTE with k = {k} needs at least {} minority samples, got {}",
            k + 1,
            minority.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let cov = match covariance {
        Some(c) => c.clone(),
        None => sample_covariance(minority),
    };
    let neighbors = nearest_neighbors(minority, k, &cov)?;
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..minority.len());
            let j = neighbors[i][rng.random_range(0..k)];
            let u: f64 = rng.random();
            let x = &minority[i];
            let point = x.iter().zip(&minority[j]).map(|(a, b)| a + u * (b - a)).collect();
            (point, i)
        })
        .collect())
}
