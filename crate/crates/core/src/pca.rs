//! Principal component projection fitted by eigendecomposition of the
//! (population, `1/n`) covariance matrix.

use thiserror::Error;

use crate::numerics::{sym_eig, Matrix, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcaError {
    #[error("PCA needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("requested {requested} components, only {available} available")]
    TooManyComponents { requested: usize, available: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, PcaError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Per-feature divisor applied after centring; all ones for raw PCA.
    pub scale: Vec<f64>,
    /// Columns are unit eigenvectors, ordered by descending eigenvalue.
    pub components: Matrix,
    pub eigenvalues: Vec<f64>,
    pub n_components: usize,
}

/// Column means and the `1/n` covariance of `x`.
pub fn covariance(x: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    let mut centred = vec![0.0; d];
    for row in x.iter_rows() {
        for ((c, v), m) in centred.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centred[i];
            if ci == 0.0 {
                continue;
            }
            let out = cov.row_mut(i);
            for j in i..d {
                out[j] += ci * centred[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

/// Fits on `x`. With `standardize`, each centred column is divided by its
/// standard deviation (zero-variance columns are left unscaled) before
/// the covariance is formed.
pub fn fit(x: &Matrix, standardize: bool) -> Result<PcaModel> {
    if x.rows() < 2 {
        return Err(PcaError::TooFewRows(x.rows()));
    }
    if !x.is_finite() {
        return Err(PcaError::NonFinite);
    }
    let (mean, cov) = covariance(x);
    let d = x.cols();
    let scale: Vec<f64> = if standardize {
        (0..d)
            .map(|j| {
                let var = cov[(j, j)];
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect()
    } else {
        vec![1.0; d]
    };
    let mut s = cov;
    if standardize {
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] /= scale[i] * scale[j];
            }
        }
    }
    let eig = sym_eig(&s)?;
    Ok(PcaModel {
        mean,
        scale,
        components: eig.vectors,
        eigenvalues: eig.values,
        n_components: d,
    })
}

impl PcaModel {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Returns a copy that projects onto the leading `n` components by default.
    pub fn with_components(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_features() {
            return Err(PcaError::TooManyComponents {
                requested: n,
                available: self.n_features(),
            });
        }
        self.n_components = n;
        Ok(self)
    }

    /// Projects `x` onto the first `n_components` principal axes.
    pub fn transform(&self, x: &Matrix, n_components: usize) -> Result<Matrix> {
        let d = self.n_features();
        if x.cols() != d {
            return Err(PcaError::DimensionMismatch {
                expected: d,
                got: x.cols(),
            });
        }
        if n_components == 0 || n_components > d {
            return Err(PcaError::TooManyComponents {
                requested: n_components,
                available: d,
            });
        }
        let mut out = Matrix::zeros(x.rows(), n_components);
        let mut z = vec![0.0; d];
        for (i, row) in x.iter_rows().enumerate() {
            for j in 0..d {
                z[j] = (row[j] - self.mean[j]) / self.scale[j];
            }
            let o = out.row_mut(i);
            for (k, zk) in z.iter().enumerate() {
                if *zk == 0.0 {
                    continue;
                }
                let g = self.components.row(k);
                for c in 0..n_components {
                    o[c] += zk * g[c];
                }
            }
        }
        Ok(out)
    }

    /// Maps scores back to feature space (exact only with all components).
    pub fn inverse_transform(&self, y: &Matrix) -> Result<Matrix> {
        let d = self.n_features();
        let k = y.cols();
        if k > d {
            return Err(PcaError::TooManyComponents {
                requested: k,
                available: d,
            });
        }
        let mut out = Matrix::zeros(y.rows(), d);
        for (i, row) in y.iter_rows().enumerate() {
            let o = out.row_mut(i);
            for j in 0..d {
                let g = self.components.row(j);
                let z: f64 = (0..k).map(|c| row[c] * g[c]).sum();
                o[j] = z * self.scale[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_data(n: usize, sds: &[f64], rng: &mut RngStream) -> Matrix {
        let mut x = Matrix::zeros(n, sds.len());
        for i in 0..n {
            for (j, sd) in sds.iter().enumerate() {
                x[(i, j)] = 3.0 + sd * rng.normal();
            }
        }
        x
    }

    #[test]
    fn independent_variances() {
        // Exactly uncorrelated columns with variances 4 and 1 under 1/n.
        let x = Matrix::from_rows(&[[2.0, 1.0], [2.0, -1.0], [-2.0, 1.0], [-2.0, -1.0]]).unwrap();
        let m = fit(&x, false).unwrap();
        assert!((m.eigenvalues[0] - 4.0).abs() < 1e-12);
        assert!((m.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert_eq!(m.components.col(0), vec![1.0, 0.0]);
    }

    #[test]
    fn collinear_and_constant() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [5.0, 10.0]]).unwrap();
        let m = fit(&x, false).unwrap();
        assert!(m.eigenvalues[1].abs() < 1e-10);
        let c = Matrix::from_rows(&vec![[1.5, -2.0, 7.0]; 6]).unwrap();
        let m = fit(&c, false).unwrap();
        assert!(m.eigenvalues.iter().all(|v| v.abs() < 1e-15));
        let y = m.transform(&c, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transformed_covariance_is_diagonal() {
        let mut rng = RngStream::new(2);
        let mut x = random_data(200, &[3.0, 1.0, 0.5, 2.0, 0.1], &mut rng);
        for i in 0..200 {
            x[(i, 1)] += 0.7 * x[(i, 0)];
        }
        for standardize in [false, true] {
            let m = fit(&x, standardize).unwrap();
            let y = m.transform(&x, 5).unwrap();
            let (mean, cov) = covariance(&y);
            assert!(mean.iter().all(|v| v.abs() < 1e-10));
            let lmax = m.eigenvalues[0];
            for i in 0..5 {
                for j in 0..5 {
                    let want = if i == j { m.eigenvalues[i] } else { 0.0 };
                    assert!((cov[(i, j)] - want).abs() <= 1e-8 * lmax, "{i},{j}");
                }
            }
            let gtg = m.components.transpose().matmul(&m.components).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert!((gtg[(i, j)] - f64::from(u8::from(i == j))).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn full_rank_round_trip() {
        let mut rng = RngStream::new(3);
        let x = random_data(30, &[1.0, 2.0, 3.0, 4.0], &mut rng);
        let m = fit(&x, true).unwrap();
        let back = m.inverse_transform(&m.transform(&x, 4).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn mean_row_maps_to_zero() {
        let mut rng = RngStream::new(4);
        let x = random_data(20, &[1.0, 2.0], &mut rng);
        let m = fit(&x, true).unwrap();
        let means = Matrix::from_rows(&[m.mean.clone(), m.mean.clone()]).unwrap();
        assert!(m.transform(&means, 2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        let one = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(fit(&one, false).unwrap_err(), PcaError::TooFewRows(1));
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0], [0.0, 0.5]]).unwrap();
        let m = fit(&x, false).unwrap();
        assert!(matches!(m.transform(&x, 3), Err(PcaError::TooManyComponents { .. })));
        assert!(matches!(m.transform(&x, 0), Err(PcaError::TooManyComponents { .. })));
        let wrong = Matrix::zeros(2, 3);
        assert!(matches!(m.transform(&wrong, 1), Err(PcaError::DimensionMismatch { .. })));
    }
}
