use super::{Matrix, NumericsError, Result};

const MAX_SWEEPS: usize = 100;
const REL_TOL: f64 = 1e-12;
const SYM_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigensolver.
///
/// Each eigenvector is sign-normalised so that its largest-magnitude entry
/// (first one on ties) is positive.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    let n = m.rows();
    if n != m.cols() {
        return Err(NumericsError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let norm = m.frobenius();
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > SYM_TOL * norm.max(f64::MIN_POSITIVE) {
                return Err(NumericsError::NotSymmetric { i, j, diff });
            }
        }
    }

    // Symmetrise exactly so the rotations see a truly symmetric input.
    let mut a = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let tol = REL_TOL * norm;

    let mut converged = off_diagonal_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&a) <= tol;
    }
    if !converged {
        return Err(NumericsError::NoConvergence {
            sweeps,
            off: off_diagonal_norm(&a),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));

    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut best = 0;
        for k in 0..n {
            if v[(k, src)].abs() > v[(best, src)].abs() {
                best = k;
            }
        }
        let sign = if v[(best, src)] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, dst)] = sign * v[(k, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let n = a.rows();
    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;

    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let new_kp = c * akp - s * akq;
        let new_kq = s * akp + c * akq;
        a[(k, p)] = new_kp;
        a[(p, k)] = new_kp;
        a[(k, q)] = new_kq;
        a[(q, k)] = new_kq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_symmetric(n: usize, rng: &mut RngStream) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let x = rng.uniform(-1.0, 1.0).unwrap();
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let g = e.vectors.transpose().matmul(&e.vectors).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_input_gives_standard_basis() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 2.0]]).unwrap();
        let e = sym_eig(&m).unwrap();
        assert_eq!(e.values, vec![5.0, 2.0, 1.0]);
        assert_eq!(e.vectors.col(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(e.vectors.col(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.vectors.col(2), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        let m = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let e = sym_eig(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-12);
        assert!((e.values[1] - 1.0).abs() < 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = e.vectors.col(0);
        let v1 = e.vectors.col(1);
        assert!((v0[0] - r).abs() < 1e-12 && (v0[1] - r).abs() < 1e-12);
        // Both entries of v1 tie in magnitude; the first is made positive.
        assert!((v1[0] - r).abs() < 1e-12 && (v1[1] + r).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_and_trace() {
        let mut rng = RngStream::new(11);
        for n in [1, 2, 5, 12, 20] {
            let m = random_symmetric(n, &mut rng);
            let e = sym_eig(&m).unwrap();
            let mut l = Matrix::zeros(n, n);
            for i in 0..n {
                l[(i, i)] = e.values[i];
            }
            let rec = e.vectors.matmul(&l).unwrap().matmul(&e.vectors.transpose()).unwrap();
            let mut diff = 0.0;
            for i in 0..n {
                for j in 0..n {
                    diff += (rec[(i, j)] - m[(i, j)]).powi(2);
                }
            }
            assert!(diff.sqrt() <= 1e-8 * m.frobenius());
            let sum: f64 = e.values.iter().sum();
            assert!((sum - m.trace()).abs() <= 1e-8 * m.trace().abs().max(1.0));
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            // m v = lambda v
            for i in 0..n {
                let col = e.vectors.col(i);
                for r in 0..n {
                    let mv: f64 = (0..n).map(|k| m[(r, k)] * col[k]).sum();
                    assert!((mv - e.values[i] * col[r]).abs() <= 1e-8 * m.frobenius());
                }
            }
        }
    }

    #[test]
    fn errors() {
        let r = Matrix::zeros(2, 3);
        assert!(matches!(sym_eig(&r), Err(NumericsError::NotSquare { .. })));
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(NumericsError::NotSymmetric { .. })));
    }
}
