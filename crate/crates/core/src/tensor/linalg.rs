//! Dense LU factorization with partial pivoting.

use crate::error::{Error, Result};

/// `P A = L U` for a square row-major matrix. `L` has a unit diagonal and is
/// stored below the diagonal of `lu`; `U` is stored on and above it.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    /// Row `i` of `P A` is row `perm[i]` of `A`.
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n, "LU input is not {n}x{n}");
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|r| (r, lu[r * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 || !pmax.is_finite() {
                return Err(Error::SingularMatrix);
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[r * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut s = x[r];
            for c in 0..r {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = x[r];
            for c in r + 1..n {
                s -= self.lu[r * n + c] * x[c];
            }
            x[r] = s / self.lu[r * n + r];
        }
        x
    }

    /// Solves `A^T x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // U^T z = b
        let mut z = b.to_vec();
        for r in 0..n {
            let mut s = z[r];
            for c in 0..r {
                s -= self.lu[c * n + r] * z[c];
            }
            z[r] = s / self.lu[r * n + r];
        }
        // L^T w = z
        for r in (0..n).rev() {
            let mut s = z[r];
            for c in r + 1..n {
                s -= self.lu[c * n + r] * z[c];
            }
            z[r] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matvec(a: &[f64], x: &[f64], n: usize, transpose: bool) -> Vec<f64> {
        (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| if transpose { a[c * n + r] } else { a[r * n + c] } * x[c])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn solves_with_pivoting() {
        let a = [0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0];
        let lu = Lu::factor(&a, 3).unwrap();
        let x = lu.solve(&b);
        for (got, want) in matvec(&a, &x, 3, false).iter().zip(b) {
            assert!((got - want).abs() < 1e-12);
        }
        let y = lu.solve_transpose(&b);
        for (got, want) in matvec(&a, &y, 3, true).iter().zip(b) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_system() {
        let lu = Lu::factor(&[2.0, 0.0, 0.0, 2.0], 2).unwrap();
        assert_eq!(lu.solve(&[2.0, 4.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn singular_is_reported() {
        assert!(matches!(
            Lu::factor(&[1.0, 2.0, 2.0, 4.0], 2),
            Err(Error::SingularMatrix)
        ));
        assert!(matches!(Lu::factor(&[0.0], 1), Err(Error::SingularMatrix)));
    }
}
