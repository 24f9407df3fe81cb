//! Small dense linear algebra: just enough to solve the discounted
//! fixed-point systems exactly.

use crate::{DcrlError, Result};

/// Dense row-major square matrix.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }
}

/// Solve `A x = b` by LU with partial pivoting, then one step of iterative
/// refinement. The systems here are `I - gamma * P` shaped and well
/// conditioned, so this comfortably reaches residuals near machine epsilon.
pub fn solve_dense(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.n;
    if b.len() != n {
        return Err(DcrlError::invalid_argument(format!(
            "rhs length {} does not match matrix size {}",
            b.len(),
            n
        )));
    }
    let lu = LuFactors::factorize(a)?;
    let mut x = lu.solve(b);

    // One refinement pass tightens the residual when the factorization
    // has accumulated rounding.
    let ax = a.matvec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let dx = lu.solve(&r);
    for (xi, dxi) in x.iter_mut().zip(&dx) {
        *xi += dxi;
    }
    Ok(x)
}

struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    fn factorize(a: &DenseMatrix) -> Result<Self> {
        let n = a.n;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut max = lu[k * n + k].abs();
            for i in (k + 1)..n {
                let v = lu[i * n + k].abs();
                if v > max {
                    max = v;
                    p = i;
                }
            }
            if max < 1e-14 {
                return Err(DcrlError::Numerical(format!(
                    "singular system at pivot {k} (|pivot| = {max:.3e})"
                )));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                for j in (k + 1)..n {
                    lu[i * n + j] -= factor * lu[k * n + j];
                }
            }
        }
        Ok(LuFactors { n, lu, perm })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut v = b[self.perm[i]];
            for j in 0..i {
                v -= self.lu[i * n + j] * y[j];
            }
            y[i] = v;
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for j in (i + 1)..n {
                v -= self.lu[i * n + j] * y[j];
            }
            y[i] = v / self.lu[i * n + i];
        }
        y
    }
}

/// Infinity norm of a vector.
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Euclidean norm of a vector.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let mut a = DenseMatrix::zeros(2);
        a.set(0, 0, 2.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        a.set(1, 1, 3.0);
        let x = solve_dense(&a, &[5.0, 10.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        let mut a = DenseMatrix::zeros(2);
        a.set(0, 0, 1.0);
        a.set(0, 1, 2.0);
        a.set(1, 0, 2.0);
        a.set(1, 1, 4.0);
        assert!(solve_dense(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn refinement_reaches_tight_residual() {
        // A discounted-chain style system.
        let n = 20;
        let gamma = 0.97;
        let mut a = DenseMatrix::identity(n);
        for i in 0..n {
            a.add(i, (i + 7) % n, -gamma * 0.6);
            a.add(i, (i + 3) % n, -gamma * 0.4);
        }
        let b: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 0.1).collect();
        let x = solve_dense(&a, &b).unwrap();
        let ax = a.matvec(&x);
        let resid = b
            .iter()
            .zip(&ax)
            .fold(0.0f64, |m, (bi, axi)| m.max((bi - axi).abs()));
        assert!(resid < 1e-11, "residual {resid:.3e}");
    }
}
