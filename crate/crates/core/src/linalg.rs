//! Sparse symmetric systems and a Jacobi-preconditioned conjugate gradient.

use crate::scalar::Scalar;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix<T> {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Assembles from triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut trip: Vec<(usize, usize, T)>) -> Self {
        trip.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(trip.len());
        let mut vals: Vec<T> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            assert!(r < n && c < n, "triplet index out of range");
            if last == Some((r, c)) {
                *vals.last_mut().expect("previous entry") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        for (r, yr) in y.iter_mut().enumerate().take(self.n) {
            let mut s = T::zero();
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yr = s;
        }
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .find(|&k| self.cols[k] == r)
                    .map_or(T::zero(), |k| self.vals[k])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgReport<T> {
    pub iterations: usize,
    pub relative_residual: T,
    pub converged: bool,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive-definite `A`, starting from `x`.
pub fn conjugate_gradient<T: Scalar>(a: &CsrMatrix<T>, b: &[T], x: &mut [T], tol: T, max_iter: usize) -> CgReport<T> {
    let n = a.n();
    let inv_diag: Vec<T> = a
        .diagonal()
        .into_iter()
        .map(|d| if d > T::zero() { T::one() / d } else { T::one() })
        .collect();
    let bnorm = dot(b, b).sqrt();
    if bnorm == T::zero() {
        x.iter_mut().for_each(|v| *v = T::zero());
        return CgReport {
            iterations: 0,
            relative_residual: T::zero(),
            converged: true,
        };
    }
    let mut r = vec![T::zero(); n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<T> = r.iter().zip(&inv_diag).map(|(&ri, &d)| ri * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![T::zero(); n];
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    let mut it = 0;
    while rel >= tol && it < max_iter {
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
        rel = dot(&r, &r).sqrt() / bnorm;
    }
    CgReport {
        iterations: it,
        relative_residual: rel,
        converged: rel < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal() {
        let n = 50;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, t);
        let truth: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&truth, &mut b);
        let mut x = vec![0.0; n];
        let rep = conjugate_gradient(&a, &b, &mut x, 1e-12, 1000);
        assert!(rep.converged);
        for (u, v) in x.iter().zip(&truth) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(2, vec![(0, 0, 1.0f32), (0, 0, 2.0), (1, 1, 4.0)]);
        assert_eq!(a.diagonal(), vec![3.0, 4.0]);
    }
}
