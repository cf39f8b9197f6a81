//! Symmetric banded LDL' factorization without pivoting, used for the
//! quasi-definite Newton systems of the QP solver.

/// Lower band of a symmetric `n x n` matrix with half-bandwidth `bw`.
#[derive(Debug, Clone)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    data: Vec<f64>,
    factored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorError {
    pub pivot: usize,
    pub value: f64,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
            factored: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(
            j <= i && i - j <= self.bw,
            "({i}, {j}) outside band {}",
            self.bw
        );
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Entry `(i, j)` of the symmetric matrix; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` at `(i, j)` and, implicitly, `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(
            i - j <= self.bw,
            "entry ({i}, {j}) outside bandwidth {}",
            self.bw
        );
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// In-place `L D L'` with unit lower `L`; `D` overwrites the diagonal.
    pub fn factor(&mut self) -> Result<(), FactorError> {
        let bw = self.bw;
        let mut work = vec![0.0; bw];
        for j in 0..self.n {
            let lo = j.saturating_sub(bw);
            // work[k - lo] = L[j][k] * d_k
            let mut d = self.data[self.idx(j, j)];
            for k in lo..j {
                let ljk = self.data[self.idx(j, k)];
                let dk = self.data[self.idx(k, k)];
                work[k - lo] = ljk * dk;
                d -= ljk * ljk * dk;
            }
            if !d.is_finite() || d.abs() < 1e-300 {
                return Err(FactorError { pivot: j, value: d });
            }
            let jj = self.idx(j, j);
            self.data[jj] = d;
            let hi = (j + bw).min(self.n - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = self.data[self.idx(i, j)];
                for k in lo_i..j {
                    s -= self.data[self.idx(i, k)] * work[k - lo];
                }
                let ij = self.idx(i, j);
                self.data[ij] = s / d;
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solves in place after [`factor`](Self::factor).
    #[allow(clippy::needless_range_loop)]
    pub fn solve(&self, b: &mut [f64]) {
        assert!(self.factored, "solve called before factor");
        assert_eq!(b.len(), self.n);
        let bw = self.bw;
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for k in lo..i {
                s -= self.data[self.idx(i, k)] * b[k];
            }
            b[i] = s;
        }
        for i in 0..self.n {
            b[i] /= self.data[self.idx(i, i)];
        }
        for i in (0..self.n).rev() {
            let hi = (i + bw).min(self.n - 1);
            let mut s = b[i];
            for k in i + 1..=hi {
                s -= self.data[self.idx(k, i)] * b[k];
            }
            b[i] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn identity_returns_rhs() {
        let mut m = BandedSym::zeros(7, 2);
        for i in 0..7 {
            m.add(i, i, 1.0);
        }
        m.factor().unwrap();
        let mut b = vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0, -1.0];
        let expect = b.clone();
        m.solve(&mut b);
        assert_eq!(b, expect);
    }

    #[test]
    fn quasi_definite_matches_dense() {
        // alternating positive / negative diagonal blocks with band coupling
        let n = 40;
        let bw = 5;
        let mut m = BandedSym::zeros(n, bw);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            let sign = if (i / 4) % 2 == 0 { 1.0 } else { -1.0 };
            let diag = sign * (3.0 + (i % 3) as f64);
            m.add(i, i, diag);
            dense[(i, i)] += diag;
            for j in i.saturating_sub(bw)..i {
                let v = (((i * 17 + j * 5) % 11) as f64 - 5.0) * 0.1;
                m.add(i, j, v);
                dense[(i, j)] += v;
                dense[(j, i)] += v;
            }
        }
        let rhs = DVector::from_fn(n, |i, _| (i as f64 * 0.37).sin());
        let expect = dense.lu().solve(&rhs).unwrap();
        m.factor().unwrap();
        let mut x: Vec<f64> = rhs.iter().copied().collect();
        m.solve(&mut x);
        let x = DVector::from_vec(x);
        assert!((x - &expect).norm() <= 1e-10 * expect.norm());
    }

    #[test]
    fn zero_pivot_reported() {
        let mut m = BandedSym::zeros(3, 1);
        m.add(0, 0, 1.0);
        m.add(1, 0, 1.0);
        m.add(1, 1, 1.0);
        m.add(2, 2, 1.0);
        let err = m.factor().unwrap_err();
        assert_eq!(err.pivot, 1);
    }
}
