//! Symmetric banded matrices: Cholesky, solves and the banded part of the
//! inverse (Takahashi recursion).
//!
//! Only the lower band `0 ≤ i − j ≤ bw` is stored, row-major.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct SymBand {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
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
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Symmetric read; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds to the lower-triangle entry `(i, j)`, `i ≥ j`.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// Adds a block whose top-left corner sits at `(r0, c0)` with `r0 ≥ c0`.
    /// On diagonal blocks (`r0 == c0`) only the lower triangle is used.
    pub fn add_block(&mut self, r0: usize, c0: usize, block: &DMatrix<f64>) {
        for c in 0..block.ncols() {
            for r in 0..block.nrows() {
                let (i, j) = (r0 + r, c0 + c);
                if i >= j {
                    self.add_lower(i, j, block[(r, c)]);
                }
            }
        }
    }

    pub fn add_diagonal(&mut self, i: usize, v: f64) {
        self.add_lower(i, i, v);
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                if i != j {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// `L Lᵀ` factorization; `None` unless the matrix is numerically positive
    /// definite.
    pub fn cholesky(&self) -> Option<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let mut l = SymBand::zeros(n, bw);
        let mut max_diag: f64 = 0.0;
        for i in 0..n {
            max_diag = max_diag.max(self.get(i, i).abs());
        }
        let tiny = max_diag * 1e-14;
        for j in 0..n {
            let k0 = j.saturating_sub(bw);
            let mut d = self.get(j, j);
            for k in k0..j {
                let v = l.data[l.idx(j, k)];
                d -= v * v;
            }
            if !(d > tiny) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            let jj = l.idx(j, j);
            l.data[jj] = d;
            for i in (j + 1)..(j + bw + 1).min(n) {
                let k0 = i.saturating_sub(bw);
                let mut s = self.get(i, j);
                for k in k0..j {
                    s -= l.data[l.idx(i, k)] * l.data[l.idx(j, k)];
                }
                let ij = l.idx(i, j);
                l.data[ij] = s / d;
            }
        }
        Some(BandCholesky { l })
    }
}

#[derive(Clone, Debug)]
pub struct BandCholesky {
    l: SymBand,
}

impl BandCholesky {
    fn l(&self, i: usize, j: usize) -> f64 {
        self.l.data[self.l.idx(i, j)]
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, bw) = (self.l.n, self.l.bw);
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l(i, k) * y[k];
            }
            y[i] = s / self.l(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..(i + bw + 1).min(n) {
                s -= self.l(k, i) * y[k];
            }
            y[i] = s / self.l(i, i);
        }
        y
    }

    /// Entries of the inverse inside the band.
    pub fn band_inverse(&self) -> SymBand {
        let (n, bw) = (self.l.n, self.l.bw);
        let mut sigma = SymBand::zeros(n, bw);
        for i in (0..n).rev() {
            let lii = self.l(i, i);
            let kmax = (i + bw + 1).min(n);
            // off-diagonal entries of row i, far to near
            for j in ((i + 1)..kmax).rev() {
                let mut s = 0.0;
                for k in (i + 1)..kmax {
                    s += self.l(k, i) * sigma.get(k, j);
                }
                let idx = sigma.idx(j, i);
                sigma.data[idx] = -s / lii;
            }
            let mut s = 0.0;
            for k in (i + 1)..kmax {
                s += self.l(k, i) * sigma.get(k, i);
            }
            let idx = sigma.idx(i, i);
            sigma.data[idx] = (1.0 / lii - s) / lii;
        }
        sigma
    }
}
