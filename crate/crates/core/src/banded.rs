//! Hermitian positive-definite band matrices: Cholesky factorization,
//! triangular solves and selected inversion of the central band.
//!
//! All band matrices share one storage layout: diagonal `d` (0 = main)
//! of the lower triangle is stored contiguously, so entry `(i, i - d)`
//! lives at `d * n + i` for `i >= d`. Slots with `i < d` are unused.

use num_complex::Complex;

use crate::scalar::Real;

/// Lower band of a Hermitian matrix (upper band implied by conjugation).
#[derive(Debug, Clone, PartialEq)]
pub struct BandedHermitian<T> {
    data: Vec<Complex<T>>,
    n: usize,
    bandwidth: usize,
}

/// Row of the factorization where the pivot was not positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonPositivePivot {
    pub row: usize,
}

impl<T: Real> BandedHermitian<T> {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        let bandwidth = bandwidth.min(n.saturating_sub(1));
        Self {
            data: vec![Complex::new(T::zero(), T::zero()); (bandwidth + 1) * n],
            n,
            bandwidth,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Entry `(i, i - d)`.
    #[inline]
    pub fn lower(&self, i: usize, d: usize) -> Complex<T> {
        self.data[d * self.n + i]
    }

    #[inline]
    pub fn lower_mut(&mut self, i: usize, d: usize) -> &mut Complex<T> {
        &mut self.data[d * self.n + i]
    }

    /// Full-matrix accessor; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        if i >= j {
            let d = i - j;
            if d <= self.bandwidth {
                return self.lower(i, d);
            }
        } else {
            let d = j - i;
            if d <= self.bandwidth {
                return self.lower(j, d).conj();
            }
        }
        Complex::new(T::zero(), T::zero())
    }

    /// Diagonal `d` as a slice indexed by row; entries with row `< d` are padding.
    pub fn diagonal(&self, d: usize) -> &[Complex<T>] {
        &self.data[d * self.n..(d + 1) * self.n]
    }

    pub fn into_raw(self) -> Vec<Complex<T>> {
        self.data
    }

    /// Cholesky factorization `A = L L^H`, `L` lower banded with a positive real diagonal.
    pub fn cholesky(&self) -> Result<BandedCholesky<T>, NonPositivePivot> {
        let n = self.n;
        let bw = self.bandwidth;
        let mut l = Self::zeros(n, bw);
        for j in 0..n {
            let k0 = j.saturating_sub(bw);
            let mut diag = self.lower(j, 0).re;
            for k in k0..j {
                diag -= l.lower(j, j - k).norm_sqr();
            }
            if !(diag > T::zero()) || !diag.is_finite() {
                return Err(NonPositivePivot { row: j });
            }
            let ljj = diag.sqrt();
            *l.lower_mut(j, 0) = Complex::new(ljj, T::zero());
            let inv = T::one() / ljj;
            for i in j + 1..=(j + bw).min(n - 1) {
                let mut v = self.lower(i, i - j);
                for k in i.saturating_sub(bw)..j {
                    v -= l.lower(i, i - k) * l.lower(j, j - k).conj();
                }
                *l.lower_mut(i, i - j) = v * inv;
            }
        }
        Ok(BandedCholesky { l })
    }
}

/// Lower Cholesky factor of a [`BandedHermitian`] matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedCholesky<T> {
    l: BandedHermitian<T>,
}

impl<T: Real> BandedCholesky<T> {
    pub fn dim(&self) -> usize {
        self.l.n
    }

    pub fn bandwidth(&self) -> usize {
        self.l.bandwidth
    }

    /// `L[i][i - d]`.
    pub fn factor(&self, i: usize, d: usize) -> Complex<T> {
        self.l.lower(i, d)
    }

    /// `ln det A = 2 sum ln L_ii`.
    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        self.l.diagonal(0).iter().map(|z| two * z.re.ln()).sum()
    }

    /// Solves `L y = b` in place.
    pub fn forward(&self, b: &mut [Complex<T>]) {
        let bw = self.l.bandwidth;
        for i in 0..self.l.n {
            let mut v = b[i];
            for k in i.saturating_sub(bw)..i {
                v -= self.l.lower(i, i - k) * b[k];
            }
            b[i] = v / self.l.lower(i, 0).re;
        }
    }

    /// Solves `L^H x = y` in place.
    pub fn backward(&self, y: &mut [Complex<T>]) {
        let n = self.l.n;
        let bw = self.l.bandwidth;
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in i + 1..=(i + bw).min(n.saturating_sub(1)) {
                v -= self.l.lower(k, k - i).conj() * y[k];
            }
            y[i] = v / self.l.lower(i, 0).re;
        }
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [Complex<T>]) {
        self.forward(b);
        self.backward(b);
    }

    /// Entries of `A^{-1}` inside the band of `A`, without forming the inverse.
    ///
    /// Works from the last row upwards using
    /// `S_ij = (delta_ij / L_ii - sum_{k>i} conj(L_ki) S_kj) / L_ii` for `j >= i`,
    /// which only ever reads entries already inside the band.
    pub fn selected_inverse(&self) -> BandedHermitian<T> {
        let n = self.l.n;
        let bw = self.l.bandwidth;
        let mut s = BandedHermitian::zeros(n, bw);
        let zero = Complex::new(T::zero(), T::zero());

        for i in (0..n).rev() {
            let lii = self.l.lower(i, 0).re;
            let kmax = (i + bw).min(n - 1);
            // off-diagonal entries of row i, right to left
            for j in (i + 1..=kmax).rev() {
                let mut acc = zero;
                for k in i + 1..=kmax {
                    let skj = if k >= j {
                        s.lower(k, k - j)
                    } else {
                        s.lower(j, j - k).conj()
                    };
                    acc += self.l.lower(k, k - i).conj() * skj;
                }
                // stored as the conjugate: S(j, i)
                *s.lower_mut(j, j - i) = (-acc / lii).conj();
            }
            let mut acc = zero;
            for k in i + 1..=kmax {
                acc += self.l.lower(k, k - i).conj() * s.lower(k, k - i);
            }
            let sii = (T::one() / lii - acc.re) / lii;
            *s.lower_mut(i, 0) = Complex::new(sii, T::zero());
        }
        s
    }
}
