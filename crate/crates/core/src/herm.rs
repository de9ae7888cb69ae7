//! Complex matrix primitives: Hermitian matrices, the real representation
//! of Hermitian matrices, the Frobenius inner product and 4-index tensor
//! contractions.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

pub(crate) const I: Complex64 = Complex64::new(0.0, 1.0);

/// Tolerance for the imaginary residue left by `unvec`.
const IMAG_RESIDUE_TOL: f64 = 1e-10;

/// A complex Hermitian matrix. Construction symmetrizes, so the stored
/// entries satisfy `m[(q, r)] == conj(m[(r, q)])` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct HermMatrix(CMatrix);

impl HermMatrix {
    /// Symmetrizes `m` into `(m + m†) / 2`.
    pub fn new(m: CMatrix) -> Self {
        assert!(m.is_square(), "Hermitian matrix must be square");
        let n = m.nrows();
        let mut out = m;
        for q in 0..n {
            let d = out[(q, q)].re;
            out[(q, q)] = Complex64::new(d, 0.0);
            for r in (q + 1)..n {
                let avg = (out[(q, r)] + out[(r, q)].conj()) * 0.5;
                out[(q, r)] = avg;
                out[(r, q)] = avg.conj();
            }
        }
        HermMatrix(out)
    }

    pub fn zeros(n: usize) -> Self {
        HermMatrix(CMatrix::zeros(n, n))
    }

    pub fn from_real(m: &DMatrix<f64>) -> Self {
        HermMatrix::new(m.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = CMatrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = Complex64::new(d, 0.0);
        }
        HermMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_inner(self) -> CMatrix {
        self.0
    }

    pub fn trace_re(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }
}

impl Deref for HermMatrix {
    type Target = CMatrix;

    fn deref(&self) -> &CMatrix {
        &self.0
    }
}

/// Row-concatenation vectorization: `vec(P)[i*n + j] = P[i][j]`.
pub fn vec(p: &CMatrix) -> DVector<Complex64> {
    let n = p.nrows();
    let m = p.ncols();
    DVector::from_fn(n * m, |k, _| p[(k / m, k % m)])
}

/// Inverse of [`vec`] for square matrices.
pub fn unvec_rows(v: &DVector<Complex64>, n: usize) -> CMatrix {
    CMatrix::from_fn(n, n, |i, j| v[i * n + j])
}

/// Basis of the real vector space of `n x n` Hermitian matrices together
/// with the matrix `R` mapping real coordinates to `vec(P)`.
///
/// Ordering: real-part generators over the upper triangle (diagonal
/// included) in row-major order, then imaginary-part generators over the
/// strict upper triangle in the same order. The imaginary generator for
/// `(q, r)` carries `+i` at `(q, r)` and `-i` at `(r, q)`.
#[derive(Debug, Clone)]
pub struct HermBasis {
    n: usize,
    elements: Vec<CMatrix>,
    r: CMatrix,
    r_inv: CMatrix,
}

impl HermBasis {
    pub fn build(n: usize) -> Self {
        assert!(n >= 1, "basis dimension must be at least 1");
        let mut elements = Vec::with_capacity(n * n);
        let one = Complex64::new(1.0, 0.0);
        for q in 0..n {
            for r in q..n {
                let mut b = CMatrix::zeros(n, n);
                b[(q, r)] = one;
                b[(r, q)] = one;
                elements.push(b);
            }
        }
        for q in 0..n {
            for r in (q + 1)..n {
                let mut b = CMatrix::zeros(n, n);
                b[(q, r)] = I;
                b[(r, q)] = -I;
                elements.push(b);
            }
        }
        let n2 = n * n;
        let mut r = CMatrix::zeros(n2, n2);
        for (m, b) in elements.iter().enumerate() {
            r.set_column(m, &vec(b));
        }
        let r_inv = r
            .clone()
            .try_inverse()
            .expect("Hermitian basis matrix R is invertible by construction");
        HermBasis {
            n,
            elements,
            r,
            r_inv,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// The `m`-th basis matrix `B[:, :, m]`.
    pub fn element(&self, m: usize) -> &CMatrix {
        &self.elements[m]
    }

    pub fn elements(&self) -> &[CMatrix] {
        &self.elements
    }

    pub fn r(&self) -> &CMatrix {
        &self.r
    }

    pub fn r_inv(&self) -> &CMatrix {
        &self.r_inv
    }

    /// Real coordinates `p = R^{-1} vec(P)`.
    pub fn unvec(&self, p: &HermMatrix) -> Result<Vec<f64>> {
        if p.dim() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: p.dim(),
            });
        }
        let coords = &self.r_inv * vec(p);
        let residue = coords.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        if residue > IMAG_RESIDUE_TOL {
            return Err(Error::ImagResidue(residue));
        }
        Ok(coords.iter().map(|c| c.re).collect())
    }

    /// `P[q][r] = sum_m B[q][r][m] p[m]`.
    pub fn reconstruct(&self, p: &[f64]) -> Result<HermMatrix> {
        let n2 = self.n * self.n;
        if p.len() != n2 {
            return Err(Error::DimensionMismatch {
                expected: n2,
                got: p.len(),
            });
        }
        let mut out = CMatrix::zeros(self.n, self.n);
        for (b, &pm) in self.elements.iter().zip(p) {
            if pm != 0.0 {
                out += b * Complex64::new(pm, 0.0);
            }
        }
        Ok(HermMatrix::new(out))
    }
}

/// Frobenius inner product `<A, B> = tr(A† B)`.
pub fn frobenius_ip(a: &CMatrix, b: &CMatrix) -> Result<Complex64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows() * a.ncols(),
            got: b.nrows() * b.ncols(),
        });
    }
    Ok(ip(a, b))
}

/// Unchecked Frobenius inner product for internal hot paths.
#[inline]
pub(crate) fn ip(a: &CMatrix, b: &CMatrix) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Dense 4-index complex tensor `xi[a][b][r][s]`, every index of size `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    data: Vec<Complex64>,
}

impl Tensor4 {
    pub fn zeros(n: usize) -> Self {
        Tensor4 {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n * n * n],
        }
    }

    /// `xi[i][j][k][l] = delta(i, k) delta(j, l)`, so that `xi : A = A`.
    pub fn identity(n: usize) -> Self {
        let mut t = Tensor4::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t.set(i, j, i, j, Complex64::new(1.0, 0.0));
            }
        }
        t
    }

    /// Tensor of a linear map `f` on `n x n` matrices, laid out so that
    /// `xi : E == f(E)`.
    pub fn from_linear_map(n: usize, f: impl Fn(&CMatrix) -> CMatrix) -> Self {
        let mut t = Tensor4::zeros(n);
        let mut e = CMatrix::zeros(n, n);
        for r in 0..n {
            for s in 0..n {
                e[(r, s)] = Complex64::new(1.0, 0.0);
                let img = f(&e);
                e[(r, s)] = Complex64::new(0.0, 0.0);
                for a in 0..n {
                    for b in 0..n {
                        t.set(a, b, r, s, img[(a, b)]);
                    }
                }
            }
        }
        t
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(n * n * n * n);
        for a in 0..n {
            for b in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        data.push(f(a, b, r, s));
                    }
                }
            }
        }
        Tensor4 { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn offset(&self, a: usize, b: usize, r: usize, s: usize) -> usize {
        ((a * self.n + b) * self.n + r) * self.n + s
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, r: usize, s: usize) -> Complex64 {
        self.data[self.offset(a, b, r, s)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, r: usize, s: usize, v: Complex64) {
        let o = self.offset(a, b, r, s);
        self.data[o] = v;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn conj(&self) -> Tensor4 {
        Tensor4 {
            n: self.n,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, c: Complex64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            data: self.data.iter().map(|z| z * c).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Composition `(self o other)[a][b][r][s] = sum_{jl} self[a][b][j][l] other[j][l][r][s]`.
    pub fn compose(&self, other: &Tensor4) -> Tensor4 {
        assert_eq!(self.n, other.n);
        let n2 = self.n * self.n;
        let mut data = vec![Complex64::new(0.0, 0.0); n2 * n2];
        for ab in 0..n2 {
            for jl in 0..n2 {
                let x = self.data[ab * n2 + jl];
                if x == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let row = &other.data[jl * n2..(jl + 1) * n2];
                for (out, y) in data[ab * n2..(ab + 1) * n2].iter_mut().zip(row) {
                    *out += x * y;
                }
            }
        }
        Tensor4 { n: self.n, data }
    }

    fn check_dim(&self, a: &CMatrix) -> Result<()> {
        if a.nrows() != self.n || a.ncols() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: a.nrows().max(a.ncols()),
            });
        }
        Ok(())
    }

    /// `(xi : A)[i][j] = sum_{kl} xi[i][j][k][l] A[k][l]`.
    pub fn contract_left(&self, a: &CMatrix) -> Result<CMatrix> {
        self.check_dim(a)?;
        let n = self.n;
        let n2 = n * n;
        let av = vec(a);
        Ok(CMatrix::from_fn(n, n, |i, j| {
            let row = &self.data[(i * n + j) * n2..(i * n + j + 1) * n2];
            row.iter().zip(av.iter()).map(|(x, y)| x * y).sum()
        }))
    }

    /// `(A : xi)[i][j] = sum_{kl} A[k][l] xi[k][l][i][j]`.
    pub fn contract_right(&self, a: &CMatrix) -> Result<CMatrix> {
        self.check_dim(a)?;
        let n = self.n;
        let n2 = n * n;
        let mut out = vec![Complex64::new(0.0, 0.0); n2];
        for k in 0..n {
            for l in 0..n {
                let akl = a[(k, l)];
                if akl == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let row = &self.data[(k * n + l) * n2..(k * n + l + 1) * n2];
                for (o, x) in out.iter_mut().zip(row) {
                    *o += akl * x;
                }
            }
        }
        Ok(CMatrix::from_fn(n, n, |i, j| out[i * n + j]))
    }

    /// `A : conj(xi)` without materializing the conjugate.
    pub fn contract_right_conj(&self, a: &CMatrix) -> Result<CMatrix> {
        self.check_dim(a)?;
        let n = self.n;
        let n2 = n * n;
        let mut out = vec![Complex64::new(0.0, 0.0); n2];
        for k in 0..n {
            for l in 0..n {
                let akl = a[(k, l)];
                if akl == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let row = &self.data[(k * n + l) * n2..(k * n + l + 1) * n2];
                for (o, x) in out.iter_mut().zip(row) {
                    *o += akl * x.conj();
                }
            }
        }
        Ok(CMatrix::from_fn(n, n, |i, j| out[i * n + j]))
    }
}

/// `||A B - B A||_F`.
pub fn commutator_norm(a: &CMatrix, b: &CMatrix) -> f64 {
    (a * b - b * a).norm()
}

/// Largest entry-wise modulus of `A - B`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}
