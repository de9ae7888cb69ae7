//! Matrix exponential of scaled Hermitian matrices and its Fréchet
//! derivative.
//!
//! For `Z = c H` with `H = V diag(h) V†` the exponential is
//! `V diag(exp(c h)) V†` and the derivative in direction `E` is
//! `V (G ∘ (V† E V)) V†`, where `G` holds the divided differences of `exp`
//! over the spectrum `mu = c h`. The divided differences are evaluated as
//! `exp((mu_p + mu_q) / 2) * sinh(x) / x` with `x = (mu_p - mu_q) / 2`,
//! which has no cancellation for close or repeated eigenvalues.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::herm::{CMatrix, HermMatrix, Tensor4};

/// Eigendecomposition of a Hermitian matrix with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

pub fn eigh(h: &CMatrix) -> Result<Eigh> {
    if !h.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::Eigen("non-finite input".into()));
    }
    let n = h.nrows();
    let SymmetricEigen {
        eigenvalues,
        eigenvectors,
    } = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigenvalues[a].total_cmp(&eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Eigen("non-finite eigenvalues".into()));
    }
    let vectors = CMatrix::from_fn(n, n, |r, c| eigenvectors[(r, order[c])]);
    Ok(Eigh { values, vectors })
}

/// Real symmetric variant, used for overlap matrices.
pub fn eigh_real(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::Eigen("non-finite input".into()));
    }
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

#[inline]
fn sinhc(x: Complex64) -> Complex64 {
    if x.norm() < 1e-3 {
        let x2 = x * x;
        Complex64::new(1.0, 0.0) + x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sinh() / x
    }
}

/// Spectral data for `exp(c H)`: enough to evaluate the exponential, its
/// Fréchet derivative and the adjoint of the derivative without forming
/// the full 4-index Jacobian.
#[derive(Debug, Clone)]
pub struct ExpKernel {
    c: Complex64,
    vectors: CMatrix,
    exp_mu: Vec<Complex64>,
    divdiff: CMatrix,
}

impl ExpKernel {
    pub fn new(h: &HermMatrix, c: Complex64) -> Result<Self> {
        Ok(Self::from_eigh(&eigh(h)?, c))
    }

    /// Reuses an eigendecomposition of `H`.
    pub fn from_eigh(e: &Eigh, c: Complex64) -> Self {
        let n = e.values.len();
        let mu: Vec<Complex64> = e.values.iter().map(|&h| c * h).collect();
        let exp_mu: Vec<Complex64> = mu.iter().map(|m| m.exp()).collect();
        let divdiff = CMatrix::from_fn(n, n, |p, q| {
            if p == q {
                exp_mu[p]
            } else {
                ((mu[p] + mu[q]) * 0.5).exp() * sinhc((mu[p] - mu[q]) * 0.5)
            }
        });
        ExpKernel {
            c,
            vectors: e.vectors.clone(),
            exp_mu,
            divdiff,
        }
    }

    pub fn scale(&self) -> Complex64 {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.exp_mu.len()
    }

    /// `exp(c H)`.
    pub fn value(&self) -> CMatrix {
        let v = &self.vectors;
        let n = self.dim();
        let scaled = CMatrix::from_fn(n, n, |i, j| v[(i, j)] * self.exp_mu[j]);
        scaled * v.adjoint()
    }

    /// Kernel for `exp(conj(c) H) = exp(c H)†`.
    pub fn conjugate(&self) -> ExpKernel {
        ExpKernel {
            c: self.c.conj(),
            vectors: self.vectors.clone(),
            exp_mu: self.exp_mu.iter().map(|z| z.conj()).collect(),
            divdiff: self.divdiff.map(|z| z.conj()),
        }
    }

    /// Fréchet derivative of `Z -> exp(Z)` at `Z = c H` in direction `E`.
    pub fn frechet(&self, e: &CMatrix) -> CMatrix {
        let v = &self.vectors;
        let inner = v.adjoint() * e * v;
        let weighted = inner.component_mul(&self.divdiff);
        v * weighted * v.adjoint()
    }

    /// Adjoint of [`Self::frechet`] under the Frobenius inner product:
    /// `<W, frechet(E)> = <frechet_adjoint(W), E>`. Equals `W : conj(jac)`.
    pub fn frechet_adjoint(&self, w: &CMatrix) -> CMatrix {
        let v = &self.vectors;
        let inner = v.adjoint() * w * v;
        let weighted = inner.zip_map(&self.divdiff, |x, g| x * g.conj());
        v * weighted * v.adjoint()
    }

    /// Full Jacobian `jac[a][b][j][l] = d exp(Z)[a][b] / d Z[j][l]`.
    pub fn jacobian(&self) -> Tensor4 {
        Tensor4::from_linear_map(self.dim(), |e| self.frechet(e))
    }
}

/// `exp(Z)` together with its full Jacobian tensor.
#[derive(Debug, Clone)]
pub struct ExpJacobian {
    pub value: CMatrix,
    pub jac: Tensor4,
}

/// `exp(c H)` for Hermitian `H` and purely imaginary `c`; the result is
/// unitary.
pub fn expm_antihermitian(h: &HermMatrix, c: Complex64) -> Result<CMatrix> {
    Ok(ExpKernel::new(h, c)?.value())
}

pub fn expm_with_jacobian(h: &HermMatrix, c: Complex64) -> Result<ExpJacobian> {
    let k = ExpKernel::new(h, c)?;
    Ok(ExpJacobian {
        value: k.value(),
        jac: k.jacobian(),
    })
}

/// Jacobian data for the conjugated generator: `exp(Z)† = exp(Z†)`, so
/// `value' = value†` and `jac'[a][b][j][l] = conj(jac[b][a][l][j])`.
pub fn conjugate_jacobian(j: &ExpJacobian) -> ExpJacobian {
    let n = j.jac.dim();
    ExpJacobian {
        value: j.value.adjoint(),
        jac: Tensor4::from_fn(n, |a, b, r, s| j.jac.get(b, a, s, r).conj()),
    }
}
