//! Random instances for tests, sampling-based checks and benches.

use num_complex::Complex64;
use rand::Rng;

use crate::herm::{CMatrix, HermMatrix, Tensor4};

fn rc<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

/// Entries with real and imaginary parts uniform on [-1, 1).
pub fn random_cmatrix<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMatrix {
    CMatrix::from_fn(n, n, |_, _| rc(rng))
}

pub fn random_hermitian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> HermMatrix {
    HermMatrix::new(random_cmatrix(rng, n))
}

pub fn random_tensor4<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor4 {
    Tensor4::from_fn(n, |_, _, _, _| rc(rng))
}

/// Unitary factor of the QR decomposition of a random complex matrix.
pub fn random_unitary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMatrix {
    random_cmatrix(rng, n).qr().q()
}

/// Random orthogonal projector of the given rank: Hermitian, idempotent,
/// trace equal to `rank`.
pub fn random_projector<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize) -> HermMatrix {
    assert!(rank <= n);
    let u = random_unitary(rng, n);
    let occ = u.columns(0, rank);
    HermMatrix::new(occ * occ.adjoint())
}
