//! Independent oracles for unit tests.

use num_complex::Complex64;

use crate::herm::CMatrix;

/// General matrix exponential by scaling and squaring of a Taylor series.
pub fn expm_taylor(z: &CMatrix) -> CMatrix {
    let n = z.nrows();
    let norm = z.norm();
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.1 {
        scale *= 0.5;
        squarings += 1;
    }
    let a = z * Complex64::new(scale, 0.0);
    let mut term = CMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &a / Complex64::new(k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}
