//! Molecular data ingestion, canonical orthogonalization and the
//! density-dependent Hamiltonian `H(P, a) = H0(P) + sum_j a_j M_j`.
//!
//! All density matrices handled here live in the canonically orthogonalized
//! (CO) basis and follow the closed-shell convention `tr P = N_e / 2`.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::herm::{commutator_norm, CMatrix, HermMatrix, Tensor4};
use crate::matexp::{eigh, eigh_real};

const SYMMETRY_TOL: f64 = 1e-10;
const ACTIVE_DIPOLE_TOL: f64 = 1e-10;
const MIN_OVERLAP_EIGENVALUE: f64 = 1e-8;
const SCF_MAX_ITERS: usize = 500;
const SCF_TOL: f64 = 1e-8;

pub const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

/// Molecular integrals as read from an interchange file, in the AO basis.
#[derive(Debug, Clone)]
pub struct MolSystemRaw {
    pub name: String,
    pub n_basis: usize,
    pub n_electrons: usize,
    pub overlap: DMatrix<f64>,
    pub hcore: DMatrix<f64>,
    /// Chemist-notation `(pq|rs)` at `((p*N + q)*N + r)*N + s`.
    pub eri: Vec<f64>,
    pub dipoles: [DMatrix<f64>; 3],
}

#[derive(Deserialize)]
struct InterchangeFile {
    name: String,
    n_basis: usize,
    n_electrons: usize,
    units: String,
    overlap: Vec<f64>,
    hcore: Vec<f64>,
    dipole_x: Vec<f64>,
    dipole_y: Vec<f64>,
    dipole_z: Vec<f64>,
    eri: Vec<f64>,
}

fn square(name: &str, data: Vec<f64>, n: usize) -> Result<DMatrix<f64>> {
    if data.len() != n * n {
        return Err(Error::Parse(format!(
            "{name}: expected {} entries, found {}",
            n * n,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(n, n, &data))
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::InvariantViolation(format!(
            "{name} is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

impl MolSystemRaw {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: InterchangeFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if f.units != "hartree_bohr" {
            return Err(Error::Parse(format!(
                "units must be \"hartree_bohr\", found {:?}",
                f.units
            )));
        }
        let n = f.n_basis;
        if n == 0 {
            return Err(Error::Parse("n_basis must be positive".into()));
        }
        if f.eri.len() != n * n * n * n {
            return Err(Error::Parse(format!(
                "eri: expected {} entries, found {}",
                n * n * n * n,
                f.eri.len()
            )));
        }
        let raw = MolSystemRaw {
            name: f.name,
            n_basis: n,
            n_electrons: f.n_electrons,
            overlap: square("overlap", f.overlap, n)?,
            hcore: square("hcore", f.hcore, n)?,
            eri: f.eri,
            dipoles: [
                square("dipole_x", f.dipole_x, n)?,
                square("dipole_y", f.dipole_y, n)?,
                square("dipole_z", f.dipole_z, n)?,
            ],
        };
        raw.validate()?;
        Ok(raw)
    }

    #[inline]
    pub fn eri(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        let n = self.n_basis;
        self.eri[((p * n + q) * n + r) * n + s]
    }

    /// Checks every structural invariant of the integrals.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_basis;
        if self.n_electrons == 0 || !self.n_electrons.is_multiple_of(2) {
            return Err(Error::InvariantViolation(format!(
                "closed shell requires a positive even electron count, found {}",
                self.n_electrons
            )));
        }
        if self.n_electrons / 2 > n {
            return Err(Error::InvariantViolation(format!(
                "{} electrons do not fit in {n} spatial orbitals",
                self.n_electrons
            )));
        }
        let all_finite = self.overlap.iter().all(|x| x.is_finite())
            && self.hcore.iter().all(|x| x.is_finite())
            && self.eri.iter().all(|x| x.is_finite())
            && self.dipoles.iter().all(|d| d.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::InvariantViolation("non-finite integral".into()));
        }
        check_symmetric("overlap", &self.overlap)?;
        check_symmetric("hcore", &self.hcore)?;
        for (d, axis) in self.dipoles.iter().zip(AXIS_NAMES) {
            check_symmetric(&format!("dipole_{axis}"), d)?;
        }
        let (evals, _) = eigh_real(&self.overlap)?;
        if evals[0] <= 0.0 {
            return Err(Error::InvariantViolation(format!(
                "overlap is not positive definite (min eigenvalue {:.3e})",
                evals[0]
            )));
        }
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        let v = self.eri(p, q, r, s);
                        for (w, label) in [
                            (self.eri(q, p, r, s), "(qp|rs)"),
                            (self.eri(p, q, s, r), "(pq|sr)"),
                            (self.eri(r, s, p, q), "(rs|pq)"),
                        ] {
                            if (v - w).abs() > SYMMETRY_TOL {
                                return Err(Error::InvariantViolation(format!(
                                    "eri symmetry (pq|rs) = {label} broken at ({p}{q}|{r}{s})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates an interchange JSON file.
pub fn load_system(path: impl AsRef<Path>) -> Result<MolSystemRaw> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MolSystemRaw::from_json_str(&text)
}

/// Two-electron part in the AO basis for a (possibly complex) density:
/// `G[p][q] = sum_rs P[r][s] (2 (pq|sr) - (pr|sq))`.
fn two_electron_ao(raw: &MolSystemRaw, p_ao: &CMatrix) -> CMatrix {
    let n = raw.n_basis;
    CMatrix::from_fn(n, n, |p, q| {
        let mut acc = Complex64::new(0.0, 0.0);
        for r in 0..n {
            for s in 0..n {
                let d = p_ao[(r, s)];
                if d == Complex64::new(0.0, 0.0) {
                    continue;
                }
                acc += d * (2.0 * raw.eri(p, q, s, r) - raw.eri(p, r, s, q));
            }
        }
        acc
    })
}

/// Orthogonalized molecular system ready for dynamics.
#[derive(Debug, Clone)]
pub struct MolSystem {
    raw: MolSystemRaw,
    x: DMatrix<f64>,
    hcore_co: HermMatrix,
    dipoles_co: [HermMatrix; 3],
    active: Vec<usize>,
    /// `d H0[j][l] / d P[r][s]` in the CO basis; `H0(P) = hcore_co + g : P`.
    g_co: Tensor4,
}

impl MolSystem {
    pub fn raw(&self) -> &MolSystemRaw {
        &self.raw
    }

    pub fn name(&self) -> &str {
        &self.raw.name
    }

    pub fn n_basis(&self) -> usize {
        self.raw.n_basis
    }

    pub fn n_electrons(&self) -> usize {
        self.raw.n_electrons
    }

    /// `N_e / 2`, the trace of every admissible density matrix.
    pub fn n_occupied(&self) -> usize {
        self.raw.n_electrons / 2
    }

    /// Canonical orthogonalization transform `X`, with `X^T S X = I`.
    pub fn transform(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn hcore_co(&self) -> &HermMatrix {
        &self.hcore_co
    }

    /// CO-basis dipole matrix for axis 0 (x), 1 (y) or 2 (z).
    pub fn dipole_co(&self, axis: usize) -> &HermMatrix {
        &self.dipoles_co[axis]
    }

    /// Indices (0 = x, 1 = y, 2 = z) of the nonzero dipole matrices.
    pub fn active_axes(&self) -> &[usize] {
        &self.active
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// The active dipole matrices in the order of [`Self::active_axes`].
    pub fn active_dipoles(&self) -> impl Iterator<Item = &HermMatrix> + '_ {
        self.active.iter().map(|&j| &self.dipoles_co[j])
    }

    /// Jacobian of the field-free Hamiltonian with respect to the density.
    /// The map is linear, so this tensor does not depend on `P`.
    pub fn fock_jacobian(&self) -> &Tensor4 {
        &self.g_co
    }

    fn check_dim(&self, p: &HermMatrix) -> Result<()> {
        if p.dim() != self.n_basis() {
            return Err(Error::DimensionMismatch {
                expected: self.n_basis(),
                got: p.dim(),
            });
        }
        Ok(())
    }

    /// Field-free Hamiltonian `H0(P)` in the CO basis.
    pub fn fock(&self, p: &HermMatrix) -> Result<HermMatrix> {
        self.check_dim(p)?;
        let g = self.g_co.contract_left(p)?;
        Ok(HermMatrix::new(self.hcore_co.as_matrix() + g))
    }

    /// `V = sum_j a_j M_j` over the active dipoles.
    pub fn external_potential(&self, amplitudes: &[f64]) -> Result<HermMatrix> {
        if amplitudes.len() != self.n_active() {
            return Err(Error::DimensionMismatch {
                expected: self.n_active(),
                got: amplitudes.len(),
            });
        }
        let n = self.n_basis();
        let mut v = CMatrix::zeros(n, n);
        for (m, &a) in self.active_dipoles().zip(amplitudes) {
            v += m.as_matrix() * Complex64::new(a, 0.0);
        }
        Ok(HermMatrix::new(v))
    }

    /// `H(P, a) = H0(P) + sum_j a_j M_j`.
    pub fn hamiltonian(&self, p: &HermMatrix, amplitudes: &[f64]) -> Result<HermMatrix> {
        let v = self.external_potential(amplitudes)?;
        let h0 = self.fock(p)?;
        Ok(HermMatrix::new(h0.as_matrix() + v.as_matrix()))
    }

    /// Closed-shell SCF ground state by repeated diagonalization with
    /// Aufbau occupation.
    pub fn ground_state(&self) -> Result<HermMatrix> {
        let n = self.n_basis();
        let nocc = self.n_occupied();
        let density = |f: &HermMatrix| -> Result<HermMatrix> {
            let e = eigh(f)?;
            let occ = e.vectors.columns(0, nocc);
            Ok(HermMatrix::new(occ * occ.adjoint()))
        };
        let mut p = density(&self.hcore_co)?;
        let mut prev_err = f64::INFINITY;
        let mut damping = 0.0_f64;
        for _ in 0..SCF_MAX_ITERS {
            let next = density(&self.fock(&p)?)?;
            let err = commutator_norm(self.fock(&next)?.as_matrix(), &next);
            if err < SCF_TOL {
                return Ok(next);
            }
            if err > prev_err {
                damping = (damping + 0.25).min(0.75);
            }
            prev_err = err;
            p = HermMatrix::new(
                next.as_matrix() * Complex64::new(1.0 - damping, 0.0)
                    + p.as_matrix() * Complex64::new(damping, 0.0),
            );
            debug_assert_eq!(p.dim(), n);
        }
        Err(Error::NoConvergence(SCF_MAX_ITERS))
    }
}

/// Canonical orthogonalization `X = U s^{-1/2}` of the overlap, eigenvalues
/// ascending, each eigenvector signed so its largest-magnitude entry is
/// positive.
pub fn orthogonalize(raw: MolSystemRaw) -> Result<MolSystem> {
    let n = raw.n_basis;
    let (s, mut u) = eigh_real(&raw.overlap)?;
    if s[0] < MIN_OVERLAP_EIGENVALUE {
        return Err(Error::NearSingularOverlap(s[0]));
    }
    for j in 0..n {
        let mut col = u.column_mut(j);
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    let x = DMatrix::from_fn(n, n, |i, j| u[(i, j)] / s[j].sqrt());
    let to_co = |m: &DMatrix<f64>| HermMatrix::from_real(&(x.transpose() * m * &x));
    let hcore_co = to_co(&raw.hcore);
    let dipoles_co = [
        to_co(&raw.dipoles[0]),
        to_co(&raw.dipoles[1]),
        to_co(&raw.dipoles[2]),
    ];
    let active = (0..3)
        .filter(|&j| dipoles_co[j].norm() > ACTIVE_DIPOLE_TOL)
        .collect();
    let xc = x.map(|v| Complex64::new(v, 0.0));
    let g_co = Tensor4::from_linear_map(n, |p_co| {
        let p_ao = &xc * p_co * xc.transpose();
        xc.transpose() * two_electron_ao(&raw, &p_ao) * &xc
    });
    Ok(MolSystem {
        raw,
        x,
        hcore_co,
        dipoles_co,
        active,
        g_co,
    })
}

/// Interchange files shipped with the crate.
pub mod bundled {
    use super::MolSystemRaw;
    use crate::error::{Error, Result};

    pub const H2: &str = "h2_sto3g.json";
    pub const HEHP: &str = "hehp_sto3g.json";
    pub const LIH: &str = "lih_sto3g.json";

    pub fn contents(name: &str) -> Option<&'static str> {
        match name {
            H2 => Some(include_str!("../data/h2_sto3g.json")),
            HEHP => Some(include_str!("../data/hehp_sto3g.json")),
            LIH => Some(include_str!("../data/lih_sto3g.json")),
            _ => None,
        }
    }

    pub fn load(name: &str) -> Result<MolSystemRaw> {
        let text =
            contents(name).ok_or_else(|| Error::Config(format!("no bundled system {name:?}")))?;
        MolSystemRaw::from_json_str(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::herm::max_abs_diff;
    use crate::sampling;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn toy(overlap: f64) -> MolSystemRaw {
        MolSystemRaw {
            name: "toy".into(),
            n_basis: 1,
            n_electrons: 2,
            overlap: DMatrix::from_element(1, 1, overlap),
            hcore: DMatrix::from_element(1, 1, -1.0),
            eri: vec![0.5],
            dipoles: [
                DMatrix::zeros(1, 1),
                DMatrix::zeros(1, 1),
                DMatrix::from_element(1, 1, 0.3),
            ],
        }
    }

    fn h2() -> MolSystem {
        orthogonalize(bundled::load(bundled::H2).unwrap()).unwrap()
    }

    #[test]
    fn bundled_h2_loads() {
        let raw = bundled::load(bundled::H2).unwrap();
        assert_eq!(raw.n_basis, 2);
        assert_eq!(raw.n_electrons, 2);
        assert!((raw.overlap[(0, 1)] - 0.659).abs() < 1e-3);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let text = bundled::contents(bundled::H2).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(MolSystemRaw::from_json_str(cut), Err(Error::Parse(_))));
    }

    #[test]
    fn broken_eri_symmetry_detected() {
        let mut raw = bundled::load(bundled::H2).unwrap();
        raw.eri[1] += 1e-3;
        assert!(matches!(raw.validate(), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn wrong_units_rejected() {
        let text = bundled::contents(bundled::H2)
            .unwrap()
            .replace("hartree_bohr", "ev_angstrom");
        assert!(matches!(MolSystemRaw::from_json_str(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn identity_overlap_leaves_operators() {
        let raw = toy(1.0);
        let sys = orthogonalize(raw).unwrap();
        assert_eq!(sys.transform()[(0, 0)], 1.0);
        assert_eq!(sys.hcore_co()[(0, 0)].re, -1.0);
    }

    #[test]
    fn scalar_overlap_four() {
        let sys = orthogonalize(toy(4.0)).unwrap();
        assert!((sys.transform()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn near_singular_overlap() {
        let mut raw = bundled::load(bundled::H2).unwrap();
        raw.overlap = DMatrix::from_row_slice(2, 2, &[1.0, 1.0 - 1e-9, 1.0 - 1e-9, 1.0]);
        assert!(matches!(orthogonalize(raw), Err(Error::NearSingularOverlap(_))));
    }

    #[test]
    fn h2_transform_orthonormalizes() {
        let sys = h2();
        let x = sys.transform();
        let id = x.transpose() * &sys.raw().overlap * x;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        assert_eq!(sys.active_axes(), &[2]);
    }

    #[test]
    fn fock_at_zero_density_is_core_hamiltonian() {
        let sys = h2();
        let h0 = sys.fock(&HermMatrix::zeros(2)).unwrap();
        assert!(max_abs_diff(&h0, sys.hcore_co()) < 1e-15);
    }

    #[test]
    fn fock_real_for_real_density() {
        let sys = orthogonalize(bundled::load(bundled::LIH).unwrap()).unwrap();
        let p = HermMatrix::from_diagonal(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let h0 = sys.fock(&p).unwrap();
        assert!(h0.iter().all(|z| z.im == 0.0));
        assert!(max_abs_diff(&h0, &h0.transpose()) < 1e-12);
    }

    #[test]
    fn fock_matches_direct_ao_formula() {
        let sys = orthogonalize(bundled::load(bundled::LIH).unwrap()).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let p = sampling::random_projector(&mut rng, 6, 2);
        let xc = sys.transform().map(|v| Complex64::new(v, 0.0));
        let p_ao = &xc * p.as_matrix() * xc.transpose();
        let n = 6;
        let raw = sys.raw();
        let mut g = CMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        // density P[c][d] couples via J (ab|dc) and K (ac|db)
                        g[(a, b)] += p_ao[(c, d)]
                            * (2.0 * raw.eri(a, b, d, c) - raw.eri(a, c, d, b));
                    }
                }
            }
        }
        let hcore = raw.hcore.map(|v| Complex64::new(v, 0.0));
        let expected = xc.transpose() * (hcore + g) * &xc;
        let h0 = sys.fock(&p).unwrap();
        assert!(max_abs_diff(&h0, &expected) < 1e-12);
        // Hermitian output for complex Hermitian input
        assert!(max_abs_diff(&expected, &expected.adjoint()) < 1e-12);
    }

    #[test]
    fn two_electron_part_is_linear() {
        let sys = orthogonalize(bundled::load(bundled::LIH).unwrap()).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
        let p1 = sampling::random_hermitian(&mut rng, 6);
        let p2 = sampling::random_hermitian(&mut rng, 6);
        let (alpha, beta) = (0.7, -1.3);
        let g = |p: &HermMatrix| {
            sys.fock(p).unwrap().as_matrix() - sys.fock(&HermMatrix::zeros(6)).unwrap().as_matrix()
        };
        let combo = HermMatrix::new(
            p1.as_matrix() * Complex64::new(alpha, 0.0) + p2.as_matrix() * Complex64::new(beta, 0.0),
        );
        let lhs = g(&combo);
        let rhs = g(&p1) * Complex64::new(alpha, 0.0) + g(&p2) * Complex64::new(beta, 0.0);
        let scale = lhs.norm().max(1.0);
        assert!(max_abs_diff(&lhs, &rhs) < 1e-12 * scale);
    }

    #[test]
    fn hamiltonian_adds_dipoles() {
        let sys = h2();
        let p = HermMatrix::from_diagonal(&[0.0, 1.0]);
        let h = sys.hamiltonian(&p, &[0.0]).unwrap();
        assert!(max_abs_diff(&h, &sys.fock(&p).unwrap()) < 1e-15);
        let h = sys.hamiltonian(&p, &[0.5]).unwrap();
        let expected = sys.fock(&p).unwrap().as_matrix() + sys.dipole_co(2).as_matrix() * Complex64::new(0.5, 0.0);
        assert!(max_abs_diff(&h, &expected) < 1e-15);
        assert!(matches!(
            sys.hamiltonian(&p, &[0.1, 0.2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn active_sets_of_bundled_systems() {
        let hehp = orthogonalize(bundled::load(bundled::HEHP).unwrap()).unwrap();
        assert_eq!(hehp.active_axes(), &[2]);
        let lih = orthogonalize(bundled::load(bundled::LIH).unwrap()).unwrap();
        assert_eq!(lih.active_axes(), &[0, 1, 2]);
        assert_eq!(lih.n_active(), 3);
    }

    #[test]
    fn toy_ground_state() {
        let sys = orthogonalize(toy(1.0)).unwrap();
        let p = sys.ground_state().unwrap();
        assert!((p[(0, 0)].re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ground_states_are_stationary_projectors() {
        for name in [bundled::H2, bundled::HEHP, bundled::LIH] {
            let sys = orthogonalize(bundled::load(name).unwrap()).unwrap();
            let p = sys.ground_state().unwrap();
            let n = sys.n_basis();
            assert!((p.trace_re() - sys.n_occupied() as f64).abs() < 1e-12, "{name}");
            assert!((p.as_matrix() * p.as_matrix() - p.as_matrix()).norm() < 1e-10, "{name}");
            let f = sys.fock(&p).unwrap();
            assert!(commutator_norm(&f, &p) < 1e-8, "{name}");
            assert_eq!(p.dim(), n);
        }
    }

    #[test]
    fn h2_ground_state_is_second_co_orbital() {
        // by symmetry the CO orbitals of H2 are the MOs; the bonding one has the larger
        // overlap eigenvalue and therefore comes second
        let p = h2().ground_state().unwrap();
        assert!(max_abs_diff(&p, &HermMatrix::from_diagonal(&[0.0, 1.0])) < 1e-10);
    }
}
