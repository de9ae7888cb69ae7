//! Closed-loop modified-midpoint unitary transform (MMUT) propagation.
//!
//! The first step uses `U0 = exp(-i dt H(P0))`, `P1 = U0 P0 U0†`; every
//! later step leapfrogs `P(k+1) = Uk P(k-1) Uk†` with
//! `Uk = exp(-2i dt H(Pk))`. The field entering `H(Pk)` is the feedback
//! law evaluated at `Pk`.

use log::warn;
use num_complex::Complex64;
use serde::Serialize;

use crate::controller::{amplitudes, NetConfig, Theta};
use crate::error::{Error, Result};
use crate::herm::{CMatrix, HermBasis, HermMatrix, I};
use crate::matexp::expm_antihermitian;
use crate::molsys::MolSystem;

pub const UNITARITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const IDEMPOTENCY_TOL: f64 = 1e-8;
/// A step fails once an invariant exceeds this multiple of its tolerance.
const BREACH_FACTOR: f64 = 10.0;

/// Forward states, step propagators and the recorded open-loop signal.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `P^0 ... P^K`.
    pub states: Vec<HermMatrix>,
    /// `U^0 ... U^{K-1}`.
    pub propagators: Vec<CMatrix>,
    /// `a(P^k)` for `k = 0 ... K-1`, paired with time `k dt`.
    pub amplitudes: Vec<Vec<f64>>,
    pub dt: f64,
    pub report: InvariantReport,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.propagators.len()
    }

    pub fn final_state(&self) -> &HermMatrix {
        self.states.last().unwrap()
    }
}

/// Largest invariant defects seen along a trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct InvariantReport {
    pub max_trace_error: f64,
    pub max_idempotency_error: f64,
    pub max_unitarity_error: f64,
    pub max_hermiticity_error: f64,
}

/// Feedback-driven dynamics for one parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub sys: &'a MolSystem,
    pub basis: &'a HermBasis,
    pub cfg: &'a NetConfig,
    pub theta: &'a Theta,
}

fn conjugate(u: &CMatrix, p: &CMatrix) -> HermMatrix {
    HermMatrix::new(u * p * u.adjoint())
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        sys: &'a MolSystem,
        basis: &'a HermBasis,
        cfg: &'a NetConfig,
        theta: &'a Theta,
    ) -> Self {
        ClosedLoop {
            sys,
            basis,
            cfg,
            theta,
        }
    }

    /// `H(P, a(P))` and the amplitudes used.
    pub fn hamiltonian(&self, p: &HermMatrix) -> Result<(HermMatrix, Vec<f64>)> {
        let a = amplitudes(self.basis, self.cfg, self.theta, p)?;
        Ok((self.sys.hamiltonian(p, &a)?, a))
    }

    /// First MMUT step from `P0`.
    pub fn step_first(&self, p0: &HermMatrix, dt: f64) -> Result<(HermMatrix, CMatrix, Vec<f64>)> {
        let (h, a) = self.hamiltonian(p0)?;
        let u = expm_antihermitian(&h, -I * dt)?;
        Ok((conjugate(&u, p0), u, a))
    }

    /// Leapfrog step leaving `P^k` (for `k >= 1`).
    pub fn step_mmut(
        &self,
        pk: &HermMatrix,
        pkm1: &HermMatrix,
        dt: f64,
    ) -> Result<(HermMatrix, CMatrix, Vec<f64>)> {
        let (h, a) = self.hamiltonian(pk)?;
        let u = expm_antihermitian(&h, -I * (2.0 * dt))?;
        Ok((conjugate(&u, pkm1), u, a))
    }

    /// Runs `n_steps` MMUT steps from `p0`, checking the conservation laws
    /// after every step.
    pub fn propagate(&self, p0: &HermMatrix, dt: f64, n_steps: usize) -> Result<Trajectory> {
        if n_steps == 0 {
            return Err(Error::Config("step count must be at least 1".into()));
        }
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("invalid time step {dt}")));
        }
        let target_trace = self.sys.n_occupied() as f64;
        let n = p0.dim();
        let id = CMatrix::identity(n, n);
        let idem = |p: &HermMatrix| (p.as_matrix() * p.as_matrix() - p.as_matrix()).norm();
        let check_idempotency = idem(p0) <= IDEMPOTENCY_TOL;
        if !check_idempotency {
            warn!(
                "initial density is not idempotent (defect {:.3e}); idempotency will not be tracked",
                idem(p0)
            );
        }
        if (p0.trace_re() - target_trace).abs() > 1e-8 {
            return Err(Error::Config(format!(
                "initial density has trace {} but N_e/2 = {target_trace}",
                p0.trace_re()
            )));
        }

        let mut report = InvariantReport::default();
        let mut check = |k: usize, p: &HermMatrix, u: &CMatrix, raw: &CMatrix| -> Result<()> {
            let tr = (p.trace_re() - target_trace).abs();
            let un = (u.adjoint() * u - &id).norm();
            let herm = (raw - raw.adjoint()).norm();
            report.max_trace_error = report.max_trace_error.max(tr);
            report.max_unitarity_error = report.max_unitarity_error.max(un);
            report.max_hermiticity_error = report.max_hermiticity_error.max(herm);
            let breach = |what: &str, value: f64, tol: f64| {
                if value > BREACH_FACTOR * tol || !value.is_finite() {
                    Err(Error::InvariantBreach {
                        step: k,
                        what: format!("{what} defect {value:.3e}"),
                    })
                } else {
                    Ok(())
                }
            };
            breach("trace", tr, TRACE_TOL)?;
            breach("unitarity", un, UNITARITY_TOL)?;
            if check_idempotency {
                let id_err = idem(p);
                report.max_idempotency_error = report.max_idempotency_error.max(id_err);
                breach("idempotency", id_err, IDEMPOTENCY_TOL)?;
            }
            Ok(())
        };

        let mut states = Vec::with_capacity(n_steps + 1);
        let mut propagators = Vec::with_capacity(n_steps);
        let mut amps = Vec::with_capacity(n_steps);
        states.push(p0.clone());

        let (h0, a0) = self.hamiltonian(p0)?;
        let u0 = expm_antihermitian(&h0, -I * dt)?;
        let raw = &u0 * p0.as_matrix() * u0.adjoint();
        let p1 = HermMatrix::new(raw.clone());
        check(1, &p1, &u0, &raw)?;
        states.push(p1);
        propagators.push(u0);
        amps.push(a0);

        for k in 1..n_steps {
            let (h, a) = self.hamiltonian(&states[k])?;
            let u = expm_antihermitian(&h, -I * (2.0 * dt))?;
            let raw = &u * states[k - 1].as_matrix() * u.adjoint();
            let next = HermMatrix::new(raw.clone());
            check(k + 1, &next, &u, &raw)?;
            states.push(next);
            propagators.push(u);
            amps.push(a);
        }

        Ok(Trajectory {
            states,
            propagators,
            amplitudes: amps,
            dt,
            report,
        })
    }
}

/// `exp(+i dt H(P0))` applied to `P1`; recovers `P0` for a first step.
pub fn reverse_first_step(h0: &HermMatrix, p1: &HermMatrix, dt: f64) -> Result<HermMatrix> {
    let back = expm_antihermitian(h0, Complex64::new(0.0, dt))?;
    Ok(conjugate(&back, p1))
}
